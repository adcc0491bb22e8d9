"""Powerline and baseline-wander removal."""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, replace

import numpy as np
import pywt
from scipy import signal as sps

from .signal_io import Window

BASELINE_BOUND_HZ = 0.67


def default_dwt_levels(fs: float, bound_hz: float = BASELINE_BOUND_HZ) -> int:
    """Smallest level whose approximation band ``[0, fs / 2**(L+1)]`` lies below ``bound_hz``."""
    level = 1
    while fs / 2 ** (level + 1) >= bound_hz:
        level += 1
    return level


@dataclass(frozen=True)
class FilterSpec:
    order: int = 2
    stop_lo: float = 50.0
    stop_hi: float = 60.0
    wavelet: str = "db4"
    dwt_levels: int | None = None  # None -> default_dwt_levels(fs)
    notch_mode: str = "bandstop"  # or "notches": separate notches at stop_lo and stop_hi

    def __post_init__(self):
        if not 0 < self.stop_lo < self.stop_hi:
            raise ValueError(f"need 0 < stop_lo < stop_hi, got {self.stop_lo}, {self.stop_hi}")
        if self.dwt_levels is not None and self.dwt_levels < 1:
            raise ValueError(f"dwt_levels must be >= 1, got {self.dwt_levels}")
        if self.notch_mode not in ("bandstop", "notches"):
            raise ValueError(f"unknown notch_mode {self.notch_mode!r}")
        if self.order < 1:
            raise ValueError(f"order must be >= 1, got {self.order}")

    def levels_for(self, fs: float) -> int:
        return self.dwt_levels if self.dwt_levels is not None else default_dwt_levels(fs)


def bandstop_sos(fs: float, spec: FilterSpec) -> np.ndarray:
    if not fs > 2 * spec.stop_hi:
        raise ValueError(f"fs={fs} Hz cannot hold a stopband up to {spec.stop_hi} Hz")
    if spec.notch_mode == "bandstop":
        return sps.butter(spec.order, [spec.stop_lo, spec.stop_hi], btype="bandstop", fs=fs, output="sos")
    sos = [sps.tf2sos(*sps.iirnotch(f0, 30.0, fs=fs)) for f0 in (spec.stop_lo, spec.stop_hi)]
    return np.vstack(sos)


def bandstop(x, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Zero-phase Butterworth band-stop (forward-backward)."""
    sos = bandstop_sos(fs, spec)
    x = np.asarray(x, dtype=np.float64)
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    return sps.sosfiltfilt(sos, x, padlen=max(padlen, 0))


def remove_baseline(x, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    """Subtract the baseline rebuilt from the DWT approximation band alone."""
    x = np.asarray(x, dtype=np.float64)
    level = spec.levels_for(fs)
    if len(x) < 2**level:
        raise ValueError(f"signal of {len(x)} samples is shorter than 2**{level}")
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")  # pywt warns when level exceeds its boundary-effect advice
        coeffs = pywt.wavedec(x, spec.wavelet, mode="symmetric", level=level)
        coeffs = [coeffs[0]] + [np.zeros_like(c) for c in coeffs[1:]]
        baseline = pywt.waverec(coeffs, spec.wavelet, mode="symmetric")[: len(x)]
    return x - baseline


def preprocess_signal(x, fs: float, spec: FilterSpec = FilterSpec()) -> np.ndarray:
    return remove_baseline(bandstop(x, fs, spec), fs, spec)


def preprocess_window(w: Window, spec: FilterSpec = FilterSpec()) -> Window:
    return replace(w, samples=preprocess_signal(w.samples, w.fs, spec))


def bandstop_gain(f: float, fs: float, spec: FilterSpec = FilterSpec()) -> float:
    """Single-pass magnitude response of the designed band-stop at ``f`` Hz."""
    _, h = sps.sosfreqz(bandstop_sos(fs, spec), worN=[f], fs=fs)
    return float(abs(h[0]))


def rms_db(x) -> float:
    return 20 * math.log10(float(np.sqrt(np.mean(np.square(x)))) + 1e-300)
