"""ECG ingestion: WFDB format 212, CSV, resampling and fixed-length windows."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy import signal as sps

from .errors import DataError

PIPELINE_FS = 250
WINDOW_SECONDS = 10


@dataclass(frozen=True)
class EcgRecord:
    samples: np.ndarray  # mV, float64
    fs: int
    record_id: str = ""
    patient_id: str = ""
    lead: str = "II"

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1:
            raise DataError(f"record {self.record_id!r}: samples must be 1-D, got shape {x.shape}")
        if not np.all(np.isfinite(x)):
            raise DataError(f"record {self.record_id!r}: non-finite sample values")
        if int(self.fs) != self.fs or self.fs <= 0:
            raise DataError(f"record {self.record_id!r}: fs must be a positive integer, got {self.fs}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "fs", int(self.fs))

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def duration_s(self) -> float:
        return len(self.samples) / self.fs


@dataclass(frozen=True)
class Window:
    samples: np.ndarray
    source: str
    start_sample: int
    fs: int = PIPELINE_FS
    patient_id: str = ""

    def __len__(self) -> int:
        return len(self.samples)


# --------------------------------------------------------------------------
# WFDB format 212


def decode_212(data: bytes) -> np.ndarray:
    """Unpack 12-bit two's-complement pairs stored in 3-byte groups."""
    if len(data) % 3:
        raise DataError(f"truncated format-212 data: {len(data)} bytes is not a multiple of 3")
    b = np.frombuffer(data, dtype=np.uint8).reshape(-1, 3).astype(np.int32)
    s0 = ((b[:, 1] & 0x0F) << 8) | b[:, 0]
    s1 = ((b[:, 1] & 0xF0) << 4) | b[:, 2]
    out = np.empty(2 * len(b), dtype=np.int32)
    out[0::2] = s0
    out[1::2] = s1
    out[out >= 2048] -= 4096
    return out


def encode_212(values) -> bytes:
    """Pack integers in [-2048, 2047] into format 212 (zero-padded to even count)."""
    v = np.asarray(values, dtype=np.int64)
    if v.size and (v.min() < -2048 or v.max() > 2047):
        raise ValueError("format 212 holds 12-bit values in [-2048, 2047]")
    if len(v) % 2:
        v = np.append(v, 0)
    u = (v & 0xFFF).reshape(-1, 2)
    out = np.empty((len(u), 3), dtype=np.uint8)
    out[:, 0] = u[:, 0] & 0xFF
    out[:, 1] = ((u[:, 0] >> 8) & 0x0F) | ((u[:, 1] >> 4) & 0xF0)
    out[:, 2] = u[:, 1] & 0xFF
    return out.tobytes()


@dataclass
class _SignalSpec:
    filename: str
    fmt: str
    gain: float
    baseline: int
    adc_res: int
    adc_zero: int
    description: str


def _parse_header(text: str) -> tuple[str, int, float, int, list[_SignalSpec]]:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln and not ln.startswith("#")]
    if not lines:
        raise DataError("empty WFDB header")
    rec = lines[0].split()
    if len(rec) < 2:
        raise DataError(f"malformed WFDB record line: {lines[0]!r}")
    name = rec[0]
    if "/" in name:
        raise DataError("multi-segment WFDB records are not supported")
    n_sig = int(rec[1])
    fs = 250.0
    if len(rec) > 2:
        fs = float(rec[2].split("/")[0].split("(")[0])
    n_samples = int(rec[3]) if len(rec) > 3 else 0
    sigs = []
    for ln in lines[1 : 1 + n_sig]:
        f = ln.split()
        if len(f) < 2:
            raise DataError(f"malformed WFDB signal line: {ln!r}")
        fmt = f[1].split("x")[0].split(":")[0].split("+")[0]
        gain_field = f[2] if len(f) > 2 else "200"
        adc_res = int(f[3]) if len(f) > 3 else 12
        adc_zero = int(f[4]) if len(f) > 4 else 0
        gain_txt = gain_field.split("/")[0]
        baseline = adc_zero
        if "(" in gain_txt:
            gain_txt, base_txt = gain_txt.split("(")
            baseline = int(base_txt.rstrip(")"))
        gain = float(gain_txt)
        desc = " ".join(f[8:]) if len(f) > 8 else f"sig{len(sigs)}"
        sigs.append(_SignalSpec(f[0], fmt, gain, baseline, adc_res, adc_zero, desc))
    if len(sigs) != n_sig:
        raise DataError(f"header declares {n_sig} signals but lists {len(sigs)}")
    return name, n_sig, fs, n_samples, sigs


def read_wfdb(header_text: str, dat_bytes: bytes, channel: int = 0, patient_id: str | None = None) -> EcgRecord:
    """Decode one channel of a single-segment format-212 record into millivolts."""
    name, n_sig, fs, n_samples, sigs = _parse_header(header_text)
    if not 0 <= channel < n_sig:
        raise DataError(f"channel {channel} out of range for {n_sig}-signal record {name!r}")
    for s in sigs:
        if s.fmt != "212":
            raise DataError(f"unsupported WFDB format {s.fmt!r} in record {name!r} (only 212)")
    spec = sigs[channel]
    if spec.gain == 0:
        raise DataError(f"record {name!r} channel {channel}: gain is 0")
    raw = decode_212(dat_bytes)
    n_frames = len(raw) // n_sig
    if n_samples:
        if n_frames < n_samples:
            raise DataError(f"truncated .dat for {name!r}: {n_frames} frames, header says {n_samples}")
        n_frames = n_samples
    adc = raw[: n_frames * n_sig].reshape(n_frames, n_sig)[:, channel]
    mv = (adc.astype(np.float64) - spec.baseline) / spec.gain
    if fs != int(fs):
        raise DataError(f"record {name!r}: non-integer sampling rate {fs}")
    return EcgRecord(mv, int(fs), record_id=name, patient_id=patient_id or name, lead=spec.description)


def write_wfdb(record: EcgRecord, gain: float = 200.0, baseline: int = 0) -> tuple[str, bytes]:
    """Single-channel format-212 header and data for ``record``."""
    adc = np.round(record.samples * gain + baseline).astype(np.int64)
    if adc.min(initial=0) < -2048 or adc.max(initial=0) > 2047:
        raise ValueError("signal exceeds the 12-bit range at this gain")
    name = record.record_id or "record"
    header = (
        f"{name} 1 {record.fs} {len(adc)}\n"
        f"{name}.dat 212 {gain:g}({baseline})/mV 12 {baseline} {int(adc[0]) if len(adc) else 0} 0 0 {record.lead}\n"
    )
    return header, encode_212(adc)


# --------------------------------------------------------------------------
# CSV


def read_csv(text: str, fs: int, record_id: str = "", patient_id: str = "") -> EcgRecord:
    lines = [ln.strip() for ln in text.splitlines()]
    lines = [ln for ln in lines if ln]
    if not lines:
        raise DataError(f"empty CSV {record_id!r}")
    values = []
    for i, ln in enumerate(lines):
        try:
            v = float(ln)
        except ValueError:
            if i == 0:
                continue  # header line
            raise DataError(f"CSV {record_id!r} line {i + 1}: not a number: {ln!r}") from None
        if not np.isfinite(v):
            raise DataError(f"CSV {record_id!r} line {i + 1}: non-finite value {ln!r}")
        values.append(v)
    if not values:
        raise DataError(f"CSV {record_id!r} holds no samples")
    return EcgRecord(np.array(values), fs, record_id=record_id, patient_id=patient_id or record_id)


def write_csv(samples) -> str:
    return "".join(f"{v:.6f}\n" for v in np.asarray(samples, dtype=np.float64))


# --------------------------------------------------------------------------
# resampling and windowing


def resample(record: EcgRecord, target_fs: int, taps_per_phase: int = 64, beta: float = 8.0) -> EcgRecord:
    """Polyphase windowed-sinc resampling with a Kaiser window.

    The low-pass cutoff sits at ``min(fs, target_fs) / 2``.
    """
    if target_fs <= 0:
        raise ValueError(f"target_fs must be positive, got {target_fs}")
    if target_fs == record.fs:
        return record
    ratio = Fraction(int(target_fs), record.fs)
    up, down = ratio.numerator, ratio.denominator
    n_out = int(round(len(record) * target_fs / record.fs))
    rate = max(up, down)
    h = sps.firwin(taps_per_phase * rate + 1, 1.0 / rate, window=("kaiser", beta)) * up
    y = sps.resample_poly(record.samples, up, down, window=h, padtype="line")
    if len(y) < n_out:
        y = np.pad(y, (0, n_out - len(y)), mode="edge")
    return EcgRecord(y[:n_out], int(target_fs), record.record_id, record.patient_id, record.lead)


def window(record: EcgRecord, duration_s: float = WINDOW_SECONDS) -> list[Window]:
    """Non-overlapping windows; the short remainder is dropped."""
    size = int(round(duration_s * record.fs))
    n = len(record) // size
    return [
        Window(record.samples[i * size : (i + 1) * size].copy(), record.record_id, i * size, record.fs, record.patient_id)
        for i in range(n)
    ]
