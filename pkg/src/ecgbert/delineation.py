"""R-peak detection and P/QRS/T/background delineation of a window."""

from __future__ import annotations

import enum
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import pywt
from scipy import signal as sps
from scipy.ndimage import uniform_filter1d


class WaveType(str, enum.Enum):
    P = "P"
    QRS = "QRS"
    T = "T"
    BG = "BG"


@dataclass(frozen=True)
class WaveSegment:
    wave_type: WaveType
    onset: int  # inclusive
    offset: int  # exclusive
    r_index: int | None = None

    def __post_init__(self):
        if not 0 <= self.onset < self.offset:
            raise ValueError(f"bad segment bounds [{self.onset}, {self.offset})")

    def __len__(self) -> int:
        return self.offset - self.onset


@dataclass(frozen=True)
class Heartbeat:
    r_index: int
    segments: tuple[WaveSegment, ...]

    @property
    def start(self) -> int:
        return self.segments[0].onset

    @property
    def end(self) -> int:
        return self.segments[-1].offset

    def wave(self, wave_type: WaveType) -> WaveSegment | None:
        for s in self.segments:
            if s.wave_type is wave_type:
                return s
        return None

    @property
    def complete(self) -> bool:
        return all(self.wave(t) is not None for t in (WaveType.P, WaveType.QRS, WaveType.T))


def tile_segments(waves: list[WaveSegment], start: int, end: int | None = None) -> list[WaveSegment]:
    """Fill every gap of ``[start, end)`` not covered by ``waves`` with BG.

    Called as ``tile_segments(waves, n)`` the range is ``[0, n)``.
    """
    if end is None:
        start, end = 0, start
    out: list[WaveSegment] = []
    pos = start
    for w in sorted(waves, key=lambda s: s.onset):
        if w.onset < pos or w.offset > end:
            raise ValueError(f"wave {w} overlaps its neighbour or leaves [{start}, {end})")
        if w.onset > pos:
            out.append(WaveSegment(WaveType.BG, pos, w.onset))
        out.append(w)
        pos = w.offset
    if pos < end:
        out.append(WaveSegment(WaveType.BG, pos, end))
    return out


def check_tiling(segments: list[WaveSegment], n: int) -> None:
    pos = 0
    for s in segments:
        if s.onset != pos:
            raise AssertionError(f"gap or overlap at sample {pos}: next segment starts at {s.onset}")
        pos = s.offset
    if pos != n:
        raise AssertionError(f"segments end at {pos}, window has {n} samples")


# --------------------------------------------------------------------------
# R peaks


@dataclass(frozen=True)
class DetectorParams:
    band: tuple[float, float] = (8.0, 16.0)
    ma_window_s: float = 0.08
    refractory_s: float = 0.2
    threshold_mix: float = 0.45
    buffer_size: int = 8
    searchback_factor: float = 1.5
    searchback_mix: float = 0.5  # fraction of the threshold a search-back candidate must reach
    r_refine_s: float = 0.06


def _qrs_feature(x: np.ndarray, fs: float, p: DetectorParams) -> np.ndarray:
    sos = sps.butter(2, p.band, btype="bandpass", fs=fs, output="sos")
    padlen = min(3 * (2 * len(sos) + 1), len(x) - 1)
    bp = sps.sosfiltfilt(sos, x, padlen=padlen)
    d = np.abs(np.diff(bp, prepend=bp[0]))
    return uniform_filter1d(d, size=max(1, int(round(p.ma_window_s * fs))), mode="nearest")


def detect_r_peaks(x, fs: float, params: DetectorParams = DetectorParams()) -> list[int]:
    """Hamilton-style detector on the 80 ms averaged, rectified band-passed slope.

    Peaks of the feature are classed as QRS or noise against an adaptive
    threshold ``noise + mix * (qrs - noise)`` built from running means of the
    last eight QRS and noise peaks.  A gap longer than 1.5 mean RR triggers a
    search-back for the largest skipped peak.
    """
    x = np.asarray(x, dtype=np.float64)
    p = params
    if len(x) < int(fs * 0.5) or not np.any(x):
        return []
    feat = _qrs_feature(x, fs, p)
    if feat.max() <= 0:
        return []
    peaks, _ = sps.find_peaks(feat)
    if len(peaks) == 0:
        return []
    refractory = int(round(p.refractory_s * fs))

    # seed the QRS buffer with the largest feature value of each of the first seconds
    sec = int(fs)
    seeds = [feat[i : i + sec].max() for i in range(0, min(len(feat), p.buffer_size * sec), sec)]
    qrs_buf = list(seeds[-p.buffer_size :])
    noise_buf: list[float] = [0.0]
    rr_buf: list[int] = []

    def threshold() -> float:
        spk = float(np.mean(qrs_buf[-p.buffer_size :]))
        npk = float(np.mean(noise_buf[-p.buffer_size :]))
        return npk + p.threshold_mix * (spk - npk)

    detected: list[int] = []
    skipped: list[int] = []  # noise peaks since the last detection
    for pk in peaks:
        if detected and pk - detected[-1] < refractory:
            continue
        # search-back over skipped peaks when the gap is too long
        if detected and rr_buf:
            mean_rr = float(np.mean(rr_buf[-p.buffer_size :]))
            if pk - detected[-1] > p.searchback_factor * mean_rr:
                cands = [s for s in skipped if s - detected[-1] >= refractory and pk - s >= refractory]
                if cands:
                    best = max(cands, key=lambda s: feat[s])
                    if feat[best] > p.searchback_mix * threshold():
                        rr_buf.append(best - detected[-1])
                        detected.append(best)
                        qrs_buf.append(feat[best])
                        skipped = []
        if feat[pk] > threshold():
            if detected:
                rr_buf.append(pk - detected[-1])
            detected.append(pk)
            qrs_buf.append(feat[pk])
            skipped = []
        else:
            noise_buf.append(feat[pk])
            skipped.append(pk)

    # locate R on the signal itself near each feature peak
    half = int(round(p.r_refine_s * fs))
    out: list[int] = []
    for d in detected:
        lo, hi = max(0, d - half), min(len(x), d + half + 1)
        r = lo + int(np.argmax(x[lo:hi]))
        if not out or r - out[-1] >= refractory:
            out.append(r)
        elif x[r] > x[out[-1]]:
            out[-1] = r
    return out


# --------------------------------------------------------------------------
# wave delineation


@dataclass(frozen=True)
class DelineationParams:
    wavelet: str = "db4"
    qrs_scale: int = 2
    p_scale: int = 3
    t_scale: int = 4
    qrs_search_s: float = 0.08
    p_search_s: tuple[float, float] = (0.20, 0.04)  # before QRS onset
    t_search_max_s: float = 0.40
    t_search_rr_fraction: float = 0.6
    boundary_margin_s: float = 0.08
    gamma_p: float = 0.25
    gamma_t: float = 0.25
    qrs_maxima_fraction: float = 0.06
    xi_qrs: float = 0.2
    xi_qrs_local_min: float = 0.4
    xi_wave: float = 0.2
    xi_t: float = 0.25
    xi_local_min: float = 0.4


@lru_cache(maxsize=16)
def _smoothing_kernel(wavelet: str, level: int) -> np.ndarray:
    """Zero-phase low-pass: the level-``level`` scaling cascade correlated with itself."""
    h = np.asarray(pywt.Wavelet(wavelet).dec_lo)
    f = np.array([1.0])
    for i in range(level):
        up = np.zeros((len(h) - 1) * 2**i + 1)
        up[:: 2**i] = h
        f = np.convolve(f, up)
    f = np.convolve(f, f[::-1])
    return f / f.sum()


def wavelet_transform(x, level: int, wavelet: str = "db4") -> np.ndarray:
    """Derivative of the signal smoothed at dyadic scale ``2**level``.

    The smoothing kernel is symmetric, so modulus maxima line up with the
    slopes of the signal without delay.
    """
    x = np.asarray(x, dtype=np.float64)
    k = _smoothing_kernel(wavelet, level)
    pad = min(len(k), len(x) - 1)
    xp = np.pad(x, pad, mode="symmetric")
    s = sps.fftconvolve(xp, k, mode="same")[pad : pad + len(x)]
    return np.gradient(s)


def _local_maxima(m: np.ndarray) -> np.ndarray:
    if len(m) < 3:
        return np.array([int(np.argmax(m))]) if len(m) else np.array([], dtype=int)
    idx = np.where((m[1:-1] >= m[:-2]) & (m[1:-1] > m[2:]))[0] + 1
    return idx


def _extent(
    w: np.ndarray, first: int, last: int, xi: float, lo: int, hi: int, xi_min: float = 0.0
) -> tuple[int, int]:
    """Grow ``[first, last]`` outwards, within ``[lo, hi)``, while |w| stays above ``xi`` of the bounding maxima.

    The scan also stops at a local minimum of |w| lying below ``xi_min`` of the maximum.
    """
    m = np.abs(w)
    thr, stop = xi * m[first], xi_min * m[first]
    i = first
    while i > lo and m[i - 1] >= thr and not (m[i - 1] < stop and i - 1 > lo and m[i - 2] > m[i - 1]):
        i -= 1
    thr, stop = xi * m[last], xi_min * m[last]
    j = last
    while j < hi - 1 and m[j + 1] >= thr and not (m[j + 1] < stop and j + 2 < hi and m[j + 2] > m[j + 1]):
        j += 1
    return i, j + 1


def _find_wave(
    w: np.ndarray,
    a: int,
    b: int,
    rms: float,
    gamma: float,
    xi: float,
    lo: int,
    hi: int,
    n: int,
    xi_min: float = 0.0,
) -> tuple[int, int] | None:
    """Monophasic wave in the search window ``[a, b)``: a pair of opposite-slope maxima."""
    a, b = max(a, lo), min(b, hi)
    if b - a < 3:
        return None
    m = np.abs(w[a:b])
    # interior local maxima only: slopes leaking in from neighbouring waves peak at the edges
    maxima = [a + i for i in _local_maxima(m) if 0 < i < len(m) - 1 and m[i] > gamma * rms]
    if not maxima:
        return None
    peak = max(maxima, key=lambda i: abs(w[i]))
    # partner maximum of opposite sign on either side, the larger one wins
    cand = [i for i in maxima if np.sign(w[i]) == -np.sign(w[peak])]
    if not cand:
        return None
    partner = max(cand, key=lambda i: abs(w[i]))
    first, last = min(peak, partner), max(peak, partner)
    on, off = _extent(w, first, last, xi, lo, hi, xi_min)
    if on <= 0 or off >= n:
        return None  # not fully inside the window
    return on, off


def _blank(x: np.ndarray, spans: list[tuple[int, int]]) -> np.ndarray:
    """Replace each span by the straight line joining its outer neighbours."""
    y = x.copy()
    n = len(x)
    for on, off in spans:
        a, b = max(on - 1, 0), min(off, n - 1)
        if b > a:
            y[a : b + 1] = np.linspace(x[a], x[b], b - a + 1)
    return y


def delineate(x, fs: float, r_peaks, params: DelineationParams = DelineationParams()) -> list[Heartbeat]:
    """Split a window into heartbeats and locate P, QRS and T in each.

    All QRS complexes are delineated first, then every P wave (bounded by the
    previous QRS), then every T wave (bounded by the next P or QRS).  Beat
    ``k`` ends halfway through the background gap separating its last wave
    from the first wave of beat ``k+1``; the outer beats reach the window edges.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    p = params
    r_peaks = sorted({int(r) for r in r_peaks if 0 <= r < n})
    if not r_peaks:
        return []
    wq = wavelet_transform(x, p.qrs_scale, p.wavelet)
    rms_q = float(np.sqrt(np.mean(wq**2)))

    def s2n(sec: float) -> int:
        return int(round(sec * fs))

    nb = len(r_peaks)
    mids = [0] + [(r_peaks[i] + r_peaks[i + 1]) // 2 for i in range(nb - 1)] + [n]
    margin = s2n(p.boundary_margin_s)

    qrs: list[WaveSegment] = []
    for k, r in enumerate(r_peaks):
        lo, hi = mids[k], mids[k + 1]
        qa, qb = max(lo, r - s2n(p.qrs_search_s)), min(hi, r + s2n(p.qrs_search_s) + 1)
        m = np.abs(wq[qa:qb])
        maxima = qa + _local_maxima(m)
        sig = [i for i in maxima if abs(wq[i]) >= max(p.qrs_maxima_fraction * m.max(), 0.5 * rms_q)]
        if sig:
            on, off = _extent(wq, sig[0], sig[-1], p.xi_qrs, max(lo, qa - margin), min(hi, qb + margin), p.xi_qrs_local_min)
        else:
            on, off = r, r + 1
        qrs.append(WaveSegment(WaveType.QRS, min(on, r), max(off, r + 1), r))

    # P and T are read off a QRS-free copy so the large QRS slopes cannot leak into their scales
    xb = _blank(x, [(q.onset, q.offset) for q in qrs])
    wp = wavelet_transform(xb, p.p_scale, p.wavelet)
    wt = wp if p.t_scale == p.p_scale else wavelet_transform(xb, p.t_scale, p.wavelet)
    rms_p = float(np.sqrt(np.mean(wp**2)))
    rms_t = float(np.sqrt(np.mean(wt**2)))

    pw: list[WaveSegment | None] = []
    for k, q in enumerate(qrs):
        floor = qrs[k - 1].offset if k else 0
        pa, pb = q.onset - s2n(p.p_search_s[0]), q.onset - s2n(p.p_search_s[1])
        found = None
        if pa >= 0:
            found = _find_wave(wp, max(pa, floor), pb, rms_p, p.gamma_p, p.xi_wave, max(floor, pa - margin), q.onset, n, p.xi_local_min)
        pw.append(WaveSegment(WaveType.P, *found) if found else None)

    tw: list[WaveSegment | None] = []
    for k, q in enumerate(qrs):
        if k + 1 < nb:
            rr = r_peaks[k + 1] - r_peaks[k]
            ceil = pw[k + 1].onset if pw[k + 1] else qrs[k + 1].onset
        else:
            rr = r_peaks[k] - r_peaks[k - 1] if k else s2n(1.0)
            ceil = n
        t_len = int(round(min(p.t_search_rr_fraction * rr, s2n(p.t_search_max_s))))
        ta, tb = q.offset + 1, q.offset + t_len + 1
        found = None
        if tb <= n:
            found = _find_wave(wt, ta, min(tb, ceil), rms_t, p.gamma_t, p.xi_t, q.offset, min(ceil, tb + margin), n, p.xi_local_min)
        tw.append(WaveSegment(WaveType.T, *found) if found else None)

    groups = [[w for w in (pw[k], qrs[k], tw[k]) if w is not None] for k in range(nb)]
    cuts = [0]
    for k in range(nb - 1):
        a, b = groups[k][-1].offset, groups[k + 1][0].onset
        cuts.append((a + b) // 2 if b > a else a)
    cuts.append(n)
    return [Heartbeat(r_peaks[k], tuple(tile_segments(groups[k], cuts[k], cuts[k + 1]))) for k in range(nb)]


def window_segments(beats: list[Heartbeat], n: int) -> list[WaveSegment]:
    """Segments of all beats in order; a single BG segment when there are none."""
    if not beats:
        return [WaveSegment(WaveType.BG, 0, n)]
    segs = [s for b in beats for s in b.segments]
    check_tiling(segs, n)
    return segs


def segmentation_quality(beats: list[Heartbeat]) -> float:
    """Fraction of beats with all of P, QRS and T (0 for no beats)."""
    if not beats:
        return 0.0
    return sum(b.complete for b in beats) / len(beats)
