"""Deterministic synthetic ECG with exact ground truth.

Each beat is the sum of five Gaussian bumps (P, Q, R, S, T) placed around the
R time.  Wave extents are defined as ``center +/- BOUNDARY_SIGMAS * width`` so
ground-truth onsets and offsets are exact by construction.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .delineation import WaveSegment, WaveType, tile_segments
from .signal_io import EcgRecord

BOUNDARY_SIGMAS = 2.5

COMPONENTS = ("P", "Q", "R", "S", "T")


@dataclass(frozen=True)
class GaussianWave:
    amplitude: float  # mV
    center: float  # s, relative to the R time
    width: float  # s, Gaussian sigma

    def __post_init__(self):
        if self.width <= 0:
            raise ValueError(f"width must be positive, got {self.width}")


# Shape-distinct morphologies.  QRS shapes differ after z-normalisation
# (qRs, Rs, QR, rS, RS, qR with wide S); P and T differ by polarity.
MORPHOLOGY_BANK: tuple[dict[str, GaussianWave], ...] = (
    {
        "P": GaussianWave(0.15, -0.18, 0.022),
        "Q": GaussianWave(-0.10, -0.030, 0.008),
        "R": GaussianWave(1.00, 0.0, 0.010),
        "S": GaussianWave(-0.25, 0.030, 0.008),
        "T": GaussianWave(0.30, 0.30, 0.045),
    },
    {
        "P": GaussianWave(-0.12, -0.17, 0.020),
        "Q": GaussianWave(0.0, -0.030, 0.008),
        "R": GaussianWave(0.90, 0.0, 0.011),
        "S": GaussianWave(-0.70, 0.028, 0.009),
        "T": GaussianWave(-0.25, 0.29, 0.042),
    },
    {
        "P": GaussianWave(0.18, -0.19, 0.025),
        "Q": GaussianWave(-0.45, -0.028, 0.009),
        "R": GaussianWave(1.10, 0.0, 0.010),
        "S": GaussianWave(0.0, 0.030, 0.008),
        "T": GaussianWave(0.35, 0.31, 0.050),
    },
    {
        "P": GaussianWave(-0.15, -0.18, 0.024),
        "Q": GaussianWave(0.0, -0.030, 0.008),
        "R": GaussianWave(0.45, 0.0, 0.009),
        "S": GaussianWave(-1.00, 0.032, 0.011),
        "T": GaussianWave(-0.30, 0.30, 0.048),
    },
    {
        "P": GaussianWave(0.14, -0.17, 0.021),
        "Q": GaussianWave(-0.20, -0.032, 0.008),
        "R": GaussianWave(0.80, 0.0, 0.012),
        "S": GaussianWave(-0.45, 0.034, 0.010),
        "T": GaussianWave(0.28, 0.32, 0.040),
    },
    {
        "P": GaussianWave(-0.16, -0.18, 0.023),
        "Q": GaussianWave(-0.08, -0.026, 0.007),
        "R": GaussianWave(1.20, 0.0, 0.009),
        "S": GaussianWave(-0.30, 0.036, 0.012),
        "T": GaussianWave(-0.32, 0.29, 0.046),
    },
)


@dataclass(frozen=True)
class SynthSpec:
    fs: int = 250
    duration_s: float = 10.0
    mean_hr_bpm: float = 70.0
    hr_jitter_fraction: float = 0.03
    waves: dict[str, GaussianWave] = field(default_factory=lambda: dict(MORPHOLOGY_BANK[0]))
    morphology_id: int | None = None  # overrides ``waves`` from the bank when set
    beat_variation: float = 0.05  # per-beat relative amplitude/width perturbation
    noise_sd: float = 0.01
    rhythm: str = "regular"
    seed: int = 0

    def __post_init__(self):
        if self.rhythm not in ("regular", "irregular"):
            raise ValueError(f"rhythm must be 'regular' or 'irregular', got {self.rhythm!r}")
        if self.fs <= 0 or self.duration_s <= 0 or self.mean_hr_bpm <= 0:
            raise ValueError("fs, duration_s and mean_hr_bpm must be positive")
        if set(self.waves) != set(COMPONENTS):
            raise ValueError(f"waves must define exactly {COMPONENTS}")

    def morphology(self) -> dict[str, GaussianWave]:
        if self.morphology_id is None:
            return self.waves
        return MORPHOLOGY_BANK[self.morphology_id % len(MORPHOLOGY_BANK)]

    @property
    def jitter(self) -> float:
        # irregular rhythm always carries at least 25% RR jitter
        if self.rhythm == "irregular":
            return max(self.hr_jitter_fraction, 0.25)
        return self.hr_jitter_fraction


@dataclass
class GroundTruth:
    r_indices: list[int]
    segments: list[WaveSegment]
    beat_morphology: list[int]
    rr_intervals: list[float]
    label: int  # 1 = irregular rhythm

    @property
    def rr_variance(self) -> float:
        return float(np.var(self.rr_intervals)) if self.rr_intervals else 0.0


def _wave_extent(waves: dict[str, GaussianWave], names: tuple[str, ...]) -> tuple[float, float] | None:
    live = [waves[n] for n in names if waves[n].amplitude != 0.0]
    if not live:
        return None
    lo = min(w.center - BOUNDARY_SIGMAS * w.width for w in live)
    hi = max(w.center + BOUNDARY_SIGMAS * w.width for w in live)
    return lo, hi


def _perturb(waves: dict[str, GaussianWave], rng: np.random.Generator, frac: float) -> dict[str, GaussianWave]:
    if frac <= 0:
        return dict(waves)
    out = {}
    for name in COMPONENTS:
        w = waves[name]
        a, s = rng.uniform(1 - frac, 1 + frac, size=2)
        out[name] = GaussianWave(w.amplitude * a, w.center, w.width * s)
    return out


def generate(spec: SynthSpec, record_id: str = "synth", patient_id: str = "p0") -> tuple[EcgRecord, GroundTruth]:
    """Render one record and its ground truth.

    Beats are placed from before the start to past the end so the edges hold
    partial beats, as in real windows.  Only waves lying fully inside the
    record appear in the ground truth.
    """
    rng = np.random.default_rng(spec.seed)
    fs = spec.fs
    n = int(round(spec.duration_s * fs))
    t = np.arange(n) / fs
    base = spec.morphology()
    mean_rr = 60.0 / spec.mean_hr_bpm

    r_times = []
    rr_list = []
    r = -rng.uniform(0.0, mean_rr)
    while r < spec.duration_s + 1.0:
        r_times.append(r)
        rr = mean_rr * (1.0 + spec.jitter * rng.uniform(-1.0, 1.0))
        rr_list.append(rr)
        r += rr

    x = np.zeros(n)
    r_idx: list[int] = []
    waves: list[WaveSegment] = []
    morph_id = -1 if spec.morphology_id is None else spec.morphology_id
    beat_morph: list[int] = []
    for k, rt in enumerate(r_times):
        beat = _perturb(base, rng, spec.beat_variation)
        # repolarisation shortens with rate: T timing scales with sqrt(preceding RR)
        qt = float(np.clip(np.sqrt((rr_list[k - 1] if k else mean_rr) / 1.0), 0.7, 1.1))
        beat["T"] = GaussianWave(beat["T"].amplitude, beat["T"].center * qt, beat["T"].width * qt)
        for name in COMPONENTS:
            w = beat[name]
            if w.amplitude != 0.0:
                x += w.amplitude * np.exp(-0.5 * ((t - rt - w.center) / w.width) ** 2)
        ri = int(round(rt * fs))
        if not 0 <= ri < n:
            continue
        r_idx.append(ri)
        beat_morph.append(morph_id)
        for wtype, names in ((WaveType.P, ("P",)), (WaveType.QRS, ("Q", "R", "S")), (WaveType.T, ("T",))):
            ext = _wave_extent(beat, names)
            if ext is None:
                continue
            on = int(np.ceil((rt + ext[0]) * fs))
            off = int(np.floor((rt + ext[1]) * fs)) + 1
            if on >= 0 and off <= n:
                waves.append(WaveSegment(wtype, on, off, ri if wtype is WaveType.QRS else None))

    # at high rates a T can overlap the next beat's P; waves are already in beat
    # order, so the later wave is trimmed (or dropped) to keep P < QRS < T
    clean: list[WaveSegment] = []
    for s in waves:
        if clean and s.onset < clean[-1].offset:
            if s.offset <= clean[-1].offset + 1:
                continue
            s = replace(s, onset=clean[-1].offset)
        clean.append(s)

    if spec.noise_sd > 0:
        x = x + rng.normal(0.0, spec.noise_sd, size=n)

    in_window_rr = [rr for rt, rr in zip(r_times, rr_list) if 0 <= rt < spec.duration_s]
    truth = GroundTruth(
        r_indices=r_idx,
        segments=tile_segments(clean, n),
        beat_morphology=beat_morph,
        rr_intervals=in_window_rr,
        label=1 if spec.rhythm == "irregular" else 0,
    )
    record = EcgRecord(samples=x, fs=fs, record_id=record_id, patient_id=patient_id)
    return record, truth


def noise_sd_for_snr(spec: SynthSpec, snr_db: float) -> float:
    """Noise level giving ``snr_db`` relative to the clean signal power."""
    clean, _ = generate(replace(spec, noise_sd=0.0))
    power = float(np.mean(clean.samples**2))
    return float(np.sqrt(power / 10 ** (snr_db / 10.0)))


@dataclass
class SynthWindow:
    record: EcgRecord
    truth: GroundTruth
    patient_id: str
    morphology_id: int

    @property
    def label(self) -> int:
        return self.truth.label


@dataclass
class SynthCorpus:
    windows: list[SynthWindow]

    @property
    def patient_ids(self) -> list[str]:
        return sorted({w.patient_id for w in self.windows})

    def __len__(self) -> int:
        return len(self.windows)


def generate_corpus(
    n_patients: int,
    windows_per_patient: int,
    template: SynthSpec | None = None,
    seed: int = 0,
    irregular_fraction: float = 0.5,
    snr_db: float | None = None,
) -> SynthCorpus:
    """Labeled multi-patient corpus of independent 10 s windows.

    Patient ``i`` uses morphology ``i mod len(MORPHOLOGY_BANK)`` (disjoint
    across patients up to the bank size), its own heart rate, and its own
    amplitude scale.  Each window is independently regular or irregular.
    """
    template = template or SynthSpec()
    rng = np.random.default_rng(seed)
    windows = []
    for p in range(n_patients):
        pid = f"p{p:03d}"
        morph = p % len(MORPHOLOGY_BANK)
        hr = float(rng.uniform(55.0, 80.0))
        scale = float(rng.uniform(0.8, 1.25))
        waves = {k: replace(w, amplitude=w.amplitude * scale) for k, w in MORPHOLOGY_BANK[morph].items()}
        for w in range(windows_per_patient):
            rhythm = "irregular" if rng.random() < irregular_fraction else "regular"
            spec = replace(
                template,
                waves=waves,
                morphology_id=None,
                mean_hr_bpm=hr,
                rhythm=rhythm,
                seed=int(rng.integers(2**31)),
            )
            if snr_db is not None:
                spec = replace(spec, noise_sd=noise_sd_for_snr(spec, snr_db))
            rec, truth = generate(spec, record_id=f"{pid}_w{w:03d}", patient_id=pid)
            truth.beat_morphology = [morph] * len(truth.beat_morphology)
            windows.append(SynthWindow(rec, truth, pid, morph))
    return SynthCorpus(windows)
