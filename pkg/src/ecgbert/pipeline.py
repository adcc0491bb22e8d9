"""Glue from raw windows to cleaned signals, heartbeats, waves and tokens."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .delineation import DelineationParams, DetectorParams, Heartbeat, WaveType, delineate, detect_r_peaks
from .preprocess import FilterSpec, preprocess_signal
from .sentences import Sentence, build_sentences, window_sentence
from .vocabulary import Vocabulary


@dataclass(frozen=True)
class StageParams:
    filter: FilterSpec = field(default_factory=FilterSpec)
    detector: DetectorParams = field(default_factory=DetectorParams)
    delineation: DelineationParams = field(default_factory=DelineationParams)


@dataclass
class ProcessedWindow:
    window_id: str
    patient_id: str
    signal: np.ndarray  # preprocessed samples
    beats: list[Heartbeat]
    label: int | None = None


def process_window(samples, fs: int, params: StageParams = StageParams(), window_id: str = "", patient_id: str = "", label=None) -> ProcessedWindow:
    x = preprocess_signal(samples, fs, params.filter)
    r = detect_r_peaks(x, fs, params.detector)
    beats = delineate(x, fs, r, params.delineation)
    return ProcessedWindow(window_id, patient_id, x, beats, label)


def collect_waves(windows: list[ProcessedWindow]) -> dict[WaveType, list[np.ndarray]]:
    out: dict[WaveType, list[np.ndarray]] = {t: [] for t in WaveType}
    for w in windows:
        for beat in w.beats:
            for s in beat.segments:
                out[s.wave_type].append(w.signal[s.onset : s.offset])
    return out


def tokenize_beats(w: ProcessedWindow, vocab: Vocabulary) -> list[list[tuple[int, int, int]]]:
    """Per beat, the (token, onset, offset) triples in time order."""
    by_type: dict[WaveType, list] = {t: [] for t in WaveType}
    for bi, beat in enumerate(w.beats):
        for si, s in enumerate(beat.segments):
            by_type[s.wave_type].append((bi, si, s))
    tokens: dict[tuple[int, int], int] = {}
    for t, items in by_type.items():
        if not items:
            continue
        ids = vocab.assign_many([w.signal[s.onset : s.offset] for _, _, s in items], t)
        for (bi, si, _), tok in zip(items, ids):
            tokens[bi, si] = int(tok)
    return [[(tokens[bi, si], s.onset, s.offset) for si, s in enumerate(beat.segments)] for bi, beat in enumerate(w.beats)]


def token_sentences(windows: list[ProcessedWindow], vocab: Vocabulary, rng: np.random.Generator, max_seq_len: int = 128) -> list[Sentence]:
    """Pretraining sentences for every window, never crossing a window edge."""
    out = []
    for w in windows:
        toks = tokenize_beats(w, vocab)
        out.extend(build_sentences(w.beats, [[t for t, _, _ in b] for b in toks], rng, max_seq_len, w.window_id))
    return out


def window_sentences(windows: list[ProcessedWindow], vocab: Vocabulary, max_seq_len: int = 128):
    """One whole-window sequence per window that has at least one beat, with its source."""
    out = []
    for w in windows:
        toks = tokenize_beats(w, vocab)
        s = window_sentence(w.beats, [[t for t, _, _ in b] for b in toks], max_seq_len, w.window_id)
        if s is not None:
            out.append((w, s))
    return out


def signals_of(windows: list[ProcessedWindow]) -> dict[str, np.ndarray]:
    return {w.window_id: w.signal for w in windows}
