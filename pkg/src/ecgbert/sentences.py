"""Beat sentences, MLM masking and batch collation."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .delineation import Heartbeat
from .errors import DataError
from .vocabulary import CLS, MASK, N_WAVE_TOKENS, PAD, SEP

SENTENCE_BEATS = (1, 2, 6, 8)
MAX_SEQ_LEN = 128
IGNORE = -1


@dataclass(frozen=True)
class Sentence:
    token_ids: tuple[int, ...]
    boundaries: tuple[tuple[int, int] | None, ...]
    window_ref: str = ""
    n_beats: int = 1  # group size drawn; ``beat_count`` is what was available
    beat_count: int = 1

    def __post_init__(self):
        ids = self.token_ids
        if len(ids) < 2 or ids[0] != CLS or ids[-1] != SEP:
            raise ValueError("a sentence starts with CLS and ends with SEP")
        if len(self.boundaries) != len(ids):
            raise ValueError("one boundary entry per token")
        for tok, b in zip(ids, self.boundaries):
            if (tok < N_WAVE_TOKENS) != (b is not None):
                raise ValueError(f"token {tok}: wave tokens carry boundaries, specials do not")

    def __len__(self) -> int:
        return len(self.token_ids)

    @property
    def wave_positions(self) -> np.ndarray:
        return np.flatnonzero(np.asarray(self.token_ids) < N_WAVE_TOKENS)


def _assemble(beats, tokens, window_ref, n_beats, max_seq_len) -> Sentence | None:
    ids, bounds = [CLS], [None]
    used = 0
    for beat, toks in zip(beats, tokens):
        if len(ids) + len(toks) + 1 > max_seq_len:
            break  # truncate at a beat boundary
        for seg, tok in zip(beat.segments, toks):
            ids.append(int(tok))
            bounds.append((seg.onset, seg.offset))
        used += 1
    if used == 0:
        return None
    ids.append(SEP)
    bounds.append(None)
    return Sentence(tuple(ids), tuple(bounds), window_ref, n_beats, used)


def build_sentences(
    beats: list[Heartbeat],
    tokens: list[list[int]],
    rng: np.random.Generator,
    max_seq_len: int = MAX_SEQ_LEN,
    window_ref: str = "",
) -> list[Sentence]:
    """Greedy left-to-right packing of 1, 2, 6 or 8 consecutive beats per sentence."""
    if len(beats) != len(tokens):
        raise ValueError(f"{len(beats)} beats but {len(tokens)} token lists")
    for b, t in zip(beats, tokens):
        if len(b.segments) != len(t):
            raise ValueError("token list does not match the beat's segments")
    out, i = [], 0
    while i < len(beats):
        n = int(rng.choice(SENTENCE_BEATS))
        s = _assemble(beats[i : i + n], tokens[i : i + n], window_ref, n, max_seq_len)
        if s is not None:
            out.append(s)
        i += n
    return out


def window_sentence(beats: list[Heartbeat], tokens: list[list[int]], max_seq_len: int = MAX_SEQ_LEN, window_ref: str = "") -> Sentence | None:
    """All beats of a window in one sequence (classification input)."""
    return _assemble(beats, tokens, window_ref, len(beats), max_seq_len)


def _round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def mask_for_mlm(
    sentence: Sentence,
    rate: float = 0.15,
    rng: np.random.Generator | None = None,
    bert_style_corruption: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """Mask exactly round(rate * n_wave_tokens) wave positions; labels are -1 elsewhere."""
    if not 0.0 <= rate <= 1.0:
        raise ValueError(f"mask rate must lie in [0, 1], got {rate}")
    rng = rng if rng is not None else np.random.default_rng()
    ids = np.asarray(sentence.token_ids, dtype=np.int64)
    labels = np.full(ids.shape, IGNORE, dtype=np.int64)
    wave = sentence.wave_positions
    count = min(_round_half_up(rate * len(wave)), len(wave))
    if count == 0:
        return ids.copy(), labels
    pos = np.sort(rng.choice(wave, size=count, replace=False))
    labels[pos] = ids[pos]
    inp = ids.copy()
    if bert_style_corruption:
        u = rng.random(count)
        inp[pos[u < 0.8]] = MASK
        rnd = pos[(u >= 0.8) & (u < 0.9)]
        inp[rnd] = rng.integers(0, N_WAVE_TOKENS, size=rnd.size)
    else:
        inp[pos] = MASK
    return inp, labels


@dataclass
class MaskedBatch:
    input_ids: np.ndarray  # (B, L) int64
    labels: np.ndarray  # (B, L) int64, -1 where not a target
    attention_mask: np.ndarray  # (B, L) 0/1
    boundaries: np.ndarray  # (B, L, 2) int64, -1 for specials and padding
    window_refs: list[str]
    signals: np.ndarray | None = None  # (W, n) raw windows for the CNN embedding
    window_index: np.ndarray | None = None  # (B,) row of ``signals`` for each sentence

    @property
    def shape(self) -> tuple[int, int]:
        return self.input_ids.shape


def collate(
    sentences: list[Sentence],
    max_seq_len: int = MAX_SEQ_LEN,
    masked: list[tuple[np.ndarray, np.ndarray]] | None = None,
    signals: dict[str, np.ndarray] | None = None,
) -> MaskedBatch:
    """Right-pad to the longest sentence; ``masked`` supplies (input_ids, labels) per sentence."""
    if not sentences:
        raise ValueError("cannot collate an empty batch")
    width = max(len(s) for s in sentences)
    if width > max_seq_len:
        raise ValueError(f"sentence of length {width} exceeds max_seq_len {max_seq_len}")
    b = len(sentences)
    ids = np.full((b, width), PAD, dtype=np.int64)
    labels = np.full((b, width), IGNORE, dtype=np.int64)
    att = np.zeros((b, width), dtype=np.int64)
    bounds = np.full((b, width, 2), -1, dtype=np.int64)
    for r, s in enumerate(sentences):
        n = len(s)
        if masked is None:
            ids[r, :n] = s.token_ids
        else:
            ids[r, :n], labels[r, :n] = masked[r]
        att[r, :n] = 1
        for c, bd in enumerate(s.boundaries):
            if bd is not None:
                bounds[r, c] = bd
    refs = [s.window_ref for s in sentences]
    sig = widx = None
    if signals is not None:
        uniq = list(dict.fromkeys(refs))
        missing = [u for u in uniq if u not in signals]
        if missing:
            raise DataError(f"no signal for window {missing[0]!r}")
        sig = np.stack([np.asarray(signals[u], dtype=np.float32) for u in uniq])
        pos = {u: i for i, u in enumerate(uniq)}
        widx = np.array([pos[u] for u in refs], dtype=np.int64)
    return MaskedBatch(ids, labels, att, bounds, refs, sig, widx)


# ---------------------------------------------------------------- corpus file


def format_sentence(s: Sentence) -> str:
    ids = " ".join(str(t) for t in s.token_ids)
    bds = " ".join("-" if b is None else f"{b[0]}:{b[1]}" for b in s.boundaries)
    return f"{ids}\t{bds}\t{s.window_ref}"


def parse_sentence(line: str) -> Sentence:
    parts = line.rstrip("\n").split("\t")
    if len(parts) not in (2, 3):
        raise DataError(f"expected 2 or 3 tab-separated fields, got {len(parts)}")
    try:
        ids = tuple(int(t) for t in parts[0].split())
        bds = tuple(None if b == "-" else tuple(int(v) for v in b.split(":")) for b in parts[1].split())
        return Sentence(ids, bds, parts[2] if len(parts) == 3 else "", 0, 0)
    except ValueError as e:
        raise DataError(f"malformed sentence line: {e}") from e


def write_corpus(sentences: list[Sentence]) -> str:
    return "".join(format_sentence(s) + "\n" for s in sentences)


def read_corpus(text: str) -> list[Sentence]:
    """Parse a corpus file; blank lines and ``#`` header lines are skipped."""
    out = []
    for k, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        try:
            out.append(parse_sentence(line))
        except DataError as e:
            raise DataError(f"line {k}: {e}") from e
    return out
