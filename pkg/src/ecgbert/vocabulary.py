"""Wave vocabulary: DTW k-means per wave type and nearest-centroid token assignment."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .delineation import WaveType
from .errors import DataError

WAVE_ORDER = (WaveType.P, WaveType.QRS, WaveType.T, WaveType.BG)
DEFAULT_K = {WaveType.P: 12, WaveType.QRS: 19, WaveType.T: 14, WaveType.BG: 25}

N_WAVE_TOKENS = 70
PAD, SEP, MASK, CLS = 70, 71, 72, 73
SPECIAL_TOKENS = (PAD, SEP, MASK, CLS)
VOCAB_SIZE = 74

FORMAT_VERSION = 1


# ---------------------------------------------------------------- DTW kernels


@njit(cache=True)
def _table(a, b, band):
    n, m = a.shape[0], b.shape[0]
    D = np.full((n + 1, m + 1), np.inf)
    D[0, 0] = 0.0
    w = max(band, abs(n - m)) if band >= 0 else max(n, m)
    for i in range(1, n + 1):
        lo = max(1, i - w)
        hi = min(m, i + w)
        for j in range(lo, hi + 1):
            best = D[i - 1, j - 1]
            if D[i - 1, j] < best:
                best = D[i - 1, j]
            if D[i, j - 1] < best:
                best = D[i, j - 1]
            D[i, j] = abs(a[i - 1] - b[j - 1]) + best
    return D


@njit(cache=True)
def _dtw(a, b, band):
    return _table(a, b, band)[a.shape[0], b.shape[0]]


@njit(cache=True)
def _path(a, b, band):
    """Optimal alignment as (i, j) pairs from the end; diagonal wins ties."""
    D = _table(a, b, band)
    i, j = a.shape[0], b.shape[0]
    out = np.empty((i + j, 2), dtype=np.int64)
    k = 0
    while True:
        out[k, 0] = i - 1
        out[k, 1] = j - 1
        k += 1
        if i == 1 and j == 1:
            break
        if i == 1:
            j -= 1
        elif j == 1:
            i -= 1
        else:
            d, u, l = D[i - 1, j - 1], D[i - 1, j], D[i, j - 1]
            if d <= u and d <= l:
                i -= 1
                j -= 1
            elif u <= l:
                i -= 1
            else:
                j -= 1
    return out[:k]


@njit(cache=True)
def _dist_matrix(flat, offs, cflat, coffs, band):
    n = offs.shape[0] - 1
    k = coffs.shape[0] - 1
    out = np.empty((n, k))
    for i in range(n):
        a = flat[offs[i] : offs[i + 1]]
        for c in range(k):
            out[i, c] = _dtw(a, cflat[coffs[c] : coffs[c + 1]], band)
    return out


@njit(cache=True)
def _dba_pass(avg, flat, offs, idx, band):
    sums = np.zeros(avg.shape[0])
    counts = np.zeros(avg.shape[0])
    for t in idx:
        s = flat[offs[t] : offs[t + 1]]
        p = _path(avg, s, band)
        for r in range(p.shape[0]):
            sums[p[r, 0]] += s[p[r, 1]]
            counts[p[r, 0]] += 1.0
    return sums / counts


@njit(cache=True)
def _total_cost(avg, flat, offs, idx, band):
    total = 0.0
    for t in idx:
        total += _dtw(avg, flat[offs[t] : offs[t + 1]], band)
    return total


def _as_seq(x, name="sequence") -> np.ndarray:
    a = np.ascontiguousarray(x, dtype=np.float64).ravel()
    if a.size == 0:
        raise ValueError(f"{name} must be non-empty")
    return a


def _band(band: int | None) -> int:
    return -1 if band is None else int(band)


def dtw_distance(a, b, band: int | None = None) -> float:
    """Classic DTW with |a_i - b_j| local cost and steps right, down, diagonal."""
    return float(_dtw(_as_seq(a, "a"), _as_seq(b, "b"), _band(band)))


def dtw_path(a, b, band: int | None = None) -> list[tuple[int, int]]:
    p = _path(_as_seq(a, "a"), _as_seq(b, "b"), _band(band))
    return [(int(i), int(j)) for i, j in p[::-1]]


class _Packed:
    """Variable-length sequences flattened for the compiled kernels."""

    def __init__(self, seqs):
        seqs = [_as_seq(s) for s in seqs]
        self.offs = np.zeros(len(seqs) + 1, dtype=np.int64)
        self.offs[1:] = np.cumsum([len(s) for s in seqs])
        self.flat = np.concatenate(seqs) if seqs else np.zeros(0)
        self.lengths = np.diff(self.offs)

    def __len__(self):
        return len(self.offs) - 1

    def __getitem__(self, i):
        return self.flat[self.offs[i] : self.offs[i + 1]]


def pairwise_dtw(seqs, centroids, band: int | None = None) -> np.ndarray:
    a, c = _Packed(seqs), _Packed(centroids)
    return _dist_matrix(a.flat, a.offs, c.flat, c.offs, _band(band))


def _dba(packed: _Packed, idx: np.ndarray, init: np.ndarray, iters: int, band: int) -> np.ndarray:
    avg = np.array(init, dtype=np.float64)
    cost = _total_cost(avg, packed.flat, packed.offs, idx, band)
    for _ in range(iters):
        new = _dba_pass(avg, packed.flat, packed.offs, idx, band)
        new_cost = _total_cost(new, packed.flat, packed.offs, idx, band)
        # an L1 alignment cost with a mean update is not guaranteed to descend
        if new_cost > cost:
            break
        done = np.array_equal(new, avg)
        avg, cost = new, new_cost
        if done:
            break
    return avg


def dba_mean(members, init, iters: int = 10, band: int | None = None) -> np.ndarray:
    """DTW barycenter averaging; the average keeps ``len(init)`` and its cost never rises."""
    if len(members) == 0:
        raise ValueError("dba_mean needs at least one member")
    packed = _Packed(members)
    return _dba(packed, np.arange(len(packed)), _as_seq(init, "init"), iters, _band(band))


# ---------------------------------------------------------------- clustering


def znormalize(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    sd = x.std()
    if sd < 1e-8:
        return np.zeros_like(x)
    return (x - x.mean()) / sd


def _resample(x: np.ndarray, n: int) -> np.ndarray:
    if len(x) == n:
        return x.copy()
    if len(x) == 1:
        return np.full(n, x[0])
    return np.interp(np.linspace(0, len(x) - 1, n), np.arange(len(x)), x)


@dataclass
class KMeansResult:
    centroids: list[np.ndarray]
    labels: np.ndarray
    inertia: list[float]
    n_iter: int


def kmeans_dtw(
    seqs,
    k: int,
    rng: np.random.Generator,
    max_iters: int = 50,
    dba_iters: int = 5,
    band: int | None = None,
) -> KMeansResult:
    """Lloyd iterations under DTW with k-means++ seeding and DBA centroids."""
    packed = _Packed(seqs)
    n = len(packed)
    if n < k:
        raise DataError(f"need at least {k} sequences to form {k} clusters, got {n}")
    bnd = _band(band)

    def assign_all(cents):
        c = _Packed(cents)
        d = _dist_matrix(packed.flat, packed.offs, c.flat, c.offs, bnd)
        lab = np.argmin(d, axis=1)  # first minimum = lowest index
        return lab, d[np.arange(n), lab]

    # k-means++ seeding
    chosen = [int(rng.integers(n))]
    d = pairwise_dtw([packed[i] for i in range(n)], [packed[chosen[0]]], band)[:, 0]
    for _ in range(1, k):
        w = d**2
        w[chosen] = 0.0
        if w.sum() > 0:
            nxt = int(rng.choice(n, p=w / w.sum()))
        else:
            free = np.setdiff1d(np.arange(n), chosen)
            nxt = int(rng.choice(free))
        chosen.append(nxt)
        d = np.minimum(d, pairwise_dtw([packed[i] for i in range(n)], [packed[nxt]], band)[:, 0])

    seeds = [packed[i].copy() for i in chosen]
    labels, _ = assign_all(seeds)
    cents = []
    for c, s in enumerate(seeds):
        members = packed.lengths[labels == c]
        length = int(np.median(members)) if members.size else len(s)
        cents.append(_resample(s, max(length, 1)))

    labels, dist = assign_all(cents)
    inertia = [float(dist.sum())]
    it = 0
    for it in range(1, max_iters + 1):
        new = []
        for c in range(k):
            idx = np.flatnonzero(labels == c)
            if idx.size:
                new.append(_dba(packed, idx, cents[c], dba_iters, bnd))
            else:
                new.append(cents[c])
        for c in range(k):
            if not np.any(labels == c):
                # reseed an empty cluster with the worst-served sequence
                far = int(np.argmax(dist))
                new[c] = packed[far].copy()
                dist[far] = 0.0
        new_labels, new_dist = assign_all(new)
        cents = new
        inertia.append(float(new_dist.sum()))
        unchanged = np.array_equal(new_labels, labels)
        labels, dist = new_labels, new_dist
        if unchanged:
            break
    return KMeansResult(cents, labels, inertia, it)


# ---------------------------------------------------------------- vocabulary


@dataclass(frozen=True)
class VocabConfig:
    k: dict = field(default_factory=lambda: dict(DEFAULT_K))
    znorm: bool = True
    max_iters: int = 50
    dba_iters: int = 5
    dtw_band: int | None = None
    max_waves_per_type: int | None = 1500
    seed: int = 0


def _layout(k: dict) -> dict[WaveType, int]:
    offsets, pos = {}, 0
    for t in WAVE_ORDER:
        if t in k:
            offsets[t] = pos
            pos += int(k[t])
    if pos > N_WAVE_TOKENS:
        raise ValueError(f"k-map allots {pos} wave tokens, at most {N_WAVE_TOKENS} fit")
    return offsets


@dataclass(frozen=True, eq=False)
class Vocabulary:
    centroids: dict  # WaveType -> tuple of 1-D float64 arrays
    znorm: bool = True
    dtw_band: int | None = None
    diagnostics: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        cents = {WaveType(t): tuple(np.array(c, dtype=np.float64) for c in cs) for t, cs in self.centroids.items()}
        for t, cs in cents.items():
            if not cs:
                raise ValueError(f"no centroids for {t.value}")
            for c in cs:
                if c.size == 0 or not np.all(np.isfinite(c)):
                    raise ValueError(f"{t.value} centroid must be non-empty and finite")
                c.flags.writeable = False
        object.__setattr__(self, "centroids", cents)
        object.__setattr__(self, "_offsets", _layout(self.k))
        object.__setattr__(self, "_packed", {t: _Packed(cs) for t, cs in cents.items()})

    @property
    def k(self) -> dict[WaveType, int]:
        return {t: len(self.centroids[t]) for t in WAVE_ORDER if t in self.centroids}

    @property
    def n_centroids(self) -> int:
        return sum(self.k.values())

    def offset(self, wave_type: WaveType) -> int:
        return self._offsets[WaveType(wave_type)]

    def token_range(self, wave_type: WaveType) -> range:
        wave_type = WaveType(wave_type)
        lo = self._offsets[wave_type]
        return range(lo, lo + len(self.centroids[wave_type]))

    def type_of(self, token: int) -> WaveType | None:
        for t, lo in self._offsets.items():
            if lo <= token < lo + len(self.centroids[t]):
                return t
        return None

    def prepare(self, wave) -> np.ndarray:
        x = _as_seq(wave, "wave")
        return znormalize(x) if self.znorm else x

    def assign(self, wave, wave_type: WaveType) -> int:
        return int(self.assign_many([wave], wave_type)[0])

    def assign_many(self, waves, wave_type: WaveType) -> np.ndarray:
        wave_type = WaveType(wave_type)
        if wave_type not in self.centroids:
            raise KeyError(f"vocabulary has no {wave_type.value} clusters")
        if len(waves) == 0:
            return np.zeros(0, dtype=np.int64)
        a = _Packed([self.prepare(w) for w in waves])
        c = self._packed[wave_type]
        d = _dist_matrix(a.flat, a.offs, c.flat, c.offs, _band(self.dtw_band))
        return np.argmin(d, axis=1).astype(np.int64) + self._offsets[wave_type]

    # ---- persistence

    def to_dict(self) -> dict:
        body = {
            "version": FORMAT_VERSION,
            "znorm": bool(self.znorm),
            "dtw_band": self.dtw_band,
            "types": {
                t.value: {"k": len(cs), "centroids": [[float(v) for v in c] for c in cs]}
                for t, cs in self.centroids.items()
            },
        }
        body["fingerprint"] = _fingerprint(body)
        return body

    @property
    def fingerprint(self) -> str:
        return self.to_dict()["fingerprint"]

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, obj: dict) -> Vocabulary:
        try:
            if obj.get("version") != FORMAT_VERSION:
                raise DataError(f"unsupported vocabulary version {obj.get('version')!r}")
            cents = {}
            for name, entry in obj["types"].items():
                cs = [np.asarray(c, dtype=np.float64) for c in entry["centroids"]]
                if len(cs) != entry["k"]:
                    raise DataError(f"{name}: k={entry['k']} but {len(cs)} centroids")
                cents[WaveType(name)] = cs
            vocab = cls(cents, znorm=bool(obj["znorm"]), dtw_band=obj.get("dtw_band"))
        except (KeyError, TypeError, ValueError) as e:
            if isinstance(e, DataError):
                raise
            raise DataError(f"malformed vocabulary: {e}") from e
        if "fingerprint" in obj and obj["fingerprint"] != vocab.fingerprint:
            raise DataError("vocabulary fingerprint does not match its centroids")
        return vocab

    @classmethod
    def from_json(cls, text: str) -> Vocabulary:
        try:
            obj = json.loads(text)
        except json.JSONDecodeError as e:
            raise DataError(f"vocabulary is not valid JSON: {e}") from e
        return cls.from_dict(obj)

    def __eq__(self, other):
        if not isinstance(other, Vocabulary):
            return NotImplemented
        return self.to_dict() == other.to_dict()

    __hash__ = None


def _fingerprint(body: dict) -> str:
    payload = {k: v for k, v in body.items() if k != "fingerprint"}
    canon = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode()).hexdigest()


def fit_vocabulary(waves: dict, cfg: VocabConfig | None = None) -> Vocabulary:
    """One DTW k-means model per wave type; ``diagnostics`` keeps inertia and labels."""
    cfg = cfg or VocabConfig()
    k_map = {WaveType(t): int(v) for t, v in cfg.k.items()}
    _layout(k_map)
    streams = np.random.SeedSequence(cfg.seed).spawn(len(WAVE_ORDER))
    cents, diag = {}, {}
    for t, ss in zip(WAVE_ORDER, streams):
        if t not in k_map:
            continue
        seqs = waves.get(t, waves.get(t.value, []))
        k = k_map[t]
        if len(seqs) < k:
            raise DataError(f"{t.value}: {len(seqs)} waves for {k} clusters")
        rng = np.random.default_rng(ss)
        idx = np.arange(len(seqs))
        if cfg.max_waves_per_type is not None and len(seqs) > cfg.max_waves_per_type:
            idx = np.sort(rng.choice(len(seqs), cfg.max_waves_per_type, replace=False))
        prepared = [znormalize(_as_seq(seqs[i], "wave")) if cfg.znorm else _as_seq(seqs[i], "wave") for i in idx]
        res = kmeans_dtw(prepared, k, rng, cfg.max_iters, cfg.dba_iters, cfg.dtw_band)
        cents[t] = res.centroids
        diag[t] = {"inertia": res.inertia, "labels": res.labels, "indices": idx, "n_iter": res.n_iter}
    return Vocabulary(cents, znorm=cfg.znorm, dtw_band=cfg.dtw_band, diagnostics=diag)
