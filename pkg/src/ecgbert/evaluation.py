"""Patient-level splits, majority-vote window labels, and one-vs-rest metrics."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .signal_io import Window

NORMAL_LABELS = frozenset({"N", "NORMAL", "(N"})

# Heartbeat confusion matrix as published (rows true, columns predicted).
TABLE2_CLASSES = ("N", "S", "V", "Q")
TABLE2_COUNTS = np.array(
    [
        [38538, 1483, 1941, 1119],
        [187, 26, 39, 7],
        [1778, 201, 1280, 277],
        [451, 77, 25, 2445],
    ]
)
# Published per-class columns: accuracy, specificity, sensitivity, PPV.
TABLE2_PUBLISHED = {
    "N": {"accuracy": 0.86, "specificity": 0.45, "sensitivity": 0.89, "ppv": 0.94},
    "S": {"accuracy": 0.95, "specificity": 0.99, "sensitivity": 0.10, "ppv": 0.01},
    "V": {"accuracy": 0.91, "specificity": 0.94, "sensitivity": 0.36, "ppv": 0.38},
    "Q": {"accuracy": 0.96, "specificity": 0.99, "sensitivity": 0.82, "ppv": 0.64},
}
METRIC_NAMES = ("accuracy", "specificity", "sensitivity", "ppv")


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows true, columns predicted
    class_names: tuple[str, ...]

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got shape {c.shape}")
        if not np.issubdtype(c.dtype, np.integer) or np.any(c < 0):
            raise ValueError("confusion counts must be non-negative integers")
        if len(self.class_names) != c.shape[0]:
            raise ValueError("one class name per row")
        object.__setattr__(self, "counts", c.astype(np.int64))
        object.__setattr__(self, "class_names", tuple(self.class_names))

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    @classmethod
    def from_predictions(cls, y_true, y_pred, class_names) -> ConfusionMatrix:
        n = len(class_names)
        y_true, y_pred = np.asarray(y_true, dtype=np.int64), np.asarray(y_pred, dtype=np.int64)
        if y_true.shape != y_pred.shape:
            raise ValueError("y_true and y_pred differ in length")
        if y_true.size and (y_true.min() < 0 or y_true.max() >= n or y_pred.min() < 0 or y_pred.max() >= n):
            raise ValueError(f"labels must lie in [0, {n})")
        counts = np.zeros((n, n), dtype=np.int64)
        np.add.at(counts, (y_true, y_pred), 1)
        return cls(counts, tuple(class_names))


@dataclass(frozen=True)
class ClassMetrics:
    accuracy: float | None
    specificity: float | None
    sensitivity: float | None
    ppv: float | None

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


@dataclass(frozen=True)
class Metrics:
    per_class: dict[str, ClassMetrics]
    accuracy: float | None  # trace / total
    positive: str | None = None  # reported class for binary tasks

    @property
    def binary(self) -> ClassMetrics | None:
        return self.per_class[self.positive] if self.positive is not None else None


def _ratio(num: int, den: int) -> float | None:
    return None if den == 0 else num / den


def compute_metrics(cm: ConfusionMatrix, positive: str | None = None) -> Metrics:
    """One-vs-rest counts per class; ratios with a zero denominator are None."""
    c = cm.counts
    total = int(c.sum())
    per = {}
    for i, name in enumerate(cm.class_names):
        tp = int(c[i, i])
        fn = int(c[i].sum()) - tp
        fp = int(c[:, i].sum()) - tp
        tn = total - tp - fn - fp
        per[name] = ClassMetrics(
            accuracy=_ratio(tp + tn, total),
            specificity=_ratio(tn, tn + fp),
            sensitivity=_ratio(tp, tp + fn),
            ppv=_ratio(tp, tp + fp),
        )
    if positive is None and len(cm.class_names) == 2:
        positive = cm.class_names[1]
    return Metrics(per, _ratio(int(np.trace(c)), total), positive)


def table2_report(tol: float = 0.005) -> list[dict]:
    """Recompute the published heartbeat table from its counts; one row per class and metric."""
    m = compute_metrics(ConfusionMatrix(TABLE2_COUNTS, TABLE2_CLASSES))
    rows = []
    for cls in TABLE2_CLASSES:
        for k in METRIC_NAMES:
            got = getattr(m.per_class[cls], k)
            pub = TABLE2_PUBLISHED[cls][k]
            rows.append({"class": cls, "metric": k, "computed": got, "published": pub, "ok": abs(got - pub) <= tol})
    return rows


# ---------------------------------------------------------------- splitting


def inter_patient_split(records, test_fraction: float = 0.2, seed: int = 0) -> tuple[list[str], list[str]]:
    """Partition patient ids so that no patient appears on both sides."""
    if not 0.0 < test_fraction < 1.0:
        raise ValueError(f"test_fraction must lie in (0, 1), got {test_fraction}")
    ids = []
    for r in records:
        pid = r if isinstance(r, str) else getattr(r, "patient_id", "")
        if not pid:
            raise DataError("every record needs a patient_id for an inter-patient split")
        ids.append(pid)
    patients = sorted(set(ids))
    if len(patients) < 2:
        raise DataError(f"need at least 2 patients to split, got {len(patients)}")
    n_test = int(np.clip(round(test_fraction * len(patients)), 1, len(patients) - 1))
    order = np.random.default_rng(seed).permutation(len(patients))
    test = sorted(patients[i] for i in order[:n_test])
    train = sorted(patients[i] for i in order[n_test:])
    return train, test


# ---------------------------------------------------------------- labels


def _abnormal_first(label: str) -> tuple[int, str]:
    return (1 if label.upper() in NORMAL_LABELS else 0, label)


def majority_label(window: Window, annotations: list[tuple[int, str]]) -> str:
    """Label covering most samples; each annotation lasts until the next one.

    Ties go to an abnormal label (anything outside ``NORMAL_LABELS``).
    """
    lo, hi = window.start_sample, window.start_sample + len(window)
    cover: dict[str, int] = {}
    for k, (idx, lab) in enumerate(annotations):
        end = annotations[k + 1][0] if k + 1 < len(annotations) else hi
        a, b = max(lo, idx), min(hi, end)
        if b > a:
            cover[lab] = cover.get(lab, 0) + b - a
    if not cover:
        raise DataError(f"no annotation covers samples [{lo}, {hi})")
    best = max(cover.values())
    return min((lab for lab, v in cover.items() if v == best), key=_abnormal_first)


def read_annotations(text: str) -> list[tuple[int, str]]:
    out = []
    for k, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[1].strip():
            raise DataError(f"annotation line {k}: expected 'index<TAB>label'")
        try:
            idx = int(parts[0])
        except ValueError:
            raise DataError(f"annotation line {k}: bad sample index {parts[0]!r}") from None
        if idx < 0 or (out and idx < out[-1][0]):
            raise DataError(f"annotation line {k}: indices must be non-negative and ascending")
        out.append((idx, parts[1].strip()))
    return out


def write_annotations(annotations: list[tuple[int, str]]) -> str:
    return "".join(f"{i}\t{lab}\n" for i, lab in annotations)


def metrics_report(task: str, cm: ConfusionMatrix, metrics: Metrics, split_seed: int | None) -> dict:
    return {
        "task": task,
        "confusion": cm.counts.tolist(),
        "class_names": list(cm.class_names),
        "per_class": {k: v.as_dict() for k, v in metrics.per_class.items()},
        "overall": {
            "accuracy": metrics.accuracy,
            **({"positive_class": metrics.positive, **metrics.binary.as_dict()} if metrics.positive else {}),
        },
        "split_seed": split_seed,
    }


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=1, sort_keys=True)
