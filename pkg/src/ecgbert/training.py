"""MLM pretraining and task fine-tuning with per-epoch checkpoints and JSONL logs."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from . import autograd as ag
from .errors import DataError
from .evaluation import ConfusionMatrix, compute_metrics, metrics_report
from .model import Checkpoint, EcgBert, ModelConfig, load_checkpoint, save_checkpoint
from .sentences import Sentence, collate, mask_for_mlm

TASKS = ("mlm", "afib", "heartbeat", "apnea", "verify", "identify")

_TASK_DEFAULTS = {
    "mlm": dict(lr=1e-3, batch_size=32, epochs=10, head_kind=None),
    "afib": dict(lr=1e-3, batch_size=64, epochs=13, head_kind="dense_binary"),
    "heartbeat": dict(lr=1e-4, batch_size=64, epochs=20, head_kind="residual_multiclass"),
    "apnea": dict(lr=5e-3, batch_size=64, epochs=5, head_kind="dense_binary"),
    "verify": dict(lr=1e-4, batch_size=128, epochs=20, head_kind="dense_binary"),
    "identify": dict(lr=1e-4, batch_size=128, epochs=20, head_kind="dense_multiclass"),
}


@dataclass(frozen=True)
class TrainConfig:
    task: str = "mlm"
    lr: float = 1e-3
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0
    head_kind: str | None = None
    eval_every: int = 1
    mask_rate: float = 0.15
    bert_style_corruption: bool = False
    freeze_encoder: bool = False
    max_seq_len: int = 128

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; expected one of {TASKS}")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0 or self.eval_every < 1:
            raise ValueError("batch_size >= 1, epochs >= 0, lr > 0 and eval_every >= 1 required")

    @classmethod
    def for_task(cls, task: str, **overrides) -> TrainConfig:
        if task not in _TASK_DEFAULTS:
            raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
        return cls(task=task, **{**_TASK_DEFAULTS[task], **overrides})

    def to_dict(self) -> dict:
        return asdict(self)


Logger = Callable[[dict], None]


class JsonlLog:
    """Appends one JSON object per line; also keeps the records in memory."""

    def __init__(self, path=None):
        self.path = Path(path) if path is not None else None
        self.records: list[dict] = []
        if self.path is not None:
            self.path.parent.mkdir(parents=True, exist_ok=True)

    def __call__(self, rec: dict) -> None:
        self.records.append(rec)
        if self.path is not None:
            with self.path.open("a") as f:
                f.write(json.dumps(rec) + "\n")


def _epoch_rng(seed: int, epoch: int, stream: int = 0) -> np.random.Generator:
    return np.random.default_rng([seed, epoch, stream])


def _seed_torch(seed: int, epoch: int) -> None:
    torch.manual_seed(int(np.random.SeedSequence([seed, epoch, 7]).generate_state(1)[0]))


def _batches(n: int, size: int, rng: np.random.Generator) -> list[np.ndarray]:
    perm = rng.permutation(n)
    return [perm[i : i + size] for i in range(0, n, size)]


# ---------------------------------------------------------------- pretraining


def _mlm_batch(model, sents, signals, cfg, rng):
    masked = [mask_for_mlm(s, cfg.mask_rate, rng, cfg.bert_style_corruption) for s in sents]
    batch = collate(sents, cfg.max_seq_len, masked, signals)
    logits = model.forward_mlm(batch)
    ce = ag.cross_entropy(logits, batch.labels)
    with torch.no_grad():
        lab = torch.as_tensor(batch.labels)
        keep = lab >= 0
        correct = int((logits.argmax(-1)[keep] == lab[keep]).sum())
    return ce, correct


def pretrain(
    sentences: list[Sentence],
    signals: dict[str, np.ndarray],
    cfg: TrainConfig,
    model_cfg: ModelConfig,
    vocab_fingerprint: str,
    corpus_fingerprint: str | None = None,
    out_dir=None,
    resume: Checkpoint | None = None,
    log: Logger | None = None,
) -> Checkpoint:
    """Masked-token pretraining; loss only on masked positions.

    The RNG for shuffling, masking and dropout is derived from (seed, epoch), so
    resuming from an epoch checkpoint continues exactly as an uninterrupted run.
    """
    if not sentences:
        raise DataError("pretraining corpus is empty")
    if corpus_fingerprint is not None and corpus_fingerprint != vocab_fingerprint:
        raise DataError("token corpus was built with a different vocabulary")
    log = log or (lambda rec: None)
    if resume is not None:
        if resume.vocab_fingerprint != vocab_fingerprint:
            raise DataError("checkpoint was trained with a different vocabulary")
        model, adam = resume.model, resume.adam or ag.AdamState(lr=cfg.lr)
        start, step = int(resume.extra.get("epoch", 0)), int(resume.extra.get("step", 0))
    else:
        model, adam = EcgBert(model_cfg), ag.AdamState(lr=cfg.lr)
        start, step = 0, 0
        model.eval()
        with torch.no_grad():
            first = [sentences[i] for i in _batches(len(sentences), cfg.batch_size, _epoch_rng(cfg.seed, 0, 3))[0]]
            ce, correct = _mlm_batch(model, first, signals, cfg, _epoch_rng(cfg.seed, 0, 4))
        log({"step": 0, "epoch": 0, "loss": float(ce.loss), "masked_acc": correct / max(ce.count, 1), "phase": "init"})

    for epoch in range(start, cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch)
        _seed_torch(cfg.seed, epoch)
        model.train()
        tot_loss, tot_n, tot_correct = 0.0, 0, 0
        for idx in _batches(len(sentences), cfg.batch_size, rng):
            ce, correct = _mlm_batch(model, [sentences[i] for i in idx], signals, cfg, rng)
            if ce.count:
                ag.backward(ce.loss)
            ag.adam_step(model.trainable(), adam)
            step += 1
            loss = float(ce.loss.detach())
            tot_loss += loss * ce.count
            tot_n += ce.count
            tot_correct += correct
            log({"step": step, "epoch": epoch + 1, "loss": loss, "masked_acc": correct / max(ce.count, 1)})
        mean_loss = tot_loss / tot_n if tot_n else math.nan
        log({"step": step, "epoch": epoch + 1, "loss": mean_loss, "masked_acc": tot_correct / max(tot_n, 1), "phase": "epoch"})
        ckpt = Checkpoint(model, vocab_fingerprint, adam, {"epoch": epoch + 1, "step": step, "train": cfg.to_dict()})
        if out_dir is not None:
            save_checkpoint(ckpt, Path(out_dir) / f"epoch_{epoch + 1:03d}")
    final = Checkpoint(model.eval(), vocab_fingerprint, adam, {"epoch": max(cfg.epochs, start), "step": step, "train": cfg.to_dict()})
    if out_dir is not None:
        save_checkpoint(final, Path(out_dir) / "final")
    return final


# ---------------------------------------------------------------- fine-tuning


@dataclass
class LabeledSet:
    sentences: list[Sentence]
    labels: np.ndarray
    class_names: tuple[str, ...]

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.sentences) != len(self.labels):
            raise ValueError("one label per sentence")

    def __len__(self) -> int:
        return len(self.sentences)


@dataclass
class FinetuneResult:
    checkpoint: Checkpoint
    history: list[dict]
    report: dict | None


@torch.no_grad()
def predict(model: EcgBert, data: LabeledSet, signals, batch_size: int = 64, max_seq_len: int = 128) -> np.ndarray:
    model.eval()
    out = []
    for i in range(0, len(data), batch_size):
        batch = collate(data.sentences[i : i + batch_size], max_seq_len, None, signals)
        out.append(model.forward_cls(batch).argmax(-1).numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate_model(model, data: LabeledSet, signals, task: str, split_seed=None, max_seq_len: int = 128) -> dict:
    pred = predict(model, data, signals, max_seq_len=max_seq_len)
    cm = ConfusionMatrix.from_predictions(data.labels, pred, data.class_names)
    return metrics_report(task, cm, compute_metrics(cm), split_seed)


def finetune(
    ckpt: Checkpoint,
    train: LabeledSet,
    test: LabeledSet | None,
    signals: dict[str, np.ndarray],
    cfg: TrainConfig,
    vocab_fingerprint: str | None = None,
    out_dir=None,
    log: Logger | None = None,
    split_seed: int | None = None,
) -> FinetuneResult:
    """Attach the task head and train on ``train``; metrics on ``test`` every ``eval_every`` epochs."""
    if cfg.head_kind is None:
        raise ValueError(f"task {cfg.task!r} has no head kind")
    if vocab_fingerprint is not None and vocab_fingerprint != ckpt.vocab_fingerprint:
        raise DataError("checkpoint was trained with a different vocabulary")
    n_classes = len(train.class_names)
    if n_classes < 2:
        raise ValueError(f"need at least 2 classes, got {n_classes}")
    if cfg.head_kind == "dense_binary" and n_classes != 2:
        raise DataError(f"dense_binary head needs 2 classes, dataset has {n_classes}")
    for part in (train, test):
        if part is not None and part.labels.size and (part.labels.min() < 0 or part.labels.max() >= n_classes):
            raise DataError(f"labels outside [0, {n_classes}) for head with {n_classes} classes")
    if len(train) == 0:
        raise DataError("fine-tuning set is empty")
    log = log or (lambda rec: None)

    src = ckpt.model
    if src.cfg.head_kind == cfg.head_kind and src.cfg.n_classes == n_classes:
        model = src
    else:
        model = src.with_head(cfg.head_kind, n_classes, seed=cfg.seed)
    params = model.trainable()
    if cfg.freeze_encoder:
        params = type(params)((n, t) for n, t in params.items() if n.startswith("head."))
    adam = ag.AdamState(lr=cfg.lr)
    history: list[dict] = []
    report = None
    step = 0

    def record(rec):
        history.append(rec)
        log(rec)

    for epoch in range(cfg.epochs):
        rng = _epoch_rng(cfg.seed, epoch, 2)
        _seed_torch(cfg.seed, epoch)
        model.train()
        tot, n = 0.0, 0
        for idx in _batches(len(train), cfg.batch_size, rng):
            batch = collate([train.sentences[i] for i in idx], cfg.max_seq_len, None, signals)
            logits = model.forward_cls(batch)
            ce = ag.cross_entropy(logits, train.labels[idx])
            ag.backward(ce.loss)
            ag.adam_step(params, adam)
            for t in model.params.values():
                if t.grad is not None:
                    t.grad = None
            step += 1
            tot += float(ce.loss.detach()) * ce.count
            n += ce.count
        rec = {"step": step, "epoch": epoch + 1, "loss": tot / n}
        if test is not None and len(test) and ((epoch + 1) % cfg.eval_every == 0 or epoch + 1 == cfg.epochs):
            report = evaluate_model(model, test, signals, cfg.task, split_seed, cfg.max_seq_len)
            rec["accuracy"] = report["overall"]["accuracy"]
            rec["per_class"] = report["per_class"]
        record(rec)
    if cfg.epochs == 0 and test is not None and len(test):
        report = evaluate_model(model, test, signals, cfg.task, split_seed, cfg.max_seq_len)
        record({"step": 0, "epoch": 0, "accuracy": report["overall"]["accuracy"], "per_class": report["per_class"]})
    model.eval()
    out = Checkpoint(model, ckpt.vocab_fingerprint, adam, {"epoch": cfg.epochs, "step": step, "train": cfg.to_dict()})
    if out_dir is not None:
        save_checkpoint(out, Path(out_dir) / "final")
    return FinetuneResult(out, history, report)


def resume_pretrain(directory, sentences, signals, cfg: TrainConfig, vocab_fingerprint: str, **kw) -> Checkpoint:
    ckpt = load_checkpoint(directory)
    return pretrain(sentences, signals, replace(cfg), ckpt.model.cfg, vocab_fingerprint, resume=ckpt, **kw)
