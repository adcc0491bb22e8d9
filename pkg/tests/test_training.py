import json
import math

import numpy as np
import pytest
import torch

from ecgbert.errors import DataError
from ecgbert.model import EcgBert, ModelConfig, load_checkpoint
from ecgbert.training import JsonlLog, LabeledSet, TrainConfig, evaluate_model, finetune, pretrain, resume_pretrain

SMALL = ModelConfig(d_model=32, n_layers=1, n_heads=2, d_ff=64, unet_channels=(4, 8))


def mlm_cfg(**kw):
    return TrainConfig(**{"task": "mlm", "lr": 1e-3, "batch_size": 16, "epochs": 2, "seed": 3, **kw})


def params_equal(a, b):
    return list(a.params) == list(b.params) and all(torch.equal(a.params[n], b.params[n]) for n in a.params)


def labeled(tiny, names=("0", "1")):
    sents = [s for _, s in tiny.sequences]
    labels = [int(w.label) for w, _ in tiny.sequences]
    return LabeledSet(sents, labels, names)


def test_task_defaults():
    got = {t: (c.lr, c.batch_size, c.epochs) for t in ("afib", "heartbeat", "apnea", "verify") for c in [TrainConfig.for_task(t)]}
    assert got["afib"] == (1e-3, 64, 13)
    assert got["heartbeat"][0] == 1e-4 and got["heartbeat"][2] == 20
    assert got["apnea"] == (5e-3, 64, 5)
    assert got["verify"] == (1e-4, 128, 20)
    assert TrainConfig.for_task("identify").head_kind == "dense_multiclass"
    with pytest.raises(ValueError):
        TrainConfig(task="translate")
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


def test_pretrain_log_format_and_initial_loss(tiny, tmp_path):
    log = JsonlLog(tmp_path / "log.jsonl")
    pretrain(tiny.sentences, tiny.signals, mlm_cfg(), SMALL, tiny.vocab.fingerprint, out_dir=tmp_path / "ck", log=log)
    lines = [json.loads(x) for x in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == log.records
    assert all({"step", "epoch", "loss", "masked_acc"} <= set(r) for r in lines)
    assert lines[0]["step"] == 0 and abs(lines[0]["loss"] - math.log(70)) <= 0.3
    steps = [r["step"] for r in lines if "phase" not in r]
    assert steps == list(range(1, len(steps) + 1))
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["epoch_001", "epoch_002", "final"]


def test_pretrain_is_bitwise_reproducible(tiny):
    a = pretrain(tiny.sentences, tiny.signals, mlm_cfg(), SMALL, tiny.vocab.fingerprint)
    b = pretrain(tiny.sentences, tiny.signals, mlm_cfg(), SMALL, tiny.vocab.fingerprint)
    assert params_equal(a.model, b.model)
    c = pretrain(tiny.sentences, tiny.signals, mlm_cfg(seed=4), SMALL, tiny.vocab.fingerprint)
    assert not params_equal(a.model, c.model)


def test_resume_equals_uninterrupted(tiny, tmp_path):
    fp = tiny.vocab.fingerprint
    full = pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=3), SMALL, fp)
    pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=1), SMALL, fp, out_dir=tmp_path)
    resumed = resume_pretrain(tmp_path / "epoch_001", tiny.sentences, tiny.signals, mlm_cfg(epochs=3), fp)
    assert params_equal(full.model, resumed.model)
    assert all(torch.equal(full.adam.m[n], resumed.adam.m[n]) for n in full.adam.m)
    assert resumed.extra["step"] == full.extra["step"]


def test_pretrain_errors(tiny, tmp_path):
    fp = tiny.vocab.fingerprint
    with pytest.raises(DataError):
        pretrain([], tiny.signals, mlm_cfg(), SMALL, fp)
    with pytest.raises(DataError):
        pretrain(tiny.sentences, tiny.signals, mlm_cfg(), SMALL, fp, corpus_fingerprint="other")
    pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=1), SMALL, fp, out_dir=tmp_path)
    with pytest.raises(DataError):
        resume_pretrain(tmp_path / "final", tiny.sentences, tiny.signals, mlm_cfg(), "other")


def test_freeze_and_zero_epochs_match_untrained_head(tiny):
    ckpt = pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=1), SMALL, tiny.vocab.fingerprint)
    data = labeled(tiny)
    cfg = TrainConfig.for_task("afib", epochs=0, freeze_encoder=True, seed=5)
    res = finetune(ckpt, data, data, tiny.signals, cfg)
    fresh = ckpt.model.with_head("dense_binary", 2, seed=5)
    assert res.report == evaluate_model(fresh, data, tiny.signals, "afib")
    assert params_equal(res.checkpoint.model, fresh)
    again = finetune(ckpt, data, data, tiny.signals, cfg)
    assert again.report == res.report


def test_freeze_encoder_trains_head_only(tiny):
    ckpt = pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=1), SMALL, tiny.vocab.fingerprint)
    data = labeled(tiny)
    res = finetune(ckpt, data, None, tiny.signals, TrainConfig.for_task("afib", epochs=1, freeze_encoder=True))
    after = res.checkpoint.model.params
    for n, t in ckpt.model.params.items():
        if t.requires_grad:
            assert torch.equal(t, after[n]), n
    assert any(not torch.equal(after[n], ckpt.model.with_head("dense_binary", 2).params[n]) for n in after if n.startswith("head."))


def test_finetune_full_updates_encoder_and_logs(tiny, tmp_path):
    ckpt = pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=1), SMALL, tiny.vocab.fingerprint)
    data = labeled(tiny)
    log = JsonlLog(tmp_path / "ft.jsonl")
    res = finetune(ckpt, data, data, tiny.signals, TrainConfig.for_task("afib", epochs=2), out_dir=tmp_path, log=log)
    assert not torch.equal(ckpt.model.params["tok_emb"], res.checkpoint.model.params["tok_emb"])
    assert [r["epoch"] for r in res.history] == [1, 2]
    assert all({"step", "epoch", "loss", "accuracy"} <= set(r) for r in res.history)
    assert load_checkpoint(tmp_path / "final").model.cfg.head_kind == "dense_binary"


def test_finetune_errors(tiny):
    ckpt = pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=0), SMALL, tiny.vocab.fingerprint)
    data = labeled(tiny)
    with pytest.raises(DataError):
        finetune(ckpt, data, None, tiny.signals, TrainConfig.for_task("afib", epochs=1), vocab_fingerprint="other")
    three = LabeledSet(data.sentences, data.labels, ("a", "b", "c"))
    with pytest.raises(DataError):
        finetune(ckpt, three, None, tiny.signals, TrainConfig.for_task("afib", epochs=1))
    bad = LabeledSet(data.sentences, np.full(len(data), 2), ("a", "b"))
    with pytest.raises(DataError):
        finetune(ckpt, bad, None, tiny.signals, TrainConfig.for_task("afib", epochs=1))
    with pytest.raises(ValueError):
        finetune(ckpt, data, None, tiny.signals, TrainConfig.for_task("mlm"))


def test_zero_epoch_pretrain_is_the_initial_model(tiny):
    ckpt = pretrain(tiny.sentences, tiny.signals, mlm_cfg(epochs=0), SMALL, tiny.vocab.fingerprint)
    assert params_equal(ckpt.model, EcgBert(SMALL)) and ckpt.extra["step"] == 0
