"""Long-running invariants; opt in with ECGBERT_SLOW=1 (about 35 minutes on one CPU)."""

import os

import numpy as np
import pytest
import torch

import desk_scale as ds
from ecgbert.model import Checkpoint, EcgBert, ModelConfig
from ecgbert.training import TrainConfig, finetune, pretrain

pytestmark = pytest.mark.skipif(os.environ.get("ECGBERT_SLOW") != "1", reason="set ECGBERT_SLOW=1 to run")


def epochs_to_target(history, target=0.95):
    return next((r["epoch"] for r in history if r.get("accuracy", 0.0) >= target), len(history) + 1)


def test_pretraining_does_not_slow_fine_tuning():
    """Paired seeds: epochs to reach 0.95 on the rhythm task, pretrained vs random init, median over 5."""
    torch.set_num_threads(1)
    data = ds.rhythm_data()
    sents = data.pretrain_sentences()
    tr, te = ds.rhythm_split(data)
    pre, rnd = [], []
    for seed in range(5):
        mc = ModelConfig.from_dict({**ds.DESK_MODEL.to_dict(), "init_seed": seed})
        ck = pretrain(sents, data.signals, TrainConfig.for_task("mlm", epochs=1, seed=seed), mc, data.vocab.fingerprint)
        cfg = TrainConfig.for_task("afib", seed=seed)
        pre.append(epochs_to_target(finetune(ck, tr, te, data.signals, cfg).history))
        scratch = Checkpoint(EcgBert(mc), data.vocab.fingerprint)
        rnd.append(epochs_to_target(finetune(scratch, tr, te, data.signals, cfg).history))
    print("epochs to 0.95: pretrained", pre, "random init", rnd)
    assert np.median(pre) <= np.median(rnd)
