"""The ten acceptance criteria, each at its stated tolerance and runtime bound.

Every criterion prints one PASS/FAIL line (also repeated in the terminal summary).
"""

import math
import time

import numpy as np
import pytest
import torch

import desk_scale as ds
from conftest import ACCEPTANCE_LINES
from ecgbert import autograd as ag
from ecgbert.delineation import WaveType
from ecgbert.evaluation import TABLE2_CLASSES, TABLE2_COUNTS, TABLE2_PUBLISHED, ConfusionMatrix, compute_metrics
from ecgbert.model import Checkpoint, EcgBert, ModelConfig, load_checkpoint, save_checkpoint
from ecgbert.preprocess import bandstop, remove_baseline, rms_db
from ecgbert.sentences import IGNORE, Sentence, collate, mask_for_mlm
from ecgbert.signal_io import decode_212, encode_212
from ecgbert.synthgen import generate_corpus
from ecgbert.training import TrainConfig, finetune, pretrain
from ecgbert.vocabulary import CLS, DEFAULT_K, MASK, N_WAVE_TOKENS, PAD, SEP, VocabConfig, Vocabulary, fit_vocabulary, kmeans_dtw, dtw_distance, znormalize

from oracles import dtw_brute_force, score_delineation
from test_autograd import PRIMITIVES, projected
from test_cli import run_pipeline
from test_model import SMALL as SMALL_MODEL
from test_model import as_float64, random_batch, trainable_fn
from test_vocabulary import purity, two_families


def c1_table2(_):
    m = compute_metrics(ConfusionMatrix(TABLE2_COUNTS, TABLE2_CLASSES))
    misses = []
    for c in TABLE2_CLASSES:
        for k in ("sensitivity", "ppv"):
            got, pub = getattr(m.per_class[c], k), TABLE2_PUBLISHED[c][k]
            if abs(got - pub) > 0.005:
                misses.append(f"{c} {k} {got:.4f} vs {pub:.2f}")
    detail = "per-class sensitivity/PPV within 0.005" if not misses else "off by > 0.005: " + ", ".join(misses)
    return not misses, detail, 1.0


def c2_dtw(_):
    rng = np.random.default_rng(0)
    mismatches = 0
    for _ in range(1000):
        a, b = rng.normal(size=rng.integers(1, 7)), rng.normal(size=rng.integers(1, 7))
        mismatches += dtw_distance(a, b) != dtw_brute_force(a, b)
    return mismatches == 0, f"{mismatches} exact mismatches in 1000 pairs", 10.0


def c3_clustering(_):
    xs, truth = two_families()
    res = kmeans_dtw([znormalize(x) for x in xs], 2, np.random.default_rng(0))
    monotone = all(b <= a + 1e-9 for a, b in zip(res.inertia, res.inertia[1:]))
    pur = purity(res.labels, truth)
    rng = np.random.default_rng(0)
    waves = {t: [rng.normal(size=rng.integers(5, 12)) for _ in range(40)] for t in WaveType}
    v = fit_vocabulary(waves, VocabConfig(max_iters=3, dba_iters=1))
    mono_all = all(all(b <= a + 1e-9 for a, b in zip(d["inertia"], d["inertia"][1:])) for d in v.diagnostics.values())
    ok = monotone and mono_all and pur == 1.0 and v.n_centroids == 70 and sum(DEFAULT_K.values()) == 70
    return ok, f"purity {pur}, inertia monotone {monotone and mono_all}, {v.n_centroids} centroids", 60.0


def c4_delineation(_):
    sc = score_delineation(generate_corpus(20, 10, seed=4, snr_db=10).windows)
    mae = sc.mae_ms()
    ok = sc.n_windows == 200 and sc.precision >= 0.95 and sc.recall >= 0.95 and all(v <= 25.0 for v in mae.values())
    worst = max(mae, key=mae.get)
    return ok, f"precision {sc.precision:.3f} recall {sc.recall:.3f}, worst boundary MAE {worst[0]}-{worst[1]} {mae[worst]:.1f} ms", 120.0


def c5_gradients(_):
    worst_prim = max(ag.gradcheck(projected(op), inputs) for op, inputs in PRIMITIVES.values())
    targets = torch.tensor([[1, -1, 3], [0, 2, -1]])
    g = torch.Generator().manual_seed(0)
    worst_prim = max(worst_prim, ag.gradcheck(lambda z: ag.cross_entropy(z, targets).loss, [torch.randn(2, 3, 5, generator=g, dtype=torch.float64)]))
    m = as_float64(EcgBert(SMALL_MODEL)).train()
    batch = random_batch(SMALL_MODEL, 0, mask=True)
    fn, params = trainable_fn(m, lambda mm: ag.cross_entropy(mm.forward_mlm(batch), batch.labels).loss)
    mlm = ag.gradcheck(fn, params, directions=12, h=1e-4)
    head = as_float64(EcgBert(SMALL_MODEL).with_head("residual_multiclass", 5)).train()
    cb = random_batch(SMALL_MODEL, 1, n_sent=4)
    y = torch.tensor([0, 3, 1, 4])
    fn, params = trainable_fn(head, lambda mm: ag.cross_entropy(mm.forward_cls(cb), y).loss)
    cls = ag.gradcheck(fn, params, directions=12, h=1e-4)
    ok = worst_prim < 1e-3 and max(mlm, cls) < 1e-2
    return ok, f"worst primitive {worst_prim:.2e}, composed MLM {mlm:.2e}, composed classifier {cls:.2e}", 120.0


def c6_mlm(_):
    torch.set_num_threads(1)
    data = ds.rhythm_data(10, 20, seed=5)
    sents = data.pretrain_sentences()[:500]
    epochs = []
    init = {}

    def log(r):
        if r.get("phase") == "init":
            init.update(r)
        elif r.get("phase") == "epoch":
            epochs.append(r)

    pretrain(sents, data.signals, TrainConfig.for_task("mlm", epochs=10, seed=0), ModelConfig(), data.vocab.fingerprint, log=log)
    losses = [r["loss"] for r in epochs]
    decreasing = all(b < a for a, b in zip(losses[:4], losses[1:4]))
    best_acc = max(r["masked_acc"] for r in epochs)
    ok = len(sents) == 500 and abs(init["loss"] - math.log(70)) <= 0.3 and decreasing and best_acc > 0.20
    losses_txt = " ".join(f"{x:.2f}" for x in losses[:4])
    return ok, f"initial loss {init['loss']:.3f}, first epoch losses {losses_txt}, best masked acc {best_acc:.3f}", 600.0


def c7_finetune(_):
    torch.set_num_threads(1)
    rhythm = ds.rhythm_data()
    ident = ds.identification_data(rhythm.vocab)
    ck = pretrain(rhythm.pretrain_sentences(), rhythm.signals, TrainConfig.for_task("mlm", epochs=1, seed=0), ds.DESK_MODEL, rhythm.vocab.fingerprint)
    tr, te = ds.rhythm_split(rhythm)
    afib = finetune(ck, tr, te, rhythm.signals, TrainConfig.for_task("afib", seed=0)).report["overall"]["accuracy"]
    tr, te = ds.identification_split(ident)
    cfg = TrainConfig.for_task("identify", seed=0)
    user = finetune(ck, tr, te, ident.signals, cfg).report["overall"]["accuracy"]
    ok = afib >= 0.95 and user >= 0.90
    return ok, f"rhythm held-out accuracy {afib:.3f} (lr 1e-3, batch 64, 13 epochs), 4-user identification {user:.3f}", 900.0


def c8_masking(_):
    rng = np.random.default_rng(8)
    bad = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 120))
        pad_to = n + 2 + int(rng.integers(0, 6))
        s = Sentence((CLS,) + tuple(int(t) for t in rng.integers(0, N_WAVE_TOKENS, n)) + (SEP,), (None,) + tuple((i, i + 1) for i in range(n)) + (None,))
        filler = Sentence((CLS,) + (0,) * (pad_to - 2) + (SEP,), (None,) + tuple((i, i + 1) for i in range(pad_to - 2)) + (None,))
        masked = mask_for_mlm(s, 0.15, rng)
        batch = collate([s, filler], 128, [masked, (np.asarray(filler.token_ids), np.full(pad_to, IGNORE))])
        inp, lab = batch.input_ids[0], batch.labels[0]
        targets = np.flatnonzero(lab != IGNORE)
        bad += len(targets) != math.floor(0.15 * n + 0.5)
        bad += bool(np.any(np.isin(np.asarray(s.token_ids)[targets], [CLS, SEP, PAD])))
        bad += bool(np.any(lab[n + 2 :] != IGNORE)) or bool(np.any(inp[n + 2 :] != PAD))
        bad += inp[0] != CLS or inp[n + 1] != SEP or bool(np.any(inp[targets] != MASK))
    return bad == 0, f"{bad} violations in 10000 trials", 10.0


def c9_reproducibility(tmp_path):
    run_pipeline(tmp_path / "a")
    run_pipeline(tmp_path / "b")
    files = ["report.json", "vocab.json", "corpus.tsv", "sequences.tsv", "split.json", "windows.npz", "checkpoints/final/params.bin", "finetuned/final/params.bin"]
    same = all((tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes() for f in files)
    ck = load_checkpoint(tmp_path / "a" / "finetuned" / "final")
    save_checkpoint(ck, tmp_path / "copy")
    again = load_checkpoint(tmp_path / "copy")
    ck_ok = all(torch.equal(t, again.model.params[n]) for n, t in ck.model.params.items()) and (tmp_path / "copy" / "params.bin").read_bytes() == (tmp_path / "a" / "finetuned" / "final" / "params.bin").read_bytes()
    v = Vocabulary.from_json((tmp_path / "a" / "vocab.json").read_text())
    vocab_ok = Vocabulary.from_json(v.to_json()) == v and v.to_json() == (tmp_path / "a" / "vocab.json").read_text()
    rng = np.random.default_rng(9)
    pairs = rng.integers(-2048, 2048, size=(10_000, 2))
    wfdb_ok = np.array_equal(decode_212(encode_212(pairs.reshape(-1))), pairs.reshape(-1))
    ok = same and ck_ok and vocab_ok and wfdb_ok
    return ok, f"pipeline bitwise {same}, checkpoint {ck_ok}, vocabulary {vocab_ok}, 212 over 10000 pairs {wfdb_ok}", 60.0


def c10_filters(_):
    fs, t, steady = 250, np.arange(2500) / 250, slice(250, -250)
    att55 = rms_db(np.sin(2 * np.pi * 55 * t)[steady]) - rms_db(bandstop(np.sin(2 * np.pi * 55 * t), fs)[steady])
    d5 = rms_db(bandstop(np.sin(2 * np.pi * 5 * t), fs)[steady]) - rms_db(np.sin(2 * np.pi * 5 * t)[steady])
    sine = np.sin(2 * np.pi * 10 * t)
    resid = np.max(np.abs(remove_baseline(sine + np.linspace(0, 1, 2500), fs) - sine)[125:-125])
    ok = att55 >= 20 and abs(d5) <= 1 and resid < 0.05
    return ok, f"55 Hz attenuation {att55:.1f} dB, 5 Hz change {d5:+.3f} dB, ramp residual {resid:.4f} mV", 30.0


CRITERIA = [
    (1, "Table 2 metric arithmetic", c1_table2),
    (2, "DTW oracle equivalence", c2_dtw),
    (3, "clustering soundness", c3_clustering),
    (4, "delineation vs synthetic oracle", c4_delineation),
    (5, "gradient integrity", c5_gradients),
    (6, "MLM learning signal", c6_mlm),
    (7, "desk-scale fine-tuning", c7_finetune),
    (8, "masking contract", c8_masking),
    (9, "reproducibility and persistence", c9_reproducibility),
    (10, "filter specs", c10_filters),
]


@pytest.mark.parametrize("number,name,check", CRITERIA, ids=[f"criterion_{n:02d}" for n, _, _ in CRITERIA])
def test_acceptance(number, name, check, tmp_path):
    start = time.perf_counter()
    try:
        ok, detail, budget = check(tmp_path)
    except Exception as e:  # a crash is a failed criterion, reported like any other
        ok, detail, budget = False, f"raised {type(e).__name__}: {e}", math.inf
    elapsed = time.perf_counter() - start
    in_time = elapsed < budget
    line = f"ACCEPTANCE {number:2d} {'PASS' if ok and in_time else 'FAIL'} {name}: {detail}; {elapsed:.1f} s (limit {budget:g} s)"
    print(line)
    ACCEPTANCE_LINES.append(line)
    assert ok, line
    assert in_time, line
