"""Desk-scale fine-tuning setups shared by the acceptance suite and the slow tests."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ecgbert.evaluation import inter_patient_split
from ecgbert.model import ModelConfig
from ecgbert.pipeline import ProcessedWindow, collect_waves, process_window, signals_of, token_sentences, window_sentences
from ecgbert.synthgen import generate_corpus
from ecgbert.training import LabeledSet
from ecgbert.vocabulary import Vocabulary, fit_vocabulary

# compact encoder with mean pooling; trains in minutes on one CPU thread
DESK_MODEL = ModelConfig(d_model=64, n_layers=2, n_heads=4, d_ff=128, unet_channels=(8, 16), pooling="mean")
RHYTHM_NAMES = ("regular", "irregular")


def process_corpus(corpus) -> list[ProcessedWindow]:
    return [
        process_window(w.record.samples, 250, window_id=w.record.record_id, patient_id=w.patient_id, label=w.label)
        for w in corpus.windows
    ]


@dataclass
class DeskData:
    windows: list[ProcessedWindow]
    vocab: Vocabulary
    signals: dict[str, np.ndarray]

    def pretrain_sentences(self, seed: int = 0):
        return token_sentences(self.windows, self.vocab, np.random.default_rng(seed))

    def sequences(self):
        return window_sentences(self.windows, self.vocab)


def rhythm_data(n_patients: int = 80, windows_per_patient: int = 20, seed: int = 21) -> DeskData:
    pw = process_corpus(generate_corpus(n_patients, windows_per_patient, seed=seed, snr_db=20))
    return DeskData(pw, fit_vocabulary(collect_waves(pw)), signals_of(pw))


def rhythm_split(data: DeskData, test_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    seqs = data.sequences()
    tr, te = inter_patient_split([w.patient_id for w, _ in seqs], test_fraction, seed)

    def part(ids):
        sel = [(w, s) for w, s in seqs if w.patient_id in ids]
        return LabeledSet([s for _, s in sel], [int(w.label) for w, _ in sel], RHYTHM_NAMES)

    return part(set(tr)), part(set(te))


def identification_data(vocab: Vocabulary, n_users: int = 4, windows_per_user: int = 200, seed: int = 33) -> DeskData:
    """Users with distinct beat morphologies, tokenized with an existing vocabulary."""
    pw = process_corpus(generate_corpus(n_users, windows_per_user, seed=seed, snr_db=20))
    return DeskData(pw, vocab, signals_of(pw))


def identification_split(data: DeskData, test_fraction: float = 0.2, seed: int = 0) -> tuple[LabeledSet, LabeledSet]:
    """Within-user split: every user appears on both sides, as in identification."""
    seqs = data.sequences()
    users = tuple(sorted({w.patient_id for w, _ in seqs}))
    rng = np.random.default_rng(seed)
    train, test = [], []
    for u in users:
        mine = [x for x in seqs if x[0].patient_id == u]
        idx = rng.permutation(len(mine))
        cut = len(mine) - int(round(test_fraction * len(mine)))
        train += [mine[i] for i in idx[:cut]]
        test += [mine[i] for i in idx[cut:]]

    def part(items):
        return LabeledSet([s for _, s in items], [users.index(w.patient_id) for w, _ in items], users)

    return part(train), part(test)
