from dataclasses import dataclass

import numpy as np
import pytest

from ecgbert.delineation import WaveType
from ecgbert.pipeline import ProcessedWindow, collect_waves, process_window, signals_of, token_sentences, window_sentences
from ecgbert.sentences import Sentence
from ecgbert.synthgen import generate_corpus
from ecgbert.vocabulary import VocabConfig, Vocabulary, fit_vocabulary


@dataclass
class TinyPipeline:
    windows: list[ProcessedWindow]
    vocab: Vocabulary
    sentences: list[Sentence]
    signals: dict[str, np.ndarray]
    sequences: list  # (window, whole-window sentence)


@pytest.fixture(scope="session")
def tiny():
    """Four synthetic patients, six windows each, tokenized with a small vocabulary."""
    corpus = generate_corpus(4, 6, seed=0)
    windows = [
        process_window(w.record.samples, 250, window_id=f"{w.patient_id}_{i:03d}", patient_id=w.patient_id, label=w.label)
        for i, w in enumerate(corpus.windows)
    ]
    k = {WaveType.P: 3, WaveType.QRS: 4, WaveType.T: 3, WaveType.BG: 4}
    vocab = fit_vocabulary(collect_waves(windows), VocabConfig(k=k, max_iters=5, dba_iters=2, seed=0))
    sents = token_sentences(windows, vocab, np.random.default_rng(0))
    return TinyPipeline(windows, vocab, sents, signals_of(windows), window_sentences(windows, vocab))


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
