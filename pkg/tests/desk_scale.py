"""Desk-scale comparison of weight- and instance-based systems on a small UD sample.

System names follow a two-letter convention plus the similarity: the first
letter is the training scorer, the second the inference scorer (W weight,
I instance), the suffix ``d``/``c`` is dot/cosine. WWd is weight-trained
dot scored with its weights; WIc is weight-trained cosine scored against
the training support; IIc is instance-trained cosine.

``EDGEKIT_UD_DIR`` must point at a directory holding ``*-ud-train.conllu``
and ``*-ud-dev.conllu`` (e.g. UD_English-EWT).
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from edgekit.conllu import Treebank, read_treebank
from edgekit.edge_model import encode_gold_edges, precompute_support
from edgekit.evaluation import attachment_scores, hubness, identical_subclass_test
from edgekit.inference import Parser
from edgekit.training import TrainConfig, train

UD_ENV = "EDGEKIT_UD_DIR"

# Default training hyperparameters with a narrower encoder and a shorter
# schedule so twelve runs fit in the time budget on one core.
DESK_PRESET = dict(word_dim=100, char_dim=50, char_filters=30, lstm_layers=2, lstm_hidden=100, dropout=0.2,
                   lr=0.001, decay=0.05, tau=64.0, n_query=32, n_support=10, epochs=20)


class DataUnavailable(RuntimeError):
    pass


def ud_paths(root: str | None = None) -> tuple[Path, Path]:
    root = root or os.environ.get(UD_ENV)
    if not root:
        raise DataUnavailable(f"{UD_ENV} is not set; no UD English treebank available")
    d = Path(root)
    tr, dv = sorted(d.glob("*-ud-train.conllu")), sorted(d.glob("*-ud-dev.conllu"))
    if not tr or not dv:
        raise DataUnavailable(f"{d} has no *-ud-train.conllu / *-ud-dev.conllu pair")
    return tr[0], dv[0]


def load_ud_sample(root: str | None = None, n_train: int = 1000) -> tuple[Treebank, Treebank]:
    tr, dv = ud_paths(root)
    train_tb = read_treebank(tr)
    dev_tb = read_treebank(dv)
    sample = Treebank(train_tb.sentences[:n_train])
    return sample, Treebank(dev_tb.sentences, sample.labels)


@dataclass
class DeskResults:
    uas: dict[str, list[float]] = field(default_factory=dict)
    subclass_las: dict[str, list[float]] = field(default_factory=dict)
    max_n10: dict[str, int] = field(default_factory=dict)
    seconds: float = 0.0

    def mean(self, table: str, system: str) -> float:
        return float(np.mean(getattr(self, table)[system]))


def run_desk_scale(train_tb: Treebank, dev_tb: Treebank, seeds=(1, 2, 3), preset: dict | None = None,
                   k: int = 10) -> DeskResults:
    preset = {**DESK_PRESET, **(preset or {})}
    res = DeskResults()
    t0 = time.perf_counter()
    for scoring in ("weight", "instance"):
        for kind in ("dot", "cos"):
            for seed in seeds:
                cfg = TrainConfig(task="edge", scoring=scoring, similarity=kind, seed=seed, **preset)
                model = train(train_tb, dev_tb, cfg).model
                summary, index = precompute_support(model, train_tb)
                instance = Parser(model, edge_summary=summary, edge_index=index, mode="fast")
                own = instance if scoring == "instance" else Parser(model, mode="weight")
                tag = "I" if scoring == "instance" else "W"
                d = kind[0]
                pred = Treebank([s.with_annotation(h, s.deprels) for s, h in
                                 zip(dev_tb.sentences, own.predict_heads(dev_tb.sentences))])
                res.uas.setdefault(f"{tag}{tag}{d}", []).append(attachment_scores(pred, dev_tb).uas)
                sub = identical_subclass_test(instance, dev_tb, kind)
                res.subclass_las.setdefault(f"{tag}I{d}", []).append(sub.las)
                if scoring == "weight" and seed == seeds[0]:
                    q = encode_gold_edges(model, dev_tb.sentences)
                    res.max_n10[f"WI{d}"] = hubness(index, q, kind, k).max
    res.seconds = time.perf_counter() - t0
    return res
