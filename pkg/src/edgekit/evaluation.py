"""Attachment scores, the identical subclass test, and hubness (k-occurrence) measurement."""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .conllu import PUNCT_LABELS, Treebank
from .edge_model import ExplainIndex
from .inference import Parser, nearest, similarities

log = logging.getLogger(__name__)

REPORT_VERSION = "edgekit.report/1"


class AlignmentError(ValueError):
    pass


@dataclass
class ScoreReport:
    uas: float
    las: float
    tokens: int
    correct_heads: int
    correct_labeled: int
    name: str = "scores"
    confusion: dict[str, dict[str, int]] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {"type": "score", **asdict(self)}


@dataclass
class HubnessReport:
    k: int
    n_queries: int
    counts: np.ndarray  # N_k per support edge
    top: list[dict]
    name: str = "hubness"

    @property
    def max(self) -> int:
        return int(self.counts.max()) if len(self.counts) else 0

    @property
    def median(self) -> float:
        return float(np.median(self.counts)) if len(self.counts) else 0.0

    def conserved(self) -> bool:
        """Sum of N_k equals k per query whenever the index holds at least k edges."""
        k = min(self.k, len(self.counts))
        return int(self.counts.sum()) == k * self.n_queries

    def to_json(self) -> dict:
        return {"type": "hubness", "name": self.name, "k": self.k, "n_queries": self.n_queries,
                "n_support": int(len(self.counts)), "max": self.max, "median": self.median,
                "conserved": self.conserved(), "top": self.top}


# ---------------------------------------------------------------------------
# attachment scores


def attachment_scores(pred: Treebank, gold: Treebank, exclude_punct: bool = False,
                      punct_labels: Sequence[str] = tuple(PUNCT_LABELS), confusion: bool = False,
                      name: str = "scores") -> ScoreReport:
    """UAS/LAS over all tokens (or non-punctuation tokens, judged by the gold label)."""
    if len(pred) != len(gold):
        raise AlignmentError(f"predicted treebank has {len(pred)} sentences, gold has {len(gold)}")
    punct = set(punct_labels)
    n = uh = lh = 0
    conf: dict[str, dict[str, int]] = {}
    for k, (p, g) in enumerate(zip(pred.sentences, gold.sentences)):
        if len(p) != len(g):
            raise AlignmentError(f"sentence {k}: {len(p)} predicted tokens vs {len(g)} gold")
        if p.forms != g.forms:
            raise AlignmentError(f"sentence {k}: token forms differ")
        for pt, gt in zip(p.tokens, g.tokens):
            if exclude_punct and gt.deprel in punct:
                continue
            n += 1
            if pt.head == gt.head:
                uh += 1
                if pt.deprel == gt.deprel:
                    lh += 1
            if confusion:
                row = conf.setdefault(gt.deprel, {})
                row[pt.deprel] = row.get(pt.deprel, 0) + 1
    pct = (lambda c: 100.0 * c / n) if n else (lambda c: 0.0)
    return ScoreReport(pct(uh), pct(lh), n, uh, lh, name, conf)


def mean_scores(reports: Sequence[ScoreReport], name: str = "mean") -> ScoreReport:
    """Average of several runs (e.g. seeds); token counts are summed."""
    if not reports:
        raise ValueError("no reports to average")
    return ScoreReport(float(np.mean([r.uas for r in reports])), float(np.mean([r.las for r in reports])),
                       sum(r.tokens for r in reports), sum(r.correct_heads for r in reports),
                       sum(r.correct_labeled for r in reports), name)


# ---------------------------------------------------------------------------
# identical subclass test


def identical_subclass_test(parser: Parser, dev: Treebank, kind: str | None = None,
                            batch_size: int = 64, name: str = "subclass") -> ScoreReport:
    """LAS where a correctly attached edge counts only if its nearest training edge shares its gold label.

    ``parser`` holds an edge model (trained without label supervision) and an
    explain index over the training edges.
    """
    index = parser.edge_index
    if index is None or len(index) == 0:
        raise ValueError("identical subclass test needs a non-empty explain index")
    model = parser.edge_model
    index.check(model)
    kind = kind or (parser.edge_summary.kind if parser.edge_summary else model.cfg.similarity)
    label_of = {r: k for k, r in enumerate(index.labels)}
    heads = parser.predict_heads(dev.sentences, batch_size)
    queries, gold_labels = [], []
    n = uh = 0
    for k, (s, hs) in enumerate(zip(dev.sentences, heads)):
        for t, h in zip(s.tokens, hs):
            n += 1
            if h == t.head:
                uh += 1
                queries.append((k, t.head, t.index))
                gold_labels.append(label_of.get(t.deprel, -1))
    lh = 0
    if queries:
        reps = parser.edge_vectors(dev.sentences, queries, "edge", batch_size)
        top, _ = nearest(reps, index, kind, 1)
        lh = int((index.label_ids[top[:, 0]] == np.asarray(gold_labels)).sum())
    pct = (lambda c: 100.0 * c / n) if n else (lambda c: 0.0)
    return ScoreReport(pct(uh), pct(lh), n, uh, lh, name)


# ---------------------------------------------------------------------------
# hubness


def k_occurrence(queries: np.ndarray, index: ExplainIndex, kind: str, k: int = 10,
                 block: int = 1024) -> np.ndarray:
    """N_k for every support edge: how often it appears among a query's exact k nearest neighbours."""
    counts = np.zeros(len(index), dtype=np.int64)
    if len(index) < k:
        log.warning("index has %d edges, fewer than k=%d", len(index), k)
    kk = min(k, len(index))
    queries = np.atleast_2d(queries)
    for lo in range(0, len(queries), block):
        top = kernels.topk_indices(similarities(queries[lo: lo + block], index, kind), kk)
        counts += np.bincount(top.ravel(), minlength=len(index))
    return counts


def hubness(index: ExplainIndex, queries: np.ndarray, kind: str, k: int = 10, top_m: int = 100,
            name: str = "hubness") -> HubnessReport:
    counts = k_occurrence(queries, index, kind, k)
    order = np.lexsort((np.arange(len(counts)), -counts))[:top_m]
    top = []
    for rank, e in enumerate(order, 1):
        e = int(e)
        top.append({
            "rank": rank, "support_id": e, "n_k": int(counts[e]),
            "train_sentence_id": index.sent_ids[index.sent_idx[e]] if index.sent_ids else str(index.sent_idx[e]),
            "head": int(index.heads[e]), "dep": int(index.deps[e]),
            "head_form": index.head_forms[e] if index.head_forms else "",
            "dep_form": index.dep_forms[e] if index.dep_forms else "",
            "gold_label": index.labels[index.label_ids[e]],
        })
    return HubnessReport(k, int(np.atleast_2d(queries).shape[0]), counts, top, name)


# ---------------------------------------------------------------------------
# reports


REPORT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "type": "object",
    "required": ["version", "reports"],
    "properties": {
        "version": {"const": REPORT_VERSION},
        "reports": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["type", "name"],
                "properties": {
                    "type": {"enum": ["score", "hubness"]},
                    "name": {"type": "string"},
                    "uas": {"type": "number", "minimum": 0, "maximum": 100},
                    "las": {"type": "number", "minimum": 0, "maximum": 100},
                    "k": {"type": "integer", "minimum": 1},
                    "max": {"type": "integer", "minimum": 0},
                    "top": {"type": "array"},
                },
            },
        },
    },
}


def emit_report(reports: Sequence[ScoreReport | HubnessReport], out_dir: str | Path,
                stem: str = "report") -> list[Path]:
    """Write ``<stem>.json`` plus one ``<stem>.<name>.tsv`` ranking curve per hubness report."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    summary = {"version": REPORT_VERSION, "reports": [r.to_json() for r in reports]}
    p = out / f"{stem}.json"
    p.write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    written.append(p)
    for r in reports:
        if isinstance(r, HubnessReport):
            t = out / f"{stem}.{r.name}.tsv"
            with open(t, "w", encoding="utf-8") as fh:
                fh.write("rank\tn_k\tsupport_id\ttrain_sentence_id\thead\tdep\thead_form\tdep_form\tgold_label\n")
                for row in r.top:
                    fh.write("\t".join(str(row[c]) for c in ("rank", "n_k", "support_id", "train_sentence_id",
                                                            "head", "dep", "head_form", "dep_form",
                                                            "gold_label")) + "\n")
            written.append(t)
    return written
