"""Parsing sessions: fast / explainable instance inference, weight inference, decoding, rationales."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels
from .container import load_tensors, save_tensors
from .conllu import Sentence, Treebank
from .edge_model import (
    EdgeModel,
    ExplainIndex,
    SupportSummary,
    head_mask,
    iter_batches,
    precompute_support,
    unit_rows,
)

log = logging.getLogger(__name__)

MODES = ("fast", "explainable", "weight")
DECODERS = ("greedy", "cle")
EXPLAIN_CHUNK = 1 << 22  # similarity cells materialised at once in explainable mode


class MissingArtifactError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# decoding


def decode_greedy(scores: np.ndarray) -> np.ndarray:
    """Per-dependent argmax over allowed heads; ties go to the lowest index. Returns heads[1..T]."""
    n = scores.shape[0]
    if n < 2:
        raise ValueError("sentence must have at least one token")
    z = np.where(head_mask(n), scores, -np.inf)
    return np.argmax(z[1:], axis=1)


def decode_cle(scores: np.ndarray, single_root: bool = False) -> np.ndarray:
    """Maximum spanning arborescence rooted at 0. ``scores`` is [dep, head]; returns heads[1..T].

    With ``single_root`` exactly one token attaches to ROOT: every ROOT edge is
    penalised by a constant larger than any achievable score difference, so the
    optimum uses the fewest ROOT edges (one) and is the best such tree.
    """
    n = scores.shape[0]
    if n < 2:
        raise ValueError("cannot decode an empty sentence")
    mask = head_mask(n)
    if not np.isfinite(scores[mask]).all():
        raise ValueError("decode_cle needs finite scores on every candidate edge")
    S = np.where(mask, scores, -np.inf).astype(np.float64)
    if single_root and n > 2:
        finite = S[mask]
        penalty = (finite.max() - finite.min() + 1.0) * n
        S[1:, 0] -= penalty
    return np.asarray(kernels.cle_decode(S)[1:], dtype=np.int64)


def is_tree(heads: Sequence[int]) -> bool:
    """True if ``heads`` (for tokens 1..T) forms an arborescence rooted at 0."""
    full = np.concatenate([[-1], np.asarray(heads, dtype=np.int64)])
    n = len(full)
    if ((full[1:] < 0) | (full[1:] >= n) | (full[1:] == np.arange(1, n))).any():
        return False
    return kernels.find_cycle(full) is None


# ---------------------------------------------------------------------------
# results


@dataclass
class ParseResult:
    heads: list[int]
    labels: list[str]
    mode: str
    head_scores: np.ndarray | None = None


@dataclass
class Neighbor:
    support_id: int
    similarity: float


@dataclass
class Rationale:
    sentence: int
    head: int
    dep: int
    neighbors: list[Neighbor] = field(default_factory=list)


# ---------------------------------------------------------------------------
# artifact files


def save_summary(summary: SupportSummary, path: str | Path) -> None:
    meta = {"format": "edgekit.summary/1", "task": summary.task, "kind": summary.kind, "tau": summary.tau,
            "param_hash": summary.param_hash, "labels": summary.labels}
    save_tensors(path, {"sums": summary.sums, "counts": summary.counts}, meta)


def load_summary(path: str | Path) -> SupportSummary:
    arrays, meta = load_tensors(path)
    if meta.get("format") != "edgekit.summary/1":
        raise ValueError(f"{path}: not a support summary")
    return SupportSummary(meta["task"], meta["kind"], meta["tau"], arrays["sums"], arrays["counts"],
                          meta["param_hash"], meta["labels"])


def save_index(index: ExplainIndex, path: str | Path) -> None:
    meta = {"format": "edgekit.index/1", "task": index.task, "labels": index.labels,
            "param_hash": index.param_hash, "tau": index.tau, "sent_ids": index.sent_ids,
            "head_forms": index.head_forms, "dep_forms": index.dep_forms}
    save_tensors(path, {"vectors": index.vectors, "norms": index.norms, "sent_idx": index.sent_idx,
                        "heads": index.heads, "deps": index.deps, "label_ids": index.label_ids}, meta)


def load_index(path: str | Path) -> ExplainIndex:
    a, meta = load_tensors(path)
    if meta.get("format") != "edgekit.index/1":
        raise ValueError(f"{path}: not an explain index")
    return ExplainIndex(meta["task"], a["vectors"], a["norms"], a["sent_idx"], a["heads"], a["deps"],
                        a["label_ids"], meta["labels"], meta["param_hash"], meta["tau"], meta["sent_ids"],
                        meta["head_forms"], meta["dep_forms"])


# ---------------------------------------------------------------------------
# scoring against support


def _edge_vectors(model: EdgeModel, h_dep: np.ndarray, h_head: np.ndarray, b, heads, deps) -> np.ndarray:
    W = model.params["comp"].data.astype(np.float64)
    prod = h_dep[b, deps].astype(np.float64) * h_head[b, heads].astype(np.float64)
    return prod @ W.T


def summary_scores(reps: np.ndarray, summary: SupportSummary) -> np.ndarray:
    """Fast mode: one dot product per edge against the summed support. Returns [n, K]."""
    sums = summary.sums.astype(np.float64)
    if summary.kind == "cos":
        return summary.tau * (unit_rows(reps) @ sums.T)
    return reps @ sums.T


def explicit_scores(reps: np.ndarray, index: ExplainIndex, kind: str, n_groups: int) -> np.ndarray:
    """Explainable mode: sum of per-support-edge similarities. Returns [n, n_groups].

    For the edge task every support edge belongs to group 0; for the label task
    the group is the edge's label.
    """
    q = unit_rows(reps) if kind == "cos" else reps
    sup = index.unit_vectors() if kind == "cos" else index.vectors
    sup = sup.astype(np.float64)
    groups = np.zeros(len(index), dtype=np.int64) if index.task == "edge" else index.label_ids
    out = np.zeros((len(reps), n_groups))
    step = max(1, EXPLAIN_CHUNK // max(len(index), 1))
    for lo in range(0, len(reps), step):
        sims = q[lo: lo + step] @ sup.T
        if kind == "cos":
            sims *= index.tau
        for g in range(n_groups):
            out[lo: lo + step, g] = sims[:, groups == g].sum(axis=1)
    return out


def similarities(query: np.ndarray, index: ExplainIndex, kind: str) -> np.ndarray:
    """[n, E] pairwise similarities between query edge vectors and every support edge."""
    query = np.atleast_2d(query).astype(np.float64)
    if kind == "cos":
        return index.tau * (unit_rows(query) @ index.unit_vectors().T)
    return query @ index.vectors.astype(np.float64).T


def nearest(query: np.ndarray, index: ExplainIndex, kind: str, k: int, block: int = 1024) -> tuple[np.ndarray, np.ndarray]:
    """Exact top-k support edges per query row: (indices [n, k], similarities [n, k])."""
    query = np.atleast_2d(query)
    if k > len(index):
        log.warning("k=%d exceeds the %d support edges; returning all", k, len(index))
        k = len(index)
    idx_out = np.empty((len(query), k), dtype=np.int64)
    sim_out = np.empty((len(query), k))
    for lo in range(0, len(query), block):
        sims = similarities(query[lo: lo + block], index, kind)
        top = kernels.topk_indices(sims, k)
        idx_out[lo: lo + block] = top
        sim_out[lo: lo + block] = np.take_along_axis(sims, top, axis=1)
    return idx_out, sim_out


# ---------------------------------------------------------------------------
# sessions


class Parser:
    """A parsing session over an edge model and (optionally) a label model.

    ``mode`` selects the scorer: ``fast`` (summed support vectors),
    ``explainable`` (explicit per-edge similarity sums over the explain index)
    or ``weight`` (the learned weight vectors, weight-trained models only).
    """

    def __init__(self, edge_model: EdgeModel | None, label_model: EdgeModel | None = None, *,
                 edge_summary: SupportSummary | None = None, edge_index: ExplainIndex | None = None,
                 label_summary: SupportSummary | None = None, label_index: ExplainIndex | None = None,
                 mode: str = "fast", decoder: str = "greedy", single_root: bool = False):
        self.edge_model = edge_model
        self.label_model = label_model
        self.edge_summary = edge_summary
        self.edge_index = edge_index
        self.label_summary = label_summary
        self.label_index = label_index
        if decoder not in DECODERS:
            raise ValueError(f"decoder must be one of {DECODERS}")
        self.decoder = decoder
        self.single_root = single_root
        self.mode = mode
        self.switch_mode(mode)

    @classmethod
    def for_model(cls, edge_model: EdgeModel | None, support: Treebank | None, *,
                  label_model: EdgeModel | None = None, label_support: Treebank | None = None,
                  mode: str | None = None, **kw) -> "Parser":
        """Build a session, precomputing support artifacts from the given treebanks."""
        es = ei = ls = li = None
        if edge_model is not None and support is not None:
            es, ei = precompute_support(edge_model, support)
        if label_model is not None and label_support is not None:
            ls, li = precompute_support(label_model, label_support)
        if mode is None:
            mode = "fast" if (es is not None or ls is not None) else "weight"
        return cls(edge_model, label_model, edge_summary=es, edge_index=ei, label_summary=ls,
                   label_index=li, mode=mode, **kw)

    def switch_mode(self, mode: str) -> "Parser":
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        for name, model, summary, index in (("edge", self.edge_model, self.edge_summary, self.edge_index),
                                            ("label", self.label_model, self.label_summary, self.label_index)):
            if model is None:
                continue
            if mode == "fast":
                if summary is None:
                    raise MissingArtifactError(f"fast mode needs a {name} support summary; run `edgekit precompute`")
                summary.check(model)
            elif mode == "explainable":
                if index is None:
                    raise MissingArtifactError(f"explainable mode needs a {name} explain index; run `edgekit precompute`")
                index.check(model)
            elif model.cfg.scoring != "weight":
                raise MissingArtifactError(f"weight mode needs a weight-trained {name} model")
        self.mode = mode
        return self

    # -- scores -----------------------------------------------------------

    def _kind(self, model: EdgeModel, summary: SupportSummary | None) -> str:
        return summary.kind if summary is not None else model.cfg.similarity

    def _group_scores(self, model, summary, index, reps, n_groups) -> np.ndarray:
        if self.mode == "fast":
            summary.check(model)
            return summary_scores(reps, summary)
        if self.mode == "explainable":
            index.check(model)
            return explicit_scores(reps, index, self._kind(model, summary), n_groups)
        key = "head_weight" if model.cfg.task == "edge" else "label_weight"
        w = np.atleast_2d(model.params[key].data.astype(np.float64))
        if model.cfg.similarity == "cos":
            return model.cfg.tau * (unit_rows(reps) @ unit_rows(w).T)
        return reps @ w.T

    def head_scores(self, sentences: Sequence[Sentence], batch_size: int = 64) -> list[np.ndarray]:
        """Per sentence a [T+1, T+1] score matrix (dependent rows, head columns); masked cells are -inf."""
        model = self.edge_model
        if model is None:
            raise MissingArtifactError("no edge model loaded")
        out = []
        for rows in iter_batches(len(sentences), batch_size):
            sents = [sentences[r] for r in rows]
            batch = model.encoder.batch(sents)
            h_dep, h_head = model.encode(batch, train=False)
            hd, hh = h_dep.data, h_head.data
            bs, hs, ds, spans = [], [], [], []
            lo = 0
            for b, s in enumerate(sents):
                n = len(s) + 1
                dep, head = np.nonzero(head_mask(n))
                spans.append((n, lo, dep, head))
                lo += len(dep)
                bs.append(np.full(len(dep), b))
                hs.append(head)
                ds.append(dep)
            b_all, h_all, d_all = np.concatenate(bs), np.concatenate(hs), np.concatenate(ds)
            reps = _edge_vectors(model, hd, hh, b_all, h_all, d_all)
            flat = self._group_scores(model, self.edge_summary, self.edge_index, reps, 1)[:, 0]
            for n, lo, dep, head in spans:
                mat = np.full((n, n), -np.inf)
                mat[dep, head] = flat[lo: lo + len(dep)]
                out.append(mat)
        return out

    def label_scores(self, sentences: Sequence[Sentence], heads: Sequence[Sequence[int]],
                     batch_size: int = 64) -> list[np.ndarray]:
        """Per sentence a [T, |R|] score matrix for the edges (heads[i], i+1)."""
        model = self.label_model
        if model is None:
            raise MissingArtifactError("no label model loaded")
        n_labels = len(model.labels)
        out = []
        for rows in iter_batches(len(sentences), batch_size):
            sents = [sentences[r] for r in rows]
            batch = model.encoder.batch(sents)
            h_dep, h_head = model.encode(batch, train=False)
            b_all = np.concatenate([np.full(len(s), b) for b, s in enumerate(sents)])
            d_all = np.concatenate([np.arange(1, len(s) + 1) for s in sents])
            h_all = np.concatenate([np.asarray(heads[r], dtype=np.int64) for r in rows])
            reps = _edge_vectors(model, h_dep.data, h_head.data, b_all, h_all, d_all)
            flat = self._group_scores(model, self.label_summary, self.label_index, reps, n_labels)
            lo = 0
            for s in sents:
                out.append(flat[lo: lo + len(s)])
                lo += len(s)
        return out

    # -- predictions ------------------------------------------------------

    def decode(self, scores: np.ndarray) -> np.ndarray:
        if self.decoder == "cle":
            return decode_cle(scores, self.single_root)
        return decode_greedy(scores)

    def predict_heads(self, sentences: Sequence[Sentence], batch_size: int = 64) -> list[list[int]]:
        return [self.decode(m).tolist() for m in self.head_scores(sentences, batch_size)]

    def predict_labels(self, sentences: Sequence[Sentence], heads: Sequence[Sequence[int]],
                       batch_size: int = 64) -> list[list[str]]:
        names = self.label_model.labels
        return [[names[k] for k in np.argmax(m, axis=1)] for m in self.label_scores(sentences, heads, batch_size)]

    def parse(self, sentences: Sequence[Sentence], batch_size: int = 64, keep_scores: bool = False) -> list[ParseResult]:
        mats = self.head_scores(sentences, batch_size)
        heads = [self.decode(m).tolist() for m in mats]
        if self.label_model is not None:
            labels = self.predict_labels(sentences, heads, batch_size)
        else:
            labels = [["_"] * len(s) for s in sentences]
        return [ParseResult(h, r, self.mode, m if keep_scores else None) for h, r, m in zip(heads, labels, mats)]

    def parse_treebank(self, tb: Treebank, batch_size: int = 64) -> Treebank:
        results = self.parse(tb.sentences, batch_size)
        sents = [s.with_annotation(r.heads, r.labels) for s, r in zip(tb.sentences, results)]
        return Treebank(sents, list(self.label_model.labels) if self.label_model else list(tb.labels))

    # -- rationales -------------------------------------------------------

    def edge_vectors(self, sentences: Sequence[Sentence], edges: Sequence[tuple[int, int, int]],
                     task: str = "edge", batch_size: int = 64) -> np.ndarray:
        """Representations of ``(sentence, head, dep)`` edges under the edge or label model."""
        model = self.edge_model if task == "edge" else self.label_model
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 3)
        out = np.zeros((len(edges), model.d))
        for rows in iter_batches(len(sentences), batch_size):
            sel = np.flatnonzero((edges[:, 0] >= rows.start) & (edges[:, 0] < rows.stop))
            if not len(sel):
                continue
            batch = model.encoder.batch([sentences[r] for r in rows])
            h_dep, h_head = model.encode(batch, train=False)
            e = edges[sel]
            out[sel] = _edge_vectors(model, h_dep.data, h_head.data, e[:, 0] - rows.start, e[:, 1], e[:, 2])
        return out

    def explain(self, sentences: Sequence[Sentence], edges: Sequence[tuple[int, int, int]], k: int = 5,
                task: str = "edge", batch_size: int = 64) -> list[Rationale]:
        """Top-k most similar support edges for each query edge ``(sentence, head, dep)``."""
        model = self.edge_model if task == "edge" else self.label_model
        index = self.edge_index if task == "edge" else self.label_index
        summary = self.edge_summary if task == "edge" else self.label_summary
        if index is None:
            raise MissingArtifactError(f"no {task} explain index; run `edgekit precompute`")
        index.check(model)
        reps = self.edge_vectors(sentences, edges, task, batch_size)
        top, sims = nearest(reps, index, self._kind(model, summary), k)
        return [Rationale(int(s), int(h), int(d), [Neighbor(int(i), float(v)) for i, v in zip(ti, si)])
                for (s, h, d), ti, si in zip(edges, top, sims)]


def explain_edge(query: np.ndarray, index: ExplainIndex, kind: str, k: int) -> list[Neighbor]:
    """Rationale for a single query vector."""
    top, sims = nearest(query, index, kind, k)
    return [Neighbor(int(i), float(v)) for i, v in zip(top[0], sims[0])]
