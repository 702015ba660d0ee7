"""Edge representations, weight- and instance-based scorers, and support precomputation.

Score matrices are laid out ``[dependent, head]``: row ``i`` holds the scores
of every candidate head ``j`` for dependent ``i``. Row 0 (ROOT) is never a
dependent.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .container import tensors_digest
from .conllu import Sentence, Treebank, Vocabulary
from .encoder import Batch, Encoder, EncoderConfig

log = logging.getLogger(__name__)

SCORING = ("weight", "instance")
KINDS = ("dot", "cos")
TASKS = ("edge", "label")
TRAIN_EPS = 1e-12


class StaleSupportError(RuntimeError):
    pass


@dataclass
class EdgeConfig:
    task: str = "edge"
    scoring: str = "instance"
    similarity: str = "cos"
    tau: float = 64.0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ValueError(f"task must be one of {TASKS}")
        if self.scoring not in SCORING:
            raise ValueError(f"scoring must be one of {SCORING}")
        if self.similarity not in KINDS:
            raise ValueError(f"similarity must be one of {KINDS}")
        if self.similarity == "cos" and not self.tau > 0:
            raise ValueError("tau must be positive for cosine similarity")


# ---------------------------------------------------------------------------
# single-edge primitives (numpy, used for explanation and as reference)


def edge_rep(h_dep: np.ndarray, h_head: np.ndarray, j: int, i: int, W: np.ndarray) -> np.ndarray:
    """``W (h_dep[i] * h_head[j])`` for head ``j`` and dependent ``i``."""
    n = h_dep.shape[0]
    if not (0 <= j < n and 1 <= i < n) or i == j:
        raise IndexError(f"invalid edge head={j} dep={i} for sentence of {n - 1} tokens")
    return W @ (h_dep[i] * h_head[j])


def similarity(a: np.ndarray, b: np.ndarray, kind: str, tau: float = 64.0) -> float:
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch {a.shape} vs {b.shape}")
    if kind == "dot":
        return float(a @ b)
    if kind == "cos":
        na, nb = np.linalg.norm(a), np.linalg.norm(b)
        if na == 0 or nb == 0:
            raise ValueError("cosine similarity with a zero vector")
        return float(tau * (a / na) @ (b / nb))
    raise ValueError(f"unknown similarity {kind!r}")


def unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=-1, keepdims=True)
    if (norms == 0).any():
        raise ValueError("cosine similarity with a zero edge representation")
    return x / norms


def masked_softmax(scores: np.ndarray, mask: np.ndarray) -> np.ndarray:
    z = np.where(mask, scores, -np.inf)
    top = np.max(z, axis=-1, keepdims=True)
    e = np.where(mask, np.exp(z - np.where(np.isfinite(top), top, 0.0)), 0.0)
    s = e.sum(axis=-1, keepdims=True)
    return e / np.where(s > 0, s, 1.0)


def head_mask(n_nodes: int) -> np.ndarray:
    """Candidate mask ``[dep, head]`` for a sentence with ``n_nodes = T + 1``: no self heads, no ROOT row."""
    m = ~np.eye(n_nodes, dtype=bool)
    m[0] = False
    return m


def head_distribution(scores: np.ndarray) -> np.ndarray:
    """Per-dependent probabilities over heads 0..T (self masked); row 0 is all zeros."""
    return masked_softmax(scores, head_mask(scores.shape[0]))


def label_distribution(scores: np.ndarray) -> np.ndarray:
    return masked_softmax(scores, np.ones_like(scores, dtype=bool))


def batch_head_mask(batch: Batch) -> tuple[np.ndarray, np.ndarray]:
    """(candidate mask [B, L, L], dependent-row mask [B, L]) for padded batches."""
    L = batch.max_len
    valid = batch.token_mask()
    cand = valid[:, None, :] & ~np.eye(L, dtype=bool)[None]
    rows = valid.copy()
    rows[:, 0] = False
    cand &= rows[:, :, None]
    return cand, rows


# ---------------------------------------------------------------------------
# the model


class EdgeModel:
    """Encoder + multiplicative edge composition + task head.

    For the edge task the weight-based head is a vector ``head_weight``; for
    the label task a matrix ``label_weight`` with one row per label.
    Instance-scored models carry no weights at all.
    """

    def __init__(self, vocab: Vocabulary, enc_cfg: EncoderConfig, edge_cfg: EdgeConfig,
                 rng: np.random.Generator, pretrained: np.ndarray | None = None, dtype=None):
        self.vocab = vocab
        self.cfg = edge_cfg
        self.encoder = Encoder(vocab, enc_cfg, rng, pretrained, dtype)
        dt = self.encoder.dtype
        d = enc_cfg.d
        self.params: dict[str, Tensor] = dict(self.encoder.params)
        self.params["comp"] = Tensor(np.eye(d, dtype=dt) + rng.uniform(-0.01, 0.01, (d, d)).astype(dt), True, "comp")
        if edge_cfg.scoring == "weight":
            s = np.sqrt(6.0 / (d + 1))
            if edge_cfg.task == "edge":
                self.params["head_weight"] = Tensor(rng.uniform(-s, s, d).astype(dt), True, "head_weight")
            else:
                n = len(vocab.labels)
                self.params["label_weight"] = Tensor(rng.uniform(-s, s, (n, d)).astype(dt), True, "label_weight")
        self.frozen = set(self.encoder.frozen)
        self._digest: str | None = None

    @property
    def labels(self) -> list[str]:
        return self.vocab.label_list

    @property
    def d(self) -> int:
        return self.encoder.cfg.d

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        missing = set(self.params) - set(arrays)
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {sorted(missing)}")
        for k, t in self.params.items():
            if arrays[k].shape != t.shape:
                raise ValueError(f"parameter {k}: checkpoint shape {arrays[k].shape} != model {t.shape}")
            t.data = np.array(arrays[k], dtype=t.dtype, copy=True)
        self.touch()

    def touch(self) -> None:
        """Invalidate the cached parameter hash (call after any update)."""
        self._digest = None

    def digest(self) -> str:
        if self._digest is None:
            self._digest = tensors_digest(self.param_arrays())
        return self._digest

    # -- representations --------------------------------------------------

    def encode(self, batch: Batch, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        return self.encoder.encode(batch, train, rng)

    def compose(self, prod: Tensor) -> Tensor:
        """Apply W to a stack of elementwise products (rows are vectors)."""
        return prod @ ad.transpose(self.params["comp"])

    def all_edge_reps(self, h_dep: Tensor, h_head: Tensor) -> Tensor:
        """[B, L_dep, L_head, d] representations of every (head, dependent) pair."""
        prod = ad.reshape(h_dep, (h_dep.shape[0], h_dep.shape[1], 1, h_dep.shape[2])) * \
            ad.reshape(h_head, (h_head.shape[0], 1, h_head.shape[1], h_head.shape[2]))
        return self.compose(prod)

    def edge_reps(self, h_dep: Tensor, h_head: Tensor, b: np.ndarray, heads: np.ndarray,
                  deps: np.ndarray) -> Tensor:
        """[E, d] representations of selected edges ``(b, head -> dep)``."""
        a = h_dep[np.asarray(b), np.asarray(deps)]
        c = h_head[np.asarray(b), np.asarray(heads)]
        return self.compose(a * c)

    # -- scoring ----------------------------------------------------------

    def _normalize(self, x: Tensor, train: bool) -> Tensor:
        return ad.l2_normalize(x, axis=-1, eps=TRAIN_EPS if train else 0.0)

    def head_scores_weight(self, h_dep: Tensor, h_head: Tensor, train: bool = False) -> Tensor:
        w = self.params["head_weight"]
        if self.cfg.similarity == "dot":
            return self._dot_scores(h_dep, h_head, w)
        reps = self.all_edge_reps(h_dep, h_head)
        return self._cos_against(reps, w, train)

    def head_scores_instance(self, h_dep: Tensor, h_head: Tensor, support_sum: Tensor,
                             kind: str | None = None, train: bool = False) -> Tensor:
        """Scores against a summed support vector. For cos, ``support_sum`` must be a sum of unit vectors."""
        kind = kind or self.cfg.similarity
        if kind == "dot":
            return self._dot_scores(h_dep, h_head, support_sum)
        reps = self.all_edge_reps(h_dep, h_head)
        return self.cfg.tau * (self._normalize(reps, train) @ support_sum)

    def _dot_scores(self, h_dep: Tensor, h_head: Tensor, v: Tensor) -> Tensor:
        # (W(a*b)).v == (a * W^T v) . b, which avoids materialising every pair representation
        u = ad.transpose(self.params["comp"]) @ v
        scaled = h_dep * u
        return scaled @ ad.transpose(h_head, (0, 2, 1))

    def _cos_against(self, reps: Tensor, w: Tensor, train: bool) -> Tensor:
        wu = self._normalize(w, train)
        if wu.ndim == 2:
            wu = ad.transpose(wu)
        return self.cfg.tau * (self._normalize(reps, train) @ wu)

    def label_scores_weight(self, reps: Tensor, train: bool = False) -> Tensor:
        """[E, |R|] scores ``w_r . h`` (dot) or ``tau cos(w_r, h)`` (cos)."""
        W = self.params["label_weight"]
        if self.cfg.similarity == "dot":
            return reps @ ad.transpose(W)
        return self._cos_against(reps, W, train)

    def label_scores_instance(self, reps: Tensor, label_sums: Tensor, kind: str | None = None,
                              train: bool = False) -> Tensor:
        kind = kind or self.cfg.similarity
        if kind == "dot":
            return reps @ ad.transpose(label_sums)
        return self.cfg.tau * (self._normalize(reps, train) @ ad.transpose(label_sums))

    def support_sum(self, reps: Tensor, train: bool = False, kind: str | None = None) -> Tensor:
        kind = kind or self.cfg.similarity
        if kind == "cos":
            reps = self._normalize(reps, train)
        return ad.sum(reps, axis=0)


# ---------------------------------------------------------------------------
# precomputed support


@dataclass
class SupportSummary:
    """Summed support vectors. ``sums`` is [1, d] for the edge task, [|R|, d] for labels."""

    task: str
    kind: str
    tau: float
    sums: np.ndarray
    counts: np.ndarray
    param_hash: str
    labels: list[str] = field(default_factory=list)

    def check(self, model: EdgeModel) -> None:
        if self.param_hash != model.digest():
            raise StaleSupportError(
                f"support summary was built for parameters {self.param_hash}, model is {model.digest()}; "
                "rerun `edgekit precompute`")

    @property
    def head_sum(self) -> np.ndarray:
        return self.sums[0]


@dataclass
class ExplainIndex:
    """Every support edge with provenance. Vectors are raw; norms are kept for cosine use."""

    task: str
    vectors: np.ndarray  # [E, d]
    norms: np.ndarray  # [E]
    sent_idx: np.ndarray  # [E]
    heads: np.ndarray  # [E]
    deps: np.ndarray  # [E]
    label_ids: np.ndarray  # [E]
    labels: list[str]
    param_hash: str
    tau: float
    sent_ids: list[str] = field(default_factory=list)
    head_forms: list[str] = field(default_factory=list)
    dep_forms: list[str] = field(default_factory=list)

    def __len__(self) -> int:
        return self.vectors.shape[0]

    def check(self, model: EdgeModel) -> None:
        if self.param_hash != model.digest():
            raise StaleSupportError(
                f"explain index was built for parameters {self.param_hash}, model is {model.digest()}; "
                "rerun `edgekit precompute`")

    def unit_vectors(self) -> np.ndarray:
        if (self.norms == 0).any():
            bad = int(np.flatnonzero(self.norms == 0)[0])
            raise ValueError(f"support edge {bad} (sentence {self.sent_idx[bad]}, "
                             f"{self.heads[bad]}->{self.deps[bad]}) has a zero representation")
        return self.vectors / self.norms[:, None]

    def summarize(self, kind: str, n_labels: int | None = None) -> np.ndarray:
        """Recompute summed vectors from the stored members (brute-force reference)."""
        vecs = self.unit_vectors() if kind == "cos" else self.vectors
        if self.task == "edge":
            return vecs.sum(axis=0, keepdims=True)
        n = n_labels if n_labels is not None else len(self.labels)
        out = np.zeros((n, vecs.shape[1]), dtype=vecs.dtype)
        np.add.at(out, self.label_ids, vecs)
        return out


def iter_batches(n: int, size: int):
    for lo in range(0, n, size):
        yield range(lo, min(n, lo + size))


def gold_edges(sentences: Sequence[Sentence]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(batch row, head, dependent) of every gold edge, in sentence/token order."""
    b, h, d = [], [], []
    for row, s in enumerate(sentences):
        for t in s.tokens:
            b.append(row)
            h.append(t.head)
            d.append(t.index)
    return np.asarray(b, dtype=np.int64), np.asarray(h, dtype=np.int64), np.asarray(d, dtype=np.int64)


def encode_gold_edges(model: EdgeModel, sentences: Sequence[Sentence], batch_size: int = 64) -> np.ndarray:
    """Inference-time representations of all gold edges, shape [E, d]."""
    chunks = []
    for rows in iter_batches(len(sentences), batch_size):
        sents = [sentences[r] for r in rows]
        batch = model.encoder.batch(sents)
        h_dep, h_head = model.encode(batch, train=False)
        b, h, d = gold_edges(sents)
        if len(b):
            chunks.append(model.edge_reps(h_dep, h_head, b, h, d).data)
    if not chunks:
        return np.zeros((0, model.d), dtype=model.encoder.dtype)
    return np.concatenate(chunks, axis=0)


def precompute_support(model: EdgeModel, tb: Treebank, kind: str | None = None,
                       batch_size: int = 64) -> tuple[SupportSummary, ExplainIndex]:
    """Encode every training sentence once and build both inference artifacts."""
    kind = kind or model.cfg.similarity
    vecs = encode_gold_edges(model, tb.sentences, batch_size)
    sent_idx, heads, deps, label_ids = [], [], [], []
    head_forms, dep_forms = [], []
    label_map = model.vocab.labels
    for n, s in enumerate(tb.sentences):
        for t in s.tokens:
            if t.deprel not in label_map:
                raise KeyError(f"sentence {n}: label {t.deprel!r} unknown to the model")
            sent_idx.append(n)
            heads.append(t.head)
            deps.append(t.index)
            label_ids.append(label_map[t.deprel])
            head_forms.append(s.form_at(t.head))
            dep_forms.append(t.form)
    index = ExplainIndex(
        task=model.cfg.task,
        vectors=vecs,
        norms=np.linalg.norm(vecs, axis=1),
        sent_idx=np.asarray(sent_idx, dtype=np.int64),
        heads=np.asarray(heads, dtype=np.int64),
        deps=np.asarray(deps, dtype=np.int64),
        label_ids=np.asarray(label_ids, dtype=np.int64),
        labels=model.labels,
        param_hash=model.digest(),
        tau=model.cfg.tau,
        sent_ids=[s.sent_id or str(n) for n, s in enumerate(tb.sentences)],
        head_forms=head_forms,
        dep_forms=dep_forms,
    )
    n_labels = len(model.labels)
    sums = index.summarize(kind, n_labels)
    if model.cfg.task == "edge":
        counts = np.asarray([len(index)], dtype=np.int64)
    else:
        counts = np.bincount(index.label_ids, minlength=n_labels).astype(np.int64)
        for r in np.flatnonzero(counts == 0):
            log.warning("label %r has no support edges; its summed vector is zero", model.labels[r])
    summary = SupportSummary(model.cfg.task, kind, model.cfg.tau, sums, counts, model.digest(), model.labels)
    return summary, index
