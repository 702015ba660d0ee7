"""Query/support mini-batching, the two NLL objectives, optimisation and checkpoints."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import AdamState, Tape, Tensor
from .container import load_tensors, save_tensors
from .conllu import Sentence, Treebank, Vocabulary, build_vocab, load_word_vectors
from .edge_model import EdgeConfig, EdgeModel, batch_head_mask, gold_edges
from .encoder import EncoderConfig

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    task: str = "edge"
    scoring: str = "instance"
    similarity: str = "cos"
    tau: float = 64.0
    n_query: int = 32
    n_support: int = 10
    support_per_label: int = 1
    full_support: bool = False
    lr: float = 0.001
    decay: float = 0.05
    epochs: int = 100
    clip: float = 5.0
    dropout: float = 0.2
    seed: int = 1
    word_dim: int = 100
    char_dim: int = 50
    char_filters: int = 30
    char_window: int = 3
    lstm_layers: int = 2
    lstm_hidden: int = 300
    edge_dim: int | None = None
    min_freq: int = 1
    lowercase: bool = False
    dtype: str = "float64"
    eval_batch: int = 64
    word_vectors: str | None = None

    def __post_init__(self):
        if min(self.n_query, self.n_support, self.support_per_label) < 1:
            raise ValueError("n_query, n_support and support_per_label must be >= 1")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must be in [0, 1)")
        EdgeConfig(self.task, self.scoring, self.similarity, self.tau)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(self.word_dim, self.char_dim, self.char_filters, self.char_window,
                             self.lstm_layers, self.lstm_hidden, self.edge_dim, self.dropout)

    def edge_config(self) -> EdgeConfig:
        return EdgeConfig(self.task, self.scoring, self.similarity, self.tau)

    def to_json(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_json(cls, obj: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(obj) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**obj)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_json(), sort_keys=True).encode()).hexdigest()[:16]


def learning_rate(lr0: float, decay: float, epochs_done: int) -> float:
    """eta_t = eta_0 / (1 + rho * t), t = number of completed epochs."""
    return lr0 / (1.0 + decay * epochs_done)


# ---------------------------------------------------------------------------
# sampling


def sample_edge_batch(n_sentences: int, n_query: int, n_support: int, rng: np.random.Generator,
                      queries: np.ndarray | None = None, full_support: bool = False):
    """Sentence ids for one edge-task step.

    ``queries`` lets the caller supply the ids (epoch-shuffled passes); support
    sentences are always redrawn, uniformly and without replacement within a step.
    """
    if n_sentences < 1:
        raise ValueError("empty training set")
    if queries is None:
        queries = rng.choice(n_sentences, size=min(n_query, n_sentences), replace=False)
    if full_support:
        supports = np.arange(n_sentences)
    else:
        supports = rng.choice(n_sentences, size=min(n_support, n_sentences), replace=False)
    return np.asarray(queries, dtype=np.int64), supports.astype(np.int64)


def label_edge_table(sentences: Sequence[Sentence], labels: Sequence[str]) -> list[np.ndarray]:
    """Per label id, an [n, 2] array of (sentence id, dependent index) gold edges."""
    per: list[list[tuple[int, int]]] = [[] for _ in labels]
    lid = {r: k for k, r in enumerate(labels)}
    for n, s in enumerate(sentences):
        for t in s.tokens:
            if t.deprel in lid:
                per[lid[t.deprel]].append((n, t.index))
    return [np.asarray(p, dtype=np.int64).reshape(-1, 2) for p in per]


def sample_label_batch(table: Sequence[np.ndarray], n_sentences: int, n_query: int, n_support: int,
                       rng: np.random.Generator, queries: np.ndarray | None = None):
    """Query sentence ids plus ``n_support`` gold edges per label.

    Returns ``(queries, support)`` where ``support`` is an [S, 3] array of
    (sentence id, dependent index, label id). Labels without training edges
    are skipped.
    """
    if queries is None:
        queries = rng.choice(n_sentences, size=min(n_query, n_sentences), replace=False)
    rows = []
    for r, edges in enumerate(table):
        if len(edges) == 0:
            continue
        pick = rng.choice(len(edges), size=min(n_support, len(edges)), replace=False)
        for e in edges[pick]:
            rows.append((e[0], e[1], r))
    return np.asarray(queries, dtype=np.int64), np.asarray(rows, dtype=np.int64).reshape(-1, 3)


# ---------------------------------------------------------------------------
# objectives


def _head_targets(sentences: Sequence[Sentence], L: int) -> np.ndarray:
    t = np.zeros((len(sentences), L), dtype=np.int64)
    for b, s in enumerate(sentences):
        for tok in s.tokens:
            t[b, tok.index] = tok.head
    return t


def head_loss(model: EdgeModel, queries: Sequence[Sentence], supports: Sequence[Sentence] = (),
              train: bool = True, rng: np.random.Generator | None = None) -> Tensor:
    """Sum over query tokens of -log P(gold head | dependent)."""
    nq = len(queries)
    use_support = model.cfg.scoring == "instance"
    sents = list(queries) + (list(supports) if use_support else [])
    batch = model.encoder.batch(sents)
    h_dep, h_head = model.encode(batch, train=train, rng=rng)
    cand, rows = batch_head_mask(batch)
    cand, rows = cand[:nq], rows[:nq]
    qd, qh = h_dep[:nq], h_head[:nq]
    if use_support:
        if not supports:
            raise ValueError("instance scoring needs support sentences")
        b, h, d = gold_edges(supports)
        reps = model.edge_reps(h_dep, h_head, b + nq, h, d)
        scores = model.head_scores_instance(qd, qh, model.support_sum(reps, train=True), train=True)
    else:
        scores = model.head_scores_weight(qd, qh, train=True)
    return ad.nll_loss(scores, _head_targets(queries, batch.max_len), mask=cand, row_mask=rows)


def label_loss(model: EdgeModel, queries: Sequence[Sentence], support_sents: Sequence[Sentence] = (),
               support_edges: np.ndarray | None = None, train: bool = True,
               rng: np.random.Generator | None = None) -> Tensor:
    """Sum over gold query edges of -log P(gold label | gold head, dependent).

    ``support_edges`` rows are (row in ``support_sents``, dependent index, label id).
    """
    nq = len(queries)
    n_labels = len(model.labels)
    use_support = model.cfg.scoring == "instance"
    sents = list(queries) + (list(support_sents) if use_support else [])
    batch = model.encoder.batch(sents)
    h_dep, h_head = model.encode(batch, train=train, rng=rng)
    b, h, d = gold_edges(queries)
    label_ids = model.vocab.labels
    targets = np.asarray([label_ids[t.deprel] for s in queries for t in s.tokens], dtype=np.int64)
    reps = model.edge_reps(h_dep, h_head, b, h, d)
    if use_support:
        if support_edges is None or len(support_edges) == 0:
            raise ValueError("instance scoring needs support edges")
        sb = support_edges[:, 0] + nq
        sd = support_edges[:, 1]
        sh = np.asarray([support_sents[r].tokens[dep - 1].head for r, dep in support_edges[:, :2]], dtype=np.int64)
        sreps = model.edge_reps(h_dep, h_head, sb, sh, sd)
        if model.cfg.similarity == "cos":
            sreps = ad.l2_normalize(sreps, eps=1e-12)
        onehot = np.zeros((n_labels, len(support_edges)), dtype=model.encoder.dtype)
        onehot[support_edges[:, 2], np.arange(len(support_edges))] = 1.0
        sums = Tensor(onehot) @ sreps
        present = onehot.sum(axis=1) > 0
        scores = model.label_scores_instance(reps, sums, train=True)
        mask = np.broadcast_to(present, scores.shape)
        rows = present[targets]
    else:
        scores = model.label_scores_weight(reps, train=True)
        mask, rows = None, None
    return ad.nll_loss(scores, targets, mask=mask, row_mask=rows)


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    model: EdgeModel
    config: TrainConfig
    dev_score: float
    epoch: int
    history: list[dict] = field(default_factory=list)

    @property
    def label_supervision(self) -> bool:
        return self.config.task == "label"

    def meta(self) -> dict:
        return {
            "format": "edgekit.checkpoint/1",
            "task": self.config.task,
            "label_supervision": self.label_supervision,
            "config": self.config.to_json(),
            "config_hash": self.config.digest(),
            "vocab": self.model.vocab.to_json(),
            "vocab_hash": self.model.vocab.digest(),
            "param_hash": self.model.digest(),
            "frozen": sorted(self.model.frozen),
            "dev_score": self.dev_score,
            "epoch": self.epoch,
        }

    def save(self, path: str | Path) -> None:
        save_tensors(path, self.model.param_arrays(), self.meta())

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        arrays, meta = load_tensors(path)
        if meta.get("format") != "edgekit.checkpoint/1":
            raise ValueError(f"{path}: not an edgekit checkpoint")
        cfg = TrainConfig.from_json(meta["config"])
        vocab = Vocabulary.from_json(meta["vocab"])
        if vocab.digest() != meta["vocab_hash"]:
            raise ValueError(f"{path}: vocabulary hash mismatch")
        pretrained = arrays["word_emb"] if "word_emb" in meta.get("frozen", []) else None
        model = EdgeModel(vocab, cfg.encoder_config(), cfg.edge_config(), np.random.default_rng(0),
                          pretrained=pretrained, dtype=np.dtype(cfg.dtype).type)
        model.load_arrays(arrays)
        if model.digest() != meta["param_hash"]:
            raise ValueError(f"{path}: parameter hash mismatch")
        return cls(model, cfg, meta["dev_score"], meta["epoch"])


# ---------------------------------------------------------------------------
# evaluation helpers used for model selection


def dev_uas(model: EdgeModel, train_tb: Treebank, dev_tb: Treebank, batch_size: int = 64) -> float:
    from .inference import Parser

    parser = Parser.for_model(model, train_tb if model.cfg.scoring == "instance" else None)
    correct = total = 0
    for res, s in zip(parser.predict_heads(dev_tb.sentences, batch_size), dev_tb.sentences):
        correct += sum(int(p == g) for p, g in zip(res, s.heads))
        total += len(s)
    return 100.0 * correct / max(total, 1)


def dev_label_accuracy(model: EdgeModel, train_tb: Treebank, dev_tb: Treebank, batch_size: int = 64) -> float:
    from .inference import Parser

    parser = Parser.for_model(None, None, label_model=model,
                              label_support=train_tb if model.cfg.scoring == "instance" else None)
    correct = total = 0
    heads = [s.heads for s in dev_tb.sentences]
    for pred, s in zip(parser.predict_labels(dev_tb.sentences, heads, batch_size), dev_tb.sentences):
        correct += sum(int(p == g) for p, g in zip(pred, s.deprels))
        total += len(s)
    return 100.0 * correct / max(total, 1)


# ---------------------------------------------------------------------------
# the loop


def init_model(train_tb: Treebank, cfg: TrainConfig, vocab: Vocabulary | None = None) -> EdgeModel:
    dtype = np.dtype(cfg.dtype).type
    pretrained = None
    if cfg.word_vectors:
        words, vectors = load_word_vectors(cfg.word_vectors)
        if vectors.shape[1] != cfg.word_dim:
            raise ValueError(f"word vectors are {vectors.shape[1]}-dimensional, config says {cfg.word_dim}")
        if vocab is None:
            vocab = build_vocab(train_tb, cfg.min_freq, cfg.lowercase, extra_words=words)
        table = np.zeros((len(vocab.words), cfg.word_dim))
        rng = np.random.default_rng(cfg.seed + 7)
        found = np.zeros(len(vocab.words), dtype=bool)
        for w, vec in zip(words, vectors):
            wid = vocab.words.get(w)
            if wid is not None:
                table[wid] = vec
                found[wid] = True
        missing = ~found
        missing[vocab.pad_id] = False
        table[missing] = rng.uniform(-0.1, 0.1, (int(missing.sum()), cfg.word_dim))
        pretrained = table
    elif vocab is None:
        vocab = build_vocab(train_tb, cfg.min_freq, cfg.lowercase)
    rng = np.random.default_rng(cfg.seed)
    return EdgeModel(vocab, cfg.encoder_config(), cfg.edge_config(), rng, pretrained=pretrained, dtype=dtype)


def train(train_tb: Treebank, dev_tb: Treebank, cfg: TrainConfig, vocab: Vocabulary | None = None,
          log_path: str | Path | None = None,
          on_epoch: Callable[[dict], None] | None = None) -> Checkpoint:
    """Train one task model and return the checkpoint with the best dev score."""
    model = init_model(train_tb, cfg, vocab)
    missing = set(train_tb.labels) - set(model.vocab.labels)
    if missing:
        raise ValueError(f"training labels missing from vocabulary: {sorted(missing)}")
    sample_rng = np.random.default_rng([cfg.seed, 1])
    drop_rng = np.random.default_rng([cfg.seed, 2])
    params = model.trainable()
    state = AdamState()
    sents = train_tb.sentences
    n = len(sents)
    table = label_edge_table(sents, model.labels) if cfg.task == "label" else None
    if table is not None:
        for r, edges in zip(model.labels, table):
            if len(edges) == 0:
                log.warning("label %r has no training edges; excluded from the label loss", r)

    best_score, best_epoch, best_arrays = -1.0, 0, None
    history: list[dict] = []
    log_fh = open(log_path, "w", encoding="utf-8") if log_path else None
    try:
        for epoch in range(cfg.epochs):
            lr = learning_rate(cfg.lr, cfg.decay, epoch)
            order = sample_rng.permutation(n)
            total = 0.0
            steps = 0
            t0 = time.perf_counter()
            for lo in range(0, n, cfg.n_query):
                q_ids = order[lo: lo + cfg.n_query]
                queries = [sents[i] for i in q_ids]
                try:
                    with Tape() as tape:
                        if cfg.task == "edge":
                            _, s_ids = sample_edge_batch(n, cfg.n_query, cfg.n_support, sample_rng, q_ids,
                                                         cfg.full_support)
                            loss = head_loss(model, queries, [sents[i] for i in s_ids], True, drop_rng)
                        else:
                            _, sup = sample_label_batch(table, n, cfg.n_query, cfg.support_per_label,
                                                        sample_rng, q_ids)
                            src = sorted(set(sup[:, 0].tolist()))
                            where = {s: k for k, s in enumerate(src)}
                            rows = sup.copy()
                            rows[:, 0] = [where[s] for s in sup[:, 0]]
                            loss = label_loss(model, queries, [sents[i] for i in src], rows, True, drop_rng)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise FloatingPointError("loss is not finite")
                    grads = tape.gradient(loss, params)
                except FloatingPointError as exc:
                    raise TrainingError(f"non-finite values at epoch {epoch + 1}, step {steps + 1} "
                                        f"(lr={lr:g}): {exc}") from exc
                grads, gnorm = ad.clip_by_global_norm(grads, cfg.clip)
                if not math.isfinite(gnorm):
                    raise TrainingError(f"non-finite gradient norm at epoch {epoch + 1}, step {steps + 1}")
                ad.adam_update(params, grads, state, lr)
                model.touch()
                total += value
                steps += 1
            if cfg.task == "edge":
                score = dev_uas(model, train_tb, dev_tb, cfg.eval_batch)
            else:
                score = dev_label_accuracy(model, train_tb, dev_tb, cfg.eval_batch)
            rec = {"epoch": epoch + 1, "loss": total, "dev_score": score, "lr": lr,
                   "seconds": round(time.perf_counter() - t0, 3)}
            history.append(rec)
            if log_fh:
                log_fh.write(json.dumps(rec) + "\n")
                log_fh.flush()
            if on_epoch:
                on_epoch(rec)
            log.info("epoch %d loss %.4f dev %.2f lr %.6f", epoch + 1, total, score, lr)
            if score > best_score:
                best_score, best_epoch = score, epoch + 1
                best_arrays = {k: v.copy() for k, v in model.param_arrays().items()}
    finally:
        if log_fh:
            log_fh.close()
    if best_arrays is not None:
        model.load_arrays(best_arrays)
    return Checkpoint(model, cfg, best_score, best_epoch, history)
