"""Token encoder: word embedding + char-CNN -> 2-layer BiLSTM -> dep/head projections."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conllu import Sentence, Vocabulary


@dataclass
class EncoderConfig:
    word_dim: int = 100
    char_dim: int = 50
    char_filters: int = 30
    char_window: int = 3
    lstm_layers: int = 2
    lstm_hidden: int = 300
    edge_dim: int | None = None  # defaults to lstm_hidden
    dropout: float = 0.2

    @property
    def d(self) -> int:
        return self.edge_dim or self.lstm_hidden

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class Batch:
    """Padded encoder inputs for B sentences; position 0 of every row is ROOT."""

    word_ids: np.ndarray  # [B, L]
    char_ids: np.ndarray  # [B, L, C + window - 1]
    char_lens: np.ndarray  # [B, L]
    lengths: np.ndarray  # [B], T + 1 per sentence

    @property
    def size(self) -> int:
        return self.word_ids.shape[0]

    @property
    def max_len(self) -> int:
        return self.word_ids.shape[1]

    def token_mask(self) -> np.ndarray:
        return np.arange(self.max_len)[None, :] < self.lengths[:, None]


def make_batch(sentences: Sequence[Sentence], vocab: Vocabulary, window: int = 3) -> Batch:
    B = len(sentences)
    L = max(len(s) for s in sentences) + 1
    longest = max((len(t.form) for s in sentences for t in s.tokens), default=1)
    C = max(longest, 1)
    pad = window // 2
    word_ids = np.full((B, L), vocab.pad_id, dtype=np.int64)
    char_ids = np.zeros((B, L, C + window - 1), dtype=np.int64)
    char_lens = np.zeros((B, L), dtype=np.int64)
    lengths = np.zeros(B, dtype=np.int64)
    for b, s in enumerate(sentences):
        lengths[b] = len(s) + 1
        word_ids[b, 0] = vocab.root_id
        for t in s.tokens:
            word_ids[b, t.index] = vocab.word_id(t.form)
            cids = vocab.char_ids(t.form)
            char_ids[b, t.index, pad: pad + len(cids)] = cids
            char_lens[b, t.index] = len(cids)
    return Batch(word_ids, char_ids, char_lens, lengths)


def _uniform(rng, shape, scale, dtype):
    return rng.uniform(-scale, scale, size=shape).astype(dtype)


class Encoder:
    def __init__(self, vocab: Vocabulary, cfg: EncoderConfig, rng: np.random.Generator,
                 pretrained: np.ndarray | None = None, dtype=None):
        self.vocab = vocab
        self.cfg = cfg
        dtype = dtype or ad.default_dtype()
        self.dtype = dtype
        nw, nc = len(vocab.words), len(vocab.chars)
        p: dict[str, Tensor] = {}
        self.frozen: set[str] = set()
        if pretrained is not None:
            if pretrained.shape != (nw, cfg.word_dim):
                raise ValueError(f"pretrained table must be {(nw, cfg.word_dim)}, got {pretrained.shape}")
            p["word_emb"] = Tensor(pretrained.astype(dtype), requires_grad=False, name="word_emb")
            self.frozen.add("word_emb")
        else:
            p["word_emb"] = Tensor(_uniform(rng, (nw, cfg.word_dim), 0.1, dtype), True, "word_emb")
        p["root_emb"] = Tensor(_uniform(rng, (cfg.word_dim,), 0.1, dtype), True, "root_emb")
        p["char_emb"] = Tensor(_uniform(rng, (nc, cfg.char_dim), 0.1, dtype), True, "char_emb")
        fan = cfg.char_window * cfg.char_dim
        p["char_conv_w"] = Tensor(_uniform(rng, (fan, cfg.char_filters), np.sqrt(6.0 / (fan + cfg.char_filters)), dtype),
                                  True, "char_conv_w")
        p["char_conv_b"] = Tensor(np.zeros(cfg.char_filters, dtype=dtype), True, "char_conv_b")
        H = cfg.lstm_hidden
        in_dim = cfg.word_dim + cfg.char_filters
        scale = 1.0 / np.sqrt(H)
        for layer in range(cfg.lstm_layers):
            for direction in ("fw", "bw"):
                key = f"lstm{layer}_{direction}"
                p[f"{key}_wx"] = Tensor(_uniform(rng, (in_dim, 4 * H), scale, dtype), True)
                p[f"{key}_wh"] = Tensor(_uniform(rng, (H, 4 * H), scale, dtype), True)
                bias = np.zeros(4 * H, dtype=dtype)
                bias[H: 2 * H] = 1.0  # forget gate
                p[f"{key}_b"] = Tensor(bias, True)
            in_dim = 2 * H
        d = cfg.d
        glorot = np.sqrt(6.0 / (2 * H + d))
        p["proj_dep"] = Tensor(_uniform(rng, (2 * H, d), glorot, dtype), True, "proj_dep")
        p["proj_head"] = Tensor(_uniform(rng, (2 * H, d), glorot, dtype), True, "proj_head")
        for name, t in p.items():
            t.name = name
        self.params = p

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k not in self.frozen}

    def batch(self, sentences: Sequence[Sentence]) -> Batch:
        return make_batch(sentences, self.vocab, self.cfg.char_window)

    def embed_tokens(self, batch: Batch, train: bool = False, rng=None) -> Tensor:
        """h_token = [word embedding; char-CNN feature], shape [B, L, word_dim + char_filters]."""
        p = self.params
        cfg = self.cfg
        words = ad.take(p["word_emb"], batch.word_ids)
        is_root = np.zeros(batch.word_ids.shape + (1,), dtype=self.dtype)
        is_root[:, 0] = 1.0
        words = words * (1.0 - is_root) + p["root_emb"] * is_root

        chars = ad.take(p["char_emb"], batch.char_ids)  # [B, L, C+w-1, dc]
        n_pos = batch.char_ids.shape[2] - cfg.char_window + 1
        windows = ad.concat([chars[:, :, k: k + n_pos, :] for k in range(cfg.char_window)], axis=-1)
        conv = windows @ p["char_conv_w"] + p["char_conv_b"]  # [B, L, P, F]
        valid = np.arange(n_pos)[None, None, :] < np.maximum(batch.char_lens, 1)[:, :, None]
        conv = conv + np.where(valid, 0.0, -1e9)[..., None].astype(self.dtype)
        pooled = ad.tanh(ad.max(conv, axis=2))
        has_chars = (batch.char_lens > 0)[..., None].astype(self.dtype)
        pooled = pooled * has_chars

        h = ad.concat([words, pooled], axis=-1)
        return ad.dropout(h, cfg.dropout, rng, train)

    def _lstm(self, x: Tensor, key: str, reverse: bool, mask: np.ndarray | None) -> Tensor:
        p = self.params
        H = self.cfg.lstm_hidden
        B, L, _ = x.shape
        xproj = x @ p[f"{key}_wx"] + p[f"{key}_b"]
        wh = p[f"{key}_wh"]
        h = Tensor(np.zeros((B, H), dtype=self.dtype))
        c = Tensor(np.zeros((B, H), dtype=self.dtype))
        outs: list[Tensor] = [None] * L  # type: ignore[list-item]
        steps = range(L - 1, -1, -1) if reverse else range(L)
        for t in steps:
            gates = xproj[:, t, :] + h @ wh
            sig = ad.sigmoid(gates[:, : 3 * H])
            g = ad.tanh(gates[:, 3 * H:])
            i, f, o = sig[:, :H], sig[:, H: 2 * H], sig[:, 2 * H:]
            c_new = f * c + i * g
            h_new = o * ad.tanh(c_new)
            if mask is not None and not mask[:, t].all():
                m = mask[:, t, None].astype(self.dtype)
                c = c_new * m + c * (1.0 - m)
                h = h_new * m + h * (1.0 - m)
            else:
                c, h = c_new, h_new
            outs[t] = h
        return ad.stack(outs, axis=1)

    def bilstm(self, h_token: Tensor, batch: Batch, train: bool = False, rng=None) -> Tensor:
        mask = batch.token_mask()
        x = h_token
        for layer in range(self.cfg.lstm_layers):
            fw = self._lstm(x, f"lstm{layer}_fw", reverse=False, mask=None)
            bw = self._lstm(x, f"lstm{layer}_bw", reverse=True, mask=mask)
            x = ad.dropout(ad.concat([fw, bw], axis=-1), self.cfg.dropout, rng, train)
        return x

    def encode(self, batch: Batch, train: bool = False, rng=None) -> tuple[Tensor, Tensor]:
        """Return (h_dep, h_head), each [B, L, d]; row positions past a sentence's length are padding."""
        h_lstm = self.bilstm(self.embed_tokens(batch, train, rng), batch, train, rng)
        return h_lstm @ self.params["proj_dep"], h_lstm @ self.params["proj_head"]
