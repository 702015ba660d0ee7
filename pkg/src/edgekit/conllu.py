"""CoNLL-U reading/writing, vocabularies and word-vector loading.

Sentences keep only the columns the parser models (ID, FORM, HEAD, DEPREL).
Position 0 is an implicit ROOT sentinel; ``Sentence.tokens[0]`` is the first
real token (index 1).
"""

from __future__ import annotations

import hashlib
import json
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

ROOT_FORM = "<ROOT>"
UNK = "<UNK>"
PAD = "<PAD>"

# UD v2 punctuation relation; used only by the optional punctuation filter.
PUNCT_LABELS = frozenset({"punct"})


class ConlluError(ValueError):
    """Malformed CoNLL-U input. ``lineno`` is 1-based."""

    def __init__(self, lineno: int, message: str, path: str | None = None):
        where = f"{path}:{lineno}" if path else f"line {lineno}"
        super().__init__(f"{where}: {message}")
        self.lineno = lineno
        self.message = message
        self.path = path


@dataclass(frozen=True)
class Token:
    index: int
    form: str
    head: int
    deprel: str


@dataclass(frozen=True)
class Sentence:
    tokens: tuple[Token, ...]
    sent_id: str | None = None

    def __post_init__(self):
        n = len(self.tokens)
        for pos, tok in enumerate(self.tokens, start=1):
            if tok.index != pos:
                raise ValueError(f"token ids must be 1..{n} contiguous, got {tok.index} at position {pos}")
            if not 0 <= tok.head <= n:
                raise ValueError(f"head {tok.head} of token {pos} out of range 0..{n}")
            if tok.head == tok.index:
                raise ValueError(f"token {pos} is its own head")

    def __len__(self) -> int:
        return len(self.tokens)

    @property
    def forms(self) -> list[str]:
        return [t.form for t in self.tokens]

    @property
    def heads(self) -> list[int]:
        return [t.head for t in self.tokens]

    @property
    def deprels(self) -> list[str]:
        return [t.deprel for t in self.tokens]

    def form_at(self, position: int) -> str:
        """Surface form at ``position`` where 0 is ROOT."""
        return ROOT_FORM if position == 0 else self.tokens[position - 1].form

    def with_annotation(self, heads: Sequence[int], deprels: Sequence[str]) -> "Sentence":
        toks = tuple(Token(t.index, t.form, int(h), r) for t, h, r in zip(self.tokens, heads, deprels))
        return Sentence(toks, self.sent_id)


@dataclass
class Treebank:
    sentences: list[Sentence]
    labels: list[str] = field(default_factory=list)

    def __post_init__(self):
        if not self.labels:
            self.labels = collect_labels(self.sentences)

    def __len__(self) -> int:
        return len(self.sentences)

    def __iter__(self):
        return iter(self.sentences)

    def __getitem__(self, idx):
        return self.sentences[idx]

    def __eq__(self, other):
        if not isinstance(other, Treebank):
            return NotImplemented
        return self.sentences == other.sentences and self.labels == other.labels

    @property
    def n_tokens(self) -> int:
        return sum(len(s) for s in self.sentences)


def collect_labels(sentences: Iterable[Sentence]) -> list[str]:
    """Distinct relation labels in order of first occurrence."""
    seen: dict[str, None] = {}
    for s in sentences:
        for t in s.tokens:
            seen.setdefault(t.deprel, None)
    return list(seen)


def parse_conllu(text: str, require_annotation: bool = True) -> Treebank:
    """Parse CoNLL-U text. With ``require_annotation=False``, ``_`` in HEAD/DEPREL reads as 0/``_``."""
    sentences: list[Sentence] = []
    rows: list[tuple[int, Token]] = []
    sent_id = None

    def flush():
        nonlocal rows, sent_id
        if not rows:
            sent_id = None
            return
        n = len(rows)
        for pos, (lineno, tok) in enumerate(rows, start=1):
            if tok.index != pos:
                raise ConlluError(lineno, f"token id {tok.index} breaks 1..n numbering (expected {pos})")
            if tok.head > n:
                raise ConlluError(lineno, f"HEAD {tok.head} out of range 0..{n}")
            if tok.head == tok.index:
                raise ConlluError(lineno, f"token {tok.index} is its own head")
        sentences.append(Sentence(tuple(t for _, t in rows), sent_id))
        rows = []
        sent_id = None

    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            flush()
            continue
        if line.startswith("#"):
            if line.startswith("# sent_id") and "=" in line:
                sent_id = line.split("=", 1)[1].strip()
            continue
        cols = line.split("\t")
        if len(cols) != 10:
            raise ConlluError(lineno, f"expected 10 tab-separated columns, found {len(cols)}")
        tid = cols[0]
        if "-" in tid or "." in tid:
            # multiword-token ranges and empty nodes
            continue
        try:
            index = int(tid)
        except ValueError:
            raise ConlluError(lineno, f"non-integer ID {tid!r}") from None
        if not require_annotation and cols[6] == "_":
            cols[6] = "0"
        try:
            head = int(cols[6])
        except ValueError:
            raise ConlluError(lineno, f"non-integer HEAD {cols[6]!r}") from None
        if head < 0:
            raise ConlluError(lineno, f"HEAD {head} out of range")
        deprel = cols[7]
        if (not deprel or deprel == "_") and require_annotation:
            raise ConlluError(lineno, "missing DEPREL")
        rows.append((lineno, Token(index, cols[1], head, deprel)))
    flush()
    return Treebank(sentences)


def write_conllu(tb: Treebank) -> str:
    blocks = []
    for s in tb.sentences:
        lines = []
        if s.sent_id is not None:
            lines.append(f"# sent_id = {s.sent_id}")
        for t in s.tokens:
            lines.append(f"{t.index}\t{t.form}\t_\t_\t_\t_\t{t.head}\t{t.deprel}\t_\t_")
        blocks.append("\n".join(lines) + "\n")
    return "\n".join(blocks)


def read_treebank(path: str | Path, require_annotation: bool = True) -> Treebank:
    try:
        return parse_conllu(Path(path).read_text(encoding="utf-8"), require_annotation)
    except ConlluError as e:
        raise ConlluError(e.lineno, e.message, str(path)) from None


def write_treebank(tb: Treebank, path: str | Path) -> None:
    Path(path).write_text(write_conllu(tb), encoding="utf-8")


@dataclass
class Vocabulary:
    """Dense id maps. Word id 0 is PAD, 1 is UNK, 2 is ROOT; char id 0 is PAD, 1 is UNK."""

    words: dict[str, int]
    chars: dict[str, int]
    labels: dict[str, int]
    freqs: dict[str, int]
    lowercase: bool = False

    @property
    def pad_id(self) -> int:
        return self.words[PAD]

    @property
    def unk_id(self) -> int:
        return self.words[UNK]

    @property
    def root_id(self) -> int:
        return self.words[ROOT_FORM]

    @property
    def label_list(self) -> list[str]:
        return sorted(self.labels, key=self.labels.__getitem__)

    def word_id(self, form: str) -> int:
        key = form.lower() if self.lowercase else form
        wid = self.words.get(key)
        if wid is None:
            wid = self.words.get(form.lower(), self.unk_id)
        return wid

    def char_ids(self, form: str) -> list[int]:
        unk = self.chars[UNK]
        return [self.chars.get(c, unk) for c in form]

    def to_json(self) -> dict:
        return {
            "words": self.words,
            "chars": self.chars,
            "labels": self.labels,
            "freqs": self.freqs,
            "lowercase": self.lowercase,
        }

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(obj["words"], obj["chars"], obj["labels"], obj["freqs"], obj.get("lowercase", False))

    def digest(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True, ensure_ascii=False).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


def build_vocab(tb: Treebank, min_freq: int = 1, lowercase: bool = False,
                extra_words: Iterable[str] = ()) -> Vocabulary:
    """Ids follow first occurrence, so identical input gives identical ids.

    ``extra_words`` (e.g. the rows of a pretrained vector file) are appended
    after the treebank words regardless of frequency.
    """
    if min_freq < 1:
        raise ValueError("min_freq must be >= 1")
    if len(tb.sentences) == 0 or tb.n_tokens == 0:
        raise ValueError("cannot build a vocabulary from an empty treebank")
    freqs: Counter[str] = Counter()
    order: dict[str, None] = {}
    for s in tb.sentences:
        for t in s.tokens:
            key = t.form.lower() if lowercase else t.form
            freqs[key] += 1
            order.setdefault(key, None)

    words = {PAD: 0, UNK: 1, ROOT_FORM: 2}
    chars = {PAD: 0, UNK: 1}
    for w in order:
        if freqs[w] >= min_freq:
            words.setdefault(w, len(words))
    for w in extra_words:
        words.setdefault(w, len(words))
    for s in tb.sentences:
        for t in s.tokens:
            key = t.form.lower() if lowercase else t.form
            if freqs[key] >= min_freq:
                for c in t.form:
                    chars.setdefault(c, len(chars))
    labels = {r: i for i, r in enumerate(tb.labels)}
    return Vocabulary(words, chars, labels, dict(freqs), lowercase)


def load_word_vectors(path: str | Path) -> tuple[list[str], np.ndarray]:
    """Text-format vectors: one ``word v1 ... vd`` per line.

    A leading ``count dim`` header line (fastText .vec) is skipped.
    """
    words: list[str] = []
    rows: list[list[float]] = []
    dim = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.rstrip().split(" ")
            if lineno == 1 and len(parts) == 2 and all(p.isdigit() for p in parts):
                continue
            if len(parts) < 2:
                continue
            if dim is None:
                dim = len(parts) - 1
            elif len(parts) - 1 != dim:
                raise ValueError(f"{path}:{lineno}: expected {dim} values, found {len(parts) - 1}")
            words.append(parts[0])
            rows.append([float(x) for x in parts[1:]])
    if not rows:
        raise ValueError(f"{path}: no vectors found")
    return words, np.asarray(rows, dtype=np.float64)
