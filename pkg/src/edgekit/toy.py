"""A small synthetic treebank with deterministic head rules, for smoke tests and learnability checks.

Sentences follow ``NP V [NP]`` with ``NP = D A* N``. The verb attaches to ROOT,
the first noun is its ``nsubj``, the second its ``obj``; determiners and
adjectives attach to their noun as ``det`` and ``amod``.
"""

from __future__ import annotations

import numpy as np

from .conllu import Sentence, Token, Treebank

LABELS = ["root", "nsubj", "obj", "det", "amod"]

DETS = ["the", "a", "this", "that", "every"]
ADJS = ["big", "small", "red", "blue", "old", "new", "green", "quiet", "loud", "fast",
        "slow", "tall", "short", "warm", "cold"]
NOUNS = ["dog", "cat", "bird", "man", "woman", "car", "tree", "house", "river", "book",
         "child", "horse", "ship", "city", "song"]
VERBS = ["sees", "likes", "finds", "eats", "takes", "builds", "reads", "hears", "wants", "moves",
         "sleeps", "runs", "sings", "falls", "waits"]
INTRANSITIVE = set(VERBS[10:])


def _noun_phrase(rng: np.random.Generator, start: int, max_adjs: int) -> tuple[list[tuple[str, str]], int]:
    """Returns ([(form, label)], position of the noun). Heads are filled in by the caller."""
    words = [(DETS[rng.integers(len(DETS))], "det")]
    for _ in range(rng.integers(0, max_adjs + 1)):
        words.append((ADJS[rng.integers(len(ADJS))], "amod"))
    words.append((NOUNS[rng.integers(len(NOUNS))], "_noun"))
    return words, start + len(words) - 1


def toy_sentence(rng: np.random.Generator, max_adjs: int = 2, sent_id: str | None = None) -> Sentence:
    subj, subj_pos = _noun_phrase(rng, 1, max_adjs)
    verb = VERBS[rng.integers(len(VERBS))]
    verb_pos = subj_pos + 1
    items: list[tuple[str, int, str]] = []
    for form, lab in subj:
        items.append((form, verb_pos if lab == "_noun" else subj_pos, "nsubj" if lab == "_noun" else lab))
    items.append((verb, 0, "root"))
    if verb not in INTRANSITIVE:
        obj, obj_pos = _noun_phrase(rng, verb_pos + 1, max_adjs)
        for form, lab in obj:
            items.append((form, verb_pos if lab == "_noun" else obj_pos, "obj" if lab == "_noun" else lab))
    tokens = tuple(Token(i + 1, f, h, r) for i, (f, h, r) in enumerate(items))
    return Sentence(tokens, sent_id)


def toy_treebank(n: int, seed: int = 0, max_adjs: int = 2, prefix: str = "toy") -> Treebank:
    rng = np.random.default_rng(seed)
    return Treebank([toy_sentence(rng, max_adjs, f"{prefix}-{k}") for k in range(n)], list(LABELS))


def toy_split(n_train: int = 200, n_dev: int = 50, seed: int = 0) -> tuple[Treebank, Treebank]:
    return toy_treebank(n_train, seed, prefix="train"), toy_treebank(n_dev, seed + 1000, prefix="dev")


# Small model that fits the toy grammar quickly on one core. tau=8 and 5 support
# edges per label keep the instance label loss from saturating before labels
# separate (the summed score otherwise favours frequent labels).
TOY_PRESET = dict(word_dim=32, char_dim=16, char_filters=16, lstm_layers=2, lstm_hidden=48, dropout=0.2,
                  lr=0.005, tau=8.0, support_per_label=5, epochs=50)


def toy_config(**overrides):
    from .training import TrainConfig

    return TrainConfig(**{**TOY_PRESET, **overrides})
