"""Instance-based dependency parsing: edges are scored by similarity to training edges."""

from .conllu import Sentence, Token, Treebank, Vocabulary, build_vocab, parse_conllu, write_conllu
from .kernels import BACKEND as KERNEL_BACKEND

__version__ = "0.1.0"

__all__ = [
    "KERNEL_BACKEND",
    "Sentence",
    "Token",
    "Treebank",
    "Vocabulary",
    "build_vocab",
    "parse_conllu",
    "write_conllu",
]
