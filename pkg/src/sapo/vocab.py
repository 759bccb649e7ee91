"""Fixed token vocabulary for the synthetic tasks.

Digits are single tokens; a maximal run of digit tokens reads as one number.
"""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidTokenError

PAD, MASK, EOS = "<pad>", "<mask>", "<eos>"
DIGITS = tuple(str(d) for d in range(10))
OPS = ("+", "-", "*", "/")
DEFAULT_TOKENS = (
    DIGITS
    + OPS
    + ("(", ")", "=", ",", "?", "TGT", "STEP:", "ANS:", "|", ".")
    + (PAD, MASK, EOS)
)


@dataclass(frozen=True)
class Vocabulary:
    tokens: tuple = DEFAULT_TOKENS
    index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if len(set(self.tokens)) != len(self.tokens):
            raise ValueError("duplicate tokens in vocabulary")
        if len(self.tokens) > 64:
            raise ValueError("vocabulary larger than 64 tokens")
        for special in (PAD, MASK, EOS, "STEP:", "ANS:", "?"):
            if special not in self.tokens:
                raise ValueError(f"vocabulary is missing {special!r}")
        object.__setattr__(self, "index", {t: i for i, t in enumerate(self.tokens)})

    def __len__(self):
        return len(self.tokens)

    @property
    def mask_id(self) -> int:
        return self.index[MASK]

    @property
    def pad_id(self) -> int:
        return self.index[PAD]

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    @property
    def step_id(self) -> int:
        return self.index["STEP:"]

    @property
    def ans_id(self) -> int:
        return self.index["ANS:"]

    @property
    def question_id(self) -> int:
        return self.index["?"]

    @property
    def digit_ids(self) -> np.ndarray:
        return np.array([self.index[d] for d in DIGITS])

    def is_digit(self, tok_id: int) -> bool:
        return self.tokens[tok_id] in DIGITS

    def hash(self) -> str:
        return hashlib.sha256("\x1f".join(self.tokens).encode()).hexdigest()[:16]

    def encode(self, text: str) -> list[int]:
        """Whitespace-separated words; numeric words are split into digits."""
        ids = []
        for word in text.split():
            if word.isdigit():
                ids.extend(self.index[c] for c in word)
            elif word in self.index:
                ids.append(self.index[word])
            else:
                raise InvalidTokenError(f"unknown word {word!r}")
        return ids

    def decode(self, ids, skip_special=False) -> str:
        words: list[str] = []
        prev_digit = False
        for i in np.asarray(ids, dtype=np.int64).ravel():
            tok = self.tokens[int(i)]
            if skip_special and tok in (PAD, EOS):
                prev_digit = False
                continue
            if tok in DIGITS and prev_digit:
                words[-1] += tok
            else:
                words.append(tok)
            prev_digit = tok in DIGITS
        return " ".join(words)


VOCAB = Vocabulary()
