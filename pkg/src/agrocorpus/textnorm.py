"""Shared text normalization and decimal rounding.

One tokenizer serves grounding checks, open-set F1, word frequencies, and
closed-answer normalization, so every consumer agrees on what a token is:
lowercase, ASCII punctuation mapped to spaces, whitespace-split.
"""

from __future__ import annotations

import string
from decimal import ROUND_HALF_UP, Decimal

_PUNCT_TO_SPACE = str.maketrans({c: " " for c in string.punctuation})


def tokens(text: str) -> list[str]:
    """Lowercase, strip punctuation, collapse whitespace, split."""
    return text.lower().translate(_PUNCT_TO_SPACE).split()


def normalize_closed(text: str) -> str | None:
    """Map a closed-set answer to "yes" or "no"; None if it is neither.

    Strict: the answer must normalize to exactly one token. "Yes." passes,
    "yes, it is" and "maybe" do not.
    """
    toks = tokens(text)
    if toks == ["yes"]:
        return "yes"
    if toks == ["no"]:
        return "no"
    return None


def round_half_away(value: float, ndigits: int) -> float:
    """Round with ties going away from zero, in decimal (not binary) terms."""
    quantum = Decimal(1).scaleb(-ndigits)
    return float(Decimal(str(value)).quantize(quantum, rounding=ROUND_HALF_UP))
