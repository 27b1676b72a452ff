"""Closed vocabulary for synthetic driving commands.

Token ids are line numbers in vocab.txt, which is checked in and never
regenerated. Everything the command templater can emit resolves to an id,
so commands serialize as uint8 id arrays (the vocabulary stays under 256).
"""

from __future__ import annotations

import importlib.resources


class VocabError(ValueError):
    pass


def _load_words() -> list:
    text = importlib.resources.files("worldground").joinpath("vocab.txt").read_text("utf-8")
    words = [w for w in text.splitlines() if w]
    if len(set(words)) != len(words):
        raise VocabError("vocab.txt contains duplicate entries")
    if len(words) > 255:
        raise VocabError("vocabulary must stay below 256 words for uint8 storage")
    return words

WORDS: list = _load_words()
WORD_TO_ID: dict = {w: i for i, w in enumerate(WORDS)}

PAD = WORD_TO_ID["[pad]"]
SEP = WORD_TO_ID["[sep]"]

MAX_TOKENS = 50


def encode(tokens) -> list:
    """Word sequence -> id list. Unknown words are an error, never skipped."""
    ids = []
    for t in tokens:
        if t not in WORD_TO_ID:
            raise VocabError(f"token {t!r} is not in the vocabulary")
        ids.append(WORD_TO_ID[t])
    return ids


def decode(ids) -> list:
    out = []
    for i in ids:
        i = int(i)
        if not 0 <= i < len(WORDS):
            raise VocabError(f"token id {i} out of range")
        out.append(WORDS[i])
    return out


def encode_text(text: str) -> list:
    return encode(text.lower().split())
