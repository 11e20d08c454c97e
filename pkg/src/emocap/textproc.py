"""Tokenization and vocabulary counting shared by the metrics and the embedder."""
from __future__ import annotations

import unicodedata
from collections.abc import Iterable, Sequence

TokenSequence = list[str]

# Han, kana, Hangul and CJK compatibility blocks.
_CJK_RANGES = (
    (0x2E80, 0x2FDF),
    (0x3040, 0x30FF),
    (0x3100, 0x312F),
    (0x3190, 0x31FF),
    (0x3400, 0x4DBF),
    (0x4E00, 0x9FFF),
    (0xAC00, 0xD7AF),
    (0xF900, 0xFAFF),
    (0xFF66, 0xFF9F),
    (0x20000, 0x2FA1F),
)


def is_cjk(ch: str) -> bool:
    cp = ord(ch)
    return any(lo <= cp <= hi for lo, hi in _CJK_RANGES)


def _is_punct(ch: str) -> bool:
    return unicodedata.category(ch).startswith("P")


def _strip_punct(chunk: str) -> str:
    start, end = 0, len(chunk)
    while start < end and _is_punct(chunk[start]):
        start += 1
    while end > start and _is_punct(chunk[end - 1]):
        end -= 1
    return chunk[start:end]


def tokenize(text: str) -> TokenSequence:
    """Lowercase, split on whitespace, strip edge punctuation.

    Chunks containing any CJK codepoint are split into single codepoints
    before stripping, so ``"声音，低沉"`` yields four tokens.

    >>> tokenize("The cat, sat.")
    ['the', 'cat', 'sat']
    """
    tokens: TokenSequence = []
    for chunk in text.lower().split():
        if any(is_cjk(ch) for ch in chunk):
            pieces: Iterable[str] = chunk
        else:
            pieces = (chunk,)
        for piece in pieces:
            piece = _strip_punct(piece)
            if piece:
                tokens.append(piece)
    return tokens


def detokenize(tokens: Sequence[str]) -> str:
    return " ".join(tokens)


def unique_vocab(captions: Iterable[Sequence[str]]) -> int:
    """Number of distinct token strings across all captions."""
    seen: set[str] = set()
    for caption in captions:
        seen.update(caption)
    return len(seen)
