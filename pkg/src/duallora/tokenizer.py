"""Whitespace + lowercase tokenizer with byte fallback.

Vocabulary layout: 0 pad, 1 eos, 2 bos, 3..258 raw bytes, then whole words
by descending corpus frequency (ties alphabetical) up to ``vocab_size``.
Words absent from the vocabulary encode as their UTF-8 byte tokens, so
every string round-trips.
"""

from __future__ import annotations

from collections import Counter

PAD_ID = 0
EOS_ID = 1
BOS_ID = 2
BYTE_BASE = 3
WORD_BASE = BYTE_BASE + 256


def normalize(text: str) -> str:
    """Lowercase and collapse internal whitespace."""
    return " ".join(text.lower().split())


class Tokenizer:
    def __init__(self, words: list[str], vocab_size: int):
        if WORD_BASE + len(words) > vocab_size:
            raise ValueError(
                f"word list of {len(words)} does not fit vocab_size {vocab_size}")
        self.vocab_size = vocab_size
        self.words = list(words)
        self._word_to_id = {w: WORD_BASE + i for i, w in enumerate(self.words)}

    @classmethod
    def build(cls, texts: list[str], vocab_size: int) -> "Tokenizer":
        counts: Counter[str] = Counter()
        for text in texts:
            counts.update(normalize(text).split())
        budget = vocab_size - WORD_BASE
        ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls([w for w, _ in ranked[:budget]], vocab_size)

    def encode(self, text: str) -> list[int]:
        ids: list[int] = []
        for word in normalize(text).split():
            wid = self._word_to_id.get(word)
            if wid is not None:
                ids.append(wid)
            else:
                ids.extend(BYTE_BASE + b for b in word.encode("utf-8"))
        return ids

    def decode(self, ids: list[int]) -> str:
        parts: list[str] = []
        pending: list[int] = []

        def flush():
            if pending:
                parts.append(bytes(pending).decode("utf-8", errors="replace"))
                pending.clear()

        for tid in ids:
            if tid in (PAD_ID, EOS_ID, BOS_ID):
                continue
            if BYTE_BASE <= tid < WORD_BASE:
                pending.append(tid - BYTE_BASE)
            elif WORD_BASE <= tid < WORD_BASE + len(self.words):
                flush()
                parts.append(self.words[tid - WORD_BASE])
        flush()
        return " ".join(parts)

    def to_dict(self) -> dict:
        return {"vocab_size": self.vocab_size, "words": self.words}

    @classmethod
    def from_dict(cls, d: dict) -> "Tokenizer":
        return cls(d["words"], d["vocab_size"])
