"""Word-level tokenizer over a small fixed vocabulary."""
from __future__ import annotations

import string
from pathlib import Path
from typing import Iterable, Sequence

PAD, CLS, SEP, MASK, UNK = "[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"
SPECIALS = (PAD, CLS, SEP, MASK, UNK)
PAD_ID, CLS_ID, SEP_ID, MASK_ID, UNK_ID = range(5)

_PUNCT_TABLE = str.maketrans("", "", string.punctuation)


def normalize(text: str) -> str:
    """Lowercase, drop ASCII punctuation, collapse whitespace."""
    return " ".join(text.lower().translate(_PUNCT_TABLE).split())


class Vocabulary:
    """Token <-> id mapping; ids 0..4 are always the five special tokens."""

    def __init__(self, words: Iterable[str] = ()):
        self.itos: list[str] = list(SPECIALS)
        self.stoi: dict[str, int] = {w: i for i, w in enumerate(self.itos)}
        for w in words:
            self.add(w)

    def add(self, word: str) -> int:
        if word not in self.stoi:
            self.stoi[word] = len(self.itos)
            self.itos.append(word)
        return self.stoi[word]

    def __len__(self) -> int:
        return len(self.itos)

    def __contains__(self, word: str) -> bool:
        return word in self.stoi

    def id(self, word: str) -> int:
        return self.stoi.get(word, UNK_ID)

    def token(self, idx: int) -> str:
        """Ids past the table (a model may have spare embedding rows) read as [UNK]."""
        idx = int(idx)
        if idx < 0:
            raise IndexError(f"negative token id {idx}")
        return self.itos[idx] if idx < len(self.itos) else UNK

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(w + "\n" for w in self.itos), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        lines = Path(path).read_text(encoding="utf-8").splitlines()
        if tuple(lines[:5]) != SPECIALS:
            raise ValueError(f"vocabulary file must start with {SPECIALS}")
        return cls(lines[5:])


def tokenize(text: str, vocab: Vocabulary, max_len: int) -> tuple[list[int], list[bool]]:
    """``[CLS] w1 .. wk [SEP] [PAD] ...`` truncated/padded to ``max_len``."""
    if max_len < 2:
        raise ValueError("max_len must leave room for [CLS] and [SEP]")
    words = normalize(text).split()[: max_len - 2]
    ids = [CLS_ID] + [vocab.id(w) for w in words] + [SEP_ID]
    mask = [True] * len(ids) + [False] * (max_len - len(ids))
    ids += [PAD_ID] * (max_len - len(ids))
    return ids, mask


def detokenize(ids: Sequence[int], vocab: Vocabulary) -> str:
    words = []
    for i in ids:
        i = int(i)
        if i == SEP_ID:
            break
        if i in (CLS_ID, PAD_ID):
            continue
        words.append(vocab.token(i))
    return " ".join(words)
