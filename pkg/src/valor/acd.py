"""Audio concept density of a caption corpus.

Captions are lowercased and stripped of ASCII punctuation. Each ontology
phrase is matched as a contiguous run of whole words; every occurrence counts,
and occurrences of different phrases may overlap. The density is the total
number of matches divided by the total word count.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ContractError
from .text import normalize


@dataclass(frozen=True)
class ConceptOntology:
    phrases: tuple[str, ...]

    def __post_init__(self):
        cleaned = tuple(normalize(p) for p in self.phrases)
        if not cleaned:
            raise ContractError("empty ontology")
        if any(not p for p in cleaned):
            raise ContractError("ontology phrases must be nonempty")
        if len(set(cleaned)) != len(cleaned):
            raise ContractError("ontology phrases must be unique")
        object.__setattr__(self, "phrases", cleaned)

    def __len__(self):
        return len(self.phrases)


def _as_ontology(ontology) -> ConceptOntology:
    return ontology if isinstance(ontology, ConceptOntology) else ConceptOntology(tuple(ontology))


def count_phrase(words: Sequence[str], phrase: Sequence[str]) -> int:
    n = len(phrase)
    return sum(1 for i in range(len(words) - n + 1) if list(words[i:i + n]) == list(phrase))


def concept_counts(caption: str, ontology) -> Counter:
    onto = _as_ontology(ontology)
    words = normalize(caption).split()
    counts = Counter()
    for p in onto.phrases:
        c = count_phrase(words, p.split())
        if c:
            counts[p] = c
    return counts


def acd(corpus: Iterable[str], ontology) -> float:
    """Detected concept occurrences over words, pooled across the corpus."""
    onto = _as_ontology(ontology)
    corpus = list(corpus)
    if not corpus:
        raise ContractError("empty corpus")
    n_ac = n_w = 0
    for caption in corpus:
        n_ac += sum(concept_counts(caption, onto).values())
        n_w += len(normalize(caption).split())
    if n_w == 0:
        raise ContractError("corpus has no words")
    return n_ac / n_w


@dataclass
class CorpusStats:
    num_captions: int
    average_length: float
    phrase_histogram: dict[str, int]


def corpus_stats(corpus: Iterable[str], ontology=None) -> CorpusStats:
    """Mean caption length in words; phrase counts over the ontology (or single words if none)."""
    corpus = list(corpus)
    if not corpus:
        raise ContractError("empty corpus")
    hist: Counter = Counter()
    total = 0
    for caption in corpus:
        words = normalize(caption).split()
        total += len(words)
        hist.update(concept_counts(caption, ontology) if ontology is not None else words)
    return CorpusStats(len(corpus), total / len(corpus), dict(sorted(hist.items())))


def read_lines(path: str | Path) -> list[str]:
    """UTF-8, one entry per line; blank lines are skipped."""
    text = Path(path).read_text(encoding="utf-8")
    return [line.strip() for line in text.splitlines() if line.strip()]


def load_ontology(path: str | Path) -> ConceptOntology:
    return ConceptOntology(tuple(read_lines(path)))


def load_corpus(path: str | Path) -> list[str]:
    return read_lines(path)
