"""Retrieval ranking, caption generation and generative QA on a trained model."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch

from . import numeric as nm
from .alignment import CommonEmbeddings, ModalityGroup
from .captioning import qa_mask
from .errors import ConfigError, ContractError
from .text import CLS_ID, MASK_ID, SEP_ID

DSL_TEMPERATURE = 100.0


# ---------------------------------------------------------------------------
# retrieval


@dataclass
class RetrievalIndex:
    ids: list
    embeddings: CommonEmbeddings

    def __post_init__(self):
        if len(set(self.ids)) != len(self.ids):
            raise ContractError("candidate identifiers must be unique")

    def __len__(self):
        return len(self.ids)


@torch.no_grad()
def build_index(model, batch, ids: Sequence | None = None) -> RetrievalIndex:
    ids = list(range(len(batch))) if ids is None else list(ids)
    return RetrievalIndex(ids, model.embed(batch))


@torch.no_grad()
def score_matrix(model, queries: CommonEmbeddings, index: RetrievalIndex, group: str) -> torch.Tensor:
    if len(index) == 0:
        raise ContractError("empty retrieval index")
    return model.align.similarity(queries, index.embeddings, ModalityGroup.parse(group))


def order_candidates(scores: np.ndarray, ids: Sequence) -> list[int]:
    """Positions sorted by descending score; ties broken by ascending id."""
    scores = np.asarray(scores, dtype=np.float64)
    keys = np.argsort(np.argsort(np.asarray(ids), kind="stable"), kind="stable")
    return list(np.lexsort((keys, -scores)))


def rank_candidates(model, query: CommonEmbeddings, index: RetrievalIndex, group: str) -> list[tuple]:
    """Candidates for a single query as ``(id, score)`` in rank order."""
    scores = score_matrix(model, query, index, group)
    if scores.shape[0] != 1:
        raise ContractError("rank_candidates expects exactly one query")
    s = scores[0].numpy()
    return [(index.ids[i], float(s[i])) for i in order_candidates(s, index.ids)]


def dual_softmax(sim, temperature: float = DSL_TEMPERATURE):
    """Row-softmax times column-softmax of ``temperature * sim``."""
    sim = torch.as_tensor(sim, dtype=nm.DTYPE)
    logits = sim * temperature
    return nm.softmax(logits, axis=1) * nm.softmax(logits, axis=0)


def rankings_from_scores(scores, ids: Sequence) -> list[list]:
    s = np.asarray(scores, dtype=np.float64)
    return [[ids[i] for i in order_candidates(row, ids)] for row in s]


def recall_at_k(rankings: Sequence[Sequence], ground_truth: Sequence, k: int) -> float:
    if not rankings:
        raise ContractError("no queries")
    n_cand = min(len(r) for r in rankings)
    if k > n_cand:
        raise ContractError(f"k={k} exceeds candidate count {n_cand}")
    hits = sum(gt in list(r[:k]) for r, gt in zip(rankings, ground_truth))
    return hits / len(rankings)


@torch.no_grad()
def evaluate_retrieval(model, batch, groups: Sequence[str], ks=(1, 5, 10), use_dsl: bool = False,
                       dsl_temperature: float = DSL_TEMPERATURE):
    """Query i's ground truth is candidate i. Returns (metrics, per-query records)."""
    emb = model.embed(batch)
    ids = list(range(len(batch)))
    index = RetrievalIndex(ids, emb)
    metrics, records = {}, {}
    for group in groups:
        scores = score_matrix(model, emb, index, group)
        if use_dsl:
            scores = dual_softmax(scores, dsl_temperature)
        s = scores.numpy()
        ranks = rankings_from_scores(s, ids)
        for k in ks:
            if k <= len(ids):
                metrics[f"{group}/R@{k}"] = recall_at_k(ranks, ids, k)
        records[group] = [
            {"query_id": q, "top10": [[c, float(s[q, c])] for c in ranks[q][:10]]} for q in ids
        ]
    return metrics, records


def write_report(path: str | Path, records: dict, summary: dict) -> None:
    """One JSON object per query record, then a summary record."""
    with open(path, "w", encoding="utf-8") as fh:
        for group in sorted(records):
            for rec in records[group]:
                fh.write(json.dumps({"group": group, "query_id": rec["query_id"], "top10": rec["top10"]}) + "\n")
        fh.write(json.dumps({"summary": {k: summary[k] for k in sorted(summary)}}) + "\n")


# ---------------------------------------------------------------------------
# generation


@dataclass
class GenerationConfig:
    strategy: str = "greedy"
    beam_size: int = 3
    max_length: int = 12
    end_token: int = SEP_ID

    def __post_init__(self):
        if self.strategy not in ("greedy", "beam"):
            raise ConfigError(f"unknown strategy {self.strategy!r}")
        if self.beam_size < 1 or self.max_length < 1:
            raise ConfigError("beam_size and max_length must be >= 1")


@dataclass
class Generated:
    tokens: list[int]        # generated ids, end token excluded
    log_prob: float          # total log-probability incl. the end token when emitted
    terminated: bool

    @property
    def length(self) -> int:
        return len(self.tokens) + int(self.terminated)

    @property
    def normalized_score(self) -> float:
        return self.log_prob / max(self.length, 1)


class _Stepper:
    """Next-token log-probabilities at the trailing [MASK] of ``prefix + [MASK]``."""

    def __init__(self, model, vision_feats, audio_feats, group, prefix: list[int], question_length=None):
        self.model = model
        self.cond = model.conditions(vision_feats, audio_feats, group)
        self.prefix = list(prefix)
        self.qlen = question_length
        self.limit = model.cfg.encoder.max_text_len

    def capacity(self) -> int:
        return self.limit - len(self.prefix) - 1

    @torch.no_grad()
    def __call__(self, generated: list[int]) -> torch.Tensor:
        ids = torch.as_tensor([self.prefix + generated + [MASK_ID]], dtype=torch.long)
        mask = torch.ones_like(ids, dtype=torch.bool)
        self_mask = None if self.qlen is None else qa_mask([self.qlen], mask)
        logits = self.model.decoder(ids, self.cond, attention_mask=mask, self_mask=self_mask)
        return nm.log_softmax(logits[0, -1], axis=-1)


def _greedy(step: _Stepper, cfg: GenerationConfig) -> Generated:
    tokens: list[int] = []
    score = torch.zeros((), dtype=nm.DTYPE)
    for _ in range(min(cfg.max_length, step.capacity())):
        total = score + step(tokens)
        tok = int(torch.argmax(total))
        score = total[tok]
        if tok == cfg.end_token:
            return Generated(tokens, float(score), True)
        tokens.append(tok)
    return Generated(tokens, float(score), False)


def _beam(step: _Stepper, cfg: GenerationConfig) -> Generated:
    k = cfg.beam_size
    live: list[tuple[list[int], torch.Tensor]] = [([], torch.zeros((), dtype=nm.DTYPE))]
    finished: list[Generated] = []
    for _ in range(min(cfg.max_length, step.capacity())):
        totals = torch.stack([score + step(tokens) for tokens, score in live])   # [live, V]
        flat = totals.reshape(-1)
        order = torch.argsort(flat, descending=True, stable=True)[: k]
        vocab = totals.shape[1]
        nxt = []
        for idx in order.tolist():
            h, tok = divmod(idx, vocab)
            tokens, total = live[h][0], flat[idx]
            if tok == cfg.end_token:
                finished.append(Generated(list(tokens), float(total), True))
            else:
                nxt.append((tokens + [tok], total))
        live = nxt
        if len(finished) >= k or not live:
            break
    pool = finished or [Generated(t, float(s), False) for t, s in live]
    best = pool[0]
    for cand in pool[1:]:
        if cand.normalized_score > best.normalized_score:
            best = cand
    return best


@torch.no_grad()
def _encode_one(encoder, x, rank: int):
    if x is None:
        return None
    x = torch.as_tensor(x, dtype=nm.DTYPE)
    return encoder(x.reshape(1, *x.shape[-rank:]))


def generate_caption(model, vision_feats, audio_feats, group: str = "T-AV",
                     cfg: GenerationConfig | None = None) -> Generated:
    """Autoregressive captioning from encoder features of one example.

    ``vision_feats`` ``[1, N_v, S_v, C_v]`` / ``audio_feats`` ``[1, N_a, S_a, C_a]``.
    """
    cfg = cfg or GenerationConfig()
    step = _Stepper(model, vision_feats, audio_feats, group, [CLS_ID])
    return _beam(step, cfg) if cfg.strategy == "beam" else _greedy(step, cfg)


def caption_example(model, frames, spectrograms, group: str = "T-AV",
                    cfg: GenerationConfig | None = None) -> Generated:
    v = _encode_one(model.vision_encoder, frames, 4)
    a = _encode_one(model.audio_encoder, spectrograms, 3)
    return generate_caption(model, v, a, group, cfg)


def answer_question(model, question_ids: Sequence[int], vision_feats, audio_feats, group: str = "T-AV",
                    cfg: GenerationConfig | None = None) -> Generated:
    """Generate an answer after ``[CLS] question [SEP]`` (question ids include both)."""
    q = [int(i) for i in question_ids]
    if len(q) < 3 or q[0] != CLS_ID or q[-1] != SEP_ID:
        raise ContractError("question must be [CLS] tokens.. [SEP] with at least one token")
    cfg = cfg or GenerationConfig(strategy="greedy")
    step = _Stepper(model, vision_feats, audio_feats, group, q, question_length=len(q))
    return _beam(step, cfg) if cfg.strategy == "beam" else _greedy(step, cfg)
