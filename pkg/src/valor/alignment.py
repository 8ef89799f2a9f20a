"""Multimodal grouping alignment: shared embedding space, token-level
weighted max-similarity, symmetric InfoNCE and the grouped loss.

Embedding sets are handled as ``Rows``: row vectors ``[B, N, C]`` plus the
weighting-map logits ``[B, N]`` and a validity mask ``[B, N]``. A modality
group pairs a single query modality with a target set whose rows are
concatenated in the fixed order text, vision, audio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from . import numeric as nm
from .config import ModelConfig
from .encoders import linear
from .errors import ConfigError, ContractError

MODALITY_ORDER = "TVA"


@dataclass
class Rows:
    emb: torch.Tensor      # [B, N, C], unit rows
    logits: torch.Tensor   # [B, N] weighting-map outputs
    mask: torch.Tensor     # [B, N] bool

    def __len__(self):
        return self.emb.shape[0]

    def select(self, idx) -> "Rows":
        return Rows(self.emb[idx], self.logits[idx], self.mask[idx])


def cat_rows(parts: list[Rows]) -> Rows:
    return Rows(
        torch.cat([p.emb for p in parts], dim=1),
        torch.cat([p.logits for p in parts], dim=1),
        torch.cat([p.mask for p in parts], dim=1),
    )


@dataclass
class CommonEmbeddings:
    """Per-modality rows in the shared space; ``None`` for absent modalities."""
    text: Rows | None = None
    vision: Rows | None = None
    audio: Rows | None = None
    # pooled (pre-projection) vectors, kept for coarse feature fusion
    pooled_vision: torch.Tensor | None = None
    pooled_audio: torch.Tensor | None = None

    def get(self, tag: str) -> Rows:
        rows = {"T": self.text, "V": self.vision, "A": self.audio}[tag]
        if rows is None:
            raise ConfigError(f"modality {tag} absent from the batch")
        return rows

    def rows(self, tags: str) -> Rows:
        tags = "".join(sorted(tags, key=MODALITY_ORDER.index))
        return cat_rows([self.get(t) for t in tags]) if len(tags) > 1 else self.get(tags)

    @property
    def e_av(self) -> torch.Tensor:
        return self.rows("VA").emb


@dataclass(frozen=True)
class ModalityGroup:
    query: str
    target: str

    @classmethod
    def parse(cls, name: str) -> "ModalityGroup":
        try:
            q, t = name.split("-")
        except ValueError:
            raise ConfigError(f"bad modality group {name!r}") from None
        if len(q) != 1 or not t or any(c not in MODALITY_ORDER for c in q + t) or q in t \
                or len(set(t)) != len(t):
            raise ConfigError(f"bad modality group {name!r}")
        return cls(q, "".join(sorted(t, key=MODALITY_ORDER.index)))

    @property
    def name(self) -> str:
        return f"{self.query}-{'AV' if self.target == 'VA' else self.target}"

    @property
    def modalities(self) -> set[str]:
        return set(self.query + self.target)


# ---------------------------------------------------------------------------
# similarity functions


def weights_from_logits(logits, mask, weighted: bool = True):
    if not weighted:
        logits = torch.zeros_like(logits)
    return nm.masked_softmax(logits, mask, axis=-1)


def fine_similarity_matrix(q: Rows, x: Rows, weighted: bool = True):
    """All-pairs token-level similarity ``[Bq, Bx]``.

    For query item a and target item b with row-similarity S = q_a x_b^T:
    s = 1/2 sum_i w_q[i] max_j S[i, j] + 1/2 sum_j w_x[j] max_i S[i, j],
    where masked rows are excluded from both the maxima and the weights.
    """
    if not bool(q.mask.any(dim=1).all()) or not bool(x.mask.any(dim=1).all()):
        raise ContractError("every item needs at least one unmasked row")
    sim = torch.einsum("aic,bjc->abij", q.emb, x.emb)
    q_valid = q.mask[:, None, :, None]
    x_valid = x.mask[None, :, None, :]
    row_max = sim.masked_fill(~x_valid, nm.NEG_FILL).amax(dim=3)   # [Bq, Bx, Nq]
    col_max = sim.masked_fill(~q_valid, nm.NEG_FILL).amax(dim=2)   # [Bq, Bx, Nx]
    w_q = weights_from_logits(q.logits, q.mask, weighted)
    w_x = weights_from_logits(x.logits, x.mask, weighted)
    # masked rows have zero weight; zero them in the maxima too so 0*NEG_FILL stays 0
    row_max = row_max.masked_fill(~q.mask[:, None, :], 0.0)
    col_max = col_max.masked_fill(~x.mask[None, :, :], 0.0)
    term_q = (row_max * w_q[:, None, :]).sum(dim=2)
    term_x = (col_max * w_x[None, :, :]).sum(dim=2)
    return 0.5 * term_q + 0.5 * term_x


def fine_similarity(e_t, e_x, t_logits=None, x_logits=None, t_mask=None, x_mask=None,
                    weighted: bool = True):
    """Scalar token-level similarity between one text and one target embedding set.

    ``e_t`` is ``[N_t, C]`` and ``e_x`` is ``[N_x, C]``, both row-normalised.
    Missing logits mean equal weights; missing masks mean all rows valid.
    """
    def rows(e, logits, mask):
        e = torch.as_tensor(e, dtype=nm.DTYPE)
        n = e.shape[0]
        logits = torch.zeros(n, dtype=nm.DTYPE) if logits is None else torch.as_tensor(logits, dtype=nm.DTYPE)
        mask = torch.ones(n, dtype=torch.bool) if mask is None else torch.as_tensor(mask, dtype=torch.bool)
        return Rows(e[None], logits[None], mask[None])

    if t_mask is not None and not bool(torch.as_tensor(t_mask).any()):
        raise ContractError("text has no unmasked positions")
    return fine_similarity_matrix(rows(e_t, t_logits, t_mask), rows(e_x, x_logits, x_mask), weighted)[0, 0]


def pooled(rows: Rows, cls: bool = False):
    """Mean over valid rows (or the first row) followed by L2 normalisation."""
    if cls:
        vec = rows.emb[:, 0]
    else:
        m = rows.mask.to(nm.DTYPE)[..., None]
        vec = (rows.emb * m).sum(dim=1) / m.sum(dim=1)
    return nm.l2_normalize(vec)


def coarse_similarity_matrix(q_vec, x_vec):
    """Dot products of pooled unit vectors ``[Bq, C] x [Bx, C] -> [Bq, Bx]``."""
    return nm.matmul(q_vec, x_vec.T)


def score_fusion(s_tv, s_ta):
    return 0.5 * (s_tv + s_ta)


def contrastive_loss(sim, tau):
    """Symmetric InfoNCE over a ``[B, B]`` similarity matrix with positives on the diagonal."""
    if sim.dim() != 2 or sim.shape[0] != sim.shape[1]:
        raise ContractError(f"similarity matrix must be square, got {tuple(sim.shape)}")
    if sim.shape[0] == 0:
        raise ContractError("empty batch")
    logits = sim / tau
    diag = torch.arange(sim.shape[0])
    row = nm.log_softmax(logits, axis=1)[diag, diag]
    col = nm.log_softmax(logits, axis=0)[diag, diag]
    return -0.5 * row.mean() - 0.5 * col.mean()


# ---------------------------------------------------------------------------
# parameters


class AlignmentHead(nn.Module):
    """Projections into the common space, weighting maps and temperature."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc = cfg.encoder
        c = cfg.common_dim
        self.cfg = cfg
        self.proj = nn.ModuleDict({
            "T": linear(enc.text_hidden, c),
            "V": linear(enc.vision_hidden, c),
            "A": linear(enc.audio_hidden, c),
        })
        self.weight_map = nn.ModuleDict({t: linear(c, 1, bias=False) for t in MODALITY_ORDER})
        # temperature = exp(log_tau) stays positive
        self.log_tau = nn.Parameter(torch.tensor(math.log(cfg.tau_init), dtype=nm.DTYPE))
        self.av_fusion = linear(enc.vision_hidden + enc.audio_hidden, c)

    @property
    def tau(self):
        return self.log_tau.exp()

    def _rows(self, tag, feats, mask):
        e = nm.l2_normalize(self.proj[tag](feats))
        return Rows(e, self.weight_map[tag](e)[..., 0], mask)

    def embed(self, text_feats=None, text_mask=None, vision_feats=None, audio_feats=None) -> CommonEmbeddings:
        """Pool frames/clips over their patch axis and project every modality.

        text_feats ``[B, N_t, C_t]``, vision ``[B, N_v, S_v, C_v]``, audio ``[B, N_a, S_a, C_a]``.
        """
        out = CommonEmbeddings()
        if text_feats is not None:
            mask = torch.as_tensor(text_mask, dtype=torch.bool)
            out.text = self._rows("T", text_feats, mask)
        if vision_feats is not None:
            pooled_v = vision_feats.mean(dim=2)
            out.pooled_vision = pooled_v
            out.vision = self._rows("V", pooled_v, torch.ones(pooled_v.shape[:2], dtype=torch.bool))
        if audio_feats is not None:
            pooled_a = audio_feats.mean(dim=2)
            out.pooled_audio = pooled_a
            out.audio = self._rows("A", pooled_a, torch.ones(pooled_a.shape[:2], dtype=torch.bool))
        return out

    def similarity(self, q_emb: CommonEmbeddings, x_emb: CommonEmbeddings, group: ModalityGroup,
                   granularity: str | None = None, av_fusion: str | None = None,
                   weighting: str | None = None):
        """``[Bq, Bx]`` similarity for ``group`` under the configured variant."""
        granularity = granularity or self.cfg.granularity
        av_fusion = av_fusion or self.cfg.av_fusion
        weighted = (weighting or self.cfg.weighting) == "weighted"
        q = q_emb.get(group.query)
        if len(group.target) > 1 and av_fusion == "score":
            parts = [self.similarity(q_emb, x_emb, ModalityGroup(group.query, t), granularity,
                                     "feature", "weighted" if weighted else "equal")
                     for t in group.target]
            return sum(parts) / len(parts)
        if granularity == "fine":
            return fine_similarity_matrix(q, x_emb.rows(group.target), weighted)
        # coarse: one global vector per item
        q_vec = pooled(q, cls=group.query == "T" and self.cfg.text_pool == "cls")
        if group.target == "VA":
            fused = torch.cat([x_emb.pooled_vision.mean(dim=1), x_emb.pooled_audio.mean(dim=1)], dim=-1)
            x_vec = nm.l2_normalize(self.av_fusion(fused))
        elif len(group.target) == 1:
            x_vec = pooled(x_emb.get(group.target),
                           cls=group.target == "T" and self.cfg.text_pool == "cls")
        else:
            raise ConfigError(f"coarse feature fusion is only defined for T-AV, not {group.name}")
        return coarse_similarity_matrix(q_vec, x_vec)

    def group_loss(self, emb: CommonEmbeddings, group: ModalityGroup):
        return contrastive_loss(self.similarity(emb, emb, group), self.tau)

    def mga_loss(self, emb: CommonEmbeddings, groups) -> tuple[torch.Tensor, dict]:
        """Mean of per-group contrastive losses, plus the per-group values."""
        groups = [g if isinstance(g, ModalityGroup) else ModalityGroup.parse(g) for g in groups]
        if not groups:
            raise ContractError("at least one modality group required")
        parts = {g.name: self.group_loss(emb, g) for g in groups}
        return sum(parts.values()) / len(parts), parts
