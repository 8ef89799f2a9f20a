"""Multimodal grouping captioning: masking, condition features, the
multimodal decoder with its five fusion-attention variants, and the causal
masked-LM loss.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from . import numeric as nm
from .config import MGC_GROUPS, ModelConfig
from .encoders import LayerNorm, MultiHeadAttention, TextEncoder, linear
from .errors import ConfigError, ContractError
from .text import CLS_ID, MASK_ID, PAD_ID, SEP_ID

NEVER_MASKED = (PAD_ID, CLS_ID, SEP_ID, MASK_ID)


@dataclass
class MaskedBatch:
    input_ids: torch.Tensor       # [B, L] with [MASK] substitutions
    target_ids: torch.Tensor      # [B, L], original id at masked positions, -1 elsewhere
    mask_positions: torch.Tensor  # [B, L] bool
    attention_mask: torch.Tensor  # [B, L] bool

    @property
    def num_masked(self) -> int:
        return int(self.mask_positions.sum())


def maskable_positions(token_ids, end_maskable: bool = False) -> np.ndarray:
    ids = np.asarray(token_ids)
    ok = ~np.isin(ids, NEVER_MASKED)
    if end_maskable:
        ok |= ids == SEP_ID
    return ok


def mask_tokens(token_ids, mask_prob: float, rng: np.random.Generator, attention_mask=None,
                maskable=None, end_maskable: bool = False) -> MaskedBatch:
    """Replace eligible tokens by [MASK] independently with ``mask_prob``.

    Rows where nothing was drawn get one uniformly chosen eligible position
    masked. ``maskable`` overrides eligibility (QA masks answer tokens only).
    ``end_maskable`` makes the closing [SEP] a prediction target so decoding
    can learn when to stop.
    """
    if not 0.0 < mask_prob < 1.0:
        raise ContractError(f"mask_prob must lie in (0, 1), got {mask_prob}")
    ids = np.atleast_2d(np.asarray(token_ids, dtype=np.int64))
    eligible = maskable_positions(ids, end_maskable) if maskable is None \
        else np.atleast_2d(np.asarray(maskable, dtype=bool))
    if not eligible.any(axis=1).all():
        raise ContractError("a sequence has no maskable tokens")
    chosen = (rng.random(ids.shape) < mask_prob) & eligible
    for r in np.flatnonzero(~chosen.any(axis=1)):
        cand = np.flatnonzero(eligible[r])
        chosen[r, cand[rng.integers(len(cand))]] = True
    if attention_mask is None:
        attention_mask = ids != PAD_ID
    masked_ids = np.where(chosen, MASK_ID, ids)
    targets = np.where(chosen, ids, -1)
    return MaskedBatch(
        torch.as_tensor(masked_ids),
        torch.as_tensor(targets),
        torch.as_tensor(chosen),
        torch.as_tensor(np.atleast_2d(np.asarray(attention_mask, dtype=bool))),
    )


# ---------------------------------------------------------------------------
# attention masks


def causal_mask(attention_mask) -> torch.Tensor:
    """[B, L] key validity -> [B, L, L] lower-triangular mask."""
    m = torch.as_tensor(attention_mask, dtype=torch.bool)
    if m.dim() == 1:
        m = m[None]
    length = m.shape[1]
    tri = torch.ones(length, length, dtype=torch.bool).tril()
    return tri[None] & m[:, None, :]


def qa_mask(question_lengths, attention_mask) -> torch.Tensor:
    """Bidirectional among question positions, causal over the answer.

    Per example the mask is the block matrix [[bi, 0], [full, causal]].
    """
    m = torch.as_tensor(attention_mask, dtype=torch.bool)
    if m.dim() == 1:
        m = m[None]
    length = m.shape[1]
    qlen = torch.as_tensor(question_lengths, dtype=torch.long).reshape(-1, 1, 1)
    i = torch.arange(length)[None, :, None]
    j = torch.arange(length)[None, None, :]
    q_key = j < qlen
    allowed = torch.where(i < qlen, q_key, q_key | (j <= i))
    return allowed & m[:, None, :]


def merge_mask(text_mask: torch.Tensor, n_cond: int) -> torch.Tensor:
    """Part-causal mask over ``[conditions ; text]``.

    Condition rows attend to all condition rows; text rows attend to every
    condition row plus whatever ``text_mask`` allows among text.
    """
    b, length, _ = text_mask.shape
    top = torch.cat([torch.ones(b, n_cond, n_cond, dtype=torch.bool),
                     torch.zeros(b, n_cond, length, dtype=torch.bool)], dim=2)
    bottom = torch.cat([torch.ones(b, length, n_cond, dtype=torch.bool), text_mask], dim=2)
    return torch.cat([top, bottom], dim=1)


# ---------------------------------------------------------------------------
# conditions


@dataclass
class ConditionalFeatures:
    vision: torch.Tensor | None = None   # F_v' [B, n_v, C']
    audio: torch.Tensor | None = None    # F_a' [B, n_a, C']

    @property
    def fused(self) -> torch.Tensor:
        """F_av: vision rows then audio rows along the sequence axis."""
        parts = [p for p in (self.vision, self.audio) if p is not None]
        if not parts:
            raise ConfigError("no condition features")
        return torch.cat(parts, dim=1)

    def select(self, group: str) -> "ConditionalFeatures":
        if group not in MGC_GROUPS:
            raise ConfigError(f"captioning group must be one of {MGC_GROUPS}, got {group!r}")
        need_v, need_a = "V" in group[2:], "A" in group[2:]
        if (need_v and self.vision is None) or (need_a and self.audio is None):
            raise ConfigError(f"group {group} needs a modality missing from the batch")
        return ConditionalFeatures(self.vision if need_v else None, self.audio if need_a else None)


class ConditionBuilder(nn.Module):
    """Flatten frames/clips along time and map to the decoder hidden size."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        enc = cfg.encoder
        self.vision = linear(enc.vision_hidden, enc.text_hidden)
        self.audio = linear(enc.audio_hidden, enc.text_hidden)

    def forward(self, vision_feats=None, audio_feats=None, group: str = "T-AV") -> ConditionalFeatures:
        cond = ConditionalFeatures()
        needs_v, needs_a = "V" in group[2:], "A" in group[2:]
        if needs_v and vision_feats is None or needs_a and audio_feats is None:
            raise ConfigError(f"group {group} needs a modality missing from the batch")
        if needs_v:
            b, n, s, c = vision_feats.shape
            cond.vision = self.vision(vision_feats.reshape(b, n * s, c))
        if needs_a:
            b, n, s, c = audio_feats.shape
            cond.audio = self.audio(audio_feats.reshape(b, n * s, c))
        return cond.select(group)


# ---------------------------------------------------------------------------
# decoder


class CrossAttention(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.ln = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads)

    def forward(self, x, context):
        return self.attn(self.ln(x), context=context)


CROSS_LAYERS = {
    "merge-attention": (),
    "concatenate-cross": ("joint",),
    "audio-visual-cross": ("audio", "vision"),
    "visual-audio-cross": ("vision", "audio"),
    "parallel-cross": ("vision", "audio"),
}


class MultimodalDecoder(nn.Module):
    """Text transformer with cross-attention inserted in every block.

    With ``share_weights`` the embeddings, self-attention, feed-forward and
    norms are the text encoder's own modules; cross-attention and the output
    head always belong to the decoder.
    """

    def __init__(self, cfg: ModelConfig, text_encoder: TextEncoder):
        super().__init__()
        enc = cfg.encoder
        self.variant = cfg.fusion_variant
        self.text = text_encoder if cfg.share_weights else TextEncoder(enc)
        d = enc.text_hidden
        self.cross = nn.ModuleList(
            nn.ModuleDict({name: CrossAttention(d, enc.heads) for name in CROSS_LAYERS[self.variant]})
            for _ in range(enc.layers)
        )
        self.head_fc = linear(d, d)
        self.head_ln = LayerNorm(d)
        self.head_out = linear(d, enc.vocab_size)

    def _cross(self, layer: nn.ModuleDict, x, cond: ConditionalFeatures):
        v = self.variant
        if v == "concatenate-cross":
            return x + layer["joint"](x, cond.fused)
        if v == "parallel-cross":
            out = x
            for name in ("vision", "audio"):
                ctx = getattr(cond, name)
                if ctx is not None:
                    out = out + layer[name](x, ctx)
            return out
        for name in CROSS_LAYERS[v]:
            ctx = getattr(cond, name)
            if ctx is not None:
                x = x + layer[name](x, ctx)
        return x

    def forward(self, input_ids, cond: ConditionalFeatures, attention_mask=None, self_mask=None):
        """Vocabulary logits ``[B, L, V]`` for every text position.

        ``self_mask`` ([B, L, L]) defaults to the causal mask built from
        ``attention_mask``.
        """
        ids = torch.as_tensor(input_ids, dtype=torch.long)
        if ids.dim() == 1:
            ids = ids[None]
        if self_mask is None:
            if attention_mask is None:
                attention_mask = ids != PAD_ID
            self_mask = causal_mask(attention_mask)
        if cond.vision is None and cond.audio is None:
            raise ConfigError(f"{self.variant} decoder needs at least one condition")
        x = self.text.embed(ids)
        length = x.shape[1]
        if self.variant == "merge-attention":
            ctx = cond.fused
            x = torch.cat([ctx, x], dim=1)
            self_mask = merge_mask(self_mask, ctx.shape[1])
        for block, cross in zip(self.text.blocks, self.cross):
            x = block.self_attend(x, self_mask)
            if self.variant != "merge-attention":
                x = self._cross(cross, x, cond)
            x = block.feed_forward(x)
        x = self.text.ln_out(x)[:, -length:]
        h = self.head_ln(nm.gelu(self.head_fc(x)))
        return self.head_out(h)


def mgc_loss(logits, masked: MaskedBatch):
    """Mean cross-entropy over masked positions only."""
    pos = masked.mask_positions
    if pos.shape != logits.shape[:2]:
        raise ContractError(f"logits {tuple(logits.shape)} not aligned with mask {tuple(pos.shape)}")
    if not bool(pos.any()):
        raise ContractError("no masked positions")
    return nm.cross_entropy(logits[pos], masked.target_ids[pos])
