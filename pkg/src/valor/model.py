"""The full tri-modality model and the joint pretraining objective."""
from __future__ import annotations

from contextlib import contextmanager

import numpy as np
import torch
from torch import nn

from .alignment import AlignmentHead, CommonEmbeddings, ModalityGroup
from .captioning import ConditionBuilder, MaskedBatch, MultimodalDecoder, mask_tokens, mgc_loss, qa_mask
from .config import ModelConfig
from .encoders import AudioEncoder, TextEncoder, VisionEncoder
from .errors import ConfigError, ContractError, NumericError


class Valor(nn.Module):
    def __init__(self, cfg: ModelConfig, seed: int | None = None):
        super().__init__()
        if seed is not None:
            torch.manual_seed(seed)
        self.cfg = cfg
        enc = cfg.encoder
        self.text_encoder = TextEncoder(enc)
        self.vision_encoder = VisionEncoder(enc)
        self.audio_encoder = AudioEncoder(enc)
        self.align = AlignmentHead(cfg)
        self.conditions = ConditionBuilder(cfg)
        self.decoder = MultimodalDecoder(cfg, self.text_encoder)

    # -- encoders -----------------------------------------------------------

    def encode(self, batch, text: bool = True, vision: bool = True, audio: bool = True) -> dict:
        feats = {}
        if text:
            feats["T"] = self.text_encoder(batch.token_ids, batch.attention_mask)
        if vision and batch.frames is not None:
            feats["V"] = self.vision_encoder(batch.frames)
        if audio and batch.spectrograms is not None:
            feats["A"] = self.audio_encoder(batch.spectrograms)
        return feats

    def embed(self, batch, feats: dict | None = None, **which) -> CommonEmbeddings:
        feats = feats if feats is not None else self.encode(batch, **which)
        return self.align.embed(feats.get("T"), batch.attention_mask if "T" in feats else None,
                                feats.get("V"), feats.get("A"))

    # -- objectives ---------------------------------------------------------

    def mga_loss(self, batch, groups, feats: dict | None = None):
        groups = [ModalityGroup.parse(g) if isinstance(g, str) else g for g in groups]
        needed = set().union(*(g.modalities for g in groups)) if groups else set()
        if "A" in needed and batch.spectrograms is None:
            raise ConfigError("a requested alignment group needs audio, which the batch lacks")
        return self.align.mga_loss(self.embed(batch, feats), groups)

    def decode(self, input_ids, vision_feats, audio_feats, group: str, attention_mask=None,
               self_mask=None):
        cond = self.conditions(vision_feats, audio_feats, group)
        return self.decoder(input_ids, cond, attention_mask=attention_mask, self_mask=self_mask)

    def mgc_loss(self, batch, masked: MaskedBatch, groups, feats: dict | None = None):
        """Mean over groups of the masked-LM loss with that group's condition."""
        if not groups:
            raise ContractError("at least one captioning group required")
        feats = feats if feats is not None else self.encode(batch, text=False)
        self_mask = None
        if batch.question_lengths is not None:
            self_mask = qa_mask(batch.question_lengths, masked.attention_mask)
        parts = {}
        for g in groups:
            logits = self.decode(masked.input_ids, feats.get("V"), feats.get("A"), g,
                                 attention_mask=masked.attention_mask, self_mask=self_mask)
            parts[g] = mgc_loss(logits, masked)
        return sum(parts.values()) / len(parts), parts

    def joint_loss(self, batch, alpha: float, mga_groups, mgc_groups, masked: MaskedBatch | None):
        """``alpha * L_MGA + L_MGC`` over one batch; returns (loss, components)."""
        if alpha < 0:
            raise ConfigError("alpha must be >= 0")
        needed = set()
        for g in mga_groups:
            needed |= ModalityGroup.parse(g).modalities
        for g in mgc_groups or ():
            needed |= set(g[2:])
        feats = self.encode(batch, text="T" in needed, vision="V" in needed, audio="A" in needed)
        comps: dict[str, torch.Tensor] = {}
        total = None
        if mga_groups:
            with _named("mga"), torch.set_grad_enabled(alpha > 0 and torch.is_grad_enabled()):
                l_mga, parts = self.mga_loss(batch, mga_groups, feats)
            comps["mga"] = l_mga
            comps.update({f"mga/{k}": v for k, v in parts.items()})
            if alpha > 0:
                total = alpha * l_mga
        if mgc_groups:
            with _named("mgc"):
                l_mgc, parts = self.mgc_loss(batch, masked, mgc_groups, feats)
            comps["mgc"] = l_mgc
            comps.update({f"mgc/{k}": v for k, v in parts.items()})
            total = l_mgc if total is None else total + l_mgc
        if total is None:
            raise ContractError("joint loss with no active objective")
        return total, comps


@contextmanager
def _named(component: str):
    try:
        yield
    except NumericError as exc:
        raise NumericError(f"{component} loss: {exc}") from exc


def make_masked(batch, mask_prob: float, rng: np.random.Generator, qa_eligible=None) -> MaskedBatch:
    """Masking used for training: the closing [SEP] is a target too."""
    return mask_tokens(batch.token_ids.numpy(), mask_prob, rng, batch.attention_mask.numpy(),
                       maskable=qa_eligible, end_maskable=True)
