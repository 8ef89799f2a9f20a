"""Miniature text, vision and audio transformer encoders.

All attention takes an explicit boolean mask ``[B, Lq, Lk]`` (True = may
attend). Vision frames and audio clips are encoded independently: the frame
/clip axis is folded into the batch axis before the transformer runs.
"""
from __future__ import annotations

import math

import torch
from torch import nn

from . import numeric as nm
from .config import EncoderConfig
from .errors import ConfigError, InputError

INIT_STD = 0.02


def linear(d_in: int, d_out: int, bias: bool = True, std: float = INIT_STD) -> nn.Linear:
    layer = nn.Linear(d_in, d_out, bias=bias, dtype=nm.DTYPE)
    nn.init.normal_(layer.weight, 0.0, std)
    if bias:
        nn.init.zeros_(layer.bias)
    return layer


def embedding_param(rows: int, dim: int) -> nn.Parameter:
    return nn.Parameter(torch.randn(rows, dim, dtype=nm.DTYPE) * INIT_STD)


class LayerNorm(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(dim, dtype=nm.DTYPE))
        self.bias = nn.Parameter(torch.zeros(dim, dtype=nm.DTYPE))

    def forward(self, x):
        return nm.layer_norm(x, self.weight, self.bias)


class MultiHeadAttention(nn.Module):
    def __init__(self, dim: int, heads: int, out_std: float = INIT_STD, kv_dim: int | None = None):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"hidden size {dim} not divisible by {heads} heads")
        kv_dim = kv_dim or dim
        self.heads = heads
        self.q = linear(dim, dim)
        self.k = linear(kv_dim, dim)
        self.v = linear(kv_dim, dim)
        self.o = linear(dim, dim, std=out_std)

    def forward(self, x, context=None, mask=None):
        context = x if context is None else context
        b, lq, d = x.shape
        lk = context.shape[1]
        h, dh = self.heads, d // self.heads
        q = self.q(x).view(b, lq, h, dh).transpose(1, 2)
        k = self.k(context).view(b, lk, h, dh).transpose(1, 2)
        v = self.v(context).view(b, lk, h, dh).transpose(1, 2)
        scores = nm.matmul(q, k.transpose(-1, -2)) / math.sqrt(dh)
        attn = nm.masked_softmax(scores, None if mask is None else mask[:, None], axis=-1)
        out = nm.matmul(attn, v).transpose(1, 2).reshape(b, lq, d)
        return self.o(out)


class FeedForward(nn.Module):
    def __init__(self, dim: int, mult: int, out_std: float = INIT_STD):
        super().__init__()
        self.fc1 = linear(dim, dim * mult)
        self.fc2 = linear(dim * mult, dim, std=out_std)

    def forward(self, x):
        return self.fc2(nm.gelu(self.fc1(x)))


class TransformerBlock(nn.Module):
    """Pre-norm block: self-attention then feed-forward, both residual."""

    def __init__(self, dim: int, heads: int, ff_mult: int, layers: int):
        super().__init__()
        # residual branches scaled down with depth
        out_std = INIT_STD / math.sqrt(2 * layers)
        self.ln_attn = LayerNorm(dim)
        self.attn = MultiHeadAttention(dim, heads, out_std)
        self.ln_ff = LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult, out_std)

    def self_attend(self, x, mask=None):
        return x + self.attn(self.ln_attn(x), mask=mask)

    def feed_forward(self, x):
        return x + self.ff(self.ln_ff(x))

    def forward(self, x, mask=None):
        return self.feed_forward(self.self_attend(x, mask))


def padding_mask(attention_mask):
    """[B, L] key-validity flags -> [B, L, L] attention mask."""
    m = torch.as_tensor(attention_mask, dtype=torch.bool)
    return m[:, None, :].expand(m.shape[0], m.shape[1], m.shape[1])


class TextEncoder(nn.Module):
    """Word + positional embeddings followed by bidirectional transformer blocks."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        self.cfg = cfg
        d = cfg.text_hidden
        self.token_emb = embedding_param(cfg.vocab_size, d)
        self.pos_emb = embedding_param(cfg.max_text_len, d)
        self.blocks = nn.ModuleList(
            TransformerBlock(d, cfg.heads, cfg.ff_mult, cfg.layers) for _ in range(cfg.layers)
        )
        self.ln_out = LayerNorm(d)

    def embed(self, token_ids):
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        if ids.shape[-1] > self.cfg.max_text_len:
            raise InputError(f"sequence length {ids.shape[-1]} exceeds max {self.cfg.max_text_len}")
        return nm.embedding_lookup(self.token_emb, ids) + self.pos_emb[: ids.shape[-1]]

    def forward(self, token_ids, attention_mask):
        ids = torch.as_tensor(token_ids, dtype=torch.long)
        squeeze = ids.dim() == 1
        if squeeze:
            ids = ids[None]
            attention_mask = torch.as_tensor(attention_mask, dtype=torch.bool)[None]
        x = self.embed(ids)
        mask = padding_mask(attention_mask)
        for block in self.blocks:
            x = block(x, mask)
        x = self.ln_out(x)
        return x[0] if squeeze else x


def patchify(images, patch_h: int, patch_w: int):
    """[..., H, W, C] -> [..., (H/ph)*(W/pw), ph*pw*C], patches in row-major order."""
    *lead, h, w, c = images.shape
    gh, gw = h // patch_h, w // patch_w
    x = images.reshape(*lead, gh, patch_h, gw, patch_w, c)
    nd = len(lead)
    perm = list(range(nd)) + [nd, nd + 2, nd + 1, nd + 3, nd + 4]
    return x.permute(*perm).reshape(*lead, gh * gw, patch_h * patch_w * c)


class _PatchEncoder(nn.Module):
    def __init__(self, patch_dim: int, seq_len: int, dim: int, cfg: EncoderConfig):
        super().__init__()
        self.patch_proj = linear(patch_dim, dim)
        self.pos_emb = embedding_param(seq_len, dim)
        self.blocks = nn.ModuleList(
            TransformerBlock(dim, cfg.heads, cfg.ff_mult, cfg.layers) for _ in range(cfg.layers)
        )
        self.ln_out = LayerNorm(dim)

    def run(self, patches):
        """patches [M, S, P] -> features [M, S, C]; each row of M independent."""
        x = self.patch_proj(patches) + self.pos_emb
        for block in self.blocks:
            x = block(x)
        return self.ln_out(x)


class VisionEncoder(_PatchEncoder):
    """Per-frame patch transformer: ``[B, N_v, H, W, ch] -> [B, N_v, S_v, C_v]``."""

    def __init__(self, cfg: EncoderConfig):
        p = cfg.vision_patch
        super().__init__(p * p * cfg.channels, cfg.vision_seq_len, cfg.vision_hidden, cfg)
        self.cfg = cfg

    def forward(self, frames):
        frames = torch.as_tensor(frames, dtype=nm.DTYPE)
        squeeze = frames.dim() == 4
        if squeeze:
            frames = frames[None]
        b, n, h, w, c = frames.shape
        p = self.cfg.vision_patch
        if h % p or w % p:
            raise ConfigError(f"frame {h}x{w} not divisible by patch size {p}")
        if (h, w, c) != (self.cfg.frame_size, self.cfg.frame_size, self.cfg.channels):
            raise InputError(f"frame geometry {(h, w, c)} does not match config")
        out = self.run(patchify(frames.reshape(b * n, h, w, c), p, p))
        out = out.reshape(b, n, out.shape[1], out.shape[2])
        return out[0] if squeeze else out


class AudioEncoder(_PatchEncoder):
    """Per-clip spectrogram patch transformer: ``[B, N_a, F, T] -> [B, N_a, S_a, C_a]``."""

    def __init__(self, cfg: EncoderConfig):
        super().__init__(cfg.audio_patch_bins * cfg.audio_patch_frames, cfg.audio_seq_len,
                         cfg.audio_hidden, cfg)
        self.cfg = cfg

    def forward(self, spectrograms):
        specs = torch.as_tensor(spectrograms, dtype=nm.DTYPE)
        squeeze = specs.dim() == 3
        if squeeze:
            specs = specs[None]
        if specs.dim() != 4 or specs.shape[2:] != (self.cfg.spec_bins, self.cfg.spec_frames):
            raise InputError(
                f"spectrogram geometry {tuple(specs.shape[-2:])} != "
                f"{(self.cfg.spec_bins, self.cfg.spec_frames)}"
            )
        b, n, fb, ft = specs.shape
        patches = patchify(specs.reshape(b * n, fb, ft, 1), self.cfg.audio_patch_bins,
                           self.cfg.audio_patch_frames)
        out = self.run(patches)
        out = out.reshape(b, n, out.shape[1], out.shape[2])
        return out[0] if squeeze else out
