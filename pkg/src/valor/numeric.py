"""Dense float64 tensor primitives with reverse-mode gradients.

Tensors are ``torch.Tensor`` objects in float64; autograd records the tape.
Every primitive here validates its contract and raises package errors so
callers get shape/index diagnostics instead of backend internals.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ContractError, DimensionError, NumericError

DTYPE = torch.float64
Tensor = torch.Tensor

LAYER_NORM_EPS = 1e-5
# exp(NEG_FILL - max) underflows to exactly 0.0 in float64, so masked entries
# carry no weight while gradients stay finite for fully-masked rows.
NEG_FILL = -1e30


def tensor(data, requires_grad: bool = False) -> Tensor:
    t = torch.as_tensor(np.asarray(data, dtype=np.float64), dtype=DTYPE).clone()
    t.requires_grad_(requires_grad)
    return t


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.dim() < 2 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(
            f"matmul: inner dimensions disagree for shapes {tuple(a.shape)} and {tuple(b.shape)}"
        )
    return a @ b


def _check_finite(x: Tensor, op: str) -> None:
    if not torch.isfinite(x).all():
        raise NumericError(f"{op}: non-finite input")


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] < 1:
        raise ContractError("softmax over an empty axis")
    _check_finite(x, "softmax")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def masked_softmax(x: Tensor, mask: Tensor | None, axis: int = -1) -> Tensor:
    """Softmax where ``mask == False`` entries receive exactly zero weight."""
    if mask is None:
        return softmax(x, axis)
    _check_finite(x, "masked_softmax")
    return softmax(x.masked_fill(~mask, NEG_FILL), axis)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    _check_finite(x, "log_softmax")
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=axis, keepdim=True).log()


def layer_norm(x: Tensor, weight: Tensor | None = None, bias: Tensor | None = None,
               eps: float = LAYER_NORM_EPS) -> Tensor:
    mean = x.mean(dim=-1, keepdim=True)
    centered = x - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if weight is not None:
        out = out * weight
    if bias is not None:
        out = out + bias
    return out


def gelu(x: Tensor) -> Tensor:
    return 0.5 * x * (1.0 + torch.erf(x / np.sqrt(2.0)))


def embedding_lookup(table: Tensor, ids: Tensor) -> Tensor:
    ids = torch.as_tensor(ids, dtype=torch.long)
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(
            f"token id out of range [0, {table.shape[0]}): min={int(ids.min())} max={int(ids.max())}"
        )
    return table[ids]


def cross_entropy(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean negative log-likelihood of ``targets`` under row-wise ``logits``."""
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() != 2 or targets.dim() != 1 or logits.shape[0] != targets.shape[0]:
        raise DimensionError(
            f"cross_entropy: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}"
        )
    if targets.numel() == 0:
        raise ContractError("cross_entropy over zero targets")
    vocab = logits.shape[1]
    if int(targets.min()) < 0 or int(targets.max()) >= vocab:
        raise IndexError(f"target id out of vocabulary range [0, {vocab})")
    logp = log_softmax(logits, axis=-1)
    return -logp.gather(1, targets[:, None]).mean()


def l2_normalize(x: Tensor, axis: int = -1, eps: float = 1e-12) -> Tensor:
    norm = torch.sqrt((x * x).sum(dim=axis, keepdim=True))
    return x / norm.clamp_min(eps)


def backward(loss: Tensor, retain_graph: bool = False) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ContractError("loss is not on the tape (no tracked inputs)")
    loss.reshape(()).backward(retain_graph=retain_graph)


# ---------------------------------------------------------------------------
# finite-difference oracle


def central_differences(fn: Callable[[], Tensor], params: Sequence[Tensor],
                        step: float = 1e-4) -> list[np.ndarray]:
    """Fourth-order central finite-difference gradient of scalar ``fn()``.

    Uses the stencil (-f(+2h) + 8 f(+h) - 8 f(-h) + f(-2h)) / 12h. Each
    element is perturbed in place under ``no_grad`` and restored exactly.
    """
    grads = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            g = np.zeros(flat.numel())
            for i in range(flat.numel()):
                orig = flat[i].item()
                vals = []
                for k in (2, 1, -1, -2):
                    flat[i] = orig + k * step
                    vals.append(float(fn()))
                flat[i] = orig
                g[i] = (-vals[0] + 8 * vals[1] - 8 * vals[2] + vals[3]) / (12.0 * step)
            grads.append(g.reshape(tuple(p.shape)))
    return grads


def analytic_grads(fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    backward(fn())
    out = []
    for p in params:
        g = p.grad
        out.append(np.zeros(tuple(p.shape)) if g is None else g.detach().numpy().copy())
        p.grad = None
    return out


def max_relative_error(analytic: Iterable[np.ndarray], numeric: Iterable[np.ndarray],
                       floor: float = 1e-6) -> float:
    """Elementwise |a - n| / max(|a|, |n|, floor), maximised over all entries."""
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = np.asarray(a, dtype=np.float64)
        n = np.asarray(n, dtype=np.float64)
        if a.size == 0:
            continue
        denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
        worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def gradient_check(fn: Callable[[], Tensor], params: Sequence[Tensor], step: float = 1e-4,
                   floor: float = 1e-6) -> float:
    return max_relative_error(analytic_grads(fn, params), central_differences(fn, params, step), floor)
