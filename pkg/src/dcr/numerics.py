"""Dense float64 tensor primitives with reverse-mode gradients.

Everything here is a thin, validated layer over torch autograd: torch keeps the
tape, these functions fix the numerical conventions (max-subtracted softmax,
1e-12 log clamp, batch-mean losses) that the rest of the package relies on.
"""
from __future__ import annotations

from typing import Callable, Sequence

import torch
import torch.nn.functional as F

DTYPE = torch.float64
LOG_EPS = 1e-12


def tensor(values, requires_grad: bool = False) -> torch.Tensor:
    return torch.as_tensor(values, dtype=DTYPE).clone().requires_grad_(requires_grad)


def _check_axis(x: torch.Tensor, axis: int) -> int:
    if not -x.dim() <= axis < x.dim():
        raise ValueError(f"axis {axis} out of range for tensor of rank {x.dim()}")
    return axis % x.dim()


def softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=axis, keepdim=True)


def log_softmax(x: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(x, axis)
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=axis, keepdim=True).log()


def safe_log(p: torch.Tensor) -> torch.Tensor:
    return p.clamp_min(LOG_EPS).log()


def kl_divergence(p: torch.Tensor, q: torch.Tensor, axis: int = -1) -> torch.Tensor:
    """KL(p || q) along ``axis``; leading axes are kept.

    ``0 * log(0 / q)`` contributes 0. Both logs use the 1e-12 clamp, so
    KL(p || p) is exactly 0 even when p has sub-epsilon entries.
    Returns a 0-dim tensor for 1-D inputs.
    """
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: p {tuple(p.shape)} vs q {tuple(q.shape)}")
    axis = _check_axis(p, axis)
    return (p * (safe_log(p) - safe_log(q))).sum(dim=axis)


def entropy(p: torch.Tensor, axis: int = -1) -> torch.Tensor:
    axis = _check_axis(p, axis)
    return -(p * safe_log(p)).sum(dim=axis)


def cross_entropy(logits: torch.Tensor, labels) -> torch.Tensor:
    """Mean negative log-likelihood of ``labels`` under ``softmax(logits)``.

    ``logits`` is (batch, C) or (C,) with a scalar label.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    if logits.dim() == 1:
        logits, labels = logits.unsqueeze(0), labels.reshape(1)
    if labels.shape != logits.shape[:1]:
        raise ValueError(f"expected {logits.shape[0]} labels, got shape {tuple(labels.shape)}")
    c = logits.shape[-1]
    if labels.numel() and (int(labels.min()) < 0 or int(labels.max()) >= c):
        raise ValueError(f"labels must lie in [0, {c})")
    logp = log_softmax(logits, axis=-1)
    return -logp.gather(-1, labels.unsqueeze(-1)).squeeze(-1).mean()


def conv_output_length(length: int, k: int, stride: int, padding: int) -> int:
    return (length + 2 * padding - k) // stride + 1


def temporal_conv1d(
    x: torch.Tensor, kernel: torch.Tensor, stride: int = 1, padding: int = 0,
    bias: torch.Tensor | None = None,
) -> torch.Tensor:
    """Windowed contraction over time.

    x: (..., L_in, d_in); kernel: (k, d_in, d_out) -> (..., L_out, d_out) with
    ``L_out = floor((L_in + 2*padding - k) / stride) + 1``. Zero padding.
    """
    k, d_in, _ = kernel.shape
    if x.shape[-1] != d_in:
        raise ValueError(f"input has {x.shape[-1]} channels, kernel expects {d_in}")
    if stride < 1 or padding < 0:
        raise ValueError("stride must be >= 1 and padding >= 0")
    l_out = conv_output_length(x.shape[-2], k, stride, padding)
    if l_out < 1:
        raise ValueError(f"empty output: L_in={x.shape[-2]}, k={k}, padding={padding}")
    if padding:
        x = F.pad(x, (0, 0, padding, padding))
    windows = x.unfold(-2, k, stride)  # (..., L_out, d_in, k)
    out = torch.einsum("...lik,kio->...lo", windows, kernel)
    if bias is not None:
        out = out + bias
    return out


def scaled_dot_attention(
    q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False,
):
    """softmax(Q K^T / sqrt(d_k)) V over the last two axes (leading axes broadcast)."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    d_k = q.shape[-1]
    if d_k == 0:
        raise ValueError("d_k must be positive")
    scores = q @ k.transpose(-1, -2) / d_k**0.5
    weights = softmax(scores, axis=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


def layer_norm(x: torch.Tensor, weight: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5):
    mu = x.mean(dim=-1, keepdim=True)
    var = ((x - mu) ** 2).mean(dim=-1, keepdim=True)
    return (x - mu) / torch.sqrt(var + eps) * weight + bias


def gradient_check(
    f: Callable, x: torch.Tensor | Sequence[torch.Tensor], h: float = 1e-4,
) -> float:
    """Max elementwise relative error between autograd and central differences.

    ``f`` receives ``x`` exactly as passed (a tensor or a sequence of tensors) and
    must return a scalar tensor. Tensors are perturbed in place, so ``f`` may also
    close over them (e.g. module parameters). Error per entry is
    ``|g_ad - g_fd| / max(1, |g_ad|, |g_fd|)``.
    """
    xs = [x] if isinstance(x, torch.Tensor) else list(x)
    leaves = [t.detach().requires_grad_(True) if not t.requires_grad else t for t in xs]
    arg = leaves[0] if isinstance(x, torch.Tensor) else leaves
    out = f(arg)
    if out.numel() != 1:
        raise ValueError("f must return a scalar")
    if not torch.isfinite(out).all():
        raise FloatingPointError("f(x) is not finite")
    grads = torch.autograd.grad(out, leaves, allow_unused=True)

    worst = 0.0
    with torch.no_grad():
        for leaf, g in zip(leaves, grads):
            g = torch.zeros_like(leaf) if g is None else g
            flat = leaf.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                fp = f(arg).item()
                flat[i] = orig - h
                fm = f(arg).item()
                flat[i] = orig
                if not (torch.isfinite(torch.tensor(fp)) and torch.isfinite(torch.tensor(fm))):
                    raise FloatingPointError("f is not finite near x")
                fd = (fp - fm) / (2 * h)
                ad = gflat[i].item()
                err = abs(ad - fd) / max(1.0, abs(ad), abs(fd))
                worst = max(worst, err)
    return worst
