"""Per-modality encoders: trainable affective view and frozen general view."""
from __future__ import annotations

import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from .numerics import DTYPE, conv_output_length, scaled_dot_attention, temporal_conv1d

KERNEL = 3
PADDING = 1


def stride_for(raw_length: int, target_length: int) -> int:
    """Stride that maps ``raw_length`` to exactly ``target_length`` with k=3, p=1."""
    stride = max(raw_length // target_length, 1)
    if conv_output_length(raw_length, KERNEL, stride, PADDING) != target_length:
        raise ValueError(f"cannot align raw length {raw_length} to L={target_length} with a single strided conv")
    return stride


class TemporalConv(nn.Module):
    def __init__(self, d_in: int, d_out: int, stride: int = 1, k: int = KERNEL, padding: int = PADDING):
        super().__init__()
        bound = 1.0 / math.sqrt(k * d_in)
        self.kernel = nn.Parameter(torch.empty(k, d_in, d_out, dtype=DTYPE).uniform_(-bound, bound))
        self.bias = nn.Parameter(torch.empty(d_out, dtype=DTYPE).uniform_(-bound, bound))
        self.stride, self.padding = stride, padding

    def forward(self, x):
        return temporal_conv1d(x, self.kernel, self.stride, self.padding, self.bias)


class SelfAttention(nn.Module):
    """Single-head self-attention with output projection."""

    def __init__(self, d: int):
        super().__init__()
        self.q = nn.Linear(d, d, dtype=DTYPE)
        self.k = nn.Linear(d, d, dtype=DTYPE)
        self.v = nn.Linear(d, d, dtype=DTYPE)
        self.o = nn.Linear(d, d, dtype=DTYPE)

    def forward(self, x):
        return self.o(scaled_dot_attention(self.q(x), self.k(x), self.v(x)))


class AffectiveEncoder(nn.Module):
    """conv(stride) -> GELU -> conv -> GELU -> residual self-attention, plus a
    per-timestep classification head. Output features are (..., L, d)."""

    def __init__(self, raw_dim: int, raw_length: int, d: int, length: int, num_classes: int):
        super().__init__()
        self.raw_dim, self.raw_length, self.length = raw_dim, raw_length, length
        self.conv1 = TemporalConv(raw_dim, d, stride=stride_for(raw_length, length))
        self.conv2 = TemporalConv(d, d)
        self.attn = SelfAttention(d)
        self.head = nn.Linear(d, num_classes, dtype=DTYPE)

    def forward(self, x):
        if tuple(x.shape[-2:]) != (self.raw_length, self.raw_dim):
            raise ValueError(f"expected signal (..., {self.raw_length}, {self.raw_dim}), got {tuple(x.shape)}")
        h = F.gelu(self.conv1(x))
        h = F.gelu(self.conv2(h))
        return h + self.attn(h)


def encode_affective(signal: torch.Tensor, encoder: AffectiveEncoder) -> torch.Tensor:
    return encoder(signal)


def temporal_logits(features: torch.Tensor, head: nn.Module) -> tuple[torch.Tensor, torch.Tensor]:
    """Per-timestep logits (..., L, C) and their mean over time (..., C)."""
    per_step = head(features)
    return per_step, per_step.mean(dim=-2)


class GeneralEncoder(nn.Module):
    """Frozen projection stack with the same (L, d) output contract."""

    def __init__(self, raw_dim: int, raw_length: int, d: int, length: int, provenance: str = "random"):
        super().__init__()
        self.raw_dim, self.raw_length, self.length = raw_dim, raw_length, length
        self.stride = stride_for(raw_length, length)
        self.conv1 = TemporalConv(raw_dim, d, stride=self.stride)
        self.conv2 = TemporalConv(d, d)
        self.provenance = provenance

    def forward(self, x):
        if tuple(x.shape[-2:]) != (self.raw_length, self.raw_dim):
            raise ValueError(f"expected signal (..., {self.raw_length}, {self.raw_dim}), got {tuple(x.shape)}")
        return self.conv2(F.gelu(self.conv1(x)))

    def freeze(self) -> "GeneralEncoder":
        for p in self.parameters():
            p.requires_grad_(False)
        return self.eval()

    @property
    def frozen(self) -> bool:
        return not any(p.requires_grad for p in self.parameters())


def encode_general(signal: torch.Tensor, encoder: GeneralEncoder) -> torch.Tensor:
    if not encoder.frozen:
        raise ValueError("general encoder must be frozen before use")
    with torch.no_grad():
        return encoder(signal)


class _Decoder(nn.Module):
    def __init__(self, enc: GeneralEncoder, d: int):
        super().__init__()
        self.stride, self.raw_dim, self.raw_length = enc.stride, enc.raw_dim, enc.raw_length
        self.proj = nn.Linear(d, enc.stride * enc.raw_dim, dtype=DTYPE)

    def forward(self, h):
        out = self.proj(h)
        out = out.reshape(*h.shape[:-2], h.shape[-2] * self.stride, self.raw_dim)
        return out[..., : self.raw_length, :]


def reconstruction_error(encoder: GeneralEncoder, decoder: nn.Module, x: torch.Tensor) -> float:
    with torch.no_grad():
        return float(((decoder(encoder(x)) - x) ** 2).mean())


def build_general_encoder(
    x_train: torch.Tensor, d: int, length: int, mode: str = "pretrained",
    epochs: int = 30, lr: float = 1e-3, batch_size: int = 32, seed: int = 0,
) -> tuple[GeneralEncoder, nn.Module]:
    """Train a reconstruction autoencoder on ``x_train`` (N, L_raw, d_raw) and freeze it.

    ``mode="pretrained"`` trains encoder and decoder; ``mode="random"`` keeps the
    seeded encoder fixed and fits only the decoder, as an ablation control.
    Returns the frozen encoder and its decoder.
    """
    if mode not in ("pretrained", "random"):
        raise ValueError(f"unknown general encoder mode {mode!r}")
    raw_length, raw_dim = x_train.shape[-2:]
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = GeneralEncoder(raw_dim, raw_length, d, length, provenance=mode)
        dec = _Decoder(enc, d)
    params = list(dec.parameters()) + (list(enc.parameters()) if mode == "pretrained" else [])
    if mode == "random":
        enc.freeze()
    if epochs > 0 and len(x_train):
        opt = torch.optim.Adam(params, lr=lr)
        gen = torch.Generator().manual_seed(seed)
        for _ in range(epochs):
            perm = torch.randperm(len(x_train), generator=gen)
            for i in range(0, len(perm), batch_size):
                xb = x_train[perm[i:i + batch_size]]
                loss = ((dec(enc(xb)) - xb) ** 2).mean()
                opt.zero_grad()
                loss.backward()
                opt.step()
    enc.freeze()
    for p in dec.parameters():
        p.requires_grad_(False)
    return enc, dec
