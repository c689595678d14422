"""Soft prompts derived from the noisy tokens, and their assembly with the env latent."""
from __future__ import annotations

import torch
import torch.nn as nn

from .layers import Attention, FeedForward


class PeriodicPrompt(nn.Module):
    """Keep the ``m_top`` strongest frequency bins per channel, invert, project."""

    def __init__(self, c0: int, L: int, m_top: int):
        super().__init__()
        n_bins = L // 2 + 1
        if not 1 <= m_top <= n_bins:
            raise ValueError(f"m_top must be in [1, {n_bins}] for L={L}, got {m_top}")
        self.m_top = m_top
        self.proj = nn.Linear(c0, c0)

    def filtered(self, xk: torch.Tensor) -> torch.Tensor:
        L = xk.shape[1]
        if L < 2:
            raise ValueError("periodic prompt needs L >= 2")
        spec = torch.fft.rfft(xk, dim=1)
        m = min(self.m_top, spec.shape[1])
        top = spec.abs().detach().topk(m, dim=1).indices
        keep = torch.zeros_like(spec.real).scatter_(1, top, 1.0)
        return torch.fft.irfft(spec * keep, n=L, dim=1)

    def forward(self, xk):
        return self.proj(self.filtered(xk))


class PromptBlock(nn.Module):
    """Single-layer pre-norm transformer block over axis 1 of B x N x D."""

    def __init__(self, dim: int, n_heads: int, ff_mult: int = 2):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, n_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.ff = FeedForward(dim, ff_mult * dim)

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.ff(self.norm2(x))


class TemporalPrompt(nn.Module):
    def __init__(self, c0: int, n_heads: int):
        super().__init__()
        self.block = PromptBlock(c0, n_heads)

    def forward(self, xk):
        return self.block(xk)


class FeaturePrompt(nn.Module):
    """Attention across the C0 latent features, independently at each time step.

    Each scalar feature becomes a ``dim``-wide token (value embedding plus a
    learned feature-identity embedding); the block output is projected back to
    a scalar per feature.
    """

    def __init__(self, c0: int, dim: int = 8):
        super().__init__()
        self.c0 = c0
        self.value_in = nn.Linear(1, dim)
        self.feature_emb = nn.Parameter(0.02 * torch.randn(c0, dim))
        self.block = PromptBlock(dim, 1)
        self.value_out = nn.Linear(dim, 1)

    def forward(self, xk):
        B, L, C = xk.shape
        if C != self.c0:
            raise ValueError(f"feature prompt expects {self.c0} channels, got {C}")
        tokens = self.value_in(xk.reshape(B * L, C, 1)) + self.feature_emb
        return self.value_out(self.block(tokens)).reshape(B, L, C)


class PromptNet(nn.Module):
    def __init__(self, config):
        super().__init__()
        c0 = config.c0
        self.periodic = PeriodicPrompt(c0, config.L, config.m_top)
        self.temporal = TemporalPrompt(c0, config.n_heads)
        self.feature = FeaturePrompt(c0, config.feature_dim)
        self.assemble = nn.Linear(4 * c0, config.c_cond)

    def forward(self, xk: torch.Tensor, e_env: torch.Tensor) -> torch.Tensor:
        return assemble_prompt(e_env, self.periodic(xk), self.temporal(xk), self.feature(xk), self.assemble)


def assemble_prompt(e_env, wp, wt, wf, projection: nn.Linear) -> torch.Tensor:
    """Concatenate [env latent, periodic, temporal, feature] on the last axis and project."""
    parts = (e_env, wp, wt, wf)
    B, L = e_env.shape[:2]
    for p in parts:
        if p.shape[:2] != (B, L):
            raise ValueError(f"prompt parts disagree on B x L: {[tuple(q.shape) for q in parts]}")
    return projection(torch.cat(parts, dim=-1))


def periodic_prompt(xk, params: PromptNet):
    return params.periodic(xk)


def temporal_prompt(xk, params: PromptNet):
    return params.temporal(xk)


def feature_prompt(xk, params: PromptNet):
    return params.feature(xk)
