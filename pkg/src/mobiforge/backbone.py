"""Tokenizer, adaLN-conditioned transformer denoiser and its building blocks."""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict

import torch
import torch.nn as nn
import torch.nn.functional as F

from .layers import Attention, FeedForward
from .prompt import PromptNet


@dataclass
class ModelConfig:
    L: int = 64
    c0: int = 32
    n_blocks: int = 4
    n_heads: int = 4
    ff_mult: int = 4
    kernel_width: int = 3
    m_top: int = 4
    c_cond: int = 32
    feature_dim: int = 8
    vae_hidden: int = 64
    K: int = 50
    per_position_modulation: bool = True
    token_scale: float = 1.0
    null_skip: bool = True
    target: str = "v"

    def __post_init__(self):
        if self.target not in ("eps", "v"):
            raise ValueError(f"target must be 'eps' or 'v', got {self.target!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModulationSet:
    alpha1: torch.Tensor
    beta1: torch.Tensor
    gamma1: torch.Tensor
    alpha2: torch.Tensor
    beta2: torch.Tensor
    gamma2: torch.Tensor

    @classmethod
    def neutral(cls, like: torch.Tensor, gate: float = 1.0) -> "ModulationSet":
        ones = torch.ones(like.shape[0], 1, like.shape[-1], dtype=like.dtype)
        zeros = torch.zeros_like(ones)
        return cls(gate * ones, ones, zeros, gate * ones, ones, zeros)


class Modulator(nn.Module):
    """Scaling network: conditioning vector -> six C0-wide modulation tensors.

    The output layer starts at zero, so every gate is closed and the scales sit
    at their neutral value of 1.
    """

    def __init__(self, c_cond: int, c0: int):
        super().__init__()
        self.c0 = c0
        self.hidden = nn.Linear(c_cond, c_cond)
        self.out = nn.Linear(c_cond, 6 * c0)
        nn.init.zeros_(self.out.weight)
        nn.init.zeros_(self.out.bias)

    def forward(self, cond: torch.Tensor) -> ModulationSet:
        a1, b1, g1, a2, b2, g2 = self.out(F.silu(self.hidden(cond))).chunk(6, dim=-1)
        return ModulationSet(a1, 1.0 + b1, g1, a2, 1.0 + b2, g2)


class AdaLNBlock(nn.Module):
    def __init__(self, c0: int, n_heads: int, ff_mult: int, c_cond: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(c0, elementwise_affine=False)
        self.norm2 = nn.LayerNorm(c0, elementwise_affine=False)
        self.attn = Attention(c0, n_heads)
        self.ff = FeedForward(c0, ff_mult * c0)
        self.modulation = Modulator(c_cond, c0)


def block_forward(x: torch.Tensor, mods: ModulationSet, block: AdaLNBlock, index: int = 0) -> torch.Tensor:
    """x' = x + a1 * A(b1 * LN(x) + g1);  x'' = x' + a2 * M(b2 * LN(x') + g2)."""
    x = x + mods.alpha1 * block.attn(mods.beta1 * block.norm1(x) + mods.gamma1)
    x = x + mods.alpha2 * block.ff(mods.beta2 * block.norm2(x) + mods.gamma2)
    if not torch.isfinite(x).all():
        raise FloatingPointError(f"non-finite activations after block {index}")
    return x


def sinusoidal(positions: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = positions.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class Tokenizer(nn.Module):
    """Same-padded temporal convolution B x L x 1 -> B x L x C0.

    The kernel is stored as a direction ``v`` and used at a fixed Frobenius
    norm ``scale * sqrt(C0)``, which keeps token scale from drifting towards
    zero under the joint denoising objective.  The bias starts at the value
    that maps a constant series at ``center`` to zero tokens.
    """

    def __init__(self, c0: int, width: int = 3, scale: float = 1.0, center: float = 0.5):
        super().__init__()
        if width % 2 == 0:
            raise ValueError("kernel width must be odd for same padding")
        self.width = width
        self.v = nn.Parameter(torch.randn(c0, 1, width))
        self.register_buffer("norm", torch.tensor(scale * math.sqrt(c0)), persistent=False)
        with torch.no_grad():
            bias = -center * self.kernel.sum(dim=(1, 2))
        self.bias = nn.Parameter(bias)

    @property
    def kernel(self) -> torch.Tensor:
        return self.v * (self.norm.to(self.v.dtype) / self.v.norm())

    def forward(self, series: torch.Tensor) -> torch.Tensor:
        if series.ndim != 3 or series.shape[-1] != 1:
            raise ValueError(f"tokenize expects B x L x 1, got {tuple(series.shape)}")
        out = F.conv1d(series.transpose(1, 2), self.kernel, self.bias, padding=self.width // 2)
        return out.transpose(1, 2)


class MobiDenoiser(nn.Module):
    """Noise predictor eps_theta plus tokenizer, detokenizer and prompt network."""

    def __init__(self, config: ModelConfig):
        super().__init__()
        self.config = config
        c0 = config.c0
        self.tokenizer = Tokenizer(c0, config.kernel_width, config.token_scale)
        # zero start keeps the detokenizer inside the span of clean tokens, so
        # residual noise orthogonal to that span does not reach the output
        self.detokenizer = nn.Linear(c0, 1)
        nn.init.zeros_(self.detokenizer.weight)
        nn.init.zeros_(self.detokenizer.bias)
        self.register_buffer("pos_table", sinusoidal(torch.arange(config.L), c0).float(), persistent=False)
        self.step_mlp = nn.Sequential(nn.Linear(c0, c0), nn.SiLU(), nn.Linear(c0, c0))
        self.prompt = PromptNet(config)
        self.blocks = nn.ModuleList(
            AdaLNBlock(c0, config.n_heads, config.ff_mult, config.c_cond) for _ in range(config.n_blocks))
        self.head = nn.Linear(c0, c0)

    def tokenize(self, series: torch.Tensor) -> torch.Tensor:
        return self.tokenizer(series)

    def detokenize(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.detokenizer(tokens)

    def step_embedding(self, k, B: int, dtype) -> torch.Tensor:
        ks = torch.as_tensor(k, dtype=torch.long).reshape(-1)
        if ks.numel() == 1:
            ks = ks.expand(B)
        return self.step_mlp(sinusoidal(ks, self.config.c0).to(dtype))

    def embed_inputs(self, xk_mixed: torch.Tensor, k, step: torch.Tensor | None = None) -> torch.Tensor:
        """Add the position table and the diffusion-step embedding."""
        B, L, _ = xk_mixed.shape
        if step is None:
            step = self.step_embedding(k, B, xk_mixed.dtype)
        return xk_mixed + self.pos_table[:L].to(xk_mixed.dtype) + step[:, None]

    def modulations(self, prompt: torch.Tensor) -> list[ModulationSet]:
        cond = prompt if self.config.per_position_modulation else prompt.mean(dim=1, keepdim=True)
        return [blk.modulation(cond) for blk in self.blocks]

    def run_blocks(self, h: torch.Tensor, prompt: torch.Tensor) -> torch.Tensor:
        for i, (blk, mods) in enumerate(zip(self.blocks, self.modulations(prompt))):
            h = block_forward(h, mods, blk, i)
        return h

    def predict_noise(self, xk_mixed: torch.Tensor, k, prompt: torch.Tensor) -> torch.Tensor:
        if k is not None:
            ks = torch.as_tensor(k)
            if ks.numel() and (int(ks.min()) < 0 or int(ks.max()) >= self.config.K):
                raise IndexError(f"diffusion step {k} outside [0, {self.config.K})")
        if prompt.shape[:2] != xk_mixed.shape[:2]:
            raise ValueError(f"prompt {tuple(prompt.shape)} does not match tokens {tuple(xk_mixed.shape)}")
        return self.head(self.run_blocks(self.embed_inputs(xk_mixed, k), prompt))

    def token_basis(self) -> torch.Tensor:
        """Orthonormal C0 x (width + 1) basis of the span holding every clean token."""
        taps = self.tokenizer.kernel[:, 0, :]
        q, _ = torch.linalg.qr(torch.cat([taps, self.tokenizer.bias[:, None]], dim=1))
        return q

    def attention_modules(self) -> list[Attention]:
        return [m for m in self.modules() if isinstance(m, Attention)]


def tokenize(series: torch.Tensor, model: MobiDenoiser) -> torch.Tensor:
    return model.tokenize(series)


def detokenize(tokens: torch.Tensor, model: MobiDenoiser) -> torch.Tensor:
    return model.detokenize(tokens)


def predict_noise(xk_mixed: torch.Tensor, k, prompt: torch.Tensor, model: MobiDenoiser) -> torch.Tensor:
    return model.predict_noise(xk_mixed, k, prompt)


def skip_noise(xk_mixed: torch.Tensor, raw: torch.Tensor, alpha_bar_k: torch.Tensor,
               basis: torch.Tensor) -> torch.Tensor:
    """Combine the analytic noise off the clean-token span with the network's on it.

    Clean tokens lie in span(basis), so the component of x_k orthogonal to it
    is exactly sqrt(1 - abar_k) times the noise.  ``alpha_bar_k`` broadcasts
    against B x L x C0.
    """
    def on_span(t):
        return (t @ basis) @ basis.T

    return (xk_mixed - on_span(xk_mixed)) / torch.sqrt(1.0 - alpha_bar_k) + on_span(raw)


def build_model(config: ModelConfig, seed: int = 0) -> MobiDenoiser:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return MobiDenoiser(config)
