"""Finite-difference check of the training-loss gradients on a tiny model.

Analytic gradients come from autograd at the working precision.  The
reference is a central difference evaluated on a float64 copy, so that the
difference quotient itself is not the limiting error.  Each parameter tensor
is one group; its check covers a sample of coordinates plus a few random
directions.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass

import numpy as np
import torch

from .backbone import ModelConfig
from .datagen import DataKind, generate_corpus
from .training import Bundle, build_bundle, draw_training_noise, make_batch, training_loss
from .vae import vae_loss

TINY_CONFIG = ModelConfig(L=16, c0=8, n_blocks=1, n_heads=2, ff_mult=4, m_top=4, c_cond=8, feature_dim=4,
                          vae_hidden=16, K=50)


@dataclass
class GroupResult:
    name: str
    numel: int
    rel_error: float
    analytic_norm: float


@dataclass
class Probe:
    """Fixed data and noise for every kind so the loss is a pure function of the weights."""

    batches: dict
    noise: dict


def make_probe(config: ModelConfig, B: int = 2, seed: int = 0) -> Probe:
    samples = generate_corpus(seed, B, config.L)
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    batches, noise = {}, {}
    for kind in DataKind:
        batch = make_batch([s for s in samples if s.kind == kind], dtype=torch.float64)
        masks, k, eps, _ = draw_training_noise(batch, config.c0, config.K, (0.25, 0.25, 0.25, 0.25), rng, gen)
        # at least one predicted position per row keeps the masked loss defined
        masks[:, -1] = 1.0
        batches[kind] = batch
        noise[kind] = (masks, k, eps, torch.randn(B, config.c0, generator=gen, dtype=torch.float64))
    return Probe(batches, noise)


def full_loss(bundle: Bundle, probe: Probe, dtype, include_vae_loss: bool = False) -> torch.Tensor:
    """Training loss summed over the three kinds (plus the VAE objectives, optionally)."""
    total = torch.zeros((), dtype=dtype)
    for kind, batch in probe.batches.items():
        masks, k, eps, vae_eps = probe.noise[kind]
        b = make_batch_like(batch, dtype)
        loss, _, _ = training_loss(bundle, b, masks.to(dtype), k, eps.to(dtype))
        total = total + loss
        if include_vae_loss:
            env = b.env if b.env.ndim == 2 else b.env[:, 0]
            total = total + vae_loss(env, bundle.vaes[kind.name], vae_eps.to(dtype))
    return total


def make_batch_like(batch, dtype):
    return type(batch)(batch.kind, batch.values.to(dtype), batch.env.to(dtype), batch.sample_ids)


def randomize(bundle: Bundle, seed: int = 0, scale: float = 0.3) -> None:
    """Perturb every weight so no group sits at a degenerate (zero) initialization."""
    gen = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for p in _params(bundle).values():
            p.add_(scale * torch.randn(p.shape, generator=gen, dtype=p.dtype))


def _params(bundle: Bundle) -> dict[str, torch.nn.Parameter]:
    out = {f"model.{n}": p for n, p in bundle.model.named_parameters()}
    out.update({f"vae.{n}": p for n, p in bundle.vaes.named_parameters()})
    return out


def _rel(a: np.ndarray, n: np.ndarray, floor: float) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(n)
    if denom < floor:
        return 0.0
    return float(np.linalg.norm(a - n) / denom)


def check_gradients(config: ModelConfig = TINY_CONFIG, dtype=torch.float32, seed: int = 0, coords: int = 6,
                    directions: int = 2, h: float = 1e-6, floor: float = 1e-9,
                    include_vae_loss: bool = True) -> list[GroupResult]:
    """Per-group relative error between analytic and central-difference gradients."""
    reference = build_bundle(config, seed=seed)
    randomize(reference, seed)
    probe = make_probe(config, seed=seed)

    working = copy.deepcopy(reference)
    working.model.to(dtype)
    working.vaes.to(dtype)
    params = _params(working)
    for p in params.values():
        p.requires_grad_(True)
        p.grad = None
    full_loss(working, probe, dtype, include_vae_loss).backward()

    oracle = copy.deepcopy(reference)
    oracle.model.double()
    oracle.vaes.double()
    oracle_params = _params(oracle)

    def f() -> float:
        with torch.no_grad():
            return float(full_loss(oracle, probe, torch.float64, include_vae_loss))

    rng = np.random.default_rng(seed)
    results = []
    for name, p in params.items():
        q = oracle_params[name]
        grad = (p.grad if p.grad is not None else torch.zeros_like(p)).detach().double().reshape(-1)
        flat = q.data.view(-1)
        idx = rng.choice(flat.numel(), size=min(coords, flat.numel()), replace=False)
        analytic, numeric = [], []
        for i in idx:
            orig = flat[i].item()
            flat[i] = orig + h
            up = f()
            flat[i] = orig - h
            down = f()
            flat[i] = orig
            analytic.append(grad[i].item())
            numeric.append((up - down) / (2 * h))
        for _ in range(directions):
            d = torch.as_tensor(rng.standard_normal(flat.numel()), dtype=torch.float64)
            d /= d.norm()
            base = flat.clone()
            flat.copy_(base + h * d)
            up = f()
            flat.copy_(base - h * d)
            down = f()
            flat.copy_(base)
            analytic.append(float(grad @ d))
            numeric.append((up - down) / (2 * h))
        a, n = np.array(analytic), np.array(numeric)
        results.append(GroupResult(name, flat.numel(), _rel(a, n, floor), float(np.linalg.norm(a))))
    return results
