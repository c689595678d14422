"""Reverse diffusion with observed-token inpainting (prediction) or free running (generation)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .datagen import DataKind, EnvFeature
from .masking import MaskSpec, TaskKind, apply_mask, make_mask
from .schedule import forward_perturb, reverse_step
from .training import Bundle


@dataclass
class ForecastRequest:
    kind: DataKind
    observed: np.ndarray  # length L; only mask == 0 entries are read
    mask: MaskSpec
    env: EnvFeature
    n_samples: int = 8
    seed: int = 0

    def __post_init__(self):
        self.kind = DataKind(self.kind)
        self.observed = np.asarray(self.observed, dtype=np.float64)
        if self.n_samples < 1:
            raise ValueError("n_samples must be >= 1")
        if len(self.observed) != self.mask.L:
            raise ValueError(f"observed length {len(self.observed)} != mask length {self.mask.L}")
        if self.env.kind != self.kind:
            raise ValueError(f"env {type(self.env).__name__} does not match kind {self.kind.name}")
        if not np.all(np.isfinite(self.observed[self.mask.mask == 0])):
            raise ValueError("observed values must be defined wherever the mask is 0")


@torch.no_grad()
def sample_tokens(bundle: Bundle, kind: DataKind, observed: torch.Tensor, masks: torch.Tensor,
                  env: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    """Run the reverse chain for one chunk; returns clean-space series N x L.

    ``observed`` is N x L x 1, ``masks`` N x L (1 = predict), ``env`` the
    matching env batch.
    """
    model, sched = bundle.model, bundle.sched
    N, L, _ = observed.shape
    x0_obs = model.tokenize(observed)
    e_env = bundle.env_latent(kind, env, L)
    x = torch.randn(x0_obs.shape, generator=gen)
    for k in range(sched.K - 1, -1, -1):
        mixed = apply_mask(x0_obs, x, masks)
        eps_hat = bundle.predict_noise(mixed, k, model.prompt(mixed, e_env))
        z = torch.randn(x.shape, generator=gen) if k > 0 else None
        x = reverse_step(x, eps_hat, k, z, sched)
        if k > 0:
            renoised = forward_perturb(x0_obs, k - 1, torch.randn(x.shape, generator=gen), sched)
            x = apply_mask(renoised, x, masks)
    x = apply_mask(x0_obs, x, masks)
    return model.detokenize(x).squeeze(-1).clamp(0.0, 1.0)


def sample_many(bundle: Bundle, kind: DataKind, observed: np.ndarray, masks: np.ndarray, envs: np.ndarray,
                n_samples: int, seed: int, chunk: int = 128) -> np.ndarray:
    """Draw ``n_samples`` completions for each of N requests; returns N x n_samples x L.

    Requests are expanded draw-major per request and processed in fixed-size
    chunks from a single seeded stream, so results depend only on the inputs,
    the seed and the chunk size.
    """
    observed = np.asarray(observed, dtype=np.float64)
    masks = np.asarray(masks, dtype=np.float64)
    envs = np.asarray(envs, dtype=np.float64)
    N, L = observed.shape
    if masks.shape != (N, L):
        raise ValueError(f"masks shape {masks.shape} != observed shape {(N, L)}")
    if L != bundle.config.L:
        raise ValueError(f"checkpoint was built for L={bundle.config.L}, request has L={L}")
    rep = np.repeat(np.arange(N), n_samples)
    obs_t = torch.as_tensor(np.where(masks == 0, observed, 0.0)[rep], dtype=torch.float32).unsqueeze(-1)
    mask_t = torch.as_tensor(masks[rep], dtype=torch.float32)
    env_t = torch.as_tensor(envs[rep], dtype=torch.float32)
    gen = torch.Generator().manual_seed(int(seed))
    bundle.model.eval()
    out = [sample_tokens(bundle, kind, obs_t[i:i + chunk], mask_t[i:i + chunk], env_t[i:i + chunk], gen)
           for i in range(0, len(rep), chunk)]
    draws = torch.cat(out).numpy().astype(np.float64)
    if not np.all(np.isfinite(draws)):
        raise FloatingPointError("sampler produced non-finite values")
    return draws.reshape(N, n_samples, L)


def forecast(req: ForecastRequest, bundle: Bundle, chunk: int = 128) -> tuple[np.ndarray, np.ndarray]:
    """Point forecast (per-position median over draws) and the draws themselves."""
    if req.mask.horizon == 0:
        raise ValueError("mask selects nothing to predict; use detokenize(tokenize(x)) to reconstruct instead")
    draws = sample_many(bundle, req.kind, req.observed[None], req.mask.mask[None], req.env.data[None],
                        req.n_samples, req.seed, chunk)[0]
    return np.median(draws, axis=0), draws


def generate(kind: DataKind, env: EnvFeature, n_samples: int, seed: int, bundle: Bundle,
             chunk: int = 128) -> np.ndarray:
    kind = DataKind(kind)
    if env.kind != kind:
        raise ValueError(f"env {type(env).__name__} does not match kind {kind.name}")
    L = bundle.config.L
    req = ForecastRequest(kind, np.zeros(L), make_mask(TaskKind.GENERATION, L), env, n_samples, seed)
    return forecast(req, bundle, chunk)[1]
