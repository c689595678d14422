"""Per-kind VAEs lifting environment features into a shared B x L x C0 latent."""
from __future__ import annotations

import logging

import numpy as np
import torch
import torch.nn as nn

from .datagen import C1, C2, C3, DataKind

log = logging.getLogger(__name__)

ENV_DIMS = {DataKind.BS_TRAFFIC: C1, DataKind.APP_TRAFFIC: C2, DataKind.RSRP: C3}
LOGVAR_CLAMP = (-10.0, 10.0)


class EnvVAE(nn.Module):
    def __init__(self, kind: DataKind, c0: int, hidden: int = 64, logvar_clamp=LOGVAR_CLAMP):
        super().__init__()
        self.logvar_clamp = tuple(logvar_clamp)
        self.kind = DataKind(kind)
        self.in_dim = ENV_DIMS[self.kind]
        self.c0 = c0
        self.encoder = nn.Sequential(
            nn.Linear(self.in_dim, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, 2 * c0),
        )
        self.decoder = nn.Sequential(
            nn.Linear(c0, hidden), nn.SiLU(),
            nn.Linear(hidden, hidden), nn.SiLU(),
            nn.Linear(hidden, self.in_dim),
        )

    def moments(self, env: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Mean and clamped log-variance for each env row."""
        if env.shape[-1] != self.in_dim:
            raise ValueError(f"{self.kind.name} VAE expects width {self.in_dim}, got {env.shape[-1]}")
        mu, logvar = self.encoder(env).chunk(2, dim=-1)
        return mu, logvar.clamp(*self.logvar_clamp)

    def decode(self, e: torch.Tensor) -> torch.Tensor:
        return self.decoder(e)


def _check_kind(env_kind, vae: EnvVAE) -> None:
    if env_kind is not None and DataKind(env_kind) != vae.kind:
        raise ValueError(f"env of kind {DataKind(env_kind).name} given to the {vae.kind.name} VAE")


def encode_env(env: torch.Tensor, vae: EnvVAE, eps: torch.Tensor | None = None, deterministic: bool = True,
               L: int | None = None, kind=None) -> torch.Tensor:
    """Reparameterized latent e = mu + sigma * eps, shaped B x L x C0.

    BsEnv batches (B x C1) have no time axis; they are encoded once and tiled
    ``L`` times.
    """
    _check_kind(kind, vae)
    mu, logvar = vae.moments(env)
    if deterministic:
        e = mu
    else:
        if eps is None:
            raise ValueError("stochastic encoding needs eps")
        e = mu + torch.exp(0.5 * logvar) * eps
    if e.ndim == 2:
        if L is None:
            raise ValueError("L is required to tile a static environment")
        e = e.unsqueeze(1).expand(-1, L, -1)
    return e


def kl_to_standard_normal(mu: torch.Tensor, logvar: torch.Tensor) -> torch.Tensor:
    """0.5 * sum(mu^2 + sigma^2 - 1 - ln sigma^2) over the latent axis."""
    # expm1 keeps sigma^2 - 1 - ln sigma^2 non-negative near logvar = 0
    return 0.5 * (mu ** 2 + torch.expm1(logvar) - logvar).sum(dim=-1)


def vae_loss(env: torch.Tensor, vae: EnvVAE, eps: torch.Tensor, kl_weight: float = 1.0,
             return_parts: bool = False):
    """Reconstruction MSE of the sampled latent plus the (weighted) KL term.

    The MSE averages over every env entry; the KL sums latent dims and averages
    over env rows.
    """
    mu, logvar = vae.moments(env)
    e = mu + torch.exp(0.5 * logvar) * eps
    recon = ((vae.decode(e) - env) ** 2).mean()
    kl = kl_to_standard_normal(mu, logvar).mean()
    loss = recon + kl_weight * kl
    if not torch.isfinite(loss):
        raise FloatingPointError(
            f"non-finite {vae.kind.name} VAE loss (recon={float(recon)}, kl={float(kl)})")
    if return_parts:
        return loss, recon, kl
    return loss


def env_rows(envs: np.ndarray) -> np.ndarray:
    """Flatten per-step env batches (N x L x C) to rows; static ones pass through."""
    envs = np.asarray(envs, dtype=np.float32)
    return envs.reshape(-1, envs.shape[-1])


def reconstruction_mse(vae: EnvVAE, envs: np.ndarray) -> float:
    """Held-out MSE of decode(mu(env)) against env."""
    with torch.no_grad():
        x = torch.as_tensor(env_rows(envs))
        mu, _ = vae.moments(x)
        return float(((vae.decode(mu) - x) ** 2).mean())


def pretrain_vae(vae: EnvVAE, envs: np.ndarray, epochs: int, lr: float = 3e-3, seed: int = 0,
                 batch_rows: int = 512, kl_weight: float = 1e-4) -> list[float]:
    """Fit one VAE on env rows; returns the mean training loss per epoch."""
    rows = torch.as_tensor(env_rows(envs))
    gen = torch.Generator().manual_seed(seed)
    opt = torch.optim.Adam(vae.parameters(), lr=lr)
    history = []
    for epoch in range(epochs):
        perm = torch.randperm(len(rows), generator=gen)
        total, count = 0.0, 0
        for start in range(0, len(rows), batch_rows):
            batch = rows[perm[start:start + batch_rows]]
            eps = torch.randn(batch.shape[0], vae.c0, generator=gen)
            loss = vae_loss(batch, vae, eps, kl_weight)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(batch)
            count += len(batch)
        history.append(total / count)
        log.debug("vae %s epoch %d loss %.6f", vae.kind.name, epoch, history[-1])
    return history


def build_vaes(c0: int, hidden: int = 64, seed: int = 0) -> nn.ModuleDict:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return nn.ModuleDict({kind.name: EnvVAE(kind, c0, hidden) for kind in DataKind})


def pretrain_vaes(samples, vaes: nn.ModuleDict, epochs: int, lr: float = 3e-3, seed: int = 0,
                  kl_weight: float = 1e-4, batch_rows: int = 512) -> dict[str, list[float]]:
    """Pretrain the three VAEs on the env features of ``samples`` (in place)."""
    by_kind = {kind: [] for kind in DataKind}
    for s in samples:
        by_kind[s.kind].append(s.env.data)
    for kind, envs in by_kind.items():
        if not envs:
            raise ValueError(f"dataset has no {kind.name} samples; all three kinds are needed")
    histories = {}
    for kind, envs in by_kind.items():
        histories[kind.name] = pretrain_vae(vaes[kind.name], np.stack(envs), epochs, lr,
                                            seed + int(kind), batch_rows, kl_weight)
        if epochs:
            log.info("vae %s final loss %.5f", kind.name, histories[kind.name][-1])
    return histories
