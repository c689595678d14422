"""Linear-beta diffusion schedule, forward perturbation and ancestral reverse step.

Steps are 0-indexed: ``k`` runs over ``0 .. K-1`` and ``alpha_bar[k]`` is the
product of ``alpha[0..k]``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch


@dataclass(frozen=True)
class NoiseSchedule:
    beta: np.ndarray
    alpha: np.ndarray
    alpha_bar: np.ndarray

    def __post_init__(self):
        for name in ("beta", "alpha", "alpha_bar"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def K(self) -> int:
        return len(self.beta)

    def _check_step(self, k) -> None:
        ks = np.asarray(k.cpu() if torch.is_tensor(k) else k)
        if ks.size and (ks.min() < 0 or ks.max() >= self.K):
            raise IndexError(f"diffusion step {k} outside [0, {self.K})")

    def _coef(self, table: np.ndarray, k, like: torch.Tensor) -> torch.Tensor:
        """Gather ``table[k]`` as a tensor broadcastable against ``like`` (B x L x C)."""
        self._check_step(k)
        t = torch.tensor(table, dtype=like.dtype)
        if torch.is_tensor(k) and k.ndim == 1:
            return t[k.long()].view(-1, *([1] * (like.ndim - 1)))
        return t[int(k)]


def build_schedule(K: int = 50, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    if K < 2:
        raise ValueError(f"K must be >= 2, got {K}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"need 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    beta = np.linspace(beta_start, beta_end, K)
    alpha = 1.0 - beta
    return NoiseSchedule(beta=beta, alpha=alpha, alpha_bar=np.cumprod(alpha))


def forward_perturb(x0: torch.Tensor, k, eps: torch.Tensor, sched: NoiseSchedule) -> torch.Tensor:
    """sqrt(abar_k) * x0 + sqrt(1 - abar_k) * eps.

    ``k`` is an int or a length-B tensor of per-sample steps.
    """
    if x0.shape != eps.shape:
        raise ValueError(f"shape mismatch: x0 {tuple(x0.shape)} vs eps {tuple(eps.shape)}")
    abar = sched._coef(sched.alpha_bar, k, x0)
    return torch.sqrt(abar) * x0 + torch.sqrt(1.0 - abar) * eps


def reverse_step(xk: torch.Tensor, eps_hat: torch.Tensor, k: int, z: torch.Tensor | None,
                 sched: NoiseSchedule) -> torch.Tensor:
    """One ancestral update x_k -> x_{k-1} with sigma_k = sqrt(beta_k)."""
    if xk.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: xk {tuple(xk.shape)} vs eps_hat {tuple(eps_hat.shape)}")
    sched._check_step(k)
    k = int(k)
    if k == 0 and z is not None and bool(torch.any(z != 0)):
        raise ValueError("the final reverse step (k=0) must not add noise")
    alpha = float(sched.alpha[k])
    # alpha = 1 is the no-noise limit: the update reduces to the identity
    coef = 0.0 if alpha == 1.0 else (1.0 - alpha) / float(np.sqrt(1.0 - sched.alpha_bar[k]))
    mean = (xk - coef * eps_hat) / float(np.sqrt(alpha))
    if k == 0 or z is None:
        return mean
    return mean + float(np.sqrt(sched.beta[k])) * z
