"""Task masks. Convention: 1 marks a position to predict, 0 an observed one."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np
import torch


class TaskKind(enum.IntEnum):
    SHORT_TERM = 0
    LONG_TERM = 1
    GENERATION = 2
    RANDOM = 3


TASK_NAMES = {"short": TaskKind.SHORT_TERM, "long": TaskKind.LONG_TERM,
              "generation": TaskKind.GENERATION, "random": TaskKind.RANDOM}


@dataclass(frozen=True)
class MaskSpec:
    kind: TaskKind
    mask: np.ndarray

    def __post_init__(self):
        mask = np.asarray(self.mask, dtype=np.float64)
        mask.setflags(write=False)
        object.__setattr__(self, "mask", mask)

    @property
    def L(self) -> int:
        return len(self.mask)

    @property
    def horizon(self) -> int:
        return int(self.mask.sum())


def horizon_band(kind: TaskKind, L: int) -> tuple[int, int]:
    """Inclusive horizon range for the prediction tasks."""
    if kind == TaskKind.SHORT_TERM:
        return 1, L // 4
    if kind == TaskKind.LONG_TERM:
        return math.ceil(3 * L / 4), L - 1
    raise ValueError(f"{kind.name} has no horizon band")


def make_mask(kind, L: int, horizon_or_ratio=None, rng: np.random.Generator | None = None) -> MaskSpec:
    kind = TaskKind(kind)
    mask = np.zeros(L)
    if kind in (TaskKind.SHORT_TERM, TaskKind.LONG_TERM):
        lo, hi = horizon_band(kind, L)
        h = horizon_or_ratio
        if h is None or int(h) != h or not lo <= h <= hi:
            raise ValueError(f"{kind.name} horizon must be an integer in [{lo}, {hi}] for L={L}, got {h}")
        mask[L - int(h):] = 1.0
    elif kind == TaskKind.GENERATION:
        mask[:] = 1.0
    else:
        ratio = horizon_or_ratio
        if ratio is None or not 0.0 < ratio < 1.0:
            raise ValueError(f"random mask ratio must be in (0, 1), got {ratio}")
        if rng is None:
            raise ValueError("random mask needs an rng")
        count = min(max(int(round(ratio * L)), 1), L - 1)
        mask[rng.choice(L, size=count, replace=False)] = 1.0
    return MaskSpec(kind, mask)


def sample_mask(rng: np.random.Generator, L: int, weights=(0.25, 0.25, 0.25, 0.25),
                ratio_range=(0.1, 0.9)) -> MaskSpec:
    """Draw a task kind by ``weights`` then a horizon/ratio uniformly within its band."""
    kind = TaskKind(int(rng.choice(4, p=np.asarray(weights, dtype=np.float64))))
    if kind in (TaskKind.SHORT_TERM, TaskKind.LONG_TERM):
        lo, hi = horizon_band(kind, L)
        return make_mask(kind, L, int(rng.integers(lo, hi + 1)))
    if kind == TaskKind.RANDOM:
        return make_mask(kind, L, float(rng.uniform(*ratio_range)), rng)
    return make_mask(kind, L)


def _mask_tensor(m, like: torch.Tensor) -> torch.Tensor:
    """Mask as B x L x 1 (or 1 x L x 1) tensor broadcasting over channels."""
    if isinstance(m, MaskSpec):
        m = m.mask
    t = torch.as_tensor(np.array(m) if not torch.is_tensor(m) else m, dtype=like.dtype)
    if t.ndim == 1:
        t = t.view(1, -1, 1)
    elif t.ndim == 2:
        t = t.unsqueeze(-1)
    if t.shape[1] != like.shape[1]:
        raise ValueError(f"mask length {t.shape[1]} does not match sequence length {like.shape[1]}")
    return t


def apply_mask(x0: torch.Tensor, xk: torch.Tensor, m) -> torch.Tensor:
    """Keep clean tokens where the mask is 0 and noisy ones where it is 1."""
    if x0.shape != xk.shape:
        raise ValueError(f"shape mismatch: {tuple(x0.shape)} vs {tuple(xk.shape)}")
    mt = _mask_tensor(m, x0)
    return torch.where(mt > 0.5, xk, x0)


def masked_loss(eps: torch.Tensor, eps_hat: torch.Tensor, m) -> torch.Tensor:
    """Mean squared error over masked positions only (B x masked-L x C0 entries)."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    mt = _mask_tensor(m, eps).expand(eps.shape[0], -1, 1)
    count = mt.sum() * eps.shape[-1]
    if float(count) == 0.0:
        raise ValueError("mask selects no positions; nothing to train on")
    return (((eps - eps_hat) ** 2) * mt).sum() / count
