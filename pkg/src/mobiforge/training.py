"""Denoising-phase training: masked diffusion loss with a frozen env encoder."""
from __future__ import annotations

import csv
import logging
import time
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn

from . import checkpoint as ckpt
from .backbone import MobiDenoiser, ModelConfig, build_model, skip_noise
from .datagen import FORMAT_VERSION, NORMALIZATION, DataKind, SeriesSample
from .masking import TaskKind, apply_mask, masked_loss, sample_mask
from .schedule import NoiseSchedule, build_schedule, forward_perturb
from .vae import build_vaes, encode_env

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    lr: float = 3e-3
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    clip_norm: float = 1.0
    lambda_rec: float = 1.0
    mask_weights: tuple = (0.25, 0.25, 0.25, 0.25)
    checkpoint_every: int = 0


@dataclass
class Batch:
    kind: DataKind
    values: torch.Tensor  # B x L x 1
    env: torch.Tensor  # B x C1 or B x L x C
    sample_ids: list = field(default_factory=list)

    @property
    def B(self) -> int:
        return self.values.shape[0]

    @property
    def L(self) -> int:
        return self.values.shape[1]


def make_batch(samples: list[SeriesSample], dtype=torch.float32) -> Batch:
    kinds = {s.kind for s in samples}
    if len(kinds) != 1:
        raise ValueError(f"a batch must hold one data kind, got {sorted(k.name for k in kinds)}")
    if len({s.L for s in samples}) != 1:
        raise ValueError("a batch must be homogeneous in L")
    values = torch.as_tensor(np.stack([s.values for s in samples]), dtype=dtype).unsqueeze(-1)
    env = torch.as_tensor(np.stack([s.env.data for s in samples]), dtype=dtype)
    return Batch(kinds.pop(), values, env, [s.sample_id for s in samples])


@dataclass
class Bundle:
    """Everything needed for inference: denoiser, env VAEs and schedule."""

    model: MobiDenoiser
    vaes: nn.ModuleDict
    sched: NoiseSchedule
    schedule_params: dict

    @property
    def config(self) -> ModelConfig:
        return self.model.config

    def alpha_bar(self, k, dtype) -> torch.Tensor:
        """abar_k shaped to broadcast over B x L x C0 (one row per sample, or one scalar row)."""
        ks = torch.as_tensor(k, dtype=torch.long).reshape(-1)
        return torch.tensor(self.sched.alpha_bar, dtype=dtype)[ks].view(-1, 1, 1)

    def predict_noise(self, xk_mixed: torch.Tensor, k, prompt: torch.Tensor) -> torch.Tensor:
        """Noise estimate from the network output.

        With target "v" the network output is read as v = sqrt(abar) eps -
        sqrt(1 - abar) x0 and converted; with null_skip the part of the
        estimate off the clean-token span is replaced by its exact value.
        """
        raw = self.model.predict_noise(xk_mixed, k, prompt)
        if self.config.target == "eps" and not self.config.null_skip:
            return raw
        alpha_bar = self.alpha_bar(k, raw.dtype)
        if self.config.target == "v":
            raw = alpha_bar.sqrt() * raw + (1.0 - alpha_bar).sqrt() * xk_mixed
        if not self.config.null_skip:
            return raw
        return skip_noise(xk_mixed, raw, alpha_bar, self.model.token_basis().to(raw.dtype))

    def env_latent(self, kind: DataKind, env: torch.Tensor, L: int) -> torch.Tensor:
        return encode_env(env, self.vaes[DataKind(kind).name], deterministic=True, L=L, kind=kind)


def build_bundle(model_config: ModelConfig, beta_start=1e-4, beta_end=0.3, seed: int = 0) -> Bundle:
    sched = build_schedule(model_config.K, beta_start, beta_end)
    return Bundle(build_model(model_config, seed), build_vaes(model_config.c0, model_config.vae_hidden, seed + 1),
                  sched, {"K": model_config.K, "beta_start": beta_start, "beta_end": beta_end})


def training_loss(bundle: Bundle, batch: Batch, masks: torch.Tensor, k: torch.Tensor, eps: torch.Tensor,
                  lambda_rec: float = 1.0, eps_hat_fn=None):
    """Masked noise-prediction loss plus lambda_rec * tokenizer reconstruction MSE.

    Returns (total, diffusion term, reconstruction term).
    """
    model = bundle.model
    x0 = model.tokenize(batch.values)
    xk = forward_perturb(x0, k, eps, bundle.sched)
    # context tokens see only observed values; otherwise the conv's receptive
    # field leaks masked values into neighbouring clean tokens
    context = model.tokenize(batch.values * (1.0 - masks.unsqueeze(-1)))
    mixed = apply_mask(context, xk, masks)
    e_env = bundle.env_latent(batch.kind, batch.env, batch.L)
    prompt = model.prompt(mixed, e_env)
    if eps_hat_fn is None:
        eps_hat = bundle.predict_noise(mixed, k, prompt)
    else:
        eps_hat = eps_hat_fn(eps, mixed, k, prompt)
    if bundle.config.target == "v":
        # v error = (eps error) / sqrt(abar_k)
        scale = bundle.alpha_bar(k, eps.dtype).rsqrt()
        diffusion = masked_loss(eps * scale, eps_hat * scale, masks)
    else:
        diffusion = masked_loss(eps, eps_hat, masks)
    rec = ((model.detokenize(x0) - batch.values) ** 2).mean()
    return diffusion + lambda_rec * rec, diffusion, rec


def draw_training_noise(batch: Batch, c0: int, K: int, mask_weights, rng: np.random.Generator,
                        gen: torch.Generator):
    """Per-sample task masks, per-sample diffusion steps and token-space noise."""
    specs = [sample_mask(rng, batch.L, mask_weights) for _ in range(batch.B)]
    masks = torch.as_tensor(np.stack([s.mask for s in specs]), dtype=batch.values.dtype)
    k = torch.as_tensor(rng.integers(0, K, size=batch.B))
    eps = torch.randn(batch.B, batch.L, c0, generator=gen, dtype=batch.values.dtype)
    return masks, k, eps, [s.kind for s in specs]


def make_optimizer(model: MobiDenoiser, cfg: TrainConfig) -> torch.optim.Optimizer:
    return torch.optim.Adam(model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


def freeze(module: nn.Module) -> None:
    module.eval()
    for p in module.parameters():
        p.requires_grad_(False)


def train_step(batch: Batch, bundle: Bundle, cfg: TrainConfig, rng: np.random.Generator,
               gen: torch.Generator, optimizer: torch.optim.Optimizer, step: int = 0,
               eps_hat_fn=None, kind_counter: Counter | None = None) -> float:
    model = bundle.model
    model.train()
    masks, k, eps, kinds = draw_training_noise(batch, model.config.c0, model.config.K, cfg.mask_weights, rng, gen)
    if kind_counter is not None:
        kind_counter.update(kinds)
    loss, _, _ = training_loss(bundle, batch, masks, k, eps, cfg.lambda_rec, eps_hat_fn)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite training loss at step {step}")
    optimizer.zero_grad()
    if loss.requires_grad:
        loss.backward()
        nn.utils.clip_grad_norm_(model.parameters(), cfg.clip_norm)
        optimizer.step()
    return float(loss.detach())


def _batches(samples: list[SeriesSample], batch_size: int, rng: np.random.Generator) -> list[list[SeriesSample]]:
    """Single-kind batches; each kind shuffled separately, then batch order shuffled."""
    by_kind: dict[DataKind, list] = {}
    for s in samples:
        by_kind.setdefault(s.kind, []).append(s)
    batches = []
    for kind in sorted(by_kind):
        group = by_kind[kind]
        order = rng.permutation(len(group))
        batches.extend([group[i] for i in order[j:j + batch_size]] for j in range(0, len(group), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def validation_loss(bundle: Bundle, samples: list[SeriesSample], cfg: TrainConfig, seed: int) -> float:
    """Loss under a fixed noise stream, without gradients."""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    bundle.model.eval()
    total, count = 0.0, 0
    with torch.no_grad():
        for chunk in _batches(samples, cfg.batch_size, rng):
            batch = make_batch(chunk)
            masks, k, eps, _ = draw_training_noise(batch, bundle.config.c0, bundle.config.K, cfg.mask_weights,
                                                   rng, gen)
            loss, _, _ = training_loss(bundle, batch, masks, k, eps, cfg.lambda_rec)
            total += float(loss) * batch.B
            count += batch.B
    return total / max(count, 1)


def checkpoint_header(bundle: Bundle, extra: dict | None = None) -> dict:
    header = {
        "model": bundle.config.to_dict(),
        "schedule": bundle.schedule_params,
        "normalization": NORMALIZATION,
    }
    header.update(extra or {})
    return header


def save_checkpoint(path, bundle: Bundle, extra: dict | None = None, include_model: bool = True) -> None:
    sections = {}
    if include_model:
        sections.update(ckpt.module_sections("model", bundle.model))
    sections.update(ckpt.module_sections("vae", bundle.vaes))
    header = checkpoint_header(bundle, extra)
    header["has_model"] = include_model
    ckpt.save_container(path, header, sections)


def load_checkpoint(path, require_model: bool = True) -> tuple[Bundle, dict]:
    header, sections = ckpt.load_container(path)
    config = ModelConfig(**header["model"])
    s = header["schedule"]
    bundle = build_bundle(config, s["beta_start"], s["beta_end"])
    ckpt.load_module_sections("vae", bundle.vaes, sections)
    if header.get("has_model", True):
        ckpt.load_module_sections("model", bundle.model, sections)
    elif require_model:
        raise ValueError(f"{path} holds only pretrained VAEs; run training first")
    freeze(bundle.vaes)
    bundle.model.eval()
    return bundle, header


def train_loop(train: list[SeriesSample], val: list[SeriesSample], bundle: Bundle, cfg: TrainConfig,
               checkpoint_path=None, log_path=None, header_extra: dict | None = None,
               require_all_kinds: bool = True) -> dict:
    """Run the denoising phase; VAEs stay frozen throughout.

    The corpus must mix all three kinds unless ``require_all_kinds`` is off
    (single-kind studies).
    """
    if not train:
        raise ValueError("empty training set")
    missing = set(DataKind) - {s.kind for s in train}
    if missing and require_all_kinds:
        raise ValueError(f"training set lacks kinds: {sorted(k.name for k in missing)}")
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        if path.is_dir():
            raise IsADirectoryError(f"checkpoint path {path} is a directory")
    freeze(bundle.vaes)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    optimizer = make_optimizer(bundle.model, cfg)
    history = {"train": [], "val": [], "step_losses": [], "mask_counts": []}
    log_rows = []
    start = time.perf_counter()
    step = 0
    for epoch in range(cfg.epochs):
        counter: Counter = Counter()
        losses = []
        for chunk in _batches(train, cfg.batch_size, rng):
            losses.append(train_step(make_batch(chunk), bundle, cfg, rng, gen, optimizer, step,
                                     kind_counter=counter))
            step += 1
        history["step_losses"].extend(losses)
        history["train"].append(float(np.mean(losses)))
        history["mask_counts"].append({TaskKind(k).name: v for k, v in sorted(counter.items())})
        log_rows.append((epoch, "train", history["train"][-1], time.perf_counter() - start))
        if val:
            history["val"].append(validation_loss(bundle, val, cfg, cfg.seed + 1))
            log_rows.append((epoch, "val", history["val"][-1], time.perf_counter() - start))
        log.info("epoch %d train %.5f%s", epoch, history["train"][-1],
                 f" val {history['val'][-1]:.5f}" if val else "")
        if checkpoint_path is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, bundle, dict(header_extra or {}, epoch=epoch + 1))
    bundle.model.eval()
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, bundle, dict(header_extra or {}, epoch=cfg.epochs))
    if log_path is not None:
        write_train_log(log_path, log_rows, (header_extra or {}).get("config_hash", ""))
    return history


def write_train_log(path, rows, config_hash: str = "") -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={FORMAT_VERSION} config_hash={config_hash}\n")
        w = csv.writer(fh)
        w.writerow(["epoch", "split", "loss", "wall_time"])
        for epoch, split, loss, wall in rows:
            w.writerow([epoch, split, f"{loss:.8g}", f"{wall:.3f}"])
