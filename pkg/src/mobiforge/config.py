"""Run configuration: an INI file with a fixed, documented key set.

Every key has a default; unknown sections or keys are rejected.  The config
hash is a digest of the canonicalized, defaults-filled key set, so two files
that differ only in comments, ordering or spacing hash identically.
"""
from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass
from pathlib import Path


def _bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("1", "true", "yes", "on"):
        return True
    if lowered in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _floats(text: str) -> tuple[float, ...]:
    return tuple(float(part) for part in text.split(","))


SCHEMA: dict[str, dict[str, tuple]] = {
    "paths": {
        "dataset_dir": (str, "data"),
        "checkpoint": (str, "model.ckpt"),
        "reports_dir": (str, "reports"),
    },
    "data": {
        "seed": (int, 0),
        "L": (int, 64),
        "n_train_per_kind": (int, 2000),
        "n_val_per_kind": (int, 200),
        "n_test_per_kind": (int, 200),
    },
    "diffusion": {
        "K": (int, 50),
        "beta_start": (float, 1e-4),
        "beta_end": (float, 0.3),
    },
    "model": {
        "seed": (int, 0),
        "c0": (int, 32),
        "n_blocks": (int, 4),
        "n_heads": (int, 4),
        "ff_mult": (int, 4),
        "kernel_width": (int, 3),
        "m_top": (int, 4),
        "c_cond": (int, 32),
        "feature_dim": (int, 8),
        "vae_hidden": (int, 64),
        "per_position_modulation": (_bool, True),
        "token_scale": (float, 1.0),
        "null_skip": (_bool, True),
        "target": (str, "v"),
    },
    "vae": {
        "epochs": (int, 200),
        "lr": (float, 3e-3),
        "batch_rows": (int, 512),
        "kl_weight": (float, 1e-4),
        "seed": (int, 0),
    },
    "train": {
        "seed": (int, 0),
        "epochs": (int, 30),
        "batch_size": (int, 32),
        "lr": (float, 3e-3),
        "beta1": (float, 0.9),
        "beta2": (float, 0.999),
        "clip_norm": (float, 1.0),
        "lambda_rec": (float, 1.0),
        "mask_weights": (_floats, (0.25, 0.25, 0.25, 0.25)),
        "checkpoint_every": (int, 0),
    },
    "eval": {
        "seed": (int, 0),
        "n_eval_per_kind": (int, 50),
        "n_samples": (int, 8),
        "short_horizon": (int, 8),
        "long_horizon": (int, 48),
        "n_bins": (int, 50),
        "smoothing": (float, 1e-10),
        "jsd_form": (str, "printed"),
        "chunk": (int, 128),
    },
}


def _canon(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    if isinstance(value, tuple):
        return ",".join(_canon(v) for v in value)
    return str(value)


@dataclass
class RunConfig:
    values: dict[str, dict]
    base_dir: Path = Path(".")

    def __getitem__(self, section: str) -> dict:
        return self.values[section]

    def path(self, key: str) -> Path:
        p = Path(self.values["paths"][key])
        return p if p.is_absolute() else self.base_dir / p

    def canonical_text(self) -> str:
        lines = []
        for section in sorted(self.values):
            for key in sorted(self.values[section]):
                lines.append(f"{section}.{key}={_canon(self.values[section][key])}")
        return "\n".join(lines) + "\n"

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).hexdigest()[:16]

    def to_ini(self) -> str:
        out = []
        for section, keys in self.values.items():
            out.append(f"[{section}]")
            out.extend(f"{key} = {_canon(value)}" for key, value in keys.items())
            out.append("")
        return "\n".join(out)


def default_config(base_dir=".") -> RunConfig:
    return RunConfig({s: {k: d for k, (_, d) in keys.items()} for s, keys in SCHEMA.items()}, Path(base_dir))


def parse_config(text: str, base_dir=".") -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str  # keep key case (e.g. "L", "K")
    parser.read_string(text)
    cfg = default_config(base_dir)
    for section in parser.sections():
        if section not in SCHEMA:
            raise ValueError(f"unknown config section [{section}]")
        for key, raw in parser.items(section):
            if key not in SCHEMA[section]:
                raise ValueError(f"unknown config key {section}.{key}")
            conv = SCHEMA[section][key][0]
            try:
                cfg.values[section][key] = conv(raw.strip())
            except ValueError as exc:
                raise ValueError(f"bad value for {section}.{key}: {raw!r} ({exc})") from None
    validate(cfg)
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    return parse_config(path.read_text(encoding="utf-8"), base_dir=path.parent)


def validate(cfg: RunConfig) -> None:
    d, t, e = cfg["data"], cfg["train"], cfg["eval"]
    weights = t["mask_weights"]
    if len(weights) != 4 or any(w < 0 for w in weights) or abs(sum(weights) - 1.0) > 1e-9:
        raise ValueError("train.mask_weights must be 4 non-negative numbers summing to 1")
    for key in ("epochs", "checkpoint_every"):
        if t[key] < 0:
            raise ValueError(f"train.{key} must be >= 0")
    for key in ("batch_size", "lr", "clip_norm", "beta1", "beta2"):
        if t[key] <= 0:
            raise ValueError(f"train.{key} must be positive")
    if t["lambda_rec"] < 0:
        raise ValueError("train.lambda_rec must be >= 0")
    if d["L"] < 8:
        raise ValueError("data.L must be >= 8")
    if cfg["model"]["target"] not in ("eps", "v"):
        raise ValueError("model.target must be 'eps' or 'v'")
    if e["jsd_form"] not in ("printed", "mixture"):
        raise ValueError("eval.jsd_form must be 'printed' or 'mixture'")
    if e["n_samples"] < 1:
        raise ValueError("eval.n_samples must be >= 1")
