"""Command-line harness: datagen, pretrain-vae, train, forecast, eval, plotdata.

Exit codes: 0 success, 1 usage error, 2 runtime error.  Log level comes from
the MOBIFORGE_LOG environment variable (error, info or debug).
"""
from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from pathlib import Path

import torch

from . import datagen
from .checkpoint import load_container, load_module_sections
from .backbone import ModelConfig
from .config import RunConfig, load_config
from .evaluate import evaluate_grid, task_mask, write_eval_csv
from .sampler import ForecastRequest, forecast
from .training import TrainConfig, build_bundle, load_checkpoint, save_checkpoint, train_loop
from .vae import pretrain_vaes

log = logging.getLogger("mobiforge")

SPLITS = ("train", "val", "test")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _setup_logging() -> None:
    level = os.environ.get("MOBIFORGE_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise UsageError(f"MOBIFORGE_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def model_config(cfg: RunConfig) -> ModelConfig:
    m = cfg["model"]
    return ModelConfig(
        L=cfg["data"]["L"], c0=m["c0"], n_blocks=m["n_blocks"], n_heads=m["n_heads"], ff_mult=m["ff_mult"],
        kernel_width=m["kernel_width"], m_top=m["m_top"], c_cond=m["c_cond"], feature_dim=m["feature_dim"],
        vae_hidden=m["vae_hidden"], K=cfg["diffusion"]["K"], per_position_modulation=m["per_position_modulation"],
        token_scale=m["token_scale"], null_skip=m["null_skip"], target=m["target"])


def train_config(cfg: RunConfig) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(epochs=t["epochs"], batch_size=t["batch_size"], lr=t["lr"], seed=t["seed"],
                       beta1=t["beta1"], beta2=t["beta2"], clip_norm=t["clip_norm"], lambda_rec=t["lambda_rec"],
                       mask_weights=t["mask_weights"], checkpoint_every=t["checkpoint_every"])


def split_path(cfg: RunConfig, split: str) -> Path:
    return cfg.path("dataset_dir") / f"{split}.ndjson"


def load_split(cfg: RunConfig, split: str) -> list[datagen.SeriesSample]:
    path = split_path(cfg, split)
    if not path.exists():
        raise FileNotFoundError(f"{path} not found; run `datagen` first")
    header, samples = datagen.read_dataset(path)
    if header["L"] != cfg["data"]["L"]:
        raise ValueError(f"{path} has L={header['L']} but the config says L={cfg['data']['L']}")
    return samples


def cmd_datagen(cfg: RunConfig, args) -> None:
    d = cfg["data"]
    seeds = datagen.split_seeds(d["seed"])
    sizes = {"train": d["n_train_per_kind"], "val": d["n_val_per_kind"], "test": d["n_test_per_kind"]}
    for split in SPLITS:
        samples = datagen.generate_corpus(seeds[split], sizes[split], d["L"])
        datagen.write_dataset(split_path(cfg, split), samples, cfg.hash)
        log.info("wrote %d %s samples", len(samples), split)


def _fresh_bundle(cfg: RunConfig):
    diff = cfg["diffusion"]
    return build_bundle(model_config(cfg), diff["beta_start"], diff["beta_end"], cfg["model"]["seed"])


def _pretrain(cfg: RunConfig, bundle, train) -> None:
    v = cfg["vae"]
    pretrain_vaes(train, bundle.vaes, v["epochs"], v["lr"], v["seed"], v["kl_weight"], v["batch_rows"])


def _header(cfg: RunConfig, stage: str) -> dict:
    return {"config_hash": cfg.hash, "stage": stage, "train": dict(cfg["train"]), "vae": dict(cfg["vae"])}


def cmd_pretrain_vae(cfg: RunConfig, args) -> None:
    bundle = _fresh_bundle(cfg)
    _pretrain(cfg, bundle, load_split(cfg, "train"))
    save_checkpoint(cfg.path("checkpoint"), bundle, _header(cfg, "vae"), include_model=False)


def cmd_train(cfg: RunConfig, args) -> None:
    train = load_split(cfg, "train")
    val = load_split(cfg, "val")
    bundle = _fresh_bundle(cfg)
    path = cfg.path("checkpoint")
    reused = False
    if path.exists():
        header, sections = load_container(path)
        if header.get("config_hash") == cfg.hash:
            load_module_sections("vae", bundle.vaes, sections)
            reused = True
            log.info("using pretrained VAEs from %s", path)
    if not reused:
        log.info("pretraining VAEs")
        _pretrain(cfg, bundle, train)
    train_loop(train, val, bundle, train_config(cfg), path, cfg.path("reports_dir") / "train_log.csv",
               _header(cfg, "trained"))


def _load_trained(cfg: RunConfig):
    bundle, header = load_checkpoint(cfg.path("checkpoint"))
    if bundle.config.L != cfg["data"]["L"]:
        raise ValueError(f"checkpoint L={bundle.config.L} does not match config L={cfg['data']['L']}")
    return bundle


def cmd_forecast(cfg: RunConfig, args) -> None:
    bundle = _load_trained(cfg)
    samples = {s.sample_id: s for s in load_split(cfg, args.split)}
    if args.sample_id not in samples:
        raise KeyError(f"sample id {args.sample_id} not in the {args.split} split")
    sample = samples[args.sample_id]
    L = sample.L
    e = cfg["eval"]
    short_h = args.horizon if args.task == "short" and args.horizon else e["short_horizon"]
    long_h = args.horizon if args.task == "long" and args.horizon else e["long_horizon"]
    spec = task_mask(args.task, L, short_h, long_h)
    n = args.n_samples or e["n_samples"]
    req = ForecastRequest(sample.kind, sample.values, spec, sample.env, n, e["seed"])
    point, draws = forecast(req, bundle, e["chunk"])
    out = Path(args.out) if args.out else cfg.path("reports_dir") / "forecast.csv"
    write_forecast_csv(out, sample.sample_id, sample.values, spec.mask, point, draws, cfg.hash)


def write_forecast_csv(path, sample_id, truth, mask, point, draws, config_hash: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        fh.write(f"# format_version={datagen.FORMAT_VERSION} config_hash={config_hash}\n")
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "position", "observed_flag", "truth", "point"]
                   + [f"draw_{i}" for i in range(len(draws))])
        for t in range(len(point)):
            truth_cell = "" if truth is None else f"{truth[t]:.8g}"
            w.writerow([sample_id, t, int(mask[t] == 0), truth_cell, f"{point[t]:.8g}"]
                       + [f"{d[t]:.8g}" for d in draws])


def cmd_eval(cfg: RunConfig, args) -> None:
    bundle = _load_trained(cfg)
    e = cfg["eval"]
    rows = evaluate_grid(bundle, load_split(cfg, "test"), e["n_eval_per_kind"], e["n_samples"], e["seed"],
                         e["short_horizon"], e["long_horizon"], e["n_bins"], e["smoothing"], e["jsd_form"],
                         e["chunk"])
    out = Path(args.out) if args.out else cfg.path("reports_dir") / "eval.csv"
    write_eval_csv(out, rows, cfg.hash)


def cmd_plotdata(args) -> None:
    """Reshape a forecast CSV to long format: sample_id, position, series, value."""
    with open(args.inp, newline="") as fh:
        lines = list(fh)
    comments = [line for line in lines if line.startswith("#")]
    rows = list(csv.DictReader(line for line in lines if not line.startswith("#")))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        fh.writelines(comments)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "position", "observed_flag", "series", "value"])
        for r in rows:
            for name, value in r.items():
                if name in ("sample_id", "position", "observed_flag") or value == "":
                    continue
                w.writerow([r["sample_id"], r["position"], r["observed_flag"], name, value])


COMMANDS = {
    "datagen": cmd_datagen,
    "pretrain-vae": cmd_pretrain_vae,
    "train": cmd_train,
    "forecast": cmd_forecast,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mobiforge", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="run config (INI)")
        if name == "forecast":
            p.add_argument("--task", choices=["short", "long", "generation"], required=True)
            p.add_argument("--horizon", type=int, default=None)
            p.add_argument("--sample-id", type=int, required=True)
            p.add_argument("--split", choices=SPLITS, default="test")
            p.add_argument("--n-samples", type=int, default=None)
            p.add_argument("--out", default=None)
        if name == "eval":
            p.add_argument("--out", default=None)
    p = sub.add_parser("plotdata")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError("a subcommand is required: " + ", ".join([*COMMANDS, "plotdata"]))
        _setup_logging()
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if not exc.code else 1
    try:
        torch.use_deterministic_algorithms(True)
        if args.command == "plotdata":
            cmd_plotdata(args)
        else:
            COMMANDS[args.command](load_config(args.config), args)
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit code 2
        log.debug("failure", exc_info=True)
        print(f"mobiforge {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
