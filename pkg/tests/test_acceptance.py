"""The twelve acceptance criteria, each reported as one PASS/FAIL line.

The desk-scale model (criteria 7 to 9) is trained once per session on 2,000
BS traffic series; everything else builds its own small fixtures.
"""
import math
import time

import numpy as np
import pytest
import torch

from mobiforge.backbone import ModelConfig, build_model
from mobiforge.cli import main
from mobiforge.datagen import DataKind, generate_corpus, gen_bs_traffic, oracle_mean
from mobiforge.evaluate import copy_last_forecast, read_eval_csv, run_task, sample_mean_forecast
from mobiforge.gradcheck import TINY_CONFIG, check_gradients
from mobiforge.masking import masked_loss, sample_mask
from mobiforge.metrics import jsd, jsd_from_probs, mae, nrmse
from mobiforge.sampler import sample_many
from mobiforge.schedule import build_schedule, forward_perturb, reverse_step
from mobiforge.training import TrainConfig, build_bundle, load_checkpoint, save_checkpoint, train_loop
from mobiforge.vae import build_vaes, kl_to_standard_normal, pretrain_vae, pretrain_vaes, reconstruction_mse

pytestmark = pytest.mark.slow

L = 64
DESK_TRAIN, DESK_TEST = 2000, 100
DESK_EPOCHS = 30
DESK_DRAWS = 8
VAE_EPOCHS = 200
VAE_LR = 3e-3
KL_WEIGHT = 1e-4


# ---------------------------------------------------------------- 1 to 6


def test_c01_gradient_oracle(criterion):
    with criterion(1) as c:
        start = time.process_time()
        groups = check_gradients(TINY_CONFIG, dtype=torch.float32)
        elapsed = time.process_time() - start
        worst = max(groups, key=lambda g: g.rel_error)
        names = " ".join(g.name for g in groups)
        for part in ("vae.BS_TRAFFIC", "vae.APP_TRAFFIC", "vae.RSRP", "prompt.periodic", "prompt.temporal",
                     "prompt.feature", "prompt.assemble", "modulation", "tokenizer", "detokenizer", "head"):
            c.check(part in names, f"group {part} covered")
        c.check(all(g.analytic_norm > 0 for g in groups), f"{len(groups)} groups, all with nonzero gradient")
        c.check(worst.rel_error < 1e-3, f"max rel error {worst.rel_error:.2e} ({worst.name}) < 1e-3")
        c.check(elapsed < 60, f"cpu time {elapsed:.1f}s < 60s")


def test_c02_forward_statistics(criterion):
    with criterion(2) as c:
        s = build_schedule(50, 1e-4, 0.05)
        gen = torch.Generator().manual_seed(2)
        eps = torch.randn(10_000, 1, 1, generator=gen, dtype=torch.float64)
        out = forward_perturb(torch.zeros_like(eps), s.K - 1, eps, s).numpy().ravel()
        rel = abs(out.var() / (1 - s.alpha_bar[-1]) - 1)
        c.check(abs(out.mean()) < 0.02, f"|mean| {abs(out.mean()):.4f} < 0.02")
        c.check(rel < 0.05, f"variance off by {rel:.3%} < 5%")


def test_c03_reverse_round_trip(criterion):
    with criterion(3) as c:
        s = build_schedule(50)
        gen = torch.Generator().manual_seed(3)
        x0 = torch.randn(4, L, 32, generator=gen)
        x = forward_perturb(x0, s.K - 1, torch.randn(x0.shape, generator=gen), s)
        for k in range(s.K - 1, -1, -1):
            # the true noise of the current state relative to x0
            eps_k = (x - math.sqrt(s.alpha_bar[k]) * x0) / math.sqrt(1 - s.alpha_bar[k])
            x = reverse_step(x, eps_k, k, None, s)
        err = float((x - x0).abs().max())
        c.check(err <= 1e-4, f"max abs error {err:.2e} <= 1e-4 (K=50)")


def test_c04_masking(criterion):
    with criterion(4) as c:
        gen = torch.Generator().manual_seed(4)
        rng = np.random.default_rng(4)
        leaks = 0.0
        for _ in range(20):
            m = sample_mask(rng, L)
            eps = torch.randn(3, L, 8, generator=gen)
            eps_hat = torch.randn(3, L, 8, generator=gen, requires_grad=True)
            if m.mask.sum() == 0:
                continue
            masked_loss(eps, eps_hat, np.repeat(m.mask[None], 3, axis=0)).backward()
            leaks = max(leaks, float(np.abs(eps_hat.grad[:, m.mask == 0].numpy()).max(initial=0.0)))
        c.check(leaks == 0.0, f"max |grad| at observed positions {leaks}")
        for weights in ((0.25, 0.25, 0.25, 0.25), (0.4, 0.3, 0.2, 0.1)):
            kinds = np.array([int(sample_mask(rng, L, weights).kind) for _ in range(10_000)])
            freq = np.bincount(kinds, minlength=4) / len(kinds)
            dev = float(np.abs(freq - weights).max())
            c.check(dev <= 0.02, f"weights {weights}: max frequency deviation {dev:.4f} <= 0.02")


def test_c05_identity_at_init(criterion):
    with criterion(5) as c:
        cfg = ModelConfig()
        model = build_model(cfg, seed=5)
        gen = torch.Generator().manual_seed(5)
        h = torch.randn(4, cfg.L, cfg.c0, generator=gen)
        prompt = torch.randn(4, cfg.L, cfg.c_cond, generator=gen)
        with torch.no_grad():
            dev = float((model.run_blocks(h, prompt) - h).abs().max())
        c.check(dev <= 1e-6, f"{cfg.n_blocks}-block stack deviation {dev:.2e} <= 1e-6")


def test_c06_vae(criterion):
    with criterion(6) as c:
        gen = torch.Generator().manual_seed(6)
        # per-row scales reach down to the standard normal, where KL is 0
        scale = torch.logspace(-8, 1, 10_000, dtype=torch.float64)[:, None]
        mu = scale * torch.randn(10_000, 32, generator=gen, dtype=torch.float64)
        logvar = scale * (2 * torch.rand(10_000, 32, generator=gen, dtype=torch.float64) - 1)
        kl = kl_to_standard_normal(mu, logvar)
        c.check(bool((kl >= 0).all()), f"KL min {float(kl.min()):.3g} >= 0 on 10^4 inputs")
        train = generate_corpus(60, 300, L)
        held = generate_corpus(61, 100, L)
        vaes = build_vaes(32, seed=6)
        start = time.perf_counter()
        pretrain_vaes(train, vaes, VAE_EPOCHS, VAE_LR, 6, KL_WEIGHT)
        elapsed = time.perf_counter() - start
        for kind in DataKind:
            envs = np.stack([s.env.data for s in held if s.kind == kind])
            err = reconstruction_mse(vaes[kind.name], envs)
            c.check(err < 0.05, f"{kind.name} held-out MSE {err:.4f} < 0.05")
        c.check(elapsed < 300, f"200 epochs in {elapsed:.0f}s < 300s")


# ---------------------------------------------------------------- desk-scale model (7 to 9)


@pytest.fixture(scope="module")
def desk():
    start = time.perf_counter()
    train = gen_bs_traffic(70, DESK_TRAIN, L)
    test = gen_bs_traffic(71, DESK_TEST, L)
    bundle = build_bundle(ModelConfig(L=L), seed=7)
    pretrain_vae(bundle.vaes[DataKind.BS_TRAFFIC.name], np.stack([s.env.data for s in train]), VAE_EPOCHS,
                 VAE_LR, 7, 512, KL_WEIGHT)
    history = train_loop(train, [], bundle, TrainConfig(epochs=DESK_EPOCHS, seed=7), require_all_kinds=False)
    return {"bundle": bundle, "train": train, "test": test, "history": history,
            "train_time": time.perf_counter() - start}


def test_c07_desk_scale_learning(criterion, desk):
    with criterion(7) as c:
        start = time.perf_counter()
        test = desk["test"]
        values = np.stack([s.values for s in test])
        truth, point, _ = run_task(desk["bundle"], test, "short", DESK_DRAWS, 71, 8, 48)
        short, copy_last = mae(truth, point), mae(truth, copy_last_forecast(values, 8))
        truth, point, _ = run_task(desk["bundle"], test, "long", DESK_DRAWS, 72, 8, 48)
        long, sample_mean = mae(truth, point), mae(truth, sample_mean_forecast(values, 48))
        total = desk["train_time"] + time.perf_counter() - start
        c.check(short <= 0.6 * copy_last, f"short MAE {short:.4f} <= 0.6 x copy-last {copy_last:.4f}")
        c.check(long < sample_mean, f"long MAE {long:.4f} < sample-mean {sample_mean:.4f}")
        c.check(total <= 1200, f"train+eval {total:.0f}s <= 1200s ({DESK_EPOCHS} epochs)")


def test_c08_generation_fidelity(criterion, desk):
    with criterion(8) as c:
        bundle = desk["bundle"]
        held = gen_bs_traffic(80, 1000, L)
        _, _, draws = run_task(bundle, held, "generation", 1, 80)
        generated = draws[:, 0]
        real = np.stack([s.values for s in held])
        noise = np.random.default_rng(80).uniform(0.0, 1.0, real.shape)
        model_score, noise_score = jsd(real, generated), jsd(real, noise)
        c.check(model_score <= noise_score / 3,
                f"JSD generated {model_score:.4f} <= uniform {noise_score:.4f} / 3")
        wins = ordering_trials(bundle, held, trials=100, draws=4, seed=81)
        c.check(wins >= 90, f"env ordering held in {wins}/100 trials")


def ordering_trials(bundle, pool, trials: int, draws: int, seed: int) -> int:
    """Pairs of envs whose oracle means differ by 0.3; count trials where generated means keep that order."""
    rng = np.random.default_rng(seed)
    lo_envs, hi_envs = [], []
    while len(lo_envs) < trials:
        env = pool[int(rng.integers(len(pool)))].env.data.copy()
        lo, hi = env.copy(), env.copy()
        lo[0] = rng.uniform(0.15, 0.25)
        hi[0] = lo[0] + 0.3
        if abs(oracle_mean(hi, L) - oracle_mean(lo, L) - 0.3) > 1e-3:
            continue  # clipping would shrink the gap
        lo_envs.append(lo)
        hi_envs.append(hi)
    envs = np.stack(lo_envs + hi_envs)
    masks = np.ones((len(envs), L))
    out = sample_many(bundle, DataKind.BS_TRAFFIC, np.zeros((len(envs), L)), masks, envs, draws, seed)
    means = out.mean(axis=(1, 2))
    return int(np.sum(means[trials:] > means[:trials]))


def test_c09_inpainting_consistency(criterion, desk):
    with criterion(9) as c:
        model = desk["bundle"].model
        train = np.stack([s.values for s in desk["train"]])
        with torch.no_grad():
            y = torch.as_tensor(train, dtype=torch.float32).unsqueeze(-1)
            recon = model.detokenize(model.tokenize(y)).squeeze(-1).numpy()
        tol = float(np.mean((recon - train) ** 2))
        c.check(tol < 0.01, f"detokenizer reconstruction MSE {tol:.2e} < 0.01")
        test = desk["test"][:20]
        values = np.stack([s.values for s in test])
        envs = np.stack([s.env.data for s in test])
        for task, h in (("short", 8), ("long", 48)):
            mask = np.zeros(L)
            mask[L - h:] = 1
            draws = sample_many(desk["bundle"], DataKind.BS_TRAFFIC, values, np.repeat(mask[None], 20, axis=0),
                                envs, 2, 90)
            err = float(np.mean((draws[:, :, mask == 0] - values[:, None, mask == 0]) ** 2))
            c.check(err <= max(tol, 1e-12) * 1.5,
                    f"{task}: observed-position MSE {err:.2e} within 1.5 x reconstruction MSE")


# ---------------------------------------------------------------- 10 to 12


def test_c10_metrics_suite(criterion):
    with criterion(10) as c:
        c.check(mae([0, 1], [1, 1]) == 0.5, "mae([0,1],[1,1]) = 0.5")
        c.check(abs(nrmse([0, 2], [1, 1]) - 0.5) < 1e-15, "nrmse([0,2],[1,1]) = 0.5")
        c.check(mae([0.2, 0.4], [0.2, 0.4]) == 0 and nrmse([0, 2], [0, 2]) == 0, "identical inputs give 0")
        p, q = [0.5, 0.5], [0.25, 0.75]
        kl_pq = sum(a * math.log(a / b) for a, b in zip(p, q))
        kl_qp = sum(b * math.log(b / a) for a, b in zip(p, q))
        expected = math.sqrt((kl_pq + kl_qp) / 2)
        got = jsd_from_probs(np.array(p), np.array(q))
        c.check(abs(got - expected) < 1e-12, f"2-bin jsd {got:.10f} = brute force {expected:.10f}")
        rng = np.random.default_rng(10)
        worst_sym, worst_zero = 0.0, 0.0
        for _ in range(100):
            n = int(rng.integers(2, 300))
            y, y_hat = rng.random(n), rng.beta(2, 5, n)
            worst_sym = max(worst_sym, abs(jsd(y, y_hat) - jsd(y_hat, y)))
            worst_zero = max(worst_zero, abs(jsd(y, y)))
        c.check(worst_sym < 1e-12, f"symmetry on 100 inputs (max gap {worst_sym:.1e})")
        c.check(worst_zero < 1e-12, f"zero on identical over 100 inputs (max {worst_zero:.1e})")


PIPELINE = """
[data]
L = 32
n_train_per_kind = 24
n_val_per_kind = 4
n_test_per_kind = 8
[diffusion]
K = 10
[model]
c0 = 8
c_cond = 8
n_blocks = {n_blocks}
n_heads = 2
feature_dim = 4
vae_hidden = 16
[vae]
epochs = 3
[train]
epochs = 2
batch_size = 8
[eval]
n_eval_per_kind = 4
n_samples = 2
short_horizon = 4
long_horizon = 24
"""


def run_pipeline(directory, n_blocks: int = 1):
    cfg = directory / "run.cfg"
    cfg.write_text(PIPELINE.format(n_blocks=n_blocks))
    for command in ("datagen", "train", "eval"):
        assert main([command, "--config", str(cfg)]) == 0, command
    return directory / "reports" / "eval.csv", directory / "model.ckpt"


def test_c11_determinism(criterion, tmp_path):
    with criterion(11) as c:
        a = tmp_path / "a"
        b = tmp_path / "b"
        a.mkdir()
        b.mkdir()
        eval_a, ckpt_a = run_pipeline(a)
        eval_b, _ = run_pipeline(b)
        c.check(eval_a.read_bytes() == eval_b.read_bytes(), "two pipeline runs give byte-identical eval CSVs")
        bundle, header = load_checkpoint(ckpt_a)
        copy = tmp_path / "copy.ckpt"
        save_checkpoint(copy, bundle, {k: v for k, v in header.items() if k not in SAVED_BY_WRITER})
        c.check(copy.read_bytes() == ckpt_a.read_bytes(), "checkpoint save/load/save is byte-exact")


SAVED_BY_WRITER = ("format_version", "model", "schedule", "normalization", "has_model")


def test_c12_scaling_sanity(criterion, tmp_path):
    with criterion(12) as c:
        for n_blocks in (2, 4):
            d = tmp_path / f"blocks{n_blocks}"
            d.mkdir()
            eval_csv, _ = run_pipeline(d, n_blocks)
            rows = read_eval_csv(eval_csv)
            mae_rows = {r["data_kind"] + "/" + r["task"]: float(r["value"]) for r in rows if r["metric"] == "mae"}
            ok = len(rows) == 27 and all(np.isfinite(float(r["value"])) for r in rows)
            c.check(ok, f"N_blocks={n_blocks}: {len(rows)}-row grid, bs/short MAE {mae_rows['bs_traffic/short']:.3f}")
