import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from mobiforge.datagen import DataKind, gen_app_traffic, gen_bs_traffic, gen_rsrp
from mobiforge.vae import (EnvVAE, build_vaes, encode_env, kl_to_standard_normal, pretrain_vae, pretrain_vaes,
                           reconstruction_mse, vae_loss)


def test_kl_matching_gaussians_zero():
    assert float(kl_to_standard_normal(torch.zeros(1, 4), torch.zeros(1, 4))) == 0.0


def test_kl_unit_mean_hand_value():
    assert float(kl_to_standard_normal(torch.ones(1, 1), torch.zeros(1, 1))) == pytest.approx(0.5)


def test_kl_nonnegative_on_random_inputs():
    gen = torch.Generator().manual_seed(0)
    mu = 3 * torch.randn(10_000, 8, generator=gen, dtype=torch.float64)
    logvar = 4 * torch.randn(10_000, 8, generator=gen, dtype=torch.float64)
    assert float(kl_to_standard_normal(mu, logvar).min()) >= 0.0


@settings(max_examples=100, deadline=None)
@given(mu=st.floats(-5, 5), logvar=st.floats(-8, 8))
def test_kl_zero_only_at_standard_normal(mu, logvar):
    kl = float(kl_to_standard_normal(torch.tensor([[mu]], dtype=torch.float64),
                                     torch.tensor([[logvar]], dtype=torch.float64)))
    assert kl >= 0.0
    if abs(mu) > 1e-3 or abs(logvar) > 1e-3:
        assert kl > 0.0


def test_deterministic_mode_returns_mean():
    vae = EnvVAE(DataKind.RSRP, 8)
    env = torch.randn(2, 16, 4)
    mu, _ = vae.moments(env)
    out = encode_env(env, vae, eps=torch.randn(2, 16, 8), deterministic=True)
    assert torch.equal(out, mu)


@pytest.mark.parametrize("kind,shape", [(DataKind.BS_TRAFFIC, (3, 8)), (DataKind.APP_TRAFFIC, (3, 16, 5)),
                                        (DataKind.RSRP, (3, 16, 4))])
def test_unified_latent_shape(kind, shape):
    vae = EnvVAE(kind, 8)
    out = encode_env(torch.randn(*shape), vae, L=16)
    assert out.shape == (3, 16, 8)


def test_static_env_tiled():
    vae = EnvVAE(DataKind.BS_TRAFFIC, 8)
    out = encode_env(torch.randn(2, 8), vae, L=10)
    assert torch.equal(out, out[:, :1].expand_as(out))


@pytest.mark.parametrize("floor,tol", [(-10.0, 5 * math.exp(-5.0)), (-40.0, 1e-6)])
def test_vanishing_sigma_limit(floor, tol):
    vae = EnvVAE(DataKind.RSRP, 8, logvar_clamp=(floor, 10.0))
    with torch.no_grad():
        last = vae.encoder[-1]
        last.weight[8:] = 0.0
        last.bias[8:] = -100.0  # pinned to the clamp floor
    env = torch.randn(2, 16, 4)
    eps = torch.randn(2, 16, 8).clamp(-5, 5)
    a = encode_env(env, vae, eps=eps, deterministic=False)
    b = encode_env(env, vae, deterministic=True)
    assert float((a - b).abs().max()) <= tol


def test_kind_mismatch():
    vae = EnvVAE(DataKind.BS_TRAFFIC, 8)
    with pytest.raises(ValueError):
        encode_env(torch.randn(2, 8), vae, L=4, kind=DataKind.RSRP)
    with pytest.raises(ValueError):
        vae.moments(torch.randn(2, 4))


def test_perfect_reconstruction_leaves_kl():
    vae = EnvVAE(DataKind.BS_TRAFFIC, 4)

    class Echo(torch.nn.Module):
        def forward(self, e):
            return env

    env = torch.zeros(1, 8)
    vae.decoder = Echo()
    eps = torch.randn(1, 4)
    loss, recon, kl = vae_loss(env, vae, eps, return_parts=True)
    assert float(recon) == 0.0
    assert float(loss) == pytest.approx(float(kl))


def test_zero_epochs_unchanged():
    vae = EnvVAE(DataKind.BS_TRAFFIC, 8)
    before = {k: v.clone() for k, v in vae.state_dict().items()}
    envs = np.stack([s.env.data for s in gen_bs_traffic(0, 10)])
    assert pretrain_vae(vae, envs, epochs=0) == []
    for k, v in vae.state_dict().items():
        assert torch.equal(v, before[k])


def test_pretraining_deterministic_and_finite():
    envs = np.stack([s.env.data for s in gen_bs_traffic(0, 50)])
    runs = []
    for _ in range(2):
        vae = EnvVAE(DataKind.BS_TRAFFIC, 8)
        vae.load_state_dict(build_vaes(8)["BS_TRAFFIC"].state_dict())
        runs.append(pretrain_vae(vae, envs, epochs=5, seed=3))
    assert runs[0] == runs[1]
    assert all(np.isfinite(runs[0]))


def test_missing_kind_named():
    samples = gen_bs_traffic(0, 4, 16) + gen_rsrp(0, 4, 16)
    with pytest.raises(ValueError, match="APP_TRAFFIC"):
        pretrain_vaes(samples, build_vaes(8), epochs=1)


def test_bs_env_reconstruction_budget():
    train = np.stack([s.env.data for s in gen_bs_traffic(0, 2000)])
    held = np.stack([s.env.data for s in gen_bs_traffic(1, 500)])
    vae = build_vaes(32)["BS_TRAFFIC"]
    pretrain_vae(vae, train, epochs=200, kl_weight=1e-3)
    assert reconstruction_mse(vae, held) < 0.05
