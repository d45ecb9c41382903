import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from bikc.backbone import KP_B, KP_W, BackboneSpec, sinusoidal_features
from bikc.consistency import (
    CtConfig,
    boundary_scalings,
    consistency_fn,
    ct_loss,
    curriculum_n,
    init_cm_policy,
    karras_sigmas,
    load_cm,
    make_backbone,
    noise_features,
    pseudo_huber,
    sample_onestep,
    save_cm,
    train_cm,
)
from bikc.data import ChunkArrays, NormStats
from bikc.errors import ConfigurationError, ContractError
from bikc.nn import TrainSchedule, make_rng, max_relative_error, mlp_forward, numerical_gradient


def tiny_policy(seed=0, kp_dim=0, H_a=2, A=2, O=3, widths=(8,), **cfg_kw):
    cfg = CtConfig(action_horizon=H_a, chunk_len=max(H_a, 2), noise_emb_dim=4, keypose_emb_dim=3, **cfg_kw)
    net = make_backbone(cfg, A, O, kp_dim, hidden_widths=widths)
    stats = NormStats.identity(O, A, 6)
    return init_cm_policy(net, cfg, stats, seed)


def tiny_batch(policy, b=4, seed=0):
    rng = make_rng(seed)
    net = policy.net
    return ChunkArrays(rng.uniform(-1, 1, (b, net.obs_horizon * net.obs_dim)),
                       rng.uniform(-1, 1, (b, max(net.keypose_dim, 1)))[:, : net.keypose_dim],
                       rng.uniform(-1, 1, (b, net.action_horizon, net.action_dim)))


# --- schedule -----------------------------------------------------------------


def test_karras_endpoints_defaults():
    s = karras_sigmas(161)
    assert s.sigmas[0] == 0.002 and s.sigmas[-1] == 80.0
    assert s.N == 161


def test_karras_midpoint_matches_closed_form():
    # 40-digit decimal evaluation of the closed form, N=11, i=6
    assert karras_sigmas(11).sigmas[5] == pytest.approx(2.515218976147158578827532275841355908380, rel=1e-13)


@given(st.integers(2, 161))
def test_karras_endpoints_and_monotone(n):
    s = karras_sigmas(n).sigmas
    assert abs(s[0] - 0.002) <= 1e-12 and abs(s[-1] - 80.0) <= 1e-12
    assert np.all(np.diff(s) > 0)


def test_karras_rejects_bad_requests():
    with pytest.raises(ContractError):
        karras_sigmas(1)
    with pytest.raises(ContractError):
        karras_sigmas(5, eps=100.0)


def test_curriculum_examples():
    assert curriculum_n(0, CtConfig(total_iters=1000)) == 11
    cfg = CtConfig(total_iters=1000)
    assert curriculum_n(199, cfg) == 11
    assert curriculum_n(200, cfg) == 21
    assert curriculum_n(999, cfg) == 161
    eq = CtConfig(s0=7, s1=7, total_iters=50)
    assert {curriculum_n(k, eq) for k in range(50)} == {8}


@pytest.mark.parametrize("K", [10, 1000])
def test_curriculum_closed_form_sweep(K):
    cfg = CtConfig(total_iters=K)
    kp = math.floor(K / (math.log2(math.floor(160 / 10)) + 1))
    vals = [curriculum_n(k, cfg) for k in range(K)]
    assert vals == [min(10 * 2 ** (k // kp), 160) + 1 for k in range(K)]
    assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_curriculum_small_K_guard():
    cfg = CtConfig(total_iters=3)
    assert [curriculum_n(k, cfg) for k in range(3)] == [11, 21, 41]


def test_config_errors():
    with pytest.raises(ConfigurationError):
        CtConfig(s0=20, s1=10)
    with pytest.raises(ConfigurationError):
        CtConfig(action_horizon=8, chunk_len=4)
    with pytest.raises(ConfigurationError):
        CtConfig(huber_c=0.0)


# --- parameterisation ---------------------------------------------------------


def test_boundary_scalings_values():
    cs, co = boundary_scalings(0.002, 0.002, 0.5)
    assert (float(cs), float(co)) == (1.0, 0.0)
    cs, co = boundary_scalings(0.502, 0.002, 0.5)
    assert float(cs) == pytest.approx(0.5, abs=1e-15)
    assert float(co) == pytest.approx(0.3528469923239135901370953762, abs=1e-14)
    cs, co = boundary_scalings(1e6, 0.002, 0.5)
    assert float(cs) < 1e-3 and abs(float(co) - 0.5) < 1e-3


def test_pseudo_huber_values():
    x = np.zeros((1, 3))
    assert pseudo_huber(x, x, 0.0064)[0] == 0.0
    y = np.array([[0.6, 0.8, 0.0]])
    assert pseudo_huber(y, x, 0.0064)[0] == pytest.approx(0.9936205, abs=1e-6)


@given(seed=st.integers(0, 10_000), sigma_scale=st.floats(0.0, 1.0))
@settings(max_examples=30, deadline=None)
def test_identity_at_eps_for_any_params(seed, sigma_scale):
    pol = tiny_policy(seed, kp_dim=6)
    rng = make_rng(seed)
    for name, v in pol.params.items():
        pol.params[name] = v + sigma_scale * rng.normal(size=v.shape)
    x = rng.normal(size=(2, 2)) * 5
    out = consistency_fn(pol, x, pol.cfg.eps, rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6))
    assert np.max(np.abs(out - x)) <= 1e-12


def test_zero_network_gives_skip_only():
    pol = tiny_policy()
    pol.params = pol.params.zeros_like()
    x = make_rng(1).normal(size=(2, 2))
    cs, _ = boundary_scalings(3.0, pol.cfg.eps, pol.cfg.sigma_data)
    np.testing.assert_allclose(consistency_fn(pol, x, 3.0, np.zeros(6)), cs * x, atol=1e-15)


def test_consistency_fn_composition():
    pol = tiny_policy(0, kp_dim=6)
    rng = make_rng(2)
    x, obs, kp = rng.normal(size=(2, 2)), rng.uniform(-1, 1, 6), rng.uniform(-1, 1, 6)
    sigma, sd = 1.0, pol.cfg.sigma_data
    cs, co = boundary_scalings(sigma, pol.cfg.eps, sd)
    emb = kp @ pol.params[KP_W] + pol.params[KP_B]
    inp = np.concatenate([x.ravel() / math.sqrt(sigma**2 + sd**2), sinusoidal_features(math.log(sigma) / 4, 4)[0], obs, emb])
    manual = cs * x.ravel() + co * mlp_forward(pol.params, pol.net.mlp, inp)
    np.testing.assert_allclose(consistency_fn(pol, x, sigma, obs, kp).ravel(), manual, atol=1e-13)


def test_consistency_fn_sigma_range_and_nfe():
    pol = tiny_policy()
    with pytest.raises(ContractError):
        consistency_fn(pol, np.zeros((2, 2)), 100.0, np.zeros(6))
    consistency_fn(pol, np.zeros((2, 2)), 1.0, np.zeros(6))
    assert pol.nfe == 1


def test_noise_features_layout():
    f = noise_features(np.array([1.0]), 6)
    assert f.shape == (1, 6)
    np.testing.assert_allclose(f[0, :3], 0.0, atol=1e-15)
    np.testing.assert_allclose(f[0, 3:], 1.0, atol=1e-15)


# --- loss -----------------------------------------------------------------------


def test_lambda_times_gap_is_one():
    s = karras_sigmas(11).sigmas
    gaps = np.diff(s)
    np.testing.assert_allclose((1.0 / gaps) * gaps, 1.0, rtol=1e-15)


@pytest.mark.parametrize("kp_dim", [0, 6])
@pytest.mark.parametrize("seed", range(3))
def test_ct_loss_gradient_matches_fd(seed, kp_dim):
    pol = tiny_policy(seed, kp_dim=kp_dim, total_iters=100)
    batch = tiny_batch(pol, seed=seed)
    k = 10 * seed
    loss, grads = ct_loss(pol, batch, k, make_rng(seed + 7))
    assert loss >= 0

    def f(p):
        pol2 = tiny_policy(seed, kp_dim=kp_dim, total_iters=100)
        pol2.params, pol2.target_params = p, pol.target_params
        return ct_loss(pol2, batch, k, make_rng(seed + 7))[0]

    num = numerical_gradient(f, pol.params)
    assert max_relative_error(grads, num) < 1e-4


def test_ct_gradient_isolated_from_target():
    pol = tiny_policy(1, total_iters=100)
    batch = tiny_batch(pol, seed=1)
    loss0, g0 = ct_loss(pol, batch, 0, make_rng(3))
    saved = pol.target_params
    pol.target_params = saved.unflatten(saved.flatten() + 0.3)
    loss1, _ = ct_loss(pol, batch, 0, make_rng(3))
    assert loss1 != loss0
    pol.target_params = pol.params.copy()
    loss2, g2 = ct_loss(pol, batch, 0, make_rng(3))
    assert loss2 == loss0 and max_relative_error(g0, g2) == 0.0


def test_ct_loss_empty_batch():
    pol = tiny_policy()
    with pytest.raises(ContractError):
        ct_loss(pol, ChunkArrays(np.zeros((0, 6)), np.zeros((0, 0)), np.zeros((0, 2, 2))), 0, make_rng(0))


@given(seed=st.integers(0, 1000))
@settings(max_examples=15, deadline=None)
def test_ct_loss_nonnegative(seed):
    pol = tiny_policy(seed % 5, total_iters=50)
    assert ct_loss(pol, tiny_batch(pol, seed=seed), seed % 50, make_rng(seed))[0] >= 0


# --- training and sampling -------------------------------------------------------


def test_train_zero_iters_returns_init():
    pol0 = tiny_policy(total_iters=0)
    pol, curve = train_cm(tiny_batch(pol0), pol0.cfg, TrainSchedule(seed=0), pol0.net, pol0.stats)
    assert curve == [] and pol.params.equals(pol0.params)


def test_train_curve_and_target_copy():
    pol0 = tiny_policy(total_iters=25)
    pol, curve = train_cm(tiny_batch(pol0, b=16), pol0.cfg, TrainSchedule(lr0=1e-3), pol0.net, pol0.stats)
    assert len(curve) == 25 and set(curve[0]) == {"iter", "loss", "lr", "N_k"}
    assert pol.target_params.equals(pol.params)
    assert pol.target_params is not pol.params


def test_train_rejects_iters_mismatch():
    pol0 = tiny_policy(total_iters=10)
    with pytest.raises(ConfigurationError):
        train_cm(tiny_batch(pol0), pol0.cfg, TrainSchedule(iters=5), pol0.net, pol0.stats)


def test_sample_onestep_shape_nfe_and_stats():
    pol = tiny_policy(kp_dim=6, H_a=8, A=6, O=12)
    obs = np.zeros((2, 12))
    out = sample_onestep(pol, obs, np.zeros(6), make_rng(0))
    assert out.shape == (8, 6) and pol.nfe == 1
    batch = sample_onestep(pol, obs, np.zeros(6), make_rng(0), n=5)
    assert batch.shape == (5, 8, 6) and pol.nfe == 2
    assert np.all(np.abs(out) <= 1.0)
    pol.stats = None
    with pytest.raises(ConfigurationError):
        sample_onestep(pol, obs, np.zeros(6))


def test_sample_needs_keypose_when_conditioned():
    pol = tiny_policy(kp_dim=6)
    with pytest.raises(ConfigurationError):
        sample_onestep(pol, np.zeros((2, 3)), None)


@pytest.mark.parametrize("seed", range(3))
def test_toy_loss_decreases(seed):
    from bikc.toy import toy_dataset

    cfg = CtConfig(total_iters=2000, obs_horizon=1, action_horizon=1, chunk_len=1)
    net = make_backbone(cfg, 1, 1, 0, hidden_widths=(32, 32))
    _, curve = train_cm(toy_dataset(1, 512, seed), cfg, TrainSchedule(batch_size=32, lr0=2e-3, seed=seed), net,
                        NormStats.identity(1, 1, 6))
    losses = [c["loss"] for c in curve]
    assert np.mean(losses[-100:]) < np.mean(losses[:100])


def test_checkpoint_roundtrip(tmp_path):
    pol = tiny_policy(3, kp_dim=6)
    path = save_cm(tmp_path / "cm.ckpt", pol)
    back = load_cm(path)
    assert back.net == pol.net and back.cfg == pol.cfg
    for name, v in pol.params.items():
        np.testing.assert_allclose(back.params[name], v.astype(np.float32), rtol=0, atol=0)
    assert back.target_params.equals(back.params)
    header = path.read_bytes().split(b"\n", 1)[0].decode()
    for key in ("eps", "sigma_max", "rho", "sigma_data", "huber_c", "s0", "s1", "K"):
        assert f'"{key}"' in header
