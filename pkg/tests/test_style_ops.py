import numpy as np
import pytest

from helpers import fd_grad, rel_err, weighted_sum
from styleshift import style_ops as so
from styleshift import tensor_core as tc
from styleshift.autodiff import Var
from styleshift.errors import DimensionError, InsufficientBatchError

RNG = lambda seed: np.random.Generator(np.random.PCG64(seed))


# -- adain --------------------------------------------------------------------

def test_adain_identity_style():
    rng = RNG(0)
    content = rng.normal(size=(3, 4, 4))
    out = so.adain(content, tc.channel_stats(content))
    np.testing.assert_allclose(out, content, atol=1e-9)


def test_adain_forces_target_stats():
    rng = RNG(1)
    content = rng.normal(size=(2, 5, 5))
    target = tc.ChannelStats(mu=np.array([1.5, -0.5]), sigma=np.array([0.3, 2.0]))
    out = so.adain(content, target, eps_std=1e-9)
    np.testing.assert_allclose(tc.channel_mean(out), target.mu, atol=1e-6)
    np.testing.assert_allclose(tc.channel_std(out, 1e-9), target.sigma, atol=1e-6)


def test_adain_hand_case():
    content = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    target = tc.ChannelStats(mu=np.array([0.0]), sigma=np.array([1.0]))
    out = so.adain(content, target)
    expected = np.array([-1.3416, -0.4472, 0.4472, 1.3416])
    np.testing.assert_allclose(out.ravel(), expected, atol=1e-4)
    np.testing.assert_allclose(out.ravel(), (content.ravel() - 2.5) / np.sqrt(1.25 + 1e-12),
                               atol=1e-9)


def test_adain_idempotent_in_stats():
    rng = RNG(2)
    content = rng.normal(size=(2, 6, 6))
    target = tc.ChannelStats(mu=np.array([0.4, 1.0]), sigma=np.array([1.2, 0.5]))
    once = so.adain(content, target)
    twice = so.adain(once, target)
    np.testing.assert_allclose(tc.style_vector(twice), tc.style_vector(once), atol=1e-6)


def test_adain_channel_mismatch():
    with pytest.raises(DimensionError):
        so.adain(np.ones((2, 3, 3)), tc.ChannelStats(mu=np.zeros(3), sigma=np.ones(3)))


# -- mixstyle -----------------------------------------------------------------

def test_mixstyle_lambda_one_is_identity():
    rng = RNG(3)
    x = rng.normal(size=(4, 2, 3, 3))
    out = so.mixstyle(x, np.ones(4), rng.permutation(4))
    np.testing.assert_allclose(out, x, atol=1e-9)


def test_mixstyle_identity_partner_is_identity():
    rng = RNG(4)
    x = rng.normal(size=(4, 2, 3, 3))
    out = so.mixstyle(x, rng.uniform(size=4), np.arange(4))
    np.testing.assert_allclose(out, x, atol=1e-9)


def test_mixstyle_output_stats_are_interpolated():
    rng = RNG(5)
    x = rng.normal(size=(5, 3, 4, 4)) * 2.0 + 1.0
    lam = rng.uniform(size=5)
    partner = rng.permutation(5)
    out = so.mixstyle(x, lam, partner, eps_std=1e-9)
    mu = tc.batch_channel_mean(x)
    sig = tc.batch_channel_std(x, 1e-9)
    want_mu = lam[:, None] * mu + (1 - lam[:, None]) * mu[partner]
    want_sig = lam[:, None] * sig + (1 - lam[:, None]) * sig[partner]
    np.testing.assert_allclose(tc.batch_channel_mean(out), want_mu, atol=1e-6)
    np.testing.assert_allclose(tc.batch_channel_std(out, 1e-9), want_sig, atol=1e-6)


def test_mixstyle_rejects_bad_partner():
    with pytest.raises(ValueError):
        so.mixstyle(np.ones((3, 1, 2, 2)), np.ones(3), np.array([0, 0, 2]))


# -- dsu ----------------------------------------------------------------------

def test_dsu_identical_batch_is_identity():
    one = RNG(6).normal(size=(1, 2, 4, 4))
    x = np.repeat(one, 5, axis=0)
    out = so.dsu(x, RNG(7))
    np.testing.assert_allclose(out, x, atol=1e-9)


def test_dsu_zero_noise_is_identity():
    rng = RNG(8)
    x = rng.normal(size=(4, 3, 4, 4))
    zero = np.zeros((4, 3))
    out = so.dsu(x, None, noise=(zero, zero))
    np.testing.assert_allclose(out, x, atol=1e-9)


def test_dsu_needs_two_samples():
    with pytest.raises(InsufficientBatchError):
        so.dsu(np.ones((1, 2, 3, 3)), RNG(9))


def test_dsu_monte_carlo_spread():
    # over many draws, the std of the output means equals the batch spread
    rng = RNG(10)
    x = rng.normal(size=(6, 2, 3, 3)) * rng.uniform(0.5, 2.0, size=(6, 1, 1, 1))
    spread_mu = tc.batch_channel_mean(x).std(axis=0)
    draws = 10_000
    mus = np.empty((draws, 6, 2))
    gen = RNG(11)
    for t in range(draws):
        mus[t] = tc.batch_channel_mean(so.dsu(x, gen))
    observed = mus.std(axis=0)  # (B, C); every sample shares the same spread
    np.testing.assert_allclose(observed, np.broadcast_to(spread_mu, (6, 2)), rtol=0.05)


# -- efdm / efdmix -------------------------------------------------------------

def test_efdm_identity():
    rng = RNG(12)
    x = rng.normal(size=10)
    np.testing.assert_array_equal(so.efdm(x, x), x)


def test_efdm_output_multiset_is_style_multiset():
    rng = RNG(13)
    x, y = rng.normal(size=(2, 50))
    out = so.efdm(x, y)
    np.testing.assert_array_equal(np.sort(out), np.sort(y))


def test_efdm_hand_case():
    out = so.efdm([3.0, 1.0, 2.0], [10.0, 30.0, 20.0])
    np.testing.assert_array_equal(out, [30.0, 10.0, 20.0])


def test_efdm_rank_preservation():
    rng = RNG(14)
    x = rng.permutation(20).astype(float)
    out = so.efdm(x, rng.normal(size=20))
    order = np.argsort(x)
    assert np.all(np.diff(out[order]) >= 0)


def test_efdm_length_mismatch():
    with pytest.raises(DimensionError):
        so.efdm([1.0, 2.0], [1.0, 2.0, 3.0])


def test_efdmix_lambda_bounds():
    rng = RNG(15)
    x, y = rng.normal(size=(2, 12))
    np.testing.assert_array_equal(so.efdmix(x, y, 1.0), x)
    np.testing.assert_array_equal(so.efdmix(x, y, 0.0), so.efdm(x, y))


def test_efdmix_hand_case():
    out = so.efdmix([3.0, 1.0, 2.0], [10.0, 30.0, 20.0], 0.5)
    np.testing.assert_allclose(out, [16.5, 5.5, 11.0])


def test_efdmix_zero_lambda_multiset():
    rng = RNG(16)
    x, y = rng.normal(size=(2, 30))
    np.testing.assert_array_equal(np.sort(so.efdmix(x, y, 0.0)), np.sort(y))


def test_transforms_preserve_shape():
    rng = RNG(17)
    x = rng.normal(size=(4, 2, 3, 5))
    assert so.mixstyle(x, rng.uniform(size=4), rng.permutation(4)).shape == x.shape
    assert so.dsu(x, rng).shape == x.shape
    v = rng.normal(size=15)
    assert so.efdm(v, rng.normal(size=15)).shape == v.shape


# -- sample_lambda --------------------------------------------------------------

def test_sample_lambda_support_and_moments():
    rng = RNG(18)
    draws = np.array([so.sample_lambda(rng, 0.1) for _ in range(100_000)])
    assert np.all((draws >= 0.0) & (draws <= 1.0))
    assert abs(draws.mean() - 0.5) < 0.01
    # Var Beta(a,a) = a^2 / ((2a)^2 (2a+1)) = 1/(4(2a+1))
    assert abs(draws.var() - 1.0 / 4.8) < 0.01


def test_sample_lambda_rejects_bad_shape():
    with pytest.raises(ValueError):
        so.sample_lambda(RNG(19), 0.0)


# -- gradient contracts -----------------------------------------------------------

def test_efdm_var_gradient_contract():
    rng = RNG(20)
    xv, yv = rng.normal(size=(2, 9))
    w = rng.normal(size=9)
    x, y = Var(xv.copy()), Var(yv.copy())
    out = so.efdm_var(x, y)
    weighted_sum(out, w).backward()
    # straight-through: identity to content, nothing to style
    np.testing.assert_allclose(x.grad, w, atol=1e-12)
    assert y.grad is None
    # finite differences of the surrogate with the detached copy frozen
    base = out.value.copy()

    def surrogate(xx):
        return float(np.dot(w, base + (xx - xv)))

    assert rel_err(fd_grad(surrogate, xv.copy()), x.grad) < 1e-4


def test_efdmix_var_gradient_matches_finite_differences():
    rng = RNG(21)
    xv = rng.permutation(9).astype(float) + rng.normal(scale=0.01, size=9)
    yv = rng.permutation(9).astype(float) + rng.normal(scale=0.01, size=9)
    w = rng.normal(size=9)
    lam = 0.3
    x, y = Var(xv.copy()), Var(yv.copy())
    weighted_sum(so.efdmix_var(x, y, lam), w).backward()

    def f_x(xx):
        return float(np.dot(w, so.efdmix(xx, yv, lam)))

    def f_y(yy):
        return float(np.dot(w, so.efdmix(xv, yy, lam)))

    assert rel_err(fd_grad(f_x, xv.copy()), x.grad) < 1e-4
    assert rel_err(fd_grad(f_y, yv.copy()), y.grad) < 1e-4


def test_mixstyle_var_gradient_matches_finite_differences():
    rng = RNG(22)
    xv = rng.normal(size=(3, 2, 3, 3))
    lam = rng.uniform(size=3)
    partner = rng.permutation(3)
    w = rng.normal(size=xv.shape)
    x = Var(xv.copy())
    weighted_sum(so.mixstyle_var(x, lam, partner), w).backward()

    def f(xx):
        return float(np.sum(w * so.mixstyle(xx, lam, partner)))

    assert rel_err(fd_grad(f, xv.copy()), x.grad) < 1e-4


def test_dsu_var_gradient_matches_finite_differences():
    rng = RNG(23)
    xv = rng.normal(size=(3, 2, 3, 3)) * 1.5
    eps_mu = rng.normal(size=(3, 2))
    eps_sig = rng.normal(size=(3, 2))
    w = rng.normal(size=xv.shape)
    x = Var(xv.copy())
    weighted_sum(so.dsu_var(x, eps_mu, eps_sig), w).backward()

    def f(xx):
        return float(np.sum(w * so.dsu(xx, None, noise=(eps_mu, eps_sig))))

    assert rel_err(fd_grad(f, xv.copy()), x.grad) < 1e-4


def test_efdmix_hook_gradient_matches_finite_differences():
    rng = RNG(24)
    xv = rng.normal(size=(3, 2, 2, 3))
    partner = np.array([2, 0, 1])
    lam = rng.uniform(size=3)
    w = rng.normal(size=xv.shape)
    x = Var(xv.copy())
    out, _ = so.efdmix_hook(x, partner, lam)
    weighted_sum(out, w).backward()

    def f(xx):
        v, _ = so.efdmix_hook(Var(xx), partner, lam)
        return float(np.sum(w * v.value))

    assert rel_err(fd_grad(f, xv.copy()), x.grad) < 1e-4


def test_efdmix_hook_matches_vector_op():
    rng = RNG(25)
    xv = rng.normal(size=(2, 3, 2, 2))
    partner = np.array([1, 0])
    lam = rng.uniform(size=2)
    out, _ = so.efdmix_hook(Var(xv), partner, lam)
    for b in range(2):
        for c in range(3):
            expected = so.efdmix(xv[b, c].ravel(), xv[partner[b], c].ravel(), lam[b])
            np.testing.assert_allclose(out.value[b, c].ravel(), expected, atol=1e-12)


def test_dsu_clamps_negative_gamma_and_logs(caplog):
    import logging

    rng = RNG(26)
    x = rng.normal(size=(4, 2, 3, 3))
    huge_negative = np.full((4, 2), -100.0)
    with caplog.at_level(logging.WARNING, logger="styleshift.style_ops"):
        out = so.dsu(x, None, noise=(np.zeros((4, 2)), huge_negative))
    assert any("clamped" in rec.message for rec in caplog.records)
    # every channel's std collapses to the floor instead of going negative
    assert np.all(tc.batch_channel_std(out, 1e-9) < 1e-4)
    assert np.all(np.isfinite(out))


def test_lambda_bounds_validated():
    rng = RNG(27)
    x = rng.normal(size=(3, 1, 2, 2))
    with pytest.raises(ValueError):
        so.mixstyle(x, np.array([0.5, 1.2, 0.1]), np.arange(3))
    with pytest.raises(ValueError):
        so.efdmix(np.arange(4.0), np.arange(4.0), -0.1)


def test_efdmix_hook_partner_with_fixed_point():
    rng = RNG(28)
    xv = rng.normal(size=(3, 2, 2, 2))
    partner = np.array([0, 2, 1])  # sample 0 mixes with itself
    lam = np.array([0.3, 0.6, 0.9])
    w = rng.normal(size=xv.shape)
    x = Var(xv.copy())
    out, _ = so.efdmix_hook(x, partner, lam)
    np.testing.assert_allclose(out.value[0], xv[0], atol=1e-12)  # self-mix
    weighted_sum(out, w).backward()

    def f(xx):
        v, _ = so.efdmix_hook(Var(xx), partner, lam)
        return float(np.sum(w * v.value))

    assert rel_err(fd_grad(f, xv.copy()), x.grad) < 1e-4
