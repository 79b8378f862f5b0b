"""
Tests for the displacement distributions and their losses
"""

import math

import numpy as np
import pytest
from scipy import integrate, optimize, special

from dfloc import autodiff as ad
from dfloc import distributions as dist
from dfloc.errors import ContractError, DegeneratePredictionError, DomainError


def unit(angle):
    return (math.cos(angle), math.sin(angle))


def central_difference(fn, x, eps=1e-6):
    return (fn(x + eps) - fn(x - eps)) / (2.0 * eps)


@pytest.mark.parametrize("kappa", [0.0, 1e-3, 0.5, 1.0, 5.0, 14.9, 15.0, 40.0, 200.0, 700.0])
def test_log_bessel_i0_matches_scipy(kappa):
    expected = math.log(special.i0e(kappa)) + kappa
    assert abs(dist.log_bessel_i0(kappa) - expected) < 1e-10 * max(1.0, abs(expected))


@pytest.mark.parametrize("kappa", [0.0, 0.3, 2.0, 10.0, 20.0, 60.0])
def test_bessel_i0_matches_scipy(kappa):
    expected = special.i0(kappa)
    assert abs(dist.bessel_i0(kappa) - expected) / expected < 1e-10


def test_bessel_i0_rejects_negative():
    with pytest.raises(DomainError):
        dist.bessel_i0(-1.0)


@pytest.mark.parametrize("kappa", [0.0, 0.5, 2.0, 10.0, 50.0])
def test_vmf_density_integrates_to_one(kappa):
    mu = unit(0.7)
    total, _ = integrate.quad(lambda a: dist.vmf_density(unit(a), mu, kappa),
                              -math.pi, math.pi, points=[0.7], limit=200)
    assert abs(total - 1.0) < 1e-6


def test_vmf_uniform_at_zero_concentration():
    assert abs(dist.vmf_density((1.0, 0.0), (0.0, 1.0), 0.0) - 1.0 / (2.0 * math.pi)) < 1e-15


def test_angmf_trivial_values():
    # setup: kappa = 0 leaves only log(1 + 1)
    # -------------------------------------------------------------------------
    for angle in np.linspace(-3.0, 3.0, 7):
        assert abs(dist.angmf_loss(unit(angle), 0.0, (1.0, 0.0)) - math.log(2.0)) < 1e-12

    aligned = dist.angmf_loss((1.0, 0.0), 1.0, (1.0, 0.0))
    assert abs(aligned - (-math.log(2.0) + math.log1p(math.exp(-math.pi)))) < 1e-3


def test_angmf_is_finite_at_antipodes():
    value = dist.angmf_loss((1.0, 0.0), 3.0, (-1.0, 0.0))
    assert math.isfinite(value)
    assert abs(value - (-math.log(10.0) + 3.0 * math.pi + math.log1p(math.exp(-3.0 * math.pi)))) < 1e-2


@pytest.mark.parametrize("kappa", [0.5, 2.0, 10.0])
def test_angmf_grows_with_angular_error(kappa):
    angles = np.linspace(0.0, math.pi - 1e-3, 500)
    losses = np.array([dist.angmf_loss((1.0, 0.0), kappa, unit(a)) for a in angles])
    assert np.all(np.diff(losses) > 0.0)


@pytest.mark.parametrize("kappa", [0.0, 1.0, 20.0])
def test_angmf_is_rotation_invariant(kappa):
    rng = np.random.default_rng(4)
    for _ in range(50):
        a, error, phi = rng.uniform(-math.pi, math.pi, 3)
        base = dist.angmf_loss(unit(a), kappa, unit(a + error))
        rotated = dist.angmf_loss(unit(a + phi), kappa, unit(a + error + phi))
        assert abs(base - rotated) < 1e-6


@pytest.mark.parametrize("angle", [math.pi / 8, math.pi / 4, math.pi / 2])
def test_angmf_best_concentration_for_a_fixed_error(angle):
    # setup: grid search over kappa against the zero of the analytic slope
    # -------------------------------------------------------------------------
    mu, gt = (1.0, 0.0), unit(angle)
    grid = np.linspace(0.0, 50.0, 50001)
    losses = np.array([dist.angmf_loss(mu, k, gt) for k in grid])
    best = grid[int(np.argmin(losses))]

    def slope(k):
        return dist.angmf_loss_grad(mu, k, gt)['kappa']

    # at a right angle the loss is flat at kappa = 0 and rises from there
    root = optimize.brentq(slope, 1e-6, 50.0) if slope(1e-6) < 0.0 else 0.0
    assert abs(best - root) < 2e-3
    assert abs(slope(best)) < 1e-2
    if angle < math.pi / 2:
        assert best > 0.0


def test_angmf_contract():
    with pytest.raises(ContractError):
        dist.angmf_loss((2.0, 0.0), 1.0, (1.0, 0.0))
    with pytest.raises(DomainError):
        dist.angmf_loss((1.0, 0.0), -1.0, (1.0, 0.0))


def test_angmf_gradient():
    rng = np.random.default_rng(0)
    for _ in range(100):
        kappa = rng.uniform(0.0, 20.0)
        a, b = rng.uniform(-math.pi, math.pi, 2)
        if abs(math.cos(a - b)) > 0.999:
            continue
        mu, gt = np.array(unit(a)), np.array(unit(b))
        grads = dist.angmf_loss_grad(mu, kappa, gt)

        fd_kappa = central_difference(lambda k: dist.angmf_loss(mu, k, gt), kappa)
        assert abs(grads['kappa'] - fd_kappa) < 1e-5 * max(1.0, abs(fd_kappa))
        for i in range(2):
            def along(t, i=i):
                m = mu.copy()
                m[i] = t
                return dist.angmf_loss(m, kappa, gt, validate=False)
            fd = central_difference(along, mu[i])
            assert abs(grads['mu_theta'][i] - fd) < 1e-4 * max(1.0, abs(fd))


def test_gaussian_nll_values_and_gradient():
    assert dist.gaussian_nll(2.0, 2.0, 1.0) == 0.0
    assert abs(dist.full_gaussian_nll(2.0, 2.0, 1.0) - 0.5 * math.log(2.0 * math.pi)) < 1e-15
    assert abs(dist.gaussian_nll(3.0, 1.0, 2.0) - 0.5 * (2.0 + math.log(2.0))) < 1e-15
    with pytest.raises(DomainError):
        dist.gaussian_nll(1.0, 1.0, 0.0)

    rng = np.random.default_rng(1)
    for _ in range(100):
        r, mu, s2 = rng.uniform(0.0, 2.0), rng.uniform(0.0, 2.0), rng.uniform(0.05, 3.0)
        grads = dist.gaussian_nll_grad(r, mu, s2)
        assert abs(grads['mu_r'] - central_difference(lambda m: dist.gaussian_nll(r, m, s2), mu)) < 1e-5
        assert abs(grads['sigma2_r'] - central_difference(lambda s: dist.gaussian_nll(r, mu, s), s2)) < 1e-4


@pytest.mark.parametrize("sigma2", [0.1, 1.0, 3.0])
def test_gaussian_nll_is_smallest_at_the_true_distance(sigma2):
    r_gt = 1.3
    offsets = np.linspace(0.01, 1.0, 100)
    mus = r_gt + np.concatenate([-offsets[::-1], [0.0], offsets])
    losses = np.array([dist.gaussian_nll(r_gt, mu, sigma2) for mu in mus])
    assert int(np.argmin(losses)) == 100
    assert np.all(np.diff(losses[:101]) < 0.0)
    assert np.all(np.diff(losses[100:]) > 0.0)
    assert dist.gaussian_nll_grad(r_gt, r_gt, sigma2)['mu_r'] == 0.0


def test_orientation_loss():
    assert abs(dist.orientation_loss((3.0, 0.0), (1.0, 0.0))) < 1e-15
    assert abs(dist.orientation_loss((0.0, 2.0), (0.0, -1.0)) - 2.0) < 1e-15
    with pytest.raises(DegeneratePredictionError):
        dist.orientation_loss((0.0, 0.0), (1.0, 0.0))

    rng = np.random.default_rng(2)
    for _ in range(100):
        p = rng.standard_normal(2)
        g = np.array(unit(rng.uniform(-math.pi, math.pi)))
        analytic = dist.orientation_loss_grad(p, g)
        for i in range(2):
            def along(t, i=i):
                v = p.copy()
                v[i] = t
                return dist.orientation_loss(v, g)
            assert abs(analytic[i] - central_difference(along, p[i])) < 1e-5


def test_build_target_masks_tiny_displacements():
    target = dist.build_target((0.0, 0.0), (0.3, 0.4))
    assert abs(target.r_gt - 0.5) < 1e-15
    assert np.allclose(target.theta_gt, (0.6, 0.8), atol=1e-15)
    assert not target.masked

    near = dist.build_target((0.2, 0.2), (0.2 + 1e-7, 0.2))
    assert near.masked

    d = dist.DisplacementDistribution(0.0, 1.0, (1.0, 0.0), 5.0)
    parts = dist.loss_components(d, near)
    assert parts['loss_theta'] == 0.0
    assert dist.total_loss(d, near) == parts['loss_r']


def test_distribution_contract():
    with pytest.raises(ContractError):
        dist.DisplacementDistribution(-0.1, 1.0, (1.0, 0.0), 1.0)
    with pytest.raises(ContractError):
        dist.DisplacementDistribution(0.1, 0.0, (1.0, 0.0), 1.0)
    with pytest.raises(ContractError):
        dist.DisplacementDistribution(0.1, 1.0, (1.0, 1.0), 1.0)


def test_head_parameterization():
    raw = np.array([[0.0, 50.0], [-3.0, -50.0]])
    direction = np.array([[3.0, 4.0, 0.0], [0.0, 0.0, 2.0]])
    arrays = dist.heads_to_arrays(raw, direction)
    assert abs(arrays['mu_r'][0] - math.log(2.0)) < 1e-15
    assert abs(arrays['sigma2_r'][0] - math.exp(10.0)) < 1e-6
    assert abs(arrays['sigma2_r'][1] - math.exp(-10.0)) < 1e-15
    assert np.allclose(arrays['mu_theta'][0], (0.6, 0.8), atol=1e-15)
    assert np.array_equal(arrays['mu_theta'][1], (1.0, 0.0))
    assert np.all(arrays['kappa'] > 0.0)

    single = dist.head_to_distribution([0.0, 0.0, 0.0, -2.0, 1.0])
    assert single.mu_theta == (0.0, -1.0)
    assert single.sigma2_r == 1.0


def test_tape_heads_share_the_short_direction_fallback():
    tape = ad.Tape()
    direction = np.array([[3.0, 4.0, 0.0], [1e-10, -1e-10, 0.0], [0.0, 0.0, 1.0]])
    heads = dist.heads_to_tensors(tape.leaf(np.zeros((3, 2))), tape.leaf(direction))
    expected = dist.heads_to_arrays(np.zeros((3, 2)), direction)['mu_theta']
    assert np.abs(heads.mu_theta.value - expected).max() < 1e-15
    assert np.array_equal(heads.mu_theta.value[1], (1.0, 0.0))
    assert np.allclose(np.linalg.norm(heads.mu_theta.value, axis=1), 1.0, atol=1e-15)


def test_tape_losses_agree_with_scalar_losses():
    rng = np.random.default_rng(3)
    b = 16
    distance_raw = rng.standard_normal((b, 2))
    direction_raw = rng.standard_normal((b, 3))
    p_gamma = rng.standard_normal((b, 2))
    q0 = rng.uniform(-1.0, 1.0, (b, 2))
    q_gt = rng.uniform(-1.0, 1.0, (b, 2))
    q_gt[0] = q0[0]
    targets = [dist.build_target(a, c) for a, c in zip(q0, q_gt)]
    g_gamma = np.array([unit(a) for a in rng.uniform(-math.pi, math.pi, b)])

    tape = ad.Tape()
    heads = dist.heads_to_tensors(tape.leaf(distance_raw), tape.leaf(direction_raw))
    terms = dist.total_loss_tensor(
        heads,
        np.array([t.r_gt for t in targets]),
        np.array([t.theta_gt for t in targets]),
        np.array([0.0 if t.masked else 1.0 for t in targets]),
        tape.leaf(p_gamma), g_gamma,
    )

    expected = 0.0
    for i, target in enumerate(targets):
        d = dist.head_to_distribution(np.concatenate([distance_raw[i], direction_raw[i]]))
        expected += dist.total_loss(d, target, (p_gamma[i], g_gamma[i]))
    assert targets[0].masked
    assert abs(float(terms['total'].value) - expected / b) < 1e-10
