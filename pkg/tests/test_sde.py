import math

import numpy as np
import pytest
import scipy.stats
from hypothesis import given
from hypothesis import strategies as st

from fracsde._rng import make_rng
from fracsde.errors import CapabilityError, ParameterError, SimulationError
from fracsde.sde import (
    InitialDistribution,
    NewtonConfig,
    SampleBatch,
    SdeSpec,
    TimeGrid,
    anisotropic_scales,
    drift_jacobian,
    drift_value,
    exact_marginal,
    forward_em_step,
    implicit_em_step,
    linear_parts,
    make_B,
    make_benchmark,
    read_trajectories,
    sample_initial,
    sigma_t_matrix,
    simulate,
    write_trajectories,
)
from fracsde.stable import StableLaw

from conftest import ecf_check


def custom(drift="zero", diffusion="zero", sigma=0.0, d=1, alpha=1.95, T=1.0, init=None):
    init = init or InitialDistribution("unit_gaussian", d)
    return SdeSpec(d, drift, diffusion, alpha, sigma, T, init)


# -- initial laws --------------------------------------------------------------

def test_unit_gaussian_covariance():
    b = sample_initial(InitialDistribution("unit_gaussian", 2), 200_000, seed=1)
    assert b.t == 0.0
    assert np.max(np.abs(np.cov(b.points.T) - np.eye(2))) < 0.02


@given(st.integers(1, 12), st.integers(0, 10**6))
def test_anisotropic_pattern(d, seed):
    lam = anisotropic_scales(d, seed)
    assert np.all((lam[0::2] >= 1) & (lam[0::2] <= 2))
    pairs = lam[: 2 * (d // 2)].reshape(-1, 2)
    assert np.all(pairs[:, 0] * pairs[:, 1] == pytest.approx(1.0, abs=1e-15))
    assert np.array_equal(lam, anisotropic_scales(d, seed))


def test_laplace_density_at_zero():
    init = InitialDistribution("laplace", 1)
    assert float(init.log_density(np.zeros(1))) == pytest.approx(math.log(0.5), abs=1e-15)


@pytest.mark.parametrize("kind", ["gaussian", "laplace", "mixture"])
def test_initial_log_density_normalised(kind):
    init = InitialDistribution(kind, 1, scales=[1.7], laplace_scales=[0.6])
    x = np.linspace(-40, 40, 400001)[:, None]
    mass = np.trapezoid(np.exp(init.log_density(x)), x[:, 0])
    assert mass == pytest.approx(1.0, abs=1e-6)


def test_initial_score_gaussian_only():
    init = InitialDistribution("gaussian", 2, scales=[2.0, 0.5])
    assert np.allclose(init.score(np.array([2.0, 2.0])), [-1.0, -4.0])
    with pytest.raises(CapabilityError):
        InitialDistribution("laplace", 2).score(np.ones(2))


def test_initial_validation():
    with pytest.raises(ParameterError):
        InitialDistribution("uniform", 2)
    with pytest.raises(ParameterError):
        InitialDistribution("gaussian", 2, scales=[1.0, -1.0])


def test_mixture_sampler_moments():
    init = InitialDistribution("mixture", 1)
    x = init.sample(make_rng(0), 400_000)
    # 0.5 * var(N(0,1)) + 0.5 * var(Lap(1)) = 0.5 + 1
    assert x.var() == pytest.approx(1.5, rel=0.02)


# -- catalog ---------------------------------------------------------------------

@pytest.mark.parametrize("tag", ["zero", "linear", "linear_alpha", "tanh_radial", "polynomial"])
def test_drift_jacobian_matches_fd(tag):
    d = 3
    X = np.random.default_rng(0).normal(size=(4, d))
    J = drift_jacobian(tag, X, 0.3, d, 1.7)
    h = 1e-6
    for i in range(d):
        e = np.zeros(d)
        e[i] = h
        fd = (drift_value(tag, X + e, 0.3, d, 1.7) - drift_value(tag, X - e, 0.3, d, 1.7)) / (2 * h)
        assert np.allclose(J[:, :, i], fd, atol=1e-8)


@pytest.mark.parametrize("name", ["basic", "complicated", "ou_levy", "tanh_drift",
                                  "polynomial_drift", "pure_levy"])
def test_drift_divergence_is_trace(name):
    spec = make_benchmark(name, 3)
    X = np.random.default_rng(1).normal(size=(5, 3))
    J = spec.drift_jacobian(X, 0.2)
    assert np.allclose(spec.drift_divergence(X), np.trace(J, axis1=1, axis2=2), atol=1e-12)


def test_make_B_is_q_gamma():
    B, Q, gam = make_B(4, seed=3)
    assert np.allclose(Q.T @ Q, np.eye(4), atol=1e-12)
    assert np.allclose(B, Q @ np.diag(gam))
    assert np.array_equal(B, make_B(4, seed=3)[0])


def test_spec_validation():
    with pytest.raises(ParameterError):
        custom(drift="cubic")
    with pytest.raises(ParameterError):
        custom(T=0.0)
    with pytest.raises(ParameterError):
        make_benchmark("nope", 2)


# -- grids and batches ----------------------------------------------------------

def test_time_grid_validation():
    g = TimeGrid.uniform(1.0, 4)
    assert np.allclose(g.dt, 0.25) and g.T == 1.0 and len(g) == 5
    for bad in ([0.0], [0.1, 0.2], [0.0, 0.5, 0.5], [0.0, np.inf]):
        with pytest.raises(ParameterError):
            TimeGrid(np.array(bad))


def test_sample_batch_rejects_non_finite():
    with pytest.raises(SimulationError):
        SampleBatch(0.0, np.array([[np.nan]]), "test")


# -- EM steps --------------------------------------------------------------------

def test_forward_step_trivial_cases():
    rng = make_rng(0)
    assert np.array_equal(forward_em_step(custom(), np.array([1.3]), 0.0, 0.1, rng), [1.3])
    x = forward_em_step(custom(drift="linear"), np.array([1.0]), 0.0, 0.1, rng)
    assert x[0] == pytest.approx(0.9, abs=1e-15)


def test_forward_step_rejects_bad_dt():
    with pytest.raises(ParameterError):
        forward_em_step(custom(), np.zeros(1), 0.0, 0.0, make_rng(0))


def test_forward_step_non_finite_drift():
    spec = custom(drift="polynomial")
    with pytest.raises(SimulationError) as exc:
        forward_em_step(spec, np.array([[1e200]]), 0.0, 0.1, make_rng(0))
    assert "state" in exc.value.diagnostics


def test_implicit_linear_closed_form():
    spec = custom(drift="linear", diffusion="identity", sigma=1.0, d=2)
    x, dt = np.array([[0.4, -1.2], [2.0, 0.1]]), 0.3
    fwd_noise = forward_em_step(spec, x, 0.0, dt, make_rng(5)) - (x - x * dt)
    y = implicit_em_step(spec, x, 0.0, dt, make_rng(5))
    assert np.allclose(y, (x + fwd_noise) / (1 + dt), atol=1e-12)


def test_implicit_small_dt_limit():
    spec = custom(drift="polynomial", sigma=1.0)
    x = np.array([[0.7]])
    for dt in (1e-4, 1e-6):
        noise = forward_em_step(custom(sigma=1.0), x, 0.0, dt, make_rng(1)) - x
        y = implicit_em_step(spec, x, 0.0, dt, make_rng(1))
        assert abs(y[0, 0] - (x[0, 0] + noise[0, 0])) < 10 * dt


def test_implicit_vs_forward_polynomial_order_dt():
    spec = custom(drift="polynomial", sigma=0.3, alpha=1.95)
    gaps = []
    for dt in (2e-3, 1e-3, 5e-4):
        x = np.linspace(-1.5, 1.5, 50)[:, None]
        a = forward_em_step(spec, x, 0.0, dt, make_rng(2))
        b = implicit_em_step(spec, x, 0.0, dt, make_rng(2))
        gaps.append(np.max(np.abs(a - b)))
    ratios = np.array(gaps[:-1]) / np.array(gaps[1:])
    # one-step gap is dt * (f(y) - f(x)) = O(dt^(1 + 1/alpha)) with shared noise
    assert np.all(ratios > 1.5) and np.all(ratios < 4.0)


@given(st.floats(1e-3, 100.0), st.floats(-10, 10).filter(lambda v: abs(v) > 1e-6))
def test_implicit_unconditionally_stable_linear(dt, x0):
    y = implicit_em_step(custom(drift="linear"), np.array([x0]), 0.0, dt, make_rng(0))
    assert abs(y[0]) < abs(x0)


def test_implicit_stable_where_forward_diverges():
    spec = make_benchmark("polynomial_drift", 1)
    grid = TimeGrid.uniform(1.0, 10)
    with pytest.raises(SimulationError):
        simulate(spec, "forward", grid, 2000, seed=0)
    out = simulate(spec, "implicit", grid, 2000, seed=0)
    assert np.all(np.isfinite(out[-1].points))


def test_implicit_newton_failure_falls_back_then_errors():
    spec = custom(drift="polynomial")
    cfg = NewtonConfig(max_iters=1, fixed_point_iters=3)
    with pytest.raises(SimulationError) as exc:
        implicit_em_step(spec, np.array([[30.0]]), 0.0, 0.5, make_rng(0), cfg)
    assert "rows" in exc.value.diagnostics


# -- simulate ------------------------------------------------------------------

def test_single_step_equals_forward_step():
    spec = make_benchmark("basic", 2)
    grid = TimeGrid.uniform(0.1, 1)
    out = simulate(spec, "forward", grid, 10, seed=7)
    rng = make_rng(7, (2, 0))
    x0 = spec.initial.sample(rng, 10)
    assert np.array_equal(out[0].points, x0)
    assert np.array_equal(out[1].points, forward_em_step(spec, x0, 0.0, 0.1, rng))


def test_zero_noise_decay():
    spec = custom(drift="linear", d=2)
    for steps in (100, 200):
        out = simulate(spec, "forward", TimeGrid.uniform(1.0, steps), 5, seed=0, save_at=[0, steps])
        err = np.max(np.abs(out[1].points - math.exp(-1.0) * out[0].points))
        assert err < 1.0 / steps


def test_simulate_deterministic_and_worker_invariant():
    spec = make_benchmark("tanh_drift", 3)
    grid = TimeGrid.uniform(0.3, 6)
    a = simulate(spec, "forward", grid, 300, seed=4, block_size=64)
    b = simulate(spec, "forward", grid, 300, seed=4, block_size=64, workers=3)
    for x, y in zip(a, b):
        assert np.array_equal(x.points, y.points)


def test_trajectory_dump_round_trip(tmp_path):
    spec = make_benchmark("ou_levy", 2)
    grid = TimeGrid.uniform(0.5, 4)
    out = simulate(spec, "forward", grid, 7, seed=2, save_at=[0, 2, 4])
    path = tmp_path / "traj.txt"
    write_trajectories(path, out, spec, "forward", grid, 2)
    header, times, data = read_trajectories(path)
    assert header == {"benchmark": "ou_levy", "d": "2", "alpha": "1.95", "seed": "2",
                      "scheme": "forward"}
    assert np.array_equal(times, grid.times)
    assert sorted(data) == [0, 2, 4]
    for b, k in zip(out, (0, 2, 4)):
        assert np.array_equal(data[k], b.points)


def test_pure_levy_em_matches_exact_ecf():
    spec = make_benchmark("pure_levy", 2, initial=InitialDistribution("point_mass", 2))
    out = simulate(spec, "forward", TimeGrid.uniform(1.0, 1000), 100_000, seed=3,
                   save_at=[1000])
    ks = [np.array(k) for k in ([0.5, 0.0], [0.0, 1.0], [0.7, -0.7], [1.5, 0.5])]
    assert ecf_check(out[0].points, ks, StableLaw(1.95, 1.0)) < 3.0


@pytest.mark.slow
@pytest.mark.parametrize("name", ["ou_levy", "basic", "complicated", "pure_levy"])
def test_em_matches_exact_marginal_ks(name):
    spec = make_benchmark(name, 2)
    steps = int(round(spec.T / 1e-3))
    em = simulate(spec, "forward", TimeGrid.uniform(spec.T, steps), 100_000, seed=11,
                  save_at=[steps])[0].points
    ex = exact_marginal(spec, spec.T, 100_000, seed=12).points
    dirs = np.random.default_rng(0).normal(size=(3, 2))
    for v in dirs:
        assert scipy.stats.ks_2samp(em @ v, ex @ v).pvalue > 0.01


# -- exact marginals -------------------------------------------------------------

def test_sigma_t_matrix_examples():
    S, R = sigma_t_matrix(np.zeros((3, 3)), 1.0)
    assert np.allclose(S, 4 / 3 * np.eye(3)) and np.allclose(R, 2 / math.sqrt(3) * np.eye(3))
    S, _ = sigma_t_matrix(np.eye(3), 1.0)
    assert np.allclose(S, 10 / 3 * np.eye(3))
    S, _ = sigma_t_matrix(np.random.default_rng(0).normal(size=(3, 3)), 0.0)
    assert np.array_equal(S, np.eye(3))


@given(st.integers(1, 8), st.floats(0.0, 1.0), st.integers(0, 1000))
def test_sigma_t_root_reconstruction(d, t, seed):
    B = np.random.default_rng(seed).normal(size=(d, d))
    S, R = sigma_t_matrix(B, t)
    assert np.linalg.norm(R @ R.T - S) / np.linalg.norm(S) < 1e-12


def test_complicated_total_covariance_at_zero_is_identity():
    spec = make_benchmark("complicated", 4)
    lp = linear_parts(spec, 0.0)
    assert np.allclose(lp.cov, 0.0) and lp.gamma == 0.0


def test_ou_levy_at_long_time():
    spec = make_benchmark("ou_levy", 3, T=20.0)
    lp = linear_parts(spec, 20.0)
    assert lp.decay < 1e-4
    assert lp.gamma == pytest.approx((1 - math.exp(-20.0)) ** (1 / 1.95), rel=1e-14)


def test_ou_levy_gamma_closed_form():
    spec = make_benchmark("ou_levy", 2)
    assert linear_parts(spec, 1.0).gamma == pytest.approx((1 - math.exp(-1)) ** (1 / 1.95),
                                                          rel=1e-14)
    assert linear_parts(spec, 1.0).decay == pytest.approx(math.exp(-1 / 1.95), rel=1e-14)


def test_basic_alpha_two_covariance():
    spec = make_benchmark("basic", 3, alpha=2.0)
    t = 0.7
    X = exact_marginal(spec, t, 400_000, seed=1).points
    expected = spec.initial.covariance + t * np.eye(3) + 2 * t ** (2 / 2.0) * np.eye(3)
    assert np.max(np.abs(np.cov(X.T) - expected)) < 0.05


def test_exact_marginal_rejects_nonlinear():
    with pytest.raises(CapabilityError):
        exact_marginal(make_benchmark("tanh_drift", 2), 0.1, 10)
    with pytest.raises(ParameterError):
        exact_marginal(make_benchmark("basic", 2), -0.1, 10)


def test_non_psd_root_is_an_error():
    from fracsde.sde import _sym_sqrt

    with pytest.raises(SimulationError):
        _sym_sqrt(np.diag([1.0, -1e-6]))
    assert np.allclose(_sym_sqrt(np.diag([1.0, -1e-14])), np.diag([1.0, 0.0]))
