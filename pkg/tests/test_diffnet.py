import math

import jax
import jax.numpy as jnp
import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fracsde.diffnet import (
    AdamState,
    Mlp,
    TrainLog,
    TrainPlan,
    adam_init,
    adam_step,
    divergence,
    fit,
    grad_divergence,
    init_mlp,
    input_derivatives,
    load_checkpoint,
    mlp_forward,
    mlp_jet,
    mlp_sizes,
    save_checkpoint,
    smooth_l1,
)
from fracsde.errors import CapabilityError, ParameterError, TrainingError


def linear_net(W, b):
    W = jnp.asarray(W, dtype=float)
    return Mlp(((W, jnp.asarray(b, dtype=float)),), (W.shape[0], W.shape[1]))


def central_fd(f, x, h=1e-5):
    x = np.asarray(x, dtype=float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


# -- forward -----------------------------------------------------------------

def test_default_architecture():
    assert mlp_sizes(3, 3) == (4, 128, 128, 128, 3)
    net = init_mlp(mlp_sizes(3, 3), seed=0)
    assert [W.shape for W, _ in net.params] == [(4, 128), (128, 128), (128, 128), (128, 3)]
    assert net.activation == "tanh"


def test_init_is_glorot_uniform_with_zero_bias():
    net = init_mlp((5, 40, 2), seed=1)
    for W, b in net.params:
        lim = math.sqrt(6 / sum(W.shape))
        assert float(jnp.max(jnp.abs(W))) <= lim
        assert float(jnp.max(jnp.abs(W))) > 0.8 * lim
        assert not np.any(np.asarray(b))


def test_zero_net_outputs_zero():
    net = init_mlp((3, 8, 8, 2), seed=0)
    zero = jax.tree_util.tree_map(jnp.zeros_like, net)
    assert np.array_equal(np.asarray(zero(jnp.ones(2), 0.3)), np.zeros(2))


def test_single_linear_layer():
    rng = np.random.default_rng(0)
    W, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    x, t = np.array([0.5, -1.0]), 0.25
    out = linear_net(W, b)(x, t)
    assert np.allclose(out, np.append(x, t) @ W + b, rtol=1e-14)


def test_batched_equals_pointwise():
    net = init_mlp((3, 16, 16, 2), seed=2)
    X = np.random.default_rng(1).normal(size=(7, 2))
    T = np.linspace(0, 1, 7)
    batched = np.asarray(net(X, T))
    single = np.stack([np.asarray(net(x, t)) for x, t in zip(X, T)])
    assert np.allclose(batched, single, rtol=1e-13, atol=1e-15)


def test_shape_mismatch_raises():
    net = init_mlp((3, 4, 1))
    with pytest.raises(ParameterError):
        mlp_forward(net, jnp.ones(3), 0.0)


def test_lipschitz_bound():
    net = init_mlp((4, 32, 32, 32, 2), seed=3)
    L = np.prod([np.linalg.norm(np.asarray(W), 2) for W, _ in net.params])  # tanh is 1-Lipschitz
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, h = rng.normal(size=3), 1e-2 * rng.normal(size=3)
        lhs = np.linalg.norm(np.asarray(net(x + h, 0.5)) - np.asarray(net(x, 0.5)))
        assert lhs <= L * np.linalg.norm(h) * (1 + 1e-12)


# -- input derivatives --------------------------------------------------------

def test_linear_net_derivatives():
    W = np.random.default_rng(0).normal(size=(3, 2))
    net = linear_net(W, np.zeros(2))
    der = input_derivatives(net, np.array([0.3, 0.1]), 0.7, order=2)
    assert np.allclose(der.jac, W[:2].T)
    assert np.allclose(der.dt, W[2])
    assert not np.any(np.asarray(der.hess))


def test_tanh_scalar_derivatives():
    f = lambda x, t: jnp.tanh(x[0])
    der = input_derivatives(f, np.zeros(1), 0.0, order=2)
    assert float(der.jac[0]) == 1.0
    assert float(der.hess[0, 0]) == 0.0


def test_order_three_unsupported():
    with pytest.raises(CapabilityError):
        input_derivatives(init_mlp((2, 3, 1)), np.zeros(1), 0.0, order=3)


def test_jacobian_matches_fd_default_net():
    net = init_mlp(mlp_sizes(3, 2), seed=5)
    x, t = np.array([0.2, -0.4, 0.9]), 0.3
    der = input_derivatives(net, x, t)
    fd = central_fd(lambda z: net(z, t), x)
    assert np.linalg.norm(der.jac - fd) / np.linalg.norm(fd) < 1e-6


def test_hessian_symmetric_and_matches_fd():
    net = init_mlp((4, 16, 16, 1), seed=6)
    x, t = np.array([0.3, 0.1, -0.2]), 0.4
    H = np.asarray(input_derivatives(lambda z, s: net(z, s)[0], x, t, order=2).hess)
    assert np.allclose(H, H.T, atol=1e-14)
    fd = central_fd(lambda z: jax.grad(lambda y: net(y, t)[0])(jnp.asarray(z)), x)
    assert np.allclose(H, fd, atol=1e-8)


def test_divergence_examples():
    d = 4
    A = np.random.default_rng(7).normal(size=(d, d))
    assert float(divergence(lambda x, t: -x, jnp.ones(d), 0.0)) == -d
    assert float(divergence(lambda x, t: jnp.asarray(A) @ x, jnp.ones(d), 0.0)) == pytest.approx(
        np.trace(A), rel=1e-14)


def test_divergence_matches_fd_random_net():
    net = init_mlp((4, 16, 16, 3), seed=8)
    x, t = np.array([0.5, -0.1, 0.3]), 0.2
    fd = np.trace(central_fd(lambda z: net(z, t), x))
    assert float(divergence(net, x, t)) == pytest.approx(fd, rel=1e-6)


def test_divergence_width_mismatch():
    with pytest.raises(ParameterError):
        divergence(init_mlp((3, 4, 1)), jnp.ones(2), 0.0)


def test_hutchinson_unbiased():
    net = init_mlp((4, 16, 3), seed=9)
    x = jnp.asarray([0.1, 0.2, 0.3])
    probes = np.random.default_rng(0).choice([-1.0, 1.0], size=(20000, 3))
    est = float(divergence(net, x, 0.4, probes=probes))
    assert est == pytest.approx(float(divergence(net, x, 0.4)), abs=0.05)


def test_grad_divergence_matches_fd():
    net = init_mlp((3, 12, 12, 2), seed=10)
    x, t = np.array([0.2, 0.7]), 0.5
    g = np.asarray(grad_divergence(net, x, t))
    fd = central_fd(lambda z: divergence(net, jnp.asarray(z), t), x)
    assert np.allclose(g, fd, atol=1e-8)


@pytest.mark.parametrize("D", [None, 2.5, "matrix", "batch"])
def test_mlp_jet_matches_nested_autodiff(D):
    d, n = 3, 5
    net = init_mlp((d + 1, 10, 10, 2), seed=11)
    rng = np.random.default_rng(2)
    X, T = rng.normal(size=(n, d)), rng.uniform(size=n)
    if D == "matrix":
        G = rng.normal(size=(d, d))
        D = G @ G.T
    elif D == "batch":
        G = rng.normal(size=(n, d, d))
        D = np.einsum("nij,nkj->nik", G, G)
    v, vx, vt, tr = mlp_jet(net, X, T, D)
    for i in range(n):
        der = input_derivatives(net, X[i], T[i], order=2)
        Di = np.eye(d) if D is None else (D * np.eye(d) if np.ndim(D) == 0 else
                                          (D if np.ndim(D) == 2 else D[i]))
        assert np.allclose(v[i], der.value, atol=1e-14)
        assert np.allclose(vx[i], der.jac, atol=1e-13)
        assert np.allclose(vt[i], der.dt, atol=1e-13)
        assert np.allclose(tr[i], np.einsum("ij,mij->m", Di, der.hess), atol=1e-12)


# -- smooth L1 -----------------------------------------------------------------

def test_smooth_l1_examples():
    assert float(smooth_l1(0.0, 0.0, 1.0)) == 0.0
    assert float(smooth_l1(jnp.array([0.5]), 0.0, 1.0)) == 0.25
    assert float(smooth_l1(jnp.array([2.0]), 0.0, 1.0)) == 3.0


@given(st.floats(0.01, 10.0))
def test_smooth_l1_is_c1_at_beta(beta):
    f = lambda e: smooth_l1(jnp.array([e]), 0.0, beta)
    eps = 1e-7 * beta
    assert float(f(beta - eps)) == pytest.approx(float(f(beta + eps)), rel=1e-6)
    g = jax.grad(f)
    assert float(g(beta - eps)) == pytest.approx(2 * beta, rel=1e-5)
    assert float(g(beta + eps)) == pytest.approx(2 * beta, rel=1e-12)


@given(st.lists(st.floats(-50, 50), min_size=1, max_size=20))
def test_smooth_l1_large_beta_is_mse(e):
    e = np.array(e)
    beta = 1.0 + np.max(np.abs(e))
    assert float(smooth_l1(e, 0.0, beta)) == pytest.approx(np.mean(e**2), rel=1e-12, abs=1e-300)
    assert float(smooth_l1(e, 0.0, math.inf)) == pytest.approx(np.mean(e**2), rel=1e-12,
                                                              abs=1e-300)


# -- plan, Adam ------------------------------------------------------------------

def test_plan_defaults_and_validation():
    p = TrainPlan()
    assert (p.lr0, p.decay_rate, p.decay_interval, p.smooth_l1_beta) == (1e-3, 0.9, 10000, 1.0)
    assert (p.lambda_initial, p.lambda_residual, p.t_min) == (20.0, 1.0, 1e-3)
    assert p.learning_rate(9999) == 1e-3
    assert p.learning_rate(25000) == pytest.approx(1e-3 * 0.81)
    for bad in (dict(lr0=0.0), dict(decay_rate=0.0), dict(decay_rate=1.5), dict(batch_size=0),
                dict(t_min=0.0), dict(smooth_l1_beta=-1.0)):
        with pytest.raises(ParameterError):
            TrainPlan(**bad)
    assert p.fingerprint() == TrainPlan().fingerprint() != p.replace(epochs=3).fingerprint()


def test_adam_state_mirrors_parameters():
    net = init_mlp((3, 5, 2))
    state = adam_init(net)
    assert isinstance(state, AdamState)
    shapes = lambda tree: [x.shape for x in jax.tree_util.tree_leaves(tree)]
    assert shapes(state.m) == shapes(net) == shapes(state.v)


def test_adam_zero_gradient_keeps_parameters():
    net = init_mlp((3, 5, 2))
    zeros = jax.tree_util.tree_map(jnp.zeros_like, net)
    state, new = adam_step(adam_init(net), net, zeros, TrainPlan(), 0)
    assert int(state.step) == 1
    for a, b in zip(jax.tree_util.tree_leaves(net), jax.tree_util.tree_leaves(new)):
        assert np.array_equal(a, b)


def test_adam_moves_against_constant_gradient():
    theta = {"p": jnp.asarray(0.0)}
    state = adam_init(theta)
    for e in range(50):
        state, theta = adam_step(state, theta, {"p": jnp.asarray(3.0)}, TrainPlan(), e)
    assert float(theta["p"]) < 0


def test_adam_quadratic_bowl():
    plan = TrainPlan(lr0=1e-2)
    theta = {"p": jnp.asarray(5.0)}
    state = adam_init(theta)
    for e in range(5000):
        state, theta = adam_step(state, theta, {"p": theta["p"]}, plan, e)
    assert abs(float(theta["p"])) < 1e-3


def test_adam_rejects_non_finite_gradient():
    theta = {"p": jnp.asarray(1.0)}
    with pytest.raises(TrainingError) as exc:
        adam_step(adam_init(theta), theta, {"p": jnp.asarray(jnp.nan)}, TrainPlan(), 7)
    assert exc.value.epoch == 7


# -- fit, checkpoints ---------------------------------------------------------

def _regression_problem():
    net = init_mlp((2, 8, 1), seed=0)

    def loss(net, batch):
        return jnp.mean((net(batch["x"], batch["t"])[:, 0] - jnp.sin(batch["x"][:, 0])) ** 2)

    def sampler(rng, n):
        return {"x": rng.uniform(-2, 2, size=(n, 1)), "t": np.zeros(n)}

    return net, loss, sampler


def test_fit_reduces_loss_and_logs():
    net, loss, sampler = _regression_problem()
    plan = TrainPlan(epochs=300, batch_size=64, lr0=1e-2)
    trained, log = fit(loss, net, plan, sampler)
    assert len(log.rows) == 300
    assert log.losses[-1] < 0.1 * log.losses[0]
    best = np.array([r[3] for r in log.rows])
    assert np.all(np.diff(best) <= 0)


def test_fit_zero_epochs_is_identity():
    net, loss, sampler = _regression_problem()
    out, log = fit(loss, net, TrainPlan(epochs=0), sampler)
    assert out is net and not log.rows


def test_fit_deterministic_and_prefetch_invariant():
    net, loss, sampler = _regression_problem()
    plan = TrainPlan(epochs=20, batch_size=16)
    a, _ = fit(loss, net, plan, sampler)
    b, _ = fit(loss, net, plan, sampler, prefetch=True)
    for x, y in zip(jax.tree_util.tree_leaves(a), jax.tree_util.tree_leaves(b)):
        assert np.array_equal(x, y)


def test_fit_nan_aborts_with_checkpoint(tmp_path):
    net, _, sampler = _regression_problem()

    def loss(net, batch):
        return jnp.mean(net(batch["x"], batch["t"])) + jnp.where(
            jnp.max(batch["x"]) > 1.9, jnp.nan, 0.0)

    path = tmp_path / "nan.ckpt"
    with pytest.raises(TrainingError) as exc:
        fit(loss, net, TrainPlan(epochs=100, batch_size=64), sampler, checkpoint_path=path)
    assert exc.value.last_good is not None
    restored, _ = load_checkpoint(path)
    for x, y in zip(jax.tree_util.tree_leaves(restored), jax.tree_util.tree_leaves(exc.value.last_good)):
        assert np.array_equal(x, y)


def test_checkpoint_round_trip_bit_exact(tmp_path):
    net = init_mlp((4, 7, 5, 3), seed=12)
    plan = TrainPlan(epochs=5)
    save_checkpoint(tmp_path / "a.ckpt", net, plan, {"role": "test"})
    back, header = load_checkpoint(tmp_path / "a.ckpt")
    assert header["layer_sizes"] == [4, 7, 5, 3]
    assert header["plan_fingerprint"] == plan.fingerprint()
    assert header["metadata"] == {"role": "test"}
    for x, y in zip(jax.tree_util.tree_leaves(net), jax.tree_util.tree_leaves(back)):
        assert np.asarray(x).tobytes() == np.asarray(y).tobytes()
    save_checkpoint(tmp_path / "b.ckpt", back, plan, {"role": "test"})
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_rejects_garbage(tmp_path):
    p = tmp_path / "x.ckpt"
    p.write_bytes(b"not a checkpoint")
    with pytest.raises(ParameterError):
        load_checkpoint(p)


def test_trainlog_csv(tmp_path):
    log = TrainLog()
    log.append(0, 1e-3, 2.0, 1.0)
    log.append(1, 1e-3, 3.0, 2.0)
    log.to_csv(tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "epoch,lr,loss,best_loss,wall_ms"
    assert lines[2].split(",")[3] == "2"
