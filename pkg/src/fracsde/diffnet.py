"""Small tanh MLPs, input derivatives, Adam and the robust loss.

Networks are immutable pytrees; parameter gradients come from ``jax.grad``.
Input derivatives are exact: first order by forward-mode passes, second
order as derivative-of-directional-derivative. ``mlp_jet`` is a fused
forward pass carrying value, input Jacobian and a (generalised) Laplacian
through the layers, used by the LL trainer where the nested passes would
dominate the cost.
"""

import dataclasses
import hashlib
import io
import json
import math
import struct
import time
from dataclasses import dataclass, field
from typing import NamedTuple

import jax
import jax.numpy as jnp
import numpy as np

from ._rng import make_rng
from .errors import CapabilityError, ParameterError, TrainingError

ACTIVATIONS = {"tanh": jnp.tanh}


@dataclass(frozen=True)
class Mlp:
    """Fully connected network ``(x, t) -> R^m``.

    ``params`` is a tuple of ``(W, b)`` pairs with ``W`` of shape
    ``(fan_in, fan_out)``. The first layer takes ``d + 1`` inputs, time last.
    """

    params: tuple
    layer_sizes: tuple = field(metadata=dict(static=True))
    activation: str = field(default="tanh", metadata=dict(static=True))

    def __post_init__(self):
        if self.activation not in ACTIVATIONS:
            raise ParameterError(f"unknown activation {self.activation!r}")
        if len(self.params) != len(self.layer_sizes) - 1:
            raise ParameterError("params do not match layer_sizes")

    @property
    def d(self):
        return self.layer_sizes[0] - 1

    @property
    def out_dim(self):
        return self.layer_sizes[-1]

    def __call__(self, x, t):
        return mlp_forward(self, x, t)


jax.tree_util.register_dataclass(
    Mlp, data_fields=["params"], meta_fields=["layer_sizes", "activation"]
)


def init_mlp(layer_sizes, seed=0, stream=0, activation="tanh"):
    """Glorot-uniform weights, zero biases."""
    sizes = tuple(int(s) for s in layer_sizes)
    if len(sizes) < 2 or min(sizes) < 1:
        raise ParameterError(f"invalid layer sizes {layer_sizes!r}")
    rng = make_rng(seed, stream)
    params = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        lim = math.sqrt(6.0 / (fan_in + fan_out))
        W = rng.uniform(-lim, lim, size=(fan_in, fan_out))
        params.append((jnp.asarray(W), jnp.zeros(fan_out)))
    return Mlp(tuple(params), sizes, activation)


def mlp_sizes(d, out_dim, width=128, depth=4):
    """Layer sizes for ``depth`` weight layers of hidden width ``width``."""
    if depth < 1:
        raise ParameterError("depth must be >= 1")
    return (d + 1,) + (width,) * (depth - 1) + (out_dim,)


def mlp_forward(net, x, t):
    """Evaluate the network at ``x`` (``(d,)`` or ``(n, d)``) and time ``t``."""
    x = jnp.asarray(x)
    t = jnp.asarray(t, dtype=x.dtype)
    if x.shape[-1] != net.d:
        raise ParameterError(f"expected {net.d} spatial inputs, got shape {x.shape}")
    t = jnp.broadcast_to(t, x.shape[:-1])
    h = jnp.concatenate([x, t[..., None]], axis=-1)
    act = ACTIVATIONS[net.activation]
    for W, b in net.params[:-1]:
        h = act(h @ W + b)
    W, b = net.params[-1]
    return h @ W + b


# --------------------------------------------------------------------------
# input derivatives


class InputDerivatives(NamedTuple):
    value: jax.Array
    jac: jax.Array  # d value / d x, trailing axis = d
    dt: jax.Array  # d value / d t
    hess: jax.Array | None = None  # d^2 value / dx^2, trailing axes = (d, d)


def input_derivatives(net, x, t, order=1):
    """Exact input derivatives of a pointwise map ``(x, t) -> value``.

    Parameters
    ----------
    net : Mlp or callable
        Anything evaluable as ``net(x, t)`` with ``x`` of shape ``(d,)``.
    x : array of shape (d,)
    t : float
    order : {1, 2}

    Returns
    -------
    InputDerivatives
        ``hess`` is filled for ``order=2`` only.
    """
    if order not in (1, 2):
        raise CapabilityError(f"input derivatives of order {order} are not supported")
    x = jnp.asarray(x, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)
    value = net(x, t)
    jac = jax.jacfwd(net, argnums=0)(x, t)
    dt = jax.jacfwd(net, argnums=1)(x, t)
    hess = None
    if order == 2:
        hess = jax.jacfwd(jax.jacfwd(net, argnums=0), argnums=0)(x, t)
    return InputDerivatives(value, jac, dt, hess)


def divergence(net, x, t, probes=None):
    """``sum_i dS_i/dx_i`` at a single point.

    Exact by default (one forward-mode pass per coordinate). Passing an
    array of Rademacher or Gaussian ``probes`` of shape ``(k, d)`` switches
    to the Hutchinson estimate ``mean_k v_k^T J v_k``.
    """
    x = jnp.asarray(x)
    d = x.shape[-1]
    out = jax.eval_shape(lambda z: net(z, t), x)
    if out.shape != (d,):
        raise ParameterError(f"divergence needs an R^{d} -> R^{d} field, output is {out.shape}")

    def jvp(v):
        return jax.jvp(lambda z: net(z, t), (x,), (v,))[1]

    if probes is None:
        basis = jnp.eye(d, dtype=x.dtype)
        return jnp.trace(jax.vmap(jvp)(basis).T)
    V = jnp.asarray(probes, dtype=x.dtype)
    return jnp.mean(jnp.sum(jax.vmap(jvp)(V) * V, axis=-1))


def grad_divergence(net, x, t):
    """``grad_x (div S)`` at a single point (nested second-order pass)."""
    return jax.grad(lambda z: divergence(net, z, t))(jnp.asarray(x))


def mlp_jet(net, X, T, diffusion=None):
    """Fused batched derivatives of a network.

    Parameters
    ----------
    net : Mlp
    X : array (n, d)
    T : array (n,)
    diffusion : None, float, (d, d) or (n, d, d) array, optional
        Matrix ``D``; the returned second-order term is ``tr(D Hess)``.
        ``None`` means the plain Laplacian.

    Returns
    -------
    value (n, m), jac_x (n, m, d), d_t (n, m), trace term (n, m)
    """
    X = jnp.asarray(X)
    n, d = X.shape
    T = jnp.broadcast_to(jnp.asarray(T, dtype=X.dtype), (n,))
    act = net.activation
    if act != "tanh":
        raise CapabilityError(f"mlp_jet supports tanh only, got {act!r}")
    H = jnp.concatenate([X, T[:, None]], axis=1)
    J = jnp.broadcast_to(jnp.eye(d + 1, dtype=X.dtype), (n, d + 1, d + 1))
    L = jnp.zeros((n, d + 1), dtype=X.dtype)
    scalar_D = diffusion is None or jnp.ndim(diffusion) == 0
    for W, b in net.params[:-1]:
        Z = H @ W + b
        JZ = J @ W
        LZ = L @ W
        A = jnp.tanh(Z)
        s1 = 1.0 - A * A
        Jx = JZ[:, :d, :]
        if scalar_D:
            quad = jnp.sum(Jx * Jx, axis=1)
            if diffusion is not None:
                quad = diffusion * quad
        else:
            sig = "ij,njw->niw" if jnp.ndim(diffusion) == 2 else "nij,njw->niw"
            DJ = jnp.einsum(sig, diffusion, Jx)
            quad = jnp.sum(DJ * Jx, axis=1)
        L = s1 * LZ - 2.0 * A * s1 * quad
        J = s1[:, None, :] * JZ
        H = A
    W, b = net.params[-1]
    value = H @ W + b
    JO = J @ W
    return value, jnp.swapaxes(JO[:, :d, :], 1, 2), JO[:, d, :], L @ W


# --------------------------------------------------------------------------
# loss


def smooth_l1(pred, target, beta=1.0):
    """Mean of ``e^2`` for ``|e| < beta`` and ``2 beta |e| - beta^2`` otherwise.

    ``beta = inf`` reduces to the mean squared error.
    """
    e = jnp.asarray(pred) - jnp.asarray(target)
    beta = float(beta)
    if beta < 0:
        raise ParameterError("beta must be >= 0")
    if math.isinf(beta):
        return jnp.mean(e * e)
    a = jnp.abs(e)
    return jnp.mean(jnp.where(a < beta, e * e, 2.0 * beta * a - beta * beta))


# --------------------------------------------------------------------------
# optimisation


@dataclass(frozen=True)
class TrainPlan:
    """Optimiser schedule and loss settings for one training stage.

    ``depth`` counts weight layers, so the default network is
    ``d+1 -> 128 -> 128 -> 128 -> m``.
    """

    epochs: int = 10000
    batch_size: int = 10000
    lr0: float = 1e-3
    decay_rate: float = 0.9
    decay_interval: int = 10000
    smooth_l1_beta: float = 1.0
    lambda_initial: float = 20.0
    lambda_residual: float = 1.0
    t_min: float = 1e-3
    seed: int = 0
    width: int = 128
    depth: int = 4
    adam_b1: float = 0.9
    adam_b2: float = 0.999
    adam_eps: float = 1e-8
    checkpoint_every: int = 0

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ParameterError("lr0 must be > 0")
        if not 0 < self.decay_rate <= 1:
            raise ParameterError("decay_rate must lie in (0, 1]")
        if self.batch_size < 1:
            raise ParameterError("batch_size must be >= 1")
        if self.epochs < 0:
            raise ParameterError("epochs must be >= 0")
        if self.decay_interval < 1:
            raise ParameterError("decay_interval must be >= 1")
        if self.smooth_l1_beta < 0:
            raise ParameterError("smooth_l1_beta must be >= 0")
        if self.lambda_initial < 0 or self.lambda_residual < 0:
            raise ParameterError("loss weights must be >= 0")
        if not self.t_min > 0:
            raise ParameterError("t_min must be > 0")

    def learning_rate(self, epoch):
        return self.lr0 * self.decay_rate ** (int(epoch) // self.decay_interval)

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def fingerprint(self):
        """Stable hash of every field (checkpoint provenance)."""
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True, default=repr)
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class AdamState:
    m: object
    v: object
    step: jax.Array


jax.tree_util.register_dataclass(AdamState, data_fields=["m", "v", "step"], meta_fields=[])


def adam_init(net):
    zeros = jax.tree_util.tree_map(jnp.zeros_like, net)
    return AdamState(zeros, zeros, jnp.asarray(0, dtype=jnp.int64))


@jax.jit
def _adam_update(state, net, grads, lr, b1, b2, eps):
    step = state.step + 1
    m = jax.tree_util.tree_map(lambda m, g: b1 * m + (1 - b1) * g, state.m, grads)
    v = jax.tree_util.tree_map(lambda v, g: b2 * v + (1 - b2) * g * g, state.v, grads)
    c1 = 1 - b1**step
    c2 = 1 - b2**step
    new = jax.tree_util.tree_map(
        lambda p, m, v: p - lr * (m / c1) / (jnp.sqrt(v / c2) + eps), net, m, v
    )
    return AdamState(m, v, step), new


def tree_all_finite(tree):
    leaves = jax.tree_util.tree_leaves(tree)
    return jnp.all(jnp.asarray([jnp.all(jnp.isfinite(l)) for l in leaves]))


def adam_step(state, net, grads, plan, epoch):
    """One Adam update with ``lr = lr0 * decay_rate ** (epoch // decay_interval)``.

    Raises
    ------
    TrainingError
        If any gradient entry is non-finite.
    """
    if not bool(tree_all_finite(grads)):
        raise TrainingError(f"non-finite gradient at epoch {epoch}", epoch=epoch, last_good=net)
    return _adam_update(
        state, net, grads, plan.learning_rate(epoch), plan.adam_b1, plan.adam_b2, plan.adam_eps
    )


@dataclass
class TrainLog:
    """Per-epoch rows ``(epoch, lr, loss, best_loss, wall_ms)``."""

    rows: list = field(default_factory=list)

    def append(self, epoch, lr, loss, wall_ms):
        best = min(loss, self.rows[-1][3]) if self.rows else loss
        self.rows.append((int(epoch), float(lr), float(loss), float(best), float(wall_ms)))

    @property
    def losses(self):
        return np.array([r[2] for r in self.rows])

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("epoch,lr,loss,best_loss,wall_ms\n")
            for e, lr, loss, best, ms in self.rows:
                fh.write(f"{e},{lr:.17g},{loss:.17g},{best:.17g},{ms:.3f}\n")


def fit(loss_fn, net, plan, sampler, rng=None, checkpoint_path=None, metadata=None,
        prefetch=False, log_every=1):
    """Minimise ``loss_fn(net, batch)`` with Adam on fresh batches per epoch.

    Parameters
    ----------
    loss_fn : callable
        JAX-traceable ``(net, batch) -> scalar``.
    net : Mlp
        Initial parameters (not modified).
    plan : TrainPlan
    sampler : callable
        ``sampler(rng, n) -> dict`` of numpy arrays; called once per epoch.
    rng : numpy.random.Generator, optional
        Defaults to the ``(plan.seed, 0)`` stream.
    checkpoint_path : str, optional
        Written every ``plan.checkpoint_every`` epochs and at the end.
    prefetch : bool
        Draw the next batch on a helper thread while the current step runs.
        Draws stay sequential on one generator, so results do not change.

    Returns
    -------
    (Mlp, TrainLog)

    Raises
    ------
    TrainingError
        On a non-finite loss or gradient; ``last_good`` holds the latest
        finite parameters, also written to ``checkpoint_path`` if given.
    """
    rng = make_rng(plan.seed, 0) if rng is None else rng
    log = TrainLog()
    if plan.epochs == 0:
        return net, log
    b1, b2, eps = plan.adam_b1, plan.adam_b2, plan.adam_eps

    @jax.jit
    def step(net, state, batch, lr):
        loss, grads = jax.value_and_grad(loss_fn)(net, batch)
        ok = jnp.isfinite(loss) & tree_all_finite(grads)
        state, new = _adam_update(state, net, grads, lr, b1, b2, eps)
        return new, state, loss, ok

    state = adam_init(net)
    executor = None
    if prefetch:
        from concurrent.futures import ThreadPoolExecutor

        executor = ThreadPoolExecutor(max_workers=1)
        pending = executor.submit(sampler, rng, plan.batch_size)
    t0 = time.perf_counter()
    try:
        for epoch in range(plan.epochs):
            if executor is not None:
                batch = pending.result()
                if epoch + 1 < plan.epochs:
                    pending = executor.submit(sampler, rng, plan.batch_size)
            else:
                batch = sampler(rng, plan.batch_size)
            lr = plan.learning_rate(epoch)
            new, new_state, loss, ok = step(net, state, batch, lr)
            if not bool(ok):
                if checkpoint_path is not None:
                    save_checkpoint(checkpoint_path, net, plan, metadata)
                raise TrainingError(
                    f"non-finite loss or gradient at epoch {epoch}", epoch=epoch, last_good=net
                )
            if epoch % log_every == 0 or epoch == plan.epochs - 1:
                log.append(epoch, lr, float(loss), 1e3 * (time.perf_counter() - t0))
            net, state = new, new_state
            if (checkpoint_path is not None and plan.checkpoint_every
                    and (epoch + 1) % plan.checkpoint_every == 0):
                save_checkpoint(checkpoint_path, net, plan, metadata)
    finally:
        if executor is not None:
            executor.shutdown(wait=True, cancel_futures=True)
    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, net, plan, metadata)
    return net, log


# --------------------------------------------------------------------------
# checkpoints
#
# Layout (all little-endian):
#   8 bytes   magic b"FRACSDE\0"
#   uint32    format version (1)
#   uint32    header length H
#   H bytes   UTF-8 JSON header, sorted keys: layer_sizes, activation,
#             dtype ("<f8"), plan_fingerprint, metadata
#   rest      float64 parameters, per layer W (row-major, fan_in x fan_out)
#             then b

_MAGIC = b"FRACSDE\0"
_VERSION = 1


def save_checkpoint(path, net, plan=None, metadata=None):
    """Write ``net`` (an ``Mlp``, or a model wrapping one as ``.net``/``.core``)."""
    while not isinstance(net, Mlp):
        net = getattr(net, "net", None) or getattr(net, "core")
    header = {
        "activation": net.activation,
        "dtype": "<f8",
        "layer_sizes": list(net.layer_sizes),
        "metadata": metadata or {},
        "plan_fingerprint": plan.fingerprint() if plan is not None else None,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(_MAGIC)
    buf.write(struct.pack("<II", _VERSION, len(hbytes)))
    buf.write(hbytes)
    for W, b in net.params:
        buf.write(np.ascontiguousarray(W, dtype="<f8").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path):
    """Return ``(Mlp, header dict)``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != _MAGIC:
        raise ParameterError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != _VERSION:
        raise ParameterError(f"{path}: unsupported checkpoint version {version}")
    header = json.loads(raw[16:16 + hlen].decode())
    data = np.frombuffer(raw[16 + hlen:], dtype="<f8")
    sizes = header["layer_sizes"]
    params, off = [], 0
    for fi, fo in zip(sizes[:-1], sizes[1:]):
        W = data[off:off + fi * fo].reshape(fi, fo)
        off += fi * fo
        b = data[off:off + fo]
        off += fo
        params.append((jnp.asarray(W.astype(np.float64)), jnp.asarray(b.astype(np.float64))))
    if off != data.size:
        raise ParameterError(f"{path}: parameter block has wrong length")
    return Mlp(tuple(params), tuple(sizes), header["activation"]), header
