"""LL-PDE assembly and training (the second stage after a fractional score).

With ``q = log p`` and ``A = f - 0.5 div(G G^T) - sigma^alpha S_alpha`` the
density equation becomes

    dq/dt = 0.5 div(D grad q) + 0.5 |G^T grad q|^2 - <A, grad q> - div A,

a second-order PDE without the fractional Laplacian (``D = G G^T``).
"""

from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from ._rng import make_rng
from .diffnet import Mlp, fit, init_mlp, load_checkpoint, mlp_jet, mlp_sizes, save_checkpoint
from .diffnet import smooth_l1
from .errors import ConfigError, ParameterError
from .samplers import MarginalSampler
from .scorematch import _a_alpha, _div_a_alpha, score_value_and_div


@dataclass(frozen=True)
class LlModel:
    """``q(x, t) = NN(x, t) t + log p_0(x)`` (hard) or ``NN(x, t)`` (soft)."""

    core: Mlp
    constraint: str = field(default="hard", metadata=dict(static=True))
    initial: object = field(default=None, metadata=dict(static=True))

    def __post_init__(self):
        if self.constraint not in ("hard", "soft"):
            raise ParameterError(f"constraint must be 'hard' or 'soft', got {self.constraint!r}")
        if self.core.out_dim != 1:
            raise ParameterError("the LL network must have a scalar output")
        if self.constraint == "hard" and self.initial is None:
            raise ParameterError("hard constraint needs the initial log-density")

    def __call__(self, x, t):
        v = self.core(x, t)[..., 0]
        if self.constraint == "soft":
            return v
        t = jnp.asarray(t, dtype=v.dtype)
        return v * t + self.initial.log_density(x, xp=jnp)

    def with_core(self, core):
        return LlModel(core, self.constraint, self.initial)


jax.tree_util.register_dataclass(LlModel, data_fields=["core"],
                                 meta_fields=["constraint", "initial"])


def new_ll_model(spec, plan, constraint=None):
    """Fresh model; Gaussian initial laws default to the hard constraint."""
    if constraint is None:
        constraint = "hard" if spec.initial.is_gaussian else "soft"
    core = init_mlp(mlp_sizes(spec.d, 1, plan.width, plan.depth), plan.seed, stream=(7,))
    return LlModel(core, constraint, spec.initial)


def a_alpha(spec, salpha, x, t):
    """``A = f - 0.5 div(G G^T) - sigma^alpha S_alpha`` (the middle term is 0 here)."""
    return _a_alpha(spec, salpha, x, t)


def div_a_alpha(spec, salpha, x, t):
    return _div_a_alpha(spec, salpha, x, t)


def ll_pde_residual(q, salpha, spec, x, t):
    """LL-PDE residual at one point for any scalar ``q(x, t)``.

    The diffusion term is ``tr(G G^T Hess q)`` from one Hessian-vector
    contraction per column of ``G``.
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)
    qx = lambda z: q(z, t)
    g = jax.grad(qx)(x)
    qt = jax.jvp(lambda tau: q(x, tau), (t,), (jnp.ones_like(t),))[1]
    rhs = -jnp.dot(a_alpha(spec, salpha, x, t), g) - div_a_alpha(spec, salpha, x, t)
    if spec.diffusion != "zero":
        G = spec.G(t, xp=jnp)
        hv = jax.vmap(lambda v: jax.jvp(jax.grad(qx), (x,), (v,))[1])(G.T)  # rows H g_k
        trace = jnp.sum(hv * G.T)
        Gg = G.T @ g
        rhs = rhs + 0.5 * trace + 0.5 * jnp.dot(Gg, Gg)
    return qt - rhs


def _a_and_div_batch(spec, salpha, X, T):
    """Batched ``A`` and ``div A``; score networks go through one fused jet."""
    sig = spec.sigma(T)
    if not sig or salpha is None:
        return spec.f(X, T[:, None], xp=jnp), spec.drift_divergence(X, xp=jnp)
    s, div = score_value_and_div(salpha, X, T)
    c = sig**spec.alpha
    return (spec.f(X, T[:, None], xp=jnp) - c * s,
            spec.drift_divergence(X, xp=jnp) - c * div)


def _ll_residual_batch(model, salpha, spec, X, T):
    """Batched residual through the fused network jet (training path)."""
    if spec.diffusion == "zero":
        D = None
    elif spec.diffusion == "identity":
        D = 1.0
    else:
        D = jax.vmap(lambda t: spec.D(t, xp=jnp))(T)
    v, vx, vt, vlap = mlp_jet(model.core, X, T, 0.0 if D is None else D)
    v, vx, vt, vlap = v[:, 0], vx[:, 0, :], vt[:, 0], vlap[:, 0]
    if model.constraint == "hard":
        lp = lambda z: model.initial.log_density(z, xp=jnp)
        g0 = jax.vmap(jax.grad(lp))(X)
        qt = v + T * vt
        gq = T[:, None] * vx + g0
        if D is not None:
            H0 = jax.vmap(jax.hessian(lp))(X)
            tr0 = jnp.einsum("nij,nij->n", jnp.broadcast_to(D, H0.shape), H0) if jnp.ndim(D) \
                else D * jnp.trace(H0, axis1=1, axis2=2)
            trq = T * vlap + tr0
    else:
        qt, gq, trq = vt, vx, vlap
    A, divA = _a_and_div_batch(spec, salpha, X, T)
    rhs = -jnp.sum(A * gq, axis=1) - divA
    if D is not None:
        if jnp.ndim(D) == 0:
            quad = D * jnp.sum(gq * gq, axis=1)
        else:
            quad = jnp.einsum("ni,nij,nj->n", gq, D, gq)
        rhs = rhs + 0.5 * trq + 0.5 * quad
    return qt - rhs


def ll_loss(model, salpha, spec, batch, plan):
    """``lambda_residual * rho(residual)`` plus the initial fit in soft mode."""
    X, T = jnp.asarray(batch["x"]), jnp.asarray(batch["t"])
    R = _ll_residual_batch(model, salpha, spec, X, T)
    loss = plan.lambda_residual * smooth_l1(R, 0.0, plan.smooth_l1_beta)
    if model.constraint == "soft":
        X0 = jnp.asarray(batch["x0"])
        q0 = model(X0, jnp.zeros(X0.shape[0]))
        loss = loss + plan.lambda_initial * smooth_l1(
            q0, model.initial.log_density(X0, xp=jnp), plan.smooth_l1_beta)
    return loss


def initial_mismatch(model, X0):
    """``max |q(x, 0) - log p_0(x)|`` (identically 0 under the hard constraint)."""
    X0 = jnp.asarray(X0)
    return float(jnp.max(jnp.abs(model(X0, jnp.zeros(X0.shape[0]))
                                 - model.initial.log_density(X0, xp=jnp))))


def train_ll(model, salpha, spec, plan, sampler=None, T=None, checkpoint_path=None,
             prefetch=False):
    """Fit the LL network on fresh residual points every epoch.

    Returns
    -------
    (LlModel, TrainLog)
    """
    if spec.levy_sigma > 0 and salpha is None and spec.alpha < 2:
        raise ConfigError("the LL stage needs a fractional score for Levy-driven SDEs")
    if sampler is None:
        sampler = MarginalSampler(spec, plan.t_min, T, seed=plan.seed,
                                  with_initial=model.constraint == "soft")
    keys = ("x", "t", "x0") if model.constraint == "soft" else ("x", "t")

    def draw(rng, n):
        b = sampler(rng, n)
        if model.constraint == "soft" and "x0" not in b:
            b["x0"] = spec.initial.sample(rng, n)
        return {k: b[k] for k in keys}

    def loss(core, batch):
        return ll_loss(model.with_core(core), salpha, spec, batch, plan)

    meta = {"role": "ll", "constraint": model.constraint}
    core, log = fit(loss, model.core, plan, draw, rng=make_rng(plan.seed, (8,)),
                    checkpoint_path=checkpoint_path, metadata=meta, prefetch=prefetch)
    return model.with_core(core), log


@jax.jit
def _eval(model, X, T):
    return model(X, T)


def evaluate_ll(model, x, t, chunk=4096):
    """``(ll, pdf)`` at points ``x`` (``(m, d)``) and time ``t``, as numpy arrays."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    out = []
    for i0 in range(0, X.shape[0], chunk):
        Xc = X[i0:i0 + chunk]
        out.append(np.asarray(_eval(model, Xc, np.full(Xc.shape[0], float(t))), dtype=float))
    ll = np.concatenate(out)
    return ll, np.exp(ll)


def save_ll(path, model, plan=None, extra=None):
    meta = {"role": "ll", "constraint": model.constraint}
    meta.update(extra or {})
    save_checkpoint(path, model.core, plan, meta)


def load_ll(path, initial):
    core, header = load_checkpoint(path)
    return LlModel(core, header["metadata"].get("constraint", "hard"), initial), header
