"""Score learning: conditional fractional score matching, exact-divergence score
matching for the vanilla score, and the Score-fPINN residual trainer.

All loss functions take a model and a batch dict and return a scalar, so
``jax.value_and_grad(loss)(net, batch, ...)`` gives the parameter gradients.
Models are pointwise-or-batched callables ``S(x, t)``.
"""

import math
from dataclasses import dataclass, field

import jax
import jax.numpy as jnp
import numpy as np

from ._rng import make_rng
from .diffnet import Mlp, TrainPlan, divergence, fit, init_mlp, mlp_jet, mlp_sizes, smooth_l1
from .errors import ConfigError, ParameterError
from .samplers import ConditionalSampler, MarginalSampler, StaticSampler


@dataclass(frozen=True)
class ScoreModel:
    """``S(x, t) = NN(x, t) t + grad log p_0(x)`` (hard) or ``NN(x, t)`` (plain).

    ``initial`` set means the hard constraint is active; it must have a
    closed-form smooth score.
    """

    net: Mlp
    initial: object = field(default=None, metadata=dict(static=True))

    def __call__(self, x, t):
        out = self.net(x, t)
        if self.initial is None:
            return out
        t = jnp.asarray(t, dtype=out.dtype)
        return out * t[..., None] + self.initial.score(x, xp=jnp)

    @property
    def d(self):
        return self.net.d

    def with_net(self, net):
        return ScoreModel(net, self.initial)


jax.tree_util.register_dataclass(ScoreModel, data_fields=["net"], meta_fields=["initial"])


def conditional_fractional_target(x, x0, gamma_t, alpha):
    """``-(x - x0) / (alpha gamma_t^alpha)``, broadcasting per-row ``gamma_t``."""
    scale = alpha * jnp.asarray(gamma_t) ** alpha
    if scale.ndim:
        scale = scale[..., None]
    return -(jnp.asarray(x) - jnp.asarray(x0)) / scale


def fsm_loss(model, batch, alpha, beta=1.0):
    """Smooth-L1 distance between ``S(x, t)`` and the conditional fractional score."""
    target = conditional_fractional_target(batch["x"], batch["x0"], batch["gamma"], alpha)
    return smooth_l1(model(batch["x"], batch["t"]), target, beta)


def mixed_noise_fsm_loss(model, batch, alpha, beta=1.0):
    """Gaussian-plus-Levy estimator in residual form.

    With ``x = m + g + l`` the objective ``E|S(x)|^2 + 2 E<S(x), l/(alpha
    gamma^alpha)>`` equals ``E|S(x) + l/(alpha gamma^alpha)|^2`` up to a
    constant; the robust loss is applied to that residual.
    """
    x = batch["m"] + batch["g"] + batch["l"]
    target = conditional_fractional_target(batch["l"], 0.0 * batch["l"], batch["gamma"], alpha)
    return smooth_l1(model(x, batch["t"]), target, beta)


def score_value_and_div(model, X, T):
    """Batched ``S(x, t)`` and its exact divergence in one fused pass."""
    X = jnp.asarray(X)
    T = jnp.broadcast_to(jnp.asarray(T, dtype=X.dtype), X.shape[:1])
    if not isinstance(model, ScoreModel) or model.net.activation != "tanh":
        S = model(X, T)
        return S, jax.vmap(lambda x, t: divergence(model, x, t))(X, T)
    S, SX, _, _ = mlp_jet(model.net, X, T, 0.0)
    div = jnp.trace(SX, axis1=1, axis2=2)
    if model.initial is not None:
        s0 = lambda z: model.initial.score(z, xp=jnp)
        S = S * T[:, None] + s0(X)
        div = div * T + jax.vmap(lambda z: jnp.trace(jax.jacfwd(s0)(z)))(X)
    return S, div


def ssm_loss(model, batch):
    """``mean(0.5 |S|^2 + div S)`` with the exact divergence."""
    S, div = score_value_and_div(model, batch["x"], batch["t"])
    return jnp.mean(0.5 * jnp.sum(S * S, axis=-1) + div)


def _a_alpha(spec, salpha, x, t):
    a = spec.f(x, t, xp=jnp)
    sig = spec.sigma(t)
    if sig and salpha is not None:
        a = a - sig**spec.alpha * salpha(x, t)
    return a


def _div_a_alpha(spec, salpha, x, t):
    div = spec.drift_divergence(x, xp=jnp)
    sig = spec.sigma(t)
    if sig and salpha is not None:
        div = div - sig**spec.alpha * divergence(salpha, x, t)
    return div


def score_fpde_residual(s2, salpha, spec, x, t):
    """Score-fPDE residual at one point.

    ``dS2/dt - grad[ 0.5 tr(D J_S2) + 0.5 S2^T D S2 - <A, S2> - div A ]`` with
    ``D = G G^T`` and ``A = f - sigma^alpha S_alpha`` (``div(G G^T)`` vanishes
    for every catalog diffusion).
    """
    x = jnp.asarray(x, dtype=jnp.float64)
    t = jnp.asarray(t, dtype=jnp.float64)
    D = spec.D(t, xp=jnp)
    has_D = spec.diffusion != "zero"

    def h(z):
        s = s2(z, t)
        val = -jnp.dot(_a_alpha(spec, salpha, z, t), s) - _div_a_alpha(spec, salpha, z, t)
        if has_D:
            J = jax.jacfwd(lambda y: s2(y, t))(z)
            val = val + 0.5 * jnp.sum(D * J.T) + 0.5 * s @ D @ s
        return val

    ds2dt = jax.jvp(lambda tau: s2(x, tau), (t,), (jnp.ones_like(t),))[1]
    return ds2dt - jax.grad(h)(x)


def score_fpinn_loss(salpha, s2, spec, batch, beta=1.0):
    """Smooth-L1 of the Score-fPDE residual against zero (``s2`` is frozen)."""
    R = jax.vmap(lambda x, t: score_fpde_residual(s2, salpha, spec, x, t))(
        jnp.asarray(batch["x"]), jnp.asarray(batch["t"]))
    return smooth_l1(R, 0.0, beta)


# --------------------------------------------------------------------------
# training

ROUTES = ("fsm", "mixed-fsm", "ssm", "score-fpinn")


@dataclass
class ScoreTrainTask:
    """What to learn and how.

    route : {"fsm", "mixed-fsm", "ssm", "score-fpinn"}
        ``ssm`` learns the vanilla score; the others the fractional score.
    hard_constraint : bool
        Vanilla models only: ``NN t + grad log p_0``.
    static : bool
        Time-independent task on ``spec.initial`` (SSM sanity check).
    frozen_vanilla : ScoreModel
        Required by ``score-fpinn``.
    grid : array, optional
        Discrete training times instead of ``U[t_min, T]``.
    """

    route: str
    spec: object
    plan: TrainPlan = field(default_factory=TrainPlan)
    hard_constraint: bool = True
    static: bool = False
    frozen_vanilla: object = None
    grid: object = None
    T: float = None

    def __post_init__(self):
        if self.route not in ROUTES:
            raise ConfigError(f"unknown score route {self.route!r}; choose from {ROUTES}")
        if self.route == "score-fpinn" and self.frozen_vanilla is None:
            raise ConfigError("score-fpinn needs a trained vanilla score (run ssm first)")

    @property
    def target(self):
        return "vanilla" if self.route == "ssm" else "fractional"

    def init_model(self):
        spec, plan = self.spec, self.plan
        net = init_mlp(mlp_sizes(spec.d, spec.d, plan.width, plan.depth), plan.seed,
                       stream=(5, ROUTES.index(self.route)))
        hard = (self.route == "ssm" and self.hard_constraint and not self.static
                and spec.initial.is_gaussian)
        return ScoreModel(net, spec.initial if hard else None)

    def sampler(self):
        spec, plan = self.spec, self.plan
        if self.static:
            return StaticSampler(spec.initial)
        if self.route in ("fsm", "mixed-fsm"):
            return ConditionalSampler(spec, plan.t_min, self.T, self.grid,
                                      pure=self.route == "fsm")
        return MarginalSampler(spec, plan.t_min, self.T, self.grid, seed=plan.seed)

    def loss_fn(self):
        spec, beta = self.spec, self.plan.smooth_l1_beta
        if self.route == "fsm":
            return lambda m, b: fsm_loss(m, b, spec.alpha, beta)
        if self.route == "mixed-fsm":
            return lambda m, b: mixed_noise_fsm_loss(m, b, spec.alpha, beta)
        if self.route == "ssm":
            return ssm_loss
        s2 = self.frozen_vanilla
        return lambda m, b: score_fpinn_loss(m, s2, spec, b, beta)


_BATCH_KEYS = {
    "fsm": ("x", "x0", "gamma", "t"),
    "mixed-fsm": ("m", "g", "l", "gamma", "t"),
    "ssm": ("x", "t"),
    "score-fpinn": ("x", "t"),
}


def train_score(task, sampler=None, init=None, checkpoint_path=None, prefetch=False):
    """Run the selected score-learning procedure.

    Returns
    -------
    (ScoreModel, TrainLog)
    """
    sampler = task.sampler() if sampler is None else sampler
    model = task.init_model() if init is None else init
    keys = _BATCH_KEYS[task.route]

    def draw(rng, n):
        b = sampler(rng, n)
        return {k: b[k] for k in keys}

    rng = make_rng(task.plan.seed, (6, ROUTES.index(task.route)))
    meta = {"role": task.target, "route": task.route,
            "hard_constraint": model.initial is not None}
    model, log = fit(task.loss_fn(), model, task.plan, draw, rng=rng,
                     checkpoint_path=checkpoint_path, metadata=meta, prefetch=prefetch)
    return model, log


def save_score(path, model, plan=None, extra=None):
    from .diffnet import save_checkpoint

    meta = {"hard_constraint": model.initial is not None}
    meta.update(extra or {})
    save_checkpoint(path, model.net, plan, meta)


def load_score(path, initial=None):
    """Rebuild a ``ScoreModel``; pass ``initial`` for hard-constrained checkpoints."""
    from .diffnet import load_checkpoint

    net, header = load_checkpoint(path)
    hard = header["metadata"].get("hard_constraint", False)
    if hard and initial is None:
        raise ConfigError(f"{path}: hard-constrained checkpoint needs the initial law")
    return ScoreModel(net, initial if hard else None), header


def gaussian_marginal_score(spec):
    """Analytic ``grad log p_t`` for linear specs whose marginal is Gaussian.

    Valid when ``alpha = 2`` or there is no Levy part; returns a JAX
    callable ``(x, t) -> (d,)`` differentiable in both arguments.
    """
    from .sde import _rate

    rate = _rate(spec)
    d, a, sig = spec.d, spec.alpha, spec.levy_sigma
    if not (a == 2.0 or sig == 0.0):
        raise ParameterError("marginal is not Gaussian")
    init = spec.initial
    if not (init.is_gaussian or init.kind == "point_mass"):
        raise ParameterError("initial law is not Gaussian")
    c0 = jnp.asarray(init.covariance)
    eye = jnp.eye(d)
    B = None if spec.B is None else jnp.asarray(spec.B)

    def cov(t):
        if spec.diffusion == "b_plus_t":
            noise = t**3 / 3 * eye + t * B @ B.T + 0.5 * t**2 * (B + B.T)
        elif spec.diffusion == "identity":
            noise = (t if rate == 0 else -jnp.expm1(-2 * rate * t) / (2 * rate)) * eye
        else:
            noise = 0.0 * eye
        g_alpha = t if rate == 0 else -jnp.expm1(-a * rate * t) / (a * rate)
        return jnp.exp(-2 * rate * t) * c0 + noise + 2.0 * sig**2 * g_alpha * eye

    def score(x, t):
        return -jnp.linalg.solve(cov(t), x)

    return score
