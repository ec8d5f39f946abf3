"""SDE specifications, Euler-Maruyama schemes and exact marginal samplers.

The equations are ``dx = f(x, t) dt + G(x, t) dw_t + sigma dL_t`` with ``L``
an isotropic alpha-stable Levy process.  Drifts and diffusions come from a
closed catalog so that analytic Jacobians are available for the implicit
scheme and the derivative terms of the LL-PDE are exact.
"""

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from ._rng import make_rng
from .errors import CapabilityError, ParameterError, SimulationError
from .stable import standard_isotropic

DRIFTS = ("zero", "linear", "linear_alpha", "tanh_radial", "polynomial")
DIFFUSIONS = ("zero", "identity", "b_plus_t")
INITIAL_KINDS = ("gaussian", "unit_gaussian", "laplace", "mixture", "point_mass")

BENCHMARK_HORIZON = {
    "basic": 1.0,
    "complicated": 1.0,
    "ou_levy": 0.5,
    "pure_levy": 1.0,
    "tanh_drift": 0.3,
    "polynomial_drift": 1.0,
    "brownian": 1.0,
}


# --------------------------------------------------------------------------
# initial laws


@dataclass(frozen=True, eq=False)
class InitialDistribution:
    """Law of ``x_0``.

    kind : {"gaussian", "unit_gaussian", "laplace", "mixture", "point_mass"}
        ``gaussian`` is ``N(0, diag(scales))``; ``laplace`` has independent
        coordinates with density ``exp(-|x_i| / b_i) / (2 b_i)``; ``mixture``
        is the equal-weight average of the two; ``point_mass`` puts all mass
        at ``location``.
    scales : array
        Variances for the Gaussian part, Laplace scales ``b_i`` for the
        Laplace part (both ones if not given).
    """

    kind: str
    d: int
    scales: np.ndarray = None
    laplace_scales: np.ndarray = None
    location: np.ndarray = None

    def __post_init__(self):
        if self.kind not in INITIAL_KINDS:
            raise ParameterError(f"unknown initial distribution {self.kind!r}")
        d = int(self.d)
        object.__setattr__(self, "d", d)
        for name in ("scales", "laplace_scales"):
            v = getattr(self, name)
            v = np.ones(d) if v is None else np.asarray(v, dtype=float).reshape(d)
            if np.any(v <= 0):
                raise ParameterError(f"{name} must be positive")
            object.__setattr__(self, name, v)
        loc = np.zeros(d) if self.location is None else np.asarray(self.location, float).reshape(d)
        object.__setattr__(self, "location", loc)

    @property
    def is_gaussian(self):
        return self.kind in ("gaussian", "unit_gaussian")

    @property
    def covariance(self):
        """Covariance for Gaussian kinds (zero for a point mass)."""
        if self.is_gaussian:
            return np.diag(self.scales)
        if self.kind == "point_mass":
            return np.zeros((self.d, self.d))
        raise CapabilityError(f"{self.kind} initial law is not Gaussian")

    def sample(self, rng, n):
        d = self.d
        if self.kind == "point_mass":
            return np.broadcast_to(self.location, (n, d)).copy()
        if self.is_gaussian:
            return rng.standard_normal((n, d)) * np.sqrt(self.scales)
        if self.kind == "laplace":
            return rng.laplace(0.0, 1.0, (n, d)) * self.laplace_scales
        pick = rng.random(n) < 0.5
        g = rng.standard_normal((n, d)) * np.sqrt(self.scales)
        lap = rng.laplace(0.0, 1.0, (n, d)) * self.laplace_scales
        return np.where(pick[:, None], g, lap)

    def log_density(self, x, xp=np):
        """Exact ``log p_0`` over the last axis; ``xp`` is numpy or jax.numpy."""
        if self.kind == "point_mass":
            raise CapabilityError("a point mass has no density")
        lg = lap = None
        if self.kind != "laplace":
            s = self.scales
            lg = -0.5 * xp.sum(x * x / s, axis=-1) - 0.5 * float(np.sum(np.log(2 * np.pi * s)))
        if self.kind in ("laplace", "mixture"):
            b = self.laplace_scales
            lap = -xp.sum(xp.abs(x) / b, axis=-1) - float(np.sum(np.log(2 * b)))
        if self.kind == "mixture":
            return xp.logaddexp(lg, lap) - math.log(2.0)
        return lap if lg is None else lg

    def score(self, x, xp=np):
        """``grad log p_0``; Gaussian kinds only (the others are not smooth)."""
        if not self.is_gaussian:
            raise CapabilityError(f"no closed-form smooth score for {self.kind!r}")
        return -x / self.scales


def anisotropic_scales(d, seed=0, stream=0):
    """``lambda_{2i} ~ U[1, 2]``, ``lambda_{2i+1} = 1 / lambda_{2i}`` (0-based)."""
    rng = make_rng(seed, stream)
    lam = np.empty(d)
    u = rng.uniform(1.0, 2.0, size=(d + 1) // 2)
    lam[0::2] = u
    lam[1::2] = 1.0 / u[: d // 2]
    return lam


def anisotropic_gaussian(d, seed=0, stream=0):
    return InitialDistribution("gaussian", d, scales=anisotropic_scales(d, seed, stream))


# --------------------------------------------------------------------------
# drift / diffusion catalog


def drift_value(tag, x, t, d, alpha, xp=np):
    """``f(x, t)`` for a catalog tag; ``x`` has the state on its last axis."""
    if tag == "zero":
        return 0.0 * x
    if tag == "linear":
        return -x
    if tag == "linear_alpha":
        return -x / alpha
    r2 = xp.sum(x * x, axis=-1, keepdims=True)
    if tag == "polynomial":
        return (1.0 - r2) * x
    if tag == "tanh_radial":
        # sqrt is smooth away from 0 and tanh(r)/r has a removable singularity
        r = xp.sqrt(r2 + 1e-300)
        return -x * xp.tanh(r / math.sqrt(d))
    raise ParameterError(f"unknown drift {tag!r}")


def drift_jacobian(tag, x, t, d, alpha):
    """Batched analytic Jacobian ``df/dx`` of shape ``(n, d, d)``."""
    x = np.atleast_2d(x)
    n = x.shape[0]
    eye = np.broadcast_to(np.eye(d), (n, d, d))
    if tag == "zero":
        return np.zeros((n, d, d))
    if tag == "linear":
        return -eye.copy()
    if tag == "linear_alpha":
        return -eye / alpha
    outer = x[:, :, None] * x[:, None, :]
    r2 = np.sum(x * x, axis=1)
    if tag == "polynomial":
        return (1.0 - r2)[:, None, None] * eye - 2.0 * outer
    if tag == "tanh_radial":
        r = np.sqrt(r2)
        s = math.sqrt(d)
        th = np.tanh(r / s)
        with np.errstate(invalid="ignore", divide="ignore"):
            coef = np.where(r > 0, (1.0 - th**2) / (s * r), 0.0)
        return -th[:, None, None] * eye - coef[:, None, None] * outer
    raise ParameterError(f"unknown drift {tag!r}")


@dataclass(frozen=True, eq=False)
class SdeSpec:
    """``dx = f dt + G dw + sigma dL^alpha`` on ``[0, T]`` in ``R^d``."""

    d: int
    drift: str
    diffusion: str
    alpha: float
    levy_sigma: float
    T: float
    initial: InitialDistribution
    B: np.ndarray = None
    B_Q: np.ndarray = None
    B_gamma: np.ndarray = None
    benchmark: str = "custom"

    def __post_init__(self):
        if self.drift not in DRIFTS:
            raise ParameterError(f"unknown drift {self.drift!r}; choose from {DRIFTS}")
        if self.diffusion not in DIFFUSIONS:
            raise ParameterError(f"unknown diffusion {self.diffusion!r}; choose from {DIFFUSIONS}")
        if not 0 < self.alpha <= 2:
            raise ParameterError("alpha must lie in (0, 2]")
        if self.levy_sigma < 0:
            raise ParameterError("levy_sigma must be >= 0")
        if not self.T > 0:
            raise ParameterError("T must be > 0")
        if self.initial.d != self.d:
            raise ParameterError("initial distribution dimension mismatch")
        if self.diffusion == "b_plus_t":
            if self.B is None:
                raise ParameterError("diffusion 'b_plus_t' needs a matrix B")
            object.__setattr__(self, "B", np.asarray(self.B, dtype=float).reshape(self.d, self.d))

    def f(self, x, t, xp=np):
        return drift_value(self.drift, x, t, self.d, self.alpha, xp)

    def drift_jacobian(self, x, t):
        return drift_jacobian(self.drift, x, t, self.d, self.alpha)

    def G(self, t, xp=np):
        """Diffusion matrix at time ``t`` (x-independent for every catalog tag)."""
        if self.diffusion == "zero":
            return xp.zeros((self.d, self.d))
        if self.diffusion == "identity":
            return xp.eye(self.d)
        return xp.asarray(self.B) + t * xp.eye(self.d)

    def D(self, t, xp=np):
        """``G G^T``."""
        G = self.G(t, xp)
        return G @ G.T

    def sigma(self, t):
        return self.levy_sigma

    def drift_divergence(self, x, xp=np):
        """Analytic ``div f`` over the last axis."""
        d, tag = self.d, self.drift
        if tag == "zero":
            return 0.0 * x[..., 0]
        if tag == "linear":
            return -d + 0.0 * x[..., 0]
        if tag == "linear_alpha":
            return -d / self.alpha + 0.0 * x[..., 0]
        r2 = xp.sum(x * x, axis=-1)
        if tag == "polynomial":
            return d * (1.0 - r2) - 2.0 * r2
        s = math.sqrt(d)
        r = xp.sqrt(r2 + 1e-300)
        th = xp.tanh(r / s)
        # div(-x tanh(r/s)) = -d tanh - x . grad tanh
        return -d * th - (1.0 - th**2) * r / s

    def describe(self):
        return dict(
            benchmark=self.benchmark, d=self.d, drift=self.drift, diffusion=self.diffusion,
            alpha=self.alpha, levy_sigma=self.levy_sigma, T=self.T, initial=self.initial.kind,
        )


def make_B(d, seed=0, stream=1):
    """``B = Q Gamma`` with ``Q`` from a sign-fixed QR and ``Gamma`` the lambda pattern."""
    rng = make_rng(seed, stream)
    M = rng.standard_normal((d, d))
    Q, R = np.linalg.qr(M)
    Q = Q * np.sign(np.diag(R))
    gam = anisotropic_scales(d, seed, (stream, 1))
    return Q @ np.diag(gam), Q, gam


def make_benchmark(name, d, alpha=1.95, seed=0, T=None, initial=None):
    """Build one of the named benchmark SDEs.

    ============== ============================================ ==================
    name           equation                                     initial law
    ============== ============================================ ==================
    basic          dx = dw + dL                                 N(0, Sigma)
    complicated    dx = (B + tI) dw + dL                        N(0, I)
    ou_levy        dx = -x/alpha dt + dL                        N(0, Sigma)
    pure_levy      dx = dL                                      N(0, I)
    tanh_drift     dx = -x tanh(|x|/sqrt(d)) dt + dL            N(0, I)
    polynomial_drift dx = (1 - |x|^2) x dt + dL                 N(0, I)
    brownian       dx = dw                                      N(0, I)
    ============== ============================================ ==================

    ``Sigma`` and ``B`` are drawn from ``seed``.  ``initial`` overrides the
    initial law (for example a point mass or a Laplace law).
    """
    if name not in BENCHMARK_HORIZON:
        raise ParameterError(f"unknown benchmark {name!r}; choose from {sorted(BENCHMARK_HORIZON)}")
    T = BENCHMARK_HORIZON[name] if T is None else float(T)
    unit = InitialDistribution("unit_gaussian", d)
    B = Q = gam = None
    if name == "basic":
        drift, diff, sig, init = "zero", "identity", 1.0, anisotropic_gaussian(d, seed)
    elif name == "complicated":
        drift, diff, sig, init = "zero", "b_plus_t", 1.0, unit
        B, Q, gam = make_B(d, seed)
    elif name == "ou_levy":
        drift, diff, sig, init = "linear_alpha", "zero", 1.0, anisotropic_gaussian(d, seed)
    elif name == "pure_levy":
        drift, diff, sig, init = "zero", "zero", 1.0, unit
    elif name == "tanh_drift":
        drift, diff, sig, init = "tanh_radial", "zero", 1.0, unit
    elif name == "polynomial_drift":
        drift, diff, sig, init = "polynomial", "zero", 1.0, unit
    else:  # brownian
        drift, diff, sig, init = "zero", "identity", 0.0, unit
    if initial is not None:
        init = initial
    return SdeSpec(d, drift, diff, float(alpha), sig, T, init, B, Q, gam, benchmark=name)


# --------------------------------------------------------------------------
# time grids and batches


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2 or t[0] != 0.0:
            raise ParameterError("a time grid starts at 0 and has at least two points")
        if not np.all(np.isfinite(t)) or np.any(np.diff(t) <= 0):
            raise ParameterError("grid times must be finite and strictly increasing")
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, T, steps):
        return cls(np.linspace(0.0, float(T), int(steps) + 1))

    @property
    def dt(self):
        return np.diff(self.times)

    @property
    def T(self):
        return self.times[-1]

    def __len__(self):
        return self.times.size


@dataclass(frozen=True, eq=False)
class SampleBatch:
    """Points at time ``t`` (scalar, or one time per row)."""

    t: object
    points: np.ndarray
    provenance: str
    seed: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.points)):
            raise SimulationError("sample batch contains non-finite entries",
                                  provenance=self.provenance)


def sample_initial(init, n, seed=0, stream=0):
    rng = make_rng(seed, stream)
    return SampleBatch(0.0, init.sample(rng, int(n)), f"initial:{init.kind}",
                       seed if isinstance(seed, int) else 0)


# --------------------------------------------------------------------------
# Euler-Maruyama


@dataclass(frozen=True)
class NewtonConfig:
    tol: float = 1e-10
    max_iters: int = 50
    damping: float = 0.5
    fixed_point_iters: int = 2000


def _noise(spec, t, dt, n, rng):
    """``G(t) sqrt(dt) z + sigma L``, L ~ SaS(dt^(1/alpha)); shared by both schemes."""
    d = spec.d
    out = np.zeros((n, d))
    if spec.diffusion != "zero":
        z = rng.standard_normal((n, d))
        out += math.sqrt(dt) * z @ spec.G(t).T
    sig = spec.sigma(t)
    if sig > 0:
        out += sig * dt ** (1.0 / spec.alpha) * standard_isotropic(spec.alpha, d, n, rng)
    return out


def _as_batch(x):
    x = np.asarray(x, dtype=float)
    return (x[None, :], True) if x.ndim == 1 else (x, False)


def forward_em_step(spec, x, t, dt, rng):
    """``x + f(x, t) dt + G(t) sqrt(dt) z + sigma L`` for one point or a batch."""
    if not dt > 0:
        raise ParameterError("dt must be > 0")
    X, single = _as_batch(x)
    f = spec.f(X, t)
    if not np.all(np.isfinite(f)):
        bad = np.flatnonzero(~np.all(np.isfinite(f), axis=1))
        raise SimulationError("non-finite drift", t=t, rows=bad, state=X[bad])
    Y = X + f * dt + _noise(spec, t, dt, X.shape[0], rng)
    return Y[0] if single else Y


def _solve_implicit(spec, C, t1, dt, solver, Y0):
    """Solve ``y - dt f(y, t1) = C`` row-wise: Newton, then damped fixed point."""
    d = spec.d
    Y = Y0.copy()
    active = np.ones(Y.shape[0], dtype=bool)
    eye = np.eye(d)
    for _ in range(solver.max_iters):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        y = Y[idx]
        F = y - dt * spec.f(y, t1) - C[idx]
        J = eye - dt * spec.drift_jacobian(y, t1)
        with np.errstate(all="ignore"):
            try:
                step = np.linalg.solve(J, F[..., None])[..., 0]
            except np.linalg.LinAlgError:
                step = np.full_like(F, np.nan)
        ok = np.all(np.isfinite(step), axis=1)
        Y[idx[ok]] = y[ok] - step[ok]
        done = ok & (np.linalg.norm(step, axis=1) < solver.tol)
        active[idx[done]] = False
        active[idx[~ok]] = True
        if np.any(~ok):
            Y[idx[~ok]] = C[idx[~ok]]
            break
    fallback = np.flatnonzero(active)
    if fallback.size:
        w = solver.damping
        y = C[fallback].copy()
        for _ in range(solver.fixed_point_iters):
            with np.errstate(all="ignore"):
                new = (1 - w) * y + w * (C[fallback] + dt * spec.f(y, t1))
            if np.all(np.linalg.norm(new - y, axis=1) < solver.tol):
                y = new
                break
            y = new
        res = np.linalg.norm(y - dt * spec.f(y, t1) - C[fallback], axis=1)
        bad = ~(res < max(solver.tol, 1e-8) * (1.0 + np.linalg.norm(y, axis=1)))
        if np.any(bad):
            raise SimulationError(
                "implicit step did not converge", t=t1 - dt, dt=dt,
                rows=fallback[bad], state=C[fallback[bad]],
            )
        Y[fallback] = y
    return Y


def implicit_em_step(spec, x, t, dt, rng, solver=NewtonConfig()):
    """Drift-implicit step ``y = x + f(y, t+dt) dt + G(t) sqrt(dt) z + sigma L``.

    The noise draws are the same ones ``forward_em_step`` would make from an
    identically seeded generator.
    """
    if not dt > 0:
        raise ParameterError("dt must be > 0")
    X, single = _as_batch(x)
    C = X + _noise(spec, t, dt, X.shape[0], rng)
    Y = _solve_implicit(spec, C, t + dt, dt, solver, C)
    if not np.all(np.isfinite(Y)):
        bad = np.flatnonzero(~np.all(np.isfinite(Y), axis=1))
        raise SimulationError("non-finite implicit step", t=t, rows=bad, state=X[bad])
    return Y[0] if single else Y


def _simulate_block(spec, scheme, grid, n, seed, block, save_idx, solver):
    rng = make_rng(seed, (2, block))
    X = spec.initial.sample(rng, n)
    out = {0: X.copy()} if 0 in save_idx else {}
    step = forward_em_step if scheme == "forward" else None
    for j, (t, dt) in enumerate(zip(grid.times[:-1], grid.dt)):
        try:
            if step is not None:
                X = step(spec, X, t, dt, rng)
            else:
                X = implicit_em_step(spec, X, t, dt, rng, solver)
        except SimulationError as exc:
            exc.diagnostics["step"] = j
            exc.diagnostics["block"] = block
            raise
        if j + 1 in save_idx:
            out[j + 1] = X.copy()
    return out


def simulate(spec, scheme, grid, n, seed=0, save_at=None, block_size=8192, workers=1,
             solver=NewtonConfig()):
    """Simulate ``n`` trajectories on ``grid``.

    Trajectories are processed in blocks of ``block_size``, each with its own
    random stream, so the output does not depend on ``workers``.

    Parameters
    ----------
    scheme : {"forward", "implicit"}
    save_at : iterable of int, optional
        Grid indices to return (all by default).

    Returns
    -------
    list of SampleBatch, one per saved grid time.
    """
    if scheme not in ("forward", "implicit"):
        raise ParameterError(f"unknown scheme {scheme!r}")
    n = int(n)
    save_idx = sorted(set(range(len(grid)) if save_at is None else (int(i) for i in save_at)))
    blocks = [(b, min(block_size, n - b * block_size)) for b in range((n + block_size - 1) // block_size)]

    def run(item):
        b, m = item
        try:
            return _simulate_block(spec, scheme, grid, m, seed, b, set(save_idx), solver)
        except SimulationError as exc:
            rows = exc.diagnostics.get("rows")
            if rows is not None:
                exc.diagnostics["trajectory"] = b * block_size + np.asarray(rows)
            raise

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, blocks))
    else:
        parts = [run(item) for item in blocks]
    return [
        SampleBatch(grid.times[i], np.concatenate([p[i] for p in parts]), f"em:{scheme}", seed)
        for i in save_idx
    ]


# --------------------------------------------------------------------------
# exact marginals


def sigma_t_matrix(B, t):
    """``Sigma_t = (1 + t^3/3) I + t B B^T + t^2/2 (B + B^T)`` and its symmetric root."""
    B = np.asarray(B, dtype=float)
    d = B.shape[0]
    S = (1.0 + t**3 / 3.0) * np.eye(d) + t * B @ B.T + 0.5 * t**2 * (B + B.T)
    return S, _sym_sqrt(S)


def _sym_sqrt(S):
    S = 0.5 * (S + S.T)
    w, Q = np.linalg.eigh(S)
    if np.any(w < -1e-12):
        raise SimulationError("covariance is not positive semi-definite", eigenvalues=w)
    w = np.clip(w, 0.0, None)
    return (Q * np.sqrt(w)) @ Q.T


@dataclass(frozen=True, eq=False)
class LinearParts:
    """``x_t = decay * x_0 + N(0, cov) + SaS^d(gamma)`` in distribution."""

    decay: float
    cov: np.ndarray
    gamma: float
    cov_sqrt: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.cov_sqrt is None:
            object.__setattr__(self, "cov_sqrt", _sym_sqrt(self.cov))


def linear_parts(spec, t):
    """Closed-form decomposition of the marginal at ``t`` for linear SDEs.

    Available for drifts ``zero``/``linear``/``linear_alpha`` with any
    catalog diffusion under zero drift, and constant diffusion under linear
    drift. Anything else raises ``CapabilityError``.
    """
    t = float(t)
    d, a, sig = spec.d, spec.alpha, spec.levy_sigma
    rate = _rate(spec)
    if spec.diffusion == "b_plus_t":
        if rate != 0.0:
            raise CapabilityError("closed form needs zero drift with B + tI diffusion")
        cov = sigma_t_matrix(spec.B, t)[0] - np.eye(d)
    elif spec.diffusion == "identity":
        cov = (t if rate == 0 else (1 - math.exp(-2 * rate * t)) / (2 * rate)) * np.eye(d)
    else:
        cov = np.zeros((d, d))
    if rate == 0:
        g_alpha = t
    else:
        g_alpha = (1 - math.exp(-a * rate * t)) / (a * rate)
    gamma = sig * g_alpha ** (1.0 / a)
    return LinearParts(math.exp(-rate * t), cov, gamma)


def marginal_gaussian_part(spec, t):
    """``(cov, gamma)`` with ``x_t = N(0, cov) + SaS(gamma)`` for Gaussian initial laws."""
    init = spec.initial
    if not (init.is_gaussian or init.kind == "point_mass"):
        raise CapabilityError(f"{init.kind} initial law: marginal has no Gaussian part")
    if init.kind == "point_mass" and np.any(init.location != 0):
        raise CapabilityError("point mass away from the origin is not supported")
    lp = linear_parts(spec, t)
    return lp.decay**2 * init.covariance + lp.cov, lp.gamma


def _rate(spec):
    rate = {"zero": 0.0, "linear": 1.0, "linear_alpha": 1.0 / spec.alpha}.get(spec.drift)
    if rate is None:
        raise CapabilityError(f"no closed-form marginal for drift {spec.drift!r}")
    return rate


def exact_parts(spec, t, n, rng, parts=None):
    """Sample the pieces of the exact marginal at (per-row) times ``t``.

    Returns a dict with ``m`` (transported initial point), ``g`` (Gaussian
    noise), ``l`` (Levy part) and ``gamma`` (per-row Levy scale) such that
    ``x = m + g + l``.  ``parts`` may map times to precomputed
    ``LinearParts`` (the ``B + tI`` benchmark on a grid).
    """
    t = np.broadcast_to(np.asarray(t, dtype=float), (n,))
    d, a, sig = spec.d, spec.alpha, spec.levy_sigma
    rate = _rate(spec)
    x0 = spec.initial.sample(rng, n)
    z = rng.standard_normal((n, d))
    L = standard_isotropic(a, d, n, rng)
    if spec.diffusion == "b_plus_t":
        uniq = np.unique(t)
        if uniq.size > 256:
            raise CapabilityError("B + tI sampling needs a time grid (matrix root per time)")
        m = x0.copy()
        g = np.empty((n, d))
        gamma = np.empty(n)
        for tv in uniq:
            lp = (parts or {}).get(float(tv)) or linear_parts(spec, tv)
            sel = t == tv
            g[sel] = z[sel] @ lp.cov_sqrt.T
            gamma[sel] = lp.gamma
    else:
        decay = np.exp(-rate * t)
        if spec.diffusion == "identity":
            var = t if rate == 0 else -np.expm1(-2 * rate * t) / (2 * rate)
        else:
            var = np.zeros(n)
        g_alpha = t if rate == 0 else -np.expm1(-a * rate * t) / (a * rate)
        m = decay[:, None] * x0
        g = np.sqrt(var)[:, None] * z
        gamma = sig * g_alpha ** (1.0 / a)
    return {"m": m, "g": g, "l": gamma[:, None] * L, "gamma": gamma, "t": t, "x0": x0}


def exact_marginal(spec, t, n, seed=0, stream=0):
    """Sample the exact law of ``x_t`` (linear benchmarks only).

    ``t`` may be a scalar or one time per row.
    """
    if np.any(np.asarray(t) < 0):
        raise ParameterError("t must be >= 0")
    rng = make_rng(seed, stream)
    p = exact_parts(spec, t, int(n), rng)
    tt = float(t) if np.ndim(t) == 0 else np.asarray(t, dtype=float)
    return SampleBatch(tt, p["m"] + p["g"] + p["l"], f"exact:{spec.benchmark}",
                       seed if isinstance(seed, int) else 0)


# --------------------------------------------------------------------------
# trajectory dump


def write_trajectories(path, batches, spec, scheme, grid, seed):
    """Columnar text dump; see README for the layout."""
    times = grid.times
    index = {float(t): i for i, t in enumerate(times)}
    with open(path, "w") as fh:
        fh.write("# fracsde-trajectories v1\n")
        fh.write(f"# benchmark={spec.benchmark} d={spec.d} alpha={spec.alpha!r} "
                 f"seed={seed} scheme={scheme}\n")
        fh.write("# grid=" + ",".join(f"{t:.17g}" for t in times) + "\n")
        cols = ["trajectory", "time_index"] + [f"x{i + 1}" for i in range(spec.d)]
        fh.write(" ".join(cols) + "\n")
        for b in batches:
            k = index[float(b.t)]
            n = b.points.shape[0]
            block = np.column_stack([np.arange(n), np.full(n, k), b.points])
            np.savetxt(fh, block, fmt=["%d", "%d"] + ["%.17g"] * spec.d)


def read_trajectories(path):
    """Return ``(header dict, grid times, {time_index: (n, d) array})``."""
    header, grid = {}, None
    with open(path) as fh:
        fh.readline()
        for tok in fh.readline()[1:].split():
            k, v = tok.split("=", 1)
            header[k] = v
        grid = np.array([float(v) for v in fh.readline().split("=", 1)[1].split(",")])
        fh.readline()
        data = np.loadtxt(fh, ndmin=2)
    out = {}
    for k in np.unique(data[:, 1]).astype(int):
        rows = data[data[:, 1] == k]
        out[int(k)] = rows[np.argsort(rows[:, 0]), 2:]
    return header, grid, out
