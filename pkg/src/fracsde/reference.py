"""Reference log-likelihoods and the error report.

The Monte-Carlo oracle handles laws of the form ``N(0, C) + SaS^d(gamma)``.
Its default estimator conditions on the stable subordinator: with
``L = gamma sqrt(A) G`` the sum is Gaussian given ``A``, so

    p(x) = E_A[ N(x; 0, C + gamma^2 A I) ],

which is the conditional expectation of the plain estimator
``mean_j N(x - L_j; 0, C)`` and therefore has the same mean and a smaller
variance. Both estimators reduce to one matrix product per sample block after
rotating into the eigenbasis of ``C``.
"""

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import gammaln, logsumexp

from ._rng import make_rng
from .errors import CapabilityError, ParameterError
from .sde import marginal_gaussian_part
from .stable import standard_isotropic, standard_subordinator

_LOG2PI = math.log(2.0 * math.pi)


class _StreamingLse:
    """Row-wise running log-sum-exp (and optional weighted sums)."""

    def __init__(self, m, k=0):
        self.M = np.full(m, -np.inf)
        self.S = np.zeros(m)
        self.V = np.zeros((m, k)) if k else None

    def add(self, logw, values=None):
        Mb = np.max(logw, axis=1)
        Mn = np.maximum(self.M, Mb)
        safe = np.where(np.isfinite(Mn), Mn, 0.0)
        scale = np.exp(self.M - safe)
        E = np.exp(logw - safe[:, None])
        self.S = self.S * scale + E.sum(axis=1)
        if values is not None:
            self.V = self.V * scale[:, None] + E @ values
        self.M = Mn

    def logsum(self):
        with np.errstate(divide="ignore"):
            return np.where(self.S > 0, self.M + np.log(self.S), -np.inf)


def _eig(cov):
    w, Q = np.linalg.eigh(0.5 * (cov + cov.T))
    return np.clip(w, 0.0, None), Q


def gaussian_ll(X, cov, mean=None):
    """``log N(x; mean, cov)`` row-wise."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if mean is not None:
        X = X - mean
    L = np.linalg.cholesky(cov)
    Z = np.linalg.solve(L, X.T)
    logdet = 2.0 * np.sum(np.log(np.diag(L)))
    return -0.5 * (X.shape[1] * _LOG2PI + logdet + np.sum(Z * Z, axis=0))


def cauchy_ll(X, gamma):
    """Multivariate Cauchy (SaS with alpha = 1) log-density."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    d = X.shape[1]
    r2 = np.sum(X * X, axis=1) / gamma**2
    return (gammaln(0.5 * (d + 1)) - gammaln(0.5) - 0.5 * d * math.log(math.pi * gamma**2)
            - 0.5 * (d + 1) * np.log1p(r2))


def _mc_samples(alpha, d, n, seed, method, block):
    """Yield deterministic sample blocks (subordinator draws or Levy vectors)."""
    for b, start in enumerate(range(0, n, block)):
        m = min(block, n - start)
        rng = make_rng(seed, (3, b))
        if method == "subordinated":
            yield standard_subordinator(alpha, m, rng)
        else:
            yield standard_isotropic(alpha, d, m, rng)


def mc_ll_oracle(spec, t, eval_points, n_mc=10**6, seed=0, method="subordinated",
                 block=1 << 16, chunk=512, workers=1):
    """Monte-Carlo log-likelihood of ``x_t`` for linear benchmarks.

    Parameters
    ----------
    spec : SdeSpec
        Its marginal at ``t`` must be a Gaussian plus an isotropic stable part
        (``basic``, ``complicated``, ``ou_levy``, ``pure_levy``).
    t : float
    eval_points : (m, d) array
    n_mc : int
    method : {"subordinated", "direct"}
    workers : int
        Evaluation points are split across threads; the result does not
        depend on the number of workers.

    Returns
    -------
    (m,) array. Points where every summand underflows get ``-inf`` and a
    ``RuntimeWarning`` reports how many.
    """
    X = np.atleast_2d(np.asarray(eval_points, dtype=float))
    cov, gamma = marginal_gaussian_part(spec, t)
    if gamma == 0.0 or spec.alpha == 2.0:
        return gaussian_ll(X, cov + 2.0 * gamma**2 * np.eye(spec.d))
    w, Q = _eig(cov)
    Y = X @ Q
    blocks = list(_mc_samples(spec.alpha, spec.d, int(n_mc), seed, method, block))
    if method == "direct":
        blocks = [b @ Q for b in blocks]

    def run(i0):
        Yc = Y[i0:i0 + chunk]
        acc = _StreamingLse(Yc.shape[0])
        for blk in blocks:
            acc.add(_kernel(Yc, w, gamma, blk, method))
        return acc.logsum()

    starts = list(range(0, X.shape[0], chunk))
    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    out = np.concatenate(parts) - math.log(int(n_mc))
    bad = int(np.sum(~np.isfinite(out)))
    if bad:
        warnings.warn(f"{bad} evaluation points underflowed in every summand", RuntimeWarning)
    return out


def _kernel(Y, w, gamma, blk, method):
    """``log N(y; ., .)`` for every (point, draw) pair, rotated coordinates."""
    d = Y.shape[1]
    if method == "subordinated":
        S = w[None, :] + (gamma**2) * blk[:, None]
        return (-0.5 * (d * _LOG2PI + np.sum(np.log(S), axis=1))[None, :]
                - 0.5 * (Y * Y) @ (1.0 / S).T)
    if method == "direct":
        if np.any(w <= 0):
            raise CapabilityError("direct estimator needs a non-degenerate Gaussian part")
        L = gamma * blk
        iw = 1.0 / w
        const = -0.5 * (d * _LOG2PI + np.sum(np.log(w)))
        return (const - 0.5 * np.sum(Y * Y * iw, axis=1)[:, None]
                + (Y * iw) @ L.T - 0.5 * np.sum(L * L * iw, axis=1)[None, :])
    raise ParameterError(f"unknown oracle method {method!r}")


def mc_ll_samples(X, cov, gamma, draws, method="subordinated"):
    """Oracle LL from one explicit array of standard draws (testing helper)."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    w, Q = _eig(np.asarray(cov, dtype=float))
    blk = draws @ Q if method == "direct" else draws
    return logsumexp(_kernel(X @ Q, w, gamma, blk, method), axis=1) - math.log(draws.shape[0])


def mc_score_oracle(spec, t, eval_points, n_mc=10**6, seed=0, block=1 << 16, chunk=512):
    """Fractional and vanilla scores of ``x_t`` by conditioning on the subordinator.

    Given ``A``, ``x = g + l`` is Gaussian with ``E[l | x, A] = gamma^2 A
    (C + gamma^2 A I)^{-1} x``; the fractional score is the posterior mean of
    ``-l / (alpha gamma^alpha)`` and the vanilla score the posterior mean of
    ``-(C + gamma^2 A I)^{-1} x``.

    Returns
    -------
    (fractional, vanilla), each of shape (m, d)
    """
    X = np.atleast_2d(np.asarray(eval_points, dtype=float))
    cov, gamma = marginal_gaussian_part(spec, t)
    a = spec.alpha
    if gamma == 0.0:
        raise CapabilityError("no Levy part: the fractional score is undefined here")
    w, Q = _eig(cov)
    Y = X @ Q
    d = X.shape[1]
    draws = list(_mc_samples(a, d, int(n_mc), seed, "subordinated", block))
    frac = np.empty_like(Y)
    van = np.empty_like(Y)
    for i0 in range(0, Y.shape[0], chunk):
        Yc = Y[i0:i0 + chunk]
        acc = _StreamingLse(Yc.shape[0], 2 * d)
        for A in draws:
            S = w[None, :] + gamma**2 * A[:, None]
            vals = np.concatenate([gamma**2 * A[:, None] / S, 1.0 / S], axis=1)
            acc.add(_kernel(Yc, w, gamma, A, "subordinated"), vals)
        mean = acc.V / acc.S[:, None]
        frac[i0:i0 + chunk] = -(mean[:, :d] * Yc) / (a * gamma**a)
        van[i0:i0 + chunk] = -(mean[:, d:] * Yc)
    return frac @ Q.T, van @ Q.T


# --------------------------------------------------------------------------
# radial KDE


def silverman_bandwidth(r):
    r = np.asarray(r, dtype=float)
    iqr = np.subtract(*np.percentile(r, [75, 25]))
    s = min(np.std(r, ddof=1), iqr / 1.34) if iqr > 0 else np.std(r, ddof=1)
    return 0.9 * s * r.size ** (-0.2)


def log_sphere_area(d):
    """``log(2 pi^{d/2} / Gamma(d/2))``, the area of the unit sphere in R^d."""
    return math.log(2.0) + 0.5 * d * math.log(math.pi) - gammaln(0.5 * d)


def radial_kde_ll(samples, eval_points, bandwidth="silverman", return_flags=False,
                  chunk=256, block=1 << 17):
    """LL of an isotropic law from a 1D Gaussian KDE on sample radii.

    ``log p(x) = log f_R(|x|) - (d - 1) log |x| - log S_{d-1}``.

    Parameters
    ----------
    samples : (n, d) array
    eval_points : (m, d) array
    bandwidth : "silverman" or float
    return_flags : bool
        Also return a boolean mask of evaluation points whose radius lies
        below the first decile of the sample radii (extrapolation there is
        dominated by the ``r^{1-d}`` factor).
    """
    S = np.atleast_2d(np.asarray(samples, dtype=float))
    X = np.atleast_2d(np.asarray(eval_points, dtype=float))
    if S.shape[1] != X.shape[1]:
        raise ParameterError("samples and evaluation points differ in dimension")
    d = S.shape[1]
    rs = np.linalg.norm(S, axis=1)
    r = np.linalg.norm(X, axis=1)
    h = silverman_bandwidth(rs) if bandwidth == "silverman" else float(bandwidth)
    if not h > 0:
        raise ParameterError("bandwidth must be positive")
    logf = np.empty(r.size)
    for i0 in range(0, r.size, chunk):
        rc = r[i0:i0 + chunk]
        acc = _StreamingLse(rc.size)
        for j0 in range(0, rs.size, block):
            z = (rc[:, None] - rs[None, j0:j0 + block]) / h
            acc.add(-0.5 * z * z)
        logf[i0:i0 + chunk] = acc.logsum()
    logf += -math.log(rs.size * h) - 0.5 * _LOG2PI
    with np.errstate(divide="ignore"):
        ll = logf - (d - 1) * np.log(r) - log_sphere_area(d)
    flags = r < np.percentile(rs, 10)
    if np.any(flags):
        warnings.warn(f"{int(flags.sum())} evaluation points lie below the first radius decile",
                      RuntimeWarning)
    return (ll, flags) if return_flags else ll


# --------------------------------------------------------------------------
# closed forms


def exact_ll(spec, t, eval_points):
    """Closed-form LL where one exists.

    Covered: every linear benchmark whose marginal is Gaussian (no Levy part
    or ``alpha = 2``) and the pure Cauchy process from a point mass at the
    origin. Otherwise ``CapabilityError`` points to ``mc_ll_oracle``.
    """
    X = np.atleast_2d(np.asarray(eval_points, dtype=float))
    try:
        cov, gamma = marginal_gaussian_part(spec, t)
    except CapabilityError as exc:
        raise CapabilityError(f"no closed form for {spec.benchmark!r}: {exc}; "
                              "use mc_ll_oracle or radial_kde_ll") from exc
    if gamma == 0.0 or spec.alpha == 2.0:
        return gaussian_ll(X, cov + 2.0 * gamma**2 * np.eye(spec.d))
    if spec.alpha == 1.0 and not np.any(cov):
        return cauchy_ll(X, gamma)
    raise CapabilityError(f"no closed form for {spec.benchmark!r} at alpha={spec.alpha}; "
                          "use mc_ll_oracle")


# --------------------------------------------------------------------------
# report


@dataclass
class EvalReport:
    ll_rel_l2: float
    ll_rel_linf: float
    pdf_rel_l2: float
    pdf_rel_linf: float
    n_test_kept: int
    n_test_dropped: int
    metadata: dict = field(default_factory=dict)

    def as_dict(self):
        return dict(ll_rel_l2=self.ll_rel_l2, ll_rel_linf=self.ll_rel_linf,
                    pdf_rel_l2=self.pdf_rel_l2, pdf_rel_linf=self.pdf_rel_linf,
                    n_test_kept=self.n_test_kept, n_test_dropped=self.n_test_dropped,
                    **self.metadata)


def make_report(pred_ll, ref_ll, drop_fraction=0.10, metadata=None):
    """Relative errors after dropping the lowest-likelihood test points.

    PDFs are compared as ``exp(LL - max ref LL)``; the common shift cancels in
    both relative metrics.
    """
    p = np.asarray(pred_ll, dtype=float).ravel()
    r = np.asarray(ref_ll, dtype=float).ravel()
    if p.shape != r.shape:
        raise ParameterError("prediction and reference differ in length")
    if not 0 <= drop_fraction < 1:
        raise ParameterError("drop_fraction must lie in [0, 1)")
    m = r.size
    n_drop = int(math.floor(drop_fraction * m + 1e-9))
    if m == 0 or n_drop >= m:
        raise ParameterError("no test points left after filtering")
    keep = np.sort(np.argsort(r, kind="stable")[n_drop:])
    p, r = p[keep], r[keep]
    if not np.any(r):
        raise ParameterError("reference LL is identically zero; relative errors are undefined")
    shift = np.max(r)
    pp, pr = np.exp(p - shift), np.exp(r - shift)
    return EvalReport(
        ll_rel_l2=float(np.linalg.norm(p - r) / np.linalg.norm(r)),
        ll_rel_linf=float(np.max(np.abs(p - r)) / np.max(np.abs(r))),
        pdf_rel_l2=float(np.linalg.norm(pp - pr) / np.linalg.norm(pr)),
        pdf_rel_linf=float(np.max(np.abs(pp - pr)) / np.max(np.abs(pr))),
        n_test_kept=int(keep.size),
        n_test_dropped=n_drop,
        metadata=dict(metadata or {}),
    )
