"""Batch generators feeding the trainers.

A sampler is a callable ``sampler(rng, n) -> dict`` of numpy arrays. It is
called once per epoch so every step sees fresh residual points.
"""

import numpy as np

from .errors import CapabilityError, ConfigError
from .sde import TimeGrid, exact_parts, linear_parts, simulate


def _times(rng, n, t_min, T, grid):
    if grid is None:
        return rng.uniform(t_min, T, size=n)
    g = np.asarray(grid, dtype=float)
    return g[rng.integers(0, g.size, size=n)]


def default_grid(spec):
    """Training times for benchmarks whose marginal needs a matrix root per time."""
    if spec.diffusion == "b_plus_t":
        return np.round(np.linspace(0.1, 1.0, 10) * spec.T, 12)
    return None


class ConditionalSampler:
    """Pieces ``(m, g, l, gamma)`` of the conditional law given ``x_0``.

    ``pure=True`` requires the conditional law to be pure Levy (no Brownian
    part), which is what plain FSM needs; otherwise the Gaussian part is
    returned for the mixed-noise estimator.
    """

    def __init__(self, spec, t_min, T=None, grid=None, pure=True):
        try:
            linear_parts(spec, spec.T)
        except CapabilityError as exc:
            raise ConfigError(
                f"conditional law of {spec.benchmark!r} is not decomposable ({exc}); "
                "use the score-fpinn route"
            ) from exc
        if spec.levy_sigma == 0:
            raise ConfigError("no Levy noise: there is no fractional score to match")
        if pure and spec.diffusion != "zero":
            raise ConfigError(
                f"{spec.benchmark!r} has Brownian noise; its conditional law is not pure "
                "Levy, use the mixed-fsm route"
            )
        self.spec, self.t_min, self.T = spec, float(t_min), float(T or spec.T)
        self.grid = default_grid(spec) if grid is None else grid
        self._parts = {}
        if self.grid is not None:
            self._parts = {float(t): linear_parts(spec, t) for t in self.grid}

    def __call__(self, rng, n):
        t = _times(rng, n, self.t_min, self.T, self.grid)
        p = exact_parts(self.spec, t, n, rng, self._parts)
        x = p["m"] + p["g"] + p["l"]
        return {"t": t, "x": x, "x0": p["m"], "m": p["m"], "g": p["g"], "l": p["l"],
                "gamma": p["gamma"]}


class MarginalSampler:
    """Points ``x ~ p_t`` at random times, from the exact law when available.

    For nonlinear drifts a pool of forward-EM trajectories is simulated once
    (``pool_size`` paths, step ``dt``, ``pool_times`` saved slices) and
    batches are drawn from it with replacement.
    """

    def __init__(self, spec, t_min, T=None, grid=None, pool_size=20000, dt=1e-3,
                 pool_times=100, seed=0, with_initial=False):
        self.spec, self.t_min, self.T = spec, float(t_min), float(T or spec.T)
        self.grid = default_grid(spec) if grid is None else grid
        self.with_initial = with_initial
        self.pool = None
        self._parts = {}
        try:
            linear_parts(spec, self.T)
            if self.grid is not None:
                self._parts = {float(t): linear_parts(spec, t) for t in self.grid}
        except CapabilityError:
            steps = max(1, int(round(self.T / dt)))
            tg = TimeGrid.uniform(self.T, steps)
            keep = np.unique(np.linspace(0, steps, pool_times + 1).round().astype(int))
            keep = keep[tg.times[keep] >= self.t_min]
            batches = simulate(spec, "forward", tg, pool_size, seed=seed, save_at=keep)
            self.pool_t = np.array([b.t for b in batches])
            self.pool = np.stack([b.points for b in batches])  # (times, n, d)

    def __call__(self, rng, n):
        if self.pool is not None:
            it = rng.integers(0, self.pool_t.size, size=n)
            ip = rng.integers(0, self.pool.shape[1], size=n)
            out = {"t": self.pool_t[it], "x": self.pool[it, ip]}
        else:
            t = _times(rng, n, self.t_min, self.T, self.grid)
            p = exact_parts(self.spec, t, n, rng, self._parts)
            out = {"t": t, "x": p["m"] + p["g"] + p["l"]}
        if self.with_initial:
            out["x0"] = self.spec.initial.sample(rng, n)
        return out


class StaticSampler:
    """Time-independent task: ``x ~ law`` with ``t = 0``."""

    def __init__(self, initial):
        self.initial = initial

    def __call__(self, rng, n):
        return {"t": np.zeros(n), "x": self.initial.sample(rng, n)}
