"""Drivers and the conditional f-expectation on the lattice.

A driver is ``f(t, y, z, kappa)`` with a declared Lipschitz constant.  The
one-step scheme is implicit in ``y`` and explicit in ``(z, kappa)``:

    y = E[next] + f(t_k, y, z, kappa) * dt

with ``(z, kappa, h)`` the orthogonal projection of the next-step values.
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from .errors import BadOrdering, InvalidInput, NoContraction, NonConvergence
from .expr import compile_expression
from .lattice import (
    BEFORE,
    NUM_BRANCHES,
    Lattice,
    Phase,
    Process,
    StoppingRule,
    conditional_expectation,
    project_increment,
)

PICARD_TOL = 1e-12
PICARD_MAX_ITER = 200
DRIVER_VARIABLES = ("t", "y", "z", "kappa")


@dataclass(frozen=True, eq=False)
class Driver:
    """``f(t, y, z, kappa)`` with its declared Lipschitz constant.

    ``monotone`` records the user's claim that the jump-monotonicity
    condition (slope in kappa at least ``-lambda``) holds; it is metadata,
    checked by :func:`check_monotonicity`, never assumed by the solver.
    """

    func: Callable[..., np.ndarray]
    lipschitz: float
    monotone: bool = True
    name: str = "custom"
    params: Mapping = field(default_factory=dict)

    def __call__(self, t, y, z, kappa) -> np.ndarray:
        y = np.asarray(y, dtype=float)
        out = np.asarray(self.func(t, y, z, kappa), dtype=float)
        shape = np.broadcast_shapes(np.shape(y), np.shape(z), np.shape(kappa))
        return np.broadcast_to(out, shape)

    def shifted(self, delta: float, lipschitz: float | None = None) -> Driver:
        """``f + delta``; same Lipschitz constant unless overridden."""
        base = self.func
        return Driver(
            lambda t, y, z, kappa: base(t, y, z, kappa) + delta,
            self.lipschitz if lipschitz is None else lipschitz,
            self.monotone,
            f"{self.name}+{delta!r}",
            {**self.params, "shift": delta},
        )

    def describe(self) -> dict:
        return {"name": self.name, "lipschitz": self.lipschitz, **dict(self.params)}


def zero_driver() -> Driver:
    return Driver(lambda t, y, z, kappa: np.zeros(np.shape(y)), 0.0, True, "zero", {})


def linear_driver(
    r: float = 0.0,
    z_coef: float = 0.0,
    kappa_coef: float = 0.0,
    const: float = 0.0,
    intensity: float | None = None,
) -> Driver:
    """``f = const - r y + z_coef z + kappa_coef kappa``."""
    if kappa_coef and not intensity:
        raise InvalidInput("linear driver with a kappa term needs the jump intensity")
    lip = abs(r) + abs(z_coef) + (abs(kappa_coef) / math.sqrt(intensity) if kappa_coef else 0.0)

    def f(t, y, z, kappa):
        return const - r * y + z_coef * z + kappa_coef * kappa

    params = {"r": r, "z_coef": z_coef, "kappa_coef": kappa_coef, "const": const}
    return Driver(f, lip, True, "linear", params)


def custom_driver(expression: str, lipschitz: float, monotone: bool = True) -> Driver:
    fn = compile_expression(expression, DRIVER_VARIABLES)
    if lipschitz < 0:
        raise InvalidInput("lipschitz constant must be nonnegative")
    return Driver(fn, float(lipschitz), monotone, "custom", {"expression": expression})


DriverBuilder = Callable[..., Driver]
DRIVER_CATALOG: dict[str, DriverBuilder] = {}


def register_driver(name: str, builder: DriverBuilder) -> None:
    DRIVER_CATALOG[name] = builder


def make_driver(spec: Mapping, intensity: float, grid=None) -> Driver:
    """Build a catalog driver from ``{"name": ..., **params}``."""
    spec = dict(spec)
    name = spec.pop("name", None)
    if name not in DRIVER_CATALOG:
        raise InvalidInput(f"unknown driver {name!r}; known: {sorted(DRIVER_CATALOG)}")
    return DRIVER_CATALOG[name](spec, intensity=intensity, grid=grid)


def _build_zero(params, intensity, grid):
    if params:
        raise InvalidInput(f"zero driver takes no parameters, got {sorted(params)}")
    return zero_driver()


def _build_linear(params, intensity, grid):
    allowed = {"r", "z_coef", "kappa_coef", "const"}
    extra = set(params) - allowed
    if extra:
        raise InvalidInput(f"unknown linear driver parameters {sorted(extra)}")
    return linear_driver(**{k: float(v) for k, v in params.items()}, intensity=intensity)


def _build_custom(params, intensity, grid):
    try:
        expression = params["expression"]
        lipschitz = float(params["lipschitz"])
    except KeyError as exc:
        raise InvalidInput(f"custom driver needs {exc.args[0]!r}") from exc
    return custom_driver(expression, lipschitz, bool(params.get("monotone", True)))


register_driver("zero", _build_zero)
register_driver("linear", _build_linear)
register_driver("custom", _build_custom)


class OneStep(NamedTuple):
    y: np.ndarray
    z: np.ndarray
    kappa: np.ndarray
    h: np.ndarray


def onestep_implicit(
    next_values: np.ndarray,
    driver: Driver,
    t: float,
    lattice: Lattice,
    y_init: np.ndarray | float | None = None,
    tol: float = PICARD_TOL,
    max_iter: int = PICARD_MAX_ITER,
) -> OneStep:
    """Vectorized implicit step over rows of ``next_values`` (shape ``(n, 4)``)."""
    if driver.lipschitz * lattice.dt >= 1:
        raise NoContraction(
            f"K_f * dt = {driver.lipschitz * lattice.dt} must be < 1 for the implicit step"
        )
    v = np.asarray(next_values, dtype=float)
    mean = conditional_expectation(v, lattice)
    z, kappa, h = project_increment(v, lattice)
    y = picard(mean, z, kappa, driver, t, lattice.dt, y_init, tol, max_iter)
    return OneStep(y, z, kappa, h)


def picard(mean, z, kappa, driver: Driver, t: float, dt: float, y_init=None, tol=PICARD_TOL, max_iter=PICARD_MAX_ITER):
    """Fixed point of ``g(y) = mean + f(t, y, z, kappa) dt``.

    Plain iteration accelerated by a secant step; the secant slope is clipped
    to the contraction bound ``K_f dt`` so each step stays a contraction.
    Stops once ``|g(y) - y| <= tol`` everywhere and returns ``g(y)``.
    """
    bound = min(driver.lipschitz * dt, 0.99)
    y = mean.copy() if y_init is None else np.broadcast_to(np.asarray(y_init, dtype=float), mean.shape).copy()
    g = mean + driver(t, y, z, kappa) * dt
    prev_y = prev_g = None
    for _ in range(max_iter):
        if not y.size or np.max(np.abs(g - y)) <= tol:
            return g
        if prev_y is None:
            step = g
        else:
            dy = y - prev_y
            slope = np.divide(g - prev_g, dy, out=np.zeros_like(dy), where=dy != 0)
            np.clip(slope, -bound, bound, out=slope)
            step = y + (g - y) / (1 - slope)
        prev_y, prev_g = y, g
        y = step
        g = mean + driver(t, y, z, kappa) * dt
    raise NonConvergence(f"Picard iteration did not reach {tol} in {max_iter} iterations")


@dataclass
class BsdeSolution:
    """Node-indexed solution; ``z, kappa, h`` are zero on stopped or frozen nodes."""

    lattice: Lattice
    x: Process
    z: list[np.ndarray] = field(repr=False)
    kappa: list[np.ndarray] = field(repr=False)
    h: list[np.ndarray] = field(repr=False)
    rule: StoppingRule

    @property
    def x0(self) -> float:
        return float(self.x.main[0][0])


def _frozen_values(lattice: Lattice, terminal: Process, rule: StoppingRule) -> Process:
    """Value each node would carry once the path has stopped (NaN before)."""
    K = lattice.num_steps
    carry_main = [np.where(rule.hit(0, Phase.MAIN), terminal.main[0], np.nan)]
    carry_post = []
    for k in range(K):
        carry_post.append(np.where(rule.hit(k, Phase.POST), terminal.post[k], carry_main[k]))
        inherited = np.repeat(carry_post[k], NUM_BRANCHES)
        carry_main.append(np.where(rule.hit(k + 1, Phase.MAIN), terminal.main[k + 1], inherited))
    return Process(carry_main, carry_post)


def solve_bsde(
    lattice: Lattice,
    terminal: Process,
    rule: StoppingRule,
    driver: Driver,
    y_init_shift: float | None = None,
) -> BsdeSolution:
    """Backward sweep for ``E^f`` with terminal time ``rule``.

    ``terminal`` is read only on the rule's first-hit nodes.  After the stop
    the driver is switched off, so the solution stays frozen at the stopped
    value.  ``y_init_shift`` offsets the Picard starting point.
    """
    K = lattice.num_steps
    carry = _frozen_values(lattice, terminal, rule)
    x_main: list[np.ndarray] = [None] * (K + 1)
    x_post: list[np.ndarray] = [None] * K
    zs, ks, hs = [None] * K, [None] * K, [None] * K
    x_main[K] = carry.main[K].copy()
    for k in range(K - 1, -1, -1):
        n = NUM_BRANCHES**k
        active = rule.status_post[k] == BEFORE
        nxt = x_main[k + 1].reshape(n, NUM_BRANCHES)
        post = carry.post[k].copy()
        z = np.zeros(n)
        kappa = np.zeros(n)
        h = np.zeros((n, NUM_BRANCHES))
        if active.any():
            init = None
            if y_init_shift is not None:
                init = conditional_expectation(nxt[active], lattice) + y_init_shift
            step = onestep_implicit(nxt[active], driver, lattice.time(k), lattice, init)
            post[active] = step.y
            z[active], kappa[active], h[active] = step.z, step.kappa, step.h
        x_post[k], zs[k], ks[k], hs[k] = post, z, kappa, h
        x_main[k] = np.where(rule.status_main[k] == BEFORE, post, carry.main[k])
    return BsdeSolution(lattice, Process(x_main, x_post), zs, ks, hs, rule)


def ef_conditional_expectation(
    lattice: Lattice,
    sigma: StoppingRule,
    tau: StoppingRule,
    zeta: Process,
    driver: Driver,
) -> Process:
    """``E^f_{sigma, tau}(zeta)``: values on sigma's first-hit nodes, NaN elsewhere."""
    if not sigma.precedes(tau):
        raise BadOrdering("sigma must stop no later than tau on every path")
    x = solve_bsde(lattice, zeta, tau, driver).x
    return Process(
        [np.where(sigma.hit(k, Phase.MAIN), x.main[k], np.nan) for k in range(lattice.num_steps + 1)],
        [np.where(sigma.hit(k, Phase.POST), x.post[k], np.nan) for k in range(lattice.num_steps)],
    )


def values_on_hits(process: Process, rule: StoppingRule) -> np.ndarray:
    """Concatenate ``process`` over the rule's first-hit nodes in sub-time order."""
    parts = []
    for k in range(rule.lattice.num_steps + 1):
        parts.append(process.main[k][rule.hit(k, Phase.MAIN)])
        if k < rule.lattice.num_steps:
            parts.append(process.post[k][rule.hit(k, Phase.POST)])
    return np.concatenate(parts)


@dataclass
class MonotonicityReport:
    min_slope: float
    passes: bool
    worst_sample: tuple[float, float, float, float, float] | None


def _sample_points(rng: np.random.Generator, n: int, horizon: float, scale: float):
    t = rng.uniform(0.0, horizon, n)
    y = rng.normal(0.0, scale, n)
    z = rng.normal(0.0, scale, n)
    k1 = rng.normal(0.0, scale, n)
    gap = rng.choice([1e-3, 1e-1, 1.0], n) * rng.uniform(0.5, 2.0, n) * rng.choice([-1.0, 1.0], n)
    return t, y, z, k1, k1 + gap


def check_monotonicity(
    driver: Driver,
    intensity: float,
    sample_count: int = 2000,
    seed: int = 0,
    horizon: float = 1.0,
    scale: float = 2.0,
) -> MonotonicityReport:
    """Sampled minimum of ``(f(k1) - f(k2)) / (lambda (k1 - k2))``; passes iff >= -1."""
    rng = np.random.default_rng(seed)
    t, y, z, k1, k2 = _sample_points(rng, sample_count, horizon, scale)
    slope = (driver(t, y, z, k1) - driver(t, y, z, k2)) / (intensity * (k1 - k2))
    i = int(np.argmin(slope))
    min_slope = float(slope[i])
    return MonotonicityReport(
        min_slope,
        min_slope >= -1 - 1e-12,
        (float(t[i]), float(y[i]), float(z[i]), float(k1[i]), float(k2[i])),
    )


def check_lipschitz(
    driver: Driver, intensity: float, sample_count: int = 2000, seed: int = 0, horizon: float = 1.0
) -> float:
    """Largest sampled ratio ``|f1 - f2| / (|dy| + |dz| + sqrt(lambda)|dk|)``.

    A value above ``driver.lipschitz`` means the declared constant is wrong.
    """
    rng = np.random.default_rng(seed)
    n = sample_count
    t = rng.uniform(0.0, horizon, n)
    a = rng.normal(0.0, 2.0, (3, n))
    b = a + rng.normal(0.0, 1.0, (3, n)) * rng.choice([1e-3, 1.0], (1, n))
    num = np.abs(driver(t, *a) - driver(t, *b))
    den = np.abs(a[0] - b[0]) + np.abs(a[1] - b[1]) + math.sqrt(intensity) * np.abs(a[2] - b[2])
    return float(np.max(num / den))


def check_scheme_monotonicity(
    driver: Driver, lattice: Lattice, sample_count: int = 2000, seed: int = 0, scale: float = 2.0
) -> float:
    """Smallest sampled branch weight of the linearized one-step map.

    The implicit step is nondecreasing in the next-step values iff every
    weight ``1 + f_z dW_b + f_kappa dt dN~_b / Var(dN~)`` is nonnegative.
    One-sided difference quotients are combined in the worst way, so kinks
    are covered.
    """
    rng = np.random.default_rng(seed)
    n = sample_count
    t = rng.uniform(0.0, lattice.horizon, n)
    y, z, kappa = rng.normal(0.0, scale, (3, n))
    eps = 1e-6
    f0 = driver(t, y, z, kappa)
    fz = [(driver(t, y, z + eps, kappa) - f0) / eps, (f0 - driver(t, y, z - eps, kappa)) / eps]
    fk = [(driver(t, y, z, kappa + eps) - f0) / eps, (f0 - driver(t, y, z, kappa - eps)) / eps]
    worst = np.inf
    for gz in fz:
        for gk in fk:
            for b in range(NUM_BRANCHES):
                w = 1 + gz * lattice.dW[b] + gk * lattice.dt * lattice.dN_comp[b] / lattice.var_n
                worst = min(worst, float(np.min(w)))
    return worst


def ef_terminal_process(lattice: Lattice, values: np.ndarray) -> Process:
    """Process holding ``values`` at maturity and NaN elsewhere."""
    K = lattice.num_steps
    main = [np.full(NUM_BRANCHES**k, np.nan) for k in range(K)] + [np.asarray(values, dtype=float)]
    post = [np.full(NUM_BRANCHES**k, np.nan) for k in range(K)]
    return Process(main, post)


__all__ = [
    "Driver",
    "BsdeSolution",
    "OneStep",
    "MonotonicityReport",
    "DRIVER_CATALOG",
    "check_lipschitz",
    "check_monotonicity",
    "check_scheme_monotonicity",
    "custom_driver",
    "ef_conditional_expectation",
    "ef_terminal_process",
    "linear_driver",
    "make_driver",
    "onestep_implicit",
    "register_driver",
    "solve_bsde",
    "values_on_hits",
    "zero_driver",
]
