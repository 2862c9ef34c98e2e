"""Two risky assets on the lattice and American options priced by an RBSDE.

Asset ``i`` moves by the factor ``1 + mu_i dt + sigma_i dW + beta_i dN~`` on
each random edge.  With ``Sigma = [[sigma_1, beta_1], [sigma_2, beta_2]]``
a hedge ``phi`` (units of wealth in each asset) maps to the BSDE controls by
``(z, kappa) = phi' Sigma``.
"""

from __future__ import annotations

import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from .bsde import Driver, check_monotonicity, custom_driver, onestep_implicit, register_driver
from .errors import InvalidInput, MonotonicityFailed, PositivityViolated
from .expr import compile_expression
from .lattice import GridSpec, Lattice, Phase, Process
from .rbsde import Obstacle, RbsdeSolution, solve_rbsde

PAYOFF_VARIABLES = ("s1", "s2", "t")
BRANCH_LABELS = ("up", "down", "up+jump", "down+jump")


@dataclass(frozen=True)
class Coefficients:
    r: float
    mu: tuple[float, float]
    sigma: tuple[float, float]
    beta_jump: tuple[float, float]

    @property
    def matrix(self) -> np.ndarray:
        return np.array([[self.sigma[0], self.beta_jump[0]], [self.sigma[1], self.beta_jump[1]]])

    @property
    def risk_premium(self) -> np.ndarray:
        """``theta = Sigma^{-1} (mu - r 1)``."""
        return np.linalg.solve(self.matrix, np.asarray(self.mu) - self.r)

    @property
    def unit_exposure(self) -> np.ndarray:
        """``u = Sigma^{-1} 1``, so ``(z, kappa) Sigma^{-1} 1 = u_1 z + u_2 kappa``."""
        return np.linalg.solve(self.matrix, np.ones(2))


@dataclass(frozen=True)
class MarketModel:
    """Constant coefficients, optionally overridden step by step via ``schedule``.

    Each ``schedule`` entry is a mapping with any of the keys ``r``, ``mu``,
    ``sigma``, ``beta_jump``.
    """

    r: float
    mu: tuple[float, float]
    sigma: tuple[float, float]
    beta_jump: tuple[float, float]
    intensity: float
    s0: tuple[float, float] = (1.0, 1.0)
    schedule: tuple[Mapping, ...] = ()

    def __post_init__(self):
        for name in ("mu", "sigma", "beta_jump", "s0"):
            value = tuple(float(v) for v in getattr(self, name))
            if len(value) != 2:
                raise InvalidInput(f"market {name} needs two entries")
            object.__setattr__(self, name, value)
        object.__setattr__(self, "schedule", tuple(dict(s) for s in self.schedule))
        self.validate()

    def coefficients(self, k: int = 0) -> Coefficients:
        base = {"r": self.r, "mu": self.mu, "sigma": self.sigma, "beta_jump": self.beta_jump}
        if self.schedule:
            extra = set(self.schedule[k]) - set(base)
            if extra:
                raise InvalidInput(f"unknown schedule keys {sorted(extra)} at step {k}")
            base.update(self.schedule[k])
        return Coefficients(
            float(base["r"]),
            tuple(float(v) for v in base["mu"]),
            tuple(float(v) for v in base["sigma"]),
            tuple(float(v) for v in base["beta_jump"]),
        )

    def _all_coefficients(self) -> list[Coefficients]:
        return [self.coefficients(k) for k in range(max(len(self.schedule), 1))]

    def validate(self) -> None:
        if self.intensity <= 0:
            raise InvalidInput("jump intensity must be positive")
        if min(self.s0) <= 0:
            raise InvalidInput("initial prices must be positive")
        for c in self._all_coefficients():
            if min(c.beta_jump) <= -1:
                raise InvalidInput(f"jump sizes must exceed -1, got {c.beta_jump}")

    def require_invertible(self) -> None:
        """Pricing and hedging need ``Sigma`` invertible at every step."""
        for c in self._all_coefficients():
            if abs(np.linalg.det(c.matrix)) < 1e-12:
                raise InvalidInput(f"volatility matrix {c.matrix.tolist()} is singular")

    def condition_number(self) -> float:
        return max(float(np.linalg.cond(c.matrix)) for c in self._all_coefficients())


def _check_schedule(model: MarketModel, lattice: Lattice) -> None:
    if model.schedule and len(model.schedule) != lattice.num_steps:
        raise InvalidInput(f"schedule has {len(model.schedule)} entries for {lattice.num_steps} steps")
    if not math.isclose(model.intensity, lattice.intensity):
        raise InvalidInput("market and grid jump intensities differ")


def simulate_assets(model: MarketModel, lattice: Lattice) -> tuple[Process, Process]:
    _check_schedule(model, lattice)
    K = lattice.num_steps
    prices = []
    for i in range(2):
        main = [np.array([model.s0[i]])]
        for k in range(K):
            c = model.coefficients(k)
            factor = 1 + c.mu[i] * lattice.dt + c.sigma[i] * lattice.dW + c.beta_jump[i] * lattice.dN_comp
            bad = np.flatnonzero(factor <= 0)
            if bad.size:
                b = int(bad[0])
                raise PositivityViolated(
                    f"asset {i + 1} factor {factor[b]:.6g} on branch {BRANCH_LABELS[b]} at step {k}"
                )
            main.append((main[k][:, None] * factor).ravel())
        prices.append(Process(main, [m.copy() for m in main[:K]]))
    return prices[0], prices[1]


@dataclass(frozen=True)
class ImperfectionSpec:
    """``kind`` is ``perfect``, ``borrow_rate`` (needs ``borrow``) or ``custom``."""

    kind: str = "perfect"
    borrow: float | None = None
    expression: str | None = None
    lipschitz: float | None = None

    def validate(self, model: MarketModel) -> None:
        if self.kind == "borrow_rate":
            if self.borrow is None:
                raise InvalidInput("borrow_rate needs a borrowing rate")
            rates = [c.r for c in model._all_coefficients()]
            if self.borrow < max(rates):
                raise InvalidInput(f"borrowing rate {self.borrow} is below the short rate")
        elif self.kind == "custom":
            if self.expression is None or self.lipschitz is None:
                raise InvalidInput("custom imperfection needs an expression and a lipschitz constant")
        elif self.kind != "perfect":
            raise InvalidInput(f"unknown imperfection {self.kind!r}")


def market_driver(
    model: MarketModel, imperfection: ImperfectionSpec | None = None, dt: float | None = None
) -> Driver:
    """Wealth driver; rejected with MonotonicityFailed if the jump slope is below ``-lambda``."""
    imperfection = ImperfectionSpec() if imperfection is None else imperfection
    imperfection.validate(model)
    model.require_invertible()
    if model.schedule and dt is None:
        raise InvalidInput("a scheduled market needs the time step")
    coeffs = model._all_coefficients()
    theta = np.array([c.risk_premium for c in coeffs])
    rates = np.array([c.r for c in coeffs])
    units = np.array([c.unit_exposure for c in coeffs])
    sq = math.sqrt(model.intensity)
    lip = max(abs(c.r) + abs(th[0]) + abs(th[1]) / sq for c, th in zip(coeffs, theta))

    last = max(len(model.schedule), 1) - 1

    def step(t):
        if not model.schedule:
            return 0
        return np.clip(np.rint(np.asarray(t, dtype=float) / dt).astype(int), 0, last)

    def perfect(t, y, z, kappa):
        k = step(t)
        return -rates[k] * y - theta[k, 0] * z - theta[k, 1] * kappa

    params = {"r": model.r, "mu": list(model.mu), "sigma": list(model.sigma), "beta_jump": list(model.beta_jump)}
    if imperfection.kind == "perfect":
        driver = Driver(perfect, lip, True, "perfect_market", params)
    elif imperfection.kind == "borrow_rate":
        spread = imperfection.borrow - rates
        lip += max(s * (1 + abs(u[0]) + abs(u[1]) / sq) for s, u in zip(spread, units))

        def borrow(t, y, z, kappa):
            k = step(t)
            exposure = units[k, 0] * z + units[k, 1] * kappa
            return perfect(t, y, z, kappa) + spread[k] * np.maximum(exposure - y, 0.0)

        driver = Driver(borrow, lip, True, "borrow_rate", {**params, "borrow": imperfection.borrow})
    else:
        driver = custom_driver(imperfection.expression, imperfection.lipschitz)
    report = check_monotonicity(driver, model.intensity)
    if not report.passes:
        raise MonotonicityFailed(
            f"driver slope in kappa {report.min_slope:.6g} < -1 at (t, y, z, k1, k2) = {report.worst_sample}"
        )
    return driver


@dataclass(frozen=True)
class PayoffSpec:
    """``kind`` is one of digital_call, digital_put, call, put, custom.

    ``post_expression`` overrides the Post-node values (same variables).
    """

    kind: str
    strike: float | None = None
    expression: str | None = None
    post_expression: str | None = None

    def _main_fn(self):
        K = self.strike
        if self.kind != "custom" and K is None:
            raise InvalidInput(f"{self.kind} payoff needs a strike")
        if self.kind == "digital_call":
            return lambda s1, s2, t: (s1 >= K).astype(float)
        if self.kind == "digital_put":
            return lambda s1, s2, t: (s1 < K).astype(float)
        if self.kind == "call":
            return lambda s1, s2, t: np.maximum(s1 - K, 0.0)
        if self.kind == "put":
            return lambda s1, s2, t: np.maximum(K - s1, 0.0)
        if self.kind == "custom":
            if not self.expression:
                raise InvalidInput("custom payoff needs an expression")
            return compile_expression(self.expression, PAYOFF_VARIABLES)
        raise InvalidInput(f"unknown payoff kind {self.kind!r}")

    def build(self, lattice: Lattice, s1: Process, s2: Process) -> Obstacle:
        main_fn = self._main_fn()
        post_fn = compile_expression(self.post_expression, PAYOFF_VARIABLES) if self.post_expression else main_fn

        def values(k, phase, idx):
            fn = post_fn if phase is Phase.POST else main_fn
            t = np.full(idx.shape, lattice.time(k))
            return fn(s1.layer(k, phase)[idx], s2.layer(k, phase)[idx], t)

        obstacle = Obstacle.from_process(Process.from_function(lattice, values))
        if not np.all(np.isfinite(obstacle.values())):
            raise InvalidInput("payoff is not finite on every node")
        return obstacle


def build_obstacle(model: MarketModel, payoff: PayoffSpec, lattice: Lattice) -> Obstacle:
    s1, s2 = simulate_assets(model, lattice)
    return payoff.build(lattice, s1, s2)


@dataclass
class PricingResult:
    u0: float
    solution: RbsdeSolution = field(repr=False)
    s1: Process = field(repr=False)
    s2: Process = field(repr=False)


def price_american(
    model: MarketModel,
    payoff: PayoffSpec,
    imperfection: ImperfectionSpec | None,
    lattice: Lattice,
) -> PricingResult:
    s1, s2 = simulate_assets(model, lattice)
    obstacle = payoff.build(lattice, s1, s2)
    driver = market_driver(model, imperfection, lattice.dt)
    sol = solve_rbsde(lattice, obstacle, driver)
    return PricingResult(sol.y0, sol, s1, s2)


@dataclass
class HedgeReport:
    """``phi[k]`` has shape ``(4**k, 2)`` on Post nodes; ``shortfall_bound`` is the worst-path ``sum |h|`` times ``exp(K_f T)``."""

    phi: list[np.ndarray] = field(repr=False)
    wealth: Process = field(repr=False)
    max_shortfall: float
    shortfall_bound: float
    wealth_residual: float
    mean_terminal_shortfall: float

    @property
    def within_bound(self) -> bool:
        return self.max_shortfall <= self.shortfall_bound + 1e-12


def superhedging_strategy(sol: RbsdeSolution, model: MarketModel) -> HedgeReport:
    """Hedge ``phi' = (z, kappa) Sigma^{-1}`` and the self-financed wealth from ``X_0 = Y_0``."""
    lat = sol.lattice
    _check_schedule(model, lat)
    model.require_invertible()
    K = lat.num_steps
    driver = sol.driver
    phi = []
    main = [np.array([sol.y0])]
    post = []
    residual = 0.0
    path_h = [np.zeros(1)]
    for k in range(K):
        sigma = model.coefficients(k).matrix
        controls = np.stack([sol.z[k], sol.kappa[k]], axis=-1)
        phi.append(np.linalg.solve(sigma.T, controls.T).T)
        x = main[k]
        post.append(x.copy())
        t = lat.time(k)
        drift = x - driver(t, x, sol.z[k], sol.kappa[k]) * lat.dt
        nxt = drift[:, None] + sol.z[k][:, None] * lat.dW + sol.kappa[k][:, None] * lat.dN_comp
        back = onestep_implicit(nxt, driver, t, lat, y_init=x)
        residual = max(residual, float(np.max(np.abs(back.y - x))))
        main.append(nxt.ravel())
        path_h.append((path_h[k][:, None] + np.abs(sol.h[k])).ravel())
    wealth = Process(main, post)
    shortfall = max(0.0, (sol.obstacle - wealth).max())
    bound = float(np.max(path_h[K])) * math.exp(driver.lipschitz * lat.horizon)
    terminal_gap = np.maximum(sol.obstacle.main[K] - wealth.main[K], 0.0)
    return HedgeReport(phi, wealth, shortfall, bound, residual, lat.expectation(terminal_gap, K))


def _model_from_params(params: Mapping, intensity: float) -> MarketModel:
    try:
        return MarketModel(
            r=float(params.get("r", 0.0)),
            mu=tuple(params["mu"]),
            sigma=tuple(params["sigma"]),
            beta_jump=tuple(params["beta_jump"]),
            intensity=intensity,
            schedule=tuple(params.get("schedule", ())),
        )
    except KeyError as exc:
        raise InvalidInput(f"market driver needs {exc.args[0]!r}") from exc


def _build_perfect(params, intensity, grid):
    extra = set(params) - {"r", "mu", "sigma", "beta_jump", "schedule"}
    if extra:
        raise InvalidInput(f"unknown perfect_market parameters {sorted(extra)}")
    dt = grid.dt if grid is not None else None
    return market_driver(_model_from_params(params, intensity), ImperfectionSpec(), dt)


def _build_borrow(params, intensity, grid):
    params = dict(params)
    borrow = params.pop("borrow", None)
    if borrow is None:
        raise InvalidInput("borrow_rate driver needs 'borrow'")
    extra = set(params) - {"r", "mu", "sigma", "beta_jump", "schedule"}
    if extra:
        raise InvalidInput(f"unknown borrow_rate parameters {sorted(extra)}")
    dt = grid.dt if grid is not None else None
    return market_driver(_model_from_params(params, intensity), ImperfectionSpec("borrow_rate", float(borrow)), dt)


register_driver("perfect_market", _build_perfect)
register_driver("borrow_rate", _build_borrow)


def grid_for(model: MarketModel, num_steps: int, horizon: float) -> GridSpec:
    return GridSpec(num_steps, horizon, model.intensity)


__all__ = [
    "BRANCH_LABELS",
    "Coefficients",
    "HedgeReport",
    "ImperfectionSpec",
    "MarketModel",
    "PayoffSpec",
    "PricingResult",
    "build_obstacle",
    "grid_for",
    "market_driver",
    "price_american",
    "simulate_assets",
    "superhedging_strategy",
]
