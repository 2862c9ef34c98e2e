"""Optimal stopping by direct enumeration, and checks tying it to the RBSDE.

The oracle evaluates ``E^f_{node, tau}(xi_tau)`` for every stopping rule
``tau`` on the subtree of a node, in the canonical order of
:class:`~nlstop.lattice.RuleSpace`.  Rule values are shared between rules
that agree on a child subtree: a Post node's values are the implicit step
applied to every combination of its children's value lists.  No maximum is
taken before the final reduction, so every rule is evaluated individually.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .bsde import Driver, ef_conditional_expectation, onestep_implicit, picard, solve_bsde
from .errors import NotOptimal, PreconditionFailed
from .lattice import (
    DEFAULT_ORACLE_LIMIT,
    NUM_BRANCHES,
    Lattice,
    Node,
    Phase,
    Process,
    StoppingRule,
    check_oracle_size,
    enumerate_stopping_rules,
    hitting_rule,
)
from .rbsde import Obstacle, RbsdeSolution, ref_operator, segment_increments

FULL_ARRAY_CAP = 2_000_000
TOUCH_TOL = 1e-10
SUPERMARTINGALE_TOL = 1e-9


class _Oracle:
    """Memoized rule-value lists for one (lattice, obstacle, driver)."""

    def __init__(self, lattice: Lattice, obstacle: Process, driver: Driver):
        self.lattice = lattice
        self.obstacle = obstacle
        self.driver = driver
        self._main: dict[tuple[int, int], np.ndarray] = {}

    def main_values(self, k: int, idx: int) -> np.ndarray:
        key = (k, idx)
        if key not in self._main:
            head = np.array([self.obstacle.main[k][idx]])
            if k == self.lattice.num_steps:
                self._main[key] = head
            else:
                self._main[key] = np.concatenate([head, self.post_values(k, idx)])
        return self._main[key]

    def post_values(self, k: int, idx: int) -> np.ndarray:
        children = self._children(k, idx)
        size = math.prod(len(c) for c in children)
        if size > FULL_ARRAY_CAP:
            raise MemoryError(f"{size} rule values at node {Node(k, Phase.POST, idx).node_id}")
        grid = np.stack(np.meshgrid(*children, indexing="ij"), axis=-1).reshape(-1, NUM_BRANCHES)
        step = onestep_implicit(grid, self.driver, self.lattice.time(k), self.lattice)
        return np.concatenate([[self.obstacle.post[k][idx]], step.y])

    def _children(self, k: int, idx: int) -> list[np.ndarray]:
        return [self.main_values(k + 1, NUM_BRANCHES * idx + b) for b in range(NUM_BRANCHES)]

    def post_max(self, k: int, idx: int) -> tuple[float, int]:
        """Best value over rules from a Post node, and its canonical index."""
        children = self._children(k, idx)
        best, arg = float(self.obstacle.post[k][idx]), 0
        size = math.prod(len(c) for c in children)
        if size <= FULL_ARRAY_CAP:
            values = self.post_values(k, idx)
            i = int(np.argmax(values))
            return float(values[i]), i
        # Linear statistics of the last three children are shared by every
        # value of the first child, so they are formed once.
        lat = self.lattice
        p, dW, dN = lat.probs, lat.dW, lat.dN_comp
        grids = np.meshgrid(*children[1:], indexing="ij")
        rest = [g.ravel() for g in grids]
        mean_rest = sum(p[b] * rest[b - 1] for b in (1, 2, 3))
        w_rest = sum(p[b] * dW[b] * rest[b - 1] for b in (1, 2, 3))
        n_rest = sum(p[b] * dN[b] * rest[b - 1] for b in (1, 2, 3))
        pw, pn = float(np.sum(p * dW)), float(np.sum(p * dN))
        t = lat.time(k)
        for i0, v0 in enumerate(children[0]):
            mean = p[0] * v0 + mean_rest
            z = (p[0] * dW[0] * v0 + w_rest - mean * pw) / lat.var_w
            kappa = (p[0] * dN[0] * v0 + n_rest - mean * pn) / lat.var_n
            y = picard(mean, z, kappa, self.driver, t, lat.dt)
            j = int(np.argmax(y))
            if y[j] > best:
                best, arg = float(y[j]), 1 + i0 * mean_rest.size + j
        return best, arg


@dataclass
class OracleResult:
    node: Node
    value: float
    argmax: int
    count: int
    strict_value: float | None = None
    strict_argmax: int | None = None

    def rule(self, lattice: Lattice) -> StoppingRule:
        return enumerate_stopping_rules(lattice, self.node, limit=lattice.num_steps)[self.argmax]


def oracle_search(
    lattice: Lattice,
    obstacle: Process,
    driver: Driver,
    node: Node | None = None,
    limit: int = DEFAULT_ORACLE_LIMIT,
) -> OracleResult:
    """Value and strict value at ``node`` by exhaustive rule evaluation.

    Ties resolve to the first rule in canonical order.
    """
    node = lattice.root if node is None else node
    space = enumerate_stopping_rules(lattice, node, limit)
    oracle = _Oracle(lattice, obstacle, driver)
    k, idx = node.step, node.index
    if node.phase is Phase.POST:
        best, arg = oracle.post_max(k, idx)
        return OracleResult(node, best, arg, len(space))
    xi = float(obstacle.main[k][idx])
    if k == lattice.num_steps:
        return OracleResult(node, xi, 0, 1)
    strict, sarg = oracle.post_max(k, idx)
    sarg += 1
    if xi >= strict:
        return OracleResult(node, xi, 0, len(space), strict, sarg)
    return OracleResult(node, strict, sarg, len(space), strict, sarg)


def value_by_oracle(lattice, obstacle, driver, node: Node | None = None, limit: int = DEFAULT_ORACLE_LIMIT) -> float:
    return oracle_search(lattice, obstacle, driver, node, limit).value


def strict_value_by_oracle(lattice, obstacle, driver, node: Node | None = None, limit: int = DEFAULT_ORACLE_LIMIT) -> float:
    """Best value over rules that stop strictly after the Main ``node``."""
    node = lattice.root if node is None else node
    if node.phase is not Phase.MAIN or node.step == lattice.num_steps:
        raise ValueError("strict value needs a non-terminal Main node")
    return oracle_search(lattice, obstacle, driver, node, limit).strict_value


def rule_values(
    lattice: Lattice, obstacle: Process, driver: Driver, node: Node | None = None, limit: int = DEFAULT_ORACLE_LIMIT
) -> np.ndarray:
    """Value of every rule on the subtree of ``node`` in canonical order."""
    node = lattice.root if node is None else node
    check_oracle_size(lattice, node, limit)
    oracle = _Oracle(lattice, obstacle, driver)
    if node.phase is Phase.MAIN:
        return oracle.main_values(node.step, node.index)
    return oracle.post_values(node.step, node.index)


def value_process_by_oracle(
    lattice: Lattice, obstacle: Process, driver: Driver, limit: int = DEFAULT_ORACLE_LIMIT
) -> Process:
    """Oracle value at every node, aggregated into one process."""
    check_oracle_size(lattice, None, limit)
    oracle = _Oracle(lattice, obstacle, driver)
    K = lattice.num_steps
    post = [np.array([oracle.post_max(k, i)[0] for i in range(NUM_BRANCHES**k)]) for k in range(K)]
    main = [np.maximum(obstacle.main[k], post[k]) for k in range(K)] + [obstacle.main[K].copy()]
    return Process(main, post)


def payoff_value(sol: RbsdeSolution, rule: StoppingRule, start: StoppingRule | None = None) -> Process:
    """``E^f_{start, rule}(xi_rule)`` on the start's first-hit nodes."""
    lat = sol.lattice
    start = StoppingRule.at_root(lat) if start is None else start
    return ef_conditional_expectation(lat, start, rule, sol.obstacle, sol.driver)


def _gap(sol: RbsdeSolution, rule: StoppingRule, start: StoppingRule) -> float:
    """Largest ``Y_start - E^f_{start, rule}(xi)`` over the start's hit nodes."""
    value = payoff_value(sol, rule, start)
    return float(np.nanmax((sol.y - value).values()))


def epsilon_constant(driver: Driver, horizon: float) -> float:
    K = driver.lipschitz
    return math.exp((1 + 2 * K + K * K) * horizon)


@dataclass
class EpsilonResult:
    """``rule`` is the first time at or after the start with ``Y <= xi + epsilon``.

    ``max_hit_excess`` reads the hit in continuous time: a hit at a Post
    sub-time happens at the infimum ``t_k`` itself, where the obtained values
    are the Main ones.  A positive excess means ``Y > xi + epsilon`` there,
    which can only happen when ``xi`` is not r.u.s.c.
    """

    rule: StoppingRule
    epsilon: float
    max_hit_excess: float
    gap: float
    bound: float

    @property
    def hit_inequality_holds(self) -> bool:
        return self.max_hit_excess <= 0

    @property
    def within_bound(self) -> bool:
        return self.gap <= self.bound

    @property
    def empirical_constant(self) -> float:
        return max(self.gap, 0.0) / self.epsilon


def epsilon_optimal_rule(sol: RbsdeSolution, epsilon: float, start: StoppingRule | None = None) -> EpsilonResult:
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    lat = sol.lattice
    start = StoppingRule.at_root(lat) if start is None else start
    xi = sol.obstacle
    rule = hitting_rule(lat, sol.y - xi, lambda v, k, ph: v <= epsilon, start)
    excess = -math.inf
    for k in range(lat.num_steps + 1):
        hm = rule.hit(k, Phase.MAIN)
        if hm.any():
            excess = max(excess, float(np.max(sol.y.main[k][hm] - xi.main[k][hm] - epsilon)))
        if k < lat.num_steps:
            hp = rule.hit(k, Phase.POST)
            if hp.any():
                excess = max(excess, float(np.max(sol.y.main[k][hp] - xi.main[k][hp] - epsilon)))
    bound = epsilon_constant(sol.driver, lat.horizon) * epsilon
    return EpsilonResult(rule, epsilon, excess, _gap(sol, rule, start), bound)


def touching_rule(sol: RbsdeSolution, start: StoppingRule | None = None, tol: float = TOUCH_TOL) -> StoppingRule:
    """First time at or after ``start`` with ``Y = xi`` (within ``tol``)."""
    return hitting_rule(sol.lattice, sol.y - sol.obstacle, lambda v, k, ph: v <= tol, start)


@dataclass
class OptimalResult:
    rule: StoppingRule
    gap: float
    epsilon_rules: list[StoppingRule] = field(repr=False)

    @property
    def stabilized(self) -> bool:
        return len(self.epsilon_rules) >= 2 and self.epsilon_rules[-1] == self.epsilon_rules[-2]

    @property
    def matches_tau0(self) -> bool:
        return bool(self.epsilon_rules) and self.epsilon_rules[-1] == self.rule

    @property
    def nondecreasing(self) -> bool:
        codes = [r.leaf_codes() for r in self.epsilon_rules]
        return all(np.all(a <= b) for a, b in zip(codes, codes[1:]))


def optimal_rule(
    sol: RbsdeSolution,
    start: StoppingRule | None = None,
    check_regularity: bool = True,
    max_halvings: int = 20,
) -> OptimalResult:
    """``tau^0`` and the sequence ``tau^{eps_n}``, ``eps_n = 2^-n``, ``n <= max_halvings``.

    Regularity surrogates: ``xi_main >= xi_post`` (right) and
    ``xi_post(k) >= xi_main(k+1)`` on every edge (left).
    """
    obstacle = sol.obstacle
    if check_regularity and not (obstacle.is_rusc and obstacle.is_lusc):
        raise PreconditionFailed(
            f"obstacle fails the regularity surrogates (right gap {obstacle.rusc_gap():.3g}, "
            f"left gap {obstacle.lusc_gap():.3g})"
        )
    lat = sol.lattice
    start = StoppingRule.at_root(lat) if start is None else start
    tau0 = touching_rule(sol, start)
    gap = _gap(sol, tau0, start)
    if abs(gap) > SUPERMARTINGALE_TOL:
        raise NotOptimal(f"tau^0 misses the value by {gap:.3g}")
    eps_rules = [
        hitting_rule(lat, sol.y - obstacle, lambda v, k, ph, e=2.0**-n: v <= e, start)
        for n in range(max_halvings + 1)
    ]
    return OptimalResult(tau0, gap, eps_rules)


@dataclass
class OptimalityReport:
    is_martingale_segment: bool
    touches_obstacle: bool
    direct_gap: float

    @property
    def optimal(self) -> bool:
        return self.is_martingale_segment and self.touches_obstacle


def check_optimality_criterion(
    sol: RbsdeSolution, candidate: StoppingRule, start: StoppingRule | None = None
) -> OptimalityReport:
    """Flat ``(A, C)`` before the candidate and ``Y = xi`` at its hits."""
    lat = sol.lattice
    start = StoppingRule.at_root(lat) if start is None else start
    flat = segment_increments(sol, start, candidate) <= 1e-12
    touch = 0.0
    for k in range(lat.num_steps + 1):
        for phase in (Phase.MAIN, Phase.POST):
            if phase is Phase.POST and k == lat.num_steps:
                continue
            hit = candidate.hit(k, phase)
            if hit.any():
                diff = sol.y.layer(k, phase)[hit] - sol.obstacle.layer(k, phase)[hit]
                touch = max(touch, float(np.max(np.abs(diff))))
    return OptimalityReport(flat, touch <= TOUCH_TOL, _gap(sol, candidate, start))


@dataclass
class SupermartingaleReport:
    max_violation: float
    pairs_checked: int
    exhaustive: bool

    @property
    def passes(self) -> bool:
        return self.max_violation <= SUPERMARTINGALE_TOL


def random_rule(lattice: Lattice, rng: np.random.Generator, stop_prob: float | None = None) -> StoppingRule:
    p = rng.uniform(0.05, 0.5) if stop_prob is None else stop_prob
    K = lattice.num_steps
    sm = [rng.random(NUM_BRANCHES**k) < p for k in range(K + 1)]
    sp = [rng.random(NUM_BRANCHES**k) < p for k in range(K)]
    return StoppingRule(lattice, sm, sp)


def check_supermartingale(
    lattice: Lattice,
    process: Process,
    driver: Driver,
    pair_budget: int = 200,
    seed: int = 0,
    limit: int = DEFAULT_ORACLE_LIMIT,
) -> SupermartingaleReport:
    """Largest ``E^f_{sigma,tau}(phi_tau) - phi_sigma`` over ordered rule pairs.

    Within the oracle limit every pair is covered: at a first-hit node ``n``
    of ``sigma`` the worst ``tau`` is the best rule on the subtree of ``n``
    with payoff ``phi``, so the maximum over all pairs is the maximum over
    nodes of the oracle value minus ``phi``.  Beyond the limit, all pairs
    of deterministic sub-times plus ``pair_budget`` random pairs are used.
    """
    K = lattice.num_steps
    if K <= limit:
        oracle = _Oracle(lattice, process, driver)
        worst = 0.0
        pairs = 0
        for k in range(K):
            for i in range(NUM_BRANCHES**k):
                best, _ = oracle.post_max(k, i)
                worst = max(worst, best - float(process.post[k][i]), best - float(process.main[k][i]))
                pairs += 1
        return SupermartingaleReport(worst, pairs, True)
    rng = np.random.default_rng(seed)
    pairs = []
    subtimes = [(k, Phase.MAIN) for k in range(K + 1)] + [(k, Phase.POST) for k in range(K)]
    subtimes.sort(key=lambda s: 2 * s[0] + int(s[1]))
    for i, s in enumerate(subtimes):
        for t in subtimes[i:]:
            pairs.append((StoppingRule.at_subtime(lattice, *s), StoppingRule.at_subtime(lattice, *t)))
    for _ in range(pair_budget):
        tau = random_rule(lattice, rng)
        sigma = random_rule(lattice, rng).earliest(tau)
        pairs.append((sigma, tau))
    worst = -math.inf
    for sigma, tau in pairs:
        value = ef_conditional_expectation(lattice, sigma, tau, process, driver)
        worst = max(worst, float(np.nanmax((value - process).values())))
    return SupermartingaleReport(worst, len(pairs), False)


@dataclass
class SnellReport:
    min_margin: float
    competitors: int

    @property
    def passes(self) -> bool:
        return self.min_margin >= -TOUCH_TOL


def snell_minimality_check(sol: RbsdeSolution, competitor_count: int = 20, seed: int = 0) -> SnellReport:
    """Every supermartingale ``Ref^f[xi + lift]`` (lift >= 0) dominates ``Y``."""
    lat = sol.lattice
    rng = np.random.default_rng(seed)
    competitors = [sol.y, ref_operator(lat, sol.obstacle + 0.5, sol.driver)]
    for _ in range(max(competitor_count - 2, 0)):
        lift = Process.from_function(
            lat,
            lambda k, ph, idx: rng.uniform(0.0, 1.0, idx.shape) * (rng.random(idx.shape) < 0.5),
        )
        competitors.append(ref_operator(lat, sol.obstacle + lift, sol.driver))
    margin = min((c - sol.y).min() for c in competitors)
    return SnellReport(margin, len(competitors))


def strict_value_identities(sol: RbsdeSolution, limit: int = DEFAULT_ORACLE_LIMIT) -> tuple[float, float]:
    """Errors ``|V+ - Y_post|`` and ``|V - max(V+, xi)|`` at the root."""
    res = oracle_search(sol.lattice, sol.obstacle, sol.driver, None, limit)
    v_plus = res.strict_value
    err_plus = abs(v_plus - float(sol.y.post[0][0]))
    err_v = abs(res.value - max(v_plus, float(sol.obstacle.main[0][0])))
    return err_plus, err_v


__all__ = [
    "EpsilonResult",
    "Obstacle",
    "OptimalResult",
    "OptimalityReport",
    "OracleResult",
    "SnellReport",
    "SupermartingaleReport",
    "check_optimality_criterion",
    "check_supermartingale",
    "epsilon_constant",
    "epsilon_optimal_rule",
    "optimal_rule",
    "oracle_search",
    "payoff_value",
    "random_rule",
    "rule_values",
    "snell_minimality_check",
    "solve_bsde",
    "strict_value_by_oracle",
    "strict_value_identities",
    "touching_rule",
    "value_by_oracle",
    "value_process_by_oracle",
]
