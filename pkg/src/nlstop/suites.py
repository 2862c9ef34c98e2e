"""Randomized property suites used by ``nlstop verify`` and the acceptance tests.

Each suite maps a module-level case function over instance indices.  A case
depends only on ``(seed, index)``, so running the cases in a process pool
gives the same rows, in the same order, as running them inline.
"""

from __future__ import annotations

import math
import statistics
from collections.abc import Callable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import partial

import numpy as np

from . import market  # noqa: F401  (registers the market drivers)
from .bsde import make_driver
from .generators import OBSTACLE_SHAPES, comparison_pair, instance_rng, random_instance, random_lift
from .lattice import GridSpec, Process, build_lattice
from .market import ImperfectionSpec, MarketModel, PayoffSpec, price_american, superhedging_strategy
from .rbsde import (
    Obstacle,
    a_priori_estimates,
    h_orthogonality,
    reconstruct,
    ref_operator,
    solve_rbsde,
    verify_skorokhod,
)
from .stopping import (
    check_supermartingale,
    epsilon_constant,
    epsilon_optimal_rule,
    oracle_search,
    optimal_rule,
    value_by_oracle,
)

GAP_TOL = 1e-10
FLAT_TOL = 1e-12
RESIDUAL_TOL = 1e-10
ORTHO_TOL = 1e-14
IDEMPOTENCE_TOL = 1e-9
SUPERMARTINGALE_TOL = 1e-9
EPSILONS = (1e-1, 1e-2, 1e-3)


@dataclass
class SuiteResult:
    name: str
    passed: bool
    checked: int
    failures: list[int]
    metrics: dict
    rows: list[dict] = field(repr=False, default_factory=list)

    def summary(self) -> dict:
        return {
            "name": self.name,
            "passed": self.passed,
            "checked": self.checked,
            "failures": self.failures,
            "metrics": self.metrics,
        }


def run_cases(fn: Callable[[int], dict], indices, parallel: bool = False) -> list[dict]:
    indices = list(indices)
    if not parallel:
        return [fn(i) for i in indices]
    with ProcessPoolExecutor() as pool:
        return list(pool.map(fn, indices, chunksize=max(1, len(indices) // 32)))


def _finish(name: str, rows: list[dict], ok_key: str = "ok", metrics: dict | None = None, extra_ok: bool = True):
    failures = [r["index"] for r in rows if not r[ok_key]]
    return SuiteResult(name, not failures and extra_ok, len(rows), failures, metrics or {}, rows)


# oracle equivalence and strict value


def oracle_steps(index: int, count: int) -> int:
    """Mostly K in {1, 2}; the last tenth of the batch uses K = 3."""
    big = max(1, count // 10)
    return 3 if index >= count - big else 1 + index % 2


def oracle_case(
    index: int, seed: int, count: int, fault: dict | None = None, steps=None, shape: str | None = None
) -> dict:
    K = oracle_steps(index, count) if steps is None else steps[index % len(steps)]
    shape = OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)] if shape is None else shape
    inst = random_instance(seed, index, K, shape)
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    y0, y_post = sol.y0, float(sol.y.post[0][0])
    if fault and int(fault.get("index", -1)) == index:
        y0 += float(fault.get("offset", 1e-6))
    res = oracle_search(inst.lattice, inst.obstacle, inst.driver)
    xi0 = float(inst.obstacle.main[0][0])
    gap = abs(y0 - res.value)
    strict_gap = abs(res.strict_value - y_post)
    split_gap = abs(res.value - max(res.strict_value, xi0))
    return {
        "index": index,
        "steps": K,
        "shape": shape,
        "driver": inst.driver_spec["name"],
        "y0": y0,
        "oracle_value": res.value,
        "strict_value": res.strict_value,
        "y_post": y_post,
        "rules": res.count,
        "gap": gap,
        "strict_gap": strict_gap,
        "split_gap": split_gap,
        "rusc": inst.obstacle.is_rusc,
        "ok": gap <= GAP_TOL,
        "strict_ok": strict_gap <= GAP_TOL and split_gap <= GAP_TOL,
    }


def _oracle_rows(seed, count, parallel, fault=None):
    return run_cases(partial(oracle_case, seed=seed, count=count, fault=fault), range(count), parallel)


def oracle_suite(seed: int, count: int = 200, parallel: bool = False, fault: dict | None = None) -> SuiteResult:
    rows = _oracle_rows(seed, count, parallel, fault)
    metrics = {
        "max_gap": max(r["gap"] for r in rows),
        "non_rusc_instances": sum(not r["rusc"] for r in rows),
        "steps_3_instances": sum(r["steps"] == 3 for r in rows),
    }
    return _finish("oracle", rows, "ok", metrics)


def strict_value_suite(seed: int, count: int = 200, parallel: bool = False) -> SuiteResult:
    rows = _oracle_rows(seed, count, parallel)
    metrics = {
        "max_strict_gap": max(r["strict_gap"] for r in rows),
        "max_split_gap": max(r["split_gap"] for r in rows),
    }
    return _finish("strict_value", rows, "strict_ok", metrics)


# comparison


def comparison_case(index: int, seed: int) -> dict:
    K = 1 + index % 4
    inst, lifted, bumped = comparison_pair(seed, index, K)
    y = solve_rbsde(inst.lattice, inst.obstacle, inst.driver).y
    y2 = solve_rbsde(inst.lattice, lifted, bumped).y
    violation = (y - y2).max()
    return {"index": index, "steps": K, "driver": inst.driver_spec["name"], "max_violation": violation,
            "ok": violation <= GAP_TOL}


def comparison_suite(seed: int, count: int = 300, parallel: bool = False) -> SuiteResult:
    rows = run_cases(partial(comparison_case, seed=seed), range(count), parallel)
    return _finish("comparison", rows, metrics={"max_violation": max(r["max_violation"] for r in rows)})


# Skorokhod conditions and reconstruction


def skorokhod_case(index: int, seed: int, max_steps: int = 8) -> dict:
    K = 1 + index % max_steps
    inst = random_instance(seed, index, K, OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    rep = verify_skorokhod(sol)
    residual = reconstruct(sol)
    return {
        "index": index,
        "steps": K,
        "max_A_violation": rep.max_A_violation,
        "max_C_violation": rep.max_C_violation,
        "max_obstacle_violation": rep.max_obstacle_violation,
        "residual": residual,
        "ok": rep.max_A_violation <= FLAT_TOL and rep.max_C_violation <= FLAT_TOL
        and residual <= RESIDUAL_TOL and rep.max_obstacle_violation <= 0,
    }


def a_jump_sweep(steps=(2, 4, 8), intensity: float = 0.5) -> list[dict]:
    """Largest single increment of ``A`` for one fixed continuous-time obstacle.

    ``xi_t = 1 - t/2 - N_t/5`` never rises along an edge and has
    ``xi_main >= xi_post``, so both regularity surrogates hold at every
    resolution; the sweep is reported, not asserted.
    """
    out = []
    for K in steps:
        lat = build_lattice(GridSpec(K, 1.0, intensity))
        t = Process.from_function(lat, lambda k, ph, idx, lat=lat: np.full(idx.shape, lat.time(k)))
        xi = Obstacle.from_process(Process.constant(lat, 1.0) - t * 0.5 - lat.jumps() * 0.2)
        driver = make_driver({"name": "linear", "r": 0.3, "z_coef": 0.2, "kappa_coef": 0.1}, intensity)
        sol = solve_rbsde(lat, xi, driver)
        out.append({
            "steps": K,
            "max_dA": max(float(np.max(a)) for a in sol.a),
            "regular": xi.is_rusc and xi.is_lusc,
        })
    return out


def skorokhod_suite(seed: int, count: int = 80, parallel: bool = False, max_steps: int = 8) -> SuiteResult:
    rows = run_cases(partial(skorokhod_case, seed=seed, max_steps=max_steps), range(count), parallel)
    metrics = {
        "max_flat_violation": max(max(r["max_A_violation"], r["max_C_violation"]) for r in rows),
        "max_residual": max(r["residual"] for r in rows),
        "max_steps": max(r["steps"] for r in rows),
        "a_jump_refinement": a_jump_sweep(),
    }
    return _finish("skorokhod", rows, metrics=metrics)


# orthogonal component


def orthogonality_case(index: int, seed: int) -> dict:
    K = 1 + index % 6
    inst = random_instance(seed, index, K, OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    ls = inst.rng.uniform(-2, 2, 5)
    err = h_orthogonality(sol, ls)
    h_max = max(float(np.max(np.abs(h))) for h in sol.h)
    return {"index": index, "steps": K, "orthogonality_error": err, "h_max": h_max,
            "h_nonzero": h_max > 1e-12, "ok": err <= ORTHO_TOL}


def orthogonality_suite(seed: int, count: int = 100, parallel: bool = False) -> SuiteResult:
    rows = run_cases(partial(orthogonality_case, seed=seed), range(count), parallel)
    frac = sum(r["h_nonzero"] for r in rows) / len(rows)
    metrics = {"max_error": max(r["orthogonality_error"] for r in rows), "h_nonzero_fraction": frac}
    return _finish("orthogonality", rows, metrics=metrics, extra_ok=frac >= 0.5)


# Ref^f operator


def refop_case(index: int, seed: int, idempotence_count: int) -> dict:
    K = 1 + index % 4
    inst = random_instance(seed, index, K, OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    lat, xi, f = inst.lattice, inst.obstacle, inst.driver
    ref = ref_operator(lat, xi, f)
    ref_up = ref_operator(lat, xi + random_lift(inst.rng, lat), f)
    monotone = (ref - ref_up).max()
    dominate = (xi - ref).max()
    idem = ref_operator(lat, ref, f).max_abs_diff(ref) if index < idempotence_count else 0.0
    return {
        "index": index,
        "steps": K,
        "monotone_violation": monotone,
        "domination_violation": dominate,
        "idempotence_error": idem,
        "ok": monotone <= GAP_TOL and dominate <= 0 and idem <= IDEMPOTENCE_TOL,
    }


def refop_suite(seed: int, count: int = 200, parallel: bool = False, idempotence_count: int = 100) -> SuiteResult:
    rows = run_cases(partial(refop_case, seed=seed, idempotence_count=idempotence_count), range(count), parallel)
    metrics = {
        "max_monotone_violation": max(r["monotone_violation"] for r in rows),
        "max_domination_violation": max(r["domination_violation"] for r in rows),
        "max_idempotence_error": max(r["idempotence_error"] for r in rows),
    }
    return _finish("refop", rows, metrics=metrics)


# strong E^f-supermartingale property


SUPERMARTINGALE_STEPS = (1, 2, 4, 2, 5, 1, 4, 3)


def supermartingale_case(index: int, seed: int) -> dict:
    K = SUPERMARTINGALE_STEPS[index % len(SUPERMARTINGALE_STEPS)]
    inst = random_instance(seed, index, K, OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    lat, f = inst.lattice, inst.driver
    y = ref_operator(lat, inst.obstacle, f)
    rep = check_supermartingale(lat, y, f, pair_budget=100, seed=index)
    # a strictly rising step must be caught
    rising = y + Process.from_function(lat, lambda k, ph, idx: np.full(idx.shape, 0.5 * (2 * k + int(ph))))
    control = check_supermartingale(lat, rising, f, pair_budget=20, seed=index, limit=0)
    return {
        "index": index,
        "steps": K,
        "exhaustive": rep.exhaustive,
        "max_violation": rep.max_violation,
        "control_violation": control.max_violation,
        "ok": rep.max_violation <= SUPERMARTINGALE_TOL and control.max_violation > SUPERMARTINGALE_TOL,
    }


def supermartingale_suite(seed: int, count: int = 40, parallel: bool = False) -> SuiteResult:
    rows = run_cases(partial(supermartingale_case, seed=seed), range(count), parallel)
    metrics = {
        "max_violation": max(r["max_violation"] for r in rows),
        "min_control_violation": min(r["control_violation"] for r in rows),
    }
    return _finish("supermartingale", rows, metrics=metrics)


# a-priori estimate


def estimate_case(index: int, seed: int, num_steps: int) -> dict:
    rng = instance_rng(seed, 10_000 + index)
    inst = random_instance(seed, index, num_steps, OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    lat = inst.lattice
    noise = Process.from_function(lat, lambda k, ph, idx: rng.normal(0.0, 0.1, idx.shape))
    xi2 = Obstacle.from_process(inst.obstacle + noise)
    f2 = inst.driver.shifted(float(rng.uniform(-0.2, 0.2)))
    sol1 = solve_rbsde(lat, inst.obstacle, inst.driver)
    sol2 = solve_rbsde(lat, xi2, f2)
    K_f = max(inst.driver.lipschitz, f2.lipschitz)
    eta = 1.0 / K_f**2 if K_f > 0 else 1.0
    beta = 3.0 / eta + 2.0 * K_f
    rep = a_priori_estimates(sol1, sol2, beta, eta)
    limit = 1 + 10 * lat.dt
    return {
        "index": index,
        "steps": num_steps,
        "lhs": rep.lhs,
        "rhs": rep.rhs,
        "ratio": rep.ratio,
        "slack": rep.slack_needed,
        "ok": rep.slack_needed <= limit,
    }


SLACK_BINS = (1.0, 1.01, 1.1, 1.5, 2.0, math.inf)
RATIO_BINS = (0.0, 1e-4, 1e-3, 1e-2, 1e-1, 1.0, math.inf)


def histogram(values, edges) -> list[dict]:
    """Counts per half-open bin ``[lo, hi)``; the first bin is closed at ``lo``."""
    out = []
    for lo, hi in zip(edges, edges[1:]):
        n = sum(lo <= v < hi for v in values)
        out.append({"low": lo, "high": hi if math.isfinite(hi) else "inf", "count": n})
    return out


def estimates_suite(
    seed: int, count: int = 100, parallel: bool = False, num_steps: int = 6, coarse_steps: int = 3
) -> SuiteResult:
    rows = run_cases(partial(estimate_case, seed=seed, num_steps=num_steps), range(count), parallel)
    coarse = run_cases(partial(estimate_case, seed=seed, num_steps=coarse_steps), range(count), parallel)
    frac = sum(r["ok"] for r in rows) / len(rows)
    med_fine = statistics.median(r["slack"] for r in rows)
    med_coarse = statistics.median(r["slack"] for r in coarse)
    metrics = {
        "within_slack_fraction": frac,
        "median_slack": {str(coarse_steps): med_coarse, str(num_steps): med_fine},
        "median_ratio": {
            str(coarse_steps): float(statistics.median(r["ratio"] for r in coarse)),
            str(num_steps): float(statistics.median(r["ratio"] for r in rows)),
        },
        "slack_histogram": histogram([r["slack"] for r in rows], SLACK_BINS),
        "ratio_histogram": histogram([r["ratio"] for r in rows], RATIO_BINS),
    }
    ok = frac >= 0.95 and med_fine <= med_coarse
    return SuiteResult("estimates", ok, len(rows), [], metrics, rows)


# epsilon-optimal rules


def epsilon_case(index: int, seed: int) -> dict:
    K = 1 + index % 5
    inst = random_instance(seed, index, K, ("rusc", "regular")[index % 2])
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    L = epsilon_constant(inst.driver, inst.lattice.horizon)
    row = {"index": index, "steps": K, "L": L, "ok": True}
    best = 0.0
    for eps in EPSILONS:
        res = epsilon_optimal_rule(sol, eps)
        row[f"gap_{eps:g}"] = res.gap
        best = max(best, res.empirical_constant)
        row["ok"] = row["ok"] and res.within_bound and res.hit_inequality_holds
    row["empirical_constant"] = best
    return row


def epsilon_suite(seed: int, count: int = 100, parallel: bool = False) -> SuiteResult:
    rows = run_cases(partial(epsilon_case, seed=seed), range(count), parallel)
    metrics = {
        "empirical_constant": max(r["empirical_constant"] for r in rows),
        "min_L": min(r["L"] for r in rows),
    }
    return _finish("epsilon_optimal", rows, metrics=metrics)


# optimal rule


def optimal_case(index: int, seed: int) -> dict:
    K = 1 + index % 5
    inst = random_instance(seed, index, K, "regular")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    res = optimal_rule(sol)
    return {
        "index": index,
        "steps": K,
        "gap": res.gap,
        "matches_tau0": res.matches_tau0,
        "nondecreasing": res.nondecreasing,
        "ok": abs(res.gap) <= SUPERMARTINGALE_TOL and res.matches_tau0 and res.nondecreasing,
    }


def optimal_suite(seed: int, count: int = 100, parallel: bool = False) -> SuiteResult:
    rows = run_cases(partial(optimal_case, seed=seed), range(count), parallel)
    return _finish("optimal_rule", rows, metrics={"max_gap": max(abs(r["gap"]) for r in rows)})


# pricing


REFERENCE_MARKET = {
    "r": 0.02,
    "mu": (0.05, 0.03),
    "sigma": (0.2, 0.1),
    "beta_jump": (0.1, -0.2),
    "intensity": 0.5,
}
REFERENCE_STRIKE = 1.1
REFINEMENT = (2, 4, 8)


def pricing_case(index: int, seed: int) -> dict:
    rng = instance_rng(seed, index)
    intensity = float(round(rng.uniform(0.2, 0.5), 6))
    r = float(round(rng.uniform(0.0, 0.05), 6))
    sigma = tuple(float(round(v, 6)) for v in rng.uniform(0.1, 0.3, 2))
    beta = (float(round(rng.uniform(0.05, 0.3), 6)), float(round(-rng.uniform(0.05, 0.3), 6)))
    # risk premium inside the monotone range, then mu = r + Sigma theta
    theta = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3) * intensity])
    mu = np.array([[sigma[0], beta[0]], [sigma[1], beta[1]]]) @ theta + r
    model = MarketModel(r, tuple(float(round(m, 6)) for m in mu), sigma, beta, intensity)
    K = 2 + 2 * (index % 2)
    lat = build_lattice(GridSpec(K, 1.0, intensity))
    payoff = PayoffSpec("digital_call", float(round(rng.uniform(0.8, 1.2), 6)))
    res = price_american(model, payoff, ImperfectionSpec(), lat)
    hedge = superhedging_strategy(res.solution, model)
    oracle_gap = (
        abs(value_by_oracle(lat, res.solution.obstacle, res.solution.driver) - res.u0) if K == 2 else 0.0
    )
    return {
        "index": index,
        "steps": K,
        "u0": res.u0,
        "oracle_gap": oracle_gap,
        "shortfall": hedge.max_shortfall,
        "bound": hedge.shortfall_bound,
        "ok": oracle_gap <= GAP_TOL and hedge.within_bound,
    }


def refinement_sweep(market: dict | None = None, strike: float = REFERENCE_STRIKE, steps=REFINEMENT) -> list[dict]:
    """Price and hedge one continuous-time instance on successively finer lattices."""
    params = dict(REFERENCE_MARKET if market is None else market)
    model = MarketModel(**params)
    out = []
    for K in steps:
        lat = build_lattice(GridSpec(K, 1.0, model.intensity))
        res = price_american(model, PayoffSpec("digital_call", strike), ImperfectionSpec(), lat)
        hedge = superhedging_strategy(res.solution, model)
        out.append({
            "steps": K,
            "u0": res.u0,
            "shortfall": hedge.max_shortfall,
            "bound": hedge.shortfall_bound,
            "mean_terminal_shortfall": hedge.mean_terminal_shortfall,
        })
    return out


def nonincreasing(values) -> bool:
    values = list(values)
    return all(b <= a for a, b in zip(values, values[1:]))


def pricing_suite(seed: int, count: int = 20, parallel: bool = False) -> SuiteResult:
    rows = run_cases(partial(pricing_case, seed=seed), range(count), parallel)
    sweep = refinement_sweep()
    monotone = nonincreasing(r["shortfall"] for r in sweep)
    metrics = {"max_oracle_gap": max(r["oracle_gap"] for r in rows), "refinement": sweep,
               "shortfall_nonincreasing": monotone}
    return _finish("pricing", rows, metrics=metrics, extra_ok=monotone)


SUITES: dict[str, Callable[..., SuiteResult]] = {
    "comparison": comparison_suite,
    "skorokhod": skorokhod_suite,
    "orthogonality": orthogonality_suite,
    "refop": refop_suite,
    "supermartingale": supermartingale_suite,
    "estimates": estimates_suite,
    "strict_value": strict_value_suite,
    "epsilon_optimal": epsilon_suite,
    "oracle": oracle_suite,
    "optimal_rule": optimal_suite,
    "pricing": pricing_suite,
}
DEFAULT_SUITES = (
    "comparison",
    "skorokhod",
    "orthogonality",
    "refop",
    "supermartingale",
    "estimates",
    "strict_value",
    "epsilon_optimal",
)
DEFAULT_COUNTS = {
    "comparison": 60,
    "skorokhod": 40,
    "orthogonality": 40,
    "refop": 60,
    "supermartingale": 16,
    "estimates": 40,
    "strict_value": 30,
    "epsilon_optimal": 40,
    "oracle": 30,
    "optimal_rule": 40,
    "pricing": 10,
}
