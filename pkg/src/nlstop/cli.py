"""Command-line interface: ``nlstop {solve,oracle,price,verify}``.

Exit codes: 0 success, 1 numerical or verification failure, 2 invalid input.
Errors are reported as one JSON object on stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from functools import partial
from pathlib import Path

from . import market as market_mod
from .bsde import make_driver
from .config import RunConfig, load_config
from .errors import InvalidInput, NlstopError, OracleTooLarge, UnknownCheck
from .export import (
    ORACLE_COLUMNS,
    ORACLE_CSV_CAP,
    PRICING_COLUMNS,
    RBSDE_COLUMNS,
    pricing_rows,
    rbsde_rows,
    write_csv,
    write_json,
)
from .generators import OBSTACLE_SHAPES, random_instance
from .lattice import GridSpec, build_lattice, check_oracle_size, enumerate_stopping_rules
from .rbsde import Obstacle, reconstruct, solve_rbsde, verify_skorokhod
from .stopping import oracle_search, rule_values, touching_rule, value_by_oracle
from .suites import DEFAULT_COUNTS, DEFAULT_SUITES, GAP_TOL, SUITES, nonincreasing, oracle_case, run_cases

EXIT_OK, EXIT_FAILURE, EXIT_INVALID = 0, 1, 2


class VerificationFailed(NlstopError):
    code = "VERIFICATION_FAILED"


class Outputs:
    """Writes only the formats selected with ``--format``."""

    def __init__(self, cfg: RunConfig):
        self.dir = Path(cfg.output_dir)
        self.csv = cfg.output_format in ("csv", "both")
        self.json = cfg.output_format in ("json", "both")
        self.written: list[str] = []

    def table(self, name: str, columns, rows) -> None:
        if self.csv:
            self.written.append(str(write_csv(self.dir / name, columns, rows)))

    def summary(self, name: str, obj) -> None:
        if self.json:
            self.written.append(str(write_json(self.dir / name, obj)))


def _single_instance(cfg: RunConfig):
    """Lattice, obstacle and driver for a table or payoff source."""
    grid = cfg.require_grid()
    lattice = build_lattice(grid)
    source = cfg.require_obstacle("table", "payoff")
    if source.kind == "table":
        if cfg.driver is None:
            raise InvalidInput("a table obstacle needs a 'driver' section")
        main, post = source.table_layers(grid.num_steps)
        return lattice, Obstacle(main, post), make_driver(cfg.driver, grid.intensity, lattice), None
    model = _market(cfg, grid.intensity)
    payoff = _payoff(source.params)
    obstacle = market_mod.build_obstacle(model, payoff, lattice)
    driver = market_mod.market_driver(model, _imperfection(cfg), lattice.dt)
    return lattice, obstacle, driver, model


def _market(cfg: RunConfig, intensity: float) -> market_mod.MarketModel:
    if cfg.market is None:
        raise InvalidInput("a payoff obstacle needs a 'market' section")
    m = dict(cfg.market)
    extra = set(m) - {"r", "mu", "sigma", "beta_jump", "s0", "schedule"}
    if extra:
        raise InvalidInput(f"unknown market keys {sorted(extra)}")
    try:
        return market_mod.MarketModel(
            r=m.get("r", 0.0),
            mu=tuple(m["mu"]),
            sigma=tuple(m["sigma"]),
            beta_jump=tuple(m["beta_jump"]),
            intensity=intensity,
            s0=tuple(m.get("s0", (1.0, 1.0))),
            schedule=tuple(m.get("schedule", ())),
        )
    except KeyError as exc:
        raise InvalidInput(f"market needs {exc.args[0]!r}") from exc


def _payoff(params: dict) -> market_mod.PayoffSpec:
    extra = set(params) - {"kind", "strike", "expression", "post_expression"}
    if extra:
        raise InvalidInput(f"unknown payoff keys {sorted(extra)}")
    if "kind" not in params:
        raise InvalidInput("payoff needs a 'kind'")
    return market_mod.PayoffSpec(**params)


def _imperfection(cfg: RunConfig) -> market_mod.ImperfectionSpec:
    extra = set(cfg.imperfection) - {"kind", "borrow", "expression", "lipschitz"}
    if extra:
        raise InvalidInput(f"unknown imperfection keys {sorted(extra)}")
    return market_mod.ImperfectionSpec(**cfg.imperfection)


def _generator_steps(cfg: RunConfig) -> list[int]:
    params = cfg.obstacle.params
    if "steps" in params:
        return list(params["steps"])
    return [cfg.require_grid().num_steps]


def _generator_shape(params: dict) -> str | None:
    shape = params.get("shape", "uniform")
    if shape == "mixed":
        return None
    if shape not in OBSTACLE_SHAPES:
        raise InvalidInput(f"generator shape must be one of {OBSTACLE_SHAPES} or 'mixed'")
    return shape


def _solution_summary(sol) -> dict:
    rep = verify_skorokhod(sol)
    return {
        "y0": sol.y0,
        "A_mass": sol.a_mass,
        "C_mass": sol.c_mass,
        "max_residual": reconstruct(sol),
        "max_A_violation": rep.max_A_violation,
        "max_C_violation": rep.max_C_violation,
    }


def _solution_ok(summary: dict) -> bool:
    return (
        summary["max_residual"] <= 1e-10
        and summary["max_A_violation"] <= 1e-12
        and summary["max_C_violation"] <= 1e-12
    )


def solve_case(index: int, seed: int, steps: list[int], shape: str | None) -> dict:
    K = steps[index % len(steps)]
    inst = random_instance(seed, index, K, shape or OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    return {"index": index, "steps": K, "driver": inst.driver_spec["name"], **_solution_summary(sol)}


BATCH_SOLVE_COLUMNS = ("index", "steps", "driver", "y0", "A_mass", "C_mass", "max_residual",
                       "max_A_violation", "max_C_violation")


def cmd_solve(cfg: RunConfig, parallel: bool) -> int:
    out = Outputs(cfg)
    source = cfg.require_obstacle()
    if source.kind == "generator":
        seed = cfg.require_seed()
        fn = partial(solve_case, seed=seed, steps=_generator_steps(cfg), shape=_generator_shape(source.params))
        rows = run_cases(fn, range(source.params["count"]), parallel)
        failed = [r["index"] for r in rows if not _solution_ok(r)]
        out.table("solve_batch.csv", BATCH_SOLVE_COLUMNS, rows)
        out.summary("summary.json", {"instances": len(rows), "failed": failed, "config": cfg.to_dict()})
        if failed:
            raise VerificationFailed(f"solver checks failed on instances {failed}")
        return EXIT_OK
    lattice, obstacle, driver, _ = _single_instance(cfg)
    sol = solve_rbsde(lattice, obstacle, driver)
    summary = _solution_summary(sol)
    out.table("rbsde.csv", RBSDE_COLUMNS, rbsde_rows(sol))
    out.summary("summary.json", {**summary, "config": cfg.to_dict()})
    if not _solution_ok(summary):
        raise VerificationFailed("solver output fails the Skorokhod or reconstruction checks")
    return EXIT_OK


BATCH_ORACLE_COLUMNS = ("index", "steps", "shape", "driver", "rules", "y0", "oracle_value", "gap",
                        "strict_value", "y_post", "strict_gap", "split_gap")


def cmd_oracle(cfg: RunConfig, parallel: bool) -> int:
    out = Outputs(cfg)
    limit = cfg.oracle["limit"]
    source = cfg.require_obstacle()
    if source.kind == "generator":
        seed = cfg.require_seed()
        steps = _generator_steps(cfg)
        if max(steps) > limit:
            raise OracleTooLarge(f"generator depth {max(steps)} exceeds oracle limit {limit}")
        count = source.params["count"]
        fn = partial(oracle_case, seed=seed, count=count, fault=cfg.oracle.get("fault_injection"),
                     steps=steps, shape=_generator_shape(source.params))
        rows = run_cases(fn, range(count), parallel)
        failed = [r["index"] for r in rows if not (r["ok"] and r["strict_ok"])]
        out.table("oracle_batch.csv", BATCH_ORACLE_COLUMNS, rows)
        out.summary("oracle_summary.json", {
            "instances": len(rows),
            "max_gap": max(r["gap"] for r in rows),
            "max_strict_gap": max(r["strict_gap"] for r in rows),
            "failed": failed,
            "config": cfg.to_dict(),
        })
        if failed:
            raise VerificationFailed(f"oracle and solver disagree on instances {failed}")
        return EXIT_OK
    lattice, obstacle, driver, _ = _single_instance(cfg)
    check_oracle_size(lattice, None, limit)
    sol = solve_rbsde(lattice, obstacle, driver)
    if cfg.oracle.get("fault_injection"):
        sol.y.main[0][0] += cfg.oracle["fault_injection"]["offset"]
    res = oracle_search(lattice, obstacle, driver, None, limit)
    space = enumerate_stopping_rules(lattice, None, limit)
    if res.count <= ORACLE_CSV_CAP:
        values = rule_values(lattice, obstacle, driver, None, limit)
        out.table("oracle_rules.csv", ORACLE_COLUMNS, (
            {"rule_id": i, "rule_description": space[i].describe(), "value_at_root": v}
            for i, v in enumerate(values)
        ))
    y_post = float(sol.y.post[0][0]) if lattice.num_steps else None
    summary = {
        "value": res.value,
        "y0": sol.y0,
        "gap": abs(res.value - sol.y0),
        "strict_value": res.strict_value,
        "y_post": y_post,
        "strict_gap": abs(res.strict_value - y_post) if res.strict_value is not None else None,
        "argmax_rule_id": res.argmax,
        "argmax_rule": space[res.argmax].describe(),
        "rule_count": res.count,
        "rules_listed": res.count <= ORACLE_CSV_CAP,
        "config": cfg.to_dict(),
    }
    out.summary("oracle_summary.json", summary)
    if summary["gap"] > GAP_TOL or (summary["strict_gap"] or 0.0) > GAP_TOL:
        raise VerificationFailed(f"oracle gap {summary['gap']:.3g} exceeds {GAP_TOL}")
    return EXIT_OK


def _price_once(cfg: RunConfig, num_steps: int, limit: int):
    grid = cfg.require_grid()
    lattice = build_lattice(GridSpec(num_steps, grid.horizon, grid.intensity))
    model = _market(cfg, grid.intensity)
    payoff = _payoff(cfg.require_obstacle("payoff").params)
    res = market_mod.price_american(model, payoff, _imperfection(cfg), lattice)
    hedge = market_mod.superhedging_strategy(res.solution, model)
    sol = res.solution
    summary = {
        "steps": num_steps,
        "u0": res.u0,
        "A_mass": sol.a_mass,
        "C_mass": sol.c_mass,
        "shortfall": hedge.max_shortfall,
        "shortfall_bound": hedge.shortfall_bound,
        "shortfall_within_bound": hedge.within_bound,
        "mean_terminal_shortfall": hedge.mean_terminal_shortfall,
        "wealth_residual": hedge.wealth_residual,
        "condition_number": model.condition_number(),
    }
    if num_steps <= limit:
        summary["oracle_gap"] = abs(value_by_oracle(lattice, sol.obstacle, sol.driver, None, limit) - res.u0)
    return res, hedge, summary


def cmd_price(cfg: RunConfig, parallel: bool) -> int:
    out = Outputs(cfg)
    limit = cfg.oracle["limit"]
    base = cfg.require_grid().num_steps
    res, hedge, summary = _price_once(cfg, base, limit)
    summary["argmax_exercise_nodes"] = [n.node_id for n in touching_rule(res.solution).hit_nodes()]
    out.table("pricing.csv", PRICING_COLUMNS, pricing_rows(res.solution, res.s1, res.s2, hedge))
    failures = []
    if summary.get("oracle_gap", 0.0) > GAP_TOL:
        failures.append("oracle_gap")
    if not summary["shortfall_within_bound"]:
        failures.append("shortfall_bound")
    refine = cfg.price["refine"]
    if refine:
        sweep = [summary] + [_price_once(cfg, base * 2**j, limit)[2] for j in range(1, refine + 1)]
        summary["refinement"] = [
            {k: s[k] for k in ("steps", "u0", "shortfall", "shortfall_bound", "mean_terminal_shortfall")}
            for s in sweep
        ]
        summary["shortfall_nonincreasing"] = nonincreasing(s["shortfall"] for s in sweep)
        if not summary["shortfall_nonincreasing"]:
            failures.append("shortfall_nonincreasing")
    summary["failed_checks"] = failures
    out.summary("pricing_summary.json", {**summary, "config": cfg.to_dict()})
    if failures:
        raise VerificationFailed(f"pricing checks failed: {', '.join(failures)}")
    return EXIT_OK


def cmd_verify(cfg: RunConfig, parallel: bool, names: list[str] | None = None) -> int:
    out = Outputs(cfg)
    names = names or list(cfg.checks) or list(DEFAULT_SUITES)
    unknown = [n for n in names if n not in SUITES]
    if unknown:
        raise UnknownCheck(f"unknown checks {unknown}; known: {sorted(SUITES)}")
    seed = cfg.require_seed()
    results = []
    for name in names:
        options = dict(cfg.checks.get(name, {}))
        count = int(options.pop("count", DEFAULT_COUNTS[name]))
        if options:
            raise InvalidInput(f"unknown options for check {name!r}: {sorted(options)}")
        result = SUITES[name](seed, count, parallel)
        results.append(result)
        if result.rows:
            out.table(f"verify_{name}.csv", list(result.rows[0]), result.rows)
    failed = [r.name for r in results if not r.passed]
    out.summary("verify_summary.json", {
        "passed": not failed,
        "failed": failed,
        "suites": [r.summary() for r in results],
        "config": cfg.to_dict(),
    })
    for r in results:
        print(f"{r.name}: {'pass' if r.passed else 'FAIL'} ({r.checked} cases)")
    if failed:
        raise VerificationFailed(f"failed checks: {', '.join(failed)}")
    return EXIT_OK


COMMANDS = {"solve": cmd_solve, "oracle": cmd_oracle, "price": cmd_price, "verify": cmd_verify}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config, or a summary JSON with an embedded config")
    common.add_argument("--seed", type=int, help="seed for generated instances (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--format", choices=("csv", "json", "both"), help="which reports to write")
    common.add_argument("--parallel", choices=("on", "off"), default="off", help="process pool for batches")
    parser = argparse.ArgumentParser(prog="nlstop", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("solve", parents=[common], help="solve one RBSDE or a generated batch")
    sub.add_parser("oracle", parents=[common], help="brute-force value versus the solver")
    sub.add_parser("price", parents=[common], help="American option price and superhedge")
    verify = sub.add_parser("verify", parents=[common], help="run randomized property suites")
    verify.add_argument("--check", action="append", dest="checks", help="suite name (repeatable)")
    return parser


def _report_error(code: str, message: str) -> None:
    print(json.dumps({"error": {"code": code, "message": message}}, sort_keys=True), file=sys.stderr)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config, seed=args.seed, out=args.out, fmt=args.format)
        parallel = args.parallel == "on"
        if args.command == "verify":
            code = cmd_verify(cfg, parallel, args.checks)
        else:
            code = COMMANDS[args.command](cfg, parallel)
    except InvalidInput as exc:
        _report_error(exc.code, str(exc))
        return EXIT_INVALID
    except NlstopError as exc:
        _report_error(exc.code, str(exc))
        return EXIT_FAILURE
    except (ValueError, TypeError) as exc:
        _report_error("CONFIG_INVALID", str(exc))
        return EXIT_INVALID
    return code


if __name__ == "__main__":
    sys.exit(main())
