"""Acceptance gate: eleven criteria, each printed as one PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v`` or directly with
``python tests/test_acceptance.py`` for just the summary lines.
"""

from __future__ import annotations

import filecmp
import functools
import subprocess
import sys
import tempfile
import time
from collections import Counter
from pathlib import Path

import pytest

from nlstop import suites

SEED = 42
ROOT = Path(__file__).resolve().parent.parent
ORACLE_TOL = 1e-10
ORACLE_BUDGET_SECONDS = 120.0


@functools.lru_cache(maxsize=None)
def oracle_rows():
    start = time.perf_counter()
    rows = suites.run_cases(functools.partial(suites.oracle_case, seed=SEED, count=200), range(200))
    return rows, time.perf_counter() - start


def criterion_1():
    rows, seconds = oracle_rows()
    gap = max(r["gap"] for r in rows)
    steps = Counter(r["steps"] for r in rows)
    drivers = Counter(r["driver"] for r in rows)
    non_rusc = sum(not r["rusc"] for r in rows)
    ok = (
        len(rows) == 200
        and gap <= ORACLE_TOL
        and set(steps) == {1, 2, 3}
        and non_rusc > 0
        and seconds < ORACLE_BUDGET_SECONDS
    )
    detail = (
        f"max |Y0 - oracle| = {gap:.2e} over {len(rows)} instances "
        f"(K mix {dict(sorted(steps.items()))}, {non_rusc} non-rusc, drivers {dict(sorted(drivers.items()))}), "
        f"{seconds:.1f} s"
    )
    return ok, detail


def criterion_2():
    rows, _ = oracle_rows()
    strict = max(r["strict_gap"] for r in rows)
    split = max(r["split_gap"] for r in rows)
    ok = strict <= ORACLE_TOL and split <= ORACLE_TOL
    return ok, f"max |V+ - Y_post| = {strict:.2e}, max |V - max(V+, xi)| = {split:.2e} over {len(rows)} instances"


def criterion_3():
    res = suites.comparison_suite(SEED, 300)
    violations = len(res.failures)
    return res.passed and res.checked == 300, (
        f"{res.checked} pairs, {violations} violations, max Y - Y' = {res.metrics['max_violation']:.2e}"
    )


def criterion_4():
    res = suites.skorokhod_suite(SEED, 80, max_steps=8)
    m = res.metrics
    ok = res.passed and m["max_steps"] == 8
    return ok, (
        f"{res.checked} solves up to K = {m['max_steps']}: flat-off violation {m['max_flat_violation']:.2e}, "
        f"dynamics residual {m['max_residual']:.2e}"
    )


def criterion_5():
    res = suites.orthogonality_suite(SEED, 100)
    m = res.metrics
    ok = res.passed and m["max_error"] <= 1e-14 and m["h_nonzero_fraction"] >= 0.5
    return ok, (
        f"max |E[h dW]|, |E[h dN~]|, |E[h l dN~]| = {m['max_error']:.2e}; "
        f"h not identically zero on {m['h_nonzero_fraction']:.0%} of {res.checked} instances"
    )


def criterion_6():
    res = suites.refop_suite(SEED, 200, idempotence_count=100)
    m = res.metrics
    return res.passed, (
        f"200 monotone pairs (max violation {m['max_monotone_violation']:.2e}), "
        f"domination (max violation {m['max_domination_violation']:.2e}), "
        f"100 idempotence checks (max error {m['max_idempotence_error']:.2e})"
    )


def criterion_7():
    res = suites.epsilon_suite(SEED, 100)
    m = res.metrics
    return res.passed, (
        f"{res.checked} rusc instances, eps in {{1e-1, 1e-2, 1e-3}}: all gaps <= L eps "
        f"(smallest L used {m['min_L']:.3g}, empirical best constant {m['empirical_constant']:.3g})"
        if res.passed
        else f"failures at instances {res.failures[:10]}"
    )


def criterion_8():
    res = suites.optimal_suite(SEED, 100)
    stabilized = sum(r["matches_tau0"] for r in res.rows)
    return res.passed, (
        f"{res.checked} regular instances: max |Y0 - E(xi at tau0)| = {res.metrics['max_gap']:.2e}, "
        f"eps-rules reach tau0 on {stabilized}/{res.checked}"
    )


def criterion_9():
    res = suites.estimates_suite(SEED, 100, num_steps=6, coarse_steps=3)
    m = res.metrics
    return res.passed, (
        f"slack <= 1 + 10 dt on {m['within_slack_fraction']:.0%} at K = 6; "
        f"median slack K=3 {m['median_slack']['3']:.4g} -> K=6 {m['median_slack']['6']:.4g} "
        f"(median raw ratio {m['median_ratio']['3']:.3g} -> {m['median_ratio']['6']:.3g})"
    )


def criterion_10():
    res = suites.pricing_suite(SEED, 20)
    m = res.metrics
    sweep = ", ".join(f"K={r['steps']}: {r['shortfall']:.4g} (bound {r['bound']:.4g})" for r in m["refinement"])
    bounded = not res.failures
    return res.passed, (
        f"K=2 oracle gap {m['max_oracle_gap']:.2e}; per-instance bound holds on "
        f"{res.checked - len(res.failures)}/{res.checked} markets; reference max shortfall {sweep}; "
        f"nonincreasing: {m['shortfall_nonincreasing']}"
        + ("" if bounded else f"; bound failures at {res.failures}")
    )


def _run_cli(out: Path, parallel: str) -> None:
    commands = [
        ["verify", "--config", str(ROOT / "configs" / "verify_all.yaml")],
        ["oracle", "--config", str(ROOT / "configs" / "oracle_batch.yaml")],
        ["price", "--config", str(ROOT / "configs" / "price_digital.yaml")],
        ["solve", "--config", str(ROOT / "configs" / "solve_table.yaml")],
    ]
    for i, cmd in enumerate(commands):
        target = out / f"{i}_{cmd[0]}"
        subprocess.run(
            [sys.executable, "-m", "nlstop", *cmd, "--out", str(target), "--parallel", parallel],
            capture_output=True,
            check=False,
        )


def _tree_bytes_equal(a: Path, b: Path) -> tuple[bool, int]:
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    if files_a != files_b:
        return False, len(files_a)
    same = all(filecmp.cmp(a / f, b / f, shallow=False) for f in files_a)
    return same, len(files_a)


def criterion_11():
    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        runs = {"first": ("off",), "second": ("off",), "parallel": ("on",)}
        for name, (parallel,) in runs.items():
            _run_cli(tmp / name, parallel)
        rerun_ok, n = _tree_bytes_equal(tmp / "first", tmp / "second")
        parallel_ok, _ = _tree_bytes_equal(tmp / "first", tmp / "parallel")
    ok = rerun_ok and parallel_ok and n > 0
    return ok, (
        f"{n} output files from verify (all suites), oracle, price and solve: "
        f"rerun identical {rerun_ok}, parallel on/off identical {parallel_ok}"
    )


CRITERIA = {
    1: ("oracle equivalence", criterion_1),
    2: ("strict-value identities", criterion_2),
    3: ("comparison theorem", criterion_3),
    4: ("Skorokhod exactness", criterion_4),
    5: ("orthogonal component", criterion_5),
    6: ("reflection operator laws", criterion_6),
    7: ("epsilon-optimality", criterion_7),
    8: ("optimal rule", criterion_8),
    9: ("a-priori estimate", criterion_9),
    10: ("pricing and superhedge", criterion_10),
    11: ("determinism", criterion_11),
}


def line(number: int) -> tuple[bool, str]:
    name, fn = CRITERIA[number]
    ok, detail = fn()
    return ok, f"[{'PASS' if ok else 'FAIL'}] criterion {number:2d} {name}: {detail}"


@pytest.mark.parametrize("number", sorted(CRITERIA))
def test_criterion(number, capsys):
    ok, text = line(number)
    with capsys.disabled():
        print("\n" + text)
    assert ok, text


if __name__ == "__main__":
    failed = 0
    for number in sorted(CRITERIA):
        ok, text = line(number)
        failed += not ok
        print(text, flush=True)
    sys.exit(1 if failed else 0)
