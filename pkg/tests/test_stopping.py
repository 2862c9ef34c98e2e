import numpy as np
import pytest

from nlstop.bsde import solve_bsde, zero_driver
from nlstop.errors import OracleTooLarge, PreconditionFailed
from nlstop.generators import random_instance
from nlstop.lattice import GridSpec, Node, Phase, Process, StoppingRule, build_lattice, enumerate_stopping_rules
from nlstop.market import ImperfectionSpec, MarketModel, PayoffSpec, price_american
from nlstop.rbsde import Obstacle, solve_rbsde
from nlstop.stopping import (
    check_optimality_criterion,
    check_supermartingale,
    epsilon_constant,
    epsilon_optimal_rule,
    optimal_rule,
    oracle_search,
    payoff_value,
    rule_values,
    snell_minimality_check,
    strict_value_by_oracle,
    strict_value_identities,
    touching_rule,
    value_by_oracle,
    value_process_by_oracle,
)

import reference


def brute_force(lat, obstacle, driver):
    """Max over every enumerated rule of the solved unreflected value."""
    return max(solve_bsde(lat, obstacle, rule, driver).x0 for rule in enumerate_stopping_rules(lat))


def test_constant_obstacle():
    lat = build_lattice(GridSpec(2, 1.0, 0.5))
    assert value_by_oracle(lat, Process.constant(lat, 0.6), zero_driver()) == pytest.approx(0.6, abs=1e-15)


def test_one_step_hand_enumeration():
    lat = build_lattice(GridSpec(1, 1.0, 0.5))
    xi = Process.constant(lat, 0.0)
    xi.main[0][0] = 0.2
    xi.post[0][0] = 0.3
    xi.main[1][:] = [1.0, 0.0, 0.0, 0.2]
    # three rules: stop at root Main (0.2), at root Post (0.3), at maturity (E = 0.3)
    assert len(enumerate_stopping_rules(lat)) == 3
    values = rule_values(lat, xi, zero_driver())
    np.testing.assert_allclose(values, [0.2, 0.3, 0.3], atol=1e-15)
    res = oracle_search(lat, xi, zero_driver())
    assert res.value == pytest.approx(0.3, abs=1e-15)
    # ties resolve to the first rule in canonical order: stop at the Post node
    assert res.argmax == 1


@pytest.mark.parametrize("index", range(10))
def test_oracle_matches_rule_by_rule_evaluation(index):
    inst = random_instance(500, index, 1 + index % 2, ("uniform", "rusc", "regular")[index % 3])
    lat = inst.lattice
    expected = brute_force(lat, inst.obstacle, inst.driver)
    assert value_by_oracle(lat, inst.obstacle, inst.driver) == pytest.approx(expected, abs=1e-12)
    assert solve_rbsde(lat, inst.obstacle, inst.driver).y0 == pytest.approx(expected, abs=1e-10)


@pytest.mark.parametrize("index", range(4))
def test_rule_values_match_reference_value_sets(index):
    inst = random_instance(501, index, 2, "uniform")
    lat = inst.lattice
    tree = reference.Tree(2, lat.horizon, lat.intensity)
    mains, _ = reference.value_sets(tree, inst.obstacle.main, inst.obstacle.post, inst.driver)
    ours = np.sort(rule_values(lat, inst.obstacle, inst.driver))
    np.testing.assert_allclose(ours, mains, atol=1e-12)


def test_argmax_rule_attains_value():
    inst = random_instance(502, 0, 2, "uniform")
    lat = inst.lattice
    res = oracle_search(lat, inst.obstacle, inst.driver)
    rule = res.rule(lat)
    assert solve_bsde(lat, inst.obstacle, rule, inst.driver).x0 == pytest.approx(res.value, abs=1e-14)


def test_three_step_oracle_against_solver():
    inst = random_instance(503, 0, 3, "uniform", driver_kind="zero")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    res = oracle_search(inst.lattice, inst.obstacle, inst.driver)
    assert res.count == 2 + 83**4
    assert res.value == pytest.approx(sol.y0, abs=1e-10)


def test_oracle_limit_is_enforced():
    lat = build_lattice(GridSpec(4, 1.0, 0.5))
    with pytest.raises(OracleTooLarge):
        value_by_oracle(lat, Process.constant(lat, 0.0), zero_driver())


def test_subtree_values_match_solver():
    inst = random_instance(504, 1, 4, "uniform")
    lat = inst.lattice
    sol = solve_rbsde(lat, inst.obstacle, inst.driver)
    for node in (Node(1, Phase.MAIN, 2), Node(2, Phase.POST, 9), Node(3, Phase.MAIN, 40)):
        assert value_by_oracle(lat, inst.obstacle, inst.driver, node) == pytest.approx(sol.y[node], abs=1e-10)


def test_value_process_matches_solver():
    inst = random_instance(504, 2, 3, "uniform")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    proc = value_process_by_oracle(inst.lattice, inst.obstacle, inst.driver)
    assert proc.max_abs_diff(sol.y) <= 1e-10


def test_strict_value_next_to_maturity_is_continuation():
    lat = build_lattice(GridSpec(2, 1.0, 0.5))
    xi = Process.constant(lat, 0.0)
    xi.main[2][:] = np.arange(16) / 16
    node = Node(1, Phase.MAIN, 1)
    cont = float(np.dot(lat.probs, xi.main[2][4:8]))
    assert strict_value_by_oracle(lat, xi, zero_driver(), node) == pytest.approx(cont, abs=1e-15)


@pytest.mark.parametrize("index", range(10))
def test_strict_value_identities(index):
    inst = random_instance(505, index, 1 + index % 2, "uniform")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    err_plus, err_v = strict_value_identities(sol)
    assert err_plus <= 1e-10 and err_v <= 1e-10


def test_epsilon_rule_huge_epsilon_stops_at_start():
    inst = random_instance(506, 0, 3, "rusc")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    span = (sol.y - inst.obstacle).max()
    res = epsilon_optimal_rule(sol, span + 1.0)
    assert res.rule == StoppingRule.at_root(inst.lattice)
    assert res.gap == pytest.approx(sol.y0 - inst.obstacle.main[0][0], abs=1e-15)
    assert res.gap <= res.bound


@pytest.mark.parametrize("index", range(10))
def test_epsilon_rule_within_bound(index):
    inst = random_instance(507, index, 1 + index % 4, "rusc")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    L = epsilon_constant(inst.driver, inst.lattice.horizon)
    for eps in (1e-1, 1e-2):
        res = epsilon_optimal_rule(sol, eps)
        assert res.hit_inequality_holds
        assert res.gap <= L * eps
        # direct evaluation of the stopped payoff
        x0 = solve_bsde(inst.lattice, inst.obstacle, res.rule, inst.driver).x0
        assert res.gap == pytest.approx(sol.y0 - x0, abs=1e-12)


def test_epsilon_rule_without_right_regularity():
    lat = build_lattice(GridSpec(1, 1.0, 0.5))
    xi = Obstacle.from_process(Process.constant(lat, 0.0))
    xi.post[0][0] = 1.0
    sol = solve_rbsde(lat, xi, zero_driver())
    res = epsilon_optimal_rule(sol, 0.1)
    # the rule still exists (it hits at the Post node) but the hit inequality read at t_0 fails
    assert res.rule.hit(0, Phase.POST)[0]
    assert not res.hit_inequality_holds
    assert res.max_hit_excess == pytest.approx(0.9)


def test_optimal_rule_at_touching_start():
    lat = build_lattice(GridSpec(2, 1.0, 0.5))
    xi = Obstacle.from_process(Process.constant(lat, 1.0))
    sol = solve_rbsde(lat, xi, zero_driver())
    res = optimal_rule(sol)
    assert res.rule == StoppingRule.at_root(lat)
    assert check_optimality_criterion(sol, StoppingRule.at_root(lat)).optimal


@pytest.mark.parametrize("index", range(10))
def test_optimal_rule_on_regular_obstacles(index):
    inst = random_instance(508, index, 1 + index % 5, "regular")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    res = optimal_rule(sol)
    assert abs(res.gap) <= 1e-9
    assert res.stabilized and res.matches_tau0 and res.nondecreasing
    report = check_optimality_criterion(sol, res.rule)
    assert report.optimal and abs(report.direct_gap) <= 1e-9


def test_optimal_rule_for_american_put():
    model = MarketModel(0.03, (0.06, 0.02), (0.25, 0.15), (0.1, -0.2), 0.4)
    lat = build_lattice(GridSpec(5, 1.0, 0.4))
    res = price_american(model, PayoffSpec("put", 1.05), ImperfectionSpec(), lat)
    opt = optimal_rule(res.solution, check_regularity=False)
    assert abs(opt.gap) <= 1e-9
    assert check_optimality_criterion(res.solution, opt.rule).optimal


def test_optimal_rule_requires_left_regularity():
    lat = build_lattice(GridSpec(2, 1.0, 0.5))
    xi = Obstacle.from_process(Process.constant(lat, 0.0))
    xi.main[1][0] = 0.5
    sol = solve_rbsde(lat, xi, zero_driver())
    with pytest.raises(PreconditionFailed):
        optimal_rule(sol)


def test_late_candidate_is_not_optimal():
    lat = build_lattice(GridSpec(2, 1.0, 0.5))
    xi = Obstacle.from_process(Process.constant(lat, 0.0))
    xi.post[0][0] = 1.0
    sol = solve_rbsde(lat, xi, zero_driver())
    late = StoppingRule.at_terminal(lat)
    report = check_optimality_criterion(sol, late)
    assert not report.optimal and not report.is_martingale_segment
    assert report.direct_gap == pytest.approx(1.0)
    assert check_optimality_criterion(sol, touching_rule(sol)).optimal


def test_supermartingale_checks():
    inst = random_instance(509, 0, 3, "uniform")
    lat = inst.lattice
    x = solve_bsde(lat, inst.obstacle, StoppingRule.at_terminal(lat), inst.driver).x
    assert abs(check_supermartingale(lat, x, inst.driver).max_violation) <= 1e-10
    y = solve_rbsde(lat, inst.obstacle, inst.driver).y
    assert check_supermartingale(lat, y, inst.driver).passes
    rising = Process.from_function(lat, lambda k, ph, idx: np.full(idx.shape, 0.1 * k))
    assert check_supermartingale(lat, rising, zero_driver()).max_violation > 0.1


def test_supermartingale_sampled_beyond_limit():
    inst = random_instance(509, 1, 4, "uniform")
    lat = inst.lattice
    y = solve_rbsde(lat, inst.obstacle, inst.driver).y
    report = check_supermartingale(lat, y, inst.driver, pair_budget=30)
    assert not report.exhaustive and report.passes
    rising = Process.from_function(lat, lambda k, ph, idx: np.full(idx.shape, 0.1 * k))
    assert check_supermartingale(lat, rising, zero_driver(), pair_budget=5).max_violation > 0.1


def test_snell_minimality():
    inst = random_instance(510, 0, 3, "uniform")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    report = snell_minimality_check(sol, competitor_count=10)
    assert report.passes and report.min_margin == 0
    # for the zero driver, adding a positive constant keeps a martingale offset and dominates
    sol0 = solve_rbsde(inst.lattice, inst.obstacle, zero_driver())
    assert ((sol0.y + 0.25) - sol0.y).min() > 0


def test_payoff_value_at_root():
    inst = random_instance(511, 0, 2, "uniform")
    sol = solve_rbsde(inst.lattice, inst.obstacle, inst.driver)
    rule = touching_rule(sol)
    value = payoff_value(sol, rule)
    assert value.main[0][0] == pytest.approx(sol.y0, abs=1e-12)
