"""Seeded random instances for the property suites.

Every instance is a pure function of ``(seed, index)``: it draws from
``np.random.default_rng([seed, index])`` so suites can be split across
processes without changing any value.

Driver parameters stay inside ranges where the one-step scheme is monotone
(|z coefficient| <= 0.5, kappa slope in [-lambda/2, lambda/2], |r| <= 0.1,
lambda in [0.2, 0.5] with T = 1).  Each draw is also screened with
:func:`~nlstop.bsde.check_scheme_monotonicity` and redrawn if it fails.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .bsde import Driver, check_scheme_monotonicity, make_driver
from .errors import MonotonicityFailed
from .lattice import NUM_BRANCHES, GridSpec, Lattice, Process, build_lattice
from .rbsde import Obstacle

OBSTACLE_SHAPES = ("uniform", "rusc", "regular")
DRIVER_KINDS = ("zero", "linear", "custom", "perfect_market", "borrow_rate")
MAX_REDRAWS = 50


@dataclass
class Instance:
    index: int
    lattice: Lattice
    obstacle: Obstacle
    driver: Driver
    driver_spec: dict
    shape: str
    rng: np.random.Generator = field(repr=False)


def instance_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _round(x: float) -> float:
    # short decimals keep exported configs readable and exactly re-parsable
    return float(round(x, 6))


def random_driver_spec(rng: np.random.Generator, intensity: float, kind: str | None = None) -> dict:
    kind = str(rng.choice(DRIVER_KINDS)) if kind is None else kind
    r = _round(rng.uniform(-0.1, 0.1))
    a = _round(rng.uniform(-0.5, 0.5))
    theta = _round(rng.uniform(-0.5, 0.5))
    const = _round(rng.uniform(-0.5, 0.5))
    if kind == "zero":
        return {"name": "zero"}
    if kind == "linear":
        return {"name": "linear", "r": r, "z_coef": a, "kappa_coef": _round(theta * intensity), "const": const}
    if kind == "custom":
        # concave/convex kinks in z and kappa with the same total slopes
        w = _round(rng.uniform(0, 1))
        b = _round(abs(theta) * intensity)
        expr = (
            f"{const} - {r}*y + {_round(w * a)}*z + {_round((1 - w) * abs(a))}*abs(z)"
            f" + {b}*max(kappa, 0) - {_round(0.5 * b)}*min(kappa, 0) + 0.1*min(max(y, -1), 1)*exp(-t)"
        )
        lip = abs(r) + abs(a) + 0.1 + b / np.sqrt(intensity)
        return {"name": "custom", "expression": expr, "lipschitz": _round(lip + 1e-6)}
    sigma = [_round(rng.uniform(0.1, 0.4)), _round(rng.uniform(0.1, 0.4))]
    beta = [_round(rng.uniform(0.1, 0.4)), _round(-rng.uniform(0.1, 0.4))]
    prem = np.array([rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3) * intensity])
    mu = np.array([[sigma[0], beta[0]], [sigma[1], beta[1]]]) @ prem + abs(r)
    spec = {
        "name": "perfect_market",
        "r": abs(r),
        "mu": [_round(m) for m in mu],
        "sigma": sigma,
        "beta_jump": beta,
    }
    if kind == "borrow_rate":
        spec["name"] = "borrow_rate"
        spec["borrow"] = _round(abs(r) + rng.uniform(0.0, 0.1))
    return spec


def random_driver(rng: np.random.Generator, lattice: Lattice, kind: str | None = None) -> tuple[Driver, dict]:
    """A catalog driver whose implicit step is monotone on ``lattice``."""
    for _ in range(MAX_REDRAWS):
        spec = random_driver_spec(rng, lattice.intensity, kind)
        try:
            driver = make_driver(spec, lattice.intensity, lattice)
        except MonotonicityFailed:
            continue
        if driver.lipschitz * lattice.dt < 1 and check_scheme_monotonicity(driver, lattice, 500) >= 0:
            return driver, spec
    raise RuntimeError("no monotone driver found in the safe ranges")


def random_obstacle(rng: np.random.Generator, lattice: Lattice, shape: str = "uniform") -> Obstacle:
    """Nodewise uniform[-1, 1]; ``rusc`` caps post by main; ``regular`` also caps each child by its parent post."""
    K = lattice.num_steps
    main = [rng.uniform(-1, 1, NUM_BRANCHES**k) for k in range(K + 1)]
    post = [rng.uniform(-1, 1, NUM_BRANCHES**k) for k in range(K)]
    if shape == "uniform":
        return Obstacle(main, post)
    if shape == "rusc":
        return Obstacle(main, [np.minimum(p, m) for p, m in zip(post, main)])
    if shape != "regular":
        raise ValueError(f"unknown obstacle shape {shape!r}")
    # nonincreasing along every path: each value is its predecessor minus a nonnegative step
    steps_main = [rng.uniform(0, 0.3, NUM_BRANCHES**k) * (rng.random(NUM_BRANCHES**k) < 0.5) for k in range(K + 1)]
    steps_post = [rng.uniform(0, 0.3, NUM_BRANCHES**k) * (rng.random(NUM_BRANCHES**k) < 0.5) for k in range(K)]
    out_main = [main[0]]
    out_post = []
    for k in range(K):
        out_post.append(out_main[k] - steps_post[k])
        out_main.append(np.repeat(out_post[k], NUM_BRANCHES) - steps_main[k + 1])
    return Obstacle(out_main, out_post)


def random_lattice(rng: np.random.Generator, num_steps: int, horizon: float = 1.0) -> Lattice:
    return build_lattice(GridSpec(num_steps, horizon, _round(rng.uniform(0.2, 0.5))))


def random_instance(
    seed: int,
    index: int,
    num_steps: int,
    shape: str = "uniform",
    driver_kind: str | None = None,
    horizon: float = 1.0,
) -> Instance:
    rng = instance_rng(seed, index)
    lattice = random_lattice(rng, num_steps, horizon)
    driver, spec = random_driver(rng, lattice, driver_kind)
    obstacle = random_obstacle(rng, lattice, shape)
    return Instance(index, lattice, obstacle, driver, spec, shape, rng)


def random_lift(rng: np.random.Generator, lattice: Lattice, scale: float = 0.5) -> Process:
    """Nonnegative nodewise noise, zero on about half the nodes."""
    return Process.from_function(
        lattice, lambda k, ph, idx: rng.uniform(0, scale, idx.shape) * (rng.random(idx.shape) < 0.5)
    )


def comparison_pair(seed: int, index: int, num_steps: int) -> tuple[Instance, Obstacle, Driver]:
    """An instance plus ``xi' >= xi`` and ``f' >= f``."""
    inst = random_instance(seed, index, num_steps, shape=OBSTACLE_SHAPES[index % len(OBSTACLE_SHAPES)])
    rng = inst.rng
    lifted = Obstacle.from_process(inst.obstacle + random_lift(rng, inst.lattice))
    bumped = inst.driver.shifted(_round(rng.uniform(0, 0.2)))
    return inst, lifted, bumped


__all__ = [
    "DRIVER_KINDS",
    "Instance",
    "OBSTACLE_SHAPES",
    "comparison_pair",
    "instance_rng",
    "random_driver",
    "random_driver_spec",
    "random_instance",
    "random_lattice",
    "random_lift",
    "random_obstacle",
]
