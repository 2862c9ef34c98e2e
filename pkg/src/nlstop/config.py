"""Run configuration: YAML in, a validated and fully resolved ``RunConfig`` out.

Numeric fields accept YAML numbers or numeric strings such as ``"1e-3"``;
both are stored as binary floats.  A summary JSON written by the CLI embeds
its resolved config under ``"config"`` and can be passed back as ``--config``.
"""

from __future__ import annotations

from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .errors import InvalidInput
from .lattice import NUM_BRANCHES, GridSpec

OBSTACLE_SOURCES = ("table", "payoff", "generator")
FORMATS = ("csv", "json", "both")
TOP_LEVEL_KEYS = {
    "grid", "driver", "obstacle", "market", "imperfection", "checks", "output", "seed", "oracle", "price",
}


def number(value, name: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"{name} must be a number, got {value!r}") from exc
    if not np.isfinite(out):
        raise InvalidInput(f"{name} must be finite, got {value!r}")
    return out


def integer(value, name: str) -> int:
    if isinstance(value, bool):
        raise InvalidInput(f"{name} must be an integer, got {value!r}")
    try:
        out = int(value)
    except (TypeError, ValueError) as exc:
        raise InvalidInput(f"{name} must be an integer, got {value!r}") from exc
    if out != number(value, name):
        raise InvalidInput(f"{name} must be an integer, got {value!r}")
    return out


def _numbers_in(obj, name: str):
    """Coerce every leaf of a parameter tree to float, keeping strings named ``expression``."""
    if isinstance(obj, Mapping):
        return {k: (v if k in ("name", "expression", "kind", "post_expression") else _numbers_in(v, f"{name}.{k}"))
                for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_numbers_in(v, name) for v in obj]
    if isinstance(obj, bool):
        return obj
    return number(obj, name)


def _section(raw: Mapping, key: str) -> dict:
    value = raw.get(key) or {}
    if not isinstance(value, Mapping):
        raise InvalidInput(f"section {key!r} must be a mapping")
    return dict(value)


@dataclass
class ObstacleSource:
    kind: str
    params: dict

    def table_layers(self, num_steps: int) -> tuple[list[np.ndarray], list[np.ndarray]]:
        p = self.params
        if "constant" in p:
            c = number(p["constant"], "obstacle.table.constant")
            main = [np.full(NUM_BRANCHES**k, c) for k in range(num_steps + 1)]
            return main, [m.copy() for m in main[:num_steps]]
        try:
            main = [np.asarray([number(v, "obstacle.table.main") for v in layer]) for layer in p["main"]]
            post_raw = p.get("post")
        except (KeyError, TypeError) as exc:
            raise InvalidInput("obstacle.table needs 'constant' or 'main' layers") from exc
        post = main[:num_steps] if post_raw is None else [
            np.asarray([number(v, "obstacle.table.post") for v in layer]) for layer in post_raw
        ]
        if len(main) != num_steps + 1 or len(post) != num_steps:
            raise InvalidInput(f"obstacle table needs {num_steps + 1} main and {num_steps} post layers")
        for k, layer in enumerate(main):
            if layer.shape != (NUM_BRANCHES**k,):
                raise InvalidInput(f"main layer {k} needs {NUM_BRANCHES**k} values")
        for k, layer in enumerate(post):
            if layer.shape != (NUM_BRANCHES**k,):
                raise InvalidInput(f"post layer {k} needs {NUM_BRANCHES**k} values")
        return main, [np.array(p_) for p_ in post]


@dataclass
class RunConfig:
    grid: GridSpec | None = None
    driver: dict | None = None
    obstacle: ObstacleSource | None = None
    market: dict | None = None
    imperfection: dict = field(default_factory=lambda: {"kind": "perfect"})
    checks: dict = field(default_factory=dict)
    output_dir: str = "out"
    output_format: str = "both"
    seed: int | None = None
    oracle: dict = field(default_factory=lambda: {"limit": 3})
    price: dict = field(default_factory=lambda: {"refine": 0})

    def to_dict(self) -> dict:
        """Resolved settings; the output directory is left out so summaries do not depend on it."""
        out = {
            "checks": self.checks,
            "imperfection": self.imperfection,
            "oracle": self.oracle,
            "output": {"format": self.output_format},
            "price": self.price,
            "seed": self.seed,
        }
        if self.grid is not None:
            out["grid"] = {"steps": self.grid.num_steps, "horizon": self.grid.horizon, "intensity": self.grid.intensity}
        if self.driver is not None:
            out["driver"] = self.driver
        if self.obstacle is not None:
            out["obstacle"] = {self.obstacle.kind: self.obstacle.params}
        if self.market is not None:
            out["market"] = self.market
        return out

    def require_grid(self) -> GridSpec:
        if self.grid is None:
            raise InvalidInput("this command needs a 'grid' section")
        return self.grid

    def require_obstacle(self, *kinds: str) -> ObstacleSource:
        if self.obstacle is None:
            raise InvalidInput("this command needs an 'obstacle' section")
        if kinds and self.obstacle.kind not in kinds:
            raise InvalidInput(f"obstacle source {self.obstacle.kind!r} not supported here; use one of {kinds}")
        return self.obstacle

    def require_seed(self) -> int:
        if self.seed is None:
            raise InvalidInput("a seed is mandatory for generated instances (config 'seed' or --seed)")
        return self.seed


def _grid(section: dict) -> GridSpec:
    extra = set(section) - {"steps", "horizon", "intensity"}
    if extra:
        raise InvalidInput(f"unknown grid keys {sorted(extra)}")
    try:
        spec = GridSpec(
            integer(section["steps"], "grid.steps"),
            number(section.get("horizon", 1.0), "grid.horizon"),
            number(section["intensity"], "grid.intensity"),
        )
    except KeyError as exc:
        raise InvalidInput(f"grid needs {exc.args[0]!r}") from exc
    spec.validate()
    return spec


def _obstacle(section: dict) -> ObstacleSource | None:
    if not section:
        return None
    present = [k for k in OBSTACLE_SOURCES if k in section]
    extra = set(section) - set(OBSTACLE_SOURCES)
    if extra:
        raise InvalidInput(f"unknown obstacle keys {sorted(extra)}")
    if len(present) != 1:
        raise InvalidInput(f"exactly one obstacle source is required, got {present or 'none'}")
    kind = present[0]
    params = dict(section[kind] or {})
    if kind == "generator":
        params.setdefault("shape", "uniform")
        params.setdefault("count", 1)
        params["count"] = integer(params["count"], "obstacle.generator.count")
        if "seed" in params:
            params["seed"] = integer(params["seed"], "obstacle.generator.seed")
        if "steps" in params:
            params["steps"] = [integer(v, "obstacle.generator.steps") for v in params["steps"]]
        extra = set(params) - {"shape", "count", "seed", "steps"}
        if extra:
            raise InvalidInput(f"unknown generator keys {sorted(extra)}")
    elif kind == "payoff":
        if "strike" in params:
            params["strike"] = number(params["strike"], "obstacle.payoff.strike")
    return ObstacleSource(kind, params)


def resolve(raw: Mapping, seed: int | None = None, out: str | None = None, fmt: str | None = None) -> RunConfig:
    """Validate a parsed config; CLI flags override the matching fields."""
    if not isinstance(raw, Mapping):
        raise InvalidInput("config must be a mapping")
    if "config" in raw and isinstance(raw["config"], Mapping):
        raw = raw["config"]
    unknown = set(raw) - TOP_LEVEL_KEYS
    if unknown:
        raise InvalidInput(f"unknown config sections {sorted(unknown)}")
    cfg = RunConfig()
    grid = _section(raw, "grid")
    cfg.grid = _grid(grid) if grid else None
    driver = _section(raw, "driver")
    cfg.driver = _numbers_in(driver, "driver") if driver else None
    if cfg.driver is not None and "name" not in cfg.driver:
        raise InvalidInput("driver needs a 'name'")
    cfg.obstacle = _obstacle(_section(raw, "obstacle"))
    market = _section(raw, "market")
    cfg.market = _numbers_in(market, "market") if market else None
    imperfection = _section(raw, "imperfection")
    if imperfection:
        cfg.imperfection = _numbers_in(imperfection, "imperfection")
    checks = raw.get("checks") or {}
    if isinstance(checks, (list, tuple)):
        checks = {str(name): {} for name in checks}
    if not isinstance(checks, Mapping):
        raise InvalidInput("checks must be a list of names or a mapping")
    cfg.checks = {str(k): _numbers_in(dict(v or {}), f"checks.{k}") for k, v in checks.items()}
    output = _section(raw, "output")
    cfg.output_dir = str(out if out is not None else output.get("dir", "out"))
    cfg.output_format = str(fmt if fmt is not None else output.get("format", "both"))
    if cfg.output_format not in FORMATS:
        raise InvalidInput(f"output format must be one of {FORMATS}")
    raw_seed = raw.get("seed")
    if seed is not None:
        cfg.seed = integer(seed, "seed")
    elif cfg.obstacle is not None and cfg.obstacle.kind == "generator" and "seed" in cfg.obstacle.params:
        cfg.seed = cfg.obstacle.params["seed"]
    elif raw_seed is not None:
        cfg.seed = integer(raw_seed, "seed")
    if cfg.seed is not None and cfg.seed < 0:
        raise InvalidInput("seed must be a nonnegative integer")
    if cfg.obstacle is not None and cfg.obstacle.kind == "generator":
        cfg.obstacle.params["seed"] = cfg.require_seed()
    oracle = _section(raw, "oracle")
    cfg.oracle = {"limit": integer(oracle.get("limit", 3), "oracle.limit")}
    if "fault_injection" in oracle:
        fi = dict(oracle["fault_injection"] or {})
        cfg.oracle["fault_injection"] = {
            "index": integer(fi.get("index", 0), "oracle.fault_injection.index"),
            "offset": number(fi.get("offset", 1e-6), "oracle.fault_injection.offset"),
        }
    price = _section(raw, "price")
    cfg.price = {"refine": integer(price.get("refine", 0), "price.refine")}
    if cfg.price["refine"] < 0:
        raise InvalidInput("price.refine must be nonnegative")
    return cfg


def load_config(path: str | Path | None, **overrides) -> RunConfig:
    if path is None:
        return resolve({}, **overrides)
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise InvalidInput(f"cannot read config {path}: {exc.strerror}") from exc
    try:
        raw = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise InvalidInput(f"cannot parse config {path}: {exc}") from exc
    return resolve(raw or {}, **overrides)


__all__ = ["ObstacleSource", "RunConfig", "load_config", "number", "resolve"]
