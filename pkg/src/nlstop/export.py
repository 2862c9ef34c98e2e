"""CSV and JSON writers with fixed column orders and reproducible bytes."""

from __future__ import annotations

import csv
import json
import math
from pathlib import Path

import numpy as np

from .lattice import NUM_BRANCHES, Node, Phase
from .rbsde import RbsdeSolution

RBSDE_COLUMNS = ("node_id", "t", "phase", "xi", "y", "z", "kappa", "dA", "dC") + tuple(
    f"dh_{b}" for b in range(NUM_BRANCHES)
)
PRICING_COLUMNS = RBSDE_COLUMNS + ("s1", "s2", "phi1", "phi2", "wealth")
ORACLE_COLUMNS = ("rule_id", "rule_description", "value_at_root")
ORACLE_CSV_CAP = 100_000


def fmt(value) -> str:
    """Shortest round-trip text for floats; blanks for missing values."""
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "true" if value else "false"
    if isinstance(value, (float, np.floating)):
        value = float(value)
        if math.isnan(value):
            return ""
        return repr(value)
    return str(value)


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_plain(v) for v in obj.tolist()]
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        if math.isnan(value):
            return None
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    return obj


def dumps(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path: Path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(obj))
    return path


def write_csv(path: Path, columns, rows) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(row.get(c)) for c in columns])
    return path


def rbsde_rows(sol: RbsdeSolution) -> list[dict]:
    """One row per node, Main before Post within a step.

    ``z, kappa, dA, dh_*`` belong to the random edge leaving a Post node and
    ``dC`` to the deterministic edge leaving a Main node; other cells are blank.
    """
    lat = sol.lattice
    rows = []
    for k in range(lat.num_steps + 1):
        t = lat.time(k)
        for phase in (Phase.MAIN, Phase.POST):
            if phase is Phase.POST and k == lat.num_steps:
                continue
            xi = sol.obstacle.layer(k, phase)
            y = sol.y.layer(k, phase)
            for i in range(len(y)):
                row = {
                    "node_id": Node(k, phase, i).node_id,
                    "t": t,
                    "phase": phase.label,
                    "xi": xi[i],
                    "y": y[i],
                }
                if phase is Phase.MAIN:
                    if k < lat.num_steps:
                        row["dC"] = sol.c[k][i]
                else:
                    row.update(z=sol.z[k][i], kappa=sol.kappa[k][i], dA=sol.a[k][i])
                    row.update({f"dh_{b}": sol.h[k][i, b] for b in range(NUM_BRANCHES)})
                rows.append(row)
    return rows


def pricing_rows(sol: RbsdeSolution, s1, s2, hedge) -> list[dict]:
    rows = rbsde_rows(sol)
    for row in rows:
        node = Node.parse(row["node_id"])
        row["s1"] = s1[node]
        row["s2"] = s2[node]
        row["wealth"] = hedge.wealth[node]
        if node.phase is Phase.POST:
            row["phi1"], row["phi2"] = hedge.phi[node.step][node.index]
    return rows


__all__ = [
    "ORACLE_COLUMNS",
    "ORACLE_CSV_CAP",
    "PRICING_COLUMNS",
    "RBSDE_COLUMNS",
    "dumps",
    "fmt",
    "pricing_rows",
    "rbsde_rows",
    "write_csv",
    "write_json",
]
