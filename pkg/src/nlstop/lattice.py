"""Brownian-Poisson scenario tree on a doubled time grid.

Every grid time ``t_k`` carries two sub-times: ``(k, MAIN)`` is the value at
``t_k`` and ``(k, POST)`` the value just after it.  The Main->Post edge is
deterministic; each Post node at step ``k < K`` branches four ways into the
Main nodes of step ``k + 1``:

    branch 0: dW = +sqrt(dt), dN = 0
    branch 1: dW = -sqrt(dt), dN = 0
    branch 2: dW = +sqrt(dt), dN = 1
    branch 3: dW = -sqrt(dt), dN = 1

Nodes of layer ``k`` are indexed by the base-4 integer of their branch path
(first branch most significant), so the children of ``i`` are ``4 i + b``.
Adapted processes are stored layer by layer as numpy arrays.
"""

from __future__ import annotations

import enum
from collections.abc import Callable, Iterator, Sequence
from dataclasses import dataclass
from functools import cached_property
from typing import NamedTuple

import numpy as np

from .errors import InvalidGrid, OracleTooLarge

NUM_BRANCHES = 4
DEFAULT_ORACLE_LIMIT = 3


class Phase(enum.IntEnum):
    MAIN = 0
    POST = 1

    @property
    def label(self) -> str:
        return self.name.lower()


class Node(NamedTuple):
    step: int
    phase: Phase
    index: int

    @property
    def subtime(self) -> int:
        return 2 * self.step + int(self.phase)

    @property
    def path(self) -> tuple[int, ...]:
        digits = []
        idx = self.index
        for _ in range(self.step):
            digits.append(idx % NUM_BRANCHES)
            idx //= NUM_BRANCHES
        return tuple(reversed(digits))

    @property
    def node_id(self) -> str:
        return f"{self.step}:{self.phase.label}:{''.join(map(str, self.path))}"

    @classmethod
    def parse(cls, node_id: str) -> Node:
        try:
            step_s, phase_s, digits = node_id.split(":")
            step = int(step_s)
            phase = Phase[phase_s.upper()]
        except (ValueError, KeyError) as exc:
            raise ValueError(f"malformed node id {node_id!r}") from exc
        if len(digits) != step or any(d not in "0123" for d in digits):
            raise ValueError(f"malformed node id {node_id!r}")
        index = 0
        for d in digits:
            index = NUM_BRANCHES * index + int(d)
        return cls(step, phase, index)


@dataclass(frozen=True)
class GridSpec:
    num_steps: int
    horizon: float
    intensity: float

    @property
    def dt(self) -> float:
        return self.horizon / self.num_steps

    def validate(self) -> None:
        if int(self.num_steps) != self.num_steps or self.num_steps < 1:
            raise InvalidGrid(f"num_steps must be a positive integer, got {self.num_steps}")
        if not self.horizon > 0:
            raise InvalidGrid(f"horizon must be positive, got {self.horizon}")
        if not self.intensity > 0:
            raise InvalidGrid(f"intensity must be positive, got {self.intensity}")
        if self.intensity * self.dt >= 1:
            raise InvalidGrid(
                f"jump probability lambda*dt = {self.intensity * self.dt} must be < 1"
            )


class Lattice:
    """Immutable four-branch product tree for one ``GridSpec``."""

    def __init__(self, spec: GridSpec):
        spec.validate()
        self.spec = spec
        self.num_steps = int(spec.num_steps)
        self.horizon = float(spec.horizon)
        self.intensity = float(spec.intensity)
        self.dt = self.horizon / self.num_steps
        self.sqrt_dt = float(np.sqrt(self.dt))
        self.jump_prob = self.intensity * self.dt
        q = self.jump_prob
        s = self.sqrt_dt
        self.dW = np.array([s, -s, s, -s])
        self.dN = np.array([0.0, 0.0, 1.0, 1.0])
        self.dN_comp = self.dN - q
        self.probs = np.array([(1 - q) / 2, (1 - q) / 2, q / 2, q / 2])
        # second moments by summation, so projections are orthogonal in floating point
        self.var_w = branch_sum(self.probs * self.dW * self.dW)
        self.var_n = branch_sum(self.probs * self.dN_comp * self.dN_comp)
        for arr in (self.dW, self.dN, self.dN_comp, self.probs):
            arr.setflags(write=False)

    def __repr__(self) -> str:
        return f"Lattice(K={self.num_steps}, T={self.horizon}, lambda={self.intensity})"

    @property
    def num_nodes(self) -> int:
        K = self.num_steps
        return 2 * sum(NUM_BRANCHES**k for k in range(K)) + NUM_BRANCHES**K

    def layer_size(self, k: int) -> int:
        return NUM_BRANCHES**k

    def time(self, k: int) -> float:
        return k * self.dt

    @property
    def root(self) -> Node:
        return Node(0, Phase.MAIN, 0)

    def nodes(self) -> Iterator[Node]:
        """All nodes in sub-time order, then by index."""
        for k in range(self.num_steps + 1):
            for phase in (Phase.MAIN, Phase.POST):
                if phase is Phase.POST and k == self.num_steps:
                    continue
                for i in range(self.layer_size(k)):
                    yield Node(k, phase, i)

    def node_probabilities(self, k: int) -> np.ndarray:
        return self._layer_probs[k]

    @cached_property
    def _layer_probs(self) -> list[np.ndarray]:
        out = [np.ones(1)]
        for _ in range(self.num_steps):
            out.append(np.outer(out[-1], self.probs).ravel())
        return out

    def expectation(self, values: np.ndarray, k: int) -> float:
        """Unconditional expectation of a layer-``k`` array."""
        return float(np.dot(self.node_probabilities(k), values))

    def brownian(self) -> Process:
        """W along each path (identical at Main and Post)."""
        return self._cumulative(self.dW)

    def jumps(self) -> Process:
        """N along each path (identical at Main and Post)."""
        return self._cumulative(self.dN)

    def _cumulative(self, increments: np.ndarray) -> Process:
        main = [np.zeros(1)]
        for _ in range(self.num_steps):
            main.append((main[-1][:, None] + increments[None, :]).ravel())
        return Process(main, [m.copy() for m in main[:-1]])


def build_lattice(spec: GridSpec) -> Lattice:
    return Lattice(spec)


def branch_sum(terms: np.ndarray) -> np.ndarray:
    """Sum over the trailing branch axis in fixed branch order."""
    terms = np.asarray(terms)
    return ((terms[..., 0] + terms[..., 1]) + terms[..., 2]) + terms[..., 3]


def conditional_expectation(next_values: np.ndarray, lattice: Lattice) -> np.ndarray:
    """Probability-weighted average over the four branches (last axis)."""
    return branch_sum(np.asarray(next_values, dtype=float) * lattice.probs)


def project_increment(
    next_values: np.ndarray, lattice: Lattice
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Split the martingale increment into ``z dW + kappa dN~ + h``.

    ``next_values`` has shape ``(..., 4)``.  Returns ``z``, ``kappa`` with the
    leading shape and ``h`` with the full shape; ``h`` is orthogonal to dW and
    dN~ under the branch probabilities.
    """
    v = np.asarray(next_values, dtype=float)
    p = lattice.probs
    incr = v - conditional_expectation(v, lattice)[..., None]
    z = branch_sum(p * incr * lattice.dW) / lattice.var_w
    kappa = branch_sum(p * incr * lattice.dN_comp) / lattice.var_n
    h = incr - z[..., None] * lattice.dW - kappa[..., None] * lattice.dN_comp
    return z, kappa, h


class Process:
    """Real values on every node: ``main[k]`` for k <= K, ``post[k]`` for k < K."""

    def __init__(self, main: Sequence[np.ndarray], post: Sequence[np.ndarray]):
        self.main = [np.asarray(m, dtype=float) for m in main]
        self.post = [np.asarray(p, dtype=float) for p in post]
        if len(self.post) != len(self.main) - 1:
            raise ValueError("need one more Main layer than Post layers")
        for k, (m, p) in enumerate(zip(self.main, self.post)):
            if m.shape != (NUM_BRANCHES**k,) or p.shape != (NUM_BRANCHES**k,):
                raise ValueError(f"layer {k} has wrong shape")
        if self.main[-1].shape != (NUM_BRANCHES ** (len(self.main) - 1),):
            raise ValueError("terminal layer has wrong shape")

    @property
    def num_steps(self) -> int:
        return len(self.main) - 1

    @classmethod
    def constant(cls, lattice: Lattice, value: float) -> Process:
        return cls.from_function(lattice, lambda k, phase, idx: np.full(idx.shape, float(value)))

    @classmethod
    def from_function(
        cls, lattice: Lattice, fn: Callable[[int, Phase, np.ndarray], np.ndarray]
    ) -> Process:
        K = lattice.num_steps
        main = [fn(k, Phase.MAIN, np.arange(NUM_BRANCHES**k)) for k in range(K + 1)]
        post = [fn(k, Phase.POST, np.arange(NUM_BRANCHES**k)) for k in range(K)]
        return cls(main, post)

    def layer(self, k: int, phase: Phase) -> np.ndarray:
        return self.main[k] if phase is Phase.MAIN else self.post[k]

    def __getitem__(self, node: Node) -> float:
        return float(self.layer(node.step, node.phase)[node.index])

    def copy(self) -> Process:
        return Process([m.copy() for m in self.main], [p.copy() for p in self.post])

    def values(self) -> np.ndarray:
        return np.concatenate(self.main + self.post)

    def _combine(self, other, op) -> Process:
        if isinstance(other, Process):
            return Process(
                [op(a, b) for a, b in zip(self.main, other.main)],
                [op(a, b) for a, b in zip(self.post, other.post)],
            )
        return Process([op(a, other) for a in self.main], [op(a, other) for a in self.post])

    def __add__(self, other) -> Process:
        return self._combine(other, np.add)

    __radd__ = __add__

    def __sub__(self, other) -> Process:
        return self._combine(other, np.subtract)

    def __mul__(self, other) -> Process:
        return self._combine(other, np.multiply)

    __rmul__ = __mul__

    def __neg__(self) -> Process:
        return self * -1.0

    def maximum(self, other) -> Process:
        return self._combine(other, np.maximum)

    def max_abs_diff(self, other: Process) -> float:
        return float(np.max(np.abs((self - other).values())))

    def min(self) -> float:
        return float(np.min(self.values()))

    def max(self) -> float:
        return float(np.max(self.values()))

    def __repr__(self) -> str:
        return f"{type(self).__name__}(K={self.num_steps})"


# status codes per node relative to a stopping rule
BEFORE, HIT, AFTER = 0, 1, 2


class StoppingRule:
    """Adapted stop flags with first-hit semantics.

    All terminal Main nodes are stopped.  Two rules compare equal when their
    first-hit node sets coincide.
    """

    def __init__(self, lattice: Lattice, stop_main: Sequence[np.ndarray], stop_post: Sequence[np.ndarray]):
        K = lattice.num_steps
        self.lattice = lattice
        self.stop_main = [np.asarray(s, dtype=bool).copy() for s in stop_main]
        self.stop_post = [np.asarray(s, dtype=bool).copy() for s in stop_post]
        if len(self.stop_main) != K + 1 or len(self.stop_post) != K:
            raise ValueError("stop flags do not match the lattice depth")
        self.stop_main[K][:] = True
        self._status()

    def _status(self) -> None:
        K = self.lattice.num_steps
        status_main, status_post = [], []
        reaching = np.ones(1, dtype=bool)  # no stop strictly before this node
        for k in range(K + 1):
            sm = np.where(reaching, np.where(self.stop_main[k], HIT, BEFORE), AFTER)
            status_main.append(sm)
            if k == K:
                break
            reaching_post = sm == BEFORE
            sp = np.where(reaching_post, np.where(self.stop_post[k], HIT, BEFORE), AFTER)
            status_post.append(sp)
            reaching = np.repeat(sp == BEFORE, NUM_BRANCHES)
        self.status_main = status_main
        self.status_post = status_post

    def status(self, k: int, phase: Phase) -> np.ndarray:
        return self.status_main[k] if phase is Phase.MAIN else self.status_post[k]

    def hit(self, k: int, phase: Phase) -> np.ndarray:
        return self.status(k, phase) == HIT

    def before(self, k: int, phase: Phase) -> np.ndarray:
        return self.status(k, phase) == BEFORE

    def reached(self, k: int, phase: Phase) -> np.ndarray:
        """Nodes at or after the stopping node."""
        return self.status(k, phase) != BEFORE

    def hit_nodes(self) -> list[Node]:
        out = []
        for k in range(self.lattice.num_steps + 1):
            for phase in (Phase.MAIN, Phase.POST):
                if phase is Phase.POST and k == self.lattice.num_steps:
                    continue
                out.extend(Node(k, phase, int(i)) for i in np.flatnonzero(self.hit(k, phase)))
        return out

    def describe(self) -> str:
        return " ".join(n.node_id for n in self.hit_nodes())

    def leaf_codes(self) -> np.ndarray:
        """Stopping sub-time ``2k + phase`` for each maximal path (leaf)."""
        K = self.lattice.num_steps
        codes = np.full(NUM_BRANCHES**K, -1, dtype=np.int64)
        for k in range(K + 1):
            for phase in (Phase.MAIN, Phase.POST):
                if phase is Phase.POST and k == K:
                    continue
                hit = np.repeat(self.hit(k, phase), NUM_BRANCHES ** (K - k))
                codes[hit] = 2 * k + int(phase)
        return codes

    def _key(self) -> tuple[bytes, ...]:
        return tuple(s.tobytes() for s in self.status_main + self.status_post)

    def __eq__(self, other) -> bool:
        return isinstance(other, StoppingRule) and self._key() == other._key()

    def __hash__(self) -> int:
        return hash(self._key())

    def __repr__(self) -> str:
        return f"StoppingRule({self.describe()})"

    def earliest(self, other: StoppingRule) -> StoppingRule:
        """Pathwise minimum of two rules."""
        return StoppingRule(
            self.lattice,
            [a | b for a, b in zip(self.stop_main, other.stop_main)],
            [a | b for a, b in zip(self.stop_post, other.stop_post)],
        )

    def precedes(self, other: StoppingRule) -> bool:
        """True when this rule stops no later than ``other`` on every path."""
        return bool(np.all(self.leaf_codes() <= other.leaf_codes()))

    @classmethod
    def at_subtime(cls, lattice: Lattice, k: int, phase: Phase = Phase.MAIN) -> StoppingRule:
        K = lattice.num_steps
        sm = [np.full(NUM_BRANCHES**j, j == k and phase is Phase.MAIN) for j in range(K + 1)]
        sp = [np.full(NUM_BRANCHES**j, j == k and phase is Phase.POST) for j in range(K)]
        return cls(lattice, sm, sp)

    @classmethod
    def at_root(cls, lattice: Lattice) -> StoppingRule:
        return cls.at_subtime(lattice, 0, Phase.MAIN)

    @classmethod
    def at_terminal(cls, lattice: Lattice) -> StoppingRule:
        return cls.at_subtime(lattice, lattice.num_steps, Phase.MAIN)

    @classmethod
    def from_node(cls, lattice: Lattice, node: Node) -> StoppingRule:
        """Stop at ``node`` on paths through it, at maturity elsewhere."""
        K = lattice.num_steps
        sm = [np.zeros(NUM_BRANCHES**j, dtype=bool) for j in range(K + 1)]
        sp = [np.zeros(NUM_BRANCHES**j, dtype=bool) for j in range(K)]
        (sm if node.phase is Phase.MAIN else sp)[node.step][node.index] = True
        return cls(lattice, sm, sp)


def hitting_rule(
    lattice: Lattice,
    process: Process,
    predicate: Callable[[np.ndarray, int, Phase], np.ndarray],
    start: StoppingRule | None = None,
) -> StoppingRule:
    """First sub-time at or after ``start`` where ``predicate(values, k, phase)`` holds."""
    K = lattice.num_steps
    sm, sp = [], []
    for k in range(K + 1):
        flag = np.asarray(predicate(process.main[k], k, Phase.MAIN), dtype=bool)
        if start is not None:
            flag = flag & start.reached(k, Phase.MAIN)
        sm.append(np.broadcast_to(flag, (NUM_BRANCHES**k,)))
        if k < K:
            flag = np.asarray(predicate(process.post[k], k, Phase.POST), dtype=bool)
            if start is not None:
                flag = flag & start.reached(k, Phase.POST)
            sp.append(np.broadcast_to(flag, (NUM_BRANCHES**k,)))
    return StoppingRule(lattice, sm, sp)


def rule_count(depth: int, phase: Phase = Phase.MAIN) -> int:
    """Number of first-hit rules on a subtree ``depth`` steps above maturity.

    A Main node either stops or defers to its Post node; a Post node either
    stops or continues with an independent rule in each child subtree.
    """
    main = 1
    for _ in range(depth):
        main = 2 + main**NUM_BRANCHES
    if phase is Phase.POST:
        if depth == 0:
            raise ValueError("no Post phase at maturity")
        return main - 1
    return main


class RuleSpace(Sequence):
    """Lazy, duplicate-free enumeration of the stopping rules on a subtree.

    Canonical order at a Main node: 0 stops there, 1 stops at its Post node,
    ``2 + c`` continues with the mixed-radix combination ``c`` of child rules
    (branch 0 most significant).  A Post node uses the same order without the
    leading Main option.
    """

    def __init__(self, lattice: Lattice, node: Node):
        self.lattice = lattice
        self.node = node
        self.depth = lattice.num_steps - node.step
        self._len = rule_count(self.depth, node.phase)

    def __len__(self) -> int:
        return self._len

    def __getitem__(self, i):
        if isinstance(i, slice):
            return [self[j] for j in range(*i.indices(len(self)))]
        if i < 0:
            i += len(self)
        if not 0 <= i < len(self):
            raise IndexError(i)
        K = self.lattice.num_steps
        sm = [np.zeros(NUM_BRANCHES**j, dtype=bool) for j in range(K + 1)]
        sp = [np.zeros(NUM_BRANCHES**j, dtype=bool) for j in range(K)]
        if self.node.phase is Phase.MAIN:
            self._decode_main(self.node.step, self.node.index, i, sm, sp)
        else:
            self._decode_post(self.node.step, self.node.index, i, sm, sp)
        return StoppingRule(self.lattice, sm, sp)

    def _decode_main(self, k, idx, i, sm, sp) -> None:
        if k == self.lattice.num_steps or i == 0:
            sm[k][idx] = True
        else:
            self._decode_post(k, idx, i - 1, sm, sp)

    def _decode_post(self, k, idx, i, sm, sp) -> None:
        if i == 0:
            sp[k][idx] = True
            return
        c = i - 1
        n = rule_count(self.lattice.num_steps - k - 1)
        for b in range(NUM_BRANCHES):
            digit = (c // n ** (NUM_BRANCHES - 1 - b)) % n
            self._decode_main(k + 1, NUM_BRANCHES * idx + b, digit, sm, sp)


def check_oracle_size(lattice: Lattice, node: Node | None = None, limit: int = DEFAULT_ORACLE_LIMIT) -> None:
    step = 0 if node is None else node.step
    if lattice.num_steps - step > limit:
        raise OracleTooLarge(
            f"subtree depth {lattice.num_steps - step} exceeds oracle limit {limit}"
        )


def enumerate_stopping_rules(
    lattice: Lattice, node: Node | None = None, limit: int = DEFAULT_ORACLE_LIMIT
) -> RuleSpace:
    node = lattice.root if node is None else node
    check_oracle_size(lattice, node, limit)
    return RuleSpace(lattice, node)
