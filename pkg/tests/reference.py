"""Independent scalar reference implementations used as test oracles.

Nothing here calls the package's solvers: the tree is walked node by node
with explicit branch probabilities and increments, and every implicit step
is a plain fixed-point loop.
"""

from __future__ import annotations

import itertools
import math

BRANCH_DW_SIGN = (1, -1, 1, -1)
BRANCH_JUMP = (0, 0, 1, 1)


class Tree:
    """Explicit four-branch tree with ``K`` steps on ``[0, T]``."""

    def __init__(self, K: int, T: float, lam: float):
        self.K, self.T, self.lam = K, T, lam
        self.dt = T / K
        q = lam * self.dt
        self.q = q
        self.p = [(1 - q) / 2, (1 - q) / 2, q / 2, q / 2]
        self.dw = [s * math.sqrt(self.dt) for s in BRANCH_DW_SIGN]
        self.dn = [j - q for j in BRANCH_JUMP]

    def split(self, v):
        """Mean, z, kappa of next-step values ``v`` (length 4)."""
        mean = sum(p * x for p, x in zip(self.p, v))
        z = sum(p * x * w for p, x, w in zip(self.p, v, self.dw)) / self.dt
        kappa = sum(p * x * n for p, x, n in zip(self.p, v, self.dn)) / (self.q * (1 - self.q))
        return mean, z, kappa

    def implicit(self, v, f, t, tol=1e-15, max_iter=10_000):
        mean, z, kappa = self.split(v)
        y = mean
        for _ in range(max_iter):
            nxt = mean + float(f(t, y, z, kappa)) * self.dt
            if abs(nxt - y) <= tol:
                return nxt
            y = nxt
        raise RuntimeError("reference fixed point did not converge")


def value_sets(tree: Tree, xi_main, xi_post, f):
    """All values ``E^f_{0,tau}(xi_tau)`` at the root Main and Post nodes, one per rule.

    ``xi_main[k][i]`` and ``xi_post[k][i]`` are nested lists or arrays.
    Returns ``(main_values, post_values)`` as sorted lists.
    """

    def main(k, i):
        if k == tree.K:
            return [float(xi_main[k][i])]
        return [float(xi_main[k][i])] + post(k, i)

    def post(k, i):
        out = [float(xi_post[k][i])]
        children = [main(k + 1, 4 * i + b) for b in range(4)]
        t = k * tree.dt
        for combo in itertools.product(*children):
            out.append(tree.implicit(combo, f, t))
        return out

    return sorted(main(0, 0)), sorted(post(0, 0))


def reflected_value(tree: Tree, xi_main, xi_post, f):
    """Backward reflected recursion: ``Y_post = max(xi_post, implicit step)``, ``Y_main = max(xi_main, Y_post)``."""
    y = [float(x) for x in xi_main[tree.K]]
    y_post_root = None
    for k in range(tree.K - 1, -1, -1):
        t = k * tree.dt
        new = []
        for i in range(4**k):
            p = max(float(xi_post[k][i]), tree.implicit(y[4 * i: 4 * i + 4], f, t))
            if k == 0:
                y_post_root = p
            new.append(max(float(xi_main[k][i]), p))
        y = new
    return y[0], y_post_root


def rule_count(K: int) -> int:
    """Rules at a Main node ``K`` steps from maturity, counted by brute recursion."""
    if K == 0:
        return 1
    return 1 + 1 + rule_count(K - 1) ** 4
