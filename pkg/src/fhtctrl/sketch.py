"""Hierarchical sketching: recover FHT cores from sketched linear systems.

Every non-root edge ``c`` owns a correlation matrix ``Z_c`` between row
sketches of the subtree and column sketches of its complement.  Its
truncated SVD fixes the gauge on that edge (``A_c`` from the left factor,
``Abar_c`` from the right factor).  Each core then solves

    B_q = (A_a x A_b x Abar_q) G_q

by contracting ``B_q`` with pseudo-inverses.  Black-box interpolation
builds ``Z`` and ``B`` from point evaluations; density estimation (see
:mod:`fhtctrl.density`) builds them from sample moments.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .basis import BasisSet
from .fht import FHT, DyadicTree

logger = logging.getLogger(__name__)

PINV_RCOND = 1e-12
RANK_RTOL = 1e-12


class RankWarning(UserWarning):
    """The requested rank exceeds the numerical rank of a sketch."""


class RankCollapseError(RuntimeError):
    """A sketched correlation matrix is (numerically) degenerate."""


class NonFiniteEvaluationError(ValueError):
    """The black-box function returned NaN or infinity."""


def gauge_factor(Z: np.ndarray, rank: int, *, strict: bool = False, label: str = "",
                 noise_floor: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
    """Balanced best rank-``r`` factorisation ``Z ~ A @ Abar``.

    ``A = U sqrt(S)`` and ``Abar = sqrt(S) V^T`` over the leading singular
    triplets.  If ``rank`` exceeds the numerical rank (``s > 1e-12 s_max``)
    it is reduced with a :class:`RankWarning`, or :class:`RankCollapseError`
    is raised when ``strict``.  Directions with singular values at or below
    ``noise_floor`` (an estimate of the sampling noise in ``Z``) are dropped
    silently.
    """
    Z = np.asarray(Z, dtype=float)
    if not np.all(np.isfinite(Z)):
        raise ValueError(f"non-finite sketch matrix {label}".strip())
    U, s, Vt = np.linalg.svd(Z, full_matrices=False)
    if s.size == 0 or s[0] <= 1e-12:
        raise RankCollapseError(f"degenerate sketch matrix {label}: all singular values below 1e-12".strip())
    numerical = int(np.sum(s > RANK_RTOL * s[0]))
    r = min(rank, s.size)
    if numerical < r:
        msg = f"requested rank {rank} exceeds numerical rank {numerical} {label}".strip()
        if strict:
            raise RankCollapseError(msg)
        warnings.warn(msg, RankWarning, stacklevel=2)
        r = numerical
    if noise_floor > 0:
        r = max(1, min(r, int(np.sum(s > noise_floor))))
    root_s = np.sqrt(s[:r])
    return U[:, :r] * root_s, root_s[:, None] * Vt[:r]


def solve_sketched_cores(
    tree: DyadicTree,
    Z: Mapping[int, np.ndarray],
    B: Mapping[int, np.ndarray],
    leaf_design: Mapping[int, np.ndarray],
    root_design: np.ndarray | None = None,
    *,
    strict: bool = False,
    labels: Mapping[int, str] | None = None,
    noise_floor: Mapping[int, float] | None = None,
) -> tuple[DyadicTree, list[np.ndarray]]:
    """Gauge-fix every edge from ``Z`` and solve every core from ``B``.

    ``leaf_design[i]`` maps leaf coefficients to the leaf row sketches
    (rows x n); ``root_design`` does the same for the control leg.  The
    returned tree carries the effective ranks.
    """
    labels = labels or {}
    noise_floor = noise_floor or {}
    A: dict[int, np.ndarray] = {}
    Abar: dict[int, np.ndarray] = {}
    ranks = list(tree.ranks)
    for c in range(1, tree.n_nodes):
        A[c], Abar[c] = gauge_factor(Z[c], tree.ranks[c], strict=strict, label=labels.get(c, f"(edge {c})"),
                                     noise_floor=noise_floor.get(c, 0.0))
        ranks[c] = A[c].shape[1]
    out_tree = tree.with_ranks(ranks)
    pinv = {c: np.linalg.pinv(A[c], rcond=PINV_RCOND) for c in A}
    pinv_bar = {c: np.linalg.pinv(Abar[c], rcond=PINV_RCOND) for c in Abar}
    cores: list[np.ndarray] = []
    for q in range(tree.n_nodes):
        Bq = np.asarray(B[q], dtype=float)
        if tree.L == 0:
            G = np.linalg.pinv(leaf_design[0], rcond=PINV_RCOND) @ Bq.reshape(Bq.shape[0], -1)
            if root_design is not None:
                G = G @ np.linalg.pinv(root_design, rcond=PINV_RCOND).T
            cores.append(G.reshape(out_tree.core_shape(0)))
        elif tree.is_leaf(q):
            Psi_pinv = np.linalg.pinv(leaf_design[q], rcond=PINV_RCOND)
            cores.append((Psi_pinv @ Bq @ pinv_bar[q]).T)
        elif q == 0:
            G = np.einsum("ai,bj,ij...->ab...", pinv[1], pinv[2], Bq)
            if root_design is not None:
                G = np.einsum("abk,mk->abm", G, np.linalg.pinv(root_design, rcond=PINV_RCOND))
            cores.append(G)
        else:
            a, b = 2 * q + 1, 2 * q + 2
            cores.append(np.einsum("ai,bj,ijk,kc->abc", pinv[a], pinv[b], Bq, pinv_bar[q]))
    return out_tree, cores


# ----------------------------------------------------------------------------
# black-box interpolation


@dataclass
class SketchPlan:
    """Random sketch points for every edge of a tree.

    ``rows[c]`` holds points for the variables of subtree ``c`` and
    ``cols[c]`` points for the complementary variables (both in the order
    of :meth:`DyadicTree.leaf_range` / its complement).
    """

    tree: DyadicTree
    rows: dict[int, np.ndarray]
    cols: dict[int, np.ndarray]
    margin: int
    seed: int | None = None
    complement: dict[int, np.ndarray] = field(default_factory=dict, repr=False)

    def budget(self) -> int:
        """Number of function evaluations :func:`interpolate` performs."""
        t = self.tree
        if t.L == 0:
            return self.rows[0].shape[0]
        total = sum(self.rows[c].shape[0] * self.cols[c].shape[0] for c in range(1, t.n_nodes))
        for q in range(t.n_nodes):
            if t.is_leaf(q):
                continue
            a, b = 2 * q + 1, 2 * q + 2
            k = self.rows[a].shape[0] * self.rows[b].shape[0]
            total += k if q == 0 else k * self.cols[q].shape[0]
        return total


def make_sketch_plan(tree: DyadicTree, bases, margin: int = 2, seed: int | None = None) -> SketchPlan:
    """Uniform random sketch points with ``rank + margin`` oversampling.

    Leaf edges use ``max(rank, n) + margin`` row points so the leaf basis
    values form an over-determined design.
    """
    if tree.has_control:
        raise ValueError("interpolation expects a state tree without control leg")
    if margin < 2:
        raise ValueError("oversampling margin must be at least 2")
    rng = np.random.default_rng(seed)
    lo = np.array([b.lo for b in bases])
    hi = np.array([b.hi for b in bases])
    d = tree.d
    rows: dict[int, np.ndarray] = {}
    cols: dict[int, np.ndarray] = {}
    comp: dict[int, np.ndarray] = {}
    if tree.L == 0:
        n = tree.leaf_dims[0]
        rows[0] = rng.uniform(lo[0], hi[0], size=(n + margin, 1))
        return SketchPlan(tree, rows, cols, margin, seed, comp)
    for c in range(1, tree.n_nodes):
        vars_in = np.array(tree.leaf_range(c))
        vars_out = np.setdiff1d(np.arange(d), vars_in)
        r = tree.ranks[c]
        nrow = (max(r, tree.leaf_dims[vars_in[0]]) if tree.is_leaf(c) else r) + margin
        ncol = r + margin
        rows[c] = rng.uniform(lo[vars_in], hi[vars_in], size=(nrow, vars_in.size))
        cols[c] = rng.uniform(lo[vars_out], hi[vars_out], size=(ncol, vars_out.size))
        comp[c] = vars_out
    return SketchPlan(tree, rows, cols, margin, seed, comp)


class _CountingFunction:
    def __init__(self, g: Callable[[np.ndarray], np.ndarray]):
        self.g = g
        self.count = 0

    def __call__(self, X: np.ndarray) -> np.ndarray:
        self.count += X.shape[0]
        y = np.asarray(self.g(X), dtype=float).reshape(X.shape[0])
        if not np.all(np.isfinite(y)):
            raise NonFiniteEvaluationError("black-box function returned non-finite values")
        return y


def interpolate(g: Callable[[np.ndarray], np.ndarray], tree: DyadicTree, bases, plan: SketchPlan | None = None,
                *, margin: int = 2, seed: int | None = None) -> FHT:
    """Black-box FHT interpolation of a vectorised function ``g: (N, d) -> (N,)``.

    The number of evaluations is recorded in ``result.meta["evaluations"]``.
    """
    bases = tuple(bases)
    if plan is None:
        plan = make_sketch_plan(tree, bases, margin=margin, seed=seed)
    counted = _CountingFunction(g)
    d = tree.d
    if tree.L == 0:
        pts = plan.rows[0]
        B = {0: counted(pts)}
        out_tree, cores = solve_sketched_cores(tree, {}, B, {0: bases[0].eval(pts[:, 0])})
        f = FHT(out_tree, cores, bases)
        f.meta["evaluations"] = counted.count
        return f

    def ranges(c):
        return np.array(tree.leaf_range(c))

    Z: dict[int, np.ndarray] = {}
    for c in range(1, tree.n_nodes):
        R, C = plan.rows[c], plan.cols[c]
        X = np.empty((R.shape[0], C.shape[0], d))
        X[:, :, ranges(c)] = R[:, None, :]
        X[:, :, plan.complement[c]] = C[None, :, :]
        Z[c] = counted(X.reshape(-1, d)).reshape(R.shape[0], C.shape[0])
    B: dict[int, np.ndarray] = {}
    leaf_design: dict[int, np.ndarray] = {}
    for q in range(tree.n_nodes):
        if tree.is_leaf(q):
            B[q] = Z[q]
            leaf_design[q] = bases[tree.leaf_var(q)].eval(plan.rows[q][:, 0])
            continue
        a, b = 2 * q + 1, 2 * q + 2
        Ra, Rb = plan.rows[a], plan.rows[b]
        if q == 0:
            X = np.empty((Ra.shape[0], Rb.shape[0], d))
            X[:, :, ranges(a)] = Ra[:, None, :]
            X[:, :, ranges(b)] = Rb[None, :, :]
            B[q] = counted(X.reshape(-1, d)).reshape(Ra.shape[0], Rb.shape[0])
        else:
            C = plan.cols[q]
            X = np.empty((Ra.shape[0], Rb.shape[0], C.shape[0], d))
            X[:, :, :, ranges(a)] = Ra[:, None, None, :]
            X[:, :, :, ranges(b)] = Rb[None, :, None, :]
            X[:, :, :, plan.complement[q]] = C[None, None, :, :]
            B[q] = counted(X.reshape(-1, d)).reshape(Ra.shape[0], Rb.shape[0], C.shape[0])
    out_tree, cores = solve_sketched_cores(tree, Z, B, leaf_design)
    f = FHT(out_tree, cores, bases)
    f.meta["evaluations"] = counted.count
    logger.debug("interpolate: %d evaluations, ranks %s", counted.count, out_tree.ranks)
    return f
