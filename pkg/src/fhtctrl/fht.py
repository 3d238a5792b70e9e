"""Functional hierarchical tensors on a dyadic binary tree.

Nodes are stored in heap order: node 0 is the root, node ``i`` has children
``2i+1`` and ``2i+2``, and the leaves are nodes ``2**L - 1 .. 2**(L+1) - 2``
in variable order.  Core axis order is fixed as

* leaf: ``(parent bond, physical)``
* internal: ``(left bond, right bond, parent bond)``
* root: ``(left bond, right bond[, control leg])``

and a single-node tree (``L == 0``) has core axes ``(physical[, control])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .basis import BasisSet

DENSE_SIZE_CAP = 10**7


class DenseSizeError(RuntimeError):
    """Raised when a dense contraction would exceed the size cap."""


def _is_pow2(d: int) -> bool:
    return d >= 1 and (d & (d - 1)) == 0


@dataclass(frozen=True)
class DyadicTree:
    """Connectivity, bond ranks and leg sizes of a dyadic tree."""

    L: int
    leaf_dims: tuple[int, ...]
    ranks: tuple[int, ...]  # ranks[i] = rank of the edge from node i to its parent; ranks[0] == 0
    root_dim: int | None = None

    @property
    def d(self) -> int:
        return 1 << self.L

    @property
    def n_nodes(self) -> int:
        return (1 << (self.L + 1)) - 1

    @property
    def has_control(self) -> bool:
        return self.root_dim is not None

    @property
    def n_legs(self) -> int:
        return self.d + (1 if self.has_control else 0)

    def level(self, i: int) -> int:
        return (i + 1).bit_length() - 1

    def block(self, i: int) -> int:
        """0-based block index within the level."""
        return i + 1 - (1 << self.level(i))

    def parent(self, i: int) -> int | None:
        return None if i == 0 else (i - 1) // 2

    def children(self, i: int) -> tuple[int, int] | tuple[()]:
        if self.is_leaf(i):
            return ()
        return (2 * i + 1, 2 * i + 2)

    def is_leaf(self, i: int) -> bool:
        return self.level(i) == self.L

    def leaf_node(self, j: int) -> int:
        return (1 << self.L) - 1 + j

    def leaf_var(self, i: int) -> int:
        return i - ((1 << self.L) - 1)

    def leaf_range(self, i: int) -> range:
        """Variables (leaf indices) spanned by the subtree at ``i``."""
        width = 1 << (self.L - self.level(i))
        start = self.block(i) * width
        return range(start, start + width)

    def is_in_subtree(self, i: int, root: int) -> bool:
        while i > root:
            i = (i - 1) // 2
        return i == root

    def nodes_bottom_up(self) -> range:
        return range(self.n_nodes - 1, -1, -1)

    def core_shape(self, i: int) -> tuple[int, ...]:
        if self.L == 0:
            shape = (self.leaf_dims[0],)
        elif self.is_leaf(i):
            shape = (self.ranks[i], self.leaf_dims[self.leaf_var(i)])
        elif i == 0:
            shape = (self.ranks[1], self.ranks[2])
        else:
            shape = (self.ranks[2 * i + 1], self.ranks[2 * i + 2], self.ranks[i])
        if i == 0 and self.root_dim is not None:
            shape = shape + (self.root_dim,)
        return shape

    def with_ranks(self, ranks: Sequence[int]) -> "DyadicTree":
        return replace(self, ranks=tuple(int(r) for r in ranks))


def build_tree(d: int, ranks, leaf_dim: int | Sequence[int], root_dim: int | None = None) -> DyadicTree:
    """Create a dyadic tree over ``d = 2**L`` leaves.

    ``ranks`` is either a single int (uniform) or a sequence of length ``L``
    giving the rank of edges into levels ``1..L``.  Every edge rank is capped
    by the total dimension on either side of the edge.
    """
    if not isinstance(d, (int, np.integer)) or not _is_pow2(int(d)):
        raise ValueError(f"dimension must be a power of two, got {d}")
    d = int(d)
    L = d.bit_length() - 1
    if isinstance(leaf_dim, (int, np.integer)):
        leaf_dims = (int(leaf_dim),) * d
    else:
        leaf_dims = tuple(int(x) for x in leaf_dim)
        if len(leaf_dims) != d:
            raise ValueError("leaf_dim sequence must have length d")
    if min(leaf_dims) < 1 or (root_dim is not None and root_dim < 1):
        raise ValueError("leg sizes must be positive")
    if isinstance(ranks, (int, np.integer)):
        per_level = [int(ranks)] * L
    else:
        per_level = [int(r) for r in ranks]
        if len(per_level) != L:
            raise ValueError(f"rank schedule must have length L={L}")
    if any(r < 1 for r in per_level):
        raise ValueError("ranks must be positive")

    log_dims = np.log(np.asarray(leaf_dims, dtype=float))
    total = log_dims.sum() + (math.log(root_dim) if root_dim else 0.0)
    n_nodes = 2 * d - 1
    out = [0] * n_nodes
    for i in range(1, n_nodes):
        lvl = (i + 1).bit_length() - 1
        width = 1 << (L - lvl)
        start = (i + 1 - (1 << lvl)) * width
        inside = log_dims[start:start + width].sum()
        cap_log = min(inside, total - inside)
        r = per_level[lvl - 1]
        if cap_log < math.log(r):
            r = int(round(math.exp(cap_log)))
        out[i] = max(r, 1)
    return DyadicTree(L, leaf_dims, tuple(out), root_dim)


@dataclass
class FHT:
    """A functional hierarchical tensor: tree, cores and per-leg bases."""

    tree: DyadicTree
    cores: list[np.ndarray]
    leaf_bases: tuple[BasisSet, ...]
    root_basis: BasisSet | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        t = self.tree
        if len(self.cores) != t.n_nodes:
            raise ValueError("one core per node required")
        if len(self.leaf_bases) != t.d:
            raise ValueError("one basis per leaf required")
        for j, b in enumerate(self.leaf_bases):
            if b.n != t.leaf_dims[j]:
                raise ValueError(f"basis size mismatch on leaf {j}")
        if (self.root_basis is None) != (t.root_dim is None):
            raise ValueError("control basis must match the control leg")
        if self.root_basis is not None and self.root_basis.n != t.root_dim:
            raise ValueError("control basis size mismatch")
        for i, c in enumerate(self.cores):
            if c.shape != t.core_shape(i):
                raise ValueError(f"core {i} has shape {c.shape}, expected {t.core_shape(i)}")

    @property
    def d(self) -> int:
        return self.tree.d

    def copy(self) -> "FHT":
        return FHT(self.tree, [c.copy() for c in self.cores], self.leaf_bases, self.root_basis, dict(self.meta))

    def __call__(self, points) -> np.ndarray:
        return evaluate(self, points)


def zeros_like_tree(tree: DyadicTree, leaf_bases, root_basis=None) -> FHT:
    return FHT(tree, [np.zeros(tree.core_shape(i)) for i in range(tree.n_nodes)], tuple(leaf_bases), root_basis)


def random_fht(tree: DyadicTree, leaf_bases, root_basis=None, rng=None, scale: float = 1.0) -> FHT:
    """FHT with i.i.d. Gaussian cores, scaled so values stay O(scale)."""
    rng = np.random.default_rng(rng)
    cores = []
    for i in range(tree.n_nodes):
        shape = tree.core_shape(i)
        fan = np.prod(shape[:-1]) if len(shape) > 1 else 1
        cores.append(rng.standard_normal(shape) / np.sqrt(max(fan, 1)))
    cores[0] = cores[0] * scale
    return FHT(tree, cores, tuple(leaf_bases), root_basis)


def _split_points(f: FHT, points) -> tuple[np.ndarray, np.ndarray | None, bool]:
    pts = np.asarray(points, dtype=float)
    scalar = pts.ndim == 1
    if scalar:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != f.tree.n_legs:
        raise ValueError(f"points must have {f.tree.n_legs} columns, got shape {np.shape(points)}")
    if f.tree.has_control:
        return pts[:, :f.d], pts[:, f.d], scalar
    return pts, None, scalar


def leaf_values(f: FHT, X: np.ndarray, deriv: Sequence[int] | None = None) -> list[np.ndarray]:
    """Basis evaluations per leaf: list of ``(N, n_j)`` arrays."""
    out = []
    for j, b in enumerate(f.leaf_bases):
        k = 0 if deriv is None else deriv[j]
        out.append(b.eval(X[:, j], deriv=k))
    return out


def khatri_rao(*mats: np.ndarray) -> np.ndarray:
    """Row-wise Kronecker product of ``(N, r_i)`` matrices."""
    out = mats[0]
    N = out.shape[0]
    for m in mats[1:]:
        out = (out[:, :, None] * m[:, None, :]).reshape(N, -1)
    return out


def node_up(tree: DyadicTree, i: int, core: np.ndarray, below: Sequence[np.ndarray]) -> np.ndarray:
    """Contract a non-root core with row-wise messages from below.

    For a leaf ``below`` is ``[Psi]``; for an internal node it is
    ``[A_left, A_right]``.  Returns ``(N, rank_to_parent)``.
    """
    if tree.is_leaf(i):
        return below[0] @ core.T
    ra, rb, rf = core.shape
    return khatri_rao(below[0], below[1]) @ core.reshape(ra * rb, rf)


def root_value(tree: DyadicTree, core: np.ndarray, below: Sequence[np.ndarray], ctrl: np.ndarray | None) -> np.ndarray:
    if tree.L == 0:
        vals = below[0] @ core.reshape(core.shape[0], -1)
    else:
        ra, rb = core.shape[:2]
        vals = khatri_rao(below[0], below[1]) @ core.reshape(ra * rb, -1)
    if ctrl is not None:
        return np.einsum("nm,nm->n", vals, ctrl)
    return vals[:, 0]


def evaluate_with(f: FHT, psis: Sequence[np.ndarray], ctrl: np.ndarray | None) -> np.ndarray:
    """Evaluate given precomputed leaf vectors (allows derivative bases)."""
    t = f.tree
    if t.L == 0:
        return root_value(t, f.cores[0], [psis[0]], ctrl)
    up: dict[int, np.ndarray] = {}
    for i in t.nodes_bottom_up():
        if i == 0:
            break
        if t.is_leaf(i):
            up[i] = node_up(t, i, f.cores[i], [psis[t.leaf_var(i)]])
        else:
            up[i] = node_up(t, i, f.cores[i], [up.pop(2 * i + 1), up.pop(2 * i + 2)])
    return root_value(t, f.cores[0], [up[1], up[2]], ctrl)


def evaluate(f: FHT, points) -> np.ndarray | float:
    """Evaluate ``f`` at one point (1-D input) or a batch of points (rows)."""
    X, a, scalar = _split_points(f, points)
    ctrl = f.root_basis.eval(a) if a is not None else None
    vals = evaluate_with(f, leaf_values(f, X), ctrl)
    return float(vals[0]) if scalar else vals


def control_slice(f: FHT, X: np.ndarray) -> np.ndarray:
    """Coefficients over the control basis of ``a -> f(x, a)`` for each row of ``X``."""
    if not f.tree.has_control:
        raise ValueError("FHT has no control leg")
    X = np.atleast_2d(np.asarray(X, dtype=float))
    t = f.tree
    psis = leaf_values(f, X)
    if t.L == 0:
        return psis[0] @ f.cores[0]
    up: dict[int, np.ndarray] = {}
    for i in t.nodes_bottom_up():
        if i == 0:
            break
        below = [psis[t.leaf_var(i)]] if t.is_leaf(i) else [up.pop(2 * i + 1), up.pop(2 * i + 2)]
        up[i] = node_up(t, i, f.cores[i], below)
    ra, rb, m = f.cores[0].shape
    return khatri_rao(up[1], up[2]) @ f.cores[0].reshape(ra * rb, m)


def subtree_dense(f: FHT, i: int) -> np.ndarray:
    """Dense subtree basis of shape ``(n_1, ..., n_k, rank)`` (root: full tensor)."""
    t = f.tree
    core = f.cores[i]
    if t.L == 0:
        return core.copy()
    if t.is_leaf(i):
        return core.T.copy()
    a = subtree_dense(f, 2 * i + 1)
    b = subtree_dense(f, 2 * i + 2)
    A = a.reshape(-1, a.shape[-1])
    B = b.reshape(-1, b.shape[-1])
    if i == 0:
        out = np.einsum("ia,jb,ab...->ij...", A, B, core)
        return out.reshape(a.shape[:-1] + b.shape[:-1] + core.shape[2:])
    out = np.einsum("ia,jb,abf->ijf", A, B, core)
    return out.reshape(a.shape[:-1] + b.shape[:-1] + (core.shape[2],))


def contract_dense(f: FHT) -> np.ndarray:
    """Full coefficient tensor ``C`` (axes: leaves in order, then control)."""
    size = int(np.prod([float(x) for x in f.tree.leaf_dims])) * (f.tree.root_dim or 1)
    if size > DENSE_SIZE_CAP:
        raise DenseSizeError(f"dense tensor would have {size} entries (cap {DENSE_SIZE_CAP})")
    C = subtree_dense(f, 0)
    return C


def evaluate_dense(C: np.ndarray, f: FHT, points) -> np.ndarray | float:
    """Reference evaluation ``<C, (x) Psi_j(x_j)>`` of a dense coefficient tensor."""
    X, a, scalar = _split_points(f, points)
    psis = leaf_values(f, X)
    if a is not None:
        psis.append(f.root_basis.eval(a))
    T = np.broadcast_to(C, (X.shape[0],) + C.shape)
    for v in psis:
        T = np.einsum("ni...,ni->n...", T, v)
    return float(T[0]) if scalar else np.asarray(T)


# ----------------------------------------------------------------------------
# algebra


def add(f: FHT, g: FHT) -> FHT:
    """Direct sum of two FHTs with the same layout (ranks add)."""
    t1, t2 = f.tree, g.tree
    if (t1.L, t1.leaf_dims, t1.root_dim) != (t2.L, t2.leaf_dims, t2.root_dim):
        raise ValueError("FHTs must share tree layout")
    _check_bases(f, g)
    t = t1
    if t.L == 0:
        return FHT(t, [f.cores[0] + g.cores[0]], f.leaf_bases, f.root_basis)
    ranks = [0] + [t1.ranks[i] + t2.ranks[i] for i in range(1, t.n_nodes)]
    tree = t.with_ranks(ranks)
    cores = []
    for i in range(t.n_nodes):
        A, B = f.cores[i], g.cores[i]
        if t.is_leaf(i):
            cores.append(np.concatenate([A, B], axis=0))
            continue
        shape = tree.core_shape(i)
        G = np.zeros(shape)
        if i == 0:
            G[: A.shape[0], : A.shape[1]] = A
            G[A.shape[0]:, A.shape[1]:] = B
        else:
            G[: A.shape[0], : A.shape[1], : A.shape[2]] = A
            G[A.shape[0]:, A.shape[1]:, A.shape[2]:] = B
        cores.append(G)
    return FHT(tree, cores, f.leaf_bases, f.root_basis)


def scale(f: FHT, alpha: float) -> FHT:
    g = f.copy()
    g.cores[0] = g.cores[0] * alpha
    return g


def _check_bases(f: FHT, g: FHT) -> None:
    for b1, b2 in zip(f.leaf_bases, g.leaf_bases):
        if (b1.lo, b1.hi, b1.n) != (b2.lo, b2.hi, b2.n):
            raise ValueError("basis mismatch")
    if f.root_basis is not None and g.root_basis is not None:
        b1, b2 = f.root_basis, g.root_basis
        if (b1.lo, b1.hi, b1.n) != (b2.lo, b2.hi, b2.n):
            raise ValueError("control basis mismatch")


def _absorb_into_parent(tree: DyadicTree, cores: list, child: int, R: np.ndarray) -> None:
    """Multiply the parent's axis for ``child`` by ``R`` (new_rank x old_rank)."""
    p = (child - 1) // 2
    axis = 0 if child == 2 * p + 1 else 1
    cores[p] = np.moveaxis(np.tensordot(R, cores[p], axes=([1], [axis])), 0, axis)


def orthogonalize(f: FHT) -> FHT:
    """Gauge transform so every non-root subtree basis is orthonormal."""
    t = f.tree
    if t.L == 0:
        return f.copy()
    cores = [c.copy() for c in f.cores]
    ranks = list(t.ranks)
    for i in t.nodes_bottom_up():
        if i == 0:
            break
        c = cores[i]
        if t.is_leaf(i):
            M = c.T
        else:
            M = c.reshape(-1, c.shape[-1])
        Q, R = np.linalg.qr(M)
        k = Q.shape[1]
        ranks[i] = k
        if t.is_leaf(i):
            cores[i] = Q.T.copy()
        else:
            cores[i] = Q.reshape(c.shape[0], c.shape[1], k)
        _absorb_into_parent(t, cores, i, R)
    return FHT(t.with_ranks(ranks), cores, f.leaf_bases, f.root_basis, dict(f.meta))


def reduced_gramians(f: FHT) -> dict[int, np.ndarray]:
    """Top-down reduced Gramians of an orthogonalized FHT, one per edge."""
    t = f.tree
    G: dict[int, np.ndarray] = {}
    for i in range(t.n_nodes):
        if t.is_leaf(i):
            continue
        c = f.cores[i]
        if i == 0:
            c3 = c if c.ndim == 3 else c[:, :, None]
            G[1] = np.einsum("abm,cbm->ac", c3, c3)
            G[2] = np.einsum("abm,acm->bc", c3, c3)
        else:
            P = G[i]
            G[2 * i + 1] = np.einsum("abf,fg,cbg->ac", c, P, c)
            G[2 * i + 2] = np.einsum("abf,fg,acg->bc", c, P, c)
    return G


def truncate(f: FHT, max_rank: int | None = None, rtol: float = 0.0) -> FHT:
    """HT-SVD truncation: orthogonalize, then project every edge onto its
    dominant left singular subspace.

    Per edge, at most ``max_rank`` directions are kept and the discarded
    squared singular values sum to at most ``rtol**2 * ||f||**2 / n_edges``.
    """
    t = f.tree
    if t.L == 0:
        return f.copy()
    g = orthogonalize(f)
    grams = reduced_gramians(g)
    norm2 = float(np.sum(g.cores[0] ** 2))
    n_edges = t.n_nodes - 1
    budget = (rtol ** 2) * norm2 / n_edges
    proj: dict[int, np.ndarray] = {}
    ranks = list(g.tree.ranks)
    for i in range(1, t.n_nodes):
        w, V = np.linalg.eigh(grams[i])
        w = np.clip(w[::-1], 0.0, None)
        V = V[:, ::-1]
        k = len(w)
        if max_rank is not None:
            k = min(k, max_rank)
        if rtol > 0:
            tail = np.cumsum(w[::-1])[::-1]  # tail[j] = sum_{l >= j} w_l
            while k > 1 and tail[k - 1] <= budget:
                k -= 1
        k = max(k, 1)
        proj[i] = V[:, :k]
        ranks[i] = k
    cores = [c.copy() for c in g.cores]
    for i in range(1, t.n_nodes):
        T = proj[i]
        if t.is_leaf(i):
            cores[i] = T.T @ cores[i]
        else:
            cores[i] = np.tensordot(cores[i], T, axes=([2], [0]))
        _absorb_into_parent(t, cores, i, T.T)
    return FHT(t.with_ranks(ranks), cores, f.leaf_bases, f.root_basis, dict(f.meta))


def l2_inner(f: FHT, g: FHT) -> float:
    """L2 inner product over the basis box (exact, via orthonormality)."""
    if (f.tree.L, f.tree.leaf_dims, f.tree.root_dim) != (g.tree.L, g.tree.leaf_dims, g.tree.root_dim):
        raise ValueError("FHTs must share tree layout")
    t = f.tree
    if t.L == 0:
        return float(np.sum(f.cores[0] * g.cores[0]))
    W: dict[int, np.ndarray] = {}
    for i in t.nodes_bottom_up():
        if i == 0:
            break
        A, B = f.cores[i], g.cores[i]
        if t.is_leaf(i):
            W[i] = A @ B.T
        else:
            W[i] = np.einsum("abf,ac,bd,cdg->fg", A, W.pop(2 * i + 1), W.pop(2 * i + 2), B)
    A, B = f.cores[0], g.cores[0]
    A3 = A if A.ndim == 3 else A[:, :, None]
    B3 = B if B.ndim == 3 else B[:, :, None]
    return float(np.einsum("abm,ac,bd,cdm->", A3, W[1], W[2], B3))


# ----------------------------------------------------------------------------
# constructors


def sum_of_univariate(tree: DyadicTree, leaf_bases, leaf_coefs: Sequence[np.ndarray],
                      root_basis: BasisSet | None = None, ctrl_coef: np.ndarray | None = None,
                      const: float = 0.0) -> FHT:
    """Exact rank-2 FHT of ``const + sum_j phi_j(x_j) [+ chi(a)]``.

    ``leaf_coefs[j]`` are the coefficients of ``phi_j``; ``ctrl_coef`` those
    of ``chi``.  Bond channel 0 carries the constant 1, channel 1 the
    partial sum of the subtree.
    """
    leaf_bases = tuple(leaf_bases)
    if tree.L == 0:
        b = leaf_bases[0]
        c = np.asarray(leaf_coefs[0], dtype=float) + const * b.integrals()
        if root_basis is None:
            return FHT(tree, [c], leaf_bases, None)
        one_a = root_basis.integrals()
        chi = np.zeros(root_basis.n) if ctrl_coef is None else np.asarray(ctrl_coef, dtype=float)
        one_x = b.integrals()
        core = np.outer(c, one_a) + np.outer(one_x, chi)
        return FHT(tree, [core], leaf_bases, root_basis)
    t = tree.with_ranks([0] + [2] * (tree.n_nodes - 1))
    cores: list[np.ndarray] = [None] * t.n_nodes  # type: ignore[list-item]
    for i in range(1, t.n_nodes):
        if t.is_leaf(i):
            j = t.leaf_var(i)
            b = leaf_bases[j]
            one = b.integrals()  # coefficients of the constant 1
            cores[i] = np.stack([one, np.asarray(leaf_coefs[j], dtype=float)])
        else:
            G = np.zeros((2, 2, 2))
            G[0, 0, 0] = 1.0
            G[1, 0, 1] = 1.0
            G[0, 1, 1] = 1.0
            cores[i] = G
    R = np.zeros((2, 2))
    R[1, 0] = R[0, 1] = 1.0
    R[0, 0] = const
    if root_basis is None:
        cores[0] = R
    else:
        one_a = root_basis.integrals()
        core = R[:, :, None] * one_a[None, None, :]
        if ctrl_coef is not None:
            core[0, 0, :] += np.asarray(ctrl_coef, dtype=float)
        cores[0] = core
    return FHT(t, cores, leaf_bases, root_basis)


def identity_operator(tree_v: DyadicTree, state_basis: BasisSet, ctrl_basis: BasisSet) -> FHT:
    """Markov-operator FHT of the projection kernel ``sum_i psi_i(x) psi_i(x')``
    on each coordinate, constant in the action.
    """
    d = tree_v.d
    n = state_basis.n
    tree = build_tree(2 * d, 1, n, root_dim=ctrl_basis.n)
    ranks = [0] * tree.n_nodes
    for i in range(1, tree.n_nodes):
        ranks[i] = n if tree.is_leaf(i) else 1
    tree = tree.with_ranks(ranks)
    cores = []
    for i in range(tree.n_nodes):
        if tree.is_leaf(i):
            cores.append(np.eye(n))
        elif tree.level(i) == tree.L - 1:
            G = np.eye(n)[:, :, None]
            if i == 0:
                G = G * (ctrl_basis.integrals())[None, None, :]
            cores.append(G)
        elif i == 0:
            cores.append((ctrl_basis.integrals())[None, None, :].copy())
        else:
            cores.append(np.ones((1, 1, 1)))
    return FHT(tree, cores, (state_basis,) * (2 * d), ctrl_basis)


def apply_markov(P: FHT, v: FHT, running: FHT | None = None, dt: float = 0.0,
                 max_rank: int | None = None, rtol: float = 1e-10) -> FHT:
    """Q ansatz ``Q(x, a) = int P(x, x', a) v(x') dx' + dt * running(x, a)``.

    ``P`` lives on the interlaced tree over ``(x_1, x'_1, ..., x_d, x'_d)``
    with the control leg at the root, ``v`` on the state tree.  The x'
    integral reduces to a coefficient contraction because the state basis
    is orthonormal.  ``running`` must already have the Q layout.  When
    ``max_rank`` or ``rtol`` is given the result is recompressed.
    """
    tp, tv = P.tree, v.tree
    if tp.root_dim is None:
        raise ValueError("operator must carry a control leg")
    if tp.d != 2 * tv.d:
        raise ValueError("operator tree must have twice as many leaves as the value tree")
    for j in range(tv.d):
        for b in (P.leaf_bases[2 * j], P.leaf_bases[2 * j + 1]):
            vb = v.leaf_bases[j]
            if (b.lo, b.hi, b.n) != (vb.lo, vb.hi, vb.n):
                raise ValueError(f"basis mismatch between operator and value function at variable {j}")
    L = tv.L
    cores: list[np.ndarray] = [None] * tv.n_nodes  # type: ignore[list-item]
    ranks = [0] * tv.n_nodes
    for i in range(tv.n_nodes):
        G = P.cores[i]
        if tv.level(i) == L:
            j = tv.leaf_var(i)
            gx = P.cores[2 * i + 1]  # (alpha, n)
            gxp = P.cores[2 * i + 2]  # (beta, n)
            vv = v.cores[i]
            if L == 0:
                W = gxp @ vv  # (beta,)
                cores[i] = np.einsum("ai,abm,b->im", gx, G, W)
                continue
            W = gxp @ vv.T  # (beta, rho)
            if i == 0:
                raise AssertionError("unreachable")
            Q = np.einsum("ai,abt,br->tri", gx, G, W)
            rt, rr = Q.shape[:2]
            cores[i] = Q.reshape(rt * rr, -1)
            ranks[i] = rt * rr
        elif i == 0:
            Gv = v.cores[0]
            Q = np.einsum("abm,cd->acbdm", G, Gv)
            s = Q.shape
            cores[0] = Q.reshape(s[0] * s[1], s[2] * s[3], s[4])
        else:
            Gv = v.cores[i]
            Q = np.einsum("abf,ceg->acbefg", G, Gv)
            s = Q.shape
            cores[i] = Q.reshape(s[0] * s[1], s[2] * s[3], s[4] * s[5])
            ranks[i] = s[4] * s[5]
    tree = DyadicTree(L, tv.leaf_dims, tuple(ranks), tp.root_dim)
    Q = FHT(tree, cores, v.leaf_bases, P.root_basis)
    if running is not None and dt != 0.0:
        Q = add(Q, scale(running, dt))
    if L > 0 and (max_rank is not None or rtol > 0):
        Q = truncate(Q, max_rank=max_rank, rtol=rtol)
    return Q


# ----------------------------------------------------------------------------
# variable layouts


def grid_to_leaf(Delta: int, mu: int) -> np.ndarray:
    """Bit-interleaving permutation: ``perm[g] = k`` for row-major grid index ``g``.

    Each coordinate index ``i_delta`` (0-based, ``mu`` bits, MSB first) contributes
    bit ``a_{delta p}``; the leaf index concatenates ``a_{11} a_{21} ... a_{Delta 1}
    a_{12} ... a_{Delta mu}``.
    """
    if Delta < 1 or mu < 0:
        raise ValueError("Delta >= 1 and mu >= 0 required")
    m = 1 << mu
    idx = np.indices((m,) * Delta).reshape(Delta, -1)  # row-major grid order
    k = np.zeros(idx.shape[1], dtype=np.int64)
    for p in range(mu):
        shift = mu - 1 - p
        for delta in range(Delta):
            k = (k << 1) | ((idx[delta] >> shift) & 1)
    return k


@dataclass(frozen=True)
class VariableLayout:
    """Map between grid-ordered state vectors and leaf order."""

    Delta: int
    mu: int
    perm: np.ndarray = field(repr=False, compare=False)

    @classmethod
    def create(cls, Delta: int, mu: int) -> "VariableLayout":
        return cls(Delta, mu, grid_to_leaf(Delta, mu))

    def to_leaf(self, x_grid: np.ndarray) -> np.ndarray:
        x_grid = np.asarray(x_grid)
        out = np.empty_like(x_grid)
        out[..., self.perm] = x_grid
        return out

    def to_grid(self, x_leaf: np.ndarray) -> np.ndarray:
        return np.asarray(x_leaf)[..., self.perm]


def interlace(x: np.ndarray, xp: np.ndarray) -> np.ndarray:
    """``(x_1, x'_1, ..., x_d, x'_d)`` from two ``(N, d)`` arrays."""
    x = np.atleast_2d(x)
    xp = np.atleast_2d(xp)
    out = np.empty((x.shape[0], 2 * x.shape[1]))
    out[:, 0::2] = x
    out[:, 1::2] = xp
    return out
