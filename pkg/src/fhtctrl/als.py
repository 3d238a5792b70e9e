"""Sobolev-regularised alternating least squares on an FHT.

The loss is ``(1/N) ||f(X) - y||^2 + reg_mu * ||f||_mix^2`` where the mixed
norm uses the Gram matrices of ``psi + psi'`` on every leg.  One core is
solved at a time from messages passed along the tree: an evaluation
message ``A`` (N x rank) and a regulariser message ``M`` (rank x rank) per
directed edge.  Messages are refreshed lazily, so a depth-first sweep costs
a constant number of contractions per node.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from .basis import mixed_sobolev_gram, sobolev_gram
from .fht import FHT, DyadicTree, _absorb_into_parent, khatri_rao, orthogonalize

logger = logging.getLogger(__name__)


EIG_RCOND = 1e-14


class ALSDivergenceError(RuntimeError):
    """The loss increased after a node solve (inconsistent messages)."""


class SingularSystemWarning(UserWarning):
    """Unregularised normal equations were singular; a pseudo-inverse was used."""


@dataclass
class RegressionSet:
    """Inputs (states, or states with the action last) and targets."""

    X: np.ndarray
    y: np.ndarray

    def __post_init__(self):
        self.X = np.atleast_2d(np.asarray(self.X, dtype=float))
        self.y = np.asarray(self.y, dtype=float).reshape(-1)
        if self.X.shape[0] != self.y.shape[0]:
            raise ValueError("inputs and targets must have the same length")
        if not np.all(np.isfinite(self.y)):
            raise ValueError("targets must be finite")
        if not np.all(np.isfinite(self.X)):
            raise ValueError("inputs must be finite")

    @property
    def n(self) -> int:
        return self.y.shape[0]


GRAMS = {"mixed": mixed_sobolev_gram, "factored": sobolev_gram}


def leg_grams(f: FHT, kind: str = "mixed") -> list[np.ndarray]:
    """Per-leg regulariser Grams, control leg last if present.

    ``'mixed'`` sums value and derivative inner products; ``'factored'`` uses
    the Gram of ``psi + psi'``, whose near-null direction ``exp(-x)`` makes
    the regulariser blind to products growing towards a corner.
    """
    if kind not in GRAMS:
        raise ValueError(f"unknown regulariser Gram {kind!r}; choose from {sorted(GRAMS)}")
    gram = GRAMS[kind]
    grams = [gram(b) for b in f.leaf_bases]
    if f.root_basis is not None:
        grams.append(gram(f.root_basis))
    return grams


def _leg_values(f: FHT, X: np.ndarray) -> tuple[list[np.ndarray], np.ndarray | None]:
    d = f.d
    cols = d + (1 if f.tree.has_control else 0)
    if X.shape[1] != cols:
        raise ValueError(f"inputs must have {cols} columns, got {X.shape[1]}")
    psis = [b.eval(X[:, j]) for j, b in enumerate(f.leaf_bases)]
    ctrl = f.root_basis.eval(X[:, d]) if f.tree.has_control else None
    return psis, ctrl


@dataclass
class MessageStore:
    """Evaluation and regulariser messages on every directed edge.

    ``up[c]`` summarises the subtree below edge ``c``; ``down[c]`` the
    complement.  Stale flags follow the rule: after changing core ``q``,
    ``up[c]`` is stale iff ``q`` lies in subtree ``c`` and ``down[c]`` is
    stale iff it does not.
    """

    f: FHT
    psis: list[np.ndarray]
    ctrl: np.ndarray | None
    grams: list[np.ndarray]
    A_up: dict[int, np.ndarray] = field(default_factory=dict)
    M_up: dict[int, np.ndarray] = field(default_factory=dict)
    A_down: dict[int, np.ndarray] = field(default_factory=dict)
    M_down: dict[int, np.ndarray] = field(default_factory=dict)
    stale_up: set = field(default_factory=set)
    stale_down: set = field(default_factory=set)
    contractions: int = 0

    @property
    def tree(self) -> DyadicTree:
        return self.f.tree

    # -- message computation -------------------------------------------------

    def _compute_up(self, c: int) -> None:
        t, G = self.tree, self.f.cores[c]
        if t.is_leaf(c):
            j = t.leaf_var(c)
            self.A_up[c] = self.psis[j] @ G.T
            self.M_up[c] = G @ self.grams[j] @ G.T
        else:
            a, b = 2 * c + 1, 2 * c + 2
            Aa, Ab = self.get_up(a), self.get_up(b)
            ra, rb, rf = G.shape
            self.A_up[c] = khatri_rao(Aa, Ab) @ G.reshape(ra * rb, rf)
            self.M_up[c] = np.einsum("abf,ac,bd,cdg->fg", G, self.M_up[a], self.M_up[b], G, optimize=True)
        self.M_up[c] = 0.5 * (self.M_up[c] + self.M_up[c].T)
        self.stale_up.discard(c)
        self.contractions += 1

    def _compute_down(self, c: int) -> None:
        t = self.tree
        p = (c - 1) // 2
        s = c + 1 if c % 2 == 1 else c - 1
        G = self.f.cores[p]
        left = c % 2 == 1
        As, Ms = self.get_up(s), self.M_up[s]
        if p == 0:
            if t.has_control:
                Af, Mf = self.ctrl, self.grams[-1]
            else:
                Af, Mf = np.ones((As.shape[0], 1)), np.ones((1, 1))
                G = G[:, :, None]
        else:
            Af, Mf = self.get_down(p), self.M_down[p]
        if left:
            A = np.einsum("nb,nf,abf->na", As, Af, G, optimize=True)
            M = np.einsum("abf,bd,fg,cdg->ac", G, Ms, Mf, G, optimize=True)
        else:
            A = np.einsum("na,nf,abf->nb", As, Af, G, optimize=True)
            M = np.einsum("abf,ac,fg,cdg->bd", G, Ms, Mf, G, optimize=True)
        self.A_down[c] = A
        self.M_down[c] = 0.5 * (M + M.T)
        self.stale_down.discard(c)
        self.contractions += 1

    def get_up(self, c: int) -> np.ndarray:
        if c not in self.A_up or c in self.stale_up:
            self._compute_up(c)
        return self.A_up[c]

    def get_down(self, c: int) -> np.ndarray:
        if c not in self.A_down or c in self.stale_down:
            self._compute_down(c)
        return self.A_down[c]

    def mark_updated(self, q: int) -> None:
        t = self.tree
        for c in range(1, t.n_nodes):
            if t.is_in_subtree(q, c):
                self.stale_up.add(c)
            else:
                self.stale_down.add(c)

    # -- node systems --------------------------------------------------------

    def node_system(self, q: int) -> tuple[np.ndarray, np.ndarray]:
        """Design matrix ``A`` (N x core size) and regulariser ``M`` for core ``q``."""
        t = self.tree
        if t.L == 0:
            mats, grams = [self.psis[0]], [self.grams[0]]
            if t.has_control:
                mats.append(self.ctrl)
                grams.append(self.grams[-1])
        elif t.is_leaf(q):
            j = t.leaf_var(q)
            mats = [self.get_down(q), self.psis[j]]
            grams = [self.M_down[q], self.grams[j]]
        else:
            a, b = 2 * q + 1, 2 * q + 2
            mats = [self.get_up(a), self.get_up(b)]
            grams = [self.M_up[a], self.M_up[b]]
            if q == 0:
                if t.has_control:
                    mats.append(self.ctrl)
                    grams.append(self.grams[-1])
            else:
                mats.append(self.get_down(q))
                grams.append(self.M_down[q])
        A = khatri_rao(*mats)
        M = grams[0]
        for g in grams[1:]:
            M = np.kron(M, g)
        return A, M


def init_messages(f: FHT, data: RegressionSet, grams: list[np.ndarray] | None = None) -> MessageStore:
    """Compute all messages with one upward and one downward pass."""
    psis, ctrl = _leg_values(f, data.X)
    store = MessageStore(f, psis, ctrl, grams if grams is not None else leg_grams(f))
    t = f.tree
    for c in t.nodes_bottom_up():
        if c:
            store._compute_up(c)
    for c in range(1, t.n_nodes):
        store._compute_down(c)
    return store


def node_system_from_scratch(f: FHT, data: RegressionSet, q: int, grams=None) -> tuple[np.ndarray, np.ndarray]:
    """Node system assembled from freshly computed messages (test oracle)."""
    return init_messages(f, data, grams).node_system(q)


def loss_terms(A: np.ndarray, M: np.ndarray, g: np.ndarray, y: np.ndarray) -> tuple[float, float]:
    """``((1/N)||A g - y||^2, g^T M g)``."""
    r = A @ g - y
    return float(r @ r) / y.shape[0], float(g @ M @ g)


def solve_normal(A: np.ndarray, M: np.ndarray, y: np.ndarray, reg_mu: float,
                 start: np.ndarray | None = None) -> np.ndarray:
    """Minimiser of ``(1/N)||A g - y||^2 + reg_mu g^T M g``.

    Given ``start``, the solve is for the correction to it, so directions
    dropped as numerically null keep their current values and the loss
    cannot rise above its value at ``start``.
    """
    N = y.shape[0]
    H = A.T @ A + (N * reg_mu) * M
    rhs = A.T @ y
    H = 0.5 * (H + H.T)
    if not H.size:
        return np.zeros(0)
    w, V = np.linalg.eigh(H)
    top = max(w[-1], 0.0)
    if reg_mu == 0 and (top == 0 or w[0] <= 1e-12 * top):
        warnings.warn("singular normal equations; using least squares", SingularSystemWarning, stacklevel=2)
        return np.linalg.lstsq(A, y, rcond=None)[0]
    # eigen-solve rather than Cholesky: tiny weights leave H nearly singular
    # and a Cholesky solve then loses the monotone decrease of the loss
    keep = w > EIG_RCOND * top
    base = np.zeros(H.shape[0]) if start is None else np.asarray(start, dtype=float)
    return base + V[:, keep] @ ((V[:, keep].T @ (rhs - H @ base)) / w[keep])


def solve_node(q: int, store: MessageStore, data: RegressionSet, reg_mu: float) -> tuple[float, float, float, float]:
    """Replace core ``q`` by its optimum; returns loss terms before and after."""
    A, M = store.node_system(q)
    core = store.f.cores[q]
    old = core.reshape(-1)
    before = loss_terms(A, M, old, data.y)
    g = solve_normal(A, M, data.y, reg_mu, start=old)
    store.f.cores[q] = g.reshape(core.shape)
    store.mark_updated(q)
    after = loss_terms(A, M, g, data.y)
    return before + after


def dfs_order(tree: DyadicTree) -> list[int]:
    """In-order walk (right subtree, node, left subtree) from the rightmost leaf."""
    out: list[int] = []

    def walk(i: int) -> None:
        if not tree.is_leaf(i):
            walk(2 * i + 2)
        out.append(i)
        if not tree.is_leaf(i):
            walk(2 * i + 1)

    walk(0)
    return out


def total_loss(f: FHT, data: RegressionSet, reg_mu: float, grams=None) -> tuple[float, float]:
    """Data and regulariser terms of the loss, computed from scratch."""
    store = init_messages(f, data, grams)
    A, M = store.node_system(0)
    return loss_terms(A, M, f.cores[0].reshape(-1), data.y)


def auto_reg_mu(f: FHT, data: RegressionSet, ratio: float = 1e-2, floor: float = 1e-300, grams=None) -> float:
    """Weight making the regulariser ``ratio`` times the data term at ``f``."""
    fit, reg = total_loss(f, data, 0.0, grams)
    if reg <= 0 or fit <= 0:
        return floor
    return max(ratio * fit / reg, floor)


def _tree_path(q: int, p: int) -> list[int]:
    """Nodes from ``q`` to ``p`` (both included) through their common ancestor."""
    up, down = [q], [p]
    while up[-1] != down[-1]:
        if up[-1] > down[-1]:
            up.append((up[-1] - 1) // 2)
        else:
            down.append((down[-1] - 1) // 2)
    return up + down[-2::-1]


def _shift_center(f: FHT, q: int, p: int) -> None:
    """Move the orthogonality centre from ``q`` to the adjacent node ``p``.

    Core ``q`` is replaced by the orthonormal factor of a QR split along the
    shared edge and ``p`` absorbs the triangular factor, so the represented
    function is unchanged.  Skipped when the split would lower the rank.
    """
    t, cores = f.tree, f.cores
    if p == (q - 1) // 2 and q > 0:
        c = cores[q]
        M = c.T if t.is_leaf(q) else c.reshape(-1, c.shape[-1])
        if M.shape[0] < M.shape[1]:
            return
        Q, R = np.linalg.qr(M)
        cores[q] = Q.T.copy() if t.is_leaf(q) else Q.reshape(c.shape)
        _absorb_into_parent(t, cores, q, R)
    else:
        axis = 0 if p == 2 * q + 1 else 1
        c = np.moveaxis(cores[q], axis, -1)
        M = c.reshape(-1, c.shape[-1])
        if M.shape[0] < M.shape[1]:
            return
        Q, R = np.linalg.qr(M)
        cores[q] = np.moveaxis(Q.reshape(c.shape), -1, axis)
        child_axis = 0 if t.is_leaf(p) else 2
        cores[p] = np.moveaxis(np.tensordot(R, cores[p], axes=([1], [child_axis])), 0, child_axis)


def move_center(f: FHT, q: int, p: int, store: "MessageStore | None" = None) -> None:
    """Walk the orthogonality centre from ``q`` to ``p``, invalidating messages."""
    path = _tree_path(q, p)
    for a, b in zip(path[:-1], path[1:]):
        _shift_center(f, a, b)
        if store is not None:
            store.mark_updated(a)
            store.mark_updated(b)


@dataclass
class SweepResult:
    f: FHT
    trace: list[tuple[int, int, float, float]]
    contractions: int
    reg_mu: float

    @property
    def final_loss(self) -> float:
        _, _, fit, reg = self.trace[-1]
        return fit + self.reg_mu * reg

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["round", "node", "data_term", "regularizer_term"])
            for row in self.trace:
                w.writerow([row[0], row[1], f"{row[2]:.17g}", f"{row[3]:.17g}"])


def sweep(f: FHT, data: RegressionSet, reg_mu: float, rounds: int = 5, *, grams=None,
          store: MessageStore | None = None, check: bool = True) -> SweepResult:
    """``rounds`` DFS sweeps of single-core solves on a copy of ``f``.

    The trace starts with the initial loss (round 0, node -1) followed by
    one row per solve.  Raises :class:`ALSDivergenceError` if a solve
    increases the loss beyond rounding.
    """
    if reg_mu < 0:
        raise ValueError("reg_mu must be non-negative")
    # an orthogonal gauge around the node being solved keeps the node
    # systems well conditioned; the centre follows the sweep order
    g = orthogonalize(f) if f.tree.L > 0 else f.copy()
    if store is None:
        store = init_messages(g, data, grams)
    else:
        store.f = g
        store.stale_up.update(range(1, g.tree.n_nodes))
        store.stale_down.update(range(1, g.tree.n_nodes))
    A, M = store.node_system(0)
    fit, reg = loss_terms(A, M, g.cores[0].reshape(-1), data.y)
    trace = [(0, -1, fit, reg)]
    start = store.contractions
    order = dfs_order(g.tree)
    center = 0
    for rnd in range(1, rounds + 1):
        for q in order:
            move_center(g, center, q, store)
            center = q
            fb, rb, fa, ra = solve_node(q, store, data, reg_mu)
            before, after = fb + reg_mu * rb, fa + reg_mu * ra
            if check and after > before + 1e-10 * max(1.0, abs(before)):
                raise ALSDivergenceError(
                    f"loss increased at round {rnd}, node {q}: {before:.6e} -> {after:.6e}")
            trace.append((rnd, q, fa, ra))
    logger.debug("sweep: %d rounds, %d contractions, final loss %.4e", rounds,
                 store.contractions - start, trace[-1][2] + reg_mu * trace[-1][3])
    return SweepResult(g, trace, store.contractions - start, reg_mu)
