"""Markov-operator estimation from transition samples by moment sketching.

Samples ``z = (x_1, x'_1, ..., x_d, x'_d)`` with action ``o`` are drawn with
``(x, o)`` uniform on the state-action box.  Their joint density, times
the box volume, is the transition kernel ``P(x, x', a)``.  The cores are
recovered with the hierarchical sketch solver, where every sketch entry is
an empirical moment of low-degree sketch functions.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .basis import BasisSet
from .fht import FHT, DyadicTree, khatri_rao
from .sketch import solve_sketched_cores

logger = logging.getLogger(__name__)

MIN_SAMPLES_FACTOR = 10
NOISE_FLOOR_FACTOR = 2.0
PRODUCT_SKETCH_CAP = 64
LOCAL_WINDOW = None


class InsufficientSamplesError(ValueError):
    """Too few samples for stable moment estimates."""


@dataclass
class ClusterSketch:
    """``count`` random functions of total degree <= 2 over a variable cluster.

    ``s_mu(z) = w0 + sum_j (w1 psi_1 + w2 psi_2)(z_j) + (u . p_mu)(u . q_mu)``
    with ``u_j = psi_1(z_j)``.  Weights are stored over all variables (zero
    outside the cluster).  ``identity`` marks a single-variable cluster
    sketched by its full basis; ``product`` holds random weights over the
    full tensor-product basis of a small cluster instead.
    """

    variables: np.ndarray
    count: int
    identity: bool
    product: np.ndarray | None = None
    w0: np.ndarray | None = None
    w1: np.ndarray | None = None
    w2: np.ndarray | None = None
    p: np.ndarray | None = None
    q: np.ndarray | None = None

    def evaluate(self, features: "SampleFeatures") -> np.ndarray:
        """Sketch values ``(N, count)``."""
        if self.identity:
            return features.full[int(self.variables[0])]
        if self.product is not None:
            return khatri_rao(*[features.full[int(v)] for v in self.variables]) @ self.product.T
        u = features.deg1
        out = self.w0[None, :] + u @ self.w1.T + features.deg2 @ self.w2.T
        out += (u @ self.p.T) * (u @ self.q.T)
        return out


@dataclass
class SketchFunctionSet:
    """Row and column sketches for every non-root edge of the operator tree."""

    rows: dict[int, ClusterSketch]
    cols: dict[int, ClusterSketch]
    seed: int | None = None

    def max_moment_size(self, tree: DyadicTree, ctrl_dim: int) -> int:
        """Largest number of entries of any ``B`` tensor."""
        best = 0
        for q in range(tree.n_nodes):
            if tree.is_leaf(q):
                size = self.rows[q].count * self.cols[q].count
            else:
                k = self.rows[2 * q + 1].count * self.rows[2 * q + 2].count
                size = k * (ctrl_dim if q == 0 else self.cols[q].count)
            best = max(best, size)
        return best


class SampleFeatures:
    """Unclamped basis values of every variable (control last)."""

    def __init__(self, z: np.ndarray, o: np.ndarray, leaf_bases, ctrl_basis: BasisSet):
        bases = list(leaf_bases) + [ctrl_basis]
        cols = [z[:, j] for j in range(z.shape[1])] + [o]
        self.full = [_features(b, c) for b, c in zip(bases, cols)]
        N = z.shape[0]
        self.deg1 = np.column_stack([f[:, 1] if f.shape[1] > 1 else np.zeros(N) for f in self.full])
        self.deg2 = np.column_stack([f[:, 2] if f.shape[1] > 2 else np.zeros(N) for f in self.full])
        self.n_samples = N


FEATURE_MODE = "hybrid"
EXTRAPOLATED_DEGREE = 2


def _features(b: BasisSet, x: np.ndarray) -> np.ndarray:
    if FEATURE_MODE == "clamp":
        return b.eval(x)
    if FEATURE_MODE == "raw":
        return b.eval(x, clamp=False)
    out = b.eval(x)
    k = min(EXTRAPOLATED_DEGREE + 1, b.n)
    out[:, :k] = b.eval(x, clamp=False)[:, :k]
    return out


def _random_cluster(rng, variables: np.ndarray, n_vars: int, count: int) -> ClusterSketch:
    mask = np.zeros(n_vars)
    mask[variables] = 1.0
    scale = 1.0 / np.sqrt(len(variables))

    def draw():
        return rng.standard_normal((count, n_vars)) * mask * scale

    return ClusterSketch(variables, count, False, None, rng.standard_normal(count), draw(), draw(), draw(), draw())


def _total_degree_indices(dims: list[int], max_degree: int) -> np.ndarray:
    grids = np.indices(dims).reshape(len(dims), -1).T
    return np.flatnonzero(grids.sum(axis=1) <= max_degree)


def _cluster_sketch(rng, variables: np.ndarray, dims: list[int], count: int) -> ClusterSketch:
    """Small clusters mix product-basis functions of the lowest total degree
    (at least 2) that offers ``count`` functions; large ones use the
    structured degree-2 family."""
    local = [int(dims[v]) for v in variables]
    if math.prod(local) <= PRODUCT_SKETCH_CAP:
        degree = 2
        while True:
            keep = _total_degree_indices(local, degree)
            if keep.size >= count or degree >= sum(local):
                break
            degree += 1
        W = np.zeros((count, int(np.prod(local))))
        W[:, keep] = rng.standard_normal((count, keep.size)) / np.sqrt(keep.size)
        return ClusterSketch(variables, count, False, W)
    return _random_cluster(rng, variables, len(dims), count)


def make_sketch_functions(tree: DyadicTree, margin: int = 2, seed: int | None = None,
                          window: int | None = LOCAL_WINDOW) -> SketchFunctionSet:
    """Random sketches with ``rank + margin`` functions per multi-variable cluster.

    Variables are numbered by leaf, with the control variable last.  Small
    clusters (tensor-product basis of at most ``PRODUCT_SKETCH_CAP``
    functions) draw from the full product basis, since a degree-2 family
    there would cap the rank.

    With a ``window`` the sketches are local: a column sketch only sees the
    ``window`` leaf variables on either side of the cluster plus the control,
    and a row sketch of a wide cluster only its ``window`` outermost
    variables at each end.  For nearest-neighbour couplings this keeps the
    cross-cluster signal from drowning in unrelated variables.
    """
    if not tree.has_control:
        raise ValueError("operator tree must carry a control leg")
    if margin < 2:
        raise ValueError("oversampling margin must be at least 2")
    if window is not None and window < 1:
        raise ValueError("window must be a positive integer or None")
    rng = np.random.default_rng(seed)
    n_vars = tree.d + 1
    dims = list(tree.leaf_dims) + [tree.root_dim]
    rows: dict[int, ClusterSketch] = {}
    cols: dict[int, ClusterSketch] = {}
    for c in range(1, tree.n_nodes):
        inside = np.array(tree.leaf_range(c))
        if window is None:
            outside = np.setdiff1d(np.arange(n_vars), inside)
        else:
            lo, hi = int(inside[0]), int(inside[-1]) + 1
            near = [v for v in range(lo - window, hi + window) if 0 <= v < tree.d and not lo <= v < hi]
            outside = np.array(near + [tree.d])
            if inside.size > 2 * window:
                inside = np.concatenate([inside[:window], inside[-window:]])
        count = tree.ranks[c] + margin
        if inside.size == 1:
            rows[c] = ClusterSketch(inside, tree.leaf_dims[inside[0]], True)
        else:
            rows[c] = _cluster_sketch(rng, inside, dims, count)
        cols[c] = _cluster_sketch(rng, outside, dims, count)
    return SketchFunctionSet(rows, cols, seed)


def state_action_volume(leaf_bases, ctrl_basis: BasisSet) -> float:
    """Volume of the state-action box for the interlaced layout."""
    vol = ctrl_basis.length
    for b in list(leaf_bases)[0::2]:
        vol *= b.length
    return float(vol)


def moment_tensor(*sketches: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Empirical mean of an outer product of sketch values and its standard error."""
    N = sketches[0].shape[0]
    prod = sketches[0]
    for s in sketches[1:]:
        prod = (prod[..., None] * s.reshape((N,) + (1,) * (prod.ndim - 1) + (s.shape[1],)))
    mean = prod.mean(axis=0)
    se = prod.std(axis=0, ddof=1) / np.sqrt(N)
    return mean, se


def _moment(*sketches: np.ndarray) -> np.ndarray:
    N = sketches[0].shape[0]
    letters = "abc"[: len(sketches)]
    spec = ",".join("n" + c for c in letters) + "->" + letters
    return np.einsum(spec, *sketches, optimize=True) / N


def moment_noise(S_row: np.ndarray, S_col: np.ndarray) -> float:
    """Frobenius norm of the standard errors of ``(1/N) S_row^T S_col``."""
    N = S_row.shape[0]
    second = (S_row ** 2).T @ (S_col ** 2) / N
    mean = S_row.T @ S_col / N
    var = np.clip(second - mean ** 2, 0.0, None)
    return float(np.sqrt(var.sum() / N))


def estimate_operator(z: np.ndarray, o: np.ndarray, tree: DyadicTree, leaf_bases, ctrl_basis: BasisSet,
                      sketches: SketchFunctionSet | None = None, *, margin: int = 2,
                      seed: int | None = None, noise_factor: float = NOISE_FLOOR_FACTOR) -> FHT:
    """Estimate ``P(x, x', a)`` from samples ``(z, o)`` with ``(x, o)`` uniform.

    ``z`` holds interlaced ``(x_1, x'_1, ...)`` rows.  Raises
    :class:`InsufficientSamplesError` below the moment-stability floor and
    :class:`~fhtctrl.sketch.RankCollapseError` on degenerate sketches.
    Edge ranks are capped where the sketched correlations sink below
    ``noise_factor`` times their sampling noise.
    """
    z = np.asarray(z, dtype=float)
    o = np.asarray(o, dtype=float).reshape(-1)
    if z.ndim != 2 or z.shape[1] != tree.d or o.shape[0] != z.shape[0]:
        raise ValueError("samples must be (N, 2d) with N actions")
    if not (np.all(np.isfinite(z)) and np.all(np.isfinite(o))):
        raise ValueError("samples must be finite")
    if tree.L < 1 or tree.root_dim != ctrl_basis.n:
        raise ValueError("operator tree needs at least two leaves and a matching control leg")
    if sketches is None:
        sketches = make_sketch_functions(tree, margin=margin, seed=seed)
    N = z.shape[0]
    floor = MIN_SAMPLES_FACTOR * sketches.max_moment_size(tree, ctrl_basis.n)
    if N < floor:
        raise InsufficientSamplesError(f"{N} samples below the moment-stability floor {floor}")

    feats = SampleFeatures(z, o, leaf_bases, ctrl_basis)
    S_row = {c: sk.evaluate(feats) for c, sk in sketches.rows.items()}
    S_col = {c: sk.evaluate(feats) for c, sk in sketches.cols.items()}
    Z = {c: _moment(S_row[c], S_col[c]) for c in range(1, tree.n_nodes)}
    B: dict[int, np.ndarray] = {}
    leaf_design: dict[int, np.ndarray] = {}
    for q in range(tree.n_nodes):
        if tree.is_leaf(q):
            B[q] = Z[q]
            leaf_design[q] = np.eye(tree.leaf_dims[tree.leaf_var(q)])
        elif q == 0:
            B[q] = _moment(S_row[1], S_row[2], feats.full[tree.d])
        else:
            B[q] = _moment(S_row[2 * q + 1], S_row[2 * q + 2], S_col[q])
    labels = {c: f"(edge {c}, variables {list(tree.leaf_range(c))})" for c in range(1, tree.n_nodes)}
    floors = {c: noise_factor * moment_noise(S_row[c], S_col[c]) for c in Z} if noise_factor > 0 else None
    out_tree, cores = solve_sketched_cores(tree, Z, B, leaf_design, np.eye(ctrl_basis.n),
                                           strict=True, labels=labels, noise_floor=floors)
    cores[0] = cores[0] * state_action_volume(leaf_bases, ctrl_basis)
    P = FHT(out_tree, cores, tuple(leaf_bases), ctrl_basis)
    P.meta.update({"samples": N, "seed": sketches.seed})
    logger.debug("estimate_operator: N=%d ranks %s", N, out_tree.ranks)
    return P


def integrate_all(f: FHT) -> float:
    """Integral of an FHT over its full box."""
    t = f.tree
    w = {i: None for i in range(t.n_nodes)}
    if t.L == 0:
        val = f.leaf_bases[0].integrals() @ f.cores[0]
        if f.root_basis is not None:
            val = val @ f.root_basis.integrals()
        return float(val)
    for i in t.nodes_bottom_up():
        if i == 0:
            break
        if t.is_leaf(i):
            w[i] = f.cores[i] @ f.leaf_bases[t.leaf_var(i)].integrals()
        else:
            w[i] = np.einsum("abf,a,b->f", f.cores[i], w[2 * i + 1], w[2 * i + 2])
    root = np.einsum("ab...,a,b->...", f.cores[0], w[1], w[2])
    if f.root_basis is not None:
        root = root @ f.root_basis.integrals()
    return float(root)


def marginal_mass(P: FHT) -> float:
    """``int P dz / Vol(X x A)``; close to one for a conditional density."""
    return integrate_all(P) / state_action_volume(P.leaf_bases, P.root_basis)
