import itertools

import numpy as np
import pytest

from fhtctrl.als import (ALSDivergenceError, RegressionSet, SingularSystemWarning, auto_reg_mu, dfs_order,
                         init_messages, leg_grams, move_center, node_system_from_scratch, solve_node, solve_normal,
                         sweep, total_loss)
from fhtctrl.basis import gauss_legendre, legendre_basis
from fhtctrl.fht import FHT, build_tree, contract_dense, evaluate, orthogonalize, random_fht, subtree_dense

B3 = legendre_basis(2, -1, 1)


def problem(d=8, n=3, r=2, ctrl=None, N=400, seed=0, noise=0.0):
    rng = np.random.default_rng(seed)
    cb = legendre_basis(ctrl - 1, -1, 1) if ctrl else None
    b = legendre_basis(n - 1, -1, 1)
    t = build_tree(d, r, n, root_dim=ctrl)
    truth = random_fht(t, [b] * d, cb, rng=rng)
    X = rng.uniform(-1, 1, (N, d + (1 if ctrl else 0)))
    y = evaluate(truth, X)
    y = y + noise * np.std(y) * rng.standard_normal(N)
    return truth, RegressionSet(X, y), random_fht(t, [b] * d, cb, rng=rng)


# -- messages ------------------------------------------------------------------


def test_leaf_message_by_hand():
    b = legendre_basis(2, -1, 1)
    t = build_tree(2, 2, 3)
    f = random_fht(t, [b, b], rng=0)
    x = np.array([[0.3, -0.7]])
    store = init_messages(f, RegressionSet(x, [1.0]))
    np.testing.assert_allclose(store.A_up[1], (b.eval(0.3) @ f.cores[1].T)[None, :], atol=1e-15)
    # the down message into leaf 1 is the right leaf contracted with the root core
    np.testing.assert_allclose(store.get_down(1), (f.cores[0] @ (f.cores[2] @ b.eval(-0.7)))[None, :], atol=1e-15)


def test_messages_ignore_targets():
    _, data, f = problem(d=4)
    s1 = init_messages(f, data)
    s2 = init_messages(f, RegressionSet(data.X, np.zeros(data.n)))
    for c in range(1, f.tree.n_nodes):
        np.testing.assert_array_equal(s1.get_up(c), s2.get_up(c))
        np.testing.assert_array_equal(s1.get_down(c), s2.get_down(c))


def test_all_ones_constant_basis():
    b = legendre_basis(0, -1, 1)
    t = build_tree(4, 2, 1)
    f = FHT(t, [np.ones(t.core_shape(i)) for i in range(t.n_nodes)], (b,) * 4)
    X = np.random.default_rng(0).uniform(-1, 1, (5, 4))
    store = init_messages(f, RegressionSet(X, np.zeros(5)))
    for c in range(1, t.n_nodes):
        # dense oracle: the subtree tensor contracted with the constant basis value
        sub = subtree_dense(f, c)
        expected = sub.reshape(-1, sub.shape[-1]).sum(axis=0) * b.eval(0.0)[0] ** len(t.leaf_range(c))
        np.testing.assert_allclose(store.get_up(c), np.tile(expected, (5, 1)), atol=1e-14)
        assert np.ptp(store.get_down(c), axis=0).max() == 0.0


def test_regulariser_messages_symmetric_psd():
    _, data, f = problem(d=8, ctrl=3)
    store = init_messages(f, data)
    for c in range(1, f.tree.n_nodes):
        store.get_down(c)
        for M in (store.M_up[c], store.M_down[c]):
            np.testing.assert_array_equal(M, M.T)
            assert np.linalg.eigvalsh(M).min() >= -1e-12 * max(1, np.abs(M).max())


# -- node solves ---------------------------------------------------------------


def test_scalar_closed_form():
    a, m, y, mu = 1.7, 0.4, 2.3, 0.25
    g = solve_normal(np.array([[a]]), np.array([[m]]), np.array([y]), mu)
    assert abs(g[0] - a * y / (a * a + mu * m)) < 1e-14


def test_zero_targets_give_zero_core():
    _, data, f = problem(d=4)
    zero = RegressionSet(data.X, np.zeros(data.n))
    old = f.cores[2].copy()
    store = init_messages(f, zero)
    solve_node(2, store, zero, 1e-3)
    assert np.abs(store.f.cores[2]).max() <= 1e-12 * np.abs(old).max()


def test_singular_unregularised_system_warns():
    A = np.array([[1.0, 1.0], [2.0, 2.0]])
    with pytest.warns(SingularSystemWarning):
        g = solve_normal(A, np.eye(2), np.array([1.0, 2.0]), 0.0)
    np.testing.assert_allclose(A @ g, [1.0, 2.0], atol=1e-12)


def test_representable_target_exact():
    truth, data, _ = problem(d=4, N=300)
    # start from the truth with one core scrambled: one solve restores it
    f = truth.copy()
    f.cores[3] = np.random.default_rng(9).standard_normal(f.cores[3].shape)
    store = init_messages(f, data)
    _, _, fit, _ = solve_node(3, store, data, 0.0)
    assert np.sqrt(fit) <= 1e-10


# -- sweeps --------------------------------------------------------------------


def test_zero_rounds_keeps_function():
    _, data, f = problem(d=4)
    res = sweep(f, data, 1e-4, rounds=0)
    assert len(res.trace) == 1
    np.testing.assert_allclose(evaluate(res.f, data.X), evaluate(f, data.X), atol=1e-12)
    fit, reg = total_loss(f, data, 0.0)
    assert abs(res.trace[0][2] - fit) <= 1e-12 * fit


def _perturbed_truth(seed, size):
    truth, data, _ = problem(d=8, n=4, r=3, N=4000, noise=0.01, seed=seed)
    rng = np.random.default_rng(seed + 50)
    start = truth.copy()
    start.cores = [c + size * np.std(c) * rng.standard_normal(c.shape) for c in truth.cores]
    noise_rms = np.sqrt(np.mean((data.y - evaluate(truth, data.X)) ** 2))
    return start, data, noise_rms


# ALS is non-convex, so the fits start near the generating model
@pytest.mark.parametrize("seed", range(10))
def test_noise_floor_recovery_five_rounds(seed):
    start, data, noise_rms = _perturbed_truth(seed, 0.01)
    res = sweep(start, data, 1e-16, rounds=5)
    assert np.sqrt(res.trace[0][2]) > 2 * noise_rms
    assert np.sqrt(res.trace[-1][2]) <= 2 * noise_rms


@pytest.mark.parametrize("seed", range(3))
def test_noise_floor_recovery_from_far_start(seed):
    start, data, noise_rms = _perturbed_truth(seed, 0.1)
    res = sweep(start, data, 1e-16, rounds=30)
    assert np.sqrt(res.trace[0][2]) > 20 * noise_rms
    assert np.sqrt(res.trace[-1][2]) <= 2 * noise_rms


def test_monotone_trace_and_divergence_guard():
    _, data, f = problem(d=8, ctrl=3, noise=0.05)
    res = sweep(f, data, 1e-3, rounds=3)
    total = [fit + 1e-3 * reg for _, _, fit, reg in res.trace]
    assert all(b <= a + 1e-10 * max(1, abs(a)) for a, b in zip(total, total[1:]))
    assert len(res.trace) == 1 + 3 * f.tree.n_nodes
    with pytest.raises(ValueError):
        sweep(f, data, -1.0)
    assert issubclass(ALSDivergenceError, RuntimeError)


def test_dfs_order_visits_every_node_once():
    t = build_tree(8, 2, 3)
    order = dfs_order(t)
    assert sorted(order) == list(range(t.n_nodes))
    assert order[0] == t.n_nodes - 1  # starts at the rightmost leaf


@pytest.mark.parametrize("d", [2, 4, 8])
def test_incremental_messages_match_from_scratch(d):
    _, data, f = problem(d=d, ctrl=3, seed=d)
    grams = leg_grams(f)
    g = orthogonalize(f)
    store = init_messages(g, data, grams)
    center = 0
    for q in dfs_order(g.tree) * 2:
        move_center(g, center, q, store)
        center = q
        A, M = store.node_system(q)
        A0, M0 = node_system_from_scratch(g, data, q, grams)
        assert np.abs(A - A0).max() <= 1e-12 * max(1, np.abs(A0).max())
        assert np.abs(M - M0).max() <= 1e-12 * max(1, np.abs(M0).max())
        solve_node(q, store, data, 1e-4)


def test_contractions_linear_in_nodes():
    per_node = []
    for d in (4, 8, 16, 32):
        _, data, f = problem(d=d, N=100)
        one = sweep(f, data, 1e-6, rounds=1).contractions
        three = sweep(f, data, 1e-6, rounds=3).contractions
        per_round = (three - one) / 2
        n = f.tree.n_nodes
        assert n - 1 <= per_round <= 2 * n
        per_node.append(per_round / n)
    assert max(per_node) - min(per_node) < 0.5


def test_stationarity_after_node_solve():
    _, data, f = problem(d=4, ctrl=2, noise=0.1, seed=5)
    mu = 1e-3
    store = init_messages(f, data)
    q = 1
    solve_node(q, store, data, mu)
    g = store.f
    loss = lambda h: (lambda fr: fr[0] + mu * fr[1])(total_loss(h, data, 0.0))
    base = g.cores[q].copy()
    grad = np.zeros(base.size)
    eps = 1e-6
    for k in range(base.size):
        for sgn in (1, -1):
            h = g.copy()
            h.cores[q] = base.copy()
            h.cores[q].flat[k] += sgn * eps
            grad[k] += sgn * loss(h) / (2 * eps)
    assert np.linalg.norm(grad) <= 1e-6 * max(1.0, loss(g))


def test_auto_reg_mu_ratio():
    _, data, f = problem(d=4)
    mu = auto_reg_mu(f, data, ratio=1e-2)
    fit, reg = total_loss(f, data, 0.0)
    assert abs(mu * reg / fit - 1e-2) < 1e-12


def _mixed_norm_quadrature(f, kind):
    """sum over derivative multi-indices (mixed) or the (1 + d/dx) product (factored), on a tensor Gauss grid."""
    d = f.d
    legs = list(f.leaf_bases) + ([f.root_basis] if f.root_basis is not None else [])
    nodes, weights = zip(*[gauss_legendre(10, b.lo, b.hi) for b in legs])
    grid = np.array(np.meshgrid(*nodes, indexing="ij")).reshape(len(legs), -1).T
    w = np.prod(np.array(np.meshgrid(*weights, indexing="ij")).reshape(len(legs), -1), axis=0)
    C = contract_dense(f)
    total = 0.0
    if kind == "mixed":
        for alpha in itertools.product((0, 1), repeat=len(legs)):
            vals = [b.eval(grid[:, j], deriv=k) for j, (b, k) in enumerate(zip(legs, alpha))]
            total += np.sum(w * _contract(C, vals) ** 2)
    else:
        vals = [b.eval(grid[:, j]) + b.eval(grid[:, j], deriv=1) for j, b in enumerate(legs)]
        total = np.sum(w * _contract(C, vals) ** 2)
    return total


def _contract(C, vals):
    T = np.broadcast_to(C, (vals[0].shape[0],) + C.shape)
    for v in vals:
        T = np.einsum("ni...,ni->n...", T, v)
    return T


@pytest.mark.parametrize("kind", ["mixed", "factored"])
@pytest.mark.parametrize("d,ctrl", [(1, None), (2, None), (2, 2), (1, 3)])
def test_regulariser_matches_quadrature(kind, d, ctrl):
    rng = np.random.default_rng(d)
    b = legendre_basis(2, -1.5, 2.0)
    cb = legendre_basis(ctrl - 1, -1, 1) if ctrl else None
    f = random_fht(build_tree(d, 2, 3, root_dim=ctrl), [b] * d, cb, rng=rng)
    X = rng.uniform(-1, 1, (10, d + (1 if ctrl else 0)))
    _, reg = total_loss(f, RegressionSet(X, np.zeros(10)), 0.0, leg_grams(f, kind))
    ref = _mixed_norm_quadrature(f, kind)
    assert abs(reg - ref) <= 1e-8 * abs(ref)


def test_loss_trace_csv(tmp_path):
    _, data, f = problem(d=4)
    res = sweep(f, data, 1e-4, rounds=1)
    res.write_csv(tmp_path / "trace.csv")
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "round,node,data_term,regularizer_term"
    assert len(lines) == 1 + len(res.trace)
