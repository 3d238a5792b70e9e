import numpy as np
import pytest

from fhtctrl.basis import gauss_legendre, legendre_basis
from fhtctrl.density import (InsufficientSamplesError, SampleFeatures, estimate_operator, make_sketch_functions,
                             marginal_mass, moment_tensor, state_action_volume)
from fhtctrl.fht import FHT, build_tree, evaluate, interlace, zeros_like_tree
from fhtctrl.sketch import RankCollapseError

CTRL = legendre_basis(2, -1, 1)


def uniform_samples(rng, d, N):
    x, xp = rng.uniform(-2, 2, (N, d)), rng.uniform(-2, 2, (N, d))
    return interlace(x, xp), rng.uniform(-1, 1, N)


def uniform_error(N, seed, d=1):
    rng = np.random.default_rng(seed)
    z, o = uniform_samples(rng, d, N)
    bx = legendre_basis(2, -2, 2)
    P = estimate_operator(z, o, build_tree(2 * d, 1, 3, root_dim=3), [bx] * (2 * d), CTRL, seed=seed)
    pts = np.column_stack([rng.uniform(-2, 2, (200, 2 * d)), rng.uniform(-1, 1, 200)])
    return np.sqrt(np.mean((evaluate(P, pts) - 4.0 ** -d) ** 2)) / 4.0 ** -d


def test_product_uniform_gives_constant():
    rng = np.random.default_rng(0)
    d = 2
    z, o = uniform_samples(rng, d, 100_000)
    bx = legendre_basis(2, -2, 2)
    P = estimate_operator(z, o, build_tree(2 * d, 1, 3, root_dim=3), [bx] * (2 * d), CTRL, seed=1)
    pts = np.column_stack([rng.uniform(-2, 2, (100, 2 * d)), rng.uniform(-1, 1, 100)])
    np.testing.assert_allclose(evaluate(P, pts), 4.0 ** -d, rtol=0.05)
    assert abs(marginal_mass(P) - 1.0) <= 0.02


def test_pure_noise_conditional_mean():
    rng = np.random.default_rng(0)
    N = 100_000
    x, o = rng.uniform(-2, 2, N), rng.uniform(-1, 1, N)
    xp = x + np.sqrt(2 * 0.1 / 1.0) * rng.standard_normal(N)
    bx = legendre_basis(4, -2, 2)
    P = estimate_operator(interlace(x[:, None], xp[:, None]), o, build_tree(2, 3, 5, root_dim=3), [bx] * 2,
                          CTRL, seed=1)
    nodes, w = gauss_legendre(40, -2, 2)
    for a in (-0.5, 0.0, 0.5):
        p = evaluate(P, np.column_stack([np.zeros(40), nodes, np.full(40, a)]))
        mean = np.sum(w * p * nodes) / np.sum(w * p)
        assert abs(mean) <= 0.05


def test_degenerate_samples_collapse():
    N = 20_000
    z = np.zeros((N, 4))
    o = np.zeros(N)
    bx = legendre_basis(2, -2, 2)
    with pytest.raises(RankCollapseError):
        estimate_operator(z, o, build_tree(4, 2, 3, root_dim=3), [bx] * 4, CTRL, seed=0)


def test_sample_floor():
    z, o = uniform_samples(np.random.default_rng(0), 2, 50)
    bx = legendre_basis(2, -2, 2)
    with pytest.raises(InsufficientSamplesError):
        estimate_operator(z, o, build_tree(4, 2, 3, root_dim=3), [bx] * 4, CTRL, seed=0)


def test_marginal_mass_exact_and_zero():
    d = 2
    b = legendre_basis(0, -2, 2)  # psi_0 = 1/2
    t = build_tree(2 * d, 1, 1, root_dim=3)
    zero = zeros_like_tree(t, [b] * (2 * d), CTRL)
    assert marginal_mass(zero) == 0.0
    # uniform conditional density 4^-d as a constant FHT
    vol = state_action_volume([b] * (2 * d), CTRL)
    cores = [c + 1.0 for c in zero.cores]
    cores[0] = np.zeros_like(zero.cores[0])
    cores[0][0, 0, :] = CTRL.integrals() * 4.0 ** -d / 0.5 ** (2 * d)
    P = FHT(t, cores, (b,) * (2 * d), CTRL)
    np.testing.assert_allclose(evaluate(P, np.zeros((1, 2 * d + 1))), 4.0 ** -d, rtol=1e-12)
    assert vol == 2 * 4.0 ** d
    assert abs(marginal_mass(P) - 1.0) <= 1e-10


def test_moments_agree_across_sample_halves():
    rng = np.random.default_rng(3)
    N = 40_000
    x, o = rng.uniform(-2, 2, (N, 2)), rng.uniform(-1, 1, N)
    xp = 0.8 * x + 0.4 * rng.standard_normal((N, 2))
    z = interlace(x, xp)
    bx = legendre_basis(3, -2, 2)
    tree = build_tree(4, 3, 4, root_dim=3)
    sk = make_sketch_functions(tree, seed=0)
    halves = [slice(0, N // 2), slice(N // 2, N)]
    stats = []
    for h in halves:
        f = SampleFeatures(z[h], o[h], [bx] * 4, CTRL)
        stats.append(moment_tensor(sk.rows[1].evaluate(f), sk.rows[2].evaluate(f), f.full[4]))
    (m1, s1), (m2, s2) = stats
    assert np.all(np.abs(m1 - m2) <= 3 * np.sqrt(s1 ** 2 + s2 ** 2))


def test_error_decreases_with_samples():
    small = np.mean([uniform_error(2_000, s) for s in range(5)])
    large = np.mean([uniform_error(20_000, s) for s in range(5)])
    assert large < small


def test_sketch_counts_match_ranks():
    tree = build_tree(8, 3, 4, root_dim=3)
    sk = make_sketch_functions(tree, margin=2, seed=0)
    for c in range(1, tree.n_nodes):
        assert sk.cols[c].count == tree.ranks[c] + 2
        if not tree.is_leaf(c):
            assert sk.rows[c].count == tree.ranks[c] + 2
    with pytest.raises(ValueError):
        make_sketch_functions(build_tree(8, 3, 4), seed=0)
