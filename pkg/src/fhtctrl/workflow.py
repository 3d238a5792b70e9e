"""Backward dynamic programming with FHT action-value and value functions.

States handed to the public functions here are in grid order (the order
used by the dynamics); they are permuted into tree-leaf order before any
FHT is evaluated.
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .als import RegressionSet, SweepResult, auto_reg_mu, leg_grams, sweep, total_loss
from .basis import BasisSet, legendre_basis
from .config import ExperimentConfig
from .density import estimate_operator, make_sketch_functions
from .dynamics import CostSpec, GLModel, simulate
from .fht import (FHT, DyadicTree, VariableLayout, add, apply_markov, build_tree, control_slice, evaluate,
                  interlace, random_fht, sum_of_univariate)
from .sketch import interpolate, make_sketch_plan
from .storage import load_fht, save_fht

logger = logging.getLogger(__name__)

# independent random streams, keyed by purpose
STREAMS = {"samples": 1, "operator": 2, "operator_sketch": 3, "interp": 4, "mc": 5,
           "rollout": 6, "hist": 7, "eval_v": 8, "starts": 9, "padding": 10}

ARGMIN_GRID = 101


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Generator for a named purpose, reproducible from the master seed."""
    return np.random.default_rng([int(seed), STREAMS[name], *[int(k) for k in keys]])


class WorkflowError(RuntimeError):
    """A backward-solve stage failed; ``stage`` and ``k`` locate it."""

    def __init__(self, stage: str, k: int, cause: Exception):
        self.stage, self.k, self.cause = stage, k, cause
        super().__init__(f"stage {stage!r} at k={k} failed: {type(cause).__name__}: {cause}")


@dataclass
class ControlProblem:
    model: GLModel
    cost: CostSpec
    box: float = 2.0
    action_box: float = 1.0
    q: int = 6
    q_action: int = 6
    rank: int = 8
    operator_rank: int = 8
    margin: int = 2
    n_samples: int = 20000
    n_operator_samples: int = 100000
    reg_mu: float | None = None
    reg_ratio: float = 1e-2
    als_rounds: int = 5
    n_substeps: int = 20
    seed: int = 0
    regularizer: str = "mixed"
    layout: VariableLayout = field(init=False, repr=False)

    def __post_init__(self):
        if self.model.variant == "1d":
            self.layout = VariableLayout.create(1, self.model.m.bit_length() - 1)
        else:
            self.layout = VariableLayout.create(2, self.model.m.bit_length() - 1)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "ControlProblem":
        model = GLModel(cfg.variant, cfg.m, cfg.lam, cfg.mu_gl, cfg.beta, cfg.gain, cfg.omega_lo, cfg.omega_hi,
                        cfg.potential, cfg.noise)
        cost = CostSpec(cfg.T, cfg.K, cfg.state_weight, cfg.action_weight, cfg.terminal_weight)
        return cls(model, cost, cfg.box, cfg.action_box, cfg.q, cfg.q_action, cfg.rank, cfg.operator_rank,
                   cfg.margin, cfg.n_samples, cfg.n_operator_samples, cfg.reg_mu, cfg.reg_ratio, cfg.als_rounds,
                   cfg.n_substeps, cfg.seed, cfg.regularizer)

    # -- spaces --------------------------------------------------------------

    @property
    def d(self) -> int:
        return self.model.d

    @property
    def K(self) -> int:
        return self.cost.K

    @property
    def dt(self) -> float:
        return self.cost.dt

    @property
    def state_basis(self) -> BasisSet:
        return legendre_basis(self.q, -self.box, self.box)

    @property
    def action_basis(self) -> BasisSet:
        return legendre_basis(self.q_action, -self.action_box, self.action_box)

    def state_tree(self) -> DyadicTree:
        return build_tree(self.d, self.rank, self.q + 1)

    def q_tree(self) -> DyadicTree:
        return build_tree(self.d, self.rank, self.q + 1, root_dim=self.q_action + 1)

    def operator_tree(self) -> DyadicTree:
        return build_tree(2 * self.d, self.operator_rank, self.q + 1, root_dim=self.q_action + 1)

    def to_leaf(self, x: np.ndarray) -> np.ndarray:
        return self.layout.to_leaf(np.asarray(x, dtype=float))

    def sample_states(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.box, self.box, size=(n, self.d))

    def sample_segment(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Uniform points on the diagonal segment ``{(t, ..., t)}``."""
        t = rng.uniform(-self.box, self.box, size=n)
        return np.repeat(t[:, None], self.d, axis=1)

    def sample_actions(self, n: int, rng: np.random.Generator) -> np.ndarray:
        return rng.uniform(-self.action_box, self.action_box, size=n)

    def step(self, x, a, rng) -> tuple[np.ndarray, np.ndarray]:
        return simulate(self.model, self.cost, x, a, self.dt, self.n_substeps, rng)

    # -- analytic costs as FHTs ---------------------------------------------

    def _square_coefs(self, weight: float) -> np.ndarray:
        b = self.state_basis
        return b.project(lambda t: weight * t * t / self.d)

    def terminal(self, x) -> np.ndarray:
        return self.cost.terminal(x)

    def terminal_fht(self) -> FHT:
        """Exact rank-2 FHT of the terminal cost on the state tree."""
        c = self._square_coefs(self.cost.terminal_weight)
        return sum_of_univariate(self.state_tree(), (self.state_basis,) * self.d, [c] * self.d)

    def running_fht(self) -> FHT:
        """Exact rank-2 FHT of the running cost on the action-value tree."""
        c = self._square_coefs(self.cost.state_weight)
        ab = self.action_basis
        ca = ab.project(lambda t: self.cost.action_weight * t * t)
        return sum_of_univariate(self.q_tree(), (self.state_basis,) * self.d, [c] * self.d, ab, ca)


# ----------------------------------------------------------------------------
# samples


@dataclass
class TransitionBatch:
    """States, actions, next states (grid order) and running-cost integrals."""

    x: np.ndarray
    a: np.ndarray
    xp: np.ndarray
    r: np.ndarray

    def __len__(self) -> int:
        return self.a.shape[0]


def gen_samples(problem: ControlProblem, k: int, rng: np.random.Generator, n: int | None = None) -> TransitionBatch:
    """Half uniform states, half states from control-free trajectories run
    for a uniform number of blocks in ``0..k``; uniform actions; one block."""
    n = problem.n_samples if n is None else n
    if n < 2 or n % 2:
        raise ValueError("sample budget must be a positive even number")
    half = n // 2
    x_uniform = problem.sample_states(half, rng)
    x_traj = problem.sample_states(half, rng)
    steps = rng.integers(0, k + 1, size=half)
    for j in range(int(steps.max(initial=0))):
        active = steps > j
        x_traj[active], _ = problem.step(x_traj[active], 0.0, rng)
    x = np.concatenate([x_uniform, x_traj])
    a = problem.sample_actions(n, rng)
    xp, r = problem.step(x, a, rng)
    return TransitionBatch(x, a, xp, r)


def operator_samples(problem: ControlProblem, rng: np.random.Generator,
                     n: int | None = None) -> tuple[np.ndarray, np.ndarray, TransitionBatch]:
    """Uniform state-action transitions in interlaced leaf order."""
    n = problem.n_operator_samples if n is None else n
    x = problem.sample_states(n, rng)
    a = problem.sample_actions(n, rng)
    xp, r = problem.step(x, a, rng)
    z = interlace(problem.to_leaf(x), problem.to_leaf(xp))
    return z, a, TransitionBatch(x, a, xp, r)


# ----------------------------------------------------------------------------
# argmin over the action


def argmin_coefficients(coefs: np.ndarray, basis: BasisSet, n_grid: int = ARGMIN_GRID,
                        newton_steps: int = 8) -> tuple[np.ndarray, np.ndarray]:
    """Global minimiser of ``a -> sum_m coefs[:, m] psi_m(a)`` on the basis interval.

    Dense grid search, then Newton polishing started at every interior grid
    local minimum; the endpoints remain candidates.
    """
    coefs = np.atleast_2d(coefs)
    grid = np.linspace(basis.lo, basis.hi, n_grid)
    vals = coefs @ basis.eval(grid).T  # (N, n_grid)
    best_idx = np.argmin(vals, axis=1)
    rows = np.arange(coefs.shape[0])
    best_a = grid[best_idx]
    best_v = vals[rows, best_idx]
    interior = np.zeros_like(vals, dtype=bool)
    interior[:, 1:-1] = (vals[:, 1:-1] <= vals[:, :-2]) & (vals[:, 1:-1] <= vals[:, 2:])
    r_idx, g_idx = np.nonzero(interior)
    if r_idx.size:
        a = grid[g_idx].copy()
        c = coefs[r_idx]
        for _ in range(newton_steps):
            d1 = np.einsum("km,km->k", c, basis.eval(a, deriv=1))
            d2 = np.einsum("km,km->k", c, basis.eval(a, deriv=2))
            ok = d2 > 0
            a = np.where(ok, a - np.where(ok, d1 / np.where(ok, d2, 1.0), 0.0), a)
            a = np.clip(a, basis.lo, basis.hi)
        v = np.einsum("km,km->k", c, basis.eval(a))
        # keep the per-row minimum among polished candidates
        order = np.lexsort((v, r_idx))
        r_sorted, first = np.unique(r_idx[order], return_index=True)
        cand_a, cand_v = a[order][first], v[order][first]
        better = cand_v < best_v[r_sorted]
        best_a[r_sorted[better]] = cand_a[better]
        best_v[r_sorted[better]] = cand_v[better]
    return best_a, best_v


def argmin_action(Q: FHT, x_leaf: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Optimal action and minimal value of ``Q(x, .)`` for leaf-ordered states."""
    x_leaf = np.atleast_2d(x_leaf)
    return argmin_coefficients(control_slice(Q, x_leaf), Q.root_basis)


def min_over_actions(Q: FHT) -> Callable[[np.ndarray], np.ndarray]:
    return lambda X: argmin_action(Q, X)[1]


# ----------------------------------------------------------------------------
# fitting stages


def init_terminal(problem: ControlProblem, n_operator: int | None = None) -> tuple[FHT, FHT, FHT]:
    """Operator-based initial ``Q_{K-1}``, interpolated ``v_{K-1}`` and the operator."""
    rng = stream(problem.seed, "operator")
    z, o, _ = operator_samples(problem, rng, n_operator)
    tree_p = problem.operator_tree()
    sketches = make_sketch_functions(tree_p, problem.margin, seed=int(stream(problem.seed, "operator_sketch").integers(2**31)))
    P = estimate_operator(z, o, tree_p, (problem.state_basis,) * (2 * problem.d), problem.action_basis, sketches)
    Q0 = apply_markov(P, problem.terminal_fht(), problem.running_fht(), problem.dt, max_rank=problem.rank)
    v0 = fit_v_interpolate(problem, Q0)
    return Q0, v0, P


def fit_v_interpolate(problem: ControlProblem, Q: FHT) -> FHT:
    """Sketch interpolation of ``x -> min_a Q(x, a)``."""
    tree = problem.state_tree()
    bases = (problem.state_basis,) * problem.d
    plan = make_sketch_plan(tree, bases, problem.margin, seed=int(stream(problem.seed, "interp").integers(2**31)))
    return interpolate(min_over_actions(Q), tree, bases, plan)


def padded_terminal(problem: ControlProblem, tree: DyadicTree, rng: np.random.Generator,
                    scale: float = 1e-3) -> FHT:
    """Terminal cost lifted to the ranks of ``tree`` by a small random term."""
    h = problem.terminal_fht()
    extra = [0] + [max(tree.ranks[i] - h.tree.ranks[i], 1) for i in range(1, tree.n_nodes)]
    return add(h, random_fht(h.tree.with_ranks(extra), h.leaf_bases, None, rng, scale))


def pick_start(candidates: list[FHT], data: RegressionSet) -> FHT:
    """The candidate with the smallest data misfit."""
    fits = [total_loss(f, data, 0.0)[0] for f in candidates]
    return candidates[int(np.nanargmin(fits))]


def q_regression_set(problem: ControlProblem, samples: TransitionBatch, v_next,
                     value_cap: float | None = None) -> RegressionSet:
    """Bellman targets ``r + v_next(x')``; ``v_next`` is an FHT or a callable on grid-ordered states.

    Fitted values are clipped to ``[0, value_cap]``: costs are non-negative,
    and the cap keeps extrapolation at rarely sampled states out of the targets.
    """
    if isinstance(v_next, FHT):
        nxt = np.clip(evaluate(v_next, problem.to_leaf(samples.xp)), 0.0, value_cap)
    else:
        nxt = np.asarray(v_next(samples.xp), dtype=float)
    X = np.column_stack([problem.to_leaf(samples.x), samples.a])
    return RegressionSet(X, samples.r + nxt)


def fit_q(problem: ControlProblem, v_next, init: FHT, samples: TransitionBatch,
          reg_mu: float | None = None, value_cap: float | None = None) -> SweepResult:
    data = q_regression_set(problem, samples, v_next, value_cap)
    grams = leg_grams(init, problem.regularizer)
    if reg_mu is None:
        reg_mu = problem.reg_mu if problem.reg_mu is not None else auto_reg_mu(init, data, problem.reg_ratio,
                                                                                grams=grams)
    return sweep(init, data, reg_mu, problem.als_rounds, grams=grams)


def v_regression_set(problem: ControlProblem, Q: FHT, samples: TransitionBatch) -> RegressionSet:
    """Targets ``max(min_a Q(x, a), 0)`` at the state samples of the Q step."""
    X = problem.to_leaf(samples.x)
    return RegressionSet(X, np.maximum(argmin_action(Q, X)[1], 0.0))


def fit_v(problem: ControlProblem, Q: FHT, init: FHT | list[FHT], samples: TransitionBatch,
          reg_mu: float) -> SweepResult:
    """ALS fit of ``min_a Q(x, a)``; a list of starts is narrowed to the best fitting one."""
    data = v_regression_set(problem, Q, samples)
    if isinstance(init, list):
        init = pick_start(init, data)
    res = sweep(init, data, reg_mu, problem.als_rounds, grams=leg_grams(init, problem.regularizer))
    res.f.meta["value_cap"] = float(data.y.max())
    return res


# ----------------------------------------------------------------------------
# solved stack


@dataclass
class SolvedStack:
    problem: ControlProblem
    Q: list[FHT | None]
    v: list[FHT | None]
    meta: dict = field(default_factory=dict)

    @property
    def K(self) -> int:
        return len(self.Q)

    def complete(self) -> bool:
        return all(q is not None for q in self.Q) and all(v is not None for v in self.v)

    def save_step(self, path, k: int) -> None:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        save_fht(self.Q[k], path / f"qk_{k}.fht")
        save_fht(self.v[k], path / f"vk_{k}.fht")
        self.save_meta(path)

    def save_meta(self, path) -> None:
        Path(path).mkdir(parents=True, exist_ok=True)
        Path(path, "meta.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True, default=float))

    def save(self, path) -> None:
        for k in range(self.K):
            if self.Q[k] is not None:
                self.save_step(path, k)
        self.save_meta(path)

    @classmethod
    def load(cls, path) -> "SolvedStack":
        path = Path(path)
        meta = json.loads((path / "meta.json").read_text())
        cfg = ExperimentConfig.from_dict(meta["config"])
        problem = ControlProblem.from_config(cfg)
        Q: list[FHT | None] = []
        v: list[FHT | None] = []
        for k in range(problem.K):
            qf, vf = path / f"qk_{k}.fht", path / f"vk_{k}.fht"
            Q.append(load_fht(qf) if qf.exists() else None)
            v.append(load_fht(vf) if vf.exists() else None)
        return cls(problem, Q, v, meta)

    def value(self, k: int, x) -> np.ndarray:
        """``v_k`` at grid-ordered states; ``k == K`` gives the terminal cost."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        if k == self.K:
            return self.problem.terminal(x)
        return np.clip(evaluate(self.v[k], self.problem.to_leaf(x)), 0.0, self.value_cap(k))

    def value_cap(self, k: int) -> float | None:
        step = self.meta.get("steps", {}).get(str(k), {})
        return step.get("value_cap")

    def action_value(self, k: int, x, a) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        a = np.broadcast_to(np.asarray(a, dtype=float), x.shape[:1])
        return evaluate(self.Q[k], np.column_stack([self.problem.to_leaf(x), a]))

    def policy(self, k: int, x) -> np.ndarray:
        return argmin_action(self.Q[k], self.problem.to_leaf(np.atleast_2d(x)))[0]


def value_at(stack: SolvedStack, x, t: float) -> np.ndarray:
    """Linear interpolation in time between neighbouring value functions."""
    T, K = stack.problem.cost.T, stack.K
    if not 0.0 <= t <= T:
        raise ValueError(f"t={t} outside [0, {T}]")
    s = t / stack.problem.dt
    k = min(int(np.floor(s + 1e-12)), K)
    w = s - k
    if k == K or abs(w) <= 1e-12:
        return stack.value(k, x)
    return (1.0 - w) * stack.value(k, x) + w * stack.value(k + 1, x)


def backward_solve(problem: ControlProblem, out_dir=None, config: ExperimentConfig | None = None,
                   progress: Callable[[str], None] | None = None) -> SolvedStack:
    """Solve for ``Q_k, v_k`` from ``k = K-1`` down to ``0``, persisting each step."""
    K = problem.K
    stack = SolvedStack(problem, [None] * K, [None] * K,
                        {"config": config.to_dict() if config else None, "steps": {}, "timings": {}})
    say = progress or (lambda msg: logger.info(msg))

    def run(stage, k, fn, *args, **kw):
        t0 = time.perf_counter()
        try:
            out = fn(*args, **kw)
        except Exception as exc:  # tag and re-raise
            if out_dir is not None:
                stack.save(out_dir)
            raise WorkflowError(stage, k, exc) from exc
        stack.meta["timings"][f"{k}:{stage}"] = time.perf_counter() - t0
        return out

    for k in range(K - 1, -1, -1):
        samples = run("samples", k, gen_samples, problem, k, stream(problem.seed, "samples", k))
        if k == K - 1:
            Q_init, v_interp, _ = run("init_terminal", k, init_terminal, problem)
            v_init = [v_interp, padded_terminal(problem, v_interp.tree, stream(problem.seed, "padding"))]
            v_next, cap = problem.terminal, None
        else:
            Q_init, v_init = stack.Q[k + 1], stack.v[k + 1]
            v_next, cap = stack.v[k + 1], stack.value_cap(k + 1)
        q_res = run("fit_q", k, fit_q, problem, v_next, Q_init, samples, value_cap=cap)
        v_res = run("fit_v", k, fit_v, problem, q_res.f, v_init, samples, q_res.reg_mu)
        stack.Q[k], stack.v[k] = q_res.f, v_res.f
        stack.meta["steps"][str(k)] = {
            "reg_mu": q_res.reg_mu,
            "value_cap": v_res.f.meta["value_cap"],
            "q_loss": [[r, n, f, g] for r, n, f, g in q_res.trace],
            "v_loss": [[r, n, f, g] for r, n, f, g in v_res.trace],
        }
        if out_dir is not None:
            stack.save_step(out_dir, k)
        say(f"k={k}: Q fit rms {np.sqrt(q_res.trace[-1][2]):.4f}, v fit rms {np.sqrt(v_res.trace[-1][2]):.4f}")
    return stack


# ----------------------------------------------------------------------------
# rollouts


@dataclass
class RolloutResult:
    states: np.ndarray  # (N, K - k0 + 1, d)
    actions: np.ndarray  # (N, K - k0)
    running: np.ndarray
    terminal: np.ndarray

    @property
    def total(self) -> np.ndarray:
        return self.running + self.terminal

    @property
    def final_sq_norm(self) -> np.ndarray:
        x = self.states[:, -1]
        return np.mean(x * x, axis=1)


def rollout(stack: SolvedStack, x0, rng: np.random.Generator, policy: str = "fht", k0: int = 0) -> RolloutResult:
    """Forward simulation from ``t_{k0}`` to ``T`` under a policy.

    ``policy`` is ``'fht'`` (argmin of the stored action-value functions),
    ``'zero'`` or ``'random'``.  Noise is drawn identically for every
    policy, so equal generators give paired samples.
    """
    problem = stack.problem
    x = np.array(np.atleast_2d(x0), dtype=float)
    N, K = x.shape[0], problem.K
    states = [x.copy()]
    actions = []
    # actions for the random policy come from a spawned stream so the noise stays paired
    act_rng = np.random.default_rng(rng.bit_generator.seed_seq.spawn(1)[0]) if policy == "random" else None
    running = np.zeros(N)
    for k in range(k0, K):
        if policy == "fht":
            a = stack.policy(k, x)
        elif policy == "zero":
            a = np.zeros(N)
        elif policy == "random":
            a = problem.sample_actions(N, act_rng)
        else:
            raise ValueError(f"unknown policy {policy!r}")
        x, r = problem.step(x, a, rng)
        running += r
        states.append(x.copy())
        actions.append(a)
    return RolloutResult(np.stack(states, axis=1), np.stack(actions, axis=1) if actions else np.zeros((N, 0)),
                         running, problem.terminal(x))
