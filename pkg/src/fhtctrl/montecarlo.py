"""Monte-Carlo reference values for action-value and value functions."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .workflow import ControlProblem, SolvedStack, rollout


@dataclass
class MCEstimate:
    mean: np.ndarray
    stderr: np.ndarray
    n_paths: int


def _summary(samples: np.ndarray) -> tuple[float, float]:
    n = samples.shape[0]
    se = samples.std(ddof=1) / np.sqrt(n) if n > 1 else np.inf
    return float(samples.mean()), float(se)


def mc_action_value(problem: ControlProblem, x, actions, v_next, n_paths: int,
                    rng: np.random.Generator) -> MCEstimate:
    """``E[r + v_next(x')]`` for one grid-ordered state and each action.

    ``v_next`` maps grid-ordered states ``(N, d)`` to values; at the last
    step it is the analytic terminal cost.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    actions = np.atleast_1d(np.asarray(actions, dtype=float))
    means, ses = [], []
    for a in actions:
        xs = np.repeat(x[None, :], n_paths, axis=0)
        xp, r = problem.step(xs, a, rng)
        m, s = _summary(r + v_next(xp))
        means.append(m)
        ses.append(s)
    return MCEstimate(np.array(means), np.array(ses), n_paths)


def mc_policy_value(stack: SolvedStack, k: int, points, n_rollouts: int, rng: np.random.Generator) -> MCEstimate:
    """Mean realised cost from ``t_k`` under the stored policy, per starting point."""
    points = np.atleast_2d(np.asarray(points, dtype=float))
    means, ses = [], []
    for x in points:
        res = rollout(stack, np.repeat(x[None, :], n_rollouts, axis=0), rng, "fht", k0=k)
        m, s = _summary(res.total)
        means.append(m)
        ses.append(s)
    return MCEstimate(np.array(means), np.array(ses), n_rollouts)
