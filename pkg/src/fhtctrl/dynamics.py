"""Discretised Ginzburg-Landau models and controlled Langevin simulation.

The state follows ``dX = b(X, a) dt + sqrt(2/beta) dW`` with drift
``b(x, a) = -grad V(x) + gain * a * omega``.  A constant action is held over
each time block and integrated by Euler-Maruyama on a finer inner grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

POTENTIALS = ("gl", "quadratic", "zero")


class SimulationBlowUpError(FloatingPointError):
    """The state became non-finite during integration."""


@dataclass(frozen=True)
class GLModel:
    """Ginzburg-Landau chain (``variant='1d'``) or square grid (``'2d'``).

    ``potential`` may be swapped for ``'quadratic'`` (``V = |x|^2 / 2``, an
    Ornstein-Uhlenbeck surrogate) or ``'zero'``; ``noise=False`` removes the
    Brownian term.
    """

    variant: str = "1d"
    m: int = 64
    lam: float = 0.2
    mu_gl: float = 1.0
    beta: float = 1.0
    gain: float = 20.0
    omega_lo: float | None = None
    omega_hi: float | None = None
    potential: str = "gl"
    noise: bool = True
    omega: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        if self.variant not in ("1d", "2d"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.m < 1:
            raise ValueError("m must be positive")
        if self.potential not in POTENTIALS:
            raise ValueError(f"potential must be one of {POTENTIALS}")
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        lo, hi = self.omega_window
        if self.variant == "1d":
            frac = np.arange(1, self.m + 1) / self.m
            omega = ((frac >= lo) & (frac <= hi)).astype(float)
        else:
            frac = np.arange(1, self.m + 1) / self.m
            inside = (frac >= lo) & (frac <= hi)
            omega = np.outer(inside, inside).astype(float).reshape(-1)
        object.__setattr__(self, "omega", omega)

    @property
    def omega_window(self) -> tuple[float, float]:
        default = (0.25, 0.6) if self.variant == "1d" else (0.2, 0.8)
        lo = default[0] if self.omega_lo is None else self.omega_lo
        hi = default[1] if self.omega_hi is None else self.omega_hi
        return lo, hi

    @property
    def d(self) -> int:
        return self.m if self.variant == "1d" else self.m * self.m

    @property
    def h(self) -> float:
        return 1.0 / (self.m + 1)

    # -- potential and gradient ---------------------------------------------

    def _grid(self, x: np.ndarray) -> np.ndarray:
        return x.reshape(x.shape[:-1] + (self.m, self.m))

    def potential_value(self, x) -> np.ndarray | float:
        x = np.asarray(x, dtype=float)
        if self.potential == "zero":
            out = np.zeros(x.shape[:-1])
        elif self.potential == "quadratic":
            out = 0.5 * np.sum(x * x, axis=-1)
        elif self.variant == "1d":
            h = self.h
            pad = np.zeros(x.shape[:-1] + (1,))
            xp = np.concatenate([pad, x, pad], axis=-1)
            grad_term = 0.5 * self.lam * np.sum(np.diff(xp, axis=-1) ** 2, axis=-1) / h ** 2
            well = 0.25 * self.mu_gl * np.sum((1.0 - x * x) ** 2, axis=-1)
            out = (grad_term + well) * h
        else:
            h = self.h
            g = self._grid(x)
            pairs = np.sum(np.diff(g, axis=-1) ** 2, axis=(-2, -1)) + np.sum(np.diff(g, axis=-2) ** 2, axis=(-2, -1))
            well = 0.25 * self.mu_gl * np.sum((1.0 - x * x) ** 2, axis=-1)
            out = (0.5 * self.lam * pairs / h ** 2 + well) * h * h
        return float(out) if np.ndim(out) == 0 else out

    def grad_potential(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        if self.potential == "zero":
            return np.zeros_like(x)
        if self.potential == "quadratic":
            return x.copy()
        h = self.h
        if self.variant == "1d":
            pad = np.zeros(x.shape[:-1] + (1,))
            xp = np.concatenate([pad, x, pad], axis=-1)
            lap = 2.0 * x - xp[..., :-2] - xp[..., 2:]
            return self.lam * lap / h - self.mu_gl * h * (1.0 - x * x) * x
        g = self._grid(x)
        lap = np.zeros_like(g)
        dx = np.diff(g, axis=-1)
        lap[..., :, :-1] -= dx
        lap[..., :, 1:] += dx
        dy = np.diff(g, axis=-2)
        lap[..., :-1, :] -= dy
        lap[..., 1:, :] += dy
        lap = lap.reshape(x.shape)
        return self.lam * lap - self.mu_gl * h * h * (1.0 - x * x) * x

    def drift(self, x, a) -> np.ndarray:
        """``-grad V(x) + gain * a * omega``; ``a`` broadcasts over rows."""
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        return -self.grad_potential(x) + self.gain * a[..., None] * self.omega


@dataclass(frozen=True)
class CostSpec:
    """Running cost ``w_x |x|^2/d + w_a a^2`` and terminal cost ``w_h |x|^2/d``."""

    T: float = 1.0
    K: int = 10
    state_weight: float = 1.0
    action_weight: float = 1.0
    terminal_weight: float = 1.0

    def __post_init__(self):
        if self.T <= 0 or self.K < 1:
            raise ValueError("horizon T must be positive and K >= 1")
        if min(self.state_weight, self.action_weight, self.terminal_weight) < 0:
            raise ValueError("cost weights must be non-negative")

    @property
    def dt(self) -> float:
        return self.T / self.K

    def running(self, x, a) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        a = np.asarray(a, dtype=float)
        return self.state_weight * np.mean(x * x, axis=-1) + self.action_weight * a * a

    def terminal(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        return self.terminal_weight * np.mean(x * x, axis=-1)


def simulate(model: GLModel, cost: CostSpec, x0, a, dt: float, n_sub: int = 20,
             rng: np.random.Generator | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Euler-Maruyama over one block of length ``dt`` with constant action.

    ``x0`` is ``(N, d)`` (or ``(d,)``) and ``a`` a scalar or ``(N,)``.
    Returns the end states and the left-endpoint running-cost integrals.
    """
    if dt <= 0 or n_sub < 1:
        raise ValueError("dt must be positive and n_sub >= 1")
    x = np.array(x0, dtype=float, copy=True)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.shape[-1] != model.d:
        raise ValueError(f"state dimension {x.shape[-1]} does not match model dimension {model.d}")
    a = np.broadcast_to(np.asarray(a, dtype=float), x.shape[:1])
    step = dt / n_sub
    rng = np.random.default_rng(rng)
    noise_scale = np.sqrt(2.0 / model.beta * step) if model.noise else 0.0
    r = np.zeros(x.shape[0])
    for s in range(n_sub):
        r += cost.running(x, a) * step
        x = x + model.drift(x, a) * step
        if model.noise:
            x += noise_scale * rng.standard_normal(x.shape)
        if not np.all(np.isfinite(x)):
            raise SimulationBlowUpError(f"non-finite state at inner step {s + 1} of {n_sub}")
    if single:
        return x[0], r[0]
    return x, r


def metastable_states(model: GLModel) -> tuple[np.ndarray, np.ndarray]:
    """The all-ones and all-minus-ones configurations."""
    one = np.ones(model.d)
    return one, -one
