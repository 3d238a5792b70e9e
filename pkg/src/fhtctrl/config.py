"""Experiment configuration, presets and validation."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """One or more configuration entries are invalid."""

    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("invalid configuration:\n  " + "\n  ".join(self.errors))


@dataclass
class ExperimentConfig:
    # model
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
    # cost and time grid
    K: int = 10
    T: float = 1.0
    state_weight: float = 1.0
    action_weight: float = 1.0
    terminal_weight: float = 1.0
    # domain
    box: float = 2.0
    action_box: float = 1.0
    # discretisation
    q: int = 6
    q_action: int = 6
    rank: int = 8
    operator_rank: int = 8
    margin: int = 2
    # learning
    n_samples: int = 20000
    n_operator_samples: int = 100000
    reg_mu: float | None = None
    reg_ratio: float = 1e-2
    als_rounds: int = 5
    regularizer: str = "mixed"
    n_substeps: int = 20
    # bookkeeping
    seed: int = 0
    output: str = "runs/default"
    extra: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.m if self.variant == "1d" else self.m * self.m

    def validate(self) -> None:
        """Raise :class:`ConfigError` listing every problem at once."""
        errs: list[str] = []
        if self.variant not in ("1d", "2d"):
            errs.append(f"variant must be '1d' or '2d', got {self.variant!r}")
        if not isinstance(self.m, int) or self.m < 1 or (self.m & (self.m - 1)) != 0:
            errs.append(f"m must be a positive power of two, got {self.m}")
        if self.potential not in ("gl", "quadratic", "zero"):
            errs.append(f"potential must be gl, quadratic or zero, got {self.potential!r}")
        for name in ("beta", "T", "box", "action_box"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be positive")
        for name in ("K", "rank", "operator_rank", "n_substeps"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 1:
                errs.append(f"{name} must be a positive integer")
        for name in ("q", "q_action"):
            if not isinstance(getattr(self, name), int) or getattr(self, name) < 2:
                errs.append(f"{name} must be an integer >= 2 (the quadratic costs must be representable)")
        if not isinstance(self.margin, int) or self.margin < 2:
            errs.append("margin must be an integer >= 2")
        if not isinstance(self.n_samples, int) or self.n_samples < 2 or self.n_samples % 2:
            errs.append("n_samples must be a positive even integer")
        if not isinstance(self.n_operator_samples, int) or self.n_operator_samples < 1:
            errs.append("n_operator_samples must be a positive integer")
        if self.reg_mu is not None and self.reg_mu < 0:
            errs.append("reg_mu must be non-negative")
        if not self.reg_ratio > 0:
            errs.append("reg_ratio must be positive")
        if self.regularizer not in ("mixed", "factored"):
            errs.append(f"regularizer must be 'mixed' or 'factored', got {self.regularizer!r}")
        if not isinstance(self.als_rounds, int) or self.als_rounds < 0:
            errs.append("als_rounds must be a non-negative integer")
        for name in ("state_weight", "action_weight", "terminal_weight"):
            if getattr(self, name) < 0:
                errs.append(f"{name} must be non-negative")
        if errs:
            raise ConfigError(errs)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def config_hash(self) -> str:
        """Short stable digest of every setting except the output directory."""
        payload = {k: v for k, v in self.to_dict().items() if k != "output"}
        blob = json.dumps(payload, sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    @classmethod
    def from_dict(cls, data: dict) -> "ExperimentConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError([f"unknown key {k!r}" for k in unknown])
        return cls(**data)


PRESETS: dict[str, dict] = {
    "gl1d-desk": dict(variant="1d", m=16, lam=0.2, mu_gl=1.0, n_samples=20000, rank=8, operator_rank=8, margin=2),
    "gl1d-full": dict(variant="1d", m=64, lam=0.2, mu_gl=1.0, n_samples=100000, rank=8, operator_rank=8),
    "gl2d-full": dict(variant="2d", m=8, lam=0.5, mu_gl=1.0, n_samples=100000, rank=8, operator_rank=8),
}


def load_config(path=None, preset: str | None = None, overrides: dict | None = None) -> ExperimentConfig:
    """Preset values, then a JSON file, then explicit overrides."""
    data: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError([f"unknown preset {preset!r}; choose from {sorted(PRESETS)}"])
        data.update(PRESETS[preset])
    if path is not None:
        try:
            data.update(json.loads(Path(path).read_text()))
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError([f"cannot read config {path}: {exc}"]) from exc
    if overrides:
        data.update(overrides)
    cfg = ExperimentConfig.from_dict(data)
    cfg.validate()
    return cfg
