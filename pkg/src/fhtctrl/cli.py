"""Command-line entry points: ``solve``, ``eval-q``, ``eval-v``, ``hist`` and ``mc-ref``.

Exit codes: 0 on success, 2 for configuration or argument errors, 3 for
numerical failures.  Every CSV starts with a comment line carrying the
configuration hash and seed, and all numbers are written with full
precision so that equal seeds give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .als import ALSDivergenceError
from .config import PRESETS, ConfigError, ExperimentConfig, load_config
from .dynamics import SimulationBlowUpError
from .montecarlo import mc_action_value, mc_policy_value
from .sketch import NonFiniteEvaluationError, RankCollapseError
from .workflow import (ControlProblem, SolvedStack, WorkflowError, backward_solve, rollout, stream)

logger = logging.getLogger("fhtctrl")

THREADS_ENV = "FHTCTRL_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
NUMERICAL_ERRORS = (WorkflowError, ALSDivergenceError, RankCollapseError, NonFiniteEvaluationError,
                    SimulationBlowUpError, FloatingPointError, np.linalg.LinAlgError)


class UsageError(ValueError):
    """Bad command-line input that is not a configuration entry."""


# ----------------------------------------------------------------------------
# helpers


def _fmt(v) -> str:
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, cfg: ExperimentConfig, command: str, header: list[str], rows) -> str:
    """Write (or return, for ``path=None``) a CSV with the provenance comment line."""
    buf = io.StringIO()
    buf.write(f"# command={command} config_hash={cfg.config_hash()} seed={cfg.seed}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    text = buf.getvalue()
    if path is None or str(path) == "-":
        sys.stdout.write(text)
    else:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Path(path).write_text(text)
    return text


def _parse_overrides(items: list[str] | None) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError([f"override {item!r} is not of the form key=value"])
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _config_from_args(args) -> ExperimentConfig:
    overrides = _parse_overrides(args.set)
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "output", None) is not None:
        overrides["output"] = args.output
    if args.preset is None and args.config is None and not overrides:
        raise ConfigError(["give --preset, --config or --set"])
    return load_config(args.config, args.preset, overrides)


def named_points(spec: str, problem: ControlProblem) -> tuple[list[str], np.ndarray]:
    """``y+``, ``y-``, ``zero`` (comma separated) or a CSV file of grid-ordered states."""
    d = problem.d
    path = Path(spec)
    if path.suffix == ".csv" or path.exists():
        if not path.exists():
            raise UsageError(f"points file {spec} not found")
        pts = np.atleast_2d(np.loadtxt(path, delimiter=",", comments="#", ndmin=2))
        if pts.shape[1] != d:
            raise UsageError(f"points file has {pts.shape[1]} columns, expected {d}")
        return [str(i) for i in range(len(pts))], pts
    table = {"y+": np.ones(d), "y-": -np.ones(d), "zero": np.zeros(d)}
    names = [s.strip() for s in spec.split(",") if s.strip()]
    unknown = [n for n in names if n not in table]
    if unknown or not names:
        raise UsageError(f"unknown point names {unknown}; use y+, y-, zero or a CSV file")
    return names, np.array([table[n] for n in names])


def _action_grid(n: int, problem: ControlProblem) -> np.ndarray:
    if n < 1:
        raise UsageError("the action grid needs at least one point")
    if n == 1:
        return np.zeros(1)
    return np.linspace(-problem.action_box, problem.action_box, n)


def _load_stack(run_dir) -> SolvedStack:
    path = Path(run_dir)
    if not (path / "meta.json").exists():
        raise UsageError(f"no solved run in {run_dir}")
    return SolvedStack.load(path)


def _check_k(k: int | None, stack: SolvedStack) -> int:
    K = stack.K
    k = K - 1 if k is None else k
    if not 0 <= k < K:
        raise UsageError(f"k={k} out of range 0..{K - 1}")
    if stack.Q[k] is None or stack.v[k] is None:
        raise UsageError(f"step k={k} was not solved in this run")
    return k


# ----------------------------------------------------------------------------
# commands


def cmd_solve(args) -> int:
    cfg = _config_from_args(args)
    problem = ControlProblem.from_config(cfg)
    out = Path(cfg.output)
    t0 = time.perf_counter()
    stack = backward_solve(problem, out, cfg, progress=lambda msg: logger.info(msg))
    total = time.perf_counter() - t0
    rows = []
    for k in sorted(stack.meta["steps"], key=int):
        for r, node, fit, reg in stack.meta["steps"][k]["q_loss"]:
            rows.append((int(k), "q", r, node, fit, reg))
        for r, node, fit, reg in stack.meta["steps"][k]["v_loss"]:
            rows.append((int(k), "v", r, node, fit, reg))
    write_csv(out / "loss_trace.csv", cfg, "solve", ["k", "target", "round", "node", "data_term", "regularizer_term"],
              rows)
    timings = dict(stack.meta["timings"], total=total)
    (out / "timings.json").write_text(json.dumps(timings, indent=2, sort_keys=True))
    logger.info("solved %d steps in %.1f s; results in %s", stack.K, total, out)
    return EXIT_OK


def cmd_eval_q(args) -> int:
    stack = _load_stack(args.run)
    problem, cfg = stack.problem, ExperimentConfig.from_dict(stack.meta["config"])
    k = _check_k(args.k, stack)
    names, pts = named_points(args.points, problem)
    acts = _action_grid(args.n_actions, problem)
    rng = stream(cfg.seed, "mc", k)
    v_next = (lambda x: stack.value(k + 1, x))
    rows = []
    for name, x in zip(names, pts):
        q = stack.action_value(k, np.repeat(x[None, :], len(acts), axis=0), acts)
        if args.n_mc > 0:
            ref = mc_action_value(problem, x, acts, v_next, args.n_mc, rng)
            for a, qf, m, s in zip(acts, q, ref.mean, ref.stderr):
                rows.append((name, a, qf, m, s, abs(qf - m) / abs(m) if m != 0 else float("inf")))
        else:
            rows.extend((name, a, qf, "", "", "") for a, qf in zip(acts, q))
    write_csv(args.out, cfg, f"eval-q k={k}", ["point", "a", "q_fht", "q_mc", "q_mc_stderr", "rel_err"], rows)
    return EXIT_OK


def validation_points(problem: ControlProblem, n: int, rng: np.random.Generator) -> tuple[np.ndarray, list[str]]:
    """Half uniform on the state box, half on the diagonal segment."""
    n_uniform = (n + 1) // 2
    pts = np.vstack([problem.sample_states(n_uniform, rng), problem.sample_segment(n - n_uniform, rng)])
    return pts, ["uniform"] * n_uniform + ["segment"] * (n - n_uniform)


def cmd_eval_v(args) -> int:
    stack = _load_stack(args.run)
    problem, cfg = stack.problem, ExperimentConfig.from_dict(stack.meta["config"])
    k = _check_k(args.k, stack)
    if args.n_points < 1 or args.n_rollouts < 2:
        raise UsageError("need at least one point and two rollouts")
    pts, kinds = validation_points(problem, args.n_points, stream(cfg.seed, "eval_v", k))
    vf = stack.value(k, pts)
    ref = mc_policy_value(stack, k, pts, args.n_rollouts, stream(cfg.seed, "rollout", k))
    rows = [(i, kinds[i], vf[i], ref.mean[i], ref.stderr[i], abs(vf[i] - ref.mean[i]) <= 3 * ref.stderr[i])
            for i in range(len(pts))]
    write_csv(args.out, cfg, f"eval-v k={k}", ["point", "kind", "v_fht", "v_mc", "v_mc_stderr", "within_3se"], rows)
    return EXIT_OK


def cmd_hist(args) -> int:
    stack = _load_stack(args.run)
    problem, cfg = stack.problem, ExperimentConfig.from_dict(stack.meta["config"])
    if not stack.complete():
        raise UsageError("hist needs a fully solved run")
    if args.n_particles < 2:
        raise UsageError("need at least two particles")
    x0, kinds = validation_points(problem, args.n_particles, stream(cfg.seed, "starts"))
    noise_seed = int(stream(cfg.seed, "hist").integers(2**63))
    runs = {name: rollout(stack, x0, np.random.default_rng(noise_seed), name) for name in ("fht", "zero")}
    rows = []
    for group, res in (("policy", runs["fht"]), ("control", runs["zero"])):
        for i in range(len(x0)):
            rows.append((group, i, kinds[i], res.final_sq_norm[i], res.total[i]))
    write_csv(args.out, cfg, "hist", ["group", "particle", "start", "final_sq_norm", "realized_cost"], rows)
    return EXIT_OK


def cmd_mc_ref(args) -> int:
    cfg = _config_from_args(args)
    problem = ControlProblem.from_config(cfg)
    names, pts = named_points(args.points, problem)
    acts = _action_grid(args.n_actions, problem)
    if args.n_mc < 2:
        raise UsageError("need at least two Monte-Carlo paths")
    rng = stream(cfg.seed, "mc", problem.K - 1)
    rows = []
    for name, x in zip(names, pts):
        ref = mc_action_value(problem, x, acts, problem.terminal, args.n_mc, rng)
        rows.extend((name, a, m, s) for a, m, s in zip(acts, ref.mean, ref.stderr))
    write_csv(args.out, cfg, "mc-ref", ["point", "a", "q_mc", "q_mc_stderr"], rows)
    return EXIT_OK


# ----------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="fhtctrl", description="Stochastic optimal control with functional "
                                "hierarchical tensors.")
    p.add_argument("--threads", type=int, default=None,
                   help=f"cap on BLAS threads (default: ${THREADS_ENV} or library default)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def config_args(sp):
        sp.add_argument("--preset", choices=sorted(PRESETS), help="named parameter set")
        sp.add_argument("--config", help="JSON file of configuration entries (applied after the preset)")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="single override, JSON-valued")
        sp.add_argument("--seed", type=int, help="master seed")

    sp = sub.add_parser("solve", help="backward solve and persist the Q/v stack")
    config_args(sp)
    sp.add_argument("--output", help="run directory")
    sp.set_defaults(func=cmd_solve)

    sp = sub.add_parser("eval-q", help="Q_k on an action grid, with an optional Monte-Carlo reference")
    sp.add_argument("--run", required=True, help="run directory of a solve")
    sp.add_argument("--k", type=int, help="time step (default K-1)")
    sp.add_argument("--points", default="y+,y-", help="y+, y-, zero (comma separated) or a CSV of states")
    sp.add_argument("--n-actions", type=int, default=21)
    sp.add_argument("--n-mc", type=int, default=10000, help="Monte-Carlo paths per pair; 0 skips the reference")
    sp.add_argument("--out", help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_eval_q)

    sp = sub.add_parser("eval-v", help="v_k against realised policy costs")
    sp.add_argument("--run", required=True)
    sp.add_argument("--k", type=int)
    sp.add_argument("--n-points", type=int, default=60)
    sp.add_argument("--n-rollouts", type=int, default=100)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_eval_v)

    sp = sub.add_parser("hist", help="terminal distances under the policy and without control")
    sp.add_argument("--run", required=True)
    sp.add_argument("--n-particles", type=int, default=1000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_hist)

    sp = sub.add_parser("mc-ref", help="Monte-Carlo Q_{K-1} reference without a solved run")
    config_args(sp)
    sp.add_argument("--points", default="y+,y-")
    sp.add_argument("--n-actions", type=int, default=21)
    sp.add_argument("--n-mc", type=int, default=10000)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_mc_ref)
    return p


def _thread_cap(args) -> int | None:
    if args.threads is not None:
        return args.threads
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError([f"{THREADS_ENV} must be an integer, got {env!r}"]) from None
    return None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cap = _thread_cap(args)
        if cap is not None and cap < 1:
            raise ConfigError(["--threads must be positive"])
        with threadpool_limits(limits=cap):
            return args.func(args)
    except ConfigError as exc:
        print(f"fhtctrl: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except UsageError as exc:
        print(f"fhtctrl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NUMERICAL_ERRORS as exc:
        print(f"fhtctrl: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
