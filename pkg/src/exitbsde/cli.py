"""Command-line entry point: ``exitbsde <command> [--config FILE] [--threads N] [--output-dir DIR]``.

Exit codes: 0 success, 2 config error, 3 numeric error, 4 acceptance failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .config import ConfigError, ExperimentConfig
from .funclass import NumericOverflowError, Perturbed, constant, gaussian_bump, load_json, save_json
from .loss import estimate_weighted_loss, straddle_decomposition, weight_from_dict
from .problems import ProblemSpec, get_problem, problem_from_tables, validate
from .rates import (DEFAULT_H_LIST, InsufficientPrecisionError, plateau_study, run_exit_study,
                    run_rate_study, wald_test, write_long_csv)
from .simulate import (CensoredPathError, InvalidStartError, SimulationNumericError, default_max_steps,
                       mean_se, refine_batch, simulate_batch)
from .train import DivergenceError, GradientModeError, TrainConfig, fit

log = logging.getLogger("exitbsde")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC, EXIT_ACCEPTANCE = 0, 2, 3, 4
DEFAULT_H = {"train": 2.0**-4}
DEFAULT_H_FALLBACK = 2.0**-6
DECOMPOSITION_TOL = 1e-10


class AcceptanceFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# helpers


def _num(v) -> str:
    return repr(float(v))


def _finite(obj):
    """Replace non-finite floats by ``None`` so the output is strict JSON."""
    if isinstance(obj, float):
        return obj if math.isfinite(obj) else None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    obj = json.loads(json.dumps(obj, default=_json_default))
    with open(path, "w") as fh:
        json.dump(_finite(obj), fh, indent=1, sort_keys=True, allow_nan=False)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    raise TypeError(f"not serialisable: {type(o).__name__}")


def _write_csv(path: Path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def build_problem(cfg: ExperimentConfig) -> ProblemSpec:
    p = cfg.problem
    try:
        if p.tables is not None:
            return problem_from_tables(p.tables)
        return get_problem(p.name, **p.options)
    except (ValueError, TypeError, KeyError) as exc:
        raise ConfigError(f"problem: {exc}") from None


def build_candidate(cfg: ExperimentConfig, problem: ProblemSpec):
    c = cfg.candidate
    if c.kind == "file":
        try:
            U = load_json(c.file)
        except FileNotFoundError:
            raise ConfigError(f"candidate.file: no such file {c.file!r}") from None
        except (ValueError, KeyError, json.JSONDecodeError) as exc:
            raise ConfigError(f"candidate.file: {exc}") from None
        if U.dim != problem.dim:
            raise ConfigError(f"candidate.file: dimension {U.dim} does not match problem dimension {problem.dim}")
        return U
    if c.kind == "zero":
        return constant(0.0, problem.dim)
    if problem.exact_solution is None:
        raise ConfigError("candidate.kind: problem has no exact solution")
    if c.kind == "exact":
        return problem.exact_solution
    center = c.bump_center if c.bump_center is not None else [0.0] * problem.dim
    if len(center) != problem.dim:
        raise ConfigError("candidate.bump_center: wrong dimension")
    return Perturbed(problem.exact_solution, float(c.eps), gaussian_bump(center, c.bump_width))


def _check_start(cfg: ExperimentConfig, problem: ProblemSpec):
    x0 = cfg.sampling.x0
    if x0 == "uniform":
        return x0
    pt = np.asarray(x0, dtype=np.float64)
    if pt.shape != (problem.dim,):
        raise ConfigError(f"sampling.x0: expected {problem.dim} coordinates, got {len(x0)}")
    if not problem.domain.contains(pt):
        raise ConfigError(f"sampling.x0: start point {x0} is not in the open domain")
    return pt


def resolve(cfg: ExperimentConfig) -> ExperimentConfig:
    """Materialise command-dependent defaults in place."""
    if cfg.grid.h is None and cfg.command not in ("rate-study", "exit-study"):
        cfg.grid.h = DEFAULT_H.get(cfg.command, DEFAULT_H_FALLBACK)
    if cfg.command in ("rate-study", "exit-study") and cfg.grid.h_list is None and cfg.study.eps_list is None:
        cfg.grid.h_list = list(DEFAULT_H_LIST)
    if cfg.command == "rate-study" and cfg.study.eps_list is not None and cfg.grid.h is None:
        cfg.grid.h = 2.0**-8
    if cfg.refine.max_steps is None and cfg.grid.h is not None:
        cfg.refine.max_steps = default_max_steps(cfg.grid.h)
    return cfg


def _weight(cfg):
    try:
        return weight_from_dict(cfg.weight)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"weight: {exc}") from None


# ---------------------------------------------------------------------------
# commands


def cmd_simulate(cfg: ExperimentConfig, out: Path, threads: int) -> int:
    prob = build_problem(cfg)
    x0 = _check_start(cfg, prob)
    s = cfg.sampling
    b = simulate_batch(prob, x0, cfg.grid.h, s.n_paths, s.seed, cfg.refine.max_steps,
                       chunk_size=cfg.chunk_size, threads=threads)
    d = prob.dim
    header = (["path_id"] + [f"x0_{i}" for i in range(d)] + ["exit_index", "tau_bar", "exited"]
              + [f"exit_{i}" for i in range(d)])
    rows = [[int(b.path_ids[i])] + [_num(v) for v in b.x0[i]] + [int(b.exit_index[i]), _num(b.tau_bar[i]),
            int(b.exited[i])] + [_num(v) for v in b.exit_state[i]] for i in range(len(b))]
    _write_csv(out / "paths.csv", header, rows)
    if cfg.output.increments:
        order = np.lexsort((b.t_step, b.t_path))
        _write_csv(out / "increments.csv", ["path_id", "step"] + [f"dW_{i}" for i in range(d)],
                   [[int(b.path_ids[b.t_path[j]]), int(b.t_step[j])] + [_num(v) for v in b.t_dW[j]]
                    for j in order])
    m, se = mean_se(b.tau_bar)
    n_cens = int((~b.exited).sum())
    _write_json(out / "summary.json", {"n_paths": len(b), "n_censored": n_cens, "tau_bar_mean": m,
                                       "tau_bar_se": se, "h": cfg.grid.h, "seed": s.seed,
                                       "start": s.x0, "max_steps": cfg.refine.max_steps})
    print(f"simulated {len(b)} paths, {n_cens} censored, mean tau_bar {m:.6g} (se {se:.2g})")
    return EXIT_OK


def cmd_loss_eval(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    U = build_candidate(cfg, prob)
    x0 = _check_start(cfg, prob)
    s = cfg.sampling
    rep = estimate_weighted_loss(U, prob, _weight(cfg), cfg.grid.h, s.n_paths, x0, s.seed,
                                 cfg.refine.max_steps, cfg.chunk_size, threads, per_path=cfg.output.per_path)
    _write_json(out / "loss_report.json", rep.to_dict())
    if cfg.output.per_path:
        rep.write_per_path_csv(out / "per_path.csv")
    print(f"boundary {rep.boundary_mean:.6g}, dynamical {rep.dynamical_mean:.6g}, "
          f"weighted total {rep.weighted_total_mean:.6g}")
    return EXIT_OK


def cmd_rate_study(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    x0 = _check_start(cfg, prob)
    s = cfg.sampling
    if cfg.study.eps_list is not None:
        c = cfg.candidate
        center = c.bump_center if c.bump_center is not None else [0.0] * prob.dim
        tab = plateau_study(prob, gaussian_bump(center, c.bump_width), cfg.study.eps_list, cfg.grid.h,
                            s.n_paths, x0, s.seed, max_steps=cfg.refine.max_steps, chunk_size=cfg.chunk_size,
                            threads=threads)
        _write_json(out / "plateau.json", tab.to_dict())
        _write_csv(out / "plateau.csv", ["eps", "mean", "se"],
                   [[_num(r.eps), _num(r.mean), _num(r.se)] for r in tab.rows])
        for r in tab.ratios:
            print(f"eps {r['eps_lo']:g} -> {r['eps_hi']:g}: ratio {r['ratio']:.4g}")
        return EXIT_OK
    quantity = cfg.study.quantity
    needs_u = quantity in ("boundary", "dynamical")
    U = build_candidate(cfg, prob) if needs_u else None
    try:
        tab = run_rate_study(prob, U, _weight(cfg), cfg.grid.h_list, s.n_paths, x0, s.seed, quantity,
                             R=cfg.refine.R, max_steps=cfg.refine.max_steps, chunk_size=cfg.chunk_size,
                             threads=threads)
    except ValueError as exc:
        if isinstance(exc, InsufficientPrecisionError):
            raise
        raise ConfigError(f"study/grid: {exc}") from None
    (out / "rate_table.csv").write_text(tab.to_csv())
    (out / "rate_summary.json").write_text(tab.summary_json() + "\n")
    write_long_csv([tab], out / "rate_long.csv")
    print(f"{tab.quantity}: slope {tab.slope}, target {tab.target_exponent}, verdict {tab.verdict}")
    if tab.verdict == "insufficient-precision":
        raise InsufficientPrecisionError(tab.note)
    return EXIT_ACCEPTANCE if tab.verdict == "fail" else EXIT_OK


def cmd_exit_study(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    x0 = _check_start(cfg, prob)
    s = cfg.sampling
    try:
        res = run_exit_study(prob, cfg.grid.h_list, s.n_paths, x0, s.seed, cfg.refine.R,
                             tuple(cfg.study.p_list), cfg.refine.max_steps, cfg.chunk_size, threads)
    except ValueError as exc:
        raise ConfigError(f"grid.h_list: {exc}") from None
    tables = res["tables"]
    summary = {"tables": {k: {kk: vv for kk, vv in t.to_dict().items() if kk != "rows"}
                          for k, t in tables.items()},
               "per_h": res["per_h"], "tail": res["tail"], "reference": res["reference"]}
    _write_json(out / "exit_study.json", summary)
    write_long_csv(list(tables.values()), out / "exit_long.csv")
    for k, t in tables.items():
        (out / f"exit_{k}.csv").write_text(t.to_csv())
        print(f"{k}: slope {t.slope}, verdict {t.verdict}")
    bad = [t for t in tables.values() if t.verdict == "fail"]
    return EXIT_ACCEPTANCE if bad else EXIT_OK


def cmd_decompose_check(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    U = build_candidate(cfg, prob)
    x0 = _check_start(cfg, prob)
    s = cfg.sampling
    ref = refine_batch(prob, x0, cfg.grid.h, cfg.refine.R, s.n_paths, s.seed, cfg.refine.max_steps,
                       chunk_size=cfg.chunk_size, threads=threads)
    dec = straddle_decomposition(U, prob, ref)
    viol = dec.violation()
    st = dec.straddle
    sel = np.isfinite(ref.theta) & ref.exited
    ok_ids, steps, theta = ref.path_ids[sel], ref.theta_step[sel], ref.theta[sel]
    rows = [[int(ok_ids[i]), int(steps[i]), _num(theta[i]), _num(dec.pre[i]), _num(dec.post[i]),
             _num(dec.R[i]), _num(dec.summand[i]), _num(viol[i]), int(st[i])] for i in range(len(viol))]
    _write_csv(out / "decomposition.csv",
               ["path_id", "step", "theta", "pre", "post", "R", "summand", "violation", "straddle"], rows)
    worst = float(np.max(viol[st])) if st.any() else 0.0
    passed = bool(st.any()) and worst <= DECOMPOSITION_TOL
    _write_json(out / "decompose.json", {"n_paths": s.n_paths, "n_straddling_steps": int(st.sum()),
                                         "max_violation": worst, "tolerance": DECOMPOSITION_TOL,
                                         "max_abs_R": float(np.max(np.abs(dec.R[st]))) if st.any() else 0.0,
                                         "R_refine": cfg.refine.R, "h": cfg.grid.h, "passed": passed})
    print(f"{int(st.sum())} straddling steps, max identity violation {worst:.3g}")
    return EXIT_OK if passed else EXIT_ACCEPTANCE


def cmd_wald(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    x0 = _check_start(cfg, prob)
    s = cfg.sampling
    try:
        rep = wald_test(prob, cfg.grid.h, cfg.study.functional, s.n_paths, x0, s.seed, cfg.refine.max_steps,
                        chunk_size=cfg.chunk_size, threads=threads)
    except KeyError:
        raise ConfigError(f"study.functional: unknown functional {cfg.study.functional!r}") from None
    _write_json(out / "wald.json", rep.to_dict())
    if not rep.valid:
        print(f"invalid: {rep.note}")
        return EXIT_ACCEPTANCE
    print(f"lhs {rep.lhs_mean:.6g} +- {rep.lhs_se:.2g}, rhs {rep.rhs:.6g} +- {rep.rhs_se:.2g}, "
          f"z {rep.z_score:.3g}: {'pass' if rep.passed else 'fail'}")
    return EXIT_OK if rep.passed else EXIT_ACCEPTANCE


def train_config_from(cfg: ExperimentConfig) -> TrainConfig:
    t = cfg.train
    try:
        return TrainConfig(problem=cfg.problem.name, width=t.width, h=cfg.grid.h, batch_paths=t.batch_paths,
                           iterations=t.iterations, learning_rate=t.learning_rate, decay=t.decay,
                           gradient_mode=t.gradient_mode, fd_step=t.fd_step, seed=cfg.sampling.seed,
                           weight=cfg.weight, eval_every=t.eval_every, x0=cfg.sampling.x0,
                           init_scale=t.init_scale, fixed_dataset=t.fixed_dataset,
                           max_steps=cfg.refine.max_steps, problem_options=dict(cfg.problem.options))
    except ValueError as exc:
        raise ConfigError(f"train: {exc}") from None


def cmd_train(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    _check_start(cfg, prob)
    tc = train_config_from(cfg)
    res = fit(tc, problem=prob)
    res.save_checkpoint(out / "checkpoint.json")
    save_json(res.net, out / "net.json")
    res.write_history_csv(out / "history.csv")
    last = res.history[-1] if res.history else {}
    _write_json(out / "train_summary.json", {"status": res.status, "message": res.message,
                                             "iterations": tc.iterations, "final": last})
    print(f"training {res.status}; final {', '.join(f'{k}={v:.4g}' for k, v in last.items() if isinstance(v, float))}")
    if res.status == "diverged":
        raise DivergenceError(res.message)
    return EXIT_OK


def cmd_validate(cfg, out, threads) -> int:
    prob = build_problem(cfg)
    rep = validate(prob, n_samples=cfg.validate.n_samples, seed=cfg.sampling.seed)
    _write_json(out / "validation.json", rep.to_dict())
    for c in rep.violations():
        print(f"violation: {c.name}: measured {c.measured:.4g} vs declared {c.declared}")
    print("validation " + ("passed" if rep.passed else "failed"))
    return EXIT_OK if rep.passed else EXIT_ACCEPTANCE


def cmd_verify_all(cfg, out, threads) -> int:
    from .acceptance import run_all
    results = run_all(cfg.verify.criteria, scale=cfg.verify.scale, threads=threads, workdir=out / "determinism")
    for r in results:
        print(r.line())
    ok = all(r.passed for r in results)
    # wall-clock times stay on stdout so the JSON is reproducible
    _write_json(out / "verify_all.json", {"scale": cfg.verify.scale, "passed": ok,
                                          "criteria": [r.to_dict(with_runtime=False) for r in results]})
    return EXIT_OK if ok else EXIT_ACCEPTANCE


COMMANDS = {"simulate": cmd_simulate, "loss-eval": cmd_loss_eval, "rate-study": cmd_rate_study,
            "exit-study": cmd_exit_study, "decompose-check": cmd_decompose_check, "wald": cmd_wald,
            "train": cmd_train, "validate": cmd_validate, "verify-all": cmd_verify_all}


def run(cfg: ExperimentConfig, threads: int = 1) -> int:
    """Execute a parsed config; raises the library's errors (see :func:`main` for exit codes)."""
    resolve(cfg)
    out = Path(cfg.output.directory)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.yaml").write_text(cfg.to_yaml())
    return COMMANDS[cfg.command](cfg, out, max(1, int(threads)))


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="exitbsde", description=__doc__.splitlines()[0])
    p.add_argument("command", choices=sorted(COMMANDS))
    p.add_argument("--config", "-c", help="YAML experiment config")
    p.add_argument("--threads", type=int, default=1, help="worker cap; results do not depend on it")
    p.add_argument("--output-dir", "-o", help="override output.directory")
    p.add_argument("--scale", choices=("full", "quick"), help="verify-all sample sizes")
    p.add_argument("--verbose", "-v", action="store_true")
    return p


def load_config(args) -> ExperimentConfig:
    if args.config:
        import yaml
        try:
            with open(args.config) as fh:
                doc = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config {args.config}: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed YAML: {exc}") from None
        if not isinstance(doc, dict):
            raise ConfigError("config: top level must be a mapping")
    else:
        doc = {}
    doc.setdefault("command", args.command)
    if doc["command"] != args.command:
        raise ConfigError(f"command: config is for {doc['command']!r}, invoked as {args.command!r}")
    if args.output_dir:
        doc.setdefault("output", {})
        if not isinstance(doc["output"], dict):
            raise ConfigError("output: expected a mapping")
        doc["output"]["directory"] = args.output_dir
    if args.scale:
        doc.setdefault("verify", {})["scale"] = args.scale
    return cfgmod.parse(doc)


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args)
        return run(cfg, args.threads)
    except (ConfigError, InvalidStartError, GradientModeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SimulationNumericError, NumericOverflowError, DivergenceError, InsufficientPrecisionError,
            CensoredPathError, ArithmeticError, FloatingPointError) as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except AcceptanceFailure as exc:
        print(f"acceptance failure: {exc}", file=sys.stderr)
        return EXIT_ACCEPTANCE


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
