"""The shipped acceptance criteria as callable checks.

Each check returns a :class:`CriterionResult`. ``scale="full"`` uses the
documented sample sizes; ``scale="quick"`` shrinks them for smoke runs (the
verdict of a quick run is indicative only).
"""
from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .funclass import (Perturbed, SingleHiddenLayerNet, constant, fd_check, gaussian_bump, sup_error,
                       taylor_remainders, third_derivative_bound)
from .geometry import sample_uniform
from .loss import (ConstantPlus, ExpExitClamped, Unit, _two_point, estimate_weighted_loss, path_losses,
                   report_from_losses, straddle_decomposition)
from .problems import get_problem, p3_solution
from .rates import plateau_study, run_exit_study, run_rate_study, wald_test
from .rng import derive_seed
from .simulate import default_max_steps, map_chunks, refine_batch, rng_provider, run_chunk, start_points


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    details: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:2d} {self.name}: {self.summary()}"

    def summary(self) -> str:
        keys = self.details.get("_summary_keys", [])
        parts = [f"{k}={_fmt(self.details[k])}" for k in keys if k in self.details]
        return ", ".join(parts) + f" ({self.runtime_s:.1f}s)"

    def to_dict(self, with_runtime: bool = True) -> dict:
        d = asdict(self)
        d["details"] = {k: v for k, v in d["details"].items() if not k.startswith("_")}
        if not with_runtime:
            d.pop("runtime_s")
        return d


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def _n(scale, full, quick):
    return full if scale == "full" else quick


DYADIC = [2.0**-k for k in range(4, 10)]


def _timed(fn):
    def wrapper(*args, **kwargs):
        t0 = time.perf_counter()
        res = fn(*args, **kwargs)
        res.runtime_s = time.perf_counter() - t0
        limit = res.details.get("runtime_limit_s")
        if limit is not None:
            res.details["within_runtime"] = res.runtime_s < limit
            res.passed = res.passed and res.runtime_s < limit
        return res
    wrapper.__name__ = fn.__name__
    wrapper.__doc__ = fn.__doc__
    return wrapper


@_timed
def c01_exact_cancellation(seed=1, scale="full", threads=1) -> CriterionResult:
    """Every dynamical summand vanishes for U=u on the constant-coefficient quadratic problem."""
    prob = get_problem("P2", dim=2)
    U = prob.exact_solution
    h, n = 2.0**-5, _n(scale, 10_000, 2_000)
    ids = np.arange(n, dtype=np.uint64)

    def one(a, b):
        pids = ids[a:b]
        worst = np.zeros(1)
        count = np.zeros(1, dtype=np.int64)

        def on_step(k, idx, xa, xn, dW):
            S = _two_point(U, prob, xa, xn, np.full(len(idx), h), dW)
            worst[0] = max(worst[0], float(np.max(np.abs(S))))
            count[0] += len(idx)
        run_chunk(prob, start_points(prob.domain, "uniform", seed, pids), h, pids, default_max_steps(h),
                  rng_provider(seed, pids, 2, h), on_step)
        return worst[0], count[0]

    parts = map_chunks(one, n, threads=threads)
    worst = max(p[0] for p in parts)
    count = int(sum(p[1] for p in parts))
    return CriterionResult(1, "exact pathwise cancellation", worst <= 1e-12,
                           {"max_abs_summand": worst, "n_summands": count, "n_paths": n, "h": h,
                            "tolerance": 1e-12, "runtime_limit_s": 10.0,
                            "_summary_keys": ["max_abs_summand", "n_summands"]})


@_timed
def c02_decomposition_identity(seed=2, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P3")
    U = Perturbed(prob.exact_solution, 0.3, gaussian_bump([0.3, -0.2], 0.6))
    h, R = 2.0**-5, 64
    n = _n(scale, 1500, 1100)
    ref = refine_batch(prob, "uniform", h, R, n, seed, threads=threads)
    dec = straddle_decomposition(U, prob, ref)
    strad = dec.straddle
    viol = dec.violation()[strad]
    worst = float(np.max(viol)) if viol.size else float("nan")
    n_strad = int(strad.sum())
    ok = n_strad >= 1000 and worst <= 1e-10
    return CriterionResult(2, "decomposition identity", ok,
                           {"n_straddling_steps": n_strad, "max_violation": worst,
                            "max_abs_overlap_residual": float(np.max(np.abs(dec.R[strad]))) if n_strad else 0.0,
                            "R": R, "h": h, "tolerance": 1e-10, "runtime_limit_s": 60.0,
                            "_summary_keys": ["n_straddling_steps", "max_violation"]})


@_timed
def c03_exit_rate(seed=3, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P1")
    n = _n(scale, 100_000, 10_000)
    res = run_exit_study(prob, DYADIC, n, [0.0], seed, R=64, p_list=(1,), threads=threads)
    t1 = res["tables"]["exit_error_p1"]
    t2 = res["tables"]["space_error"]
    s1 = t1.slope if t1.slope is not None else float("nan")
    s2 = t2.slope if t2.slope is not None else float("nan")
    ok = 0.35 <= s1 <= 0.65 and s2 >= 0.35
    return CriterionResult(3, "exit-time error rate", bool(ok),
                           {"exit_time_slope": s1, "exit_space_sq_slope": s2, "n_paths_per_h": n,
                            "exit_time_rows": t1.rows, "exit_space_rows": t2.rows,
                            "_summary_keys": ["exit_time_slope", "exit_space_sq_slope"]})


@_timed
def c04_mean_exit_time(seed=4, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P1")
    h = 2.0**-6
    n = _n(scale, 20_000, 5_000)
    ref = refine_batch(prob, [0.0], h, 64, n, seed, threads=threads)
    ok_paths = ref.ref_exited
    tau = ref.tau_ref[ok_paths]
    m = float(tau.mean())
    se = float(tau.std(ddof=1) / math.sqrt(len(tau)))
    allowance = 3 * se + 2 * math.sqrt(h)
    return CriterionResult(4, "mean exit time oracle", abs(m - 1.0) <= allowance,
                           {"mean_tau_ref": m, "se": se, "allowance": allowance, "oracle": 1.0, "h": h,
                            "n_paths": int(len(tau)), "runtime_limit_s": 60.0,
                            "_summary_keys": ["mean_tau_ref", "se", "allowance"]})


@_timed
def c05_dynamical_rate(seed=5, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P3")
    n = _n(scale, 100_000, 10_000)
    hs = [2.0**-k for k in range(4, 9)]
    t = run_rate_study(prob, prob.exact_solution, Unit(), hs, n, "uniform", seed, "dynamical", threads=threads)
    s = t.slope if t.slope is not None else float("nan")
    return CriterionResult(5, "dynamical loss rate", s >= 1.0,
                           {"slope": s, "r_squared": t.r_squared, "verdict": t.verdict, "rows": t.rows,
                            "n_paths_per_h": n, "_summary_keys": ["slope", "verdict"]})


@_timed
def c06_boundary_rate(seed=6, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P2", dim=2)
    n = _n(scale, 100_000, 10_000)
    hs = [2.0**-k for k in range(4, 9)]
    t = run_rate_study(prob, prob.exact_solution, Unit(), hs, n, "uniform", seed, "boundary", threads=threads)
    s = t.slope if t.slope is not None else float("nan")
    return CriterionResult(6, "boundary loss rate", s >= 0.25,
                           {"slope": s, "r_squared": t.r_squared, "verdict": t.verdict, "rows": t.rows,
                            "n_paths_per_h": n, "_summary_keys": ["slope", "verdict"]})


@_timed
def c07_plateau(seed=7, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P3")
    n = _n(scale, 4_000, 1_000)
    bump = gaussian_bump([0.3, -0.2], 0.6)
    tab = plateau_study(prob, bump, [0.25, 0.5, 1.0, 2.0, 4.0], 2.0**-8, n, "uniform", seed, threads=threads)
    qual = [r for r in tab.ratios if r["above_baseline"]]
    in_range = [3.2 <= r["ratio"] <= 4.8 for r in qual]
    ok = len(qual) >= 2 and all(in_range)
    return CriterionResult(7, "quadratic plateau scaling", ok,
                           {"baseline": tab.rows[0].mean, "ratios": tab.ratios, "qualifying_pairs": len(qual),
                            "qualifying_ratios": [r["ratio"] for r in qual],
                            "_summary_keys": ["qualifying_pairs", "qualifying_ratios"]})


@_timed
def c08_weights(seed=8, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P3")
    U = Perturbed(prob.exact_solution, 0.5, gaussian_bump([0.0, 0.4], 0.7))
    h, n = 2.0**-5, _n(scale, 4_000, 1_000)
    pl = path_losses(U, prob, h, n, "uniform", seed, threads=threads)
    rep = lambda w: report_from_losses(pl, w, h, seed, "uniform")  # noqa: E731
    unit, zero_rate = rep(Unit()), rep(ExpExitClamped(0.0, 5.0))
    keys = ("boundary_mean", "dynamical_mean", "weighted_total_mean")
    unit_gap = max(abs(getattr(unit, k) - getattr(zero_rate, k)) for k in keys)
    two = rep(ConstantPlus(2.0))
    double_gap = max(abs(getattr(two, k) - 2 * getattr(unit, k)) / max(abs(getattr(unit, k)), 1e-300) for k in keys)
    hi, lo = rep(ExpExitClamped(1.0, 5.0)), rep(ExpExitClamped(0.5, 5.0))
    dominates = all(getattr(hi, k) >= getattr(lo, k) for k in keys)
    ok = unit_gap <= 1e-12 and double_gap <= 1e-12 and dominates
    return CriterionResult(8, "weighting contracts", ok,
                           {"unit_vs_zero_rate_gap": unit_gap, "constant_two_relative_gap": double_gap,
                            "larger_rate_dominates": dominates,
                            "_summary_keys": ["unit_vs_zero_rate_gap", "constant_two_relative_gap",
                                              "larger_rate_dominates"]})


@_timed
def c09_wald(seed=9, scale="full", threads=1) -> CriterionResult:
    prob = get_problem("P2", dim=2)
    n = _n(scale, 100_000, 10_000)
    rep = wald_test(prob, 2.0**-5, "dw_sq", n, [0.0, 0.0], seed, threads=threads)
    return CriterionResult(9, "grid Wald identity", rep.valid and rep.passed,
                           {**rep.to_dict(), "_summary_keys": ["lhs_mean", "rhs", "z_score"]})


def shipped_candidates(seed: int = 10) -> list[tuple[str, object, object]]:
    """(label, candidate, domain) for every shipped candidate variant."""
    rng = np.random.default_rng(derive_seed(seed, "candidates"))
    p1, p2, p3 = get_problem("P1"), get_problem("P2", dim=3), get_problem("P3")
    return [
        ("polynomial_P1", p1.exact_solution, p1.domain),
        ("polynomial_P2_3d", p2.exact_solution, p2.domain),
        ("polynomial_P3", p3_solution(), p3.domain),
        ("constant", constant(0.7, 2), p3.domain),
        ("gaussian_bump", gaussian_bump([0.2, -0.1], 0.5), p3.domain),
        ("perturbed", Perturbed(p3_solution(), 0.3, gaussian_bump([0.0, 0.4], 0.7)), p3.domain),
        ("net_1d", SingleHiddenLayerNet.init_random(16, 1, rng), p1.domain),
        ("net_2d", SingleHiddenLayerNet.init_random(8, 2, rng), p3.domain),
        ("net_3d", SingleHiddenLayerNet.init_random(8, 3, rng), p2.domain),
    ]


def taylor_check(U, domain, n_pairs: int, seed: int, max_gap: float = 0.2) -> dict:
    """Remainder bounds ``|r_val| <= C3 |dx|^3 / 6`` and ``|r_grad| <= C3 |dx|^2 / 2``.

    ``C3`` is the largest Frobenius norm of the third derivative seen on a
    dense sample of the domain, padded by 10%.
    """
    x2 = sample_uniform(domain, n_pairs, np.random.default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    step = rng.normal(size=x2.shape)
    step *= (max_gap * rng.uniform(size=(n_pairs, 1))) / np.linalg.norm(step, axis=1, keepdims=True)
    x1 = x2 + step
    inside = domain.signed_distance(x1) < 0
    x1, x2 = x1[inside], x2[inside]
    dense = np.concatenate([sample_uniform(domain, 4 * n_pairs, np.random.default_rng(seed + 2)), x1, x2, 0.5 * (x1 + x2)])
    C3 = 1.1 * third_derivative_bound(U, dense) + 1e-6
    r_val, r_grad = taylor_remainders(U, x1, x2)
    dx = np.linalg.norm(x1 - x2, axis=1)
    slack = 1e-12
    ok_val = bool(np.all(r_val <= C3 * dx**3 / 6 + slack))
    ok_grad = bool(np.all(r_grad <= C3 * dx**2 / 2 + slack))
    return {"pairs": int(len(dx)), "C3": C3, "value_bound_holds": ok_val, "gradient_bound_holds": ok_grad}


@_timed
def c10_derivatives(seed=10, scale="full", threads=1) -> CriterionResult:
    details, ok = {}, True
    n_pairs = _n(scale, 1000, 200)
    for k, (label, U, dom) in enumerate(shipped_candidates(seed)):
        pts = sample_uniform(dom, 100, np.random.default_rng(derive_seed(seed, label)))
        fd = fd_check(U, pts, tol=1e-6)
        tay = taylor_check(U, dom, n_pairs, seed + 17 * k)
        good = fd.passed and tay["value_bound_holds"] and tay["gradient_bound_holds"] and tay["pairs"] >= 0.5 * n_pairs
        details[label] = {"fd_max_deviation": fd.max_deviation, **tay, "passed": bool(good)}
        ok = ok and good
    worst = max(v["fd_max_deviation"] for v in details.values())
    details["worst_fd_deviation"] = worst
    details["_summary_keys"] = ["worst_fd_deviation"]
    return CriterionResult(10, "derivative integrity", ok, details)


def smoke_train_config(scale: str = "full"):
    from .train import TrainConfig
    return TrainConfig(problem="P1", width=16, h=2.0**-4, batch_paths=256,
                       iterations=_n(scale, 2000, 300), learning_rate=0.2, decay=0.99885, seed=11,
                       eval_every=200, problem_options={"boundary_extension": "global"})


@_timed
def c11_training(seed=11, scale="full", threads=1) -> CriterionResult:
    from .train import fit
    cfg = smoke_train_config(scale)
    res = fit(cfg)
    prob = get_problem(cfg.problem, **cfg.problem_options)
    err = sup_error(res.net, prob.exact_solution, prob.domain)
    n_eval = 4096
    eval_seed = derive_seed(seed, "train/eval")
    trained = estimate_weighted_loss(res.net, prob, Unit(), cfg.h, n_eval, cfg.x0, eval_seed, threads=threads)
    base = estimate_weighted_loss(prob.exact_solution, prob, Unit(), cfg.h, n_eval, cfg.x0, eval_seed,
                                  threads=threads)
    loss_ok = trained.weighted_total_mean <= 10 * base.weighted_total_mean
    ok = res.status == "completed" and err <= 0.05 and loss_ok
    return CriterionResult(11, "training smoke", ok,
                           {"status": res.status, "sup_error": err, "final_loss": trained.weighted_total_mean,
                            "baseline_loss": base.weighted_total_mean, "loss_within_10x_baseline": loss_ok,
                            "sup_error_within_0.05": err <= 0.05, "iterations": cfg.iterations,
                            "runtime_limit_s": 600.0,
                            "_summary_keys": ["sup_error", "final_loss", "baseline_loss"]})


CRITERIA = {1: c01_exact_cancellation, 2: c02_decomposition_identity, 3: c03_exit_rate,
            4: c04_mean_exit_time, 5: c05_dynamical_rate, 6: c06_boundary_rate, 7: c07_plateau,
            8: c08_weights, 9: c09_wald, 10: c10_derivatives, 11: c11_training}


def determinism_configs(scale: str = "full") -> dict[str, dict]:
    """Small versions of every command's config, chunked finely so worker count matters."""
    n = _n(scale, 3000, 600)
    base = {"version": 1, "chunk_size": 256}
    return {
        "simulate": {**base, "command": "simulate", "problem": {"name": "P1"}, "grid": {"h": 2.0**-6},
                     "sampling": {"n_paths": 1000, "seed": 7, "x0": [0.0]}},
        "loss-eval": {**base, "command": "loss-eval", "problem": {"name": "P3"}, "grid": {"h": 2.0**-5},
                      "candidate": {"kind": "perturbed", "eps": 0.2},
                      "weight": {"type": "exp_exit_clamped", "rate": 0.5, "cap": 3.0},
                      "sampling": {"n_paths": n, "seed": 3}, "output": {"per_path": True}},
        "rate-study": {**base, "command": "rate-study", "problem": {"name": "P3"},
                       "grid": {"h_list": [2.0**-3, 2.0**-4, 2.0**-5]},
                       "sampling": {"n_paths": 3000, "seed": 5}, "study": {"quantity": "dynamical"}},
        "exit-study": {**base, "command": "exit-study", "problem": {"name": "P1"},
                       "grid": {"h_list": [2.0**-3, 2.0**-4, 2.0**-5]}, "refine": {"R": 16},
                       "sampling": {"n_paths": n // 2, "seed": 6, "x0": [0.0]}},
        "decompose-check": {**base, "command": "decompose-check", "problem": {"name": "P3"},
                            "grid": {"h": 2.0**-5}, "candidate": {"kind": "perturbed", "eps": 0.3},
                            "sampling": {"n_paths": 600, "seed": 2}},
        "wald": {**base, "command": "wald", "problem": {"name": "P2"}, "grid": {"h": 2.0**-5},
                 "sampling": {"n_paths": n, "seed": 9, "x0": [0.0, 0.0]}},
        "train": {**base, "command": "train", "problem": {"name": "P1", "options": {"boundary_extension": "global"}},
                  "grid": {"h": 2.0**-4}, "train": {"iterations": 40, "eval_every": 10, "batch_paths": 600},
                  "sampling": {"seed": 11}},
        "validate": {**base, "command": "validate", "problem": {"name": "P4"}, "sampling": {"seed": 1}},
    }


def _tree_bytes(root):
    import os
    out = {}
    for dirpath, _, files in os.walk(root):
        for f in sorted(files):
            p = os.path.join(dirpath, f)
            with open(p, "rb") as fh:
                out[os.path.relpath(p, root)] = fh.read()
    return out


RERUN_CRITERIA = (1, 2, 4, 7, 8, 9, 10)


@_timed
def c12_determinism(seed=12, scale="full", threads=1, workdir=None) -> CriterionResult:
    import copy
    import shutil
    import tempfile
    from pathlib import Path

    from .cli import run
    from .config import parse

    tmp = None
    if workdir is None:
        tmp = tempfile.TemporaryDirectory()
        workdir = tmp.name
    workdir = Path(workdir)
    details, ok = {}, True
    worker_counts = (1, max(3, threads))
    for name, doc in determinism_configs(scale).items():
        trees, codes = [], []
        target = workdir / name
        for w in worker_counts + (1,):
            if target.exists():
                shutil.rmtree(target)
            d = copy.deepcopy(doc)
            d.setdefault("output", {})["directory"] = str(target)
            try:
                codes.append(run(parse(d), threads=w))
            except Exception as exc:  # recorded and compared like any other outcome
                codes.append(f"{type(exc).__name__}: {exc}")
            trees.append(_tree_bytes(target))
        same = (all(t == trees[0] for t in trees[1:]) and len(trees[0]) > 1
                and all(isinstance(c, int) for c in codes))
        details[name] = {"files": sorted(trees[0]), "identical": same, "exit_codes": codes}
        ok = ok and same
    n_commands = sum(v["identical"] for v in details.values() if isinstance(v, dict))
    # criterion runs themselves, serialised without wall-clock fields
    reruns = {}
    for k in RERUN_CRITERIA:
        blobs = []
        for w in worker_counts:
            d = CRITERIA[k](scale="quick", threads=w).to_dict(with_runtime=False)
            d["details"].pop("within_runtime", None)
            blobs.append(json.dumps(d, sort_keys=True, default=str))
        reruns[str(k)] = len(set(blobs)) == 1
        ok = ok and reruns[str(k)]
    details["criterion_reruns_identical"] = reruns
    details["worker_counts"] = list(worker_counts)
    details["commands_identical"] = n_commands
    details["criteria_identical"] = sum(reruns.values())
    details["_summary_keys"] = ["commands_identical", "criteria_identical", "worker_counts"]
    if tmp is not None:
        tmp.cleanup()
    return CriterionResult(12, "determinism", ok, details)


CRITERIA[12] = c12_determinism


def run_all(numbers=None, scale: str = "full", threads: int = 1, workdir=None) -> list[CriterionResult]:
    results = []
    for k in sorted(numbers or CRITERIA):
        if k not in CRITERIA:
            raise KeyError(f"no criterion {k}")
        if k == 12:
            results.append(CRITERIA[k](scale=scale, threads=threads, workdir=workdir))
        else:
            results.append(CRITERIA[k](scale=scale, threads=threads))
    return results
