"""Stepsize sweeps, log-log slope fits and statistical identity checks."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .funclass import CandidateFunction, Perturbed
from .loss import PathWeight, Unit, path_losses, report_from_losses
from .problems import ProblemSpec
from .rng import derive_seed
from .simulate import (DEFAULT_CHUNK, _check_h, default_max_steps, exit_statistics, map_chunks,
                       refine_batch, rng_provider, run_chunk, start_points)

log = logging.getLogger(__name__)

MAX_REL_SE = 0.10
SLOPE_TOLERANCE = 0.15
ZERO_TOL = 1e-20
DEFAULT_H_LIST = tuple(2.0**-k for k in range(4, 10))

# exponents of the upper bounds, keyed by quantity
TARGETS = {
    "boundary": {"unweighted": 0.25, "weighted": 0.125},
    "dynamical": {"unweighted": 1.25, "weighted": 1.25},
    "exit_error": {"unweighted": 0.5, "weighted": 0.5},
    "space_error": {"unweighted": 0.5, "weighted": 0.5},
    "theta_plus_gap_sq": {"unweighted": 0.5, "weighted": 0.5},
}


class InsufficientPrecisionError(RuntimeError):
    pass


@dataclass
class PowerLawFit:
    slope: float
    intercept: float
    r_squared: float
    used: np.ndarray


def fit_power_law(h, mean, se=None, max_rel_se: float = MAX_REL_SE) -> PowerLawFit:
    """OLS of ``log mean`` on ``log h`` over rows with relative SE at most ``max_rel_se``."""
    h = np.asarray(h, dtype=np.float64)
    mean = np.asarray(mean, dtype=np.float64)
    used = mean > 0
    if se is not None:
        se = np.asarray(se, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            used &= np.where(mean > 0, se / mean, np.inf) <= max_rel_se
    if used.sum() < 3:
        raise InsufficientPrecisionError(
            f"only {int(used.sum())} rows with relative SE <= {max_rel_se:.0%}; increase n_paths")
    x = np.log(h[used])
    y = np.log(mean[used])
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (intercept + slope * x)
    syy = np.sum((y - ym) ** 2)
    r2 = 1.0 if syy == 0 else float(1.0 - np.sum(resid**2) / syy)
    return PowerLawFit(slope, intercept, r2, used)


@dataclass
class RateTable:
    quantity: str
    rows: list[dict]  # h, estimate_mean, estimate_se, n_paths, used
    slope: float | None
    intercept: float | None
    r_squared: float | None
    target_exponent: float
    verdict: str  # "pass" | "fail" | "degenerate-zero" | "insufficient-precision"
    targets: dict = field(default_factory=dict)
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)

    def summary_json(self) -> str:
        d = {k: v for k, v in self.to_dict().items() if k != "rows"}
        return json.dumps(d, indent=1, sort_keys=True)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["h", "estimate_mean", "estimate_se", "n_paths", "used"])
        for r in self.rows:
            w.writerow([repr(r["h"]), repr(r["estimate_mean"]), repr(r["estimate_se"]), r["n_paths"],
                        int(r["used"])])
        return buf.getvalue()

    def long_rows(self) -> list[list]:
        return [[self.quantity, repr(r["h"]), repr(r["estimate_mean"]), repr(r["estimate_se"]), r["n_paths"]]
                for r in self.rows]


def write_long_csv(tables: list[RateTable], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["quantity", "h", "mean", "se", "n_paths"])
        for t in tables:
            w.writerows(t.long_rows())


def check_h_list(h_list) -> list[float]:
    hs = sorted({float(h) for h in h_list}, reverse=True)
    if len(hs) < 3:
        raise ValueError("h_list needs at least 3 distinct stepsizes")
    if hs[0] / hs[-1] < 4.0 - 1e-12:
        raise ValueError("h_list must span at least two dyadic octaves")
    for h in hs:
        _check_h(h)
    if hs[-1] < 2.0**-9:
        log.warning("stepsize %g below 2^-9: expect long runtimes", hs[-1])
    return hs


def make_table(quantity: str, hs, means, ses, ns, target: float, targets=None,
               tolerance: float = SLOPE_TOLERANCE) -> RateTable:
    rows = [{"h": h, "estimate_mean": m, "estimate_se": s, "n_paths": n, "used": False}
            for h, m, s, n in zip(hs, means, ses, ns)]
    if max(abs(m) for m in means) <= ZERO_TOL:
        return RateTable(quantity, rows, None, None, None, target, "degenerate-zero", targets or {},
                         "estimates vanish at every stepsize")
    try:
        fit = fit_power_law(hs, means, ses)
    except InsufficientPrecisionError as exc:
        return RateTable(quantity, rows, None, None, None, target, "insufficient-precision", targets or {},
                         str(exc))
    for r, u in zip(rows, fit.used):
        r["used"] = bool(u)
    verdict = "pass" if fit.slope >= target - tolerance else "fail"
    return RateTable(quantity, rows, fit.slope, fit.intercept, fit.r_squared, target, verdict, targets or {})


def _parse_quantity(q: str) -> tuple[str, int | None]:
    m = re.fullmatch(r"exit_error(?:\((\d+)\)|:(\d+))?", q)
    if m:
        return "exit_error", int(m.group(1) or m.group(2) or 1)
    if q in ("boundary", "dynamical", "space_error", "theta_plus_gap_sq"):
        return q, None
    raise ValueError(f"unknown rate quantity {q!r}")


def run_exit_study(problem: ProblemSpec, h_list, n_paths: int, x0, seed: int, R: int = 64,
                   p_list=(1,), max_steps=None, chunk_size=DEFAULT_CHUNK, threads=1) -> dict:
    """Exit-time/space errors per stepsize against the bridge-refined reference.

    Returns ``{"tables": {quantity: RateTable}, "per_h": [ExitTable dicts], "tail": ...}``.
    """
    hs = check_h_list(h_list)
    per_h = []
    tails = {}
    for h in hs:
        sub = derive_seed(seed, f"h={h!r}")
        ms = default_max_steps(h) if max_steps is None else max_steps
        ref = refine_batch(problem, x0, h, R, n_paths, sub, ms, chunk_size=chunk_size, threads=threads)
        per_h.append(exit_statistics(ref, p_list))
        tb = ref.tau_bar[ref.exited]
        tails[repr(h)] = [(k, float(np.mean(tb >= k))) for k in range(0, 11)]
    tables = {}
    names = [f"exit_error_p{p}" for p in p_list] + ["space_error", "theta_plus_gap_sq"]
    for name in names:
        base = "exit_error" if name.startswith("exit_error") else name
        tgt = TARGETS[base]["unweighted"]
        tables[name] = make_table(name, hs, [t.rows[name][0] for t in per_h], [t.rows[name][1] for t in per_h],
                                  [t.n_used for t in per_h], tgt, TARGETS[base])
    return {"tables": tables, "per_h": [t.to_dict() for t in per_h], "tail": tails,
            "reference": {"R": R, "n_censored": [t.n_censored for t in per_h]}}


def run_rate_study(problem: ProblemSpec, U: CandidateFunction | None, weight: PathWeight | None, h_list,
                   n_paths: int, x0, seed: int, quantity: str, R: int = 64, max_steps=None,
                   chunk_size=DEFAULT_CHUNK, threads=1) -> RateTable:
    kind, p = _parse_quantity(quantity)
    hs = check_h_list(h_list)
    if kind in ("exit_error", "space_error", "theta_plus_gap_sq"):
        res = run_exit_study(problem, hs, n_paths, x0, seed, R, (p or 1,), max_steps, chunk_size, threads)
        key = f"exit_error_p{p}" if kind == "exit_error" else kind
        return res["tables"][key]
    if U is None:
        raise ValueError(f"quantity {quantity!r} needs a candidate function")
    weight = weight or Unit()
    means, ses, ns = [], [], []
    for h in hs:
        sub = derive_seed(seed, f"h={h!r}")
        pl = path_losses(U, problem, h, n_paths, x0, sub, max_steps, chunk_size, threads)
        rep = report_from_losses(pl, weight, h, sub, str(x0))
        if kind == "boundary":
            means.append(rep.boundary_mean)
            ses.append(rep.boundary_se)
        else:
            means.append(rep.dynamical_mean)
            ses.append(rep.dynamical_se)
        ns.append(n_paths)
    wkey = "unweighted" if isinstance(weight, Unit) else "weighted"
    return make_table(kind, hs, means, ses, ns, TARGETS[kind][wkey], TARGETS[kind])


@dataclass
class PlateauRow:
    eps: float
    mean: float
    se: float


@dataclass
class PlateauTable:
    h: float
    rows: list[PlateauRow]
    ratios: list[dict]  # eps_lo, eps_hi, ratio, above_baseline

    def to_dict(self) -> dict:
        return {"h": self.h, "rows": [asdict(r) for r in self.rows], "ratios": self.ratios}


def plateau_study(problem: ProblemSpec, bump: CandidateFunction, eps_list, h: float, n_paths: int, x0,
                  seed: int, base: CandidateFunction | None = None, baseline_factor: float = 10.0,
                  max_steps=None, chunk_size=DEFAULT_CHUNK, threads=1) -> PlateauTable:
    """Dynamical loss of ``u + eps * bump`` on common random numbers, with doubling ratios."""
    base = base or problem.exact_solution
    if base is None:
        raise ValueError("plateau study needs the exact solution")
    eps_list = sorted(float(e) for e in eps_list)
    if len([e for e in eps_list if e > 0]) < 2:
        raise ValueError("need at least two positive eps values")
    if eps_list[0] != 0.0:
        eps_list = [0.0] + eps_list
    rows = []
    for e in eps_list:
        U = base if e == 0.0 else Perturbed(base, e, bump)
        pl = path_losses(U, problem, h, n_paths, x0, seed, max_steps, chunk_size, threads)
        m = float(np.mean(pl.dynamical))
        s = float(np.std(pl.dynamical, ddof=1) / math.sqrt(n_paths))
        rows.append(PlateauRow(e, m, s))
    baseline = rows[0].mean
    ratios = []
    for lo, hi in zip(rows[1:], rows[2:]):
        ratios.append({"eps_lo": lo.eps, "eps_hi": hi.eps, "eps_ratio": hi.eps / lo.eps,
                       "ratio": hi.mean / lo.mean if lo.mean > 0 else float("inf"),
                       "above_baseline": bool(lo.mean > baseline_factor * baseline)})
    return PlateauTable(h, rows, ratios)


# ---------------------------------------------------------------------------
# Wald identity on the grid


@dataclass(frozen=True)
class AFunctional:
    """Per-step functional ``A_k`` of Brownian increments.

    ``reads`` lists step offsets the functional looks at; only ``(0,)`` is
    adapted (``A_k`` measurable at ``(k+1) h`` and independent of the past).
    """

    name: str
    fn: Callable  # (dW window (n, len(reads), d), h) -> (n,)
    reads: tuple[int, ...] = (0,)


A_FUNCTIONALS = {
    "dw_sq": AFunctional("dw_sq", lambda w, h: np.sum(w[:, 0] ** 2, axis=1)),
    "const_h": AFunctional("const_h", lambda w, h: np.full(len(w), h)),
    "lookahead_dw_sq": AFunctional("lookahead_dw_sq", lambda w, h: np.sum(w[:, 0] ** 2, axis=1), (1,)),
}


@dataclass
class WaldReport:
    functional: str
    valid: bool
    h: float
    n_paths: int
    lhs_mean: float = float("nan")
    lhs_se: float = float("nan")
    rhs: float = float("nan")
    rhs_se: float = float("nan")
    mean_stop: float = float("nan")
    mean_a0: float = float("nan")
    combined_se: float = float("nan")
    z_score: float = float("nan")
    passed: bool = False
    note: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def wald_test(problem: ProblemSpec, h: float, functional: AFunctional | str, n_paths: int, x0, seed: int,
              max_steps=None, n_se: float = 3.0, chunk_size=DEFAULT_CHUNK, threads=1) -> WaldReport:
    """Compare ``E[sum_{t < tau_bar} A_t]`` with ``E[tau_bar] E[A_0] / h`` on the same paths."""
    A = A_FUNCTIONALS[functional] if isinstance(functional, str) else functional
    if tuple(A.reads) != (0,):
        return WaldReport(A.name, False, h, n_paths,
                          note=f"functional reads step offsets {A.reads}; not adapted, test invalid")
    _check_h(h)
    max_steps = default_max_steps(h) if max_steps is None else int(max_steps)
    ids = np.arange(n_paths, dtype=np.uint64)
    d = problem.dim

    def one(a, b):
        pids = ids[a:b]
        starts = start_points(problem.domain, x0, seed, pids)
        total = np.zeros(len(pids))
        comp = np.zeros(len(pids))
        a0 = np.zeros(len(pids))

        def on_step(k, idx, xa, xn, dW):
            v = A.fn(dW[:, None, :], h)
            if k == 0:
                a0[idx] = v
            t = total[idx] + v
            comp[idx] += np.where(np.abs(total[idx]) >= np.abs(v), (total[idx] - t) + v, (v - t) + total[idx])
            total[idx] = t

        res = run_chunk(problem, starts, h, pids, max_steps, rng_provider(seed, pids, d, h), on_step)
        return total + comp, a0, res.exit_index * h, res.exited

    parts = map_chunks(one, n_paths, chunk_size, threads)
    sums = np.concatenate([p[0] for p in parts])
    a0 = np.concatenate([p[1] for p in parts])
    stop = np.concatenate([p[2] for p in parts])
    exited = np.concatenate([p[3] for p in parts])
    n = n_paths
    lhs = float(sums.mean())
    lhs_se = float(sums.std(ddof=1) / math.sqrt(n))
    sbar, abar = float(stop.mean()), float(a0.mean())
    rhs = sbar * abar / h
    cov = np.cov(np.vstack([stop, a0]), ddof=1) / n
    var_rhs = (abar**2 * cov[0, 0] + sbar**2 * cov[1, 1] + 2 * sbar * abar * cov[0, 1]) / h**2
    rhs_se = float(math.sqrt(max(var_rhs, 0.0)))
    comb = math.sqrt(lhs_se**2 + rhs_se**2)
    diff = abs(lhs - rhs)
    if comb == 0.0:
        passed = diff <= 1e-12 * max(1.0, abs(lhs))
        z = 0.0 if passed else float("inf")
    else:
        z = diff / comb
        passed = z <= n_se
    note = "" if exited.all() else f"{int((~exited).sum())} censored paths included at the cap"
    return WaldReport(A.name, True, h, n, lhs, lhs_se, rhs, rhs_se, sbar, abar, comb, float(z), bool(passed), note)
