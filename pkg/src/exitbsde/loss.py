"""Boundary and dynamical penalisation, path weights and Monte Carlo loss estimates."""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numba
import numpy as np

from .funclass import CandidateFunction
from .problems import ProblemSpec
from .simulate import (DEFAULT_CHUNK, CensoredPathError, GridPath, PathBatch, RefinedChunk, RefinedPath,
                       _check_h, default_max_steps, map_chunks, matvec, rng_provider, run_chunk,
                       start_points)

log = logging.getLogger(__name__)


class StepRangeError(IndexError):
    pass


class ThetaUnavailableError(ValueError):
    pass


# ---------------------------------------------------------------------------
# summands


def _coefficient_maps(U, problem, x1):
    v1, g1, H1 = U._eval(x1)
    mu = problem.drift(x1)
    sig = problem.diffusion(x1)
    return v1, g1, H1, mu, sig


def _two_point(U: CandidateFunction, problem: ProblemSpec, x1, x2, ds, dW, snapshot=None):
    """Batched ``L_{s1,s2}(U)(x1, x2)`` with ``ds = s2 - s1`` and ``dW = W_{s2} - W_{s1}``."""
    v1, g1, H1, mu, sig = snapshot if snapshot is not None else _coefficient_maps(U, problem, x1)
    v2 = U._value(x2)
    z = np.einsum("nji,nj->ni", sig, g1)
    sdw = matvec(sig, dW)
    Hmu = np.einsum("nij,nj->ni", H1, mu)
    Hsdw = np.einsum("nij,nj->ni", H1, sdw)
    StHS = np.einsum("nji,njk,nkl->nil", sig, H1, sig)
    trace = np.einsum("nii->n", StHS)
    out = v2 - v1
    out = out + problem.driver(x1, v1, z) * ds
    out = out - np.sum(g1 * sdw, axis=1)
    out = out - np.sum(Hmu * sdw, axis=1) * ds
    out = out - 0.5 * np.sum(sdw * Hsdw, axis=1)
    out = out + 0.5 * trace * ds
    return out


def two_point_loss(U, problem, s1, s2, x1, x2, dW):
    """General two-point penalisation; single points or batches."""
    s1 = np.asarray(s1, dtype=np.float64)
    s2 = np.asarray(s2, dtype=np.float64)
    if np.any(s2 < s1):
        raise ValueError("two_point_loss requires s1 <= s2")
    d = problem.dim
    single = np.ndim(x1) <= 1
    X1 = np.asarray(x1, dtype=np.float64).reshape(-1, d)
    X2 = np.asarray(x2, dtype=np.float64).reshape(-1, d)
    DW = np.asarray(dW, dtype=np.float64).reshape(-1, d)
    ds = np.broadcast_to(s2 - s1, (len(X1),))
    out = _two_point(U, problem, X1, X2, ds, DW)
    return float(out[0]) if single else out


def loss_summand(U, problem, path: GridPath, k: int) -> float:
    if not 0 <= k < path.exit_index:
        raise StepRangeError(f"step {k} outside [0, exit_index={path.exit_index})")
    return float(_two_point(U, problem, path.states[k:k + 1], path.states[k + 1:k + 2],
                            np.array([path.h]), path.increments[k:k + 1])[0])


def overlap_residual(U, problem, s1, s2, s3, x1, x3, w31, w23):
    """Compensating term ``R(s1, s2, s3; x1, x3)`` of the split of ``L_{s1,s2}`` at ``s3``.

    ``w31 = W_{s3} - W_{s1}``, ``w23 = W_{s2} - W_{s3}``. Batched.
    """
    def parts(x):
        v, g, H, mu, sig = _coefficient_maps(U, problem, x)
        z = np.einsum("nji,nj->ni", sig, g)
        f2 = problem.driver(x, v, z)
        f3 = z  # row vector grad^T sigma
        f4 = np.einsum("nj,njk,nkl->nl", mu, H, sig)
        f5 = 0.5 * np.einsum("nji,njk,nkl->nil", sig, H, sig)
        f6 = np.einsum("nii->n", f5)
        return f2, f3, f4, f5, f6

    a2, a3, a4, a5, a6 = parts(x1)
    b2, b3, b4, b5, b6 = parts(x3)
    d23 = s2 - s3
    d31 = s3 - s1
    quad = lambda u, M, v: np.einsum("ni,nij,nj->n", u, M, v)  # noqa: E731
    R = (a2 - b2) * d23
    R = R - np.sum((a3 - b3) * w23, axis=1)
    R = R - np.sum(((a4 - b4) * d23[:, None] + a4 * d31[:, None]) * w23, axis=1)
    R = R - np.sum(a4 * w31, axis=1) * d23
    R = R - (quad(w23, a5 - b5, w23) + quad(w23, a5, w31))
    R = R - quad(w31, a5, w23)
    R = R + (a6 - b6) * d23
    return R


@dataclass
class Decomposition:
    pre: np.ndarray
    post: np.ndarray
    R: np.ndarray
    summand: np.ndarray
    straddle: np.ndarray  # t < theta < t + h
    before: np.ndarray  # t < theta
    after: np.ndarray  # theta < t + h

    def recombined(self) -> np.ndarray:
        return (np.where(self.before, self.pre, 0.0) + np.where(self.after, self.post, 0.0)
                + np.where(self.straddle, self.R, 0.0))

    def violation(self) -> np.ndarray:
        return np.abs(self.recombined() - self.summand)


def _decompose(U, problem, h, t, theta, x_t, x_th, x_t1, dW, w_theta_rel):
    """Pre/post split at ``theta`` of the step ``[t, t+h]``; ``w_theta_rel = W_theta - W_t``."""
    n = len(t)
    before_all = t + h <= theta
    after_all = theta <= t
    straddle = ~before_all & ~after_all
    summand = _two_point(U, problem, x_t, x_t1, np.full(n, h), dW)
    zero_dw = np.zeros_like(dW)
    # collapsed segments L_{theta,theta}(x_theta, x_theta) are zero term by term
    collapsed = _two_point(U, problem, x_th, x_th, np.zeros(n), zero_dw)
    pre = np.where(before_all, summand, np.where(after_all, collapsed, 0.0))
    post = np.where(after_all, summand, np.where(before_all, collapsed, 0.0))
    R = np.zeros(n)
    if np.any(straddle):
        s = straddle
        pre[s] = _two_point(U, problem, x_t[s], x_th[s], theta[s] - t[s], w_theta_rel[s])
        post[s] = _two_point(U, problem, x_th[s], x_t1[s], t[s] + h - theta[s], dW[s] - w_theta_rel[s])
        R[s] = overlap_residual(U, problem, t[s], t[s] + h, theta[s], x_t[s], x_th[s],
                                w_theta_rel[s], dW[s] - w_theta_rel[s])
    return Decomposition(pre, post, R, summand, straddle, t < theta, theta < t + h)


def decomposition(U, problem, path: GridPath, refined: RefinedPath, k: int) -> tuple[float, float, float]:
    """``(pre, post, R)`` for grid step ``k`` split at the interpolation exit."""
    if not 0 <= k < path.exit_index:
        raise StepRangeError(f"step {k} outside [0, exit_index={path.exit_index})")
    if refined.censored or not np.isfinite(refined.theta_ref):
        raise ThetaUnavailableError("interpolation exit unavailable for this path")
    h = path.h
    t = np.array([k * h])
    theta = np.array([refined.theta_ref])
    if refined.theta_step == k:
        w_rel = refined.w_theta[None, :]
    else:
        # W_theta - W_t from the fine Brownian path (only used when the step straddles, i.e. never here)
        w_rel = np.zeros((1, path.dim))
    dec = _decompose(U, problem, h, t, theta, path.states[k:k + 1], refined.x_theta[None, :],
                     path.states[k + 1:k + 2], path.increments[k:k + 1], w_rel)
    return float(dec.pre[0]), float(dec.post[0]), float(dec.R[0])


def straddle_decomposition(U, problem, refined: RefinedChunk) -> Decomposition:
    """Decomposition of the straddling step of every usable path of a refined batch."""
    ok = np.isfinite(refined.theta) & refined.exited
    h = refined.h
    t = refined.theta_step[ok] * h
    return _decompose(U, problem, h, t.astype(np.float64), refined.theta[ok], refined.x_k_theta[ok],
                      refined.x_theta[ok], refined.x_k1_theta[ok], refined.dw_k_theta[ok], refined.w_theta[ok])


# ---------------------------------------------------------------------------
# per-path losses


@numba.njit(cache=True)
def grouped_neumaier(values, groups, n_groups):
    """Compensated sums of ``values`` per group, accumulated in array order."""
    s = np.zeros(n_groups)
    c = np.zeros(n_groups)
    for i in range(values.shape[0]):
        gi = groups[i]
        v = values[i]
        t = s[gi] + v
        if abs(s[gi]) >= abs(v):
            c[gi] += (s[gi] - t) + v
        else:
            c[gi] += (v - t) + s[gi]
        s[gi] = t
    return s + c


def _neumaier_update(s, c, idx, v):
    cur = s[idx]
    t = cur + v
    c[idx] += np.where(np.abs(cur) >= np.abs(v), (cur - t) + v, (v - t) + cur)
    s[idx] = t


def dynamical_loss(U, problem, path: GridPath) -> float:
    """Sum over steps before the discrete exit of squared summands."""
    if path.censored:
        log.warning("dynamical loss of a censored path (%d steps)", path.exit_index)
    K = path.exit_index
    if K == 0:
        return 0.0
    S = _two_point(U, problem, path.states[:K], path.states[1:K + 1], np.full(K, path.h), path.increments[:K])
    return float(grouped_neumaier(S**2, np.zeros(K, dtype=np.int64), 1)[0])


def boundary_loss(U, problem, path: GridPath) -> float:
    if path.censored:
        raise CensoredPathError("boundary loss undefined for a censored path")
    x = path.exit_state[None, :]
    return float((U._value(x) - problem.boundary(x))[0] ** 2)


# ---------------------------------------------------------------------------
# weights


@dataclass(frozen=True)
class Unit:
    lower_bound: float = 1.0

    def evaluate(self, tau_bar, exit_state=None):
        return np.ones(len(tau_bar))

    def to_dict(self):
        return {"type": "unit"}


@dataclass(frozen=True)
class ExpExitClamped:
    """``exp(rate * min(tau_bar, cap))``."""

    rate: float
    cap: float

    def __post_init__(self):
        if self.rate < 0 or not self.cap > 0:
            raise ValueError("ExpExitClamped needs rate >= 0 and cap > 0")

    @property
    def lower_bound(self) -> float:
        return 1.0

    @property
    def upper_bound(self) -> float:
        return math.exp(self.rate * self.cap)

    def evaluate(self, tau_bar, exit_state=None):
        return np.exp(self.rate * np.minimum(np.asarray(tau_bar, dtype=np.float64), self.cap))

    def to_dict(self):
        return {"type": "exp_exit_clamped", "rate": self.rate, "cap": self.cap}


@dataclass(frozen=True)
class ConstantPlus:
    """``ell + F(path)`` with a bounded non-negative path functional ``F``.

    ``functional``: ``"zero"`` or ``"exit_fraction"`` (``min(tau_bar, cap) / cap``).
    """

    ell: float
    functional: str = "zero"
    cap: float = 1.0

    def __post_init__(self):
        if not self.ell > 0:
            raise ValueError("ConstantPlus needs ell > 0")
        if self.functional not in ("zero", "exit_fraction"):
            raise ValueError(f"unknown path functional {self.functional!r}")

    @property
    def lower_bound(self) -> float:
        return self.ell

    def evaluate(self, tau_bar, exit_state=None):
        tau_bar = np.asarray(tau_bar, dtype=np.float64)
        if self.functional == "zero":
            return np.full(len(tau_bar), self.ell)
        return self.ell + np.minimum(tau_bar, self.cap) / self.cap

    def to_dict(self):
        return {"type": "constant_plus", "ell": self.ell, "functional": self.functional, "cap": self.cap}


PathWeight = Unit | ExpExitClamped | ConstantPlus


def weight_from_dict(doc: dict | None) -> PathWeight:
    if doc is None:
        return Unit()
    doc = dict(doc)
    kind = doc.pop("type", None)
    if kind == "unit" and not doc:
        return Unit()
    if kind == "exp_exit_clamped":
        return ExpExitClamped(**doc)
    if kind == "constant_plus":
        return ConstantPlus(**doc)
    raise ValueError(f"bad weight description {kind!r} {doc}")


# ---------------------------------------------------------------------------
# Monte Carlo estimate


@dataclass
class LossReport:
    n_paths: int
    boundary_mean: float
    boundary_se: float
    dynamical_mean: float
    dynamical_se: float
    weighted_total_mean: float
    weighted_total_se: float
    h: float
    seed: int
    weight: dict
    start: str
    n_censored: int = 0
    per_path: dict | None = field(default=None, repr=False)

    def to_dict(self, include_per_path: bool = False) -> dict:
        out = asdict(self)
        out.pop("per_path")
        if include_per_path and self.per_path is not None:
            out["per_path"] = {k: np.asarray(v).tolist() for k, v in self.per_path.items()}
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    def write_per_path_csv(self, path) -> None:
        if self.per_path is None:
            raise ValueError("report was built without per-path data")
        pp = self.per_path
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["path_id", "tau_bar", "boundary", "dynamical", "psi"])
            for row in zip(pp["path_id"], pp["tau_bar"], pp["boundary"], pp["dynamical"], pp["psi"]):
                w.writerow([int(row[0])] + [repr(float(v)) for v in row[1:]])


def _mean_se(v):
    n = len(v)
    return float(np.mean(v)), float(np.std(v, ddof=1) / math.sqrt(n)) if n > 1 else float("nan")


@dataclass
class PathLosses:
    path_ids: np.ndarray
    tau_bar: np.ndarray
    exit_state: np.ndarray
    exited: np.ndarray
    boundary: np.ndarray
    dynamical: np.ndarray


def path_losses(U, problem, h, n_paths, x0, seed, max_steps=None, chunk_size=DEFAULT_CHUNK,
                threads=1, first_path_id=0) -> PathLosses:
    """Per-path boundary and dynamical losses, streamed (paths are not stored)."""
    _check_h(h)
    max_steps = default_max_steps(h) if max_steps is None else int(max_steps)
    ids = np.arange(first_path_id, first_path_id + n_paths, dtype=np.uint64)
    d = problem.dim
    hs = None

    def one(a, b):
        pids = ids[a:b]
        starts = start_points(problem.domain, x0, seed, pids)
        s = np.zeros(len(pids))
        c = np.zeros(len(pids))

        def on_step(k, idx, xa, xn, dW):
            S = _two_point(U, problem, xa, xn, np.full(len(idx), h), dW)
            if not np.all(np.isfinite(S)):
                bad = pids[idx[~np.isfinite(S)]]
                raise ArithmeticError(f"non-finite loss summand at step {k} for path_ids {bad[:5].tolist()}")
            _neumaier_update(s, c, idx, S * S)

        res = run_chunk(problem, starts, h, pids, max_steps, rng_provider(seed, pids, d, h), on_step)
        bnd = (U._value(res.exit_state) - problem.boundary(res.exit_state)) ** 2
        bnd = np.where(res.exited, bnd, 0.0)
        return res, s + c, bnd

    parts = map_chunks(one, n_paths, chunk_size, threads)
    cat = lambda i, attr=None: np.concatenate([getattr(p[i], attr) if attr else p[i] for p in parts])  # noqa
    return PathLosses(path_ids=ids, tau_bar=cat(0, "exit_index") * h, exit_state=cat(0, "exit_state"),
                      exited=cat(0, "exited"), boundary=cat(2), dynamical=cat(1))


def batch_path_losses(U, problem, batch: PathBatch) -> PathLosses:
    """Per-path losses of stored transitions (same accumulation order as :func:`path_losses`)."""
    S = _two_point(U, problem, batch.t_x, batch.t_xn, np.full(len(batch.t_x), batch.h), batch.t_dW)
    dyn = grouped_neumaier(S * S, batch.t_path, len(batch))
    bnd = (U._value(batch.exit_state) - problem.boundary(batch.exit_state)) ** 2
    bnd = np.where(batch.exited, bnd, 0.0)
    return PathLosses(batch.path_ids, batch.tau_bar, batch.exit_state, batch.exited, bnd, dyn)


def report_from_losses(pl: PathLosses, weight: PathWeight, h: float, seed: int, start: str,
                       per_path: bool = False) -> LossReport:
    n = len(pl.path_ids)
    if n < 2:
        raise ValueError("n_paths must be at least 2")
    n_cens = int(np.sum(~pl.exited))
    if n_cens:
        log.warning("%d censored paths: boundary term set to zero for them", n_cens)
    psi = weight.evaluate(pl.tau_bar, pl.exit_state)
    wb = psi * pl.boundary
    wd = psi * pl.dynamical
    wt = psi * (pl.boundary + pl.dynamical)
    bm, bs = _mean_se(wb)
    dm, ds = _mean_se(wd)
    tm, ts = _mean_se(wt)
    pp = None
    if per_path:
        pp = {"path_id": pl.path_ids, "tau_bar": pl.tau_bar, "boundary": pl.boundary,
              "dynamical": pl.dynamical, "psi": psi}
    return LossReport(n_paths=n, boundary_mean=bm, boundary_se=bs, dynamical_mean=dm, dynamical_se=ds,
                      weighted_total_mean=tm, weighted_total_se=ts, h=h, seed=int(seed),
                      weight=weight.to_dict(), start=start, n_censored=n_cens, per_path=pp)


def _start_label(x0) -> str:
    return x0 if isinstance(x0, str) else "fixed:" + json.dumps(np.asarray(x0, dtype=float).reshape(-1).tolist())


def estimate_weighted_loss(U, problem, weight: PathWeight, h: float, n_paths: int, x0, seed: int,
                           max_steps=None, chunk_size=DEFAULT_CHUNK, threads=1, per_path=False) -> LossReport:
    """Monte Carlo estimate of ``E[psi * boundary]``, ``E[psi * dynamical]`` and their sum."""
    if n_paths < 2:
        raise ValueError("n_paths must be at least 2")
    pl = path_losses(U, problem, h, n_paths, x0, seed, max_steps, chunk_size, threads)
    return report_from_losses(pl, weight, h, seed, _start_label(x0), per_path)
