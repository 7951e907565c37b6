"""Euler-Maruyama paths with first-exit detection and bridge-refined references.

Paths are simulated in vectorised chunks. Every Brownian increment is a pure
function of ``(seed, path_id, step)`` (see :mod:`exitbsde.rng`), so results do
not depend on chunking, ordering or the number of worker threads.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numba
import numpy as np
from scipy.special import ndtr

from .geometry import Ball, Interval
from .problems import ProblemSpec
from .rng import RngStream, standard_normals

log = logging.getLogger(__name__)

DEFAULT_CHUNK = 16384
BISECTION_ITERS = 50


class InvalidStartError(ValueError):
    pass


class SimulationNumericError(ArithmeticError):
    pass


class CensoredPathError(ValueError):
    pass


def default_max_steps(h: float) -> int:
    return int(math.ceil(50.0 / h))


def _check_h(h: float):
    if not 0.0 < h < 1.0:
        raise ValueError(f"stepsize must lie in (0, 1), got {h}")


def matvec(A: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Batched ``A @ v`` with a fixed summation order (bitwise batch-size independent)."""
    out = A[:, :, 0] * v[:, 0:1]
    for j in range(1, v.shape[1]):
        out = out + A[:, :, j] * v[:, j:j + 1]
    return out


def euler_step(problem: ProblemSpec, x: np.ndarray, h: float, dW: np.ndarray) -> np.ndarray:
    return x + problem.drift(x) * h + matvec(problem.diffusion(x), dW)


def start_points(domain, x0, seed: int, path_ids: np.ndarray) -> np.ndarray:
    """Fixed start ``x0`` or, for ``x0 == "uniform"``, counter-based uniform points in the domain."""
    n = len(path_ids)
    d = domain.dim
    if isinstance(x0, str):
        if x0 != "uniform":
            raise InvalidStartError(f"unknown start distribution {x0!r}")
        z = standard_normals(seed, "start", path_ids, 0, d + 1)
        u = ndtr(z[:, d])
        u = np.clip(u, 1e-12, 1 - 1e-12)
        if isinstance(domain, Interval):
            return (domain.lo + (domain.hi - domain.lo) * u)[:, None]
        dirs = z[:, :d] / np.linalg.norm(z[:, :d], axis=1, keepdims=True)
        r = domain.radius * u ** (1.0 / d)
        return np.asarray(domain.center) + r[:, None] * dirs
    pt = np.asarray(x0, dtype=np.float64).reshape(-1)
    if pt.shape != (d,):
        raise InvalidStartError(f"start point has dimension {pt.size}, domain has {d}")
    if not domain.contains(pt):
        raise InvalidStartError(f"start point {pt.tolist()} is not in the open domain")
    return np.repeat(pt[None, :], n, axis=0)


# ---------------------------------------------------------------------------
# single paths


@dataclass
class GridPath:
    x0: np.ndarray
    h: float
    increments: np.ndarray  # (K, d)
    states: np.ndarray  # (K + 1, d)
    exit_index: int
    exited: bool
    max_steps: int
    path_id: int | None = None
    seed: int | None = None

    @property
    def censored(self) -> bool:
        return not self.exited

    @property
    def tau_bar(self) -> float:
        return self.exit_index * self.h

    @property
    def exit_state(self) -> np.ndarray:
        return self.states[self.exit_index]

    @property
    def dim(self) -> int:
        return self.states.shape[1]

    def recompute_states(self, problem: ProblemSpec) -> np.ndarray:
        out = np.empty_like(self.states)
        out[0] = self.x0
        for k in range(len(self.increments)):
            out[k + 1] = euler_step(problem, out[k:k + 1], self.h, self.increments[k:k + 1])[0]
        return out


def simulate_path(problem: ProblemSpec, x0, h: float, rng: RngStream | None = None,
                  max_steps: int | None = None, increments=None) -> GridPath:
    """One Euler-Maruyama path stopped at the first grid exit.

    ``increments`` (test hook) overrides the generator for the first
    ``len(increments)`` steps.
    """
    _check_h(h)
    max_steps = default_max_steps(h) if max_steps is None else int(max_steps)
    if max_steps < 1:
        raise ValueError("max_steps must be at least 1")
    d = problem.dim
    x = np.asarray(x0, dtype=np.float64).reshape(-1)
    if x.shape != (d,):
        raise InvalidStartError(f"start point has dimension {x.size}, domain has {d}")
    if not problem.domain.contains(x):
        raise InvalidStartError(f"start point {x.tolist()} is not in the open domain")
    forced = None if increments is None else np.asarray(increments, dtype=np.float64).reshape(-1, d)
    if forced is None and rng is None:
        raise ValueError("either rng or increments must be given")
    states = [x.copy()]
    incs = []
    cur = x[None, :]
    exited = False
    for k in range(max_steps):
        if forced is not None and k < len(forced):
            dW = forced[k]
        elif rng is not None:
            dW = rng.increment(k, d, h)
        else:
            raise ValueError(f"injected increments exhausted at step {k} and no rng given")
        cur = euler_step(problem, cur, h, dW[None, :])
        if not np.all(np.isfinite(cur)):
            raise SimulationNumericError(f"non-finite state at step {k + 1}")
        incs.append(np.asarray(dW, dtype=np.float64))
        states.append(cur[0].copy())
        if not problem.domain.contains(cur[0]):
            exited = True
            break
    K = len(incs)
    if not exited:
        log.warning("path censored after %d steps without exit", max_steps)
    return GridPath(x0=x, h=h, increments=np.array(incs).reshape(K, d), states=np.array(states),
                    exit_index=K, exited=exited, max_steps=max_steps,
                    path_id=None if rng is None else rng.path_id,
                    seed=None if rng is None else rng.seed)


# ---------------------------------------------------------------------------
# vectorised chunks


IncrementProvider = Callable[[np.ndarray, int], np.ndarray]


def rng_provider(seed: int, path_ids: np.ndarray, d: int, h: float, block: int = 64) -> IncrementProvider:
    """Increments ``sqrt(h) * N(0, I)`` drawn in blocks of ``block`` steps per active path.

    Each variate depends only on ``(seed, path_id, step)``, so blocking does not
    change any value.
    """
    sq = math.sqrt(h)
    state = {"k0": -1, "rows": None, "cache": None}

    def provide(idx: np.ndarray, k: int) -> np.ndarray:
        if state["cache"] is None or k >= state["k0"] + block:
            rows = np.full(len(path_ids), -1, dtype=np.int64)
            rows[idx] = np.arange(len(idx))
            pids = np.repeat(path_ids[idx], block)
            steps = np.tile(np.arange(k, k + block, dtype=np.int64), len(idx))
            state.update(k0=k, rows=rows,
                         cache=(sq * standard_normals(seed, "simulate", pids, steps, d)).reshape(len(idx), block, d))
        r = state["rows"][idx]
        if np.any(r < 0):
            raise RuntimeError("increment requested for a path outside the active block")
        return state["cache"][r, k - state["k0"]]
    return provide


@dataclass
class ChunkResult:
    path_ids: np.ndarray
    x0: np.ndarray
    exit_index: np.ndarray
    exited: np.ndarray
    exit_state: np.ndarray

    def __len__(self):
        return len(self.path_ids)


StepCallback = Callable[[int, np.ndarray, np.ndarray, np.ndarray, np.ndarray], None]


def run_chunk(problem: ProblemSpec, x0: np.ndarray, h: float, path_ids: np.ndarray, max_steps: int,
              provider: IncrementProvider, on_step: StepCallback | None = None) -> ChunkResult:
    """Advance all paths of a chunk until exit or ``max_steps``.

    ``on_step(k, idx, x_k, x_{k+1}, dW_k)`` sees every step taken (``k < exit_index``).
    """
    n, d = x0.shape
    x = np.array(x0, dtype=np.float64)
    exit_index = np.full(n, max_steps, dtype=np.int64)
    exited = np.zeros(n, dtype=bool)
    active = np.arange(n)
    for k in range(max_steps):
        if len(active) == 0:
            break
        xa = x[active]
        dW = provider(active, k)
        xn = euler_step(problem, xa, h, dW)
        if not np.all(np.isfinite(xn)):
            bad = path_ids[active[~np.all(np.isfinite(xn), axis=1)]]
            raise SimulationNumericError(f"non-finite state at step {k + 1} for path_ids {bad[:5].tolist()}")
        if on_step is not None:
            on_step(k, active, xa, xn, dW)
        x[active] = xn
        out = ~problem.domain.contains(xn)
        if np.any(out):
            done = active[out]
            exit_index[done] = k + 1
            exited[done] = True
            active = active[~out]
    n_cens = int(np.sum(~exited))
    if n_cens:
        log.warning("%d of %d paths censored at max_steps=%d", n_cens, n, max_steps)
    return ChunkResult(path_ids, np.array(x0), exit_index, exited, x)


def _chunks(n_paths: int, chunk_size: int):
    return [(s, min(s + chunk_size, n_paths)) for s in range(0, n_paths, chunk_size)]


def map_chunks(fn, n_paths: int, chunk_size: int = DEFAULT_CHUNK, threads: int = 1):
    """Apply ``fn(start, stop)`` to fixed path chunks; results in chunk order."""
    spans = _chunks(n_paths, chunk_size)
    if threads <= 1 or len(spans) == 1:
        return [fn(a, b) for a, b in spans]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(lambda ab: fn(*ab), spans))


@dataclass
class PathBatch:
    """Stored transitions of many paths (step-major order)."""

    h: float
    seed: int
    path_ids: np.ndarray
    x0: np.ndarray
    exit_index: np.ndarray
    exited: np.ndarray
    exit_state: np.ndarray
    max_steps: int
    t_path: np.ndarray  # (N,) local path index of each transition
    t_step: np.ndarray  # (N,)
    t_x: np.ndarray  # (N, d)
    t_xn: np.ndarray  # (N, d)
    t_dW: np.ndarray  # (N, d)

    def __len__(self):
        return len(self.path_ids)

    @property
    def tau_bar(self) -> np.ndarray:
        return self.exit_index * self.h

    def path(self, i: int) -> GridPath:
        sel = np.nonzero(self.t_path == i)[0]
        sel = sel[np.argsort(self.t_step[sel], kind="stable")]
        states = np.vstack([self.x0[i:i + 1], self.t_xn[sel]])
        return GridPath(x0=self.x0[i].copy(), h=self.h, increments=self.t_dW[sel].copy(), states=states,
                        exit_index=int(self.exit_index[i]), exited=bool(self.exited[i]),
                        max_steps=self.max_steps, path_id=int(self.path_ids[i]), seed=self.seed)


def simulate_batch(problem: ProblemSpec, x0, h: float, n_paths: int, seed: int,
                   max_steps: int | None = None, first_path_id: int = 0,
                   chunk_size: int = DEFAULT_CHUNK, threads: int = 1) -> PathBatch:
    _check_h(h)
    max_steps = default_max_steps(h) if max_steps is None else int(max_steps)
    ids = np.arange(first_path_id, first_path_id + n_paths, dtype=np.uint64)
    d = problem.dim

    def one(a, b):
        pids = ids[a:b]
        starts = start_points(problem.domain, x0, seed, pids)
        rec = []

        def on_step(k, idx, xa, xn, dW):
            rec.append((idx, np.full(len(idx), k), xa, xn, dW))
        res = run_chunk(problem, starts, h, pids, max_steps, rng_provider(seed, pids, d, h), on_step)
        return res, rec, a

    parts = map_chunks(one, n_paths, chunk_size, threads)
    res = [p[0] for p in parts]
    cat = lambda arrs, shape: np.concatenate(arrs) if arrs else np.zeros(shape)  # noqa: E731
    t_path = cat([r[0] + off for _, recs, off in parts for r in recs], (0,)).astype(np.int64)
    return PathBatch(h=h, seed=seed, path_ids=ids, x0=np.concatenate([r.x0 for r in res]),
                     exit_index=np.concatenate([r.exit_index for r in res]),
                     exited=np.concatenate([r.exited for r in res]),
                     exit_state=np.concatenate([r.exit_state for r in res]), max_steps=max_steps,
                     t_path=t_path,
                     t_step=cat([r[1] for _, recs, _ in parts for r in recs], (0,)).astype(np.int64),
                     t_x=cat([r[2] for _, recs, _ in parts for r in recs], (0, d)),
                     t_xn=cat([r[3] for _, recs, _ in parts for r in recs], (0, d)),
                     t_dW=cat([r[4] for _, recs, _ in parts for r in recs], (0, d)))


# ---------------------------------------------------------------------------
# bridge refinement


@dataclass
class RefinedChunk:
    """Per-path exit data from the refined reference (arrays over the chunk)."""

    path_ids: np.ndarray
    h: float
    R: int
    exit_index: np.ndarray
    exited: np.ndarray
    exit_state: np.ndarray
    tau_ref: np.ndarray  # nan when the reference did not exit
    x_tau_ref: np.ndarray
    ref_exited: np.ndarray
    theta: np.ndarray  # first exit of the frozen-coefficient interpolation (nan if none)
    x_theta: np.ndarray
    w_theta: np.ndarray  # W_theta - W_{k h} for the straddle step k
    theta_step: np.ndarray  # grid step k with k h <= theta <= (k+1) h
    x_k_theta: np.ndarray  # coarse states and increment of that step
    x_k1_theta: np.ndarray
    dw_k_theta: np.ndarray
    # optional fine arrays for single-path inspection
    fine: list | None = None

    @property
    def tau_bar(self) -> np.ndarray:
        return self.exit_index * self.h

    @property
    def theta_plus(self) -> np.ndarray:
        return self.h * np.ceil(self.theta / self.h)

    def usable(self) -> np.ndarray:
        return self.exited & self.ref_exited & np.isfinite(self.theta)


def bridge_increments(seed: int, path_ids: np.ndarray, k: int, dW: np.ndarray, R: int, h: float) -> np.ndarray:
    """``R`` Brownian-bridge sub-increments of each ``dW`` (shape ``(n, R, d)``), summing to ``dW``."""
    n, d = dW.shape
    xi = standard_normals(seed, "refine", path_ids, k, R * d).reshape(n, R, d) * math.sqrt(h / R)
    return xi - ((xi.sum(axis=1) - dW) / R)[:, None, :]


def _bisect_exit(domain, a: np.ndarray, b: np.ndarray, iters: int = BISECTION_ITERS) -> np.ndarray:
    """Fraction ``lam`` in (0, 1] with ``a + lam (b - a)`` on or just outside the boundary."""
    lo = np.zeros(len(a))
    hi = np.ones(len(a))
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        p = a + mid[:, None] * (b - a)
        inside = domain.signed_distance(p) < 0
        lo = np.where(inside, mid, lo)
        hi = np.where(inside, hi, mid)
    return hi


def refine_chunk(problem: ProblemSpec, x0: np.ndarray, h: float, R: int, seed: int, path_ids: np.ndarray,
                 max_steps: int, provider: IncrementProvider | None = None,
                 record: bool = False) -> RefinedChunk:
    """Coarse scheme, frozen-coefficient interpolation and fine reference, advanced together.

    The fine reference refreshes coefficients every ``h / R`` and keeps running
    past the coarse exit (with the same increment stream) until it exits.
    """
    if R < 2 or R > 1024 or (R & (R - 1)):
        raise ValueError(f"refine factor must be a power of two in [2, 1024], got {R}")
    _check_h(h)
    n, d = x0.shape
    dom = problem.domain
    hf = h / R
    if provider is None:
        provider = rng_provider(seed, path_ids, d, h)
    xc = np.array(x0, dtype=np.float64)  # coarse state
    y = np.array(x0, dtype=np.float64)  # fine reference state
    exit_index = np.full(n, max_steps, dtype=np.int64)
    exited = np.zeros(n, dtype=bool)
    ref_exited = np.zeros(n, dtype=bool)
    tau_ref = np.full(n, np.nan)
    x_tau_ref = np.full((n, d), np.nan)
    theta = np.full(n, np.nan)
    x_theta = np.full((n, d), np.nan)
    w_theta = np.full((n, d), np.nan)
    theta_step = np.full(n, -1, dtype=np.int64)
    x_k_theta = np.full((n, d), np.nan)
    x_k1_theta = np.full((n, d), np.nan)
    dw_k_theta = np.full((n, d), np.nan)
    fine = [dict(W=[np.zeros(d)], XC=[x0[0].copy()], Y=[x0[0].copy()])] if record else None
    jj = np.arange(1, R + 1, dtype=np.float64)

    active = np.arange(n)
    for k in range(max_steps):
        if len(active) == 0:
            break
        dW = provider(active, k)
        delta = bridge_increments(seed, path_ids[active], k, dW, R, h)
        wf = np.cumsum(delta, axis=1)  # W_{kh + j hf} - W_{kh}, j = 1..R

        # coarse scheme and frozen-coefficient interpolation, while the coarse path is alive
        live = ~exited[active]
        if np.any(live):
            ia = active[live]
            xk = xc[ia]
            mu = problem.drift(xk)
            sig = problem.diffusion(xk)
            dWl = dW[live]
            xn = xk + mu * h + matvec(sig, dWl)
            if not np.all(np.isfinite(xn)):
                raise SimulationNumericError(f"non-finite coarse state at step {k + 1}")
            m = len(ia)
            wl = wf[live]
            xcf = (xk[:, None, :] + mu[:, None, :] * (jj * hf)[None, :, None]
                   + np.einsum("nij,nrj->nri", sig, wl))
            xcf[:, -1, :] = xn
            if record:
                fine[0]["XC"].extend(list(xcf[0]))
            need = np.isnan(theta[ia])
            if np.any(need):
                sd = dom.signed_distance(xcf[need].reshape(-1, d)).reshape(-1, R)
                hit = sd >= 0
                found = hit.any(axis=1)
                if np.any(found):
                    rows = np.nonzero(need)[0][found]
                    j = np.argmax(hit[found], axis=1)  # first fine index (0-based -> node j+1)
                    prev_x = np.where((j == 0)[:, None], xk[rows], xcf[rows, j - 1])
                    next_x = xcf[rows, j]
                    lam = _bisect_exit(dom, prev_x, next_x)
                    prev_w = np.where((j == 0)[:, None], 0.0, wl[rows, j - 1])
                    tgt = ia[rows]
                    theta[tgt] = (k * R + j + lam) * hf
                    x_theta[tgt] = prev_x + lam[:, None] * (next_x - prev_x)
                    w_theta[tgt] = prev_w + lam[:, None] * (wl[rows, j] - prev_w)
                    theta_step[tgt] = k
                    x_k_theta[tgt] = xk[rows]
                    x_k1_theta[tgt] = xn[rows]
                    dw_k_theta[tgt] = dWl[rows]
            xc[ia] = xn
            out = ~dom.contains(xn)
            exit_index[ia[out]] = k + 1
            exited[ia[out]] = True

        # fine reference
        rl = ~ref_exited[active]
        if np.any(rl):
            ir = active[rl]
            dl = delta[rl]
            if problem.constant_coefficients:
                y0 = y[ir]
                mu = problem.drift(y0)
                sig = problem.diffusion(y0)
                ys = (y0[:, None, :] + mu[:, None, :] * (jj * hf)[None, :, None]
                      + np.einsum("nij,nrj->nri", sig, np.cumsum(dl, axis=1)))
            else:
                ys = np.empty((len(ir), R, d))
                cur = y[ir]
                for j in range(R):
                    cur = cur + problem.drift(cur) * hf + matvec(problem.diffusion(cur), dl[:, j])
                    ys[:, j] = cur
            if not np.all(np.isfinite(ys)):
                raise SimulationNumericError(f"non-finite reference state in step {k + 1}")
            if record:
                fine[0]["Y"].extend(list(ys[0]))
            sd = dom.signed_distance(ys.reshape(-1, d)).reshape(-1, R)
            hit = sd >= 0
            found = hit.any(axis=1)
            if np.any(found):
                rows = np.nonzero(found)[0]
                j = np.argmax(hit[rows], axis=1)
                tgt = ir[rows]
                tau_ref[tgt] = (k * R + j + 1) * hf
                x_tau_ref[tgt] = ys[rows, j]
                ref_exited[tgt] = True
            y[ir] = ys[:, -1]
        if record:
            fine[0]["W"].extend(list(fine[0]["W"][-1] + wf[0]))
        active = active[~(exited[active] & ref_exited[active])]

    if record:
        fine = [{key: np.array(v) for key, v in fine[0].items()}]
    return RefinedChunk(path_ids=path_ids, h=h, R=R, exit_index=exit_index, exited=exited, exit_state=xc,
                        tau_ref=tau_ref, x_tau_ref=x_tau_ref, ref_exited=ref_exited, theta=theta,
                        x_theta=x_theta, w_theta=w_theta, theta_step=theta_step, x_k_theta=x_k_theta,
                        x_k1_theta=x_k1_theta, dw_k_theta=dw_k_theta, fine=fine)


@dataclass
class RefinedPath:
    parent: GridPath
    R: int
    sub_increments: np.ndarray  # (K * R, d) fine increments within the parent's steps
    fine_W: np.ndarray  # W on the fine grid, W_0 = 0, through the end of the reference run
    fine_xc: np.ndarray  # frozen-coefficient interpolation on the fine grid up to the coarse exit
    fine_ref: np.ndarray  # fine reference scheme states
    tau_ref: float
    theta_ref: float
    x_tau_ref: np.ndarray
    x_theta: np.ndarray
    w_theta: np.ndarray  # W_theta - W_{k h}, k = theta_step
    theta_step: int
    censored: bool

    @property
    def h(self) -> float:
        return self.parent.h

    @property
    def theta_plus(self) -> float:
        return self.h * math.ceil(self.theta_ref / self.h)


def refine_reference(path: GridPath, R: int, rng: RngStream | None = None, problem: ProblemSpec | None = None,
                     max_steps: int | None = None) -> RefinedPath:
    """Bridge refinement of a single stored path.

    The parent's increments are reused; steps beyond them (when the
    reference outlives the coarse path) come from ``rng``'s simulate stream.
    """
    if problem is None:
        raise ValueError("problem is required")
    if not path.exited:
        raise CensoredPathError("parent path is censored; no reference for exit statistics")
    if rng is None:
        if path.seed is None or path.path_id is None:
            raise ValueError("rng required for paths without a recorded stream")
        rng = RngStream(path.seed, path.path_id)
    d = path.dim
    incs = path.increments

    def provide(idx, k):
        if k < len(incs):
            return incs[k][None, :]
        return rng.increment(k, d, path.h)[None, :]

    ms = path.max_steps if max_steps is None else max_steps
    res = refine_chunk(problem, path.x0[None, :], path.h, R, rng.seed,
                       np.array([rng.path_id], dtype=np.uint64), ms, provide, record=True)
    if int(res.exit_index[0]) != path.exit_index:
        raise RuntimeError("refined coarse path disagrees with its parent")
    f = res.fine[0]
    W = f["W"]
    K = path.exit_index
    return RefinedPath(parent=path, R=R, sub_increments=np.diff(W[:K * R + 1], axis=0), fine_W=W,
                       fine_xc=f["XC"], fine_ref=f["Y"], tau_ref=float(res.tau_ref[0]),
                       theta_ref=float(res.theta[0]), x_tau_ref=res.x_tau_ref[0], x_theta=res.x_theta[0],
                       w_theta=res.w_theta[0], theta_step=int(res.theta_step[0]),
                       censored=not bool(res.ref_exited[0]))


def refine_batch(problem: ProblemSpec, x0, h: float, R: int, n_paths: int, seed: int,
                 max_steps: int | None = None, first_path_id: int = 0,
                 chunk_size: int = DEFAULT_CHUNK, threads: int = 1) -> RefinedChunk:
    """Refined references for many paths, streamed in chunks (no fine arrays kept)."""
    _check_h(h)
    max_steps = default_max_steps(h) if max_steps is None else int(max_steps)
    ids = np.arange(first_path_id, first_path_id + n_paths, dtype=np.uint64)

    def one(a, b):
        pids = ids[a:b]
        return refine_chunk(problem, start_points(problem.domain, x0, seed, pids), h, R, seed, pids, max_steps)

    parts = map_chunks(one, n_paths, chunk_size, threads)
    cat = lambda name: np.concatenate([getattr(p, name) for p in parts])  # noqa: E731
    return RefinedChunk(path_ids=ids, h=h, R=R, exit_index=cat("exit_index"), exited=cat("exited"),
                        exit_state=cat("exit_state"), tau_ref=cat("tau_ref"), x_tau_ref=cat("x_tau_ref"),
                        ref_exited=cat("ref_exited"), theta=cat("theta"), x_theta=cat("x_theta"),
                        w_theta=cat("w_theta"), theta_step=cat("theta_step"), x_k_theta=cat("x_k_theta"),
                        x_k1_theta=cat("x_k1_theta"), dw_k_theta=cat("dw_k_theta"))


# ---------------------------------------------------------------------------
# exit statistics


def mean_se(v: np.ndarray) -> tuple[float, float]:
    v = np.asarray(v, dtype=np.float64)
    if len(v) < 2:
        return float(np.mean(v)) if len(v) else float("nan"), float("nan")
    return float(np.mean(v)), float(np.std(v, ddof=1) / np.sqrt(len(v)))


@dataclass
class ExitTable:
    h: float
    n_used: int
    n_censored: int
    rows: dict = field(default_factory=dict)  # quantity -> (mean, se)

    def to_dict(self) -> dict:
        return {"h": self.h, "n_used": self.n_used, "n_censored": self.n_censored,
                "rows": {k: {"mean": m, "se": s} for k, (m, s) in self.rows.items()}}


def exit_statistics(refined: RefinedChunk, p_list=(1, 2)) -> ExitTable:
    """Means and standard errors of ``|tau - tau_bar|^p``, ``|X_tau - Xbar_taubar|^2``, ``(tau_bar - theta^+)^2``."""
    ok = refined.usable()
    if not np.any(ok):
        raise ValueError("no usable (exited, non-censored) refined paths")
    tb = refined.tau_bar[ok]
    diff = np.abs(refined.tau_ref[ok] - tb)
    rows = {}
    for p in p_list:
        rows[f"exit_error_p{p}"] = mean_se(diff**p)
    rows["space_error"] = mean_se(np.sum((refined.x_tau_ref[ok] - refined.exit_state[ok]) ** 2, axis=1))
    rows["theta_plus_gap_sq"] = mean_se((tb - refined.theta_plus[ok]) ** 2)
    rows["tau_ref"] = mean_se(refined.tau_ref[ok])
    rows["tau_bar"] = mean_se(tb)
    return ExitTable(h=refined.h, n_used=int(ok.sum()), n_censored=int((~ok).sum()), rows=rows)


def exit_tail(tau_bar: np.ndarray, horizon: int = 10) -> list[tuple[int, float]]:
    """Empirical ``P[tau_bar >= k]`` for integer ``k`` (evidence for exponential tails)."""
    return [(k, float(np.mean(tau_bar >= k))) for k in range(horizon + 1)]
