"""Candidate functions with value, gradient and Hessian.

Every variant evaluates on a batch ``x`` of shape ``(n, d)`` and returns
``(n,)``, ``(n, d)`` and ``(n, d, d)`` arrays. A single point of shape ``(d,)``
gives a scalar, a vector and a matrix.
"""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Callable

import numba
import numpy as np
from scipy.stats import qmc

from .geometry import Ball, Domain, Interval

SCHEMA_VERSION = 1


class NumericOverflowError(ArithmeticError):
    pass


def _batch(x, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim <= 1:
        arr = arr.reshape(1, -1)
        single = True
    else:
        single = False
    if arr.ndim != 2 or arr.shape[1] != d:
        raise ValueError(f"expected points of dimension {d}, got shape {np.shape(x)}")
    return arr, single


class CandidateFunction:
    dim: int

    def _eval(self, x: np.ndarray):
        """Batched ``(value, grad, hess)``; subclasses override."""
        raise NotImplementedError

    def _value(self, x: np.ndarray) -> np.ndarray:
        return self._eval(x)[0]

    def value(self, x):
        pts, single = _batch(x, self.dim)
        v = self._value(pts)
        return float(v[0]) if single else v

    def grad(self, x):
        pts, single = _batch(x, self.dim)
        g = self._eval(pts)[1]
        return g[0] if single else g

    def hess(self, x):
        pts, single = _batch(x, self.dim)
        H = self._eval(pts)[2]
        return H[0] if single else H

    def eval_with_derivatives(self, x):
        """One coherent ``(value, grad, hess)`` snapshot."""
        pts, single = _batch(x, self.dim)
        v, g, H = self._eval(pts)
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(g)) and np.all(np.isfinite(H))):
            raise NumericOverflowError(f"non-finite output from {type(self).__name__}")
        if single:
            return float(v[0]), g[0], H[0]
        return v, g, H

    def __call__(self, x):
        return self.value(x)


class Polynomial(CandidateFunction):
    """Sum of monomials ``c * prod_i x_i**e_i``."""

    def __init__(self, exponents, coefficients, dim: int | None = None):
        E = np.asarray(exponents, dtype=np.int64)
        c = np.asarray(coefficients, dtype=np.float64).reshape(-1)
        if E.ndim == 1:
            E = E.reshape(-1, 1) if dim in (None, 1) else E.reshape(1, -1)
        if E.size == 0:
            E = np.zeros((0, dim or 1), dtype=np.int64)
        if dim is not None and E.shape[1] != dim:
            raise ValueError("exponent table width does not match dim")
        if E.shape[0] != c.shape[0]:
            raise ValueError("one coefficient per monomial required")
        if np.any(E < 0):
            raise ValueError("negative exponents")
        self.exponents = E
        self.coefficients = c
        self.dim = E.shape[1]
        self._dpoly: list[tuple[np.ndarray, np.ndarray]] | None = None
        self._d2poly: list[list[tuple[np.ndarray, np.ndarray]]] | None = None

    @classmethod
    def from_terms(cls, terms: dict[tuple[int, ...], float], dim: int) -> "Polynomial":
        keys = list(terms)
        return cls(np.array(keys, dtype=np.int64).reshape(len(keys), dim), [terms[k] for k in keys], dim)

    @staticmethod
    def _derive(E, c, i):
        mask = E[:, i] > 0
        E2 = E[mask].copy()
        c2 = c[mask] * E2[:, i]
        E2[:, i] -= 1
        return E2, c2

    def _tables(self):
        if self._dpoly is None:
            E, c = self.exponents, self.coefficients
            self._dpoly = [self._derive(E, c, i) for i in range(self.dim)]
            self._d2poly = [[self._derive(*self._dpoly[i], j) for j in range(self.dim)]
                            for i in range(self.dim)]
        return self._dpoly, self._d2poly

    @staticmethod
    def _evaluate(E, c, x):
        out = np.zeros(x.shape[0])
        if E.shape[0]:
            _poly_kernel(E, c, np.ascontiguousarray(x, dtype=np.float64), out)
        return out

    def _value(self, x):
        return self._evaluate(self.exponents, self.coefficients, x)

    def _eval(self, x):
        d1, d2 = self._tables()
        n, d = x.shape
        v = self._value(x)
        g = np.empty((n, d))
        H = np.empty((n, d, d))
        for i in range(d):
            g[:, i] = self._evaluate(*d1[i], x)
            for j in range(i, d):
                H[:, i, j] = self._evaluate(*d2[i][j], x)
                H[:, j, i] = H[:, i, j]
        return v, g, H

    def to_dict(self) -> dict:
        return {"version": SCHEMA_VERSION, "kind": "polynomial", "dim": self.dim,
                "exponents": self.exponents.tolist(), "coefficients": self.coefficients.tolist()}


def tanh_derivatives(z: np.ndarray):
    """tanh and its first three derivatives."""
    t = np.tanh(z)
    s = 1.0 - t * t
    return t, s, -2.0 * t * s, s * (6.0 * t * t - 2.0)


@numba.njit(cache=True)
def _poly_kernel(E, c, x, out):
    for n in range(x.shape[0]):
        acc = 0.0
        for t in range(E.shape[0]):
            m = c[t]
            for i in range(E.shape[1]):
                e = E[t, i]
                xi = x[n, i]
                for _ in range(e):
                    m *= xi
            acc += m
        out[n] = acc


@numba.njit(cache=True)
def _net_value_kernel(x, W1, b1, w2, b2, v):
    n, d = x.shape
    for r in range(n):
        acc = 0.0
        for j in range(W1.shape[0]):
            z = b1[j]
            for k in range(d):
                z += W1[j, k] * x[r, k]
            acc += w2[j] * np.tanh(z)
        v[r] = acc + b2


@numba.njit(cache=True)
def _net_eval_kernel(x, W1, b1, w2, b2, v, g, H):
    n, d = x.shape
    for r in range(n):
        acc = 0.0
        for i in range(d):
            g[r, i] = 0.0
            for k in range(d):
                H[r, i, k] = 0.0
        for j in range(W1.shape[0]):
            z = b1[j]
            for k in range(d):
                z += W1[j, k] * x[r, k]
            t = np.tanh(z)
            s = 1.0 - t * t
            acc += w2[j] * t
            c1 = w2[j] * s
            c2 = w2[j] * (-2.0 * t * s)
            for i in range(d):
                g[r, i] += c1 * W1[j, i]
                for k in range(d):
                    H[r, i, k] += c2 * W1[j, i] * W1[j, k]
        v[r] = acc + b2


@numba.njit(cache=True)
def _net_contract_kernel(x, cv, cg, cH, use_derivs, W1, b1, w2, gW1, gb1, gw2):
    n, d = x.shape
    m = W1.shape[0]
    cw = np.empty(d)
    b2 = 0.0
    for r in range(n):
        b2 += cv[r]
        for j in range(m):
            z = b1[j]
            for k in range(d):
                z += W1[j, k] * x[r, k]
            t = np.tanh(z)
            a1 = 1.0 - t * t
            a2 = -2.0 * t * a1
            a3 = a1 * (6.0 * t * t - 2.0)
            p = 0.0
            q = 0.0
            if use_derivs:
                for i in range(d):
                    p += W1[j, i] * cg[r, i]
                    acc = 0.0
                    for k in range(d):
                        acc += (cH[r, i, k] + cH[r, k, i]) * W1[j, k]
                    cw[i] = acc
                for i in range(d):
                    q += 0.5 * cw[i] * W1[j, i]
            inner = cv[r] * a1 + a2 * p + a3 * q
            gw2[j] += cv[r] * t + a1 * p + a2 * q
            gb1[j] += w2[j] * inner
            for i in range(d):
                extra = a1 * cg[r, i] + a2 * cw[i] if use_derivs else 0.0
                gW1[j, i] += w2[j] * (inner * x[r, i] + extra)
    return b2


class SingleHiddenLayerNet(CandidateFunction):
    """``U(x) = w2 . tanh(W1 x + b1) + b2``."""

    def __init__(self, W1, b1, w2, b2: float):
        self.W1 = np.array(W1, dtype=np.float64, ndmin=2)
        self.b1 = np.array(b1, dtype=np.float64).reshape(-1)
        self.w2 = np.array(w2, dtype=np.float64).reshape(-1)
        self.b2 = float(b2)
        m, d = self.W1.shape
        if self.b1.shape != (m,) or self.w2.shape != (m,):
            raise ValueError("inconsistent network shapes")
        self.dim = d
        self.width = m

    @property
    def n_params(self) -> int:
        return self.width * (self.dim + 2) + 1

    def params(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_params(cls, theta, width: int, dim: int) -> "SingleHiddenLayerNet":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (width * (dim + 2) + 1,):
            raise ValueError(f"parameter vector of length {theta.shape} does not fit width={width}, dim={dim}")
        md = width * dim
        return cls(theta[:md].reshape(width, dim), theta[md:md + width],
                   theta[md + width:md + 2 * width], theta[-1])

    @classmethod
    def init_random(cls, width: int, dim: int, rng: np.random.Generator, scale: float = 1.0):
        W1 = rng.normal(0.0, scale, size=(width, dim))
        b1 = rng.normal(0.0, scale, size=width)
        w2 = rng.normal(0.0, 1.0 / np.sqrt(width), size=width)
        return cls(W1, b1, w2, 0.0)

    def _value(self, x):
        v = np.empty(x.shape[0])
        _net_value_kernel(np.ascontiguousarray(x, dtype=np.float64), self.W1, self.b1, self.w2, self.b2, v)
        return v

    def _eval(self, x):
        n, d = x.shape
        v, g, H = np.empty(n), np.empty((n, d)), np.empty((n, d, d))
        _net_eval_kernel(np.ascontiguousarray(x, dtype=np.float64), self.W1, self.b1, self.w2, self.b2, v, g, H)
        return v, g, H

    def param_sensitivities(self, x: np.ndarray):
        """Derivatives of value, gradient and Hessian w.r.t. the flat parameters.

        Shapes ``(n, P)``, ``(n, P, d)``, ``(n, P, d, d)`` with the layout of
        :meth:`params`.
        """
        n, d = x.shape
        m = self.width
        W1, w2 = self.W1, self.w2
        _, a1, a2, a3 = tanh_derivatives(x @ W1.T + self.b1)
        a0 = np.tanh(x @ W1.T + self.b1)
        P = self.n_params
        dv = np.zeros((n, P))
        dg = np.zeros((n, P, d))
        dH = np.zeros((n, P, d, d))
        md = m * d
        sW, sb, sw = slice(0, md), slice(md, md + m), slice(md + m, md + 2 * m)
        eye = np.eye(d)
        wa1, wa2, wa3 = a1 * w2, a2 * w2, a3 * w2  # (n, m)
        # first layer weights, flat index j*d + k
        dv[:, sW] = (wa1[:, :, None] * x[:, None, :]).reshape(n, md)
        dg_W = (wa1[:, :, None, None] * eye[None, None, :, :]
                + wa2[:, :, None, None] * x[:, None, :, None] * W1[None, :, None, :])
        dg[:, sW, :] = dg_W.reshape(n, md, d)
        WW = W1[:, :, None] * W1[:, None, :]  # (m, d, d)
        term1 = (eye[None, :, :, None] * W1[:, None, None, :]
                 + W1[:, None, :, None] * eye[None, :, None, :])  # (m, k, i, l)
        dH_W = (wa2[:, :, None, None, None] * term1[None]
                + wa3[:, :, None, None, None] * x[:, None, :, None, None] * WW[None, :, None, :, :])
        dH[:, sW, :, :] = dH_W.reshape(n, md, d, d)
        dv[:, sb] = wa1
        dg[:, sb, :] = wa2[:, :, None] * W1[None]
        dH[:, sb, :, :] = wa3[:, :, None, None] * WW[None]
        dv[:, sw] = a0
        dg[:, sw, :] = a1[:, :, None] * W1[None]
        dH[:, sw, :, :] = a2[:, :, None, None] * WW[None]
        dv[:, -1] = 1.0
        return dv, dg, dH

    def contract_sensitivities(self, x, cv, cg=None, cH=None) -> np.ndarray:
        """``sum_n cv_n dv_n + cg_n . dg_n + cH_n : dH_n`` without forming the sensitivity arrays.

        Equal to contracting the output of :meth:`param_sensitivities`; costs
        ``O(n m d^2)`` instead of ``O(n P d^2)``.
        """
        n, d = x.shape
        m = self.width
        use = cg is not None or cH is not None
        cg = np.zeros((n, d)) if cg is None else np.ascontiguousarray(cg, dtype=np.float64)
        cH = np.zeros((n, d, d)) if cH is None else np.ascontiguousarray(cH, dtype=np.float64)
        gW1, gb1, gw2 = np.zeros((m, d)), np.zeros(m), np.zeros(m)
        gb2 = _net_contract_kernel(np.ascontiguousarray(x, dtype=np.float64),
                                   np.ascontiguousarray(cv, dtype=np.float64), cg, cH, use,
                                   self.W1, self.b1, self.w2, gW1, gb1, gw2)
        return np.concatenate([gW1.ravel(), gb1, gw2, [gb2]])

    def to_dict(self) -> dict:
        return {"version": SCHEMA_VERSION, "kind": "single_hidden_layer_net", "dim": self.dim,
                "width": self.width, "activation": "tanh",
                "W1": self.W1.ravel().tolist(), "b1": self.b1.tolist(),
                "w2": self.w2.tolist(), "b2": self.b2}


@dataclass(frozen=True)
class Perturbed(CandidateFunction):
    """``base + eps * bump``."""

    base: CandidateFunction
    eps: float
    bump: CandidateFunction

    def __post_init__(self):
        if self.base.dim != self.bump.dim:
            raise ValueError("base and bump dimensions differ")

    @property
    def dim(self) -> int:
        return self.base.dim

    def _value(self, x):
        return self.base._value(x) + self.eps * self.bump._value(x)

    def _eval(self, x):
        v0, g0, H0 = self.base._eval(x)
        v1, g1, H1 = self.bump._eval(x)
        return v0 + self.eps * v1, g0 + self.eps * g1, H0 + self.eps * H1


class ExactWrapper(CandidateFunction):
    """Closed-form function given by batched callables."""

    def __init__(self, dim: int, value: Callable, grad: Callable, hess: Callable, name: str = "exact"):
        self.dim = dim
        self._f, self._g, self._h = value, grad, hess
        self.name = name

    def _value(self, x):
        return np.asarray(self._f(x), dtype=np.float64)

    def _eval(self, x):
        return self._value(x), np.asarray(self._g(x), dtype=np.float64), np.asarray(self._h(x), dtype=np.float64)


def constant(c: float, dim: int) -> Polynomial:
    return Polynomial(np.zeros((1, dim), dtype=np.int64), [c], dim)


def gaussian_bump(center, width: float = 1.0) -> ExactWrapper:
    """``exp(-|x - center|^2 / width^2)``."""
    c = np.asarray(center, dtype=np.float64).reshape(-1)
    s2 = float(width) ** 2
    d = c.size

    def val(x):
        return np.exp(-np.sum((x - c) ** 2, axis=1) / s2)

    def grad(x):
        return (-2.0 / s2) * (x - c) * val(x)[:, None]

    def hess(x):
        y = x - c
        e = val(x)[:, None, None]
        return e * ((4.0 / s2**2) * y[:, :, None] * y[:, None, :] - (2.0 / s2) * np.eye(d))

    return ExactWrapper(d, val, grad, hess, name="gaussian_bump")


def from_dict(doc: dict) -> CandidateFunction:
    if doc.get("version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported candidate schema version {doc.get('version')!r}")
    kind = doc.get("kind")
    if kind == "polynomial":
        dim = int(doc["dim"])
        E = np.asarray(doc["exponents"], dtype=np.int64).reshape(-1, dim)
        return Polynomial(E, doc["coefficients"], dim)
    if kind == "single_hidden_layer_net":
        if doc.get("activation", "tanh") != "tanh":
            raise ValueError(f"unsupported activation {doc['activation']!r}")
        m, d = int(doc["width"]), int(doc["dim"])
        return SingleHiddenLayerNet(np.asarray(doc["W1"]).reshape(m, d), doc["b1"], doc["w2"], doc["b2"])
    raise ValueError(f"unknown candidate kind {kind!r}")


def save_json(U: CandidateFunction, path) -> None:
    with open(path, "w") as fh:
        json.dump(U.to_dict(), fh, indent=1)


def load_json(path) -> CandidateFunction:
    with open(path) as fh:
        return from_dict(json.load(fh))


# ---------------------------------------------------------------------------
# distance and derivative checks


@dataclass(frozen=True)
class DistanceEstimate:
    value: float
    argmax_point: np.ndarray
    n_samples: int
    refinement_levels: int


def _closed_domain_samples(domain: Domain, n: int, seed: int = 0) -> np.ndarray:
    """Nested low-discrepancy points covering the closed domain.

    A quarter of the budget goes to the boundary, the rest to the interior.
    """
    d = domain.dim
    n_bdry = max(2, n // 4)
    n_int = n - n_bdry
    sob = qmc.Sobol(d, scramble=True, seed=seed)
    m = int(np.ceil(np.log2(max(2 * n_int, 2))))
    cube = sob.random_base2(m + 1)
    lo, hi = domain.bounding_box()
    pts = lo + (hi - lo) * cube
    inside = domain.signed_distance(pts) <= 0
    interior = pts[inside][:n_int]
    if isinstance(domain, Interval):
        bdry = np.array([[domain.lo], [domain.hi]])
    else:
        c = np.asarray(domain.center)
        if d == 1:
            bdry = np.array([c - domain.radius, c + domain.radius])
        else:
            sob_b = qmc.Sobol(d, scramble=True, seed=seed + 1)
            with warnings.catch_warnings():
                warnings.filterwarnings("ignore", message=".*balance properties")
                z = qmc.MultivariateNormalQMC(np.zeros(d), engine=sob_b).random(n_bdry)
            bdry = c + domain.radius * z / np.linalg.norm(z, axis=1, keepdims=True)
    return np.concatenate([bdry, interior])


def _clip_to_closed(domain: Domain, x: np.ndarray) -> np.ndarray:
    sd = domain.signed_distance(x)
    out = x.copy()
    outside = sd > 0
    if np.any(outside):
        out[outside] = domain.boundary_projection(x[outside])
    return out


def _spectral_norm(A: np.ndarray) -> np.ndarray:
    # via A^T A so that the result is exactly invariant under A -> -A
    if A.shape[-1] == 1:
        return np.abs(A[..., 0, 0])
    AtA = np.einsum("nji,njk->nik", A, A)
    return np.sqrt(np.maximum(np.linalg.eigvalsh(AtA)[:, -1], 0.0))


def _pointwise_distance(U: CandidateFunction, V: CandidateFunction, x: np.ndarray) -> np.ndarray:
    vu, gu, Hu = U._eval(x)
    vv, gv, Hv = V._eval(x)
    return (np.abs(vu - vv) + np.sqrt(np.sum((gu - gv) ** 2, axis=1))
            + _spectral_norm(Hu - Hv))


def dnorm_distance(U: CandidateFunction, V: CandidateFunction, domain: Domain, budget: int = 1024,
                   refinement_levels: int = 4, seed: int = 0) -> DistanceEstimate:
    """Lower estimate of ``sup |U-V| + |grad(U-V)| + |hess(U-V)|`` over the closed domain."""
    if budget < 100:
        raise ValueError("budget must be at least 100")
    if U.dim != domain.dim or V.dim != domain.dim:
        raise ValueError("dimension mismatch")
    pts = _closed_domain_samples(domain, budget, seed)
    vals = _pointwise_distance(U, V, pts)
    best = int(np.argmax(vals))
    best_x, best_v = pts[best], float(vals[best])
    n_eval = len(pts)
    radius = domain.radius * 0.1
    local = qmc.Sobol(domain.dim, scramble=True, seed=seed + 2).random(32) * 2.0 - 1.0
    for _ in range(refinement_levels):
        cand = _clip_to_closed(domain, best_x + radius * local)
        cv = _pointwise_distance(U, V, cand)
        n_eval += len(cand)
        j = int(np.argmax(cv))
        if cv[j] > best_v:
            best_v, best_x = float(cv[j]), cand[j]
        radius *= 0.25
    return DistanceEstimate(best_v, np.array(best_x), n_eval, refinement_levels)


def sup_error(U: CandidateFunction, V: CandidateFunction, domain: Domain, n: int = 2001) -> float:
    """Sup of ``|U - V|`` on a fine grid (d=1) or low-discrepancy samples."""
    if domain.dim == 1:
        lo, hi = domain.bounding_box()
        x = np.linspace(lo[0], hi[0], n)[:, None]
    else:
        x = _closed_domain_samples(domain, n)
    return float(np.max(np.abs(U._value(x) - V._value(x))))


@dataclass
class FDReport:
    grad_deviation: float
    hess_deviation: float
    tolerance: float

    @property
    def max_deviation(self) -> float:
        return max(self.grad_deviation, self.hess_deviation)

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.tolerance


def fd_check(U: CandidateFunction, points, tol: float = 1e-6, rel_step: float = 1e-4) -> FDReport:
    """Analytic gradient vs differences of values, analytic Hessian vs differences of gradients.

    Fourth-order central stencils; step ``rel_step * max(1, |x_i|)``.
    Deviations are relative to ``max(1, max|reference|)`` per point.
    """
    x, _ = _batch(points, U.dim)
    if len(x) == 0:
        raise ValueError("no points")
    _, g, H = U._eval(x)
    n, d = x.shape
    g_fd = np.empty_like(g)
    H_fd = np.empty_like(H)
    grad_fn = lambda y: U._eval(y)[1]  # noqa: E731
    for i in range(d):
        step = rel_step * np.maximum(1.0, np.abs(x[:, i]))
        e = np.zeros_like(x)
        e[:, i] = step
        g_fd[:, i] = (-U._value(x + 2 * e) + 8 * U._value(x + e) - 8 * U._value(x - e)
                      + U._value(x - 2 * e)) / (12 * step)
        H_fd[:, :, i] = (-grad_fn(x + 2 * e) + 8 * grad_fn(x + e) - 8 * grad_fn(x - e)
                         + grad_fn(x - 2 * e)) / (12 * step[:, None])
    gs = np.maximum(1.0, np.max(np.abs(g_fd), axis=1))
    Hs = np.maximum(1.0, np.max(np.abs(H_fd), axis=(1, 2)))
    gdev = float(np.max(np.max(np.abs(g - g_fd), axis=1) / gs))
    hdev = float(np.max(np.max(np.abs(H - H_fd), axis=(1, 2)) / Hs))
    return FDReport(gdev, hdev, tol)


def third_derivative_bound(U: CandidateFunction, points, rel_step: float = 1e-4) -> float:
    """Max over ``points`` of the Frobenius norm of the third derivative (differences of Hessians)."""
    x, _ = _batch(points, U.dim)
    n, d = x.shape
    T = np.empty((n, d, d, d))
    for k in range(d):
        step = rel_step * np.maximum(1.0, np.abs(x[:, k]))
        e = np.zeros_like(x)
        e[:, k] = step
        T[..., k] = (U._eval(x + e)[2] - U._eval(x - e)[2]) / (2 * step[:, None, None])
    return float(np.max(np.sqrt(np.sum(T**2, axis=(1, 2, 3)))))


def taylor_remainders(U: CandidateFunction, x1, x2):
    """Second-order value remainder and first-order gradient remainder at expansion point ``x2``."""
    x1, _ = _batch(x1, U.dim)
    x2, _ = _batch(x2, U.dim)
    v1, g1, _ = U._eval(x1)
    v2, g2, H2 = U._eval(x2)
    dx = x1 - x2
    Hdx = np.einsum("nij,nj->ni", H2, dx)
    r_val = np.abs(v1 - v2 - np.sum(g2 * dx, axis=1) - 0.5 * np.sum(dx * Hdx, axis=1))
    r_grad = np.sqrt(np.sum((g1 - g2 - Hdx) ** 2, axis=1))
    return r_val, r_grad


def c2_norm(U: CandidateFunction, domain: Domain, budget: int = 512) -> float:
    """Empirical ``sup |U| + |grad U| + |hess U|`` over the closed domain."""
    zero = constant(0.0, U.dim)
    return dnorm_distance(U, zero, domain, budget=max(budget, 100), refinement_levels=0).value
