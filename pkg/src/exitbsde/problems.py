"""Semilinear elliptic Dirichlet problems and manufactured solutions.

Coefficient maps are batched: ``drift(x) -> (n, d)``, ``diffusion(x) -> (n, d, d)``,
``driver(x, y, z) -> (n,)``, ``boundary(x) -> (n,)`` for ``x`` of shape ``(n, d)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np
from scipy.stats import qmc

from .funclass import CandidateFunction, Polynomial, _batch
from .geometry import Ball, Domain, DomainError, Interval, domain_from_dict


@dataclass(frozen=True)
class DeclaredConstants:
    lipschitz_mu: float | None = None
    lipschitz_sigma: float | None = None
    lipschitz_f_y: float | None = None
    lipschitz_f_z: float | None = None
    ellipticity: float | None = None
    sup_mu: float | None = None
    sup_sigma: float | None = None
    # exponential-moment / exit-tail constants, recorded but not certifiable
    rho: float | None = None
    alpha: float | None = None
    beta: float | None = None
    # radius of the neighbourhood D + B_R where ellipticity and bounds are declared
    neighbourhood: float = 0.0


@dataclass(frozen=True)
class Nonlinearity:
    """A driver term ``nu(x, y, z)`` with partial derivatives in ``y`` and ``z``."""

    name: str
    fn: Callable
    dy: Callable
    dz: Callable


def _zero_nl():
    return Nonlinearity("none",
                        lambda x, y, z: np.zeros(len(x)),
                        lambda x, y, z: np.zeros(len(x)),
                        lambda x, y, z: np.zeros_like(z))


NONLINEARITIES: dict[str, Nonlinearity] = {
    "none": _zero_nl(),
    "sin_y": Nonlinearity("sin_y",
                          lambda x, y, z: np.sin(y),
                          lambda x, y, z: np.cos(y),
                          lambda x, y, z: np.zeros_like(z)),
    "tanh_z1": Nonlinearity("tanh_z1",
                            lambda x, y, z: 0.5 * np.tanh(z[:, 0]),
                            lambda x, y, z: np.zeros(len(x)),
                            lambda x, y, z: np.concatenate(
                                [0.5 / np.cosh(z[:, :1]) ** 2, np.zeros_like(z[:, 1:])], axis=1)),
}


@dataclass(frozen=True)
class ProblemSpec:
    name: str
    domain: Domain
    drift: Callable
    diffusion: Callable
    driver: Callable
    boundary: Callable
    exact_solution: CandidateFunction | None = None
    constants: DeclaredConstants = field(default_factory=DeclaredConstants)
    driver_dy: Callable | None = None
    driver_dz: Callable | None = None
    # mu and sigma do not depend on x; lets the reference path use a closed form
    constant_coefficients: bool = False
    description: str = ""

    @property
    def dim(self) -> int:
        return self.domain.dim

    def sigma_T_grad(self, x, grad):
        return np.einsum("nji,nj->ni", self.diffusion(x), grad)

    def df_dy(self, x, y, z, eps=1e-6):
        if self.driver_dy is not None:
            return self.driver_dy(x, y, z)
        return (self.driver(x, y + eps, z) - self.driver(x, y - eps, z)) / (2 * eps)

    def df_dz(self, x, y, z, eps=1e-6):
        if self.driver_dz is not None:
            return self.driver_dz(x, y, z)
        out = np.empty_like(z)
        for i in range(z.shape[1]):
            e = np.zeros_like(z)
            e[:, i] = eps
            out[:, i] = (self.driver(x, y, z + e) - self.driver(x, y, z - e)) / (2 * eps)
        return out


def _generator_batch(problem: ProblemSpec, x, v, g, H):
    mu = problem.drift(x)
    sig = problem.diffusion(x)
    a = np.einsum("nik,njk->nij", sig, sig)
    return np.sum(mu * g, axis=1) + 0.5 * np.einsum("nij,nji->n", a, H)


def apply_generator(problem: ProblemSpec, U: CandidateFunction, x):
    """``mu . grad U + 1/2 tr(sigma sigma^T hess U)``."""
    pts, single = _batch(x, problem.dim)
    if U.dim != problem.dim:
        raise ValueError("candidate and problem dimensions differ")
    v, g, H = U._eval(pts)
    out = _generator_batch(problem, pts, v, g, H)
    return float(out[0]) if single else out


def pde_residual(problem: ProblemSpec, U: CandidateFunction, x, check_domain: bool = True):
    """``L[U] + f(x, U, sigma^T grad U)``; zero where ``U`` solves the PDE."""
    pts, single = _batch(x, problem.dim)
    if check_domain and not np.all(problem.domain.contains(pts)):
        raise DomainError("pde_residual evaluated outside the open domain")
    v, g, H = U._eval(pts)
    out = _generator_batch(problem, pts, v, g, H) + problem.driver(pts, v, problem.sigma_T_grad(pts, g))
    return float(out[0]) if single else out


def manufactured(u_target: CandidateFunction, drift: Callable, diffusion: Callable,
                 nonlinearity: Nonlinearity | None, domain: Domain, name: str = "manufactured",
                 constants: DeclaredConstants | None = None, boundary_extension: str = "projection",
                 constant_coefficients: bool = False, description: str = "") -> ProblemSpec:
    """Problem whose exact solution is ``u_target``.

    ``f(x, y, z) = -L[u](x) + nu(x, y, z) - nu(x, u(x), sigma^T grad u(x))``.
    The boundary datum is ``u`` on the boundary; off the boundary it is
    extended either by ``u o projection`` (default, so that ``U = u`` still
    sees an overshoot mismatch at the discrete exit) or by ``u`` itself.
    """
    nl = nonlinearity or NONLINEARITIES["none"]
    proto = ProblemSpec(name, domain, drift, diffusion, lambda x, y, z: np.zeros(len(x)),
                        lambda x: np.zeros(len(x)))

    def _u_terms(x):
        v, g, H = u_target._eval(x)
        return v, proto.sigma_T_grad(x, g), _generator_batch(proto, x, v, g, H)

    def driver(x, y, z):
        uv, uz, Lu = _u_terms(x)
        return -Lu + nl.fn(x, y, z) - nl.fn(x, uv, uz)

    def driver_dy(x, y, z):
        return nl.dy(x, y, z)

    def driver_dz(x, y, z):
        return nl.dz(x, y, z)

    if boundary_extension == "projection":
        def boundary(x):
            return u_target._value(domain.boundary_projection(x))
    elif boundary_extension == "global":
        def boundary(x):
            return u_target._value(x)
    else:
        raise ValueError(f"unknown boundary extension {boundary_extension!r}")

    return ProblemSpec(name=name, domain=domain, drift=drift, diffusion=diffusion, driver=driver,
                       boundary=boundary, exact_solution=u_target,
                       constants=constants or DeclaredConstants(), driver_dy=driver_dy,
                       driver_dz=driver_dz, constant_coefficients=constant_coefficients,
                       description=description)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Check:
    name: str
    measured: float
    declared: float | None
    passed: bool | None  # None when nothing was declared


@dataclass
class ValidationReport:
    problem: str
    n_samples: int
    checks: list[Check]

    @property
    def passed(self) -> bool:
        return all(c.passed is not False for c in self.checks)

    def violations(self) -> list[Check]:
        return [c for c in self.checks if c.passed is False]

    def to_dict(self) -> dict:
        return {"problem": self.problem, "n_samples": self.n_samples, "passed": self.passed,
                "checks": [c.__dict__ for c in self.checks]}


def sobol_sampler(domain: Domain, seed: int = 0, enlarge: float = 0.0):
    """Scrambled Sobol points in ``domain + B_enlarge`` (closed)."""
    def sample(n: int) -> np.ndarray:
        lo, hi = domain.bounding_box()
        lo, hi = lo - enlarge, hi + enlarge
        sob = qmc.Sobol(domain.dim, scramble=True, seed=seed)
        out = np.empty((0, domain.dim))
        while len(out) < n:
            m = int(np.ceil(np.log2(4 * n)))
            pts = lo + (hi - lo) * sob.random_base2(m)
            pts = pts[domain.signed_distance(pts) <= enlarge]
            out = np.concatenate([out, pts])
        return out[:n]
    return sample


def _pairwise_quotient(fx: np.ndarray, x: np.ndarray) -> float:
    fx = fx.reshape(len(fx), -1)
    i, j = np.triu_indices(len(x), k=1)
    dx = np.sqrt(np.sum((x[i] - x[j]) ** 2, axis=1))
    df = np.sqrt(np.sum((fx[i] - fx[j]) ** 2, axis=1))
    ok = dx > 0
    return float(np.max(df[ok] / dx[ok])) if np.any(ok) else 0.0


def _check(name, measured, declared, upper=True, rtol=1e-9):
    if declared is None:
        return Check(name, float(measured), None, None)
    if upper:
        ok = measured <= declared * (1 + rtol) + rtol
    else:
        ok = measured >= declared * (1 - rtol) - rtol
    return Check(name, float(measured), float(declared), bool(ok))


def validate(problem: ProblemSpec, sampler=None, n_samples: int = 256,
             y_range: tuple[float, float] = (-1.0, 1.0), z_range: tuple[float, float] = (-1.0, 1.0),
             seed: int = 0) -> ValidationReport:
    """Sample-based check of declared Lipschitz, bound and ellipticity constants.

    Violations are report entries, not errors.
    """
    if n_samples < 2:
        raise ValueError("n_samples must be at least 2")
    c = problem.constants
    if sampler is None:
        sampler = sobol_sampler(problem.domain, seed=seed, enlarge=c.neighbourhood)
    x = np.asarray(sampler(n_samples), dtype=np.float64)
    d = problem.dim
    mu = problem.drift(x)
    sig = problem.diffusion(x)
    checks = [
        _check("lipschitz_mu", _pairwise_quotient(mu, x), c.lipschitz_mu),
        _check("lipschitz_sigma", _pairwise_quotient(sig, x), c.lipschitz_sigma),
        _check("sup_mu", np.max(np.linalg.norm(mu, axis=1)), c.sup_mu),
        _check("sup_sigma", np.max(np.sqrt(np.sum(sig**2, axis=(1, 2)))), c.sup_sigma),
    ]
    a = np.einsum("nik,njk->nij", sig, sig)
    checks.append(_check("ellipticity", np.min(np.linalg.eigvalsh(a)[:, 0]), c.ellipticity, upper=False))

    # f in y at fixed (x, z), and in z at fixed (x, y)
    rng = np.random.default_rng(seed)
    m = min(n_samples, 64)
    xs = x[:m]
    ys = np.linspace(y_range[0], y_range[1], 33)
    z0 = np.full((m, d), 0.5 * (z_range[0] + z_range[1]))
    q_y = 0.0
    for k in range(m):
        xk = np.repeat(xs[k:k + 1], len(ys), axis=0)
        fv = problem.driver(xk, ys, np.repeat(z0[k:k + 1], len(ys), axis=0))
        q_y = max(q_y, _pairwise_quotient(fv, ys[:, None]))
    zs = rng.uniform(z_range[0], z_range[1], size=(33, d))
    y0 = 0.5 * (y_range[0] + y_range[1])
    q_z = 0.0
    for k in range(m):
        xk = np.repeat(xs[k:k + 1], len(zs), axis=0)
        fv = problem.driver(xk, np.full(len(zs), y0), zs)
        q_z = max(q_z, _pairwise_quotient(fv, zs))
    checks.append(_check("lipschitz_f_y", q_y, c.lipschitz_f_y))
    checks.append(_check("lipschitz_f_z", q_z, c.lipschitz_f_z))

    u = problem.exact_solution
    if u is not None:
        inner = x[problem.domain.contains(x)]
        if len(inner):
            res = np.max(np.abs(pde_residual(problem, u, inner)))
            checks.append(_check("exact_solution_residual", res, 1e-9))
        if isinstance(problem.domain, Interval):
            bpts = np.array([[problem.domain.lo], [problem.domain.hi]])
        else:
            dirs = rng.normal(size=(64, d))
            bpts = problem.domain.boundary_projection(np.asarray(problem.domain.center) + dirs)
        mismatch = np.max(np.abs(u._value(bpts) - problem.boundary(bpts)))
        checks.append(_check("exact_solution_boundary", mismatch, 1e-9))
    return ValidationReport(problem.name, n_samples, checks)


# ---------------------------------------------------------------------------
# shipped problems


def _zero_drift(d):
    return lambda x: np.zeros((len(x), d))


def _identity_diffusion(d):
    eye = np.eye(d)
    return lambda x: np.broadcast_to(eye, (len(x), d, d)).copy()


def ball_quadratic(d: int, radius: float = 1.0) -> Polynomial:
    """``|x|^2 - r^2``."""
    E = np.vstack([2 * np.eye(d, dtype=np.int64), np.zeros((1, d), dtype=np.int64)])
    return Polynomial(E, [1.0] * d + [-radius**2], d)


def problem_p1(boundary_extension: str = "projection") -> ProblemSpec:
    """d=1 Brownian motion on (-1, 1), ``u = x^2 - 1``, ``f = -1`` (so ``u(x) = -E[tau^x]``)."""
    u = Polynomial([[2], [0]], [1.0, -1.0], 1)
    consts = DeclaredConstants(lipschitz_mu=0.0, lipschitz_sigma=0.0, lipschitz_f_y=0.0,
                               lipschitz_f_z=0.0, ellipticity=1.0, sup_mu=0.0, sup_sigma=1.0,
                               rho=1.0, alpha=2.0, beta=1.0, neighbourhood=0.5)
    return manufactured(u, _zero_drift(1), _identity_diffusion(1), None, Interval(-1.0, 1.0), "P1",
                        consts, boundary_extension=boundary_extension, constant_coefficients=True,
                        description="1d Brownian exit from (-1,1), u(x)=x^2-1")


def problem_p2(dim: int = 2, radius: float = 1.0, boundary_extension: str = "projection") -> ProblemSpec:
    if dim not in (2, 3):
        raise ValueError("P2 is shipped for dim 2 or 3")
    u = ball_quadratic(dim, radius)
    consts = DeclaredConstants(lipschitz_mu=0.0, lipschitz_sigma=0.0, lipschitz_f_y=0.0,
                               lipschitz_f_z=0.0, ellipticity=1.0, sup_mu=0.0,
                               sup_sigma=float(np.sqrt(dim)), rho=1.0, alpha=2.0, beta=1.0,
                               neighbourhood=0.5)
    return manufactured(u, _zero_drift(dim), _identity_diffusion(dim), None,
                        Ball((0.0,) * dim, radius), "P2", consts, boundary_extension=boundary_extension,
                        constant_coefficients=True,
                        description=f"{dim}d Brownian motion in a ball, u=|x|^2-r^2")


def p3_solution() -> Polynomial:
    """``x1^3 - 3 x1 x2^2 + |x|^2 - 1`` (nonzero third derivatives)."""
    return Polynomial.from_terms({(3, 0): 1.0, (1, 2): -3.0, (2, 0): 1.0, (0, 2): 1.0, (0, 0): -1.0}, 2)


def problem_p3(boundary_extension: str = "projection") -> ProblemSpec:
    """d=2 unit ball, ``mu = -x/2``, ``sigma = (1 + |x|^2/4) I``, cubic ``u``."""
    def drift(x):
        return -0.5 * x

    def diffusion(x):
        s = 1.0 + 0.25 * np.sum(x**2, axis=1)
        return s[:, None, None] * np.eye(2)[None]

    # bounds on D + B_{1/2}: |x| <= 1.5
    consts = DeclaredConstants(lipschitz_mu=0.5, lipschitz_sigma=float(np.sqrt(2) * 0.25 * 3.0),
                               lipschitz_f_y=0.0, lipschitz_f_z=0.0, ellipticity=1.0, sup_mu=0.75,
                               sup_sigma=float(np.sqrt(2) * (1 + 0.25 * 1.5**2)),
                               rho=1.0, alpha=2.0, beta=1.0, neighbourhood=0.5)
    return manufactured(p3_solution(), drift, diffusion, None, Ball((0.0, 0.0), 1.0), "P3", consts,
                        boundary_extension=boundary_extension,
                        description="2d ball, variable diffusion (1+|x|^2/4)I, drift -x/2, cubic u")


def problem_p4(dim: int = 2, radius: float = 1.0, boundary_extension: str = "projection") -> ProblemSpec:
    base = problem_p2(dim, radius)
    consts = replace(base.constants, lipschitz_f_y=1.0)
    return manufactured(base.exact_solution, base.drift, base.diffusion, NONLINEARITIES["sin_y"],
                        base.domain, "P4", consts, boundary_extension=boundary_extension,
                        constant_coefficients=True,
                        description=f"P2 ({dim}d) with driver nonlinearity sin(y)")


PROBLEMS = {"P1": problem_p1, "P2": problem_p2, "P3": problem_p3, "P4": problem_p4}


def get_problem(name: str, **kwargs) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; shipped: {sorted(PROBLEMS)}") from None
    return factory(**kwargs)


def _poly_from_doc(doc, dim) -> Polynomial:
    return Polynomial(np.asarray(doc["exponents"], dtype=np.int64).reshape(-1, dim),
                      doc["coefficients"], dim)


def problem_from_tables(doc: dict) -> ProblemSpec:
    """Manufactured problem from polynomial coefficient tables.

    ``{"dim", "domain", "drift": [poly]*d, "diffusion": [[poly]*d]*d, "solution": poly,
    "nonlinearity": name, "boundary_extension": ..., "constants": {...}}`` where
    ``poly = {"exponents": [[...], ...], "coefficients": [...]}``.
    """
    allowed = {"dim", "domain", "drift", "diffusion", "solution", "nonlinearity",
               "boundary_extension", "constants", "name"}
    unknown = set(doc) - allowed
    if unknown:
        raise ValueError(f"unknown keys in problem table: {sorted(unknown)}")
    d = int(doc["dim"])
    domain = domain_from_dict(doc["domain"])
    if domain.dim != d:
        raise ValueError("domain dimension differs from dim")
    drift_p = [_poly_from_doc(p, d) for p in doc["drift"]]
    diff_p = [[_poly_from_doc(p, d) for p in row] for row in doc["diffusion"]]
    if len(drift_p) != d or len(diff_p) != d or any(len(r) != d for r in diff_p):
        raise ValueError("drift needs d entries and diffusion d x d entries")

    def drift(x):
        return np.stack([p._value(x) for p in drift_p], axis=1)

    def diffusion(x):
        return np.stack([np.stack([p._value(x) for p in row], axis=1) for row in diff_p], axis=1)

    const = all(np.all(p.exponents == 0) for p in drift_p) and \
        all(np.all(p.exponents == 0) for row in diff_p for p in row)
    nl = NONLINEARITIES[doc.get("nonlinearity", "none")]
    consts = DeclaredConstants(**doc.get("constants", {}))
    return manufactured(_poly_from_doc(doc["solution"], d), drift, diffusion, nl, domain,
                        doc.get("name", "tables"), consts,
                        boundary_extension=doc.get("boundary_extension", "projection"),
                        constant_coefficients=const)
