"""Smooth bounded domains: open balls and intervals.

All methods accept a single point of shape ``(d,)`` or a batch ``(n, d)``.
For intervals a bare scalar (or a 1-d array of scalars when ``batch`` data
is given as shape ``(n,)``) is also accepted.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class DomainError(ValueError):
    pass


def _as_points(x, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim == 0:
        if d != 1:
            raise DomainError(f"scalar point given for a {d}-dimensional domain")
        return arr.reshape(1, 1), True
    if arr.ndim == 1:
        if arr.shape[0] != d:
            raise DomainError(f"point of dimension {arr.shape[0]} given for a {d}-dimensional domain")
        return arr.reshape(1, d), True
    if arr.ndim == 2 and arr.shape[1] == d:
        return arr, False
    raise DomainError(f"expected points of dimension {d}, got array of shape {arr.shape}")


@dataclass(frozen=True)
class Ball:
    center: tuple[float, ...]
    radius: float
    _c: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        c = np.asarray(self.center, dtype=np.float64).reshape(-1)
        if c.size == 0:
            raise DomainError("ball center must have at least one coordinate")
        if not self.radius > 0:
            raise DomainError(f"radius must be positive, got {self.radius}")
        object.__setattr__(self, "center", tuple(float(v) for v in c))
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "_c", c)

    @property
    def dim(self) -> int:
        return self._c.size

    def signed_distance(self, x):
        pts, single = _as_points(x, self.dim)
        sd = np.sqrt(np.sum((pts - self._c) ** 2, axis=1)) - self.radius
        return float(sd[0]) if single else sd

    def contains(self, x):
        sd = self.signed_distance(x)
        return bool(sd < 0) if np.ndim(sd) == 0 else sd < 0

    def boundary_projection(self, x):
        pts, single = _as_points(x, self.dim)
        v = pts - self._c
        r = np.sqrt(np.sum(v**2, axis=1))
        if np.any(r == 0):
            raise DomainError("projection of the ball center onto the boundary is ambiguous")
        p = self._c + self.radius * v / r[:, None]
        return p[0] if single else p

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return self._c - self.radius, self._c + self.radius

    def to_dict(self) -> dict:
        return {"type": "ball", "center": list(self.center), "radius": self.radius}


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float

    def __post_init__(self):
        if not self.hi > self.lo:
            raise DomainError(f"interval requires lo < hi, got ({self.lo}, {self.hi})")
        object.__setattr__(self, "lo", float(self.lo))
        object.__setattr__(self, "hi", float(self.hi))

    dim = 1

    @property
    def center(self) -> tuple[float]:
        return (0.5 * (self.lo + self.hi),)

    @property
    def radius(self) -> float:
        return 0.5 * (self.hi - self.lo)

    def signed_distance(self, x):
        pts, single = _as_points(x, 1)
        y = pts[:, 0]
        sd = -np.minimum(y - self.lo, self.hi - y)
        return float(sd[0]) if single else sd

    def contains(self, x):
        sd = self.signed_distance(x)
        return bool(sd < 0) if np.ndim(sd) == 0 else sd < 0

    def boundary_projection(self, x):
        pts, single = _as_points(x, 1)
        y = pts[:, 0]
        mid = 0.5 * (self.lo + self.hi)
        if np.any(y == mid):
            raise DomainError("projection of the interval midpoint onto the boundary is ambiguous")
        p = np.where(y < mid, self.lo, self.hi)[:, None]
        return p[0] if single else p

    def bounding_box(self) -> tuple[np.ndarray, np.ndarray]:
        return np.array([self.lo]), np.array([self.hi])

    def to_dict(self) -> dict:
        return {"type": "interval", "lo": self.lo, "hi": self.hi}


Domain = Ball | Interval


def contains(domain: Domain, x):
    return domain.contains(x)


def signed_distance(domain: Domain, x):
    return domain.signed_distance(x)


def boundary_projection(domain: Domain, x):
    return domain.boundary_projection(x)


def domain_from_dict(spec: dict) -> Domain:
    spec = dict(spec)
    kind = spec.pop("type", None)
    if kind == "ball":
        keys = {"center", "radius"}
        if set(spec) != keys:
            raise DomainError(f"ball domain needs exactly {sorted(keys)}, got {sorted(spec)}")
        return Ball(tuple(spec["center"]), spec["radius"])
    if kind == "interval":
        keys = {"lo", "hi"}
        if set(spec) != keys:
            raise DomainError(f"interval domain needs exactly {sorted(keys)}, got {sorted(spec)}")
        return Interval(spec["lo"], spec["hi"])
    raise DomainError(f"unknown domain type {kind!r}")


def sample_uniform(domain: Domain, n: int, rng: np.random.Generator) -> np.ndarray:
    """Uniform points in the open domain by rejection from the bounding box."""
    lo, hi = domain.bounding_box()
    out = []
    have = 0
    while have < n:
        pts = rng.uniform(lo, hi, size=(2 * (n - have) + 8, domain.dim))
        pts = pts[domain.contains(pts)]
        out.append(pts)
        have += len(pts)
    return np.concatenate(out)[:n]
