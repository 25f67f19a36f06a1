"""Time-varying convex feasible sets with exact Euclidean projections."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import kernels as K

__all__ = [
    "InfeasibleSetError",
    "ConstraintSet",
    "Ball",
    "Box",
    "InverterDisks",
    "Intersection",
    "project",
    "uniform_bound",
    "dykstra",
    "KernelSet",
]


class InfeasibleSetError(ValueError):
    """The feasible set is empty at the requested time step."""


@dataclass(frozen=True)
class KernelSet:
    """Flat encoding of a set for the compiled kernels (steps ``start..start+N-1``)."""

    code: int
    center: np.ndarray
    radius: float
    lo: np.ndarray
    hi: np.ndarray
    smax: np.ndarray
    pbar: np.ndarray

    def args(self):
        return (self.code, self.center, self.radius, self.lo, self.hi, self.smax, self.pbar)


class ConstraintSet:
    """Base class. Subclasses implement ``project``, ``contains`` and ``bound``."""

    dim: int

    def project(self, u, n: int = 0) -> np.ndarray:
        raise NotImplementedError

    def contains(self, u, n: int = 0, tol: float = 1e-9) -> bool:
        raise NotImplementedError

    def contains_many(self, U, n: int = 0, tol: float = 1e-9) -> np.ndarray:
        """Row-wise membership for an ``(k, d)`` array."""
        return np.array([self.contains(u, n, tol) for u in np.asarray(U, dtype=float)], dtype=bool)

    def bound(self) -> float:
        """``sup_n sup_{u in U_n} ||u||``."""
        raise NotImplementedError

    def bounding_box(self, n: int = 0):
        raise NotImplementedError

    def kernel_set(self, N: int, start: int = 0):
        """Kernel encoding, or ``None`` when only the Python path applies."""
        return None

    def _check_u(self, u):
        u = np.asarray(u, dtype=float)
        if u.shape != (self.dim,):
            raise ValueError(f"point has shape {u.shape}, expected ({self.dim},)")
        return u


def _dummy(d):
    return dict(center=np.zeros(d), radius=0.0, lo=np.zeros(d), hi=np.zeros(d), smax=np.zeros(0))


@dataclass(frozen=True)
class Ball(ConstraintSet):
    center: np.ndarray
    radius: float

    def __post_init__(self):
        c = np.asarray(self.center, dtype=float).ravel()
        c.setflags(write=False)
        object.__setattr__(self, "center", c)
        if not self.radius >= 0:
            raise InfeasibleSetError("ball radius must be nonnegative")

    @property
    def dim(self):
        return self.center.size

    def project(self, u, n=0):
        u = self._check_u(u)
        return K.project_batch_np(u[None], K.BALL, self.center, self.radius, None, None, None, None)[0]

    def contains(self, u, n=0, tol=1e-9):
        return bool(np.linalg.norm(np.asarray(u) - self.center) <= self.radius + tol)

    def contains_many(self, U, n=0, tol=1e-9):
        return np.linalg.norm(np.asarray(U, dtype=float) - self.center, axis=-1) <= self.radius + tol

    def bound(self):
        return float(np.linalg.norm(self.center) + self.radius)

    def bounding_box(self, n=0):
        return self.center - self.radius, self.center + self.radius

    def kernel_set(self, N, start=0):
        kw = _dummy(self.dim)
        kw.update(center=self.center.copy(), radius=float(self.radius))
        return KernelSet(K.BALL, pbar=np.zeros((N, 0)), **kw)


@dataclass(frozen=True)
class Box(ConstraintSet):
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.lo, dtype=float).ravel()
        hi = np.asarray(self.hi, dtype=float).ravel()
        if lo.shape != hi.shape:
            raise ValueError("lo and hi must have equal shapes")
        if np.any(lo > hi):
            raise InfeasibleSetError("box has lo > hi")
        lo.setflags(write=False)
        hi.setflags(write=False)
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", hi)

    @property
    def dim(self):
        return self.lo.size

    def project(self, u, n=0):
        return np.clip(self._check_u(u), self.lo, self.hi)

    def contains(self, u, n=0, tol=1e-9):
        u = np.asarray(u)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.hi + tol))

    def contains_many(self, U, n=0, tol=1e-9):
        U = np.asarray(U, dtype=float)
        return np.all((U >= self.lo - tol) & (U <= self.hi + tol), axis=-1)

    def bound(self):
        return float(np.linalg.norm(np.maximum(np.abs(self.lo), np.abs(self.hi))))

    def bounding_box(self, n=0):
        return self.lo.copy(), self.hi.copy()

    def kernel_set(self, N, start=0):
        kw = _dummy(self.dim)
        kw.update(lo=self.lo.copy(), hi=self.hi.copy())
        return KernelSet(K.BOX, pbar=np.zeros((N, 0)), **kw)


@dataclass(frozen=True)
class InverterDisks(ConstraintSet):
    """Product over agents of ``{(P, Q): P^2 + Q^2 <= s_i^2, 0 <= P <= pbar_i(n)}``.

    Points are stacked as ``[P_1..P_A, Q_1..Q_A]``. ``pbar`` is either one value
    per agent or an ``(N, A)`` schedule. A zero ``pbar`` collapses the agent's
    set to the segment ``{0} x [-s, s]``.
    """

    smax: np.ndarray
    pbar: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.smax, dtype=float).ravel()
        p = np.asarray(self.pbar, dtype=float)
        if p.ndim == 0:
            p = np.full(s.size, float(p))
        if p.shape[-1] != s.size or p.ndim > 2:
            raise ValueError("pbar must have one column per agent")
        if np.any(s < 0):
            raise InfeasibleSetError("inverter ratings must be nonnegative")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            bad = np.argwhere(p < 0)
            raise InfeasibleSetError(f"negative available power (first at index {bad[0].tolist() if bad.size else '?'})")
        s.setflags(write=False)
        p.setflags(write=False)
        object.__setattr__(self, "smax", s)
        object.__setattr__(self, "pbar", p)

    @property
    def n_agents(self):
        return self.smax.size

    @property
    def dim(self):
        return 2 * self.smax.size

    def pbar_at(self, n):
        if self.pbar.ndim == 1:
            return self.pbar
        if not 0 <= n < self.pbar.shape[0]:
            raise IndexError(f"available-power schedule has no step {n}")
        return self.pbar[n]

    def pbar_path(self, N, start=0):
        if self.pbar.ndim == 1:
            return np.tile(self.pbar, (N, 1))
        if start + N > self.pbar.shape[0]:
            raise IndexError(f"available-power schedule ends at step {self.pbar.shape[0]}")
        return np.array(self.pbar[start : start + N])

    def project(self, u, n=0):
        u = self._check_u(u)
        na = self.n_agents
        P, Q = K.inverter_project_np(u[:na], u[na:], self.smax, self.pbar_at(n))
        return np.concatenate([P, Q])

    def contains(self, u, n=0, tol=1e-9):
        u = np.asarray(u)
        na = self.n_agents
        P, Q = u[:na], u[na:]
        pb = self.pbar_at(n)
        return bool(np.all(P >= -tol) and np.all(P <= pb + tol) and np.all(P * P + Q * Q <= self.smax**2 + tol))

    def contains_many(self, U, n=0, tol=1e-9):
        U = np.asarray(U, dtype=float)
        na = self.n_agents
        P, Q = U[..., :na], U[..., na:]
        ok = (P >= -tol) & (P <= self.pbar_at(n) + tol) & (P * P + Q * Q <= self.smax**2 + tol)
        return np.all(ok, axis=-1)

    def bound(self):
        # (0, +-s) is always feasible, so each agent attains exactly s
        return float(np.linalg.norm(self.smax))

    def bounding_box(self, n=0):
        pb = np.minimum(self.pbar_at(n), self.smax)
        return np.concatenate([np.zeros(self.n_agents), -self.smax]), np.concatenate([pb, self.smax])

    def kernel_set(self, N, start=0):
        kw = _dummy(self.dim)
        kw.update(smax=self.smax.copy())
        return KernelSet(K.INVERTER, pbar=self.pbar_path(N, start), **kw)


def dykstra(sets: Sequence[ConstraintSet], u, n=0, tol=1e-10, max_iter=100_000):
    """Dykstra's alternating projections onto ``cap sets``."""
    x = np.asarray(u, dtype=float).copy()
    incs = [np.zeros_like(x) for _ in sets]
    for _ in range(max_iter):
        x_prev = x.copy()
        for i, s in enumerate(sets):
            y = s.project(x + incs[i], n)
            incs[i] = x + incs[i] - y
            x = y
        if np.linalg.norm(x - x_prev) < tol:
            break
    if not all(s.contains(x, n, tol=1e-6) for s in sets):
        raise InfeasibleSetError(f"intersection appears empty at step {n}")
    return x


@dataclass(frozen=True)
class Intersection(ConstraintSet):
    """Generic intersection, projected with Dykstra's method (Python path only)."""

    sets: tuple = field(default_factory=tuple)
    tol: float = 1e-10

    def __post_init__(self):
        sets = tuple(self.sets)
        if not sets:
            raise ValueError("intersection needs at least one set")
        if len({s.dim for s in sets}) != 1:
            raise ValueError("all sets must share a dimension")
        object.__setattr__(self, "sets", sets)

    @property
    def dim(self):
        return self.sets[0].dim

    def project(self, u, n=0):
        return dykstra(self.sets, self._check_u(u), n, self.tol)

    def contains(self, u, n=0, tol=1e-9):
        return all(s.contains(u, n, tol) for s in self.sets)

    def contains_many(self, U, n=0, tol=1e-9):
        out = self.sets[0].contains_many(U, n, tol)
        for s in self.sets[1:]:
            out &= s.contains_many(U, n, tol)
        return out

    def bound(self):
        # upper bound; exact only when one member dominates
        return min(s.bound() for s in self.sets)

    def bounding_box(self, n=0):
        boxes = [s.bounding_box(n) for s in self.sets]
        return np.max([b[0] for b in boxes], axis=0), np.min([b[1] for b in boxes], axis=0)


def project(cset: ConstraintSet, u, n: int = 0) -> np.ndarray:
    return cset.project(u, n)


def uniform_bound(cset: ConstraintSet) -> float:
    return cset.bound()
