"""Quadratic stage costs and their exact expectation over the compliance law."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ComplianceModel, PlantModel, UnsupportedMomentsError, compliance_moments

__all__ = [
    "QuadraticForm",
    "StageObjective",
    "ExpectedQuadratic",
    "grad_gy",
    "grad_gx",
    "expected_quadratic",
    "expected_gradient",
]


def _as_ref(ref, dim):
    ref = np.zeros(dim) if ref is None else np.asarray(ref, dtype=float)
    if ref.ndim == 1 and ref.shape != (dim,):
        raise ValueError(f"reference has shape {ref.shape}, expected ({dim},)")
    if ref.ndim == 2 and ref.shape[1] != dim:
        raise ValueError(f"reference schedule has width {ref.shape[1]}, expected {dim}")
    if ref.ndim not in (1, 2):
        raise ValueError("reference must be a vector or an (N, dim) schedule")
    ref.setflags(write=False)
    return ref


@dataclass(frozen=True)
class QuadraticForm:
    """``z -> (z - ref_n)^T W (z - ref_n)`` with a constant or scheduled reference."""

    W: np.ndarray
    ref: np.ndarray = None

    def __post_init__(self):
        W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if W.shape[0] != W.shape[1]:
            raise ValueError("W must be square")
        if not np.allclose(W, W.T, atol=1e-12):
            raise ValueError("W must be symmetric")
        if np.linalg.eigvalsh(W).min() < -1e-12:
            raise ValueError("W must be positive semidefinite")
        W.setflags(write=False)
        object.__setattr__(self, "W", W)
        object.__setattr__(self, "ref", _as_ref(self.ref, W.shape[0]))

    @classmethod
    def zero(cls, dim):
        return cls(np.zeros((dim, dim)))

    @property
    def dim(self):
        return self.W.shape[0]

    @property
    def mu(self) -> float:
        """Strong-convexity modulus, ``lambda_min(2W)`` (0 when semidefinite)."""
        return max(float(2.0 * np.linalg.eigvalsh(self.W).min()), 0.0)

    @property
    def lipschitz(self) -> float:
        return float(2.0 * np.linalg.eigvalsh(self.W).max())

    def ref_at(self, n: int) -> np.ndarray:
        if self.ref.ndim == 1:
            return self.ref
        if not 0 <= n < self.ref.shape[0]:
            raise IndexError(f"reference schedule has no step {n}")
        return self.ref[n]

    def ref_path(self, N: int, start: int = 0) -> np.ndarray:
        if self.ref.ndim == 1:
            return np.tile(self.ref, (N, 1))
        if start + N > self.ref.shape[0]:
            raise IndexError(f"reference schedule ends at step {self.ref.shape[0]}")
        return np.array(self.ref[start : start + N])

    def value(self, z, n: int) -> float:
        e = np.asarray(z, dtype=float) - self.ref_at(n)
        return float(e @ self.W @ e)

    def grad(self, z, n: int) -> np.ndarray:
        return 2.0 * self.W @ (np.asarray(z, dtype=float) - self.ref_at(n))


@dataclass(frozen=True)
class StageObjective:
    """Per-step cost ``g_x(x) + g_y(y)`` plus optional ``eta/2 ||u||^2``.

    Semidefinite terms are allowed; ``semidefinite`` lists which terms fall
    short of strong convexity so callers can flag them.
    """

    g_y: QuadraticForm
    g_x: QuadraticForm
    eta: float = 0.0

    def __post_init__(self):
        if self.eta < 0:
            raise ValueError("eta must be >= 0")

    @classmethod
    def from_weights(cls, Wy, Wx, y_ref=None, x_ref=None, eta=0.0):
        return cls(QuadraticForm(Wy, y_ref), QuadraticForm(Wx, x_ref), float(eta))

    @property
    def mu_y(self):
        return self.g_y.mu

    @property
    def mu_x(self):
        return self.g_x.mu

    @property
    def L_g(self):
        return max(self.g_y.lipschitz, self.g_x.lipschitz)

    @property
    def semidefinite(self) -> tuple:
        return tuple(name for name, q in (("g_y", self.g_y), ("g_x", self.g_x)) if q.mu <= 0.0)

    def cost(self, x, y, n: int, u=None) -> float:
        c = self.g_x.value(x, n) + self.g_y.value(y, n)
        if self.eta and u is not None:
            c += 0.5 * self.eta * float(np.dot(u, u))
        return c


def grad_gy(obj: StageObjective, y, n: int) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    if y.shape != (obj.g_y.dim,):
        raise ValueError(f"y has shape {y.shape}, expected ({obj.g_y.dim},)")
    return obj.g_y.grad(y, n)


def grad_gx(obj: StageObjective, x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (obj.g_x.dim,):
        raise ValueError(f"x has shape {x.shape}, expected ({obj.g_x.dim},)")
    return obj.g_x.grad(x, n)


@dataclass(frozen=True)
class ExpectedQuadratic:
    """``E f(u) = 1/2 u^T H u + g_n^T u + c_n`` for diagonal/identity compliance."""

    H: np.ndarray
    obj: StageObjective
    plant: PlantModel
    Abar: np.ndarray

    def linear_terms(self, N: int, start: int = 0) -> np.ndarray:
        """``g_n`` for ``n = start .. start+N-1``, shape ``(N, d)``."""
        e = self.plant.offsets(N, start) - self.obj.g_y.ref_path(N, start)
        xr = self.obj.g_x.ref_path(N, start)
        M = self.Abar.T @ self.plant.C.T @ self.obj.g_y.W
        return 2.0 * e @ M.T - 2.0 * xr @ (self.Abar.T @ self.obj.g_x.W).T

    def constants(self, N: int, start: int = 0) -> np.ndarray:
        e = self.plant.offsets(N, start) - self.obj.g_y.ref_path(N, start)
        xr = self.obj.g_x.ref_path(N, start)
        return np.einsum("ni,ij,nj->n", e, self.obj.g_y.W, e) + np.einsum("ni,ij,nj->n", xr, self.obj.g_x.W, xr)

    def gradient(self, u, n: int) -> np.ndarray:
        return self.H @ np.asarray(u, dtype=float) + self.linear_terms(1, n)[0]

    def value(self, u, n: int) -> float:
        u = np.asarray(u, dtype=float)
        return float(0.5 * u @ self.H @ u + self.linear_terms(1, n)[0] @ u + self.constants(1, n)[0])

    def values(self, U, n: int) -> np.ndarray:
        """Vectorized ``E f`` over the rows of ``U``."""
        U = np.asarray(U, dtype=float)
        g = self.linear_terms(1, n)[0]
        return 0.5 * np.einsum("ki,ij,kj->k", U, self.H, U) + U @ g + self.constants(1, n)[0]


def expected_quadratic(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel) -> ExpectedQuadratic:
    if not compliance.is_diagonal:
        raise UnsupportedMomentsError("closed-form expectation needs identity or diagonal compliance")
    Abar, _, S = compliance_moments(compliance)
    C = plant.C
    My = C.T @ obj.g_y.W @ C
    H = 2.0 * My * S + 2.0 * obj.g_x.W * S + obj.eta * np.eye(compliance.dim)
    H = 0.5 * (H + H.T)
    H.setflags(write=False)
    return ExpectedQuadratic(H=H, obj=obj, plant=plant, Abar=Abar)


def expected_gradient(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, u, n: int) -> np.ndarray:
    """Exact ``grad_u E[f^(n)(u, phi)]`` (plus ``eta u``)."""
    return expected_quadratic(obj, compliance, plant).gradient(u, n)
