"""Networked-system model: compliance randomness, plant map, disturbances, sensors.

Agents receive a setpoint ``u`` and implement ``x = A(phi) u + b(phi)`` with an
i.i.d. random ``phi`` per step. The plant maps implemented inputs to outputs
``y = C x + D r_n`` where ``r_n`` is a deterministic exogenous disturbance.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .rng import RandomStream

__all__ = [
    "PhiDistribution",
    "ComplianceModel",
    "UnsupportedMomentsError",
    "Segment",
    "DisturbanceGenerator",
    "PlantModel",
    "MeasurementModel",
    "sample_compliance",
    "compliance_moments",
    "plant_output",
    "measure",
    "sigma_delta",
    "square_wave",
    "triangle_wave",
]


class UnsupportedMomentsError(ValueError):
    """Closed-form moments are not available for this compliance kind."""


# ---------------------------------------------------------------------------
# compliance


@dataclass(frozen=True)
class PhiDistribution:
    """Bounded-support law of one compliance coordinate.

    ``kind='uniform'`` draws from ``U[lo, hi]``; ``kind='beta'`` draws
    ``lo + (hi - lo) * Beta(a, b)``. Unbounded laws are rejected on purpose so
    every moment of ``A`` is finite.
    """

    kind: str = "uniform"
    lo: float = 0.0
    hi: float = 1.0
    a: float = 1.0
    b: float = 1.0

    def __post_init__(self):
        if self.kind not in ("uniform", "beta"):
            raise ValueError(f"unsupported phi distribution {self.kind!r} (bounded support only)")
        if not np.isfinite(self.lo) or not np.isfinite(self.hi) or self.hi < self.lo:
            raise ValueError(f"invalid support [{self.lo}, {self.hi}]")
        if self.kind == "beta" and (self.a <= 0 or self.b <= 0):
            raise ValueError("beta parameters must be positive")

    def sample(self, rng: RandomStream, size):
        if self.kind == "uniform":
            return rng.uniform(self.lo, self.hi, size)
        return self.lo + (self.hi - self.lo) * rng.beta(self.a, self.b, size)

    @property
    def mean(self) -> float:
        if self.kind == "uniform":
            return 0.5 * (self.lo + self.hi)
        return self.lo + (self.hi - self.lo) * self.a / (self.a + self.b)

    @property
    def second_moment(self) -> float:
        w = self.hi - self.lo
        if self.kind == "uniform":
            m1, m2 = 0.5, 1.0 / 3.0
        else:
            s = self.a + self.b
            m1 = self.a / s
            m2 = self.a * (self.a + 1.0) / (s * (s + 1.0))
        return self.lo**2 + 2.0 * self.lo * w * m1 + w**2 * m2

    @property
    def variance(self) -> float:
        return self.second_moment - self.mean**2

    @property
    def sup_abs(self) -> float:
        return max(abs(self.lo), abs(self.hi))

    def label(self) -> str:
        if self.kind == "uniform":
            return "Uniform"
        return f"Beta({self.a:g},{self.b:g})"


@dataclass(frozen=True)
class ComplianceModel:
    """Law of ``(A, b)`` mapping a setpoint to the implemented input.

    Parameters
    ----------
    dim : int
        Input dimension ``d``.
    kind : {'identity', 'diagonal', 'affine'}
        ``identity`` gives ``A = I, b = 0``. ``diagonal`` gives
        ``A = diag(phi), b = 0`` with ``phi`` i.i.d. per coordinate.
        ``affine`` delegates to ``sampler(rng) -> (A, b)``.
    phi : PhiDistribution, optional
        Coordinate law for the diagonal kind.
    active : sequence of bool, optional
        Diagonal kind only: coordinates marked False are always fully
        compliant (``phi_i = 1``).
    sampler : callable, optional
        Affine kind only.
    moments : tuple, optional
        Affine kind only: declared ``(Abar, bbar, second_moment_matrix)``.
    """

    dim: int
    kind: str = "identity"
    phi: Optional[PhiDistribution] = None
    active: Optional[tuple] = None
    sampler: Optional[Callable] = field(default=None, compare=False)
    moments: Optional[tuple] = field(default=None, compare=False)
    sup_norm: Optional[float] = None

    def __post_init__(self):
        if self.dim < 1:
            raise ValueError("dim must be >= 1")
        if self.kind not in ("identity", "diagonal", "affine"):
            raise ValueError(f"unknown compliance kind {self.kind!r}")
        if self.kind == "diagonal":
            if self.phi is None:
                raise ValueError("diagonal compliance needs a phi distribution")
            if self.active is not None:
                act = tuple(bool(a) for a in self.active)
                if len(act) != self.dim:
                    raise ValueError("active mask length must equal dim")
                object.__setattr__(self, "active", act)
        if self.kind == "affine":
            if self.sampler is None:
                raise ValueError("affine compliance needs a sampler")
            if self.sup_norm is None:
                raise ValueError("affine compliance needs a declared sup_norm bound on ||A||, ||b||")

    @classmethod
    def identity(cls, dim):
        return cls(dim=dim, kind="identity")

    @classmethod
    def diagonal(cls, dim, phi, active=None):
        return cls(dim=dim, kind="diagonal", phi=phi, active=active)

    @property
    def is_diagonal(self) -> bool:
        return self.kind in ("identity", "diagonal")

    @property
    def active_mask(self) -> np.ndarray:
        if self.kind != "diagonal":
            return np.zeros(self.dim, dtype=bool)
        if self.active is None:
            return np.ones(self.dim, dtype=bool)
        return np.asarray(self.active, dtype=bool)

    def sample_phi(self, rng: RandomStream, n: int) -> np.ndarray:
        """``n`` i.i.d. draws of the diagonal of ``A``, shape ``(n, dim)``."""
        if self.kind == "identity":
            return np.ones((n, self.dim))
        if self.kind != "diagonal":
            raise ValueError("sample_phi needs a diagonal compliance kind")
        mask = self.active_mask
        out = np.ones((n, self.dim))
        out[:, mask] = self.phi.sample(rng, (n, int(mask.sum())))
        return out

    def sample_many(self, rng: RandomStream, n: int):
        """Stack of ``n`` draws ``(A, b)`` with shapes ``(n, d, d)``, ``(n, d)``."""
        if self.is_diagonal:
            phi = self.sample_phi(rng, n)
            A = np.zeros((n, self.dim, self.dim))
            idx = np.arange(self.dim)
            A[:, idx, idx] = phi
            return A, np.zeros((n, self.dim))
        As, bs = zip(*(self.sampler(rng) for _ in range(n)))
        return np.asarray(As, dtype=float), np.asarray(bs, dtype=float)

    def mean_diag(self) -> np.ndarray:
        """Per-coordinate mean compliance; the fallback guess for recovery."""
        if self.kind == "identity":
            return np.ones(self.dim)
        if self.kind == "diagonal":
            out = np.ones(self.dim)
            out[self.active_mask] = self.phi.mean
            return out
        Abar = compliance_moments(self)[0]
        return np.diag(Abar).copy()

    def sup_A(self) -> float:
        """Almost-sure bound on the operator norm of ``A``."""
        if self.kind == "identity":
            return 1.0
        if self.kind == "diagonal":
            mask = self.active_mask
            return max(self.phi.sup_abs if mask.any() else 0.0, 1.0 if (~mask).any() else 0.0)
        return float(self.sup_norm)

    def sup_b(self) -> float:
        return float(self.sup_norm) if self.kind == "affine" else 0.0


def sample_compliance(model: ComplianceModel, rng: RandomStream):
    """One i.i.d. draw ``(A, b)``."""
    if model.kind == "affine":
        A, b = model.sampler(rng)
        return np.asarray(A, dtype=float), np.asarray(b, dtype=float)
    phi = model.sample_phi(rng, 1)[0]
    return np.diag(phi), np.zeros(model.dim)


def compliance_moments(model: ComplianceModel):
    """Closed-form ``(E[A], E[b], S)`` with ``S_ij = E[phi_i phi_j]``.

    Raises
    ------
    UnsupportedMomentsError
        For the affine kind without declared moments.
    """
    d = model.dim
    if model.kind == "identity":
        return np.eye(d), np.zeros(d), np.ones((d, d))
    if model.kind == "diagonal":
        mask = model.active_mask
        m = np.ones(d)
        s = np.ones(d)
        m[mask] = model.phi.mean
        s[mask] = model.phi.second_moment
        S = np.outer(m, m)
        np.fill_diagonal(S, s)
        return np.diag(m), np.zeros(d), S
    if model.moments is None:
        raise UnsupportedMomentsError("affine compliance has no declared moments")
    Abar, bbar, S = (np.asarray(v, dtype=float) for v in model.moments)
    return Abar, bbar, S


# ---------------------------------------------------------------------------
# disturbances


def square_wave(theta):
    return np.sign(np.sin(theta))


def triangle_wave(theta):
    return (2.0 / np.pi) * np.arcsin(np.sin(theta))


_SHAPES = {"sine": np.sin, "square": square_wave, "triangle": triangle_wave}


@dataclass(frozen=True)
class Segment:
    shape: str
    omega: tuple
    amplitude: tuple
    length: int

    def __post_init__(self):
        if self.shape not in _SHAPES:
            raise ValueError(f"unknown waveform shape {self.shape!r}")
        if self.length < 1:
            raise ValueError("segment length must be >= 1")
        object.__setattr__(self, "omega", tuple(float(w) for w in self.omega))
        object.__setattr__(self, "amplitude", tuple(float(a) for a in self.amplitude))
        if len(self.omega) != len(self.amplitude):
            raise ValueError("omega and amplitude must have equal length")


@dataclass(frozen=True)
class DisturbanceGenerator:
    """Deterministic disturbance ``r_n``: a constant, piecewise waveforms or a table."""

    kind: str = "constant"
    r: tuple = ()
    segments: tuple = ()
    table: Optional[np.ndarray] = field(default=None, compare=False)

    def __post_init__(self):
        if self.kind == "constant":
            object.__setattr__(self, "r", tuple(float(v) for v in self.r))
            if not self.r:
                raise ValueError("constant disturbance needs a vector r")
        elif self.kind == "waveform":
            segs = tuple(self.segments)
            if not segs:
                raise ValueError("waveform disturbance needs at least one segment")
            dims = {len(s.omega) for s in segs}
            if len(dims) != 1:
                raise ValueError("all segments must share a dimension")
            object.__setattr__(self, "segments", segs)
        elif self.kind == "table":
            tab = np.atleast_2d(np.asarray(self.table, dtype=float))
            if tab.size == 0 or not np.all(np.isfinite(tab)):
                raise ValueError("table disturbance needs a finite (N, dim) array")
            tab.setflags(write=False)
            object.__setattr__(self, "table", tab)
        else:
            raise ValueError(f"unknown disturbance kind {self.kind!r}")

    @classmethod
    def constant(cls, r):
        return cls(kind="constant", r=tuple(np.asarray(r, dtype=float).ravel()))

    @classmethod
    def waveform(cls, segments):
        return cls(kind="waveform", segments=tuple(segments))

    @classmethod
    def even_segments(cls, shapes, omega, amplitudes, horizon):
        """Split ``[0, horizon)`` into ``len(shapes)`` nearly equal segments."""
        k = len(shapes)
        edges = np.linspace(0, horizon, k + 1).round().astype(int)
        segs = [
            Segment(shape, tuple(omega), tuple(amp), int(edges[i + 1] - edges[i]))
            for i, (shape, amp) in enumerate(zip(shapes, amplitudes))
        ]
        return cls.waveform(segs)

    @classmethod
    def from_table(cls, values):
        """Row ``n`` of ``values`` is ``r_n``."""
        return cls(kind="table", table=values)

    @property
    def dim(self) -> int:
        if self.kind == "table":
            return self.table.shape[1]
        return len(self.r) if self.kind == "constant" else len(self.segments[0].omega)

    @property
    def total_length(self) -> Optional[int]:
        if self.kind == "constant":
            return None
        if self.kind == "table":
            return self.table.shape[0]
        return sum(s.length for s in self.segments)

    def values(self, N: int, start: int = 0) -> np.ndarray:
        """Disturbances for steps ``start .. start+N-1``, shape ``(N, dim)``."""
        if self.kind == "constant":
            return np.tile(np.asarray(self.r), (N, 1))
        total = self.total_length
        if start < 0 or start + N > total:
            raise IndexError(f"steps [{start}, {start + N}) outside the disturbance horizon {total}")
        if self.kind == "table":
            return np.array(self.table[start : start + N])
        n = np.arange(start, start + N)
        out = np.empty((N, self.dim))
        lo = 0
        for seg in self.segments:
            hi = lo + seg.length
            sel = (n >= lo) & (n < hi)
            if sel.any():
                # phase uses 1-based time
                t = (n[sel] + 1.0)[:, None]
                out[sel] = np.asarray(seg.amplitude) * _SHAPES[seg.shape](t * np.asarray(seg.omega))
            lo = hi
        return out

    def at(self, n: int) -> np.ndarray:
        return self.values(1, start=n)[0]

    def sup_norm(self) -> float:
        if self.kind == "constant":
            return float(np.linalg.norm(self.r))
        if self.kind == "table":
            return float(np.linalg.norm(self.table, axis=1).max())
        return max(float(np.linalg.norm(s.amplitude)) for s in self.segments)


# ---------------------------------------------------------------------------
# plant and sensors


@dataclass(frozen=True)
class PlantModel:
    """Affine output map ``y = C x + D r_n``."""

    C: np.ndarray
    D: np.ndarray
    disturbance: DisturbanceGenerator

    def __post_init__(self):
        C = np.atleast_2d(np.asarray(self.C, dtype=float))
        D = np.atleast_2d(np.asarray(self.D, dtype=float))
        if C.shape[0] != D.shape[0]:
            raise ValueError(f"C has {C.shape[0]} rows but D has {D.shape[0]}")
        if D.shape[1] != self.disturbance.dim:
            raise ValueError(f"D has {D.shape[1]} columns but r_n has dimension {self.disturbance.dim}")
        C.setflags(write=False)
        D.setflags(write=False)
        object.__setattr__(self, "C", C)
        object.__setattr__(self, "D", D)

    @property
    def dim_x(self) -> int:
        return self.C.shape[1]

    @property
    def dim_y(self) -> int:
        return self.C.shape[0]

    def offsets(self, N: int, start: int = 0) -> np.ndarray:
        """``D r_n`` for ``n = start .. start+N-1``, shape ``(N, m)``."""
        return self.disturbance.values(N, start) @ self.D.T


def plant_output(plant: PlantModel, x, n: int) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.shape != (plant.dim_x,):
        raise ValueError(f"x has shape {x.shape}, expected ({plant.dim_x},)")
    return plant.C @ x + plant.D @ plant.disturbance.at(n)


def _gaussian_fourth_root(cov) -> float:
    # E||w||^4 = tr(S)^2 + 2 tr(S^2) for w ~ N(0, S)
    cov = np.asarray(cov, dtype=float)
    return float((np.trace(cov) ** 2 + 2.0 * np.trace(cov @ cov)) ** 0.25)


def _check_cov(cov, name):
    if cov is None:
        return None
    cov = np.atleast_2d(np.asarray(cov, dtype=float))
    if cov.shape[0] != cov.shape[1] or not np.allclose(cov, cov.T):
        raise ValueError(f"{name} covariance must be square and symmetric")
    if np.linalg.eigvalsh(cov).min() < -1e-12:
        raise ValueError(f"{name} covariance must be positive semidefinite")
    cov.setflags(write=False)
    return cov


@dataclass(frozen=True)
class MeasurementModel:
    """Additive Gaussian sensor noise on ``x`` and/or ``y`` (``None`` = exact).

    ``declared_epsilon_m`` overrides the computed noise radius when given.
    """

    y_cov: Optional[np.ndarray] = None
    x_cov: Optional[np.ndarray] = None
    declared_epsilon_m: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "y_cov", _check_cov(self.y_cov, "y"))
        object.__setattr__(self, "x_cov", _check_cov(self.x_cov, "x"))
        if self.declared_epsilon_m is not None and self.declared_epsilon_m < 0:
            raise ValueError("epsilon_m must be nonnegative")

    @property
    def epsilon_m(self) -> float:
        """Fourth-moment radius ``(E||w||^4)^(1/4)``, max over both channels."""
        if self.declared_epsilon_m is not None:
            return float(self.declared_epsilon_m)
        vals = [_gaussian_fourth_root(c) for c in (self.y_cov, self.x_cov) if c is not None]
        return max(vals) if vals else 0.0

    @property
    def noiseless(self) -> bool:
        return self.y_cov is None and self.x_cov is None

    @staticmethod
    def _draw(cov, rng, n, dim):
        if cov is None:
            return np.zeros((n, dim))
        if cov.shape[0] != dim:
            raise ValueError(f"noise covariance is {cov.shape[0]}-dimensional, signal is {dim}")
        try:
            L = np.linalg.cholesky(cov)
        except np.linalg.LinAlgError:
            L = _psd_sqrt(cov)
        return rng.standard_normal((n, dim)) @ L.T

    def draw(self, x_rng: RandomStream, y_rng: RandomStream, n: int, dim_x: int, dim_y: int):
        """Noise blocks ``(wx, wy)`` of shapes ``(n, dim_x)``, ``(n, dim_y)``."""
        return self._draw(self.x_cov, x_rng, n, dim_x), self._draw(self.y_cov, y_rng, n, dim_y)


def _psd_sqrt(cov):
    w, V = np.linalg.eigh(cov)
    return V * np.sqrt(np.clip(w, 0.0, None))


def measure(meas: MeasurementModel, x, y, rng: RandomStream):
    """Corrupt one ``(x, y)`` pair; returns ``(x_hat, y_hat)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if meas.noiseless:
        return x.copy(), y.copy()
    x_rng, y_rng = rng.split(2)
    wx, wy = meas.draw(x_rng, y_rng, 1, x.size, y.size)
    return x + wx[0], y + wy[0]


def sigma_delta(compliance: ComplianceModel, plant: PlantModel) -> float:
    """Uniform bound on ``||A||``, ``||b||`` and ``||r_n||`` from the configuration."""
    return max(compliance.sup_A(), compliance.sup_b(), plant.disturbance.sup_norm())
