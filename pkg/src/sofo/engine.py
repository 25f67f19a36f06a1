"""The online loop: gradient estimates from measurements, compliance recovery,
S-OFO / D-OFO updates and trajectory records.

Timing convention: step ``n`` draws ``A_{n+1}``, applies ``x_n = A u_n + b``,
reads ``y_n = C x_n + D r_n`` and returns ``u_{n+1} = Proj_{U(n)}(u_n - alpha g_n)``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import kernels as K
from ._jit import resolve_backend
from .model import ComplianceModel, MeasurementModel, PlantModel
from .objectives import StageObjective
from .projections import ConstraintSet
from .rng import RandomStream, as_stream

__all__ = [
    "World",
    "AlgorithmConfig",
    "TrajectoryRecord",
    "StepLog",
    "recover_A",
    "estimate_gradient",
    "step",
    "run_trajectory",
    "run_replications",
    "write_trajectory_csv",
    "read_trajectory_csv",
    "MAX_IN_MEMORY",
]

MAX_IN_MEMORY = 1_000_000

_RECOVERY_CODES = {"exact": K.RECOVER_EXACT, "oracle": K.RECOVER_ORACLE, "identity": K.RECOVER_IDENTITY}


@dataclass(frozen=True)
class World:
    """Everything the controller does not choose: compliance, plant and sensors."""

    compliance: ComplianceModel
    plant: PlantModel
    measurement: MeasurementModel = field(default_factory=MeasurementModel)

    def __post_init__(self):
        if self.compliance.dim != self.plant.dim_x:
            raise ValueError(f"compliance acts on R^{self.compliance.dim} but the plant takes R^{self.plant.dim_x}")

    @property
    def dim_u(self):
        return self.compliance.dim

    @property
    def dim_y(self):
        return self.plant.dim_y


@dataclass(frozen=True)
class AlgorithmConfig:
    alpha: float
    eta: float = 0.0
    variant: str = "sofo"
    horizon: int = 1
    a_recovery: str = "exact"

    def __post_init__(self):
        if not self.alpha >= 0:
            raise ValueError("alpha must be >= 0")
        if self.eta < 0:
            raise ValueError("eta must be >= 0")
        if self.variant not in ("sofo", "dofo"):
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.a_recovery not in _RECOVERY_CODES:
            raise ValueError(f"unknown a_recovery {self.a_recovery!r}")
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")

    @property
    def recovery(self) -> str:
        """D-OFO always assumes full compliance."""
        return "identity" if self.variant == "dofo" else self.a_recovery

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(asdict(self), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class StepLog:
    u: np.ndarray
    x: np.ndarray
    x_hat: np.ndarray
    y: np.ndarray
    y_hat: np.ndarray
    A: np.ndarray
    A_circ: np.ndarray
    grad: np.ndarray
    cost: float


@dataclass
class TrajectoryRecord:
    """Per-step log of a single run; all arrays have ``N`` rows."""

    u: np.ndarray
    cost: np.ndarray
    u_final: np.ndarray
    x: Optional[np.ndarray] = None
    x_hat: Optional[np.ndarray] = None
    y: Optional[np.ndarray] = None
    y_hat: Optional[np.ndarray] = None
    grad: Optional[np.ndarray] = None
    ustar: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return self.u.shape[0]

    @property
    def tracking_sq_error(self) -> Optional[np.ndarray]:
        if self.ustar is None:
            return None
        return np.sum((self.u - self.ustar) ** 2, axis=1)

    def to_csv(self, path):
        write_trajectory_csv(self, path)


def recover_A(u, x_hat, mode="exact", A_true=None, fallback=None) -> np.ndarray:
    """Estimate the realized compliance matrix from ``(u, x_hat)``.

    ``exact`` returns ``diag(x_hat_i / u_i)``; coordinates with
    ``|u_i| < 1e-8`` fall back to ``fallback[i]`` (the mean compliance,
    default 1). ``identity`` returns ``I``; ``oracle`` returns ``A_true``.
    """
    u = np.asarray(u, dtype=float)
    d = u.size
    if mode == "identity":
        return np.eye(d)
    if mode == "oracle":
        if A_true is None:
            raise ValueError("oracle recovery needs the true A")
        return np.asarray(A_true, dtype=float)
    if mode != "exact":
        raise ValueError(f"unknown recovery mode {mode!r}")
    fb = np.ones(d) if fallback is None else np.asarray(fallback, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    big = np.abs(u) > K.ZERO_DENOMINATOR
    diag = np.where(big, np.divide(x_hat, u, out=np.zeros(d), where=big), fb)
    return np.diag(diag)


def estimate_gradient(A_circ, C, y_hat, x_hat, u, obj: StageObjective, n: int) -> np.ndarray:
    """``A_circ^T [C^T grad g_y(y_hat) + grad g_x(x_hat)] + eta u``."""
    A_circ = np.asarray(A_circ, dtype=float)
    C = np.asarray(C, dtype=float)
    v = C.T @ obj.g_y.grad(y_hat, n) + obj.g_x.grad(x_hat, n)
    return A_circ.T @ v + obj.eta * np.asarray(u, dtype=float)


def _check_eta(obj: StageObjective, config: AlgorithmConfig):
    if obj.eta != config.eta:
        raise ValueError(f"objective eta={obj.eta} disagrees with algorithm eta={config.eta}")


def _channels(rng):
    comp, xn, yn = as_stream(rng).split(3)
    return comp, xn, yn


def _step_core(u, A, b, wx, wy, world: World, cset, obj, config, n):
    plant = world.plant
    x = A @ u + b
    y = plant.C @ x + plant.D @ plant.disturbance.at(n)
    x_hat = x + wx
    y_hat = y + wy
    A_circ = recover_A(u, x_hat, config.recovery, A_true=A, fallback=world.compliance.mean_diag())
    g = estimate_gradient(A_circ, plant.C, y_hat, x_hat, u, obj, n)
    cost = obj.cost(x, y, n, u)
    u_next = cset.project(u - config.alpha * g, n)
    return u_next, StepLog(u.copy(), x, x_hat, y, y_hat, A, A_circ, g, cost)


def step(u, world: World, cset: ConstraintSet, obj: StageObjective, config: AlgorithmConfig, rng, n: int = 0):
    """One S-OFO (or D-OFO) update from ``u_n``; returns ``(u_{n+1}, StepLog)``."""
    _check_eta(obj, config)
    u = np.asarray(u, dtype=float)
    comp, xr, yr = _channels(rng)
    A, b = _draw_compliance(world.compliance, comp, 1)
    wx, wy = world.measurement.draw(xr, yr, 1, world.dim_u, world.dim_y)
    return _step_core(u, A[0], b[0], wx[0], wy[0], world, cset, obj, config, n)


def _draw_compliance(compliance, rng, N):
    return compliance.sample_many(rng, N)


# ---------------------------------------------------------------------------
# trajectory drivers


def _kernel_arrays(world, obj, cset, config, N, start):
    ks = cset.kernel_set(N, start)
    if ks is None or not world.compliance.is_diagonal:
        return None
    plant = world.plant
    return dict(
        mode=_RECOVERY_CODES[config.recovery],
        mean_diag=world.compliance.mean_diag(),
        C=np.ascontiguousarray(plant.C),
        Dr=np.ascontiguousarray(plant.offsets(N, start)),
        Wy2=np.ascontiguousarray(2.0 * obj.g_y.W),
        yref=np.ascontiguousarray(obj.g_y.ref_path(N, start)),
        Wx2=np.ascontiguousarray(2.0 * obj.g_x.W),
        xref=np.ascontiguousarray(obj.g_x.ref_path(N, start)),
        eta=float(config.eta),
        alpha=float(config.alpha),
        set_args=ks.args(),
    )


def _draw_kernel_noise(world, channels, N):
    comp, xr, yr = channels
    d, m = world.dim_u, world.dim_y
    if world.compliance.kind == "identity":
        phi = np.empty((0, 0, d))
    else:
        phi = world.compliance.sample_phi(comp, N)[None]
    meas = world.measurement
    wx = meas._draw(meas.x_cov, xr, N, d)[None] if meas.x_cov is not None else np.empty((0, 0, d))
    wy = meas._draw(meas.y_cov, yr, N, m)[None] if meas.y_cov is not None else np.empty((0, 0, m))
    return phi, wx, wy


def _run_kernel(u0_batch, phi, wx, wy, arrs, record, backend):
    return K.ofo_batch(
        u0_batch, phi, wx, wy, arrs["mode"], arrs["mean_diag"], arrs["C"], arrs["Dr"], arrs["Wy2"],
        arrs["yref"], arrs["Wx2"], arrs["xref"], arrs["eta"], arrs["alpha"], *arrs["set_args"], record,
        backend=backend,
    )


def _resolve_oracle(oracle, world, obj, cset, N, start, backend):
    if oracle is None or oracle is False:
        return None
    if oracle is True:
        from .analysis import optimal_path

        return optimal_path(obj, world.compliance, world.plant, cset, N, start=start, backend=backend)
    ustar = np.asarray(oracle, dtype=float)
    if ustar.shape != (N, world.dim_u):
        raise ValueError(f"oracle path has shape {ustar.shape}, expected {(N, world.dim_u)}")
    return ustar


def run_trajectory(u0, world: World, cset: ConstraintSet, obj: StageObjective, config: AlgorithmConfig, rng,
                   oracle=None, *, start: int = 0, backend=None, record: bool = True, stream_to=None):
    """Run ``config.horizon`` steps from ``u0`` (projected onto ``U(start)`` first).

    Parameters
    ----------
    oracle : None, True or array
        ``True`` computes the optimizer path with :func:`sofo.analysis.optimal_path`;
        an ``(N, d)`` array is used as given.
    backend : {'numba', 'numpy'}, optional
        Kernel flavour; defaults to the environment setting. Worlds the kernels
        do not cover (affine compliance, intersections) use a Python loop.
    stream_to : path, optional
        Required when the horizon exceeds ``MAX_IN_MEMORY``; rows are written
        to this CSV chunk by chunk and the returned record keeps only the tail.
    """
    _check_eta(obj, config)
    rng = as_stream(rng)
    N = config.horizon
    u = cset.project(np.asarray(u0, dtype=float), start)
    channels = _channels(rng)
    backend = resolve_backend(backend)
    if N > MAX_IN_MEMORY and stream_to is None:
        raise ValueError(f"horizon {N} exceeds {MAX_IN_MEMORY}; pass stream_to= to write rows to disk")

    writer = None
    chunks = []
    pos = 0
    try:
        while pos < N:
            n_chunk = min(MAX_IN_MEMORY, N - pos)
            rec = _run_chunk(u, world, cset, obj, config, channels, start + pos, n_chunk, backend, record)
            rec.ustar = _resolve_oracle(oracle if not isinstance(oracle, np.ndarray) else oracle[pos : pos + n_chunk],
                                        world, obj, cset, n_chunk, start + pos, backend)
            u = rec.u_final
            if stream_to is not None:
                if writer is None:
                    writer = _CsvStream(stream_to, world.dim_u, world.dim_y, rec.ustar is not None)
                writer.write(rec, start + pos)
                chunks = [rec]
            else:
                chunks.append(rec)
            pos += n_chunk
    finally:
        if writer is not None:
            writer.close()
    out = _concat(chunks)
    out.meta.update(seed_entropy=rng.entropy, spawn_key=rng.spawn_key, config_hash=config.digest(),
                    backend=backend, start=start)
    return out


def _run_chunk(u, world, cset, obj, config, channels, start, N, backend, record):
    arrs = _kernel_arrays(world, obj, cset, config, N, start)
    if arrs is None:
        return _python_chunk(u, world, cset, obj, config, channels, start, N)
    phi, wx, wy = _draw_kernel_noise(world, channels, N)
    U, cost, uf, X, Xh, Y, Yh, G = _run_kernel(u[None], phi, wx, wy, arrs, record, backend)
    if record:
        return TrajectoryRecord(U[0], cost[0], uf[0], X[0], Xh[0], Y[0], Yh[0], G[0])
    return TrajectoryRecord(U[0], cost[0], uf[0])


def _python_chunk(u, world, cset, obj, config, channels, start, N):
    comp, xr, yr = channels
    A, b = _draw_compliance(world.compliance, comp, N)
    wx, wy = world.measurement.draw(xr, yr, N, world.dim_u, world.dim_y)
    logs = []
    for k in range(N):
        u, log = _step_core(u, A[k], b[k], wx[k], wy[k], world, cset, obj, config, start + k)
        logs.append(log)
    stack = lambda name: np.array([getattr(l, name) for l in logs])
    return TrajectoryRecord(stack("u"), stack("cost"), u, stack("x"), stack("x_hat"), stack("y"),
                            stack("y_hat"), stack("grad"))


def _concat(chunks):
    if len(chunks) == 1:
        return chunks[0]
    cat = lambda name: None if getattr(chunks[0], name) is None else np.concatenate([getattr(c, name) for c in chunks])
    return TrajectoryRecord(cat("u"), cat("cost"), chunks[-1].u_final, cat("x"), cat("x_hat"), cat("y"),
                            cat("y_hat"), cat("grad"), cat("ustar"))


def run_replications(u0s, world: World, cset: ConstraintSet, obj: StageObjective, config: AlgorithmConfig, rng,
                     *, start: int = 0, backend=None, threads: int = 1, chunk: int = 50):
    """Independent replications with split streams.

    Replication ``r`` uses child ``r`` of ``rng.split(R)`` and is identical to
    ``run_trajectory(u0s[r], ..., rng=child_r, record=False)``. Returns
    ``(U, u_final)`` with shapes ``(R, N, d)`` and ``(R, d)``.
    """
    _check_eta(obj, config)
    u0s = np.atleast_2d(np.asarray(u0s, dtype=float))
    R = u0s.shape[0]
    N = config.horizon
    backend = resolve_backend(backend)
    arrs = _kernel_arrays(world, obj, cset, config, N, start)
    if arrs is None:
        raise ValueError("run_replications needs a kernel-compatible world and set")
    children = as_stream(rng).split(R)
    u0s = np.array([cset.project(u, start) for u in u0s])
    U = np.empty((R, N, world.dim_u))
    uf = np.empty((R, world.dim_u))

    def work(lo):
        hi = min(lo + chunk, R)
        draws = [_draw_kernel_noise(world, _channels(children[r]), N) for r in range(lo, hi)]
        phi, wx, wy = (np.concatenate([dd[i] for dd in draws]) if draws[0][i].shape[0] else draws[0][i]
                       for i in range(3))
        Ub, _, ufb, *_ = _run_kernel(u0s[lo:hi], phi, wx, wy, arrs, False, backend)
        U[lo:hi] = Ub
        uf[lo:hi] = ufb

    starts = range(0, R, chunk)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(work, starts))
    else:
        for lo in starts:
            work(lo)
    return U, uf


# ---------------------------------------------------------------------------
# CSV schema: n, u*, x_hat*, y_hat*, [ustar*], tracking_sq_error, stage_cost


def trajectory_header(d, m, with_ustar):
    cols = ["n"] + [f"u{i}" for i in range(d)] + [f"x_hat{i}" for i in range(d)] + [f"y_hat{i}" for i in range(m)]
    if with_ustar:
        cols += [f"ustar{i}" for i in range(d)]
    return cols + ["tracking_sq_error", "stage_cost"]


def _rows(rec: TrajectoryRecord, start=0):
    N, d = rec.u.shape
    if rec.x_hat is None or rec.y_hat is None:
        raise ValueError("record was produced with record=False; nothing to export")
    cols = [np.arange(start, start + N)[:, None], rec.u, rec.x_hat, rec.y_hat]
    err = rec.tracking_sq_error
    if rec.ustar is not None:
        cols.append(rec.ustar)
    cols.append((err if err is not None else np.full(N, np.nan))[:, None])
    cols.append(rec.cost[:, None])
    return np.hstack(cols)


class _CsvStream:
    def __init__(self, path, d, m, with_ustar):
        self.fh = open(path, "w", newline="")
        self.fh.write(",".join(trajectory_header(d, m, with_ustar)) + "\n")

    def write(self, rec, start):
        rows = _rows(rec, start)
        fmt = ["%d"] + ["%.17g"] * (rows.shape[1] - 1)
        np.savetxt(self.fh, rows, fmt=fmt, delimiter=",")

    def close(self):
        self.fh.close()


def write_trajectory_csv(rec: TrajectoryRecord, path, start: int = 0):
    d, m = rec.u.shape[1], rec.y_hat.shape[1]
    w = _CsvStream(path, d, m, rec.ustar is not None)
    try:
        w.write(rec, start)
    finally:
        w.close()


def read_trajectory_csv(path) -> dict:
    """Parse a trajectory CSV back into named column blocks."""
    path = Path(path)
    with open(path, newline="") as fh:
        header = next(csv.reader(fh))
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    out = {"n": data[:, 0].astype(np.int64)}
    for prefix in ("ustar", "x_hat", "y_hat", "u"):
        idx = [i for i, h in enumerate(header) if h.startswith(prefix) and h[len(prefix):].isdigit()]
        if idx:
            out[prefix] = data[:, idx]
    out["tracking_sq_error"] = data[:, header.index("tracking_sq_error")]
    out["stage_cost"] = data[:, header.index("stage_cost")]
    return out
