"""Load and PV-availability time series: CSV ingestion and a synthetic generator."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..rng import as_stream
from .feeder import FeederCase

__all__ = ["ProfileError", "ProfileSet", "load_profiles", "synthetic_profiles", "write_profiles"]


class ProfileError(ValueError):
    """Profile CSV violates the expected schema."""


@dataclass(frozen=True)
class ProfileSet:
    """Uncontrollable loads per node and available PV power per agent, both in kW.

    ``load_kw`` has one column per label in ``load_nodes``; ``pv_kw`` one per
    label in ``pv_nodes``. Reactive loads follow each node's nominal power
    factor unless ``load_kvar`` is given.
    """

    time_min: np.ndarray
    load_nodes: tuple
    load_kw: np.ndarray
    pv_nodes: tuple
    pv_kw: np.ndarray
    load_kvar: Optional[np.ndarray] = None

    def __post_init__(self):
        t = np.asarray(self.time_min, dtype=float)
        L = np.atleast_2d(np.asarray(self.load_kw, dtype=float))
        P = np.atleast_2d(np.asarray(self.pv_kw, dtype=float))
        if L.shape[0] != t.size or P.shape[0] != t.size:
            raise ProfileError(f"length mismatch: time {t.size}, loads {L.shape[0]}, pv {P.shape[0]}")
        if L.shape[1] != len(self.load_nodes) or P.shape[1] != len(self.pv_nodes):
            raise ProfileError("column labels do not match the data width")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ProfileError("time stamps must be strictly increasing")
        if np.any(P < 0):
            raise ProfileError("available PV power must be nonnegative")
        if not (np.all(np.isfinite(L)) and np.all(np.isfinite(P))):
            raise ProfileError("profiles contain non-finite values")
        object.__setattr__(self, "time_min", t)
        object.__setattr__(self, "load_kw", L)
        object.__setattr__(self, "pv_kw", P)
        object.__setattr__(self, "load_nodes", tuple(int(v) for v in self.load_nodes))
        object.__setattr__(self, "pv_nodes", tuple(int(v) for v in self.pv_nodes))

    def __len__(self):
        return self.time_min.size

    @property
    def dt_minutes(self) -> float:
        return float(np.median(np.diff(self.time_min))) if len(self) > 1 else 0.0

    def resample(self, dt_minutes: float) -> "ProfileSet":
        """Linear interpolation onto a uniform grid starting at the first stamp."""
        t = np.arange(self.time_min[0], self.time_min[-1] + 1e-9 * dt_minutes, dt_minutes)
        interp = lambda Y: np.column_stack([np.interp(t, self.time_min, y) for y in Y.T]) if Y.size else Y[:0]
        kvar = None if self.load_kvar is None else interp(self.load_kvar)
        return ProfileSet(t, self.load_nodes, interp(self.load_kw), self.pv_nodes, interp(self.pv_kw), kvar)

    def head(self, N: int) -> "ProfileSet":
        if N > len(self):
            raise ProfileError(f"profiles have {len(self)} steps, {N} requested")
        kvar = None if self.load_kvar is None else self.load_kvar[:N]
        return ProfileSet(self.time_min[:N], self.load_nodes, self.load_kw[:N], self.pv_nodes, self.pv_kw[:N], kvar)

    def nodal_load_pu(self, case: FeederCase) -> np.ndarray:
        """Complex consumption per internal node, shape ``(N, n_nodes)``."""
        p_nom, q_nom = case.load_kw
        out = np.zeros((len(self), case.n_nodes), dtype=complex)
        for j, lbl in enumerate(self.load_nodes):
            k = case.index_of(lbl)
            p = self.load_kw[:, j]
            if self.load_kvar is not None:
                q = self.load_kvar[:, j]
            else:
                q = p * (q_nom[k] / p_nom[k]) if p_nom[k] > 0 else np.zeros_like(p)
            out[:, k] = (p + 1j * q) / case.s_base_kw
        return out

    def pv_for(self, case: FeederCase) -> np.ndarray:
        """Available power per agent of ``case`` (kW), shape ``(N, A)``."""
        cols = {lbl: j for j, lbl in enumerate(self.pv_nodes)}
        missing = [a for a in case.agents if a not in cols]
        if missing:
            raise ProfileError(f"no PV column for agent node(s) {missing}")
        return self.pv_kw[:, [cols[a] for a in case.agents]]


def _read(path):
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(fh) if r and any(c.strip() for c in r)]
    if not rows:
        raise ProfileError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if "time" not in header:
        raise ProfileError(f"{path}: missing column 'time'")
    if len(rows) < 2:
        raise ProfileError(f"{path}: no data rows")
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise ProfileError(f"{path}: non-numeric entry ({exc})") from None
    if data.shape[1] != len(header):
        raise ProfileError(f"{path}: ragged rows")
    ti = header.index("time")
    labels, cols = [], []
    for j, h in enumerate(header):
        if j == ti:
            continue
        try:
            labels.append(int(h.split("_")[-1]))
        except ValueError:
            raise ProfileError(f"{path}: column {h!r} is not a node label") from None
        cols.append(j)
    return data[:, ti], tuple(labels), data[:, cols]


def load_profiles(load_csv, pv_csv, case: Optional[FeederCase] = None, dt_minutes: Optional[float] = None) -> ProfileSet:
    """Read load and PV CSVs (``time`` in minutes plus one kW column per node label).

    Column headers are node labels, optionally prefixed (``node_18``). With a
    ``case``, every loaded node and every agent must have a column.

    Raises
    ------
    ProfileError
        Empty file, missing columns, negative available power or a length
        mismatch between the two files.
    """
    tl, ln, L = _read(load_csv)
    tp, pn, P = _read(pv_csv)
    if tl.size != tp.size:
        raise ProfileError(f"length mismatch: {tl.size} load rows vs {tp.size} PV rows")
    if not np.allclose(tl, tp):
        raise ProfileError("load and PV files use different time stamps")
    prof = ProfileSet(tl, ln, L, pn, P)
    if case is not None:
        p_nom, _ = case.load_kw
        need = {int(case.order[k]) for k in range(case.n_nodes) if p_nom[k] > 0}
        missing = sorted(need - set(ln))
        if missing:
            raise ProfileError(f"missing load columns for nodes {missing}")
        prof.pv_for(case)
    if dt_minutes is not None:
        prof = prof.resample(dt_minutes)
    return prof


def write_profiles(prof: ProfileSet, load_csv, pv_csv):
    for path, labels, Y in ((load_csv, prof.load_nodes, prof.load_kw), (pv_csv, prof.pv_nodes, prof.pv_kw)):
        header = "time," + ",".join(str(v) for v in labels)
        np.savetxt(path, np.column_stack([prof.time_min, Y]), delimiter=",", header=header, comments="", fmt="%.17g")


def _bump(h, center, width):
    return np.exp(-(((h - center) / width) ** 2))


def synthetic_profiles(case: FeederCase, N: int, rng=0, *, pv_peak_kw=1200.0, start_hour=5.5, end_hour=20.5,
                       sunrise=6.0, sunset=20.0, clouds=True, load_noise=0.03) -> ProfileSet:
    """Daytime profiles on ``N`` uniform steps between ``start_hour`` and ``end_hour``.

    Available PV is ``peak * sin(pi (h - sunrise) / (sunset - sunrise))**1.3``
    (zero outside daylight) times a cloud factor made of a few random
    Gaussian dips shared by all agents with per-agent depth jitter. Loads are
    nominal values times a residential shape (low midday, morning and
    evening peaks) with small multiplicative noise.
    """
    rng = as_stream(rng)
    r_cloud, r_load = rng.split(2)
    h = np.linspace(start_hour, end_hour, N)
    A = case.n_agents
    peak = np.broadcast_to(np.asarray(pv_peak_kw, dtype=float), (A,))
    phase = np.clip((h - sunrise) / (sunset - sunrise), 0.0, 1.0)
    bell = np.sin(np.pi * phase) ** 1.3
    cloud = np.ones((N, A))
    if clouds:
        k = int(r_cloud.integers(3, 8))
        centers = r_cloud.uniform(sunrise + 1.0, sunset - 1.0, k)
        widths = r_cloud.uniform(0.05, 0.4, k)
        depth = r_cloud.uniform(0.2, 0.7, k)
        jitter = r_cloud.uniform(0.7, 1.0, (k, A))
        for c, w, dd, jj in zip(centers, widths, depth, jitter):
            cloud *= 1.0 - dd * jj * _bump(h, c, w)[:, None]
    pv = peak * bell[:, None] * cloud

    shape = 0.4 + 0.3 * _bump(h, 8.0, 1.5) + 0.6 * _bump(h, 19.5, 2.0)
    p_nom, _ = case.load_kw
    nodes = [int(case.order[k]) for k in range(case.n_nodes) if p_nom[k] > 0]
    base = np.array([p_nom[case.index_of(v)] for v in nodes])
    noise = 1.0 + load_noise * r_load.standard_normal((N, len(nodes)))
    load = np.clip(shape[:, None] * base * noise, 0.0, None)
    t = 60.0 * (h - h[0])
    return ProfileSet(t, tuple(nodes), load, tuple(case.agents), pv)
