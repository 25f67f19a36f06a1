"""Radial feeder data, per-unit bookkeeping, LinDistFlow sensitivities and power flow."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .. import kernels as K
from .._jit import resolve_backend

__all__ = [
    "FeederError",
    "PowerFlowError",
    "FeederCase",
    "load_case",
    "ieee33",
    "DEFAULT_AGENTS",
    "LinDistFlowModel",
    "build_lindistflow",
    "PowerFlowResult",
    "solve_power_flow",
    "solve_power_flow_batch",
]

DEFAULT_AGENTS = (18, 22, 25, 29, 31, 33)


class FeederError(ValueError):
    """Malformed or non-radial feeder data."""


class PowerFlowError(RuntimeError):
    """The sweep did not converge (typically loading beyond feeder capacity)."""


@dataclass(frozen=True)
class FeederCase:
    """Balanced radial feeder.

    Node labels are arbitrary integers; internally nodes are reordered so the
    root comes first and every parent precedes its children. Impedances are in
    ohm, loads in kW / kvar, ratings in kVA.
    """

    branches: np.ndarray  # rows (from, to, R_ohm, X_ohm)
    nodes: np.ndarray
    p_load_kw: np.ndarray
    q_load_kvar: np.ndarray
    base_kv: float = 12.66
    base_mva: float = 10.0
    root: int = 1
    agents: tuple = DEFAULT_AGENTS
    smax_kva: Optional[np.ndarray] = None
    _topo: dict = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        br = np.atleast_2d(np.asarray(self.branches, dtype=float))
        nodes = np.asarray(self.nodes).astype(int)
        if br.shape[1] != 4:
            raise FeederError("branch table needs columns from, to, R, X")
        if np.any(br[:, 2] <= 0) or np.any(br[:, 3] <= 0):
            raise FeederError("all branch resistances and reactances must be positive")
        if len(set(nodes.tolist())) != nodes.size:
            raise FeederError("duplicate node labels")
        if br.shape[0] != nodes.size - 1:
            raise FeederError(f"radial feeder needs {nodes.size - 1} branches, got {br.shape[0]}")
        pos = {v: i for i, v in enumerate(nodes.tolist())}
        if self.root not in pos:
            raise FeederError(f"root node {self.root} missing from node table")
        children = {v: [] for v in pos}
        Z = {}
        for f, t, r, x in br:
            f, t = int(f), int(t)
            if f not in pos or t not in pos:
                raise FeederError(f"branch {f}-{t} references an unknown node")
            children[f].append(t)
            children[t].append(f)
            Z[(f, t)] = Z[(t, f)] = (r, x)
        order, parent_lbl, seen = [self.root], {self.root: None}, {self.root}
        k = 0
        while k < len(order):
            v = order[k]
            for w in sorted(children[v]):
                if w not in seen:
                    seen.add(w)
                    parent_lbl[w] = v
                    order.append(w)
            k += 1
        if len(order) != nodes.size:
            raise FeederError("branch graph is not connected")
        idx = {v: i for i, v in enumerate(order)}
        parent = np.array([-1] + [idx[parent_lbl[v]] for v in order[1:]], dtype=np.int64)
        R = np.array([0.0] + [Z[(parent_lbl[v], v)][0] for v in order[1:]])
        X = np.array([0.0] + [Z[(parent_lbl[v], v)][1] for v in order[1:]])
        p = np.asarray(self.p_load_kw, dtype=float)[[pos[v] for v in order]]
        q = np.asarray(self.q_load_kvar, dtype=float)[[pos[v] for v in order]]
        agents = tuple(int(a) for a in self.agents)
        for a in agents:
            if a not in idx:
                raise FeederError(f"agent node {a} not in the feeder")
            if a == self.root:
                raise FeederError("the feeder head cannot host an agent")
        if len(set(agents)) != len(agents):
            raise FeederError("duplicate agent nodes")
        smax = None if self.smax_kva is None else np.asarray(self.smax_kva, dtype=float).ravel()
        if smax is not None and smax.size != len(agents):
            raise FeederError("need one inverter rating per agent")
        n = len(order)
        # T[k, j] = 1 if node j is in the subtree rooted at k (branch k feeds it)
        T = np.zeros((n, n))
        for j in range(n):
            k = j
            while k > 0:
                T[k, j] = 1.0
                k = parent[k]
        topo = dict(order=np.array(order), index=idx, parent=parent, R=R, X=X, p=p, q=q, T=T,
                    agent_idx=np.array([idx[a] for a in agents], dtype=np.int64))
        object.__setattr__(self, "branches", br)
        object.__setattr__(self, "nodes", nodes)
        object.__setattr__(self, "agents", agents)
        object.__setattr__(self, "smax_kva", smax)
        object.__setattr__(self, "_topo", topo)

    # topology in internal (root-first) order
    @property
    def n_nodes(self) -> int:
        return self.nodes.size

    @property
    def order(self) -> np.ndarray:
        """Node labels in internal order."""
        return self._topo["order"]

    @property
    def parent(self) -> np.ndarray:
        return self._topo["parent"]

    @property
    def subtree(self) -> np.ndarray:
        return self._topo["T"]

    @property
    def agent_index(self) -> np.ndarray:
        return self._topo["agent_idx"]

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def index_of(self, label: int) -> int:
        return self._topo["index"][int(label)]

    # per-unit
    @property
    def z_base(self) -> float:
        return self.base_kv**2 / self.base_mva

    @property
    def s_base_kw(self) -> float:
        return 1000.0 * self.base_mva

    @property
    def z_pu(self) -> np.ndarray:
        """Series impedance of the branch feeding each node (0 at the root)."""
        return (self._topo["R"] + 1j * self._topo["X"]) / self.z_base

    @property
    def load_pu(self) -> np.ndarray:
        """Nominal complex load per node in internal order."""
        return (self._topo["p"] + 1j * self._topo["q"]) / self.s_base_kw

    @property
    def load_kw(self):
        return self._topo["p"].copy(), self._topo["q"].copy()

    def with_agents(self, agents, smax_kva=None) -> "FeederCase":
        return FeederCase(self.branches, self.nodes, self._by_label(self._topo["p"]), self._by_label(self._topo["q"]),
                          self.base_kv, self.base_mva, self.root, tuple(agents), smax_kva)

    def _by_label(self, v):
        out = np.empty(self.n_nodes)
        lab = {int(x): i for i, x in enumerate(self.nodes)}
        for k, v_lbl in enumerate(self.order):
            out[lab[int(v_lbl)]] = v[k]
        return out


def _read_csv(path, required):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FeederError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    missing = [c for c in required if c not in header]
    if missing:
        raise FeederError(f"{path}: missing columns {missing}")
    data = np.array([[float(r[header.index(c)]) for c in required] for r in rows[1:] if r], dtype=float)
    if data.size == 0:
        raise FeederError(f"{path}: no data rows")
    return data


def load_case(branch_csv, node_csv, base_kv=12.66, base_mva=10.0, root=1, agents=DEFAULT_AGENTS,
              smax_kva=None) -> FeederCase:
    """Read a branch table ``(from, to, R_ohm, X_ohm)`` and node table ``(node, P_load_kW, Q_load_kvar)``."""
    br = _read_csv(branch_csv, ["from", "to", "R_ohm", "X_ohm"])
    nd = _read_csv(node_csv, ["node", "P_load_kW", "Q_load_kvar"])
    return FeederCase(br, nd[:, 0].astype(int), nd[:, 1], nd[:, 2], base_kv, base_mva, root, agents, smax_kva)


def ieee33(agents=DEFAULT_AGENTS, smax_kva=None, base_mva=10.0) -> FeederCase:
    """The 33-node radial test feeder (12.66 kV, 3715 kW / 2300 kvar nominal load)."""
    data = resources.files("sofo.powergrid") / "data"
    with resources.as_file(data / "ieee33_branches.csv") as b, resources.as_file(data / "ieee33_loads.csv") as n:
        return load_case(b, n, base_kv=12.66, base_mva=base_mva, agents=agents, smax_kva=smax_kva)


# ---------------------------------------------------------------------------
# LinDistFlow


@dataclass(frozen=True)
class LinDistFlowModel:
    """``|V| ~ 1 + Rp p + Xp q`` for per-unit nodal injections ``p, q``.

    ``Rp[i, j]`` is the resistance of the path shared by the root-to-``i`` and
    root-to-``j`` paths (internal node order). ``C1``/``C2`` restrict this to
    agent outputs and agent injections.
    """

    Rp: np.ndarray
    Xp: np.ndarray
    agent_index: np.ndarray

    @property
    def C1(self) -> np.ndarray:
        a = self.agent_index
        return self.Rp[np.ix_(a, a)]

    @property
    def C2(self) -> np.ndarray:
        a = self.agent_index
        return self.Xp[np.ix_(a, a)]

    @property
    def C(self) -> np.ndarray:
        """Output Jacobian w.r.t. the stacked agent input ``[P, Q]``."""
        return np.hstack([self.C1, self.C2])

    def voltages(self, p_inj, q_inj) -> np.ndarray:
        """Linearized magnitudes at all nodes; rows of ``p_inj``/``q_inj`` are cases."""
        return 1.0 + np.asarray(p_inj) @ self.Rp.T + np.asarray(q_inj) @ self.Xp.T

    def offsets(self, p_load, q_load) -> np.ndarray:
        """Agent voltages due to consumption ``(p_load, q_load)`` alone: the ``D r_n`` term."""
        a = self.agent_index
        return 1.0 - np.asarray(p_load) @ self.Rp[a].T - np.asarray(q_load) @ self.Xp[a].T


def build_lindistflow(case: FeederCase) -> LinDistFlowModel:
    T = case.subtree  # T[k, j]: branch k lies on the path to j
    z = case.z_pu
    Rp = T.T @ (z.real[:, None] * T)
    Xp = T.T @ (z.imag[:, None] * T)
    return LinDistFlowModel(Rp, Xp, case.agent_index.copy())


# ---------------------------------------------------------------------------
# nonlinear power flow


@dataclass(frozen=True)
class PowerFlowResult:
    V: np.ndarray
    iterations: np.ndarray
    converged: np.ndarray

    @property
    def vm(self) -> np.ndarray:
        return np.abs(self.V)


def solve_power_flow_batch(case: FeederCase, s_load_pu, tol: float = 1e-8, max_iter: int = 500, V0=None,
                           backend=None, strict: bool = True) -> PowerFlowResult:
    """Backward/forward sweep for a batch of complex net loads ``(B, n)`` in per unit.

    ``s_load_pu[b, k]`` is consumption minus generation at internal node ``k``.
    The head node is held at 1.0 pu.
    """
    S = np.atleast_2d(np.asarray(s_load_pu, dtype=complex))
    B, n = S.shape
    if n != case.n_nodes:
        raise ValueError(f"expected {case.n_nodes} nodal loads, got {n}")
    V = np.ones((B, n), dtype=complex) if V0 is None else np.array(V0, dtype=complex).reshape(B, n)
    V[:, 0] = 1.0
    z = case.z_pu
    if resolve_backend(backend) == "numba":
        V, it, conv = K.bfs_batch_nb(case.parent, z, S, V, tol, max_iter)
    else:
        V, it, conv = K.bfs_batch_np(case.subtree, z, S, V, tol, max_iter)
    if strict and not np.all(conv):
        bad = np.flatnonzero(~conv)
        raise PowerFlowError(f"power flow did not converge for {bad.size} case(s) (first: {bad[0]}) "
                             f"within {max_iter} sweeps")
    return PowerFlowResult(V, it, conv)


def solve_power_flow(case: FeederCase, p_inj_kw=None, q_inj_kvar=None, *, loading: float = 1.0,
                     tol: float = 1e-8, max_iter: int = 500, backend=None) -> np.ndarray:
    """Voltage magnitudes (pu, internal node order) for one operating point.

    Without injections the nominal loads scaled by ``loading`` are used.
    Otherwise ``p_inj_kw``/``q_inj_kvar`` are net injections (generation
    positive) per node in internal order and replace the nominal loads.

    Raises
    ------
    PowerFlowError
        When the sweep fails to converge.
    """
    if p_inj_kw is None and q_inj_kvar is None:
        s = loading * case.load_pu
    else:
        p = np.zeros(case.n_nodes) if p_inj_kw is None else np.asarray(p_inj_kw, dtype=float)
        q = np.zeros(case.n_nodes) if q_inj_kvar is None else np.asarray(q_inj_kvar, dtype=float)
        s = -(p + 1j * q) / case.s_base_kw
    return solve_power_flow_batch(case, s[None], tol, max_iter, backend=backend).vm[0]
