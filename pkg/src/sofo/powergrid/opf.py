"""Closed-loop inverter control on a feeder: S-OFO vs D-OFO with curtailment/voltage metrics.

The controller sees the LinDistFlow Jacobian; the plant is the nonlinear
power flow. Agent inputs are ``u = [P_1..P_A, Q_1..Q_A]`` in per unit and
compliance scales real power only: ``x = [phi * P, Q]``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .. import kernels as K
from ..engine import AlgorithmConfig
from ..model import PhiDistribution
from ..rng import as_stream
from .feeder import FeederCase, build_lindistflow, solve_power_flow_batch
from .profiles import ProfileSet

__all__ = ["OpfWeights", "OpfRun", "OpfReport", "run_opf_experiment", "compute_metrics", "zero_curtailment_voltages",
           "TABLE_DISTRIBUTIONS"]

log = logging.getLogger(__name__)

TABLE_DISTRIBUTIONS = tuple(
    PhiDistribution(kind, lo, 1.0, a, b)
    for lo in (0.0, -0.5, -1.0)
    for kind, a, b in (("beta", 4.0, 2.0), ("beta", 2.0, 4.0), ("uniform", 1.0, 1.0))
)


@dataclass(frozen=True)
class OpfWeights:
    kappa_P: float = 4.0
    kappa_Q: float = 1.0
    kappa_y: float = 8.0


def compute_metrics(p_x_kw, pbar_kw, y_hat):
    """``(PC, VD)``: mean of ``(P^x - Pbar)^2`` (kW^2) and of ``(y_hat - 1)^2`` (pu^2).

    ``p_x_kw`` and ``y_hat`` are ``(M, N, A)``; ``pbar_kw`` broadcasts against them.
    """
    p_x_kw = np.asarray(p_x_kw, dtype=float)
    y_hat = np.asarray(y_hat, dtype=float)
    pc = float(np.mean((p_x_kw - pbar_kw) ** 2))
    vd = float(np.mean((y_hat - 1.0) ** 2))
    return pc, vd


@dataclass
class OpfRun:
    variant: str
    p_x_kw: np.ndarray  # (M, N, A)
    q_kvar: np.ndarray
    y_hat: np.ndarray
    valid: np.ndarray  # (M,) replications that never diverged
    rating_violations: int
    PC: float = 0.0
    VD: float = 0.0
    PC_se: float = 0.0
    VD_se: float = 0.0

    @property
    def n_diverged(self) -> int:
        return int((~self.valid).sum())


@dataclass
class OpfReport:
    phi_label: str
    runs: dict
    pbar_kw: np.ndarray
    baseline_y: np.ndarray  # (N, A) zero-curtailment voltages
    agents: tuple
    meta: dict = field(default_factory=dict)

    def rows(self):
        lo_hi = self.meta.get("support", "")
        for name, r in self.runs.items():
            yield dict(distribution=self.phi_label, support=lo_hi, algorithm=name.upper().replace("OFO", "-OFO"),
                       PC_kW2=r.PC, VD_pu2=r.VD, PC_se=r.PC_se, VD_se=r.VD_se, replications=int(r.valid.sum()),
                       diverged=r.n_diverged, rating_violations=r.rating_violations)

    def trace(self, agent: int):
        """Voltage traces at one agent node: baseline and per-variant replication means."""
        j = self.agents.index(int(agent))
        out = {"zero_curtailment": self.baseline_y[:, j]}
        for name, r in self.runs.items():
            out[f"{name}_mean"] = r.y_hat[r.valid, :, j].mean(axis=0) if r.valid.any() else np.full(len(self.pbar_kw), np.nan)
            out[f"{name}_rep0"] = r.y_hat[0, :, j]
        return out


def _setup(case, profiles, N, smax_kva):
    if len(profiles) < N:
        raise ValueError(f"profiles cover {len(profiles)} steps but the horizon is {N}")
    pbar_kw = profiles.pv_for(case)[:N]
    if smax_kva is None:
        smax_kva = case.smax_kva if case.smax_kva is not None else 1.1 * pbar_kw.max(axis=0)
    smax = np.asarray(smax_kva, dtype=float) / case.s_base_kw
    load = profiles.nodal_load_pu(case)[:N]
    return pbar_kw, pbar_kw / case.s_base_kw, smax, load


def zero_curtailment_voltages(case: FeederCase, profiles: ProfileSet, N: Optional[int] = None, backend=None):
    """Agent voltages with ``P = Pbar``, ``Q = 0`` and full compliance, shape ``(N, A)``.

    Steps whose power flow does not converge are NaN.
    """
    N = len(profiles) if N is None else N
    pbar_kw, pbar, _, load = _setup(case, profiles, N, np.ones(case.n_agents))
    S = load.copy()
    S[:, case.agent_index] -= pbar
    res = solve_power_flow_batch(case, S, backend=backend, strict=False)
    if not res.converged.all():
        log.warning("zero-curtailment power flow diverged at %d step(s); recorded as NaN", int((~res.converged).sum()))
    y = res.vm[:, case.agent_index]
    y[~res.converged] = np.nan
    return y


def _initial_inputs(rng, pbar0, smax):
    P = rng.uniform(0.0, 1.0, pbar0.size) * np.minimum(pbar0, smax)
    qmax = np.sqrt(np.maximum(smax**2 - P**2, 0.0))
    Q = rng.uniform(-0.5, 0.5, P.size) * qmax
    return np.concatenate([P, Q])


def _simulate(case, lin, variant, u0, phi, phi_mean, load, pbar, smax, algo, weights, backend):
    M = u0.shape[0]
    A = case.n_agents
    ag = case.agent_index
    N = algo.horizon
    C = lin.C
    wy2 = 2.0 * weights.kappa_y
    wx2 = 2.0 * np.concatenate([np.full(A, weights.kappa_P), np.full(A, weights.kappa_Q)])
    exact = variant == "sofo" and algo.a_recovery == "exact"
    oracle = variant == "sofo" and algo.a_recovery == "oracle"
    u = u0.copy()
    V = np.ones((M, case.n_nodes), dtype=complex)
    valid = np.ones(M, dtype=bool)
    Px_h = np.empty((M, N, A))
    Q_h = np.empty((M, N, A))
    Y_h = np.empty((M, N, A))
    violations = 0
    s2 = smax**2 + 1e-9
    for n in range(N):
        P, Q = u[:, :A], u[:, A:]
        ph = phi[:, n] if phi is not None else 1.0
        Px = ph * P
        S = np.repeat(load[n][None], M, axis=0)
        S[:, ag] -= Px + 1j * Q
        res = solve_power_flow_batch(case, S, V0=V, backend=backend, strict=False)
        bad = valid & ~res.converged
        if bad.any():
            for r in np.flatnonzero(bad):
                log.warning("%s replication %d: power flow diverged at step %d; replication dropped", variant, r, n)
            valid &= res.converged
        V = np.where(res.converged[:, None], res.V, 1.0 + 0j)
        y = np.abs(V[:, ag])
        Px_h[:, n], Q_h[:, n], Y_h[:, n] = Px, Q, y
        violations += int(np.sum((Px * Px + Q * Q > s2) & valid[:, None]))
        xh = np.concatenate([Px, Q], axis=1)
        xref = np.concatenate([pbar[n], np.zeros(A)])
        v = wy2 * (y - 1.0) @ C + wx2 * (xh - xref)
        if exact:
            big = np.abs(P) > K.ZERO_DENOMINATOR
            aP = np.where(big, np.divide(Px, P, out=np.zeros_like(P), where=big), phi_mean)
        elif oracle:
            aP = np.broadcast_to(ph, P.shape)
        else:
            aP = np.ones_like(P)
        a = np.concatenate([aP, np.ones_like(Q)], axis=1)
        g = a * v + algo.eta * u
        u = K.project_batch_np(u - algo.alpha * g, K.INVERTER, None, None, None, None, smax, pbar[n])
    return Px_h, Q_h, Y_h, valid, violations


def _rep_se(per_rep):
    return float(per_rep.std(ddof=1) / np.sqrt(per_rep.size)) if per_rep.size > 1 else 0.0


def run_opf_experiment(case: FeederCase, profiles: ProfileSet, phi: Optional[PhiDistribution], algo: AlgorithmConfig,
                       replications: int, rng, *, variants: Sequence[str] = ("sofo", "dofo"),
                       weights: OpfWeights = OpfWeights(), smax_kva=None, backend=None,
                       threads: int = 1) -> OpfReport:
    """Run ``replications`` closed-loop experiments per variant.

    Each replication draws its own initial input and compliance sequence from
    a split stream; the same draws are reused for every variant (common random
    numbers). ``phi=None`` means full compliance. Replications whose power
    flow diverges are logged and dropped from the metrics.
    """
    N = algo.horizon
    M = int(replications)
    pbar_kw, pbar, smax, load = _setup(case, profiles, N, smax_kva)
    lin = build_lindistflow(case)
    A = case.n_agents
    children = as_stream(rng).split(M)
    u0 = np.empty((M, 2 * A))
    phis = None if phi is None else np.empty((M, N, A))
    for r, ch in enumerate(children):
        r_u, r_phi = ch.split(2)
        u0[r] = K.project_batch_np(_initial_inputs(r_u, pbar[0], smax), K.INVERTER, None, None, None, None,
                                   smax, pbar[0])
        if phi is not None:
            phis[r] = phi.sample(r_phi, (N, A))
    phi_mean = 1.0 if phi is None else phi.mean

    def one(variant):
        cfg = algo if variant == algo.variant else AlgorithmConfig(algo.alpha, algo.eta, variant, N, algo.a_recovery)
        Px, Q, Y, valid, viol = _simulate(case, lin, variant, u0, phis, phi_mean, load, pbar, smax, cfg, weights,
                                          backend)
        px_kw, q_kvar = Px * case.s_base_kw, Q * case.s_base_kw
        run = OpfRun(variant, px_kw, q_kvar, Y, valid, viol)
        if valid.any():
            run.PC, run.VD = compute_metrics(px_kw[valid], pbar_kw, Y[valid])
            run.PC_se = _rep_se(np.mean((px_kw[valid] - pbar_kw) ** 2, axis=(1, 2)))
            run.VD_se = _rep_se(np.mean((Y[valid] - 1.0) ** 2, axis=(1, 2)))
        else:
            run.PC = run.VD = float("nan")
        return run

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            runs = dict(zip(variants, pool.map(one, variants)))
    else:
        runs = {v: one(v) for v in variants}
    base = zero_curtailment_voltages(case, profiles, N, backend)
    label = "Deterministic" if phi is None else phi.label()
    support = "" if phi is None else f"[{phi.lo:g},{phi.hi:g}]"
    return OpfReport(label, runs, pbar_kw, base, case.agents, {"support": support, "replications": M, "horizon": N})
