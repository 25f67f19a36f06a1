"""Ground-truth optimizers, theory constants and the tracking bounds.

Everything here works on the closed-form expected objective (identity or
diagonal compliance) plus Monte-Carlo estimates over the compliance law.
"""

from __future__ import annotations

import itertools
import warnings
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import kernels as K
from ._jit import resolve_backend
from .model import ComplianceModel, MeasurementModel, PlantModel
from .objectives import ExpectedQuadratic, StageObjective, expected_quadratic
from .projections import ConstraintSet
from .rng import as_stream

__all__ = [
    "OracleConvergenceError",
    "A5Warning",
    "solve_optimal",
    "optimal_path",
    "vi_residual",
    "brute_force_optimal",
    "psi_sequence",
    "sample_gradients",
    "compute_mu_bar_f",
    "LfSigmaEstimate",
    "estimate_Lf_sigmaf",
    "TheoryConstants",
    "theorem1_bound",
    "drift_envelope",
    "theorem2_bound",
    "calibration_states",
    "one_step_batch",
    "ContractionResult",
    "contraction_check",
    "fit_b2",
    "fit_b1",
    "estimate_constants",
]


class OracleConvergenceError(RuntimeError):
    """Projected-gradient oracle hit its iteration cap."""


class A5Warning(UserWarning):
    """The mean compliance does not make the expected objective strongly convex."""


# ---------------------------------------------------------------------------
# optimizers of the expected problem


def _oracle_step(H):
    lmax = float(np.linalg.eigvalsh(H).max())
    return 1.0 / lmax if lmax > 0 else 1.0


def vi_residual(eq: ExpectedQuadratic, cset: ConstraintSet, u, n: int) -> float:
    """Gradient-mapping residual ``||u - Proj(u - grad/lambda_max)||``; zero exactly at the optimizer."""
    step = _oracle_step(eq.H)
    u = np.asarray(u, dtype=float)
    return float(np.linalg.norm(u - cset.project(u - step * eq.gradient(u, n), n)))


def _python_oracle(eq, cset, g, step, tol, max_iter, u, n):
    for k in range(1, max_iter + 1):
        w = cset.project(u - step * (eq.H @ u + g), n)
        if np.linalg.norm(w - u) < tol:
            return w, k
        u = w
    return u, max_iter


def solve_optimal(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, cset: ConstraintSet,
                  n: int = 0, tol: float = 1e-10, max_iter: int = 1_000_000, u_init=None) -> np.ndarray:
    """Minimize ``E f^(n)(u, phi)`` over ``U(n)`` by projected gradient with step ``1/lambda_max(H)``.

    Raises
    ------
    OracleConvergenceError
        If successive iterates are still ``tol`` apart after ``max_iter`` steps.
    """
    return optimal_path(obj, compliance, plant, cset, 1, start=n, tol=tol, max_iter=max_iter, u_init=u_init)[0]


def optimal_path(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, cset: ConstraintSet,
                 N: int, start: int = 0, tol: float = 1e-10, max_iter: int = 1_000_000, u_init=None,
                 backend=None) -> np.ndarray:
    """``u*_n`` for ``n = start .. start+N-1``, shape ``(N, d)``.

    The numba kernel warm-starts each step from the previous optimizer; the
    numpy kernel iterates all steps at once from a common start.
    """
    eq = expected_quadratic(obj, compliance, plant)
    d = compliance.dim
    g = np.ascontiguousarray(eq.linear_terms(N, start))
    step = _oracle_step(eq.H)
    u0 = np.zeros(d) if u_init is None else np.asarray(u_init, dtype=float)
    ks = cset.kernel_set(N, start)
    if ks is None:
        out = np.empty((N, d))
        u = u0
        for k in range(N):
            u, it = _python_oracle(eq, cset, g[k], step, tol, max_iter, cset.project(u, start + k), start + k)
            if it >= max_iter:
                raise OracleConvergenceError(f"oracle did not converge at step {start + k} in {max_iter} iterations")
            out[k] = u
        return out
    out, iters = K.oracle_path(np.ascontiguousarray(eq.H), g, step, tol, max_iter, u0, *ks.args(),
                               backend=resolve_backend(backend))
    if np.any(iters >= max_iter):
        bad = int(np.argmax(iters >= max_iter)) + start
        raise OracleConvergenceError(f"oracle did not converge at step {bad} in {max_iter} iterations")
    return out


def brute_force_optimal(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, cset: ConstraintSet,
                        n: int = 0, grid_resolution: float = 1e-3, chunk: int = 2_000_000) -> np.ndarray:
    """Grid argmin of the closed-form ``E f`` over feasible grid points.

    The grid is ``lo + k h`` over the set's bounding box. Exact ties go to the
    lexicographically smallest point.
    """
    d = compliance.dim
    if d > 3:
        raise ValueError(f"brute-force oracle supports d <= 3, got {d}")
    eq = expected_quadratic(obj, compliance, plant)
    lo, hi = cset.bounding_box(n)
    axes = [l + grid_resolution * np.arange(int(np.floor((h - l) / grid_resolution + 1e-9)) + 1) for l, h in zip(lo, hi)]
    sizes = [a.size for a in axes]
    total = int(np.prod(sizes))
    best_val, best_u = np.inf, None
    for s in range(0, total, chunk):
        idx = np.unravel_index(np.arange(s, min(s + chunk, total)), sizes)
        U = np.stack([axes[j][idx[j]] for j in range(d)], axis=1)
        U = U[cset.contains_many(U, n, tol=1e-12)]
        if not U.size:
            continue
        vals = eq.values(U, n)
        k = int(np.argmin(vals))
        if vals[k] < best_val:
            best_val, best_u = vals[k], U[k]
    if best_u is None:
        raise ValueError("no feasible grid point; refine the grid")
    return best_u


def psi_sequence(ustar) -> np.ndarray:
    """Optimizer drift ``psi_n = ||u*_{n+1} - u*_n||`` (length ``N - 1``)."""
    ustar = np.asarray(ustar, dtype=float)
    return np.linalg.norm(np.diff(ustar, axis=0), axis=1)


# ---------------------------------------------------------------------------
# Monte-Carlo gradient statistics


def _draw_A(compliance, rng, samples):
    """``('diag', phi)`` or ``('full', A, b)`` stacks of compliance draws."""
    if compliance.is_diagonal:
        return ("diag", compliance.sample_phi(rng, samples))
    A, b = compliance.sample_many(rng, samples)
    return ("full", A, b)


def _grads(obj, plant, draw, u, n):
    u = np.asarray(u, dtype=float)
    if draw[0] == "diag":
        x = draw[1] * u
    else:
        x = draw[1] @ u + draw[2]
    y = x @ plant.C.T + plant.D @ plant.disturbance.at(n)
    v = 2.0 * (y - obj.g_y.ref_at(n)) @ obj.g_y.W
    v = v @ plant.C + 2.0 * (x - obj.g_x.ref_at(n)) @ obj.g_x.W
    if draw[0] == "diag":
        g = draw[1] * v
    else:
        g = np.einsum("sji,sj->si", draw[1], v)
    return g + obj.eta * u


def sample_gradients(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, u, n: int, rng,
                     samples: int) -> np.ndarray:
    """``samples`` draws of the exact per-sample gradient ``grad_u f^(n)(u, phi)``, shape ``(samples, d)``."""
    return _grads(obj, plant, _draw_A(compliance, as_stream(rng), samples), u, n)


def compute_mu_bar_f(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, tol: float = 1e-12) -> float:
    """``mu_y lambda_min(Abar^T C^T C Abar) + mu_x lambda_min(Abar^T Abar) + eta``.

    Warns with :class:`A5Warning` when the compliance part vanishes; the
    returned value is then ``eta`` (0 without regularization).
    """
    from .model import compliance_moments

    Abar = compliance_moments(compliance)[0]
    C = plant.C
    ly = float(np.linalg.eigvalsh(Abar.T @ C.T @ C @ Abar).min())
    lx = float(np.linalg.eigvalsh(Abar.T @ Abar).min())
    base = obj.mu_y * max(ly, 0.0) + obj.mu_x * max(lx, 0.0)
    if base <= tol:
        warnings.warn("expected objective is not strongly convex under the mean compliance; "
                      "use the regularized algorithm (eta > 0)", A5Warning, stacklevel=2)
        base = 0.0
    return base + obj.eta


@dataclass(frozen=True)
class LfSigmaEstimate:
    L_f: float
    L_f_se: float
    sigma_f: float
    sigma_f_se: float
    sigma_times: tuple = ()
    sigma_per_time: tuple = ()


def _batch_se(vals):
    vals = np.asarray(vals, dtype=float)
    return float(vals.std(ddof=1) / np.sqrt(vals.size)) if vals.size > 1 else 0.0


def estimate_Lf_sigmaf(obj: StageObjective, compliance: ComplianceModel, plant: PlantModel, cset: ConstraintSet,
                       samples: int = 10_000, rng=0, times: Optional[Sequence[int]] = None, batches: int = 10,
                       include_eta: bool = False, ustar=None) -> LfSigmaEstimate:
    """Monte-Carlo ``L_f`` and ``sigma_f``.

    ``L_f = sqrt(lambda_max E[M^T M])`` with ``M = A^T K A (+ eta I)`` and
    ``K = 2 C^T W_y C + 2 W_x``: the supremum of
    ``sqrt(E||grad f(u) - grad f(v)||^2) / ||u - v||`` over all pairs, which
    dominates any finite set of sampled pairs. ``sigma_f`` is the root mean
    square deviation of the per-sample gradient at ``u*_n`` from its mean,
    maximized over ``times``. Standard errors come from ``batches`` batch means.
    """
    if samples < 10_000:
        raise ValueError("use at least 1e4 samples")
    rng = as_stream(rng)
    r_L, r_s = rng.split(2)
    Kmat = 2.0 * plant.C.T @ obj.g_y.W @ plant.C + 2.0 * obj.g_x.W
    d = compliance.dim
    eta = obj.eta if include_eta else 0.0
    draw = _draw_A(compliance, r_L, samples)
    if draw[0] == "diag":
        M = Kmat[None] * draw[1][:, :, None] * draw[1][:, None, :]
    else:
        M = np.einsum("sji,jk,skl->sil", draw[1], Kmat, draw[1])
    M = M + eta * np.eye(d)
    MtM = np.einsum("sji,sjk->sik", M, M)
    L_f = float(np.sqrt(max(np.linalg.eigvalsh(MtM.mean(axis=0)).max(), 0.0)))
    L_b = [np.sqrt(max(np.linalg.eigvalsh(b.mean(axis=0)).max(), 0.0)) for b in np.array_split(MtM, batches)]

    if times is None:
        total = plant.disturbance.total_length
        times = [0] if total is None else sorted(set(np.linspace(0, total - 1, 16).round().astype(int).tolist()))
    eq = expected_quadratic(obj, compliance, plant)
    sig, sig_se = [], []
    for k, n in enumerate(times):
        us = solve_optimal(obj, compliance, plant, cset, n) if ustar is None else np.asarray(ustar)[k]
        G = sample_gradients(obj, compliance, plant, us, n, r_s.child(), samples)
        dev = np.sum((G - eq.gradient(us, n)) ** 2, axis=1)
        sig.append(float(np.sqrt(dev.mean())))
        sig_se.append(_batch_se([np.sqrt(b.mean()) for b in np.array_split(dev, batches)]))
    j = int(np.argmax(sig))
    return LfSigmaEstimate(L_f, _batch_se(L_b), sig[j], sig_se[j], tuple(int(t) for t in times), tuple(sig))


# ---------------------------------------------------------------------------
# constants and bounds


@dataclass(frozen=True)
class TheoryConstants:
    """Constants entering the tracking bounds.

    ``L_f`` is the Lipschitz constant of the unregularized gradient; with
    ``eta > 0`` the contraction factor uses ``L_f + eta`` and ``mu_bar_f``
    already includes ``eta``. ``b1`` and ``b2`` are fitted lemma constants.
    """

    alpha: float
    L_f: float
    mu_bar_f: float
    sigma_f: float
    b_U: float
    epsilon_m: float = 0.0
    gamma_bar: float = 0.0
    b1: float = 0.0
    b2: float = 1.0
    eta: float = 0.0
    L_f_se: float = 0.0
    sigma_f_se: float = 0.0
    diagnostics: dict = field(default_factory=dict, compare=False)

    @property
    def regularized(self) -> bool:
        return self.eta > 0

    @property
    def L_eff(self) -> float:
        return self.L_f + self.eta

    @property
    def Upsilon_alpha(self) -> float:
        return 1.0 - 2.0 * self.alpha * self.mu_bar_f + self.alpha**2 * self.L_eff**2

    @property
    def xi(self) -> float:
        return self.sigma_f + self.epsilon_m

    @property
    def q_factor(self) -> float:
        """``q_alpha / b2``."""
        a = self.alpha
        return a * a * (self.xi + np.sqrt(self.xi)) + a * self.epsilon_m

    @property
    def q_alpha(self) -> float:
        return self.b2 * self.q_factor

    @property
    def b_bar(self) -> float:
        return 2.0 / self.mu_bar_f if self.mu_bar_f > 0 else np.inf

    @property
    def alpha_max(self) -> float:
        """Largest step size admitted by the limsup bound."""
        if self.regularized:
            return self.eta / (2.0 * self.L_eff**2)
        return self.mu_bar_f / (2.0 * self.L_f**2) if self.L_f > 0 else np.inf

    def with_alpha(self, alpha) -> "TheoryConstants":
        kw = {k: getattr(self, k) for k in self.__dataclass_fields__}
        kw["alpha"] = float(alpha)
        return TheoryConstants(**kw)

    def report(self) -> dict:
        out = {k: v for k, v in asdict(self).items() if k != "diagnostics"}
        out.update(Upsilon_alpha=self.Upsilon_alpha, q_alpha=self.q_alpha, xi=self.xi, b_bar=self.b_bar,
                   alpha_max=self.alpha_max, regularized=self.regularized)
        out.update({f"diag_{k}": v for k, v in self.diagnostics.items()})
        return out

    def write_report(self, path):
        with open(path, "w") as fh:
            for k, v in self.report().items():
                fh.write(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n")


def theorem1_bound(c: TheoryConstants, psi, u0_sq: float, N: int, u0_mean_norm: Optional[float] = None) -> np.ndarray:
    """Finite-time envelope on ``E||u_n - u*_n||^2`` for ``n = 0..N``.

    Evaluated by the recursion ``B_n = Y B_{n-1} + psi_{n-1}^2 + q + 2 beta_{n-1}``
    with ``beta_{n-1} = psi_{n-1} (sqrt(q) sum_{i<n} Y^{i/2} + Y^{n/2} E||u~_0||)``,
    which unrolls to the closed-form sum. ``u0_sq`` is ``E||u~_0||^2`` and
    ``u0_mean_norm`` is ``E||u~_0||`` (defaults to ``sqrt(u0_sq)``).
    """
    Y = max(c.Upsilon_alpha, 0.0)
    q = c.q_alpha
    psi = np.zeros(N) if psi is None else np.asarray(psi, dtype=float)
    if psi.size < N:
        raise ValueError(f"need {N} drift values, got {psi.size}")
    e0 = np.sqrt(u0_sq) if u0_mean_norm is None else float(u0_mean_norm)
    sq = np.sqrt(Y)
    B = np.empty(N + 1)
    B[0] = u0_sq
    geo = 0.0  # sum_{i<n} Y^{i/2}
    pw = 1.0  # Y^{(n-1)/2}
    for n in range(1, N + 1):
        geo += pw
        pw *= sq
        beta = psi[n - 1] * (np.sqrt(q) * geo + pw * e0)
        B[n] = Y * B[n - 1] + psi[n - 1] ** 2 + q + 2.0 * beta
    return B


def drift_envelope(c: TheoryConstants, psi, u0_sq: float, N: int) -> np.ndarray:
    """Envelope ``B_n = (sqrt(Y B_{n-1} + q) + psi_{n-1})^2`` for ``n = 0..N``.

    Follows from the one-step contraction and ``E||v|| <= sqrt(E||v||^2)``.
    Unlike :func:`theorem1_bound` it keeps the lag that a drifting optimizer
    adds to ``E||u~_n||``, so it stays valid for slowly moving targets.
    """
    Y = max(c.Upsilon_alpha, 0.0)
    q = c.q_alpha
    psi = np.zeros(N) if psi is None else np.asarray(psi, dtype=float)
    if psi.size < N:
        raise ValueError(f"need {N} drift values, got {psi.size}")
    B = np.empty(N + 1)
    B[0] = u0_sq
    for n in range(1, N + 1):
        B[n] = (np.sqrt(Y * B[n - 1] + q) + psi[n - 1]) ** 2
    return B


def theorem2_bound(c: TheoryConstants, alpha: Optional[float] = None, check_range: bool = True):
    """``(eps_a, eps_b, eps_c, total)`` of the limsup MSE bound.

    With ``eta > 0`` the regularized variant is used: ``eta`` replaces
    ``mu_bar_f`` and the admissible range is ``alpha < eta / (2 (L_f + eta)^2)``.
    """
    a = c.alpha if alpha is None else float(alpha)
    if check_range and not a < c.with_alpha(a).alpha_max:
        raise ValueError(f"alpha={a:g} outside the admissible range alpha < {c.alpha_max:g}")
    mu = c.eta if c.regularized else c.mu_bar_f
    if mu <= 0:
        raise ValueError("bound needs a positive monotonicity constant (or eta > 0)")
    s, em = c.sigma_f, c.epsilon_m
    eps_a = c.b2 * (s + np.sqrt(s)) / mu
    eps_b = c.b2 * (em + a * (em + np.sqrt(em))) / mu
    eps_c = c.gamma_bar**2 / mu
    bbar = 2.0 / mu
    total = a * eps_a + eps_b + eps_c + bbar / a**1.5 * np.sqrt(eps_c * (a * eps_a + eps_b))
    return float(eps_a), float(eps_b), float(eps_c), float(total)


# ---------------------------------------------------------------------------
# one-step contraction


def _ray_exit(cset, n, origin, direction, hi):
    lo = 0.0
    if cset.contains(origin + hi * direction, n, tol=0.0):
        return hi
    for _ in range(60):
        mid = 0.5 * (lo + hi)
        if cset.contains(origin + mid * direction, n, tol=0.0):
            lo = mid
        else:
            hi = mid
    return lo


def calibration_states(cset: ConstraintSet, ustar, n: int = 0, directions: int = 24,
                       fractions=(0.25, 0.5, 0.75, 0.9, 1.0), rng=None) -> np.ndarray:
    """Frozen states ``u*`` plus points along rays from ``u*`` to the boundary.

    In 2-D the rays are evenly spaced; otherwise directions are random
    (``rng`` required). The outer fractions make the grid boundary-heavy.
    """
    ustar = np.asarray(ustar, dtype=float)
    d = ustar.size
    if d == 2 and rng is None:
        th = 2 * np.pi * np.arange(directions) / directions
        dirs = np.stack([np.cos(th), np.sin(th)], axis=1)
    else:
        dirs = as_stream(0 if rng is None else rng).standard_normal((directions, d))
        dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    reach = 2.0 * cset.bound() + np.linalg.norm(ustar) + 1.0
    states = [ustar]
    for v in dirs:
        t = _ray_exit(cset, n, ustar, v, reach)
        states.extend(ustar + f * t * v for f in fractions)
    return np.array(states)


def one_step_batch(U, world, cset, obj, config, rng, n: int = 0, backend=None) -> np.ndarray:
    """Apply one update to every row of ``U`` with independent randomness per row."""
    from .engine import _kernel_arrays, _run_kernel, step

    U = np.atleast_2d(np.asarray(U, dtype=float))
    M, d = U.shape
    rng = as_stream(rng)
    cfg1 = type(config)(**{**asdict(config), "horizon": 1})
    arrs = _kernel_arrays(world, obj, cset, cfg1, 1, n)
    if arrs is None:
        return np.array([step(u, world, cset, obj, cfg1, r, n)[0] for u, r in zip(U, rng.split(M))])
    comp, xr, yr = rng.split(3)
    phi = (np.empty((0, 0, d)) if world.compliance.kind == "identity"
           else world.compliance.sample_phi(comp, M)[:, None, :])
    meas = world.measurement
    wx = meas._draw(meas.x_cov, xr, M, d)[:, None, :] if meas.x_cov is not None else np.empty((0, 0, d))
    wy = (meas._draw(meas.y_cov, yr, M, world.dim_y)[:, None, :] if meas.y_cov is not None
          else np.empty((0, 0, world.dim_y)))
    return _run_kernel(U, phi, wx, wy, arrs, False, resolve_backend(backend))[2]


@dataclass(frozen=True)
class ContractionResult:
    states: np.ndarray
    lhs: np.ndarray
    lhs_se: np.ndarray
    rhs: np.ndarray

    @property
    def slack(self) -> np.ndarray:
        return self.rhs - self.lhs

    @property
    def worst_index(self) -> int:
        return int(np.argmin(self.slack / np.maximum(self.lhs_se, 1e-300)))

    @property
    def worst_slack(self) -> float:
        return float(self.slack.min())

    @property
    def passed(self) -> bool:
        return bool(np.all(self.slack >= -3.0 * self.lhs_se))


def _one_step_msd(states, world, cset, obj, config, ustar, rng, n, draws, backend):
    lhs, se = [], []
    for u, r in zip(states, as_stream(rng).split(len(states))):
        U1 = one_step_batch(np.tile(u, (draws, 1)), world, cset, obj, config, r, n, backend)
        e = np.sum((U1 - ustar) ** 2, axis=1)
        lhs.append(e.mean())
        se.append(e.std(ddof=1) / np.sqrt(draws))
    return np.array(lhs), np.array(se)


def contraction_check(world, cset, obj, config, constants: TheoryConstants, states, ustar, rng, n: int = 0,
                      draws: int = 100_000, backend=None) -> ContractionResult:
    """Monte-Carlo ``E||u_+ - u*||^2`` against ``Upsilon ||u - u*||^2 + q_alpha`` at frozen states."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    ustar = np.asarray(ustar, dtype=float)
    lhs, se = _one_step_msd(states, world, cset, obj, config, ustar, rng, n, draws, backend)
    rhs = constants.Upsilon_alpha * np.sum((states - ustar) ** 2, axis=1) + constants.q_alpha
    return ContractionResult(states, lhs, se, rhs)


def fit_b2(world, cset, obj, config, constants: TheoryConstants, states, ustar, rng, n: int = 0,
           draws: int = 20_000, backend=None):
    """Smallest ``b2`` making the one-step inequality hold at every calibration state.

    Returns ``(b2, diagnostics)``. When the forcing factor vanishes (no
    compliance noise, exact measurements) ``b2`` is 0 and the diagnostics
    record the largest excess, which should be nonpositive.
    """
    states = np.atleast_2d(np.asarray(states, dtype=float))
    ustar = np.asarray(ustar, dtype=float)
    lhs, se = _one_step_msd(states, world, cset, obj, config, ustar, rng, n, draws, backend)
    excess = lhs - constants.Upsilon_alpha * np.sum((states - ustar) ** 2, axis=1)
    factor = constants.q_factor
    k = int(np.argmax(excess))
    diag = {"b2_states": len(states), "b2_draws": draws, "b2_max_excess": float(excess[k]),
            "b2_argmax_state": states[k].tolist()}
    if factor <= 0:
        return 0.0, diag
    return float(max(excess[k], 0.0) / factor), diag


def fit_b1(world, obj, u, rng, scales=(0.05, 0.1, 0.2, 0.4), n: int = 0, samples: int = 20_000):
    """Regress the mean gradient-estimation error on ``epsilon_m``.

    Noise covariances are the configured ones scaled by ``s**2`` for each
    ``s`` in ``scales`` (identity covariances when the world is noiseless).
    Returns ``(b1, diagnostics)`` with a through-origin slope and its R^2.
    """
    from .engine import estimate_gradient, recover_A

    u = np.asarray(u, dtype=float)
    d, m = world.dim_u, world.dim_y
    base = world.measurement
    cy = np.eye(m) if base.y_cov is None else base.y_cov
    cx = np.eye(d) if base.x_cov is None else base.x_cov
    plant, comp = world.plant, world.compliance
    eps, err = [], []
    for s, r in zip(scales, as_stream(rng).split(len(scales))):
        meas = MeasurementModel(y_cov=s * s * cy, x_cov=s * s * cx)
        rc, rx, ry = r.split(3)
        A, b = comp.sample_many(rc, samples)
        wx, wy = meas.draw(rx, ry, samples, d, m)
        e = np.empty(samples)
        for k in range(samples):
            x = A[k] @ u + b[k]
            y = plant.C @ x + plant.D @ plant.disturbance.at(n)
            g_true = estimate_gradient(A[k], plant.C, y, x, u, obj, n)
            Ac = recover_A(u, x + wx[k], "exact", fallback=comp.mean_diag())
            e[k] = np.linalg.norm(estimate_gradient(Ac, plant.C, y + wy[k], x + wx[k], u, obj, n) - g_true)
        eps.append(meas.epsilon_m)
        err.append(e.mean())
    eps, err = np.array(eps), np.array(err)
    b1 = float(eps @ err / (eps @ eps))
    resid = err - b1 * eps
    r2 = float(1.0 - resid @ resid / max(((err - err.mean()) ** 2).sum(), 1e-300))
    return b1, {"b1_eps": eps.tolist(), "b1_err": err.tolist(), "b1_r2": r2}


def estimate_constants(world, cset, obj, config, rng, *, horizon: Optional[int] = None, start: int = 0,
                       samples: int = 20_000, calib_draws: int = 20_000, calib_directions: int = 24,
                       fit_lemma: bool = True, ustar_path=None, backend=None) -> TheoryConstants:
    """Compute or estimate every constant for ``(world, set, objective, alpha)``.

    ``b2`` is calibrated on the optimizer of step ``start`` using
    :func:`calibration_states`; pass ``fit_lemma=False`` to keep ``b2 = 1``.
    """
    rng = as_stream(rng)
    r_lf, r_b2, r_b1 = rng.split(3)
    comp, plant = world.compliance, world.plant
    N = horizon if horizon is not None else (plant.disturbance.total_length or 1)
    if ustar_path is None:
        ustar_path = optimal_path(obj, comp, plant, cset, N, start=start, backend=backend)
    psi = psi_sequence(ustar_path)
    gamma_bar = float(psi.max()) if psi.size else 0.0
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", A5Warning)
        mu = compute_mu_bar_f(obj, comp, plant)
    times = None
    if plant.disturbance.total_length is None:
        times = [start]
    else:
        times = sorted(set(np.linspace(start, start + N - 1, 16).round().astype(int).tolist()))
    est = estimate_Lf_sigmaf(obj, comp, plant, cset, samples, r_lf, times=times,
                             ustar=ustar_path[np.asarray(times) - start])
    c = TheoryConstants(alpha=config.alpha, L_f=est.L_f, mu_bar_f=mu, sigma_f=est.sigma_f, b_U=cset.bound(),
                        epsilon_m=world.measurement.epsilon_m, gamma_bar=gamma_bar, eta=obj.eta,
                        L_f_se=est.L_f_se, sigma_f_se=est.sigma_f_se,
                        diagnostics={"sigma_times": list(est.sigma_times)})
    if not fit_lemma:
        return c
    us = ustar_path[0]
    states = calibration_states(cset, us, start, directions=calib_directions,
                                rng=None if comp.dim == 2 else r_b2.child())
    b2, diag = fit_b2(world, cset, obj, config, c, states, us, r_b2, start, calib_draws, backend)
    b1, d1 = (0.0, {}) if world.measurement.noiseless else fit_b1(world, obj, us, r_b1, n=start)
    kw = {k: getattr(c, k) for k in c.__dataclass_fields__}
    kw.update(b1=b1, b2=b2, diagnostics={**c.diagnostics, **diag, **d1})
    return TheoryConstants(**kw)
