"""Hot loops, each in two flavours.

``*_nb`` functions are numba-compiled scalar loops. ``*_np`` functions are the
pure-numpy fallback, vectorized over the batch axis (replications, time steps
or load cases). The dispatchers at the bottom pick one per the ``backend``
argument or the ``SOFO_BACKEND`` environment flag.

Set codes used by the projection kernels:

* ``BALL``      -- ``||u - center|| <= radius``
* ``BOX``       -- ``lo <= u <= hi``
* ``INVERTER``  -- product of ``{P^2 + Q^2 <= s^2, 0 <= P <= pbar}``; ``u`` is
  laid out as ``[P_1..P_A, Q_1..Q_A]`` and ``pbar`` is an ``(N, A)`` schedule.
"""

import math

import numpy as np

from ._jit import njit, resolve_backend

BALL, BOX, INVERTER = 0, 1, 2

RECOVER_EXACT, RECOVER_ORACLE, RECOVER_IDENTITY = 0, 1, 2
ZERO_DENOMINATOR = 1e-8


# ---------------------------------------------------------------------------
# projections


@njit
def _inverter_nb(p, q, s, pbar):
    # same operation order as inverter_project_np so both backends agree bitwise
    r = math.hypot(p, q)
    if 0.0 <= p <= pbar and r <= s:
        return p, q
    best_p, best_q, best_d = 0.0, 0.0, math.inf
    if r > s:
        f = s / r
        cp = f * p
        cq = f * q
        if 0.0 <= cp <= pbar:
            best_p, best_q = cp, cq
            best_d = (cp - p) ** 2 + (cq - q) ** 2
    for p0 in (0.0, pbar):
        if p0 <= s:
            h = math.sqrt(s * s - p0 * p0)
            cq = min(max(q, -h), h)
            d = (p0 - p) ** 2 + (cq - q) ** 2
            if d < best_d:
                best_p, best_q, best_d = p0, cq, d
    return best_p, best_q


@njit
def _project_row_nb(u, code, center, radius, lo, hi, smax, pbar_row):
    d = u.shape[0]
    if code == BALL:
        acc = 0.0
        for i in range(d):
            acc += (u[i] - center[i]) ** 2
        nrm = math.sqrt(acc)
        if nrm > radius:
            f = radius / nrm
            for i in range(d):
                u[i] = center[i] + f * (u[i] - center[i])
    elif code == BOX:
        for i in range(d):
            u[i] = min(max(u[i], lo[i]), hi[i])
    else:
        na = smax.shape[0]
        for i in range(na):
            p, q = _inverter_nb(u[i], u[na + i], smax[i], pbar_row[i])
            u[i] = p
            u[na + i] = q


def inverter_project_np(P, Q, s, pbar):
    """Vectorized projection onto ``{P^2+Q^2 <= s^2, 0 <= P <= pbar}``."""
    P, Q, s, pbar = np.broadcast_arrays(*(np.asarray(a, dtype=float) for a in (P, Q, s, pbar)))
    r = np.hypot(P, Q)
    feasible = (P >= 0.0) & (P <= pbar) & (r <= s)

    cands = []
    with np.errstate(invalid="ignore", divide="ignore", over="ignore"):
        f = np.where(r > s, s / r, np.nan)
        ap, aq = f * P, f * Q
    ok = (r > s) & (ap >= 0.0) & (ap <= pbar)
    cands.append((np.where(ok, ap, np.nan), np.where(ok, aq, np.nan)))
    for p0 in (np.zeros_like(P), pbar):
        valid = p0 <= s
        h = np.sqrt(np.where(valid, s * s - p0 * p0, 0.0))
        cq = np.clip(Q, -h, h)
        cands.append((np.where(valid, p0, np.nan), np.where(valid, cq, np.nan)))

    best_p, best_q = np.zeros_like(P), np.zeros_like(Q)
    best_d = np.full_like(P, np.inf)
    for cp, cq in cands:
        d = (cp - P) ** 2 + (cq - Q) ** 2
        better = d < best_d  # NaN candidates never win
        best_p = np.where(better, cp, best_p)
        best_q = np.where(better, cq, best_q)
        best_d = np.where(better, d, best_d)
    return np.where(feasible, P, best_p), np.where(feasible, Q, best_q)


def project_batch_np(U, code, center, radius, lo, hi, smax, pbar_rows):
    """Project each row of ``U``; ``pbar_rows`` broadcasts against the rows."""
    U = np.asarray(U, dtype=float)
    if code == BALL:
        diff = U - center
        nrm = np.linalg.norm(diff, axis=-1, keepdims=True)
        with np.errstate(divide="ignore", invalid="ignore"):
            f = np.where(nrm > radius, radius / nrm, 1.0)
        return center + f * diff
    if code == BOX:
        return np.clip(U, lo, hi)
    na = smax.shape[0]
    P, Q = inverter_project_np(U[..., :na], U[..., na:], smax, pbar_rows)
    return np.concatenate([P, Q], axis=-1)


# ---------------------------------------------------------------------------
# online feedback optimization loop


@njit
def ofo_batch_nb(u0, phi, wx, wy, mode, mean_diag, C, Dr, Wy2, yref, Wx2, xref, eta, alpha,
                 code, center, radius, lo, hi, smax, pbar, record):
    R, d = u0.shape
    N = Dr.shape[0]
    m = C.shape[0]
    U = np.empty((R, N, d))
    cost = np.empty((R, N))
    if record:
        X = np.empty((R, N, d))
        Xh = np.empty((R, N, d))
        Y = np.empty((R, N, m))
        Yh = np.empty((R, N, m))
        G = np.empty((R, N, d))
    else:
        X = np.empty((0, 0, d))
        Xh = np.empty((0, 0, d))
        Y = np.empty((0, 0, m))
        Yh = np.empty((0, 0, m))
        G = np.empty((0, 0, d))
    uf = np.empty((R, d))
    has_phi = phi.shape[0] > 0
    has_wx = wx.shape[0] > 0
    has_wy = wy.shape[0] > 0
    u = np.empty(d)
    x = np.empty(d)
    xh = np.empty(d)
    y = np.empty(m)
    yh = np.empty(m)
    ey = np.empty(m)
    gy = np.empty(m)
    v = np.empty(d)
    g = np.empty(d)
    for r in range(R):
        for i in range(d):
            u[i] = u0[r, i]
        for n in range(N):
            for i in range(d):
                U[r, n, i] = u[i]
                a_true = phi[r, n, i] if has_phi else 1.0
                x[i] = a_true * u[i]
                xh[i] = x[i] + (wx[r, n, i] if has_wx else 0.0)
            for k in range(m):
                acc = Dr[n, k]
                for i in range(d):
                    acc += C[k, i] * x[i]
                y[k] = acc
                yh[k] = acc + (wy[r, n, k] if has_wy else 0.0)
            # realized stage cost on true signals
            c = 0.0
            for k in range(m):
                ey[k] = y[k] - yref[n, k]
            for k in range(m):
                acc = 0.0
                for j in range(m):
                    acc += Wy2[k, j] * ey[j]
                c += 0.5 * ey[k] * acc
            for i in range(d):
                acc = 0.0
                for j in range(d):
                    acc += Wx2[i, j] * (x[j] - xref[n, j])
                c += 0.5 * (x[i] - xref[n, i]) * acc
            uu = 0.0
            for i in range(d):
                uu += u[i] * u[i]
            cost[r, n] = c + 0.5 * eta * uu
            # gradient estimate from measurements
            for k in range(m):
                acc = 0.0
                for j in range(m):
                    acc += Wy2[k, j] * (yh[j] - yref[n, j])
                gy[k] = acc
            for i in range(d):
                acc = 0.0
                for k in range(m):
                    acc += C[k, i] * gy[k]
                for j in range(d):
                    acc += Wx2[i, j] * (xh[j] - xref[n, j])
                v[i] = acc
            for i in range(d):
                if mode == 0:
                    if abs(u[i]) > ZERO_DENOMINATOR:
                        a = xh[i] / u[i]
                    else:
                        a = mean_diag[i]
                elif mode == 1:
                    a = phi[r, n, i] if has_phi else 1.0
                else:
                    a = 1.0
                g[i] = a * v[i] + eta * u[i]
            if record:
                for i in range(d):
                    X[r, n, i] = x[i]
                    Xh[r, n, i] = xh[i]
                    G[r, n, i] = g[i]
                for k in range(m):
                    Y[r, n, k] = y[k]
                    Yh[r, n, k] = yh[k]
            for i in range(d):
                u[i] = u[i] - alpha * g[i]
            _project_row_nb(u, code, center, radius, lo, hi, smax, pbar[n])
        for i in range(d):
            uf[r, i] = u[i]
    return U, cost, uf, X, Xh, Y, Yh, G


def ofo_batch_np(u0, phi, wx, wy, mode, mean_diag, C, Dr, Wy2, yref, Wx2, xref, eta, alpha,
                 code, center, radius, lo, hi, smax, pbar, record):
    R, d = u0.shape
    N = Dr.shape[0]
    m = C.shape[0]
    U = np.empty((R, N, d))
    cost = np.empty((R, N))
    shp = (R, N) if record else (0, 0)
    X, Xh, G = (np.empty(shp + (d,)) for _ in range(3))
    Y, Yh = (np.empty(shp + (m,)) for _ in range(2))
    has_phi, has_wx, has_wy = phi.shape[0] > 0, wx.shape[0] > 0, wy.shape[0] > 0
    CT = C.T
    u = np.array(u0, dtype=float)
    for n in range(N):
        U[:, n] = u
        a_true = phi[:, n] if has_phi else 1.0
        x = a_true * u
        xh = x + wx[:, n] if has_wx else x
        y = x @ CT + Dr[n]
        yh = y + wy[:, n] if has_wy else y
        ey = y - yref[n]
        ex = x - xref[n]
        cost[:, n] = (0.5 * np.einsum("rk,rk->r", ey, ey @ Wy2.T)
                      + 0.5 * np.einsum("ri,ri->r", ex, ex @ Wx2.T)
                      + 0.5 * eta * np.einsum("ri,ri->r", u, u))
        v = ((yh - yref[n]) @ Wy2.T) @ C + (xh - xref[n]) @ Wx2.T
        if mode == RECOVER_EXACT:
            big = np.abs(u) > ZERO_DENOMINATOR
            a = np.where(big, np.divide(xh, u, out=np.zeros_like(u), where=big), mean_diag)
        elif mode == RECOVER_ORACLE:
            a = phi[:, n] if has_phi else np.ones_like(u)
        else:
            a = 1.0
        g = a * v + eta * u
        if record:
            X[:, n], Xh[:, n], Y[:, n], Yh[:, n], G[:, n] = x, xh, y, yh, g
        u = project_batch_np(u - alpha * g, code, center, radius, lo, hi, smax, pbar[n])
    return U, cost, u, X, Xh, Y, Yh, G


# ---------------------------------------------------------------------------
# oracle: projected gradient on the exact expected objective


@njit
def oracle_path_nb(H, g, step, tol, max_iter, u_init, code, center, radius, lo, hi, smax, pbar):
    N, d = g.shape
    out = np.empty((N, d))
    iters = np.zeros(N, dtype=np.int64)
    u = u_init.copy()
    w = np.empty(d)
    for n in range(N):
        _project_row_nb(u, code, center, radius, lo, hi, smax, pbar[n])
        k = 0
        while k < max_iter:
            for i in range(d):
                acc = g[n, i]
                for j in range(d):
                    acc += H[i, j] * u[j]
                w[i] = u[i] - step * acc
            _project_row_nb(w, code, center, radius, lo, hi, smax, pbar[n])
            diff = 0.0
            for i in range(d):
                diff += (w[i] - u[i]) ** 2
                u[i] = w[i]
            k += 1
            if math.sqrt(diff) < tol:
                break
        iters[n] = k
        for i in range(d):
            out[n, i] = u[i]
    return out, iters


def oracle_path_np(H, g, step, tol, max_iter, u_init, code, center, radius, lo, hi, smax, pbar):
    N, d = g.shape
    U = project_batch_np(np.tile(u_init, (N, 1)), code, center, radius, lo, hi, smax, pbar)
    iters = np.zeros(N, dtype=np.int64)
    active = np.arange(N)
    k = 0
    while active.size and k < max_iter:
        Ua = U[active]
        W = project_batch_np(Ua - step * (Ua @ H.T + g[active]), code, center, radius, lo, hi, smax, pbar[active])
        diff = np.linalg.norm(W - Ua, axis=1)
        U[active] = W
        k += 1
        iters[active] = k
        active = active[diff >= tol]
    return U, iters


# ---------------------------------------------------------------------------
# radial power flow: backward/forward sweep on branch currents


@njit
def bfs_batch_nb(parent, Z, S, V0, tol, max_iter):
    B, n = S.shape
    V = V0.copy()
    J = np.empty(n, dtype=np.complex128)
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=np.bool_)
    for b in range(B):
        for it in range(max_iter):
            J[0] = 0.0
            for k in range(1, n):
                J[k] = (S[b, k] / V[b, k]).conjugate()
            for k in range(n - 1, 0, -1):
                J[parent[k]] += J[k]
            dmax = 0.0
            for k in range(1, n):
                vn = V[b, parent[k]] - Z[k] * J[k]
                dv = abs(vn - V[b, k])
                if dv > dmax or dv != dv:
                    dmax = dv
                V[b, k] = vn
            iters[b] = it + 1
            if dmax < tol:
                conv[b] = True
                break
            if not dmax < 1e6:
                break
    return V, iters, conv


def bfs_batch_np(T, Z, S, V0, tol, max_iter):
    """Same sweep in matrix form: ``J = I T^T`` and ``V = V_root - (Z J) T``.

    ``T[k, j] = 1`` when node ``j`` lies in the subtree hanging below branch ``k``.
    """
    V = np.array(V0, dtype=complex)
    B = S.shape[0]
    iters = np.zeros(B, dtype=np.int64)
    conv = np.zeros(B, dtype=bool)
    active = np.arange(B)
    root = V[:, :1].copy()
    for it in range(max_iter):
        Va = V[active]
        with np.errstate(all="ignore"):
            I = np.conj(S[active] / Va)
            I[:, 0] = 0.0
            J = I @ T.T
            Vn = root[active] - (Z * J) @ T
            Vn[:, 0] = root[active, 0]
            dmax = np.max(np.abs(Vn - Va), axis=1)
        V[active] = Vn
        iters[active] = it + 1
        done = dmax < tol
        conv[active[done]] = True
        active = active[~done & (dmax < 1e6)]
        if not active.size:
            break
    return V, iters, conv


# ---------------------------------------------------------------------------
# dispatchers


def ofo_batch(*args, backend=None):
    if resolve_backend(backend) == "numba":
        return ofo_batch_nb(*args)
    return ofo_batch_np(*args)


def oracle_path(*args, backend=None):
    if resolve_backend(backend) == "numba":
        return oracle_path_nb(*args)
    return oracle_path_np(*args)


def inverter_project(P, Q, s, pbar, backend=None):
    if resolve_backend(backend) == "numba" and np.ndim(P) == 0:
        return _inverter_nb(float(P), float(Q), float(s), float(pbar))
    return inverter_project_np(P, Q, s, pbar)
