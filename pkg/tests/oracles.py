"""Independent reference implementations used only by the tests."""

import numpy as np


def _slices(cset, xs, ylo, yhi, n, h=1e-3, iters=60):
    """Exact vertical slices ``[lo, hi]`` of a convex 2-D set at each ``x`` (NaN when empty)."""
    ys = np.append(np.arange(ylo, yhi, h), yhi)
    X, Y = np.meshgrid(xs, ys, indexing="ij")
    ok = cset.contains_many(np.stack([X, Y], axis=-1).reshape(-1, 2), n, tol=0.0).reshape(X.shape)
    has = ok.any(axis=1)
    seed = np.where(has, ys[np.argmax(ok, axis=1)], np.nan)
    out = []
    for end in (ylo - 1.0, yhi + 1.0):
        a, b = seed.copy(), np.full_like(seed, end)
        for _ in range(iters):
            m = 0.5 * (a + b)
            inside = cset.contains_many(np.column_stack([xs, m]), n, tol=0.0)
            a = np.where(inside, m, a)
            b = np.where(inside, b, m)
        out.append(a)
    lo, hi = out
    return np.where(has, lo, np.nan), np.where(has, hi, np.nan)


def grid_project(cset, u, n=0, levels=((1e-2, None), (1e-4, 3e-2), (1e-6, 3e-4))):
    """Nearest feasible point of a convex 2-D set from membership queries only.

    Grid over the first coordinate (refined around the incumbent at each
    level); along the second, each slice is bracketed by bisection so the
    only discretization error is in the first coordinate.
    """
    lo, hi = cset.bounding_box(n)
    best = None
    for h, window in levels:
        a, b = (lo[0], hi[0]) if window is None else (max(best[0] - window, lo[0]), min(best[0] + window, hi[0]))
        xs = np.append(np.arange(a, b, h), b)
        ylo, yhi = _slices(cset, xs, lo[1], hi[1], n, h=(hi[1] - lo[1]) / 200)
        keep = ~np.isnan(ylo)
        xs, ylo, yhi = xs[keep], ylo[keep], yhi[keep]
        y = np.clip(u[1], ylo, yhi)
        k = int(np.argmin((xs - u[0]) ** 2 + (y - u[1]) ** 2))
        best = np.array([xs[k], y[k]])
    return best


def feasible_samples(cset, k, rng, n=0):
    lo, hi = cset.bounding_box(n)
    out = []
    while sum(len(o) for o in out) < k:
        P = rng.uniform(lo, hi, (4 * k, lo.size))
        out.append(P[cset.contains_many(P, n, tol=0.0)])
    return np.concatenate(out)[:k]


def vi_violation(cset, u, p, V):
    """``max_v (u - p)^T (v - p)`` over the feasible samples ``V``; nonpositive at the projection."""
    return float(np.max((V - p) @ (u - p)))


def newton_raphson_pf(case, s_load_pu, tol=1e-12, max_iter=50):
    """Polar Newton-Raphson on the bus admittance matrix; slack at the root.

    Returns voltage magnitudes in the case's internal node order.
    """
    n = case.n_nodes
    parent = case.parent
    z = case.z_pu
    Y = np.zeros((n, n), dtype=complex)
    for k in range(1, n):
        y = 1.0 / z[k]
        i = parent[k]
        Y[i, i] += y
        Y[k, k] += y
        Y[i, k] -= y
        Y[k, i] -= y
    S = -np.asarray(s_load_pu, dtype=complex)
    Vm = np.ones(n)
    Va = np.zeros(n)
    pq = np.arange(1, n)
    for _ in range(max_iter):
        V = Vm * np.exp(1j * Va)
        I = Y @ V
        Sc = V * np.conj(I)
        mis = np.concatenate([(Sc - S).real[pq], (Sc - S).imag[pq]])
        if np.max(np.abs(mis)) < tol:
            return Vm
        dV = np.diag(V)
        dI = np.diag(I)
        dS_dVa = 1j * dV @ np.conj(dI - Y @ dV)
        dS_dVm = dV @ np.conj(Y @ np.diag(V / Vm)) + np.conj(dI) @ np.diag(V / Vm)
        J = np.block([[dS_dVa.real[np.ix_(pq, pq)], dS_dVm.real[np.ix_(pq, pq)]],
                      [dS_dVa.imag[np.ix_(pq, pq)], dS_dVm.imag[np.ix_(pq, pq)]]])
        dx = np.linalg.solve(J, -mis)
        Va[pq] += dx[: n - 1]
        Vm[pq] += dx[n - 1 :]
    raise RuntimeError("reference power flow did not converge")


def two_bus_voltage(R, X, P, Q):
    """Receiving-end magnitude for a load ``P + jQ`` behind ``R + jX`` from a 1 pu source.

    ``V^4 + (2(RP + XQ) - 1) V^2 + (R^2 + X^2)(P^2 + Q^2) = 0``, larger root.
    """
    b = 2.0 * (R * P + X * Q) - 1.0
    c = (R * R + X * X) * (P * P + Q * Q)
    return np.sqrt((-b + np.sqrt(b * b - 4.0 * c)) / 2.0)
