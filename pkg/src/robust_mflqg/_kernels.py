"""Hot loops: structured Riccati RK4 and the Euler-Maruyama closed loop.

Each kernel exists twice, a numba ``@njit`` version and a plain numpy
version. Set ``ROBUST_MFLQG_JIT=0`` before import to use numpy only (numba
is also skipped silently when it is not installed). Both versions follow
the same arithmetic up to summation order.
"""

from __future__ import annotations

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

JIT_ENABLED = HAVE_NUMBA and os.environ.get("ROBUST_MFLQG_JIT", "1") not in ("0", "false", "no")

# status codes shared by the kernels
OK = 0
ESCAPED = 1
NONFINITE_FIELD = 2


# -- Riccati RK4 -------------------------------------------------------------
#
# One kernel integrates every matrix ODE of the form
#     dX/dt = C + D X - X E - X F X
# with coefficients sampled at nodes and midpoints in stepping order
# (leading length 1 means constant). ``h`` is signed: negative steps backward.


def _riccati_field_np(C, D, E, F, X, quad):
    out = C + D @ X - X @ E
    if quad:
        out = out - X @ (F @ X)
    return out


def riccati_rk4_numpy(C, D, E, F, X0, h, steps, blowup_norm, quad):
    vals = np.empty((steps + 1,) + X0.shape)
    ders = np.empty_like(vals)
    cC, cD, cE, cF = C.shape[0] > 1, D.shape[0] > 1, E.shape[0] > 1, F.shape[0] > 1

    def coef(k2):
        return (C[k2 if cC else 0], D[k2 if cD else 0], E[k2 if cE else 0], F[k2 if cF else 0])

    X = X0.copy()
    vals[0] = X
    for k in range(steps):
        c0, c1, c2 = coef(2 * k), coef(2 * k + 1), coef(2 * k + 2)
        k1 = _riccati_field_np(*c0, X, quad)
        if not np.all(np.isfinite(k1)):
            return vals, ders, k + 1, NONFINITE_FIELD
        ders[k] = k1
        k2 = _riccati_field_np(*c1, X + 0.5 * h * k1, quad)
        k3 = _riccati_field_np(*c1, X + 0.5 * h * k2, quad)
        k4 = _riccati_field_np(*c2, X + h * k3, quad)
        Xn = X + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not np.all(np.isfinite(Xn)) or np.sqrt(np.sum(Xn * Xn)) > blowup_norm:
            return vals, ders, k + 1, ESCAPED
        X = Xn
        vals[k + 1] = X
    k1 = _riccati_field_np(*coef(2 * steps), X, quad)
    if not np.all(np.isfinite(k1)):
        return vals, ders, steps + 1, NONFINITE_FIELD
    ders[steps] = k1
    return vals, ders, steps + 1, OK


def _riccati_field_loops(C, D, E, F, X, quad, out, tmp):
    m, p = X.shape
    for i in range(m):
        for j in range(p):
            acc = C[i, j]
            for q in range(m):
                acc += D[i, q] * X[q, j]
            for q in range(p):
                acc -= X[i, q] * E[q, j]
            out[i, j] = acc
    if quad:
        # tmp = F X  (p x p)
        for i in range(p):
            for j in range(p):
                acc = 0.0
                for q in range(m):
                    acc += F[i, q] * X[q, j]
                tmp[i, j] = acc
        for i in range(m):
            for j in range(p):
                acc = 0.0
                for q in range(p):
                    acc += X[i, q] * tmp[q, j]
                out[i, j] -= acc


def _riccati_rk4_loops(C, D, E, F, X0, h, steps, blowup_norm, quad):
    m, p = X0.shape
    vals = np.empty((steps + 1, m, p))
    ders = np.empty((steps + 1, m, p))
    k1 = np.empty((m, p))
    k2 = np.empty((m, p))
    k3 = np.empty((m, p))
    k4 = np.empty((m, p))
    Xs = np.empty((m, p))
    tmp = np.empty((p, p))
    X = X0.copy()
    vals[0] = X
    nC, nD, nE, nF = C.shape[0], D.shape[0], E.shape[0], F.shape[0]
    for k in range(steps):
        i0, i1, i2 = 2 * k, 2 * k + 1, 2 * k + 2
        _riccati_field_loops(C[i0 if nC > 1 else 0], D[i0 if nD > 1 else 0],
                             E[i0 if nE > 1 else 0], F[i0 if nF > 1 else 0], X, quad, k1, tmp)
        finite = True
        for i in range(m):
            for j in range(p):
                if not np.isfinite(k1[i, j]):
                    finite = False
        if not finite:
            return vals, ders, k + 1, NONFINITE_FIELD
        ders[k] = k1
        for i in range(m):
            for j in range(p):
                Xs[i, j] = X[i, j] + 0.5 * h * k1[i, j]
        c1, d1 = C[i1 if nC > 1 else 0], D[i1 if nD > 1 else 0]
        e1, f1 = E[i1 if nE > 1 else 0], F[i1 if nF > 1 else 0]
        _riccati_field_loops(c1, d1, e1, f1, Xs, quad, k2, tmp)
        for i in range(m):
            for j in range(p):
                Xs[i, j] = X[i, j] + 0.5 * h * k2[i, j]
        _riccati_field_loops(c1, d1, e1, f1, Xs, quad, k3, tmp)
        for i in range(m):
            for j in range(p):
                Xs[i, j] = X[i, j] + h * k3[i, j]
        _riccati_field_loops(C[i2 if nC > 1 else 0], D[i2 if nD > 1 else 0],
                             E[i2 if nE > 1 else 0], F[i2 if nF > 1 else 0], Xs, quad, k4, tmp)
        norm2 = 0.0
        bad = False
        for i in range(m):
            for j in range(p):
                v = X[i, j] + (h / 6.0) * (k1[i, j] + 2.0 * k2[i, j] + 2.0 * k3[i, j] + k4[i, j])
                if not np.isfinite(v):
                    bad = True
                Xs[i, j] = v
                norm2 += v * v
        if bad or np.sqrt(norm2) > blowup_norm:
            return vals, ders, k + 1, ESCAPED
        for i in range(m):
            for j in range(p):
                X[i, j] = Xs[i, j]
        vals[k + 1] = X
    i0 = 2 * steps
    _riccati_field_loops(C[i0 if nC > 1 else 0], D[i0 if nD > 1 else 0],
                         E[i0 if nE > 1 else 0], F[i0 if nF > 1 else 0], X, quad, k1, tmp)
    for i in range(m):
        for j in range(p):
            if not np.isfinite(k1[i, j]):
                return vals, ders, steps + 1, NONFINITE_FIELD
    ders[steps] = k1
    return vals, ders, steps + 1, OK


# -- Euler-Maruyama closed loop ---------------------------------------------
#
# Agents are simulated as deviations delta_i = x_i - xbar(t) from the
# deterministic mean path. With xi the population mean of delta,
#     d delta_i = (Abar delta_i + L xi) dt + sigma dW_i,   L = Gbar - R2^-1 Ptilde.
# Node quantities (index k) are precomputed by the caller:
#     xbar[k], Ku[k] = -R1^-1 B^T K, uoff[k] = -R1^-1 B^T (phi - P l),
#     Fx[k] = -R2^-1 (P + Ptilde), foff[k] = -R2^-1 (s_bar - Ptilde xbar),
#     Pt[k] = Ptilde, w[k] = trapezoid weight (with discount).


def em_closed_loop_numpy(delta0, dW, dt, Abar, L, sigma, xbar, Ku, uoff, Fx, foff,
                         Q, Gamma, eta, R1, R2, H, Pt, w, terminal, state_limit, record):
    R, N, n = delta0.shape
    steps = dW.shape[2]
    delta = delta0.copy()
    cost = np.zeros((R, N))
    penalty = np.zeros(R)
    mf_err = np.zeros((R, steps + 1))
    mf_x = np.zeros((R, steps + 1))
    xhat_path = np.zeros((R, steps + 1, n)) if record else np.zeros((R, 0, n))
    f_path = np.zeros((R, steps + 1, n)) if record else np.zeros((R, 0, n))
    for k in range(steps + 1):
        xi = np.sum(np.sort(delta, axis=1), axis=1) / N  # (R, n)
        x = xbar[k] + delta
        xhat = xbar[k] + xi
        if np.max(np.abs(x)) > state_limit or not np.all(np.isfinite(x)):
            return cost, penalty, mf_err, mf_x, xhat_path, f_path, ESCAPED
        e = x - (xhat @ Gamma.T)[:, None, :] - eta
        u = x @ Ku[k].T + uoff[k]
        f = xhat @ Fx[k].T + foff[k]
        fR = np.einsum("ri,ij,rj->r", f, R2, f)
        run = np.einsum("rai,ij,raj->ra", e, Q, e) + np.einsum("rai,ij,raj->ra", u, R1, u)
        cost += 0.5 * w[k] * (run - fR[:, None])
        penalty -= 0.5 * w[k] * fR
        ps = xi @ Pt[k].T
        mf_x[:, k] = np.sum(xi * xi, axis=1)
        mf_err[:, k] = mf_x[:, k] + np.sum(ps * ps, axis=1)
        if record:
            xhat_path[:, k] = xhat
            f_path[:, k] = f
        if k == steps:
            if terminal:
                cost += 0.5 * np.einsum("rai,ij,raj->ra", x, H, x)
            break
        drift = delta @ Abar[k].T + (xi @ L[k].T)[:, None, :]
        delta = delta + dt * drift + dW[:, :, k, :] @ sigma.T
    return cost, penalty, mf_err, mf_x, xhat_path, f_path, OK


def _em_closed_loop_loops(delta0, dW, dt, Abar, L, sigma, xbar, Ku, uoff, Fx, foff,
                          Q, Gamma, eta, R1, R2, H, Pt, w, terminal, state_limit, record):
    R, N, n = delta0.shape
    steps = dW.shape[2]
    d = dW.shape[3]
    r = Ku.shape[1]
    cost = np.zeros((R, N))
    penalty = np.zeros(R)
    mf_err = np.zeros((R, steps + 1))
    mf_x = np.zeros((R, steps + 1))
    nrec = steps + 1 if record else 0
    xhat_path = np.zeros((R, nrec, n))
    f_path = np.zeros((R, nrec, n))
    delta = np.empty((N, n))
    perm = np.empty((n, N), dtype=np.int64)
    xi = np.empty(n)
    xhat = np.empty(n)
    x = np.empty(n)
    e = np.empty(n)
    u = np.empty(r)
    f = np.empty(n)
    ps = np.empty(n)
    ld = np.empty(n)
    for rep in range(R):
        for a in range(N):
            for i in range(n):
                delta[a, i] = delta0[rep, a, i]
                perm[i, a] = a
        for k in range(steps + 1):
            # sorted summation keeps the mean independent of agent order;
            # the previous step's order is nearly right, so insertion sort
            # on the carried permutation is close to linear
            for i in range(n):
                for a in range(1, N):
                    j = a
                    pa = perm[i, a]
                    va = delta[pa, i]
                    while j > 0 and delta[perm[i, j - 1], i] > va:
                        perm[i, j] = perm[i, j - 1]
                        j -= 1
                    perm[i, j] = pa
                acc = 0.0
                for a in range(N):
                    acc += delta[perm[i, a], i]
                xi[i] = acc / N
                xhat[i] = xbar[k, i] + xi[i]
            for i in range(n):
                acc = foff[k, i]
                for j in range(n):
                    acc += Fx[k, i, j] * xhat[j]
                f[i] = acc
            fR = 0.0
            for i in range(n):
                for j in range(n):
                    fR += f[i] * R2[i, j] * f[j]
            penalty[rep] -= 0.5 * w[k] * fR
            ex = 0.0
            es = 0.0
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += Pt[k, i, j] * xi[j]
                ps[i] = acc
                ex += xi[i] * xi[i]
                es += acc * acc
            mf_x[rep, k] = ex
            mf_err[rep, k] = ex + es
            if record:
                for i in range(n):
                    xhat_path[rep, k, i] = xhat[i]
                    f_path[rep, k, i] = f[i]
            for a in range(N):
                for i in range(n):
                    x[i] = xbar[k, i] + delta[a, i]
                    if not np.isfinite(x[i]) or abs(x[i]) > state_limit:
                        return cost, penalty, mf_err, mf_x, xhat_path, f_path, ESCAPED
                for i in range(n):
                    acc = x[i] - eta[i]
                    for j in range(n):
                        acc -= Gamma[i, j] * xhat[j]
                    e[i] = acc
                for i in range(r):
                    acc = uoff[k, i]
                    for j in range(n):
                        acc += Ku[k, i, j] * x[j]
                    u[i] = acc
                run = 0.0
                for i in range(n):
                    for j in range(n):
                        run += e[i] * Q[i, j] * e[j]
                for i in range(r):
                    for j in range(r):
                        run += u[i] * R1[i, j] * u[j]
                cost[rep, a] += 0.5 * w[k] * (run - fR)
                if k == steps and terminal:
                    tq = 0.0
                    for i in range(n):
                        for j in range(n):
                            tq += x[i] * H[i, j] * x[j]
                    cost[rep, a] += 0.5 * tq
            if k == steps:
                break
            for i in range(n):
                acc = 0.0
                for j in range(n):
                    acc += L[k, i, j] * xi[j]
                ld[i] = acc
            for a in range(N):
                for i in range(n):
                    acc = ld[i]
                    for j in range(n):
                        acc += Abar[k, i, j] * delta[a, j]
                    noise = 0.0
                    for j in range(d):
                        noise += sigma[i, j] * dW[rep, a, k, j]
                    x[i] = delta[a, i] + dt * acc + noise
                for i in range(n):
                    delta[a, i] = x[i]
    return cost, penalty, mf_err, mf_x, xhat_path, f_path, OK


if JIT_ENABLED:
    _riccati_field_loops = njit(cache=True)(_riccati_field_loops)
    riccati_rk4_jit = njit(cache=True)(_riccati_rk4_loops)
    em_closed_loop_jit = njit(cache=True)(_em_closed_loop_loops)
else:
    riccati_rk4_jit = None
    em_closed_loop_jit = None


def riccati_rk4(C, D, E, F, X0, h, steps, blowup_norm, quad=True, backend=None):
    """Dispatch to the compiled kernel when available (``backend`` overrides)."""
    args = tuple(np.ascontiguousarray(a, dtype=np.float64) for a in (C, D, E, F, X0))
    use_jit = JIT_ENABLED if backend is None else backend == "numba"
    if use_jit:
        if riccati_rk4_jit is None:
            raise RuntimeError("numba backend requested but not available")
        return riccati_rk4_jit(*args, float(h), int(steps), float(blowup_norm), bool(quad))
    return riccati_rk4_numpy(*args, float(h), int(steps), float(blowup_norm), bool(quad))


def em_closed_loop(*args, backend=None):
    use_jit = JIT_ENABLED if backend is None else backend == "numba"
    if use_jit:
        if em_closed_loop_jit is None:
            raise RuntimeError("numba backend requested but not available")
        fixed = [np.ascontiguousarray(a, dtype=np.float64) if isinstance(a, np.ndarray) else a
                 for a in args]
        return em_closed_loop_jit(*fixed)
    return em_closed_loop_numpy(*args)
