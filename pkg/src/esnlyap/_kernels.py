"""numba inner loops for the stochastic integrator and the tangent engine.

Everything here is private; the public API lives in systems.py and
lyapunov.py. Kernels are kept free of Python objects so they compile once
(cache=True) and run at C speed on the long 1e6-step propagations.
"""

import numpy as np
from numba import njit

# System codes shared with systems.py.
KIND_LORENZ = 0
KIND_QI = 1
KIND_LORENZ_FILTER = 2


@njit(cache=True, inline="always")
def _drift_nb(kind, p, x, out):
    if kind == KIND_LORENZ or kind == KIND_LORENZ_FILTER:
        sigma, beta, rho = p[0], p[1], p[2]
        out[0] = sigma * (x[1] - x[0])
        out[1] = x[0] * (rho - x[2]) - x[1]
        out[2] = x[0] * x[1] - beta * x[2]
        if kind == KIND_LORENZ_FILTER:
            out[3] = -p[3] * x[3] + x[0]
    else:
        p1, p2, p3, p4 = p[0], p[1], p[2], p[3]
        out[0] = p1 * (x[1] - x[0]) + x[1] * x[2] * x[3]
        out[1] = p2 * (x[0] + x[1]) - x[0] * x[2] * x[3]
        out[2] = -p3 * x[2] + x[0] * x[1] * x[3]
        out[3] = -p4 * x[3] + x[0] * x[1] * x[2]


@njit(cache=True)
def honeycutt_chunk(kind, p, x, dt, amp, noise, out, threshold):
    """Advance x through out.shape[0] Honeycutt RK2 steps, recording each state.

    noise holds the per-step unit Gaussians (same draw enters predictor and
    corrector). Returns the index of the first diverged step, or -1.
    """
    m, dim = out.shape
    f0 = np.empty(dim)
    f1 = np.empty(dim)
    xt = np.empty(dim)
    sq = amp * np.sqrt(dt)
    for s in range(m):
        _drift_nb(kind, p, x, f0)
        for i in range(dim):
            xt[i] = x[i] + dt * f0[i] + sq * noise[s, i]
        _drift_nb(kind, p, xt, f1)
        ok = True
        for i in range(dim):
            x[i] = x[i] + 0.5 * dt * (f0[i] + f1[i]) + sq * noise[s, i]
            out[s, i] = x[i]
            if not (np.abs(x[i]) <= threshold):
                ok = False
        if not ok:
            return s
    return -1


@njit(cache=True)
def _mgs_pos(Z, Q, rdiag):
    """Modified Gram-Schmidt QR of Z into Q; rdiag gets the (nonnegative) R_ii.

    Collapsed columns (zero norm) leave a zero column in Q so that lower
    tangent directions stay collapsed on subsequent steps.
    """
    n, k = Z.shape
    for j in range(k):
        for i in range(j):
            s = 0.0
            for t in range(n):
                s += Q[t, i] * Z[t, j]
            for t in range(n):
                Z[t, j] -= s * Q[t, i]
        nrm = 0.0
        for t in range(n):
            nrm += Z[t, j] * Z[t, j]
        nrm = np.sqrt(nrm)
        rdiag[j] = nrm
        if nrm > 0.0:
            inv = 1.0 / nrm
            for t in range(n):
                Q[t, j] = Z[t, j] * inv
        else:
            for t in range(n):
                Q[t, j] = 0.0


@njit(cache=True)
def _qr_bookkeep(Q, scratch, rdiag, logsums, state):
    """Re-orthonormalize Q in place and accumulate post-transient log R_ii."""
    state[1] = 0
    m, k = Q.shape
    for i in range(m):
        for j in range(k):
            scratch[i, j] = Q[i, j]
    _mgs_pos(scratch, Q, rdiag)
    if state[0] > state[5]:
        state[2] += state[4]
        for j in range(k):
            if rdiag[j] < 1e-300:
                if j < state[3]:
                    state[3] = j
                break
            logsums[j] += np.log(rdiag[j])


@njit(cache=True, inline="always")
def _sech2_nb(u):
    e = np.exp(-2.0 * np.abs(u))
    return 4.0 * e / ((1.0 + e) * (1.0 + e))


@njit(cache=True)
def driven_tangent_loop(data, indices, indptr, Win, b, X, r, Q, logsums, state):
    """Benettin recursion along the driven reservoir: J[n] = diag(sech^2) A.

    Recurses r through tanh(A r + W_in x + b) over the input rows while
    propagating the tangent frame; bookkeeping matches benettin_stack_chunk.
    """
    n_steps, d = X.shape
    m, k = Q.shape
    Z = np.empty((m, k))
    rdiag = np.empty(k)
    u = np.empty(m)
    for s in range(n_steps):
        for i in range(m):
            acc = b[i]
            for jj in range(indptr[i], indptr[i + 1]):
                acc += data[jj] * r[indices[jj]]
            for dd in range(d):
                acc += Win[i, dd] * X[s, dd]
            u[i] = acc
        for i in range(m):
            for j in range(k):
                Z[i, j] = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                v = data[jj]
                col = indices[jj]
                for j in range(k):
                    Z[i, j] += v * Q[col, j]
        for i in range(m):
            sc = _sech2_nb(u[i])
            for j in range(k):
                Q[i, j] = sc * Z[i, j]
        state[0] += 1
        state[1] += 1
        if state[1] == state[4]:
            _qr_bookkeep(Q, Z, rdiag, logsums, state)
        for i in range(m):
            r[i] = np.tanh(u[i])


@njit(cache=True)
def autonomous_tangent_loop(data, indices, indptr, Win, b, Wout, fm_code,
                            split, r, Q, logsums, state, n_steps, threshold):
    """Benettin recursion along the closed-loop reservoir.

    J[n] = diag(sech^2(u)) (A + W_in W_out dP/dr); the feature-map Jacobian
    is folded into an effective output matrix per step. Returns the step of
    the first diverged output, or -1.
    """
    m, k = Q.shape
    d = Win.shape[1]
    n_feat = Wout.shape[1]
    Z = np.empty((m, k))
    rdiag = np.empty(k)
    u = np.empty(m)
    feat = np.empty(n_feat)
    xhat = np.empty(d)
    weff = np.empty((d, m))
    for s in range(n_steps):
        for i in range(m):
            feat[i] = r[i]
        if fm_code == 1:
            for i in range(split, m):
                feat[i] = r[i] * r[i]
        elif fm_code == 2:
            for i in range(m):
                feat[m + i] = r[i]
                feat[2 * m + i] = r[i] if i < split else r[i] * r[i]
        for dd in range(d):
            acc = 0.0
            for f in range(n_feat):
                acc += Wout[dd, f] * feat[f]
            xhat[dd] = acc
            if not (np.abs(acc) <= threshold):
                return s
        for dd in range(d):
            for i in range(m):
                w = Wout[dd, i]
                if fm_code == 1:
                    if i >= split:
                        w *= 2.0 * r[i]
                elif fm_code == 2:
                    w += Wout[dd, m + i]
                    w += Wout[dd, 2 * m + i] * (1.0 if i < split else 2.0 * r[i])
                weff[dd, i] = w
        for i in range(m):
            acc = b[i]
            for jj in range(indptr[i], indptr[i + 1]):
                acc += data[jj] * r[indices[jj]]
            for dd in range(d):
                acc += Win[i, dd] * xhat[dd]
            u[i] = acc
        for i in range(m):
            for j in range(k):
                Z[i, j] = 0.0
            for jj in range(indptr[i], indptr[i + 1]):
                v = data[jj]
                col = indices[jj]
                for j in range(k):
                    Z[i, j] += v * Q[col, j]
        for dd in range(d):
            for j in range(k):
                acc = 0.0
                for i in range(m):
                    acc += weff[dd, i] * Q[i, j]
                for i in range(m):
                    Z[i, j] += Win[i, dd] * acc
        for i in range(m):
            sc = _sech2_nb(u[i])
            for j in range(k):
                Q[i, j] = sc * Z[i, j]
        state[0] += 1
        state[1] += 1
        if state[1] == state[4]:
            _qr_bookkeep(Q, Z, rdiag, logsums, state)
        for i in range(m):
            r[i] = np.tanh(u[i])
    return -1


@njit(cache=True)
def benettin_stack_chunk(stack, Q, logsums, state):
    """Propagate the frame Q through a chunk of dense per-step Jacobians.

    state = [steps_done, pending, n_accum, first_collapsed, reorth_every,
    transient_steps] is engine bookkeeping (int64) carried across chunks.
    logsums accumulates post-transient log R_ii per column.
    """
    m = Q.shape[0]
    k = Q.shape[1]
    Z = np.empty((m, k))
    rdiag = np.empty(k)
    for s in range(stack.shape[0]):
        M = stack[s]
        for i in range(m):
            for j in range(k):
                acc = 0.0
                for t in range(m):
                    acc += M[i, t] * Q[t, j]
                Z[i, j] = acc
        for i in range(m):
            for j in range(k):
                Q[i, j] = Z[i, j]
        state[0] += 1
        state[1] += 1
        if state[1] == state[4]:
            _qr_bookkeep(Q, Z, rdiag, logsums, state)
