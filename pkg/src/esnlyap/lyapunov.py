"""Lyapunov spectrum estimation by QR tangent propagation.

One Benettin-style engine serves four clients: true system spectra (via
dense per-step propagator stacks), conditional Lyapunov exponents of a
driven reservoir, Lyapunov spectra of the trained autonomous reservoir
computer, and an empirical auxiliary-system synchronization check. Also
computes the Kaplan-Yorke dimension from a spectrum.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from . import _kernels
from .reservoir import (Reservoir, RolloutDivergenceError, driven_step,
                        feature_jacobian_matmul)
from .training import Readout, predict

KIND_TRUE = "true"
KIND_CLE = "cle"
KIND_RC = "rc"

_COLLAPSE_EPS = 1e-300


@dataclass
class LyapunovSpectrum:
    """Ordered Lyapunov exponents in 1/time units.

    n_steps counts the tangent steps that entered the accumulation (the
    configurable tangent transient is excluded). Exact rank collapse is
    reported as -inf exponents with n_collapsed as the sentinel flag.
    """

    exponents: np.ndarray
    n_steps: int
    tau: float
    kind: str
    n_collapsed: int = 0

    def __post_init__(self):
        self.exponents = np.asarray(self.exponents, dtype=float)
        if self.exponents.size < 1:
            raise ValueError("spectrum needs at least one exponent")
        # elementwise comparison instead of diff: -inf tails are legal
        if np.any(self.exponents[:-1] < self.exponents[1:]):
            raise ValueError("exponents must be sorted descending")

    @property
    def n_exponents(self) -> int:
        return self.exponents.size

    @property
    def max_exponent(self) -> float:
        return float(self.exponents[0])


@dataclass
class KYResult:
    """Kaplan-Yorke dimension and the index j entering the formula."""

    dimension: float
    j_index: int
    saturated: bool = False


@dataclass
class AuxiliaryResult:
    """Outcome of the auxiliary-system synchronization test."""

    slope: float
    synchronized: bool
    degenerate: bool = False


def _qr_pos(Z):
    """QR with the positive-diagonal convention; returns (Q, |R_ii|)."""
    Q, R = np.linalg.qr(Z)
    d = np.diagonal(R)
    signs = np.where(d < 0, -1.0, 1.0)
    return Q * signs, np.abs(d)


@dataclass
class _DrivenPlan:
    """Engine backend descriptor: reservoir driven by a fixed input block."""

    res: "Reservoir"
    inputs: np.ndarray
    r0: np.ndarray


@dataclass
class _AutonomousPlan:
    """Engine backend descriptor: closed-loop reservoir with readout feedback."""

    res: "Reservoir"
    readout: "Readout"
    r0: np.ndarray
    n_steps: int
    divergence_threshold: float


_FM_CODES = {"identity": 0, "squared_half": 1, "stacked": 2}


def _run_plan(plan, k, logsums, state):
    res = plan.res
    m = res.n_nodes
    if k > m:
        raise ValueError(f"k={k} exceeds system dimension {m}")
    Q = np.eye(m, k)
    A = res.A.tocsr()
    if isinstance(plan, _DrivenPlan):
        _kernels.driven_tangent_loop(A.data, A.indices, A.indptr, res.W_in,
                                     res.b, plan.inputs, plan.r0.copy(), Q,
                                     logsums, state)
        return
    fm = plan.readout.feature_map
    bad = _kernels.autonomous_tangent_loop(
        A.data, A.indices, A.indptr, res.W_in, res.b, plan.readout.W_out,
        _FM_CODES[fm.kind], fm.split, plan.r0.copy(), Q, logsums, state,
        plan.n_steps, plan.divergence_threshold)
    if bad >= 0:
        raise RolloutDivergenceError(bad)


def benettin(jacobian_seq, k: int, reorth_every: int = 1,
             tau: float = 1.0, transient_steps: int = 500,
             kind: str = KIND_TRUE) -> LyapunovSpectrum:
    """Lyapunov exponents of a per-step Jacobian sequence.

    jacobian_seq yields either one square operator per step (anything
    supporting `op @ Q`, e.g. dense or sparse matrices) or 3-d ndarray
    chunks of dense per-step Jacobians, which are processed by a compiled
    inner loop; the reservoir clients pass plan descriptors that run fully
    compiled. An orthonormal M x k frame is re-orthonormalized by QR
    (positive-diagonal convention) every reorth_every steps; exponent i is
    sum(log R_ii) / (n_steps * tau) over the post-transient steps. The
    transient rounds up to a whole re-orthonormalization group. R_ii below
    1e-300 marks that and all lower exponents as collapsed (-inf).
    """
    if reorth_every < 1:
        raise ValueError("reorth_every must be >= 1")
    if k < 1:
        raise ValueError("k must be >= 1")
    logsums = np.zeros(k)
    # [steps_done, pending, n_accum, first_collapsed, reorth_every, transient]
    state = np.array([0, 0, 0, k, reorth_every, transient_steps], dtype=np.int64)
    if isinstance(jacobian_seq, (_DrivenPlan, _AutonomousPlan)):
        _run_plan(jacobian_seq, k, logsums, state)
        done = True
    else:
        done = False
        Q = None
        for item in jacobian_seq:
            is_chunk = isinstance(item, np.ndarray) and item.ndim == 3
            m = item.shape[-1]
            if Q is None:
                if k > m:
                    raise ValueError(f"k={k} exceeds system dimension {m}")
                Q = np.eye(m, k)
            if is_chunk:
                _kernels.benettin_stack_chunk(np.ascontiguousarray(item), Q,
                                              logsums, state)
                continue
            Q = item @ Q
            state[0] += 1
            state[1] += 1
            if state[1] == reorth_every:
                state[1] = 0
                Q, rdiag = _qr_pos(Q)
                if state[0] > transient_steps:
                    state[2] += reorth_every
                    for j in range(k):
                        if rdiag[j] < _COLLAPSE_EPS:
                            if j < state[3]:
                                state[3] = j
                            break
                        logsums[j] += np.log(rdiag[j])
        done = Q is not None
    if not done:
        raise ValueError("empty Jacobian sequence")
    n_accum = int(state[2])
    if n_accum < 1:
        raise ValueError("sequence shorter than the tangent transient; "
                         "nothing accumulated")
    lams = logsums / (n_accum * tau)
    first_collapsed = int(state[3])
    lams[first_collapsed:] = -np.inf
    lams = np.sort(lams)[::-1]
    return LyapunovSpectrum(lams, n_steps=n_accum, tau=tau, kind=kind,
                            n_collapsed=k - first_collapsed)


def kaplan_yorke(spectrum: LyapunovSpectrum) -> KYResult:
    """Kaplan-Yorke dimension j + (sum of first j exponents)/|exponent j+1|.

    j is the largest count of leading exponents with a non-negative partial
    sum. All partial sums non-negative saturates at the spectrum size.
    """
    lams = spectrum.exponents
    if lams.size == 0:
        raise ValueError("empty spectrum")
    if lams[0] < 0:
        return KYResult(0.0, 0)
    cum = np.cumsum(lams)
    nonneg = np.nonzero(cum >= 0)[0]
    j = int(nonneg[-1]) + 1
    if j == lams.size:
        return KYResult(float(j), j, saturated=True)
    frac = float(cum[j - 1] / np.abs(lams[j]))
    return KYResult(j + frac, j)


def _sech2(u: np.ndarray) -> np.ndarray:
    # 4 e^{-2|u|} / (1 + e^{-2|u|})^2, overflow-free for large |u|
    e = np.exp(-2.0 * np.abs(u))
    return 4.0 * e / (1.0 + e) ** 2


class _DiagTimesSparse:
    """Operator diag(s) @ A applied lazily to tangent frames."""

    __slots__ = ("s", "A", "shape")

    def __init__(self, s, A):
        self.s = s
        self.A = A
        self.shape = A.shape

    def __matmul__(self, Q):
        return self.s[:, None] * (self.A @ Q)


class _RcJacobian:
    """Per-step Jacobian of the autonomous update, applied lazily.

    diag(sech^2(u)) (A + W_in W_out dP/dr) without forming the dense matrix.
    """

    __slots__ = ("s", "res", "readout", "r", "shape")

    def __init__(self, s, res, readout, r):
        self.s = s
        self.res = res
        self.readout = readout
        self.r = r
        self.shape = res.A.shape

    def __matmul__(self, Q):
        g = feature_jacobian_matmul(self.readout.feature_map, self.r, Q)
        core = self.res.A @ Q + self.res.W_in @ (self.readout.W_out @ g)
        return self.s[:, None] * core


def _driven_jacobian_ops(res, inputs, r0):
    """Generic-operator source equivalent to _DrivenPlan (used to cross-check)."""
    r = np.asarray(r0, dtype=float).copy()
    for x in inputs:
        u = res.A @ r + res.W_in @ x + res.b
        yield _DiagTimesSparse(_sech2(u), res.A)
        r = np.tanh(u)


def _autonomous_jacobian_ops(res, readout, r0, n_steps, divergence_threshold=1e6):
    """Generic-operator source equivalent to _AutonomousPlan (used to cross-check)."""
    r = np.asarray(r0, dtype=float).copy()
    for i in range(n_steps):
        xhat = predict(readout, r)
        if not np.all(np.isfinite(xhat)) or np.any(np.abs(xhat) > divergence_threshold):
            raise RolloutDivergenceError(i)
        u = res.A @ r + res.W_in @ xhat + res.b
        yield _RcJacobian(_sech2(u), res, readout, r)
        r = np.tanh(u)


def cle_spectrum(res: Reservoir, input_traj, k: Optional[int] = None,
                 discard: int = 1000, reorth_every: int = 1,
                 transient_steps: int = 500, r0=None) -> LyapunovSpectrum:
    """Conditional Lyapunov exponents of the reservoir driven by input_traj.

    The reservoir is driven from r0 (default zero state) through `discard`
    warm-up steps; the per-step tangent map diag(sech^2(u[n])) A over the
    remaining input rows feeds the Benettin engine. Exponents come out in
    1/time via input_traj.tau.
    """
    n = res.n_nodes
    if k is None:
        k = min(n, 20)
    x = input_traj.samples
    if discard >= x.shape[0]:
        raise ValueError("discard leaves no input samples")
    r = np.zeros(n) if r0 is None else np.asarray(r0, dtype=float).copy()
    for i in range(discard):
        r = driven_step(res, r, x[i])
    plan = _DrivenPlan(res, np.ascontiguousarray(x[discard:]), r)
    return benettin(plan, k, reorth_every=reorth_every, tau=input_traj.tau,
                    transient_steps=transient_steps, kind=KIND_CLE)


def cle_spectrum_selfdriven(res: Reservoir, readout: Readout, rollout_states,
                            k: Optional[int] = None, *, tau: float,
                            reorth_every: int = 1,
                            transient_steps: int = 500) -> LyapunovSpectrum:
    """CLE estimate along an autonomous rollout, drive replaced by x-hat.

    rollout_states holds the reservoir states r[n] of the rollout (rows);
    the drive term uses the readout's own output at each step, but the
    tangent map still treats the input as external (no feedback term).
    """
    states = np.atleast_2d(np.asarray(rollout_states, dtype=float))
    if states.shape[0] < 1 or states.size == 0:
        raise ValueError("zero-length rollout")
    if states.shape[1] != res.n_nodes:
        raise ValueError("rollout states do not match reservoir size")
    n = res.n_nodes
    if k is None:
        k = min(n, 20)

    def steps():
        for r in states:
            xhat = predict(readout, r)
            u = res.A @ r + res.W_in @ xhat + res.b
            yield _DiagTimesSparse(_sech2(u), res.A)

    return benettin(steps(), k, reorth_every=reorth_every, tau=tau,
                    transient_steps=transient_steps, kind=KIND_CLE)


def rc_spectrum(res: Reservoir, readout: Readout, n_steps: int,
                k: Optional[int] = None, *, tau: float, r0=None,
                reorth_every: int = 1, transient_steps: int = 500,
                divergence_threshold: float = 1e6) -> LyapunovSpectrum:
    """Lyapunov spectrum of the trained RC run closed-loop for n_steps.

    The per-step Jacobian chains the readout feedback through the input
    matrix: diag(sech^2(u[n])) (A + W_in W_out dP/dr at r[n]).
    """
    if k is None:
        k = readout.W_out.shape[0] + 4
    r_start = np.zeros(res.n_nodes) if r0 is None else np.asarray(r0, dtype=float).copy()
    plan = _AutonomousPlan(res, readout, r_start, n_steps, divergence_threshold)
    return benettin(plan, k, reorth_every=reorth_every, tau=tau,
                    transient_steps=transient_steps, kind=KIND_RC)


def auxiliary_convergence(res: Reservoir, input_traj, r0_a, r0_b,
                          fit_lower: float = 1e-12,
                          fit_upper: float = 1e-2) -> AuxiliaryResult:
    """Drive two reservoir copies with one signal and fit the log-distance slope.

    The slope of ln ||r_a - r_b|| versus time over the window where the
    distance lies in (fit_lower, fit_upper) estimates the maximal CLE. A
    non-decaying distance is returned with synchronized=False; identical
    initial conditions are flagged degenerate.
    """
    ra = np.asarray(r0_a, dtype=float).copy()
    rb = np.asarray(r0_b, dtype=float).copy()
    x = input_traj.samples
    dists = np.empty(x.shape[0])
    for i in range(x.shape[0]):
        ra = driven_step(res, ra, x[i])
        rb = driven_step(res, rb, x[i])
        dists[i] = np.linalg.norm(ra - rb)
    if np.all(dists == 0.0):
        return AuxiliaryResult(0.0, synchronized=True, degenerate=True)
    t = input_traj.tau * (1 + np.arange(x.shape[0]))
    in_band = (dists > fit_lower) & (dists < fit_upper)
    if np.any(in_band):
        i0 = int(np.argmax(in_band))
        after = np.nonzero(~in_band[i0:])[0]
        i1 = i0 + (int(after[0]) if after.size else in_band.size - i0)
        sel = slice(i0, max(i1, i0 + 2))
    else:
        sel = slice(0, None)
    good = dists[sel] > 0
    slope = float(np.polyfit(t[sel][good], np.log(dists[sel][good]), 1)[0])
    return AuxiliaryResult(slope, synchronized=slope < 0)


def spectrum_json_row(spectrum: LyapunovSpectrum, seed=None,
                      spectral_radius=None, sigma_in=None) -> str:
    """One JSON line per spectrum record (infinities use Python's notation)."""
    row = {
        "kind": spectrum.kind,
        "exponents": [float(v) for v in spectrum.exponents],
        "n_steps": int(spectrum.n_steps),
        "tau": float(spectrum.tau),
        "seed": seed,
        "spectral_radius": spectral_radius,
        "sigma_in": sigma_in,
    }
    return json.dumps(row)
