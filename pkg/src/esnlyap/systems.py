"""Chaotic target systems and their stochastic integration.

Provides the Lorenz system, the four-dimensional Qi system, and a Lorenz
system extended with a driven first-order low-pass filter, together with
analytic Jacobians, a Honeycutt second-order stochastic Runge-Kutta
integrator for additive Gaussian noise, and the true Lyapunov spectrum of
each flow via tangent propagation.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from . import _kernels

LORENZ = "lorenz"
QI = "qi"
LORENZ_FILTER = "lorenz_filter"

_DIM = {LORENZ: 3, QI: 4, LORENZ_FILTER: 4}
_KIND_CODE = {
    LORENZ: _kernels.KIND_LORENZ,
    QI: _kernels.KIND_QI,
    LORENZ_FILTER: _kernels.KIND_LORENZ_FILTER,
}

DIVERGENCE_THRESHOLD = 1e6

# Noise draws are consumed in fixed-size blocks so results do not depend on
# how the step loop is chunked internally.
_CHUNK = 1 << 18


class DivergenceError(RuntimeError):
    """Raised when an integrated state leaves the |x| <= threshold box."""

    def __init__(self, step: int, message: str | None = None):
        self.step = step
        super().__init__(message or f"trajectory diverged at step {step}")


@dataclass(frozen=True)
class SystemSpec:
    """A target system: kind, parameters, and additive noise amplitude.

    The Lorenz rho parameter is stored as rho_lorenz; it is unrelated to the
    reservoir spectral radius, which lives in ReservoirParams.
    """

    kind: str
    sigma: Optional[float] = None
    beta: Optional[float] = None
    rho_lorenz: Optional[float] = None
    p1: Optional[float] = None
    p2: Optional[float] = None
    p3: Optional[float] = None
    p4: Optional[float] = None
    eta: Optional[float] = None
    noise_amplitude: float = 0.0

    def __post_init__(self):
        if self.kind not in _DIM:
            raise ValueError(f"unknown system kind {self.kind!r}")
        if self.kind in (LORENZ, LORENZ_FILTER):
            required = ("sigma", "beta", "rho_lorenz")
        else:
            required = ("p1", "p2", "p3", "p4")
        for name in required:
            value = getattr(self, name)
            if value is None or not np.isfinite(value):
                raise ValueError(f"{self.kind} requires finite parameter {name}")
        if self.kind == LORENZ_FILTER:
            if self.eta is None or not self.eta > 0:
                raise ValueError("filter cutoff eta must be positive")
        if self.noise_amplitude < 0:
            raise ValueError("noise_amplitude must be >= 0")

    @property
    def dim(self) -> int:
        return _DIM[self.kind]

    @classmethod
    def lorenz(cls, sigma=10.0, beta=8.0 / 3.0, rho_lorenz=28.0, noise_amplitude=0.0):
        return cls(LORENZ, sigma=sigma, beta=beta, rho_lorenz=rho_lorenz,
                   noise_amplitude=noise_amplitude)

    @classmethod
    def qi(cls, p1=35.0, p2=10.0, p3=1.0, p4=10.0, noise_amplitude=0.0):
        return cls(QI, p1=p1, p2=p2, p3=p3, p4=p4, noise_amplitude=noise_amplitude)

    @classmethod
    def lorenz_plus_filter(cls, sigma=10.0, beta=8.0 / 3.0, rho_lorenz=28.0,
                           eta=1.0, noise_amplitude=0.0):
        return cls(LORENZ_FILTER, sigma=sigma, beta=beta, rho_lorenz=rho_lorenz,
                   eta=eta, noise_amplitude=noise_amplitude)

    def default_x0(self) -> np.ndarray:
        return np.ones(self.dim)

    def _param_array(self) -> np.ndarray:
        if self.kind == LORENZ:
            return np.array([self.sigma, self.beta, self.rho_lorenz, 0.0])
        if self.kind == LORENZ_FILTER:
            return np.array([self.sigma, self.beta, self.rho_lorenz, self.eta])
        return np.array([self.p1, self.p2, self.p3, self.p4])


@dataclass
class Trajectory:
    """Uniformly sampled multivariate time series.

    samples has shape (n_steps, dim); tau is the sample interval.
    """

    samples: np.ndarray
    tau: float
    t0: float = 0.0

    def __post_init__(self):
        self.samples = np.atleast_2d(np.asarray(self.samples, dtype=float))
        if self.samples.shape[0] < 1:
            raise ValueError("trajectory needs at least one sample")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("trajectory samples must be finite")

    @property
    def n_steps(self) -> int:
        return self.samples.shape[0]

    @property
    def dim(self) -> int:
        return self.samples.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.t0 + self.tau * np.arange(self.n_steps)


def _check_state(spec: SystemSpec, state) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    if x.shape[-1] != spec.dim:
        raise ValueError(f"state has length {x.shape[-1]}, expected {spec.dim}")
    if not np.all(np.isfinite(x)):
        raise ValueError("non-finite state")
    return x


def drift(spec: SystemSpec, state) -> np.ndarray:
    """Deterministic vector field at state (noise is the integrator's job).

    Accepts a single state of shape (dim,) or a batch (..., dim).
    """
    x = _check_state(spec, state)
    out = np.empty_like(x)
    if spec.kind in (LORENZ, LORENZ_FILTER):
        out[..., 0] = spec.sigma * (x[..., 1] - x[..., 0])
        out[..., 1] = x[..., 0] * (spec.rho_lorenz - x[..., 2]) - x[..., 1]
        out[..., 2] = x[..., 0] * x[..., 1] - spec.beta * x[..., 2]
        if spec.kind == LORENZ_FILTER:
            out[..., 3] = -spec.eta * x[..., 3] + x[..., 0]
    else:
        x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        out[..., 0] = spec.p1 * (x2 - x1) + x2 * x3 * x4
        out[..., 1] = spec.p2 * (x1 + x2) - x1 * x3 * x4
        out[..., 2] = -spec.p3 * x3 + x1 * x2 * x4
        out[..., 3] = -spec.p4 * x4 + x1 * x2 * x3
    return out


def jacobian(spec: SystemSpec, state) -> np.ndarray:
    """Analytic Jacobian d(drift)/d(state); shape (..., dim, dim)."""
    x = _check_state(spec, state)
    d = spec.dim
    out = np.zeros(x.shape[:-1] + (d, d))
    if spec.kind in (LORENZ, LORENZ_FILTER):
        out[..., 0, 0] = -spec.sigma
        out[..., 0, 1] = spec.sigma
        out[..., 1, 0] = spec.rho_lorenz - x[..., 2]
        out[..., 1, 1] = -1.0
        out[..., 1, 2] = -x[..., 0]
        out[..., 2, 0] = x[..., 1]
        out[..., 2, 1] = x[..., 0]
        out[..., 2, 2] = -spec.beta
        if spec.kind == LORENZ_FILTER:
            out[..., 3, 0] = 1.0
            out[..., 3, 3] = -spec.eta
    else:
        x1, x2, x3, x4 = x[..., 0], x[..., 1], x[..., 2], x[..., 3]
        out[..., 0, 0] = -spec.p1
        out[..., 0, 1] = spec.p1 + x3 * x4
        out[..., 0, 2] = x2 * x4
        out[..., 0, 3] = x2 * x3
        out[..., 1, 0] = spec.p2 - x3 * x4
        out[..., 1, 1] = spec.p2
        out[..., 1, 2] = -x1 * x4
        out[..., 1, 3] = -x1 * x3
        out[..., 2, 0] = x2 * x4
        out[..., 2, 1] = x1 * x4
        out[..., 2, 2] = -spec.p3
        out[..., 2, 3] = x1 * x2
        out[..., 3, 0] = x2 * x3
        out[..., 3, 1] = x1 * x3
        out[..., 3, 2] = x1 * x2
        out[..., 3, 3] = -spec.p4
    return out


def stochastic_rk2(f: Callable[[np.ndarray], np.ndarray], x0, dt: float,
                   n_steps: int, noise_amplitude: float = 0.0,
                   rng: Optional[np.random.Generator] = None,
                   divergence_threshold: float = DIVERGENCE_THRESHOLD) -> np.ndarray:
    """Honeycutt RK2 for dx/dt = f(x) + a*xi(t) with an arbitrary drift callable.

    Predictor uses the same Gaussian draw as the corrector. Returns the
    (n_steps, dim) array of post-step states (x0 itself is not included).
    """
    x = np.asarray(x0, dtype=float).copy()
    if rng is None:
        rng = np.random.default_rng(0)
    sq = noise_amplitude * np.sqrt(dt)
    out = np.empty((n_steps, x.size))
    for s in range(n_steps):
        xi = rng.standard_normal(x.size) if noise_amplitude > 0 else 0.0
        f0 = f(x)
        xt = x + dt * f0 + sq * xi
        x = x + 0.5 * dt * (f0 + f(xt)) + sq * xi
        out[s] = x
        if not np.all(np.abs(x) <= divergence_threshold):
            raise DivergenceError(s)
    return out


def integrate(spec: SystemSpec, x0, dt: float, n_steps: int, seed: int = 0,
              transient: float = 0.0) -> Trajectory:
    """Integrate the system with the Honeycutt RK2 scheme.

    Discards `transient` time units, then records n_steps samples starting
    with the post-transient state. Deterministic given (seed, dt, n_steps,
    x0): noise draws come from a single default_rng(seed) stream.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    x = _check_state(spec, np.asarray(x0, dtype=float)).copy()
    kind = _KIND_CODE[spec.kind]
    params = spec._param_array()
    amp = spec.noise_amplitude
    rng = np.random.default_rng(seed)
    dim = spec.dim
    n_transient = int(round(transient / dt))
    zero_chunk = np.zeros((_CHUNK, dim)) if amp == 0 else None

    def run(total: int, record: Optional[np.ndarray], offset: int) -> None:
        done = 0
        while done < total:
            m = min(_CHUNK, total - done)
            noise = rng.standard_normal((m, dim)) if amp > 0 else zero_chunk[:m]
            if record is None:
                out = np.empty((m, dim))
            else:
                out = record[offset + done:offset + done + m]
            bad = _kernels.honeycutt_chunk(kind, params, x, dt, amp, noise, out,
                                           DIVERGENCE_THRESHOLD)
            if bad >= 0:
                raise DivergenceError(done + bad + (0 if record is None else n_transient))
            done += m

    run(n_transient, None, 0)
    samples = np.empty((n_steps, dim))
    samples[0] = x
    run(n_steps - 1, samples, 1)
    return Trajectory(samples, tau=dt, t0=n_transient * dt)


def downsample(traj: Trajectory, factor: int) -> Trajectory:
    """Keep every factor-th sample starting at index 0; tau scales by factor."""
    if factor < 1:
        raise ValueError("factor must be >= 1")
    if factor == 1:
        return Trajectory(traj.samples.copy(), traj.tau, traj.t0)
    return Trajectory(traj.samples[::factor].copy(), traj.tau * factor, traj.t0)


def rk2_tangent_stacks(spec: SystemSpec, traj: Trajectory, chunk: int = 65536):
    """Yield dense per-step tangent propagators of the RK2 scheme in chunks.

    The same Heun update applied to the variational flow dz' = J(x) dz gives
    the one-step map M = I + dt/2 (J(x) + J(xt)) + dt^2/2 J(xt) J(x) with
    xt the deterministic predictor state.
    """
    dt = traj.tau
    d = spec.dim
    eye = np.eye(d)
    for start in range(0, traj.n_steps, chunk):
        x = traj.samples[start:start + chunk]
        j1 = jacobian(spec, x)
        xt = x + dt * drift(spec, x)
        j2 = jacobian(spec, xt)
        stacks = eye + 0.5 * dt * (j1 + j2) + 0.5 * dt * dt * np.einsum(
            "nij,njk->nik", j2, j1)
        yield stacks


def true_lyapunov_spectrum(spec: SystemSpec, dt: float, n_steps: int,
                           seed: int = 0, x0=None, transient: float = 10.0,
                           reorth_every: int = 1, tangent_transient: int = 500):
    """Full Lyapunov spectrum of the deterministic flow, units 1/time.

    Noise is forced to zero; the analytic Jacobian is advanced by the same
    RK2 scheme along an on-attractor trajectory and fed to the Benettin
    engine. Returns all dim exponents sorted descending.
    """
    from .lyapunov import KIND_TRUE, benettin

    det = dataclasses.replace(spec, noise_amplitude=0.0)
    if x0 is None:
        x0 = det.default_x0()
    traj = integrate(det, x0, dt, n_steps, seed=seed, transient=transient)
    return benettin(rk2_tangent_stacks(det, traj), k=det.dim,
                    reorth_every=reorth_every, tau=dt,
                    transient_steps=tangent_transient, kind=KIND_TRUE)


def write_trajectory_csv(traj: Trajectory, path) -> None:
    """Write `t,x1,...,xD` rows at full double precision."""
    header = "t," + ",".join(f"x{i + 1}" for i in range(traj.dim))
    data = np.column_stack([traj.times, traj.samples])
    np.savetxt(path, data, delimiter=",", header=header, comments="",
               fmt="%.17g")


def read_trajectory_csv(path) -> Trajectory:
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    t = data[:, 0]
    if len(t) > 1:
        tau = float(t[1] - t[0])
    else:
        tau = 1.0
    return Trajectory(data[:, 1:], tau=tau, t0=float(t[0]))
