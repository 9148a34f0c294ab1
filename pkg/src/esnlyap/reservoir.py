"""Random tanh reservoirs: construction, driven stepping, autonomous stepping.

The recurrent matrix is a directed Erdos-Renyi sample rescaled to a target
spectral radius; the input matrix has one nonzero per row; readout feature
maps (identity, squared-half, stacked) live here together with their exact
Jacobians.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as splinalg

FM_IDENTITY = "identity"
FM_SQUARED_HALF = "squared_half"
FM_STACKED = "stacked"
_FM_KINDS = (FM_IDENTITY, FM_SQUARED_HALF, FM_STACKED)

_MAX_BUILD_RETRIES = 10
_DENSE_EIG_LIMIT = 2048


class RolloutDivergenceError(RuntimeError):
    """Raised when an autonomous rollout produces a non-finite or huge output."""

    def __init__(self, step: Optional[int] = None, message: str | None = None):
        self.step = step
        if message is None:
            message = ("autonomous rollout diverged"
                       if step is None else f"autonomous rollout diverged at step {step}")
        super().__init__(message)


@dataclass(frozen=True)
class ReservoirParams:
    """Knobs that generate a reservoir; seed makes the build reproducible."""

    n_nodes: int
    input_dim: int
    spectral_radius: float
    input_strength: float
    avg_degree: float = 6.0
    seed: int = 0

    def __post_init__(self):
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")
        if self.input_dim < 1:
            raise ValueError("input_dim must be >= 1")
        if not 0 <= self.avg_degree <= self.n_nodes:
            raise ValueError("avg_degree must lie in [0, n_nodes]")
        if self.spectral_radius < 0:
            raise ValueError("spectral_radius must be >= 0")
        if not self.input_strength > 0:
            raise ValueError("input_strength must be > 0")


@dataclass(eq=False)
class Reservoir:
    """Fixed random network: recurrent matrix A, input matrix W_in, bias b.

    Immutable by convention after construction.
    """

    A: sparse.csr_matrix
    W_in: np.ndarray
    b: np.ndarray
    params: ReservoirParams

    @property
    def n_nodes(self) -> int:
        return self.W_in.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_in.shape[1]


@dataclass(frozen=True)
class FeatureMap:
    """Readout feature function P(r) identified by kind."""

    kind: str
    n_nodes: int

    def __post_init__(self):
        if self.kind not in _FM_KINDS:
            raise ValueError(f"unknown feature map {self.kind!r}")
        if self.n_nodes < 1:
            raise ValueError("n_nodes must be >= 1")

    @property
    def n_features(self) -> int:
        return 3 * self.n_nodes if self.kind == FM_STACKED else self.n_nodes

    @property
    def split(self) -> int:
        # squared-half leaves the first ceil(N/2) components linear
        return (self.n_nodes + 1) // 2


def spectral_radius(A) -> float:
    """Largest |eigenvalue|; dense solve below 2048 nodes, ARPACK above."""
    n = A.shape[0]
    if sparse.issparse(A) and A.nnz == 0:
        return 0.0
    if n <= _DENSE_EIG_LIMIT:
        dense = A.toarray() if sparse.issparse(A) else np.asarray(A)
        if not dense.any():
            return 0.0
        return float(np.max(np.abs(np.linalg.eigvals(dense))))
    vals = splinalg.eigs(A.astype(float), k=1, which="LM",
                         return_eigenvectors=False, maxiter=5000)
    return float(np.abs(vals[0]))


def build_reservoir(params: ReservoirParams) -> Reservoir:
    """Sample and rescale a reservoir; deterministic given params.seed.

    A is directed Erdos-Renyi with edge probability avg_degree/N and
    uniform(-1, 1) weights, rescaled so its spectral radius matches
    params.spectral_radius exactly (zero matrix when that is 0). Each W_in
    row has a single uniform(-1, 1)*input_strength entry in a random
    column; b is uniform(-1, 1). An all-zero A sample is re-drawn from an
    incremented sub-seed, at most 10 times.
    """
    n, d = params.n_nodes, params.input_dim
    prob = params.avg_degree / n
    A = None
    for attempt in range(_MAX_BUILD_RETRIES):
        rng = np.random.default_rng([params.seed, 0, attempt])
        mask = rng.random((n, n)) < prob
        weights = rng.uniform(-1.0, 1.0, (n, n))
        candidate = sparse.csr_matrix(np.where(mask, weights, 0.0))
        if params.spectral_radius == 0.0:
            A = sparse.csr_matrix((n, n))
            break
        rho = spectral_radius(candidate)
        if rho > 0.0:
            A = candidate * (params.spectral_radius / rho)
            break
    if A is None:
        raise RuntimeError("sampled reservoir matrix had zero spectral radius "
                           f"{_MAX_BUILD_RETRIES} times")
    rng_in = np.random.default_rng([params.seed, 1])
    cols = rng_in.integers(0, d, size=n)
    vals = rng_in.uniform(-1.0, 1.0, size=n) * params.input_strength
    W_in = np.zeros((n, d))
    W_in[np.arange(n), cols] = vals
    rng_b = np.random.default_rng([params.seed, 2])
    b = rng_b.uniform(-1.0, 1.0, size=n)
    return Reservoir(A=A, W_in=W_in, b=b, params=params)


def driven_step(res: Reservoir, r, x) -> np.ndarray:
    """One update tanh(A r + W_in x + b); components land in (-1, 1)."""
    r = np.asarray(r, dtype=float)
    x = np.asarray(x, dtype=float)
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(x))):
        raise ValueError("non-finite reservoir state or input")
    return np.tanh(res.A @ r + res.W_in @ x + res.b)


def drive(res: Reservoir, input_traj, r0=None, discard: int = 0) -> np.ndarray:
    """Run the driven reservoir over a trajectory, recording states.

    Row k of the result is r[discard + k + 1], so row k pairs with the
    one-step-ahead target x[discard + k + 1] (the final row has no target
    and is the natural rollout handoff state).
    """
    x = input_traj.samples
    n_input = x.shape[0]
    if discard >= n_input:
        raise ValueError("discard must be smaller than the input length")
    r = np.zeros(res.n_nodes) if r0 is None else np.asarray(r0, dtype=float).copy()
    if not np.all(np.isfinite(r)):
        raise ValueError("non-finite initial reservoir state")
    A, W_in, b = res.A, res.W_in, res.b
    states = np.empty((n_input - discard, res.n_nodes))
    for i in range(n_input):
        r = np.tanh(A @ r + W_in @ x[i] + b)
        if i >= discard:
            states[i - discard] = r
    return states


def apply_feature_map(fm: FeatureMap, r) -> np.ndarray:
    """P(r); accepts a single state (N,) or a batch (..., N)."""
    r = np.asarray(r, dtype=float)
    if r.shape[-1] != fm.n_nodes:
        raise ValueError(f"state length {r.shape[-1]} != feature map size {fm.n_nodes}")
    if fm.kind == FM_IDENTITY:
        return r
    h = fm.split
    squared = r.copy()
    squared[..., h:] = r[..., h:] ** 2
    if fm.kind == FM_SQUARED_HALF:
        return squared
    return np.concatenate([r, r, squared], axis=-1)


def feature_map_jacobian(fm: FeatureMap, r) -> np.ndarray:
    """Exact derivative dP/dr as an (n_features, N) matrix."""
    r = np.asarray(r, dtype=float)
    n = fm.n_nodes
    if r.shape != (n,):
        raise ValueError("r must be a single reservoir state")
    eye = np.eye(n)
    if fm.kind == FM_IDENTITY:
        return eye
    h = fm.split
    diag = np.ones(n)
    diag[h:] = 2.0 * r[h:]
    squared_jac = np.diag(diag)
    if fm.kind == FM_SQUARED_HALF:
        return squared_jac
    return np.vstack([eye, eye, squared_jac])


def feature_jacobian_matmul(fm: FeatureMap, r, Q) -> np.ndarray:
    """(dP/dr) @ Q without forming the Jacobian; matches feature_map_jacobian."""
    if fm.kind == FM_IDENTITY:
        return Q
    h = fm.split
    scaled = Q.copy()
    scaled[h:] = (2.0 * r[h:])[:, None] * Q[h:]
    if fm.kind == FM_SQUARED_HALF:
        return scaled
    return np.vstack([Q, Q, scaled])


def autonomous_step(res: Reservoir, readout, r):
    """Closed-loop update: feed the readout's prediction back as input.

    Returns (next state, prediction x-hat at the current state).
    """
    from .training import predict

    xhat = predict(readout, r)
    if not np.all(np.isfinite(xhat)):
        raise RolloutDivergenceError()
    r_next = np.tanh(res.A @ np.asarray(r, dtype=float) + res.W_in @ xhat + res.b)
    return r_next, xhat


@dataclass
class RolloutResult:
    """Autonomous rollout outputs; diverged_at marks a truncated run."""

    outputs: np.ndarray
    final_state: np.ndarray
    states: Optional[np.ndarray] = None
    diverged_at: Optional[int] = None

    @property
    def diverged(self) -> bool:
        return self.diverged_at is not None


def rollout(res: Reservoir, readout, r0, n_steps: int,
            divergence_threshold: float = 1e6,
            return_states: bool = False) -> RolloutResult:
    """Run the trained RC closed-loop for n_steps from state r0.

    Outputs row i is x-hat predicted from the state before step i. Instead
    of raising, a run whose output goes non-finite or beyond the threshold
    is truncated and flagged via diverged_at.
    """
    r = np.asarray(r0, dtype=float).copy()
    A, W_in, b = res.A, res.W_in, res.b
    W_out = readout.W_out
    fm = readout.feature_map
    outputs = np.empty((n_steps, W_out.shape[0]))
    states = np.empty((n_steps, res.n_nodes)) if return_states else None
    for i in range(n_steps):
        xhat = W_out @ apply_feature_map(fm, r)
        if not np.all(np.isfinite(xhat)) or np.any(np.abs(xhat) > divergence_threshold):
            return RolloutResult(outputs[:i], r,
                                 states[:i] if return_states else None,
                                 diverged_at=i)
        outputs[i] = xhat
        if return_states:
            states[i] = r
        r = np.tanh(A @ r + W_in @ xhat + b)
    return RolloutResult(outputs, r, states, None)
