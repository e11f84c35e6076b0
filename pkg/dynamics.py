"""
Kinetic Langevin Dynamics
Simulates the SDE

    dX_t = V_t dt
    dV_t = -(V_t + grad U(X_t)) dt + sigma dW_t

together with its tangent flow J_{0,t}, which solves dJ = D(X_t) J dt with
D(x) = [[0, I], [-Hess U(x), -I]] and J_{0,0} = I.

Paths are simulated in fixed-size blocks. Block b of stream s draws its
noise from Philox(SeedSequence(master_seed, spawn_key=(s, b))), so the output
does not depend on how many worker threads process the blocks.
"""

import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from typing import List, Optional, Sequence, Union

import numpy as np
from scipy.integrate import quad_vec
from scipy.linalg import expm

from hypocert_base import (
    InvalidArgumentError, NumericalBlowupError, Scheme, UnsupportedSchemeError,
)
from potentials import PotentialSpec, hessian

logger = logging.getLogger(__name__)

SQRT2 = math.sqrt(2.0)
DEFAULT_CHUNK_SIZE = 4096
THREADS_ENV = "HYPOCERT_THREADS"


@dataclass(frozen=True)
class PhaseState:
    """A point z = (x, v) of phase space."""
    x: np.ndarray
    v: np.ndarray

    def __post_init__(self):
        x = np.atleast_1d(np.asarray(self.x, dtype=float))
        v = np.atleast_1d(np.asarray(self.v, dtype=float))
        if x.shape != v.shape or x.ndim != 1:
            raise InvalidArgumentError(f"x and v must be vectors of equal length, got {x.shape}, {v.shape}")
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
            raise InvalidArgumentError("phase state must be finite")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "v", v)

    @property
    def dim(self) -> int:
        return self.x.shape[0]

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.x, self.v])

    @classmethod
    def from_vector(cls, z: Sequence[float]) -> "PhaseState":
        z = np.asarray(z, dtype=float)
        if z.ndim != 1 or z.shape[0] % 2:
            raise InvalidArgumentError("phase vector must have even length 2d")
        d = z.shape[0] // 2
        return cls(z[:d], z[d:])

    @classmethod
    def origin(cls, dim: int) -> "PhaseState":
        return cls(np.zeros(dim), np.zeros(dim))


@dataclass(frozen=True)
class TangentFlow:
    """Derivative J of the flow map with respect to the initial condition."""
    J: np.ndarray

    def __post_init__(self):
        J = np.asarray(self.J, dtype=float)
        if J.ndim != 2 or J.shape[0] != J.shape[1] or J.shape[0] % 2:
            raise InvalidArgumentError(f"J must be a square 2d x 2d matrix, got {J.shape}")
        if not np.all(np.isfinite(J)):
            raise InvalidArgumentError("J must be finite")
        object.__setattr__(self, "J", J)

    @classmethod
    def identity(cls, dim: int) -> "TangentFlow":
        return cls(np.eye(2 * dim))

    @property
    def norm(self) -> float:
        return float(np.linalg.norm(self.J, 2))


@dataclass(frozen=True)
class SimConfig:
    """Time stepping, sample size and randomness of one simulation run."""
    dt: float
    t_final: float
    n_paths: int
    master_seed: int = 0
    scheme: str = Scheme.EULER_MARUYAMA
    sigma: float = SQRT2
    workers: Optional[int] = None
    chunk_size: int = DEFAULT_CHUNK_SIZE

    def __post_init__(self):
        if self.dt <= 0 or self.t_final <= 0:
            raise InvalidArgumentError("dt and t_final must be positive")
        if self.dt > self.t_final:
            raise InvalidArgumentError(f"dt={self.dt} exceeds t_final={self.t_final}")
        if self.n_paths < 1:
            raise InvalidArgumentError("n_paths must be >= 1")
        if self.scheme not in Scheme.ALL:
            raise InvalidArgumentError(f"Unknown scheme: {self.scheme}")
        if self.sigma < 0:
            raise InvalidArgumentError("sigma must be nonnegative")
        if not 0 <= self.master_seed < 2 ** 64:
            raise InvalidArgumentError("master_seed must be an unsigned 64-bit integer")
        if self.chunk_size < 1:
            raise InvalidArgumentError("chunk_size must be >= 1")

    def replace(self, **changes) -> "SimConfig":
        values = dict(self.__dict__)
        values.update(changes)
        return SimConfig(**values)


@dataclass
class TrajectoryEnsemble:
    """Recorded states (n, T, 2d), tangent flows (n, T, 2d, 2d) and substream ids."""
    times: np.ndarray
    states: np.ndarray
    substreams: np.ndarray
    dim: int
    scheme: str
    jacobians: Optional[np.ndarray] = None
    gaussian_part: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    @property
    def n_paths(self) -> int:
        return self.states.shape[0]

    def time_index(self, t: float) -> int:
        idx = int(np.argmin(np.abs(self.times - t)))
        if not math.isclose(self.times[idx], t, rel_tol=1e-9, abs_tol=1e-12):
            raise InvalidArgumentError(f"t={t} is not a recorded time")
        return idx

    def at(self, t: float) -> np.ndarray:
        return self.states[:, self.time_index(t), :]

    def csv_header(self, include_jacobian: bool = False) -> List[str]:
        d = self.dim
        cols = ["path_id", "t"] + [f"x_{i + 1}" for i in range(d)] + [f"v_{i + 1}" for i in range(d)]
        if include_jacobian:
            cols += [f"J_{i + 1}_{j + 1}" for i in range(2 * d) for j in range(2 * d)]
        return cols

    def csv_rows(self, include_jacobian: bool = False):
        if include_jacobian and self.jacobians is None:
            raise InvalidArgumentError("ensemble was simulated without tangent flows")
        for i in range(self.n_paths):
            for k, t in enumerate(self.times):
                row = [i, repr(float(t))] + [repr(float(c)) for c in self.states[i, k]]
                if include_jacobian:
                    row += [repr(float(c)) for c in self.jacobians[i, k].ravel()]
                yield row


def resolve_workers(requested: Optional[int] = None) -> int:
    """Worker count: HYPOCERT_THREADS wins, then the request, then all cores."""
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            n = int(env)
        except ValueError:
            raise InvalidArgumentError(f"{THREADS_ENV} must be an integer, got {env!r}")
        return max(1, n)
    if requested:
        return max(1, int(requested))
    return os.cpu_count() or 1


def block_rng(master_seed: int, stream: int, block: int) -> np.random.Generator:
    """Counter-based generator of one block of paths."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(master_seed, spawn_key=(stream, block))))


def drift_matrix(p: PotentialSpec, x: np.ndarray) -> np.ndarray:
    """D(x) = [[0, I], [-Hess U(x), -I]] for x of shape (..., d)."""
    x = np.asarray(x, dtype=float)
    d = p.dim
    H = hessian(p, x)
    eye = np.broadcast_to(np.eye(d), H.shape)
    top = np.concatenate([np.zeros_like(H), eye], axis=-1)
    bottom = np.concatenate([-H, -eye], axis=-1)
    return np.concatenate([top, bottom], axis=-2)


def step_batch(X: np.ndarray, V: np.ndarray, p: PotentialSpec, dt: float,
               dW: np.ndarray, sigma: float = SQRT2):
    """Vectorised Euler-Maruyama step on arrays of shape (n, d)."""
    Xn = X + V * dt
    Vn = V - (V + p.grad(X)) * dt + sigma * dW
    return Xn, Vn


def step_tangent_batch(J: np.ndarray, X: np.ndarray, p: PotentialSpec, dt: float) -> np.ndarray:
    """J' = J + dt D(X) J on arrays of shape (n, 2d, 2d)."""
    return J + dt * (drift_matrix(p, X) @ J)


def step(z: PhaseState, p: PotentialSpec, dt: float, dW: Sequence[float],
         sigma: float = SQRT2, path_index: Optional[int] = None, t: float = 0.0) -> PhaseState:
    """One Euler-Maruyama step from z at time t with Brownian increment dW."""
    if dt <= 0:
        raise InvalidArgumentError("dt must be positive")
    dW = np.asarray(dW, dtype=float).reshape(z.dim)
    x, v = step_batch(z.x[None, :], z.v[None, :], p, dt, dW[None, :], sigma)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(v))):
        raise NumericalBlowupError("non-finite state after step", path_index=path_index, time=t + dt)
    return PhaseState(x[0], v[0])


def step_tangent(J: TangentFlow, x: Sequence[float], p: PotentialSpec, dt: float,
                 t: float = 0.0) -> TangentFlow:
    """One Euler step of the tangent flow along position x, starting at time t."""
    if dt < 0:
        raise InvalidArgumentError("dt must be nonnegative")
    if dt == 0:
        return J
    x = np.asarray(x, dtype=float).reshape(1, p.dim)
    Jn = step_tangent_batch(J.J[None], x, p, dt)[0]
    if not np.all(np.isfinite(Jn)):
        raise NumericalBlowupError("non-finite tangent flow", time=t + dt)
    return TangentFlow(Jn)


def _ou_matrix(dim: int) -> np.ndarray:
    eye = np.eye(dim)
    return np.block([[np.zeros((dim, dim)), eye], [-eye, -eye]])


@lru_cache(maxsize=256)
def _ou_moments(t: float, sigma: float, dim: int):
    """Propagator exp(tD), covariance Sigma(t) and its square root."""
    D = _ou_matrix(dim)
    E = np.zeros((2 * dim, dim))
    E[dim:, :] = np.eye(dim)
    noise = sigma ** 2 * (E @ E.T)

    def integrand(s):
        P = expm(s * D)
        return P @ noise @ P.T

    cov, _ = quad_vec(integrand, 0.0, t, epsabs=1e-13, epsrel=1e-12)
    cov = 0.5 * (cov + cov.T)
    w, vecs = np.linalg.eigh(cov)
    root = vecs * np.sqrt(np.clip(w, 0.0, None))
    return expm(t * D), cov, root


def ou_covariance(t: float, sigma: float = SQRT2, dim: int = 1) -> np.ndarray:
    """Exact transition covariance of the quadratic-potential dynamics."""
    if t < 0:
        raise InvalidArgumentError("t must be nonnegative")
    if t == 0:
        return np.zeros((2 * dim, 2 * dim))
    return _ou_moments(float(t), float(sigma), int(dim))[1].copy()


def _require_quadratic(p: Optional[PotentialSpec]):
    if p is not None and not p.is_quadratic:
        raise UnsupportedSchemeError(f"exact_ou requires the quadratic potential, got {p.name}")


def exact_ou_sample(Z0: np.ndarray, t: float, noise: np.ndarray, sigma: float = SQRT2) -> np.ndarray:
    """Exact Gaussian transition of arrays (n, 2d) driven by standard normals (n, 2d)."""
    Z0 = np.asarray(Z0, dtype=float)
    if t == 0:
        return Z0.copy()
    dim = Z0.shape[-1] // 2
    prop, _, root = _ou_moments(float(t), float(sigma), dim)
    return Z0 @ prop.T + np.asarray(noise) @ root.T


def exact_ou_transition(z0: PhaseState, t: float, noise: Sequence[float],
                        p: Optional[PotentialSpec] = None, sigma: float = SQRT2) -> PhaseState:
    """Sample Z_t given Z_0 = z0 from the exact Gaussian transition.

    `noise` is a standard normal vector of length 2d. Raises
    UnsupportedSchemeError when `p` is not the quadratic potential.
    """
    _require_quadratic(p)
    if t < 0:
        raise InvalidArgumentError("t must be nonnegative")
    z = exact_ou_sample(z0.as_vector()[None, :], t, np.asarray(noise, dtype=float).reshape(1, -1), sigma)
    return PhaseState.from_vector(z[0])


def _initial_array(z0: Union[PhaseState, np.ndarray], n_paths: int, dim: int) -> np.ndarray:
    if isinstance(z0, PhaseState):
        return np.broadcast_to(z0.as_vector(), (n_paths, 2 * dim)).copy()
    Z0 = np.asarray(z0, dtype=float)
    if Z0.shape != (n_paths, 2 * dim):
        raise InvalidArgumentError(f"initial states must have shape {(n_paths, 2 * dim)}, got {Z0.shape}")
    if not np.all(np.isfinite(Z0)):
        raise InvalidArgumentError("initial states must be finite")
    return Z0.copy()


def _check_finite(Z: np.ndarray, offset: int, t: float):
    bad = ~np.all(np.isfinite(Z), axis=-1)
    if np.any(bad):
        idx = offset + int(np.argmax(bad))
        raise NumericalBlowupError(f"path {idx} blew up at t={t:.6g}", path_index=idx, time=t)


def _simulate_block_em(Z0, p, cfg, times, rng, offset, record_jacobian, track_gaussian):
    nb, d = Z0.shape[0], p.dim
    X, V = Z0[:, :d].copy(), Z0[:, d:].copy()
    J = np.broadcast_to(np.eye(2 * d), (nb, 2 * d, 2 * d)).copy() if record_jacobian else None
    W = np.zeros((nb, d))
    S1 = np.zeros((nb, d))
    states = np.empty((nb, len(times), 2 * d))
    jacs = np.empty((nb, len(times), 2 * d, 2 * d)) if record_jacobian else None
    gauss = np.empty((nb, len(times), 2 * d)) if track_gaussian else None
    t = 0.0
    for k, target in enumerate(times):
        n_sub = max(0, math.ceil((target - t) / cfg.dt - 1e-9))
        h = (target - t) / n_sub if n_sub else 0.0
        for _ in range(n_sub):
            dW = rng.standard_normal((nb, d)) * math.sqrt(h)
            if record_jacobian:
                J = step_tangent_batch(J, X, p, h)
            if track_gaussian:
                # Right endpoint: G is then the exact first-order term of the Euler sum.
                S1 += (t + h) * dW
                W += dW
            X, V = step_batch(X, V, p, h, dW, cfg.sigma)
            t += h
            _check_finite(np.concatenate([X, V], axis=1), offset, t)
        t = target
        states[:, k, :d], states[:, k, d:] = X, V
        if record_jacobian:
            jacs[:, k] = J
        if track_gaussian:
            gauss[:, k, :d] = cfg.sigma * (t * W - S1)
            gauss[:, k, d:] = cfg.sigma * ((1.0 - t) * W + S1)
    return states, jacs, gauss


def _simulate_block_exact(Z0, p, cfg, times, rng, record_jacobian):
    nb, d = Z0.shape[0], p.dim
    Z = Z0.copy()
    states = np.empty((nb, len(times), 2 * d))
    jacs = np.empty((nb, len(times), 2 * d, 2 * d)) if record_jacobian else None
    t = 0.0
    for k, target in enumerate(times):
        Z = exact_ou_sample(Z, target - t, rng.standard_normal((nb, 2 * d)), cfg.sigma)
        t = target
        states[:, k] = Z
        if record_jacobian:
            jacs[:, k] = expm(t * _ou_matrix(d))
    return states, jacs, None


def simulate_ensemble(z0: Union[PhaseState, np.ndarray], p: PotentialSpec, cfg: SimConfig,
                      record_times: Sequence[float], stream: int = 0,
                      record_jacobian: bool = True,
                      track_gaussian: bool = False) -> TrajectoryEnsemble:
    """Simulate cfg.n_paths paths from z0 and record them at record_times.

    z0 is either one PhaseState shared by all paths or an array of initial
    states of shape (n_paths, 2d). With track_gaussian the Gaussian part
    sigma * int_0^t (A1 + (t - s) C1) dW_s is accumulated on the same
    increments.
    """
    times = np.asarray(record_times, dtype=float)
    if times.ndim != 1 or len(times) == 0:
        raise InvalidArgumentError("record_times must be a nonempty list")
    if np.any(np.diff(times) < 0):
        raise InvalidArgumentError("record_times must be sorted")
    if times[0] < 0 or times[-1] > cfg.t_final * (1 + 1e-12):
        raise InvalidArgumentError(f"record_times must lie in [0, {cfg.t_final}]")
    if cfg.scheme == Scheme.EXACT_OU:
        if not p.is_quadratic:
            raise UnsupportedSchemeError(f"exact_ou requires the quadratic potential, got {p.name}")
        if track_gaussian:
            raise UnsupportedSchemeError("the Gaussian part is tracked only by euler_maruyama")

    d = p.dim
    Z0 = _initial_array(z0, cfg.n_paths, d)
    starts = list(range(0, cfg.n_paths, cfg.chunk_size))

    def run_block(b: int):
        lo = starts[b]
        hi = min(lo + cfg.chunk_size, cfg.n_paths)
        rng = block_rng(cfg.master_seed, stream, b)
        logger.debug("stream %d block %d: paths %d..%d", stream, b, lo, hi - 1)
        if cfg.scheme == Scheme.EXACT_OU:
            return _simulate_block_exact(Z0[lo:hi], p, cfg, times, rng, record_jacobian)
        return _simulate_block_em(Z0[lo:hi], p, cfg, times, rng, lo, record_jacobian, track_gaussian)

    workers = min(resolve_workers(cfg.workers), len(starts))
    if workers == 1:
        results = [run_block(b) for b in range(len(starts))]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run_block, range(len(starts))))

    substreams = np.concatenate([np.full(min(cfg.chunk_size, cfg.n_paths - s), b)
                                 for b, s in enumerate(starts)])
    return TrajectoryEnsemble(
        times=times,
        states=np.concatenate([r[0] for r in results]),
        substreams=substreams,
        dim=d,
        scheme=cfg.scheme,
        jacobians=np.concatenate([r[1] for r in results]) if record_jacobian else None,
        gaussian_part=np.concatenate([r[2] for r in results]) if track_gaussian else None,
        meta={"stream": stream, "master_seed": cfg.master_seed, "dt": cfg.dt, "sigma": cfg.sigma},
    )
