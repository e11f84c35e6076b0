"""
Weighted Metrics and Empirical Wasserstein-1
rho_r(z1, z2) is the infimum over paths of the integral of L^r |gamma'|; we bound
it from above by the straight segment, integrated with 32-point Gauss-Legendre
quadrature. The combined distance is

    d(z1, z2) = min(rho_r(z1, z2)/delta, 1) + beta_w rho(z1, z2).

Empirical W1 between two equal-size samples is the optimal assignment cost.
"""

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np
from numpy.polynomial.legendre import leggauss
from scipy.optimize import linear_sum_assignment

from dynamics import PhaseState, resolve_workers
from hypocert_base import GroundMetric, InvalidArgumentError
from lyapunov import SATURATION_EXPONENT, LyapunovParams, log_weight
from potentials import PotentialSpec

logger = logging.getLogger(__name__)

QUAD_NODES = 32
MAX_MATCHING_SIZE = 4096

_nodes, _weights = leggauss(QUAD_NODES)
SEGMENT_S = 0.5 * (_nodes + 1.0)
SEGMENT_W = 0.5 * _weights

Samples = Union[Sequence[PhaseState], np.ndarray]


@dataclass(frozen=True)
class MetricParams:
    """Weight, exponent r, truncation delta and mixing weight beta_w of d."""
    lp: LyapunovParams
    p: PotentialSpec
    r: float = 0.5
    delta: float = 0.1
    beta_w: float = 0.01

    def __post_init__(self):
        if not 0 < self.r <= 1:
            raise InvalidArgumentError(f"r must lie in (0, 1], got {self.r}")
        if self.delta <= 0:
            raise InvalidArgumentError("delta must be positive")
        if not 0 < self.beta_w < 1:
            raise InvalidArgumentError(f"beta_w must lie in (0, 1), got {self.beta_w}")

    def replace(self, **changes) -> "MetricParams":
        values = dict(self.__dict__)
        values.update(changes)
        return MetricParams(**values)


def _as_array(samples: Samples) -> np.ndarray:
    if isinstance(samples, np.ndarray):
        return np.atleast_2d(samples.astype(float))
    return np.array([s.as_vector() for s in samples], dtype=float)


def rho_upper_pairs(Z1: np.ndarray, Z2: np.ndarray, mp: MetricParams, r: float = 1.0):
    """Straight-segment bound on rho_r for broadcastable arrays (..., 2d).

    Returns (values, saturated); saturated entries are +inf.
    """
    Z1 = np.asarray(Z1, dtype=float)
    Z2 = np.asarray(Z2, dtype=float)
    diff = Z2 - Z1
    length = np.linalg.norm(diff, axis=-1)
    pts = Z1[..., None, :] + SEGMENT_S[:, None] * diff[..., None, :]
    expo = r * log_weight(pts, mp.p, mp.lp)
    saturated = np.any(expo > SATURATION_EXPONENT, axis=-1)
    # Factor out the peak exponent so the quadrature itself never overflows.
    peak = np.max(expo, axis=-1, keepdims=True)
    with np.errstate(over="ignore"):
        integral = np.exp(peak[..., 0]) * np.sum(SEGMENT_W * np.exp(expo - peak), axis=-1)
    values = np.where(saturated, np.inf, length * integral)
    return values, saturated


def rho_upper(z1: PhaseState, z2: PhaseState, mp: MetricParams, r: float = 1.0) -> float:
    """Upper bound on rho_r(z1, z2); +inf if the weight saturates on the segment."""
    value, saturated = rho_upper_pairs(z1.as_vector(), z2.as_vector(), mp, r)
    if saturated:
        logger.warning("rho_%g saturated between %s and %s", r, z1.as_vector(), z2.as_vector())
    return float(value)


def rho_coarse_upper(z1: PhaseState, z2: PhaseState, mp: MetricParams, r: float = 1.0) -> float:
    """|z1 - z2| exp(r a e0) exp(M' (|z1|^2 + |z2|^2)) with M' = r a q_upper."""
    a, q = z1.as_vector(), z2.as_vector()
    m_prime = r * mp.lp.a * mp.lp.q_upper
    return float(np.linalg.norm(q - a) * math.exp(r * mp.lp.a * mp.lp.e0 + m_prime * (a @ a + q @ q)))


def equivalence_constant(mp: MetricParams, radius: float, r: float = 1.0) -> float:
    """R'' with rho_r <= R'' |z1 - z2| on B(0, radius): the bound on L^r there."""
    return float(np.exp(r * mp.lp.log_L_upper(radius)))


def metric_d_pairs(Z1: np.ndarray, Z2: np.ndarray, mp: MetricParams) -> np.ndarray:
    rho_r, _ = rho_upper_pairs(Z1, Z2, mp, mp.r)
    rho, _ = rho_upper_pairs(Z1, Z2, mp, 1.0)
    return np.minimum(rho_r / mp.delta, 1.0) + mp.beta_w * rho


def metric_d(z1: PhaseState, z2: PhaseState, mp: MetricParams) -> float:
    """d(z1, z2) = min(rho_r/delta, 1) + beta_w rho."""
    return float(metric_d_pairs(z1.as_vector(), z2.as_vector(), mp))


class RowMetric:
    """Ground metric callable on a pair, with a vectorised row(a, B)."""

    def __init__(self, name: str, row: Callable[[np.ndarray, np.ndarray], np.ndarray]):
        self.name = name
        self.row = row

    def __call__(self, z1, z2) -> float:
        a = z1.as_vector() if isinstance(z1, PhaseState) else np.asarray(z1, dtype=float)
        b = z2.as_vector() if isinstance(z2, PhaseState) else np.asarray(z2, dtype=float)
        return float(self.row(a, b[None, :])[0])


def make_ground_metric(name: str, mp: Optional[MetricParams] = None) -> RowMetric:
    """Ground metric by name: euclidean | rho | rho_r | d."""
    metric_map = {
        GroundMetric.EUCLIDEAN: lambda: (lambda a, B: np.linalg.norm(B - a, axis=-1)),
        GroundMetric.RHO: lambda: (lambda a, B: rho_upper_pairs(a, B, mp, 1.0)[0]),
        GroundMetric.RHO_R: lambda: (lambda a, B: rho_upper_pairs(a, B, mp, mp.r)[0]),
        GroundMetric.D: lambda: (lambda a, B: metric_d_pairs(a, B, mp)),
    }
    if name not in metric_map:
        raise InvalidArgumentError(f"Unsupported ground metric: {name}")
    if name != GroundMetric.EUCLIDEAN and mp is None:
        raise InvalidArgumentError(f"ground metric {name} needs MetricParams")
    return RowMetric(name, metric_map[name]())


def cost_matrix(A: np.ndarray, B: np.ndarray, ground_metric, workers: Optional[int] = None) -> np.ndarray:
    """Pairwise costs, one row per sample of A, rows built in parallel."""
    if isinstance(ground_metric, RowMetric):
        def build(i):
            return ground_metric.row(A[i], B)
    else:
        def build(i):
            return np.array([ground_metric(A[i], b) for b in B], dtype=float)

    n_workers = min(resolve_workers(workers), len(A))
    if n_workers <= 1:
        rows = [build(i) for i in range(len(A))]
    else:
        with ThreadPoolExecutor(max_workers=n_workers) as pool:
            rows = list(pool.map(build, range(len(A))))
    return np.vstack(rows)


def wasserstein1(samplesA: Samples, samplesB: Samples, ground_metric=None,
                 workers: Optional[int] = None, max_n: int = MAX_MATCHING_SIZE) -> float:
    """Empirical W1 between equal-size samples by exact min-cost matching.

    ground_metric is a RowMetric, any callable on a pair of phase vectors, or
    None for the Euclidean distance.
    """
    A, B = _as_array(samplesA), _as_array(samplesB)
    if A.shape[0] != B.shape[0]:
        raise InvalidArgumentError(f"sample sizes differ: {A.shape[0]} vs {B.shape[0]}")
    if A.shape[0] > max_n:
        raise InvalidArgumentError(f"n={A.shape[0]} exceeds the matching cap {max_n}; resample first")
    if A.shape[0] == 0:
        raise InvalidArgumentError("samples must be nonempty")
    metric = ground_metric or make_ground_metric(GroundMetric.EUCLIDEAN)
    C = cost_matrix(A, B, metric, workers)
    if not np.all(np.isfinite(C)):
        logger.warning("cost matrix has %d saturated entries", int(np.sum(~np.isfinite(C))))
        return math.inf
    rows, cols = linear_sum_assignment(C)
    return float(C[rows, cols].sum() / A.shape[0])


def wasserstein1_1d_euclidean(samplesA: Sequence[float], samplesB: Sequence[float]) -> float:
    """Exact 1D W1 through the sorted (monotone) coupling."""
    a = np.sort(np.asarray(samplesA, dtype=float).ravel())
    b = np.sort(np.asarray(samplesB, dtype=float).ravel())
    if a.shape != b.shape:
        raise InvalidArgumentError(f"sample sizes differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidArgumentError("samples must be nonempty")
    return float(np.mean(np.abs(a - b)))
