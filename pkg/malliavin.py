"""
Gaussian Approximation and Coupling Probability
Over a short time t the solution splits as

    Z_t = E Z_t + sigma int_0^t (A1 + (t - s) C1 + E_{s,t}) dW_s,

where A1 = (0, I) is the noise direction, C1 = grad B . A1 = (I, -I) the
first commutator with the drift, and ||E_{s,t}|| <= C_E (t - s)^2. The Gaussian
part G_t is nondegenerate in position although noise only enters the velocity.

The coupling probability P(|Z^1_t - Z^2_t| < delta) of two independent copies
is estimated by Monte Carlo with Wilson intervals.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import binomtest, linregress

from dynamics import (
    SQRT2, PhaseState, SimConfig, block_rng, drift_matrix, simulate_ensemble, step_batch,
    step_tangent_batch,
)
from hypocert_base import InvalidArgumentError
from metric import MetricParams, rho_upper_pairs
from potentials import PotentialSpec

logger = logging.getLogger(__name__)

STEPS_PER_HORIZON = 200
MAX_APPROX_T = 0.5
CONFIDENCE = 0.95
INF_SLOPE_MIN = 2.5
POSITION_SLOPE_MIN = 3.5


class Pairing:
    INDEPENDENT = "independent"
    ALL_PAIRS = "all_pairs"


def noise_direction(dim: int) -> np.ndarray:
    """A1 as a 2d x d matrix."""
    return np.vstack([np.zeros((dim, dim)), np.eye(dim)])


def commutator_direction(p: PotentialSpec, z: PhaseState) -> np.ndarray:
    """grad B(z) . A1 summed over noise coordinates: (1, .., 1, -1, .., -1)."""
    D = drift_matrix(p, z.x[None, :])[0]
    return (D @ noise_direction(p.dim)).sum(axis=1)


def gaussian_part_cov(t: float, sigma: float = 1.0, dim: int = 1) -> np.ndarray:
    """Exact covariance of sigma int_0^t (A1 + (t - s) C1) dW_s."""
    if t <= 0:
        raise InvalidArgumentError(f"t must be positive, got {t}")
    block = sigma ** 2 * np.array([
        [t ** 3 / 3.0, t ** 2 / 2.0 - t ** 3 / 3.0],
        [t ** 2 / 2.0 - t ** 3 / 3.0, t - t ** 2 + t ** 3 / 3.0],
    ])
    return np.kron(block, np.eye(dim))


def error_coefficient(M: float, t: float) -> float:
    """C_E(t) = (sqrt(2) + M)^2 e^{(sqrt(2) + M) t} / 2, the remainder constant of J_{s,t} A1."""
    g = SQRT2 + M
    return 0.5 * g * g * math.exp(g * t)


@dataclass(frozen=True)
class GaussianApprox:
    t: float
    mean: np.ndarray
    mean_se: np.ndarray
    cov: np.ndarray
    error_bound: float


@dataclass(frozen=True)
class ApproxRow:
    t: float
    dev_norm: float
    dev_position: float
    dev_direct: float
    predicted: float
    mean_error: Optional[float] = None
    mean_se: Optional[float] = None


@dataclass
class ApproxReport:
    rows: List[ApproxRow] = field(default_factory=list)
    slope: float = math.nan
    position_slope: float = math.nan

    @property
    def passed(self) -> bool:
        return self.slope >= INF_SLOPE_MIN and self.position_slope >= POSITION_SLOPE_MIN


def gaussian_approx(p: PotentialSpec, z0: PhaseState, t: float, cfg: SimConfig,
                    stream: int = 500) -> GaussianApprox:
    """MC mean of Z_t with standard errors, plus the analytic Gaussian covariance."""
    sim = cfg.replace(t_final=t, dt=min(cfg.dt, t / STEPS_PER_HORIZON))
    ens = simulate_ensemble(z0, p, sim, [t], stream=stream, record_jacobian=False)
    Z = ens.states[:, 0]
    se = Z.std(axis=0, ddof=1) / math.sqrt(len(Z))
    return GaussianApprox(t, Z.mean(axis=0), se, gaussian_part_cov(t, cfg.sigma, p.dim),
                          error_coefficient(p.M, t))


def validate_gaussian_approx(p: PotentialSpec, z0: PhaseState, t_grid: Sequence[float],
                             cfg: SimConfig, stream: int = 500,
                             exact_mean: Optional[np.ndarray] = None) -> ApproxReport:
    """Covariance deviation of Z_t from its Gaussian part over small times.

    The deviation Cov(Z_t) - Cov(G_t) is measured on the same Brownian
    increments; its leading terms are sigma^2 t^3/6 (cross covariance) and
    order t^4 (position variance). exact_mean, if given, is a callable t -> E Z_t.
    """
    if any(t <= 0 or t > MAX_APPROX_T for t in t_grid):
        raise InvalidArgumentError(f"approximation times must lie in (0, {MAX_APPROX_T}]")
    d = p.dim
    report = ApproxReport()
    for i, t in enumerate(t_grid):
        sim = cfg.replace(t_final=t, dt=min(cfg.dt, t / STEPS_PER_HORIZON))
        ens = simulate_ensemble(z0, p, sim, [t], stream=stream + i,
                                record_jacobian=False, track_gaussian=True)
        Z, G = ens.states[:, 0], ens.gaussian_part[:, 0]
        cov_z = np.atleast_2d(np.cov(Z, rowvar=False))
        dev = cov_z - np.atleast_2d(np.cov(G, rowvar=False))
        direct = cov_z - gaussian_part_cov(t, cfg.sigma, d)
        mean_err = mean_se = None
        if exact_mean is not None:
            se = Z.std(axis=0, ddof=1) / math.sqrt(len(Z))
            err = np.abs(Z.mean(axis=0) - exact_mean(t))
            k = int(np.argmax(err / np.maximum(se, 1e-300)))
            mean_err, mean_se = float(err[k]), float(se[k])
        row = ApproxRow(t, float(np.max(np.abs(dev))), float(np.max(np.abs(dev[:d, :d]))),
                        float(np.max(np.abs(direct))), cfg.sigma ** 2 * t ** 3 / 6.0,
                        mean_err, mean_se)
        report.rows.append(row)
        logger.debug("gaussian approx t=%.3g dev=%.4g pos=%.4g direct=%.4g",
                     t, row.dev_norm, row.dev_position, row.dev_direct)
    if len(report.rows) >= 2:
        log_t = np.log([r.t for r in report.rows])
        report.slope = float(linregress(log_t, np.log([r.dev_norm for r in report.rows])).slope)
        report.position_slope = float(linregress(log_t, np.log([r.dev_position for r in report.rows])).slope)
    logger.info("gaussian approx slopes: inf-norm %.3f, position %.3f", report.slope, report.position_slope)
    return report


def malliavin_derivative(jac_s: np.ndarray, jac_t: np.ndarray, sigma: float = SQRT2) -> np.ndarray:
    """D_s Z_t = J_{0,t} J_{0,s}^{-1} A1 sigma for stacked tangent flows (n, 2d, 2d)."""
    d = jac_t.shape[-1] // 2
    J_st = np.swapaxes(np.linalg.solve(np.swapaxes(jac_s, -1, -2), np.swapaxes(jac_t, -1, -2)), -1, -2)
    return sigma * (J_st @ noise_direction(d))


def flow_identity_residual(p: PotentialSpec, z0: PhaseState, s: float, t: float,
                           cfg: SimConfig, stream: int = 600) -> float:
    """max |J_{s,t} - J_{0,t} J_{0,s}^{-1}| with J_{s,t} integrated directly from s."""
    if not 0 < s < t:
        raise InvalidArgumentError("need 0 < s < t")
    d = p.dim
    h = min(cfg.dt, s)
    n_s, n_t = int(round(s / h)), int(round(t / h))
    n = min(cfg.n_paths, cfg.chunk_size)
    rng = block_rng(cfg.master_seed, stream, 0)
    X = np.broadcast_to(z0.x, (n, d)).copy()
    V = np.broadcast_to(z0.v, (n, d)).copy()
    eye = np.broadcast_to(np.eye(2 * d), (n, 2 * d, 2 * d))
    J0, Js, J0s = eye.copy(), eye.copy(), None
    for k in range(n_t):
        if k == n_s:
            J0s = J0.copy()
        if k >= n_s:
            Js = step_tangent_batch(Js, X, p, h)
        J0 = step_tangent_batch(J0, X, p, h)
        X, V = step_batch(X, V, p, h, rng.standard_normal((n, d)) * math.sqrt(h), cfg.sigma)
    composed = np.swapaxes(np.linalg.solve(np.swapaxes(J0s, -1, -2), np.swapaxes(J0, -1, -2)), -1, -2)
    return float(np.max(np.abs(Js - composed)))


@dataclass(frozen=True)
class ProbEstimate:
    """Coupling probability of both events with 95% Wilson intervals."""
    z1: np.ndarray
    z2: np.ndarray
    t: float
    delta: float
    n: int
    successes: int
    p_hat: float
    ci_lo: float
    ci_hi: float
    rho_successes: int
    rho_p_hat: float
    rho_ci_lo: float
    rho_ci_hi: float
    pairing: str = Pairing.INDEPENDENT

    @property
    def inconclusive(self) -> bool:
        return self.successes == 0 or self.rho_successes == 0

    @property
    def lower_bound(self) -> float:
        return min(self.ci_lo, self.rho_ci_lo)


def wilson_interval(successes: int, n: int, confidence: float = CONFIDENCE):
    """Two-sided Wilson interval; one-sided upper interval when there are no successes."""
    if n <= 0:
        raise InvalidArgumentError("n must be positive")
    successes = int(min(max(successes, 0), n))
    alternative = "less" if successes == 0 else "two-sided"
    ci = binomtest(successes, n, alternative=alternative).proportion_ci(
        confidence_level=confidence, method="wilson")
    return float(ci.low), float(ci.high)


def _in_ball(Z: np.ndarray, radius: float) -> np.ndarray:
    return np.linalg.norm(Z, axis=-1) <= radius


def _independent_counts(Z1, Z2, mp, delta, R_prime):
    dist = np.linalg.norm(Z1 - Z2, axis=-1)
    close = dist < delta
    rho_event = np.zeros_like(close)
    candidates = close & _in_ball(Z1, R_prime) & _in_ball(Z2, R_prime)
    if np.any(candidates):
        rho_r, _ = rho_upper_pairs(Z1[candidates], Z2[candidates], mp, mp.r)
        rho_event[candidates] = rho_r < delta
    n = len(Z1)
    return n, int(close.sum()), int(rho_event.sum()), None, None


def _hoeffding_effective_n(per_i: np.ndarray, per_j: np.ndarray, p_hat: float) -> int:
    """Binomial sample size with the variance of the all-pairs U-statistic."""
    n1, n2 = len(per_i), len(per_j)
    var = per_i.var(ddof=1) / n1 + per_j.var(ddof=1) / n2
    if var <= 0 or p_hat <= 0 or p_hat >= 1:
        return min(n1, n2)
    return int(max(min(n1, n2), min(n1 * n2, round(p_hat * (1 - p_hat) / var))))


def _all_pairs_counts(Z1, Z2, mp, delta, R_prime):
    tree = cKDTree(Z2)
    neighbours = tree.query_ball_point(Z1, r=delta)
    n1, n2 = len(Z1), len(Z2)
    hits_i = np.zeros(n1)
    hits_j = np.zeros(n2)
    rho_i = np.zeros(n1)
    rho_j = np.zeros(n2)
    in1, in2 = _in_ball(Z1, R_prime), _in_ball(Z2, R_prime)
    for i, js in enumerate(neighbours):
        if not js:
            continue
        js = np.asarray(js, dtype=int)
        js = js[np.linalg.norm(Z2[js] - Z1[i], axis=-1) < delta]
        hits_i[i] = len(js)
        np.add.at(hits_j, js, 1.0)
        js = js[in2[js]] if in1[i] else js[:0]
        if len(js):
            rho_r, _ = rho_upper_pairs(Z1[i], Z2[js], mp, mp.r)
            ok = js[rho_r < delta]
            rho_i[i] = len(ok)
            np.add.at(rho_j, ok, 1.0)
    total = n1 * n2
    p_hat, rho_hat = hits_i.sum() / total, rho_i.sum() / total
    n_eff = _hoeffding_effective_n(hits_i / n2, hits_j / n1, p_hat)
    rho_eff = _hoeffding_effective_n(rho_i / n2, rho_j / n1, rho_hat)
    k = int(round(p_hat * n_eff)) if hits_i.sum() else 0
    k_rho = int(round(rho_hat * rho_eff)) if rho_i.sum() else 0
    return (n_eff, k, k_rho, (p_hat, n_eff), (rho_hat, rho_eff))


def coupling_probability(p: PotentialSpec, z1: PhaseState, z2: PhaseState, t: float, delta: float,
                         cfg: SimConfig, mp: MetricParams, R: Optional[float] = None,
                         R_prime: float = math.inf, pairing: str = Pairing.INDEPENDENT,
                         stream: int = 700) -> ProbEstimate:
    """Estimate P(|Z^1_t - Z^2_t| < delta) and P(rho_r(Z^1_t, Z^2_t) < delta, both in B(0, R'))
    for independent copies started at z1 and z2.
    """
    if delta <= 0 or t <= 0:
        raise InvalidArgumentError("delta and t must be positive")
    if R is not None and max(np.linalg.norm(z1.as_vector()), np.linalg.norm(z2.as_vector())) > R * (1 + 1e-12):
        raise InvalidArgumentError(f"initial points must lie in B(0, {R})")
    sim = cfg.replace(t_final=max(cfg.t_final, t), dt=min(cfg.dt, t))
    Z1 = simulate_ensemble(z1, p, sim, [t], stream=stream, record_jacobian=False).states[:, 0]
    Z2 = simulate_ensemble(z2, p, sim, [t], stream=stream + 1, record_jacobian=False).states[:, 0]
    if pairing == Pairing.ALL_PAIRS:
        n, k, k_rho, est, rho_est = _all_pairs_counts(Z1, Z2, mp, delta, R_prime)
        p_hat, rho_hat = est[0], rho_est[0]
        n_rho = rho_est[1]
    elif pairing == Pairing.INDEPENDENT:
        n, k, k_rho, _, _ = _independent_counts(Z1, Z2, mp, delta, R_prime)
        p_hat, rho_hat, n_rho = k / n, k_rho / n, n
    else:
        raise InvalidArgumentError(f"Unknown pairing: {pairing}")
    lo, hi = wilson_interval(k, n)
    rlo, rhi = wilson_interval(k_rho, n_rho)
    est = ProbEstimate(z1.as_vector(), z2.as_vector(), t, delta, n, k, float(p_hat), lo, hi,
                       k_rho, float(rho_hat), rlo, rhi, pairing)
    if est.inconclusive:
        logger.warning("coupling from %s and %s: no successes (t=%.3g, delta=%.3g); inconclusive",
                       z1.as_vector(), z2.as_vector(), t, delta)
    return est


def alpha_reference_bound(t: float, delta: float, R: float, C: float = 1.0, k: float = 1.0,
                          m: Optional[float] = None) -> float:
    """C delta^2 t^-2 exp(-k m^2/t^3) - 8 exp(-delta^2/(16 C t^5)), clamped to [0, 1].

    m defaults to 2R. Reference only; certificates use coupling_probability.
    """
    if t <= 0 or delta <= 0 or R <= 0:
        raise InvalidArgumentError("t, delta and R must be positive")
    m = 2.0 * R if m is None else m
    gauss = C * delta ** 2 / t ** 2 * math.exp(-k * m * m / t ** 3)
    tail = 8.0 * math.exp(-delta ** 2 / (16.0 * C * t ** 5))
    return min(1.0, max(0.0, gauss - tail))
