"""
Lyapunov Weight and Drift Verification
Builds the exponential weight

    L(z) = exp(a (|v|^2 + 2U(x) + 2k|x|^2 + k x.v))

derives its constants (beta, a^*, a_*, k, kappa) from the potential, and checks
the Jacobian-weighted drift inequality

    E[exp(a Q(Z_t)) ||J_{0,t}||] <= slack * exp(a e^{-beta t/4} Q(z))

by Monte Carlo with a one-sided 99% upper confidence bound, where
Q(x, v) = |v|^2 + 2U(x) + |x|^2/2 + x.v.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import norm

from dynamics import PhaseState, SimConfig, simulate_ensemble
from hypocert_base import DerivationError, InvalidArgumentError
from potentials import PotentialSpec, ball_grid

logger = logging.getLogger(__name__)

# exp() overflows just above 709.
SATURATION_EXPONENT = 700.0
BETA_RADIUS = 20.0
KAPPA_RADIUS = 20.0
KAPPA_STEP = 1e-2
DRIFT_CONFIDENCE = 0.99


class DriftForm:
    """Right-hand sides of the drift inequality, tightest first."""
    HEADER = "header"
    SLACK = "C(a)"
    SLACK_GROWTH = "C(a)*exp((1+M)t)"

    ALL = (HEADER, SLACK, SLACK_GROWTH)


@dataclass(frozen=True)
class LyapunovParams:
    """Constants of the Lyapunov weight.

    q_lower, q_upper and e0 bracket the weight exponent,
    q_lower |z|^2 <= E(z) <= q_upper |z|^2 + e0, which gives
    L_*(r) = exp(a q_lower r^2) and L^*(r) = exp(a (q_upper r^2 + e0)).
    """
    a_star: float
    a: float
    k: float
    beta: float
    kappa: float
    M: float
    c1: float = 1.0
    a_upper: float = 0.0
    q_lower: float = 1.0
    q_upper: float = 1.0
    e0: float = 0.0
    c_kappa: float = 1.0

    def __post_init__(self):
        if self.a < 0 or self.a_star < 0:
            raise InvalidArgumentError("a and a_star must be nonnegative")
        if self.a > self.a_star * (1 + 1e-12):
            raise InvalidArgumentError(f"a={self.a} exceeds a_star={self.a_star}")
        if self.a_upper and self.a_star > self.beta * self.c1 / 32 * (1 + 1e-12):
            raise InvalidArgumentError("a_star must not exceed beta*c1/32")
        if self.kappa < 1:
            raise InvalidArgumentError(f"kappa must be >= 1, got {self.kappa}")

    @classmethod
    def unweighted(cls, M: float = 0.0) -> "LyapunovParams":
        """Degenerate weight L = 1, under which rho is the Euclidean distance."""
        return cls(a_star=0.0, a=0.0, k=1.0, beta=1.0, kappa=1.0, M=M)

    def with_a(self, a: float) -> "LyapunovParams":
        return replace(self, a=a)

    def xi(self, t: float) -> float:
        """Contraction exponent e^{-beta t/4} of the drift inequality."""
        return math.exp(-self.beta * t / 4.0)

    def log_L_lower(self, r):
        return self.a * self.q_lower * np.square(r)

    def log_L_upper(self, r):
        return self.a * (self.q_upper * np.square(r) + self.e0)

    def L_lower(self, r):
        return np.exp(self.log_L_lower(r))

    def L_upper(self, r):
        return np.exp(self.log_L_upper(r))


@dataclass(frozen=True)
class Weight:
    """Value of L(z)^r; `saturated` replaces an overflow to infinity."""
    value: float
    log_value: float
    saturated: bool

    def __float__(self):
        return self.value


@dataclass(frozen=True)
class DriftRow:
    x: np.ndarray
    v: np.ndarray
    lhs_estimate: float
    lhs_ucb: float
    rhs: float
    slack: float
    passed: bool
    inconclusive: bool = False
    within_growth: bool = True


@dataclass
class DriftReport:
    """Per-point outcome of the drift check at one time t."""
    t: float
    a: float
    rows: List[DriftRow] = field(default_factory=list)
    form_passed: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def inconclusive(self) -> bool:
        return any(r.inconclusive for r in self.rows)

    @property
    def fallback_passed(self) -> bool:
        """Every point satisfies the C(a) e^{(1+M)t} form without saturating."""
        return all(r.within_growth and not r.inconclusive for r in self.rows)

    @property
    def tightest_form(self) -> Optional[str]:
        for form in DriftForm.ALL:
            if self.form_passed.get(form):
                return form
        return None


def _split(Z: np.ndarray, dim: int) -> Tuple[np.ndarray, np.ndarray]:
    return Z[..., :dim], Z[..., dim:]


def q_form_array(Z: np.ndarray, p: PotentialSpec) -> np.ndarray:
    """Q(x, v) for phase vectors of shape (..., 2d)."""
    X, V = _split(np.asarray(Z, dtype=float), p.dim)
    return (np.sum(V * V, axis=-1) + 2.0 * p.eval(X)
            + 0.5 * np.sum(X * X, axis=-1) + np.sum(X * V, axis=-1))


def q_form(z: PhaseState, p: PotentialSpec) -> float:
    """Q(x, v) = |v|^2 + 2U(x) + |x|^2/2 + x.v."""
    return float(q_form_array(z.as_vector(), p))


def weight_exponent(Z: np.ndarray, p: PotentialSpec, k: float) -> np.ndarray:
    """E(z) = |v|^2 + 2U(x) + 2k|x|^2 + k x.v, so that L = exp(a E)."""
    X, V = _split(np.asarray(Z, dtype=float), p.dim)
    return (np.sum(V * V, axis=-1) + 2.0 * p.eval(X)
            + 2.0 * k * np.sum(X * X, axis=-1) + k * np.sum(X * V, axis=-1))


def log_weight(Z: np.ndarray, p: PotentialSpec, lp: LyapunovParams) -> np.ndarray:
    """ln L(z) for arrays of phase vectors."""
    return lp.a * weight_exponent(Z, p, lp.k)


def weight_array(Z: np.ndarray, p: PotentialSpec, lp: LyapunovParams, r: float):
    """(L(z)^r, saturated) for arrays; saturated entries hold exp(700)."""
    expo = r * log_weight(Z, p, lp)
    saturated = expo > SATURATION_EXPONENT
    return np.exp(np.minimum(expo, SATURATION_EXPONENT)), saturated


def weight_L(z: PhaseState, p: PotentialSpec, lp: LyapunovParams, r: float = 1.0) -> Weight:
    """L(z)^r with an explicit saturation flag instead of an overflow."""
    if not 0 < r <= 2 * lp.kappa:
        raise InvalidArgumentError(f"exponent r must lie in (0, 2*kappa], got {r}")
    expo = float(r * log_weight(z.as_vector(), p, lp))
    if expo > SATURATION_EXPONENT:
        logger.warning("weight saturated at z=%s (exponent %.4g)", z.as_vector(), expo)
        return Weight(math.exp(SATURATION_EXPONENT), expo, True)
    return Weight(math.exp(expo), expo, False)


def _beta_grid(p: PotentialSpec) -> np.ndarray:
    n = {1: 4001, 2: 201}.get(p.dim, 21)
    return ball_grid(p.dim, BETA_RADIUS, n)


def compute_beta(p: PotentialSpec, k: Optional[float] = None) -> float:
    """Largest beta with x.grad U + c3 >= 2 beta (|x|^2 + kU) on the grid, capped at 1/2."""
    k = p.c1 if k is None else k
    xs = _beta_grid(p)
    num = np.sum(xs * p.grad(xs), axis=-1) + p.c3
    den = 2.0 * (np.sum(xs * xs, axis=-1) + k * p.eval(xs))
    ok = den > 1e-12
    if np.any(num[~ok] < -1e-12):
        return -1.0
    ratios = num[ok] / den[ok]
    return float(min(0.5, ratios.min())) if ratios.size else 0.5


def _sandwich_constants(p: PotentialSpec, k: float) -> Tuple[float, float, float]:
    q_lower = float(np.linalg.eigvalsh(np.array([[2 * k, k / 2], [k / 2, 1.0]]))[0])
    origin = np.zeros((1, p.dim))
    g0 = float(np.sum(p.grad(origin) ** 2))
    m_eff = p.M + (1.0 if g0 > 0 else 0.0)
    q_upper = float(np.linalg.eigvalsh(np.array([[m_eff + 2 * k, k / 2], [k / 2, 1.0]]))[-1])
    e0 = 2.0 * float(p.eval(origin)[0]) + g0
    return q_lower, q_upper, e0


def kappa_constant(lp: LyapunovParams) -> float:
    """Smallest C with r L^*(r) <= C L_*(r)^kappa for all r >= 0."""
    gap = lp.kappa * lp.q_lower - lp.q_upper
    if gap <= 0 or lp.a <= 0:
        raise DerivationError(f"kappa={lp.kappa:.4g} too small for the weight bracket")
    r_peak = 1.0 / math.sqrt(2.0 * lp.a * gap)
    rs = np.arange(KAPPA_STEP, KAPPA_RADIUS + KAPPA_STEP / 2, KAPPA_STEP)
    log_ratio = np.log(rs) + lp.log_L_upper(rs) - lp.kappa * lp.log_L_lower(rs)
    peak = math.log(r_peak) + lp.a * lp.e0 - 0.5
    return math.exp(max(peak, float(log_ratio.max())))


def check_kappa(lp: LyapunovParams, C: Optional[float] = None) -> bool:
    """|z| L^*(|z|) <= C L_*(|z|)^kappa on [0, 20] with step 1e-2 (C defaults to 1/a)."""
    C = 1.0 / lp.a if C is None else C
    rs = np.arange(KAPPA_STEP, KAPPA_RADIUS + KAPPA_STEP / 2, KAPPA_STEP)
    lhs = np.log(rs) + lp.log_L_upper(rs)
    rhs = math.log(C) + lp.kappa * lp.log_L_lower(rs)
    return bool(np.all(lhs <= rhs + 1e-12))


def derive_params(p: PotentialSpec) -> LyapunovParams:
    """Derive (beta, a^*, a_*, k, kappa) and the bracket constants from the potential."""
    k = p.c1
    beta = compute_beta(p, k)
    if beta <= 0:
        raise DerivationError(f"drift rate beta={beta:.4g} is not positive for {p.name}")
    a_upper = beta * p.c1 / 32.0
    a_star = 3.0 * a_upper / (8.0 * (3.0 + p.M))
    kappa = 4.0 * (3.0 + p.M) / 3.0
    q_lower, q_upper, e0 = _sandwich_constants(p, k)
    lp = LyapunovParams(a_star=a_star, a=a_star, k=k, beta=beta, kappa=kappa, M=p.M,
                        c1=p.c1, a_upper=a_upper, q_lower=q_lower, q_upper=q_upper, e0=e0)
    if not check_kappa(lp):
        raise DerivationError(f"kappa={kappa:.4g} fails the grid check with C=1/a")
    lp = replace(lp, c_kappa=kappa_constant(lp))
    logger.info("%s: beta=%.4g a^*=%.4g a_*=%.4g kappa=%.4g C_kappa=%.4g",
                p.name, beta, a_upper, a_star, kappa, lp.c_kappa)
    return lp


def default_z_grid(dim: int, radius: float = 3.0, n: int = 5) -> List[PhaseState]:
    """n x n grid of (x, v) values inside B(0, radius), spread along the diagonal for d > 1."""
    side = np.linspace(-radius / math.sqrt(2.0), radius / math.sqrt(2.0), n)
    unit = np.ones(dim) / math.sqrt(dim)
    return [PhaseState(xs * unit, vs * unit) for xs in side for vs in side]


def slack_constants(lp: LyapunovParams, t: float) -> dict:
    c_beta = lp.c1 * lp.beta
    slack = c_beta / (c_beta - 16.0 * lp.a)
    return {
        DriftForm.HEADER: 1.0,
        DriftForm.SLACK: slack,
        DriftForm.SLACK_GROWTH: slack * math.exp((1.0 + lp.M) * t),
    }


def drift_statistic(states: np.ndarray, jacobians: np.ndarray, p: PotentialSpec,
                    a: float, confidence: float = DRIFT_CONFIDENCE):
    """(mean, one-sided UCB, saturated) of exp(a Q(Z_t)) ||J_{0,t}||_2."""
    expo = a * q_form_array(states, p)
    saturated = bool(np.any(expo > SATURATION_EXPONENT))
    samples = np.exp(np.minimum(expo, SATURATION_EXPONENT)) * np.linalg.norm(jacobians, ord=2, axis=(-2, -1))
    n = samples.shape[0]
    mean = float(samples.mean())
    se = float(samples.std(ddof=1) / math.sqrt(n)) if n > 1 else 0.0
    return mean, mean + float(norm.ppf(confidence)) * se, saturated


def verify_drift(p: PotentialSpec, lp: LyapunovParams, t: float,
                 z_grid: Sequence[PhaseState], cfg: SimConfig, stream: int = 100) -> DriftReport:
    """Monte-Carlo check of the drift inequality at every grid point."""
    if not 0 < t <= 1:
        raise InvalidArgumentError(f"t must lie in (0, 1], got {t}")
    if lp.a > lp.a_star * (1 + 1e-12):
        raise InvalidArgumentError("a must not exceed a_star")
    slacks = slack_constants(lp, t)
    gate = slacks[DriftForm.SLACK]
    growth = slacks[DriftForm.SLACK_GROWTH]
    report = DriftReport(t=t, a=lp.a, form_passed={f: True for f in DriftForm.ALL})
    sim = cfg.replace(t_final=max(cfg.t_final, t), dt=min(cfg.dt, t))
    for i, z in enumerate(z_grid):
        ens = simulate_ensemble(z, p, sim, [t], stream=stream + i)
        mean, ucb, saturated = drift_statistic(ens.states[:, 0], ens.jacobians[:, 0], p, lp.a)
        rhs = math.exp(lp.a * lp.xi(t) * q_form(z, p))
        for form, s in slacks.items():
            report.form_passed[form] &= ucb <= s * rhs
        ok = (ucb <= gate * rhs) and not saturated
        report.rows.append(DriftRow(z.x, z.v, mean, ucb, rhs, gate, ok, saturated,
                                    within_growth=ucb <= growth * rhs))
        logger.debug("drift t=%.3g z=%s lhs=%.5g ucb=%.5g rhs=%.5g", t, z.as_vector(), mean, ucb, rhs)
    logger.info("drift t=%.3g: passed=%s fallback=%s tightest form=%s",
                t, report.passed, report.fallback_passed, report.tightest_form)
    return report


def drift_ratio(p: PotentialSpec, lp: LyapunovParams, t: float,
                z_grid: Sequence[PhaseState], cfg: SimConfig, stream: int = 200) -> float:
    """max_z UCB(E[L(Z_t) ||J_{0,t}||]) / L(z)^{e^{-beta t/4}}, for any t > 0."""
    if t <= 0:
        raise InvalidArgumentError("t must be positive")
    sim = cfg.replace(t_final=max(cfg.t_final, t), dt=min(cfg.dt, t))
    q = norm.ppf(DRIFT_CONFIDENCE)
    worst = -math.inf
    for i, z in enumerate(z_grid):
        ens = simulate_ensemble(z, p, sim, [t], stream=stream + i)
        log_l = log_weight(ens.states[:, 0], p, lp)
        if np.any(log_l > SATURATION_EXPONENT):
            raise InvalidArgumentError(f"weight saturates along paths from z={z.as_vector()}")
        samples = np.exp(log_l) * np.linalg.norm(ens.jacobians[:, 0], ord=2, axis=(-2, -1))
        se = samples.std(ddof=1) / math.sqrt(len(samples)) if len(samples) > 1 else 0.0
        ucb = samples.mean() + q * se
        ratio = math.log(ucb) - lp.xi(t) * float(log_weight(z.as_vector(), p, lp))
        worst = max(worst, ratio)
    return math.exp(worst)
