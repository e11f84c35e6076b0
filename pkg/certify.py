"""
Harris Certificate Assembly
Combines the verified drift, gradient and coupling conditions into a
contraction certificate for the distance d:

    W_d(P_t mu, P_t nu) <= gamma^{t/T - 1} W_d(mu, nu),

one region at a time (far: rho > K, small: rho_r < delta, middle: the rest),
with gamma = max(gamma_far, gamma_small, gamma_mid) at a common time T_cert.
Factors extremely close to 1 are carried as ln(gamma) computed with log1p.

measure_decay fits the empirical W1 decay rate of two simulated laws for
comparison with the certified rate.
"""

import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import quad
from scipy.optimize import brentq
from scipy.stats import linregress

from dynamics import PhaseState, SimConfig, block_rng, simulate_ensemble
from gamma2 import QuadraticObservable, c_m, verify_gradient_bound
from hypocert_base import (
    CertificateError, GroundMetric, HypocertError, InconclusiveError, InvalidArgumentError,
    PreconditionError, Provenance,
)
from lyapunov import (
    DriftForm, LyapunovParams, default_z_grid, derive_params, drift_ratio, verify_drift,
)
from malliavin import Pairing, ProbEstimate, coupling_probability
from metric import MAX_MATCHING_SIZE, MetricParams, make_ground_metric, wasserstein1
from potentials import PotentialSpec, check_hypotheses

logger = logging.getLogger(__name__)

SMALL_FACTOR = 0.75
FAR_SEARCH_LIMIT = 1e3
R_FLOOR = 1e-3
MID_RADIUS_FLOOR = 1.0
FIT_FLOOR_MULTIPLE = 3.0


class Stage:
    HYPOTHESES = "hypotheses"
    LYAPUNOV = "lyapunov"
    DRIFT = "drift"
    GRADIENT = "gradient"
    SMALL = "small"
    FAR = "far"
    COUPLING = "coupling"
    MID = "mid"


@dataclass(frozen=True)
class InitialLaw:
    """Point mass or isotropic Gaussian initial distribution on phase space."""
    mean: np.ndarray
    std: float = 0.0

    @classmethod
    def parse(cls, text: str, dim: int) -> "InitialLaw":
        """'point:x_1,..,x_d,v_1,..,v_d' or 'gaussian:x_1,..,v_d;std'."""
        kind, _, body = text.strip().partition(":")
        try:
            if kind == "point":
                mean, std = np.array([float(s) for s in body.split(",")]), 0.0
            elif kind == "gaussian":
                loc, _, scale = body.partition(";")
                mean, std = np.array([float(s) for s in loc.split(",")]), float(scale)
            else:
                raise InvalidArgumentError(f"Unknown initial law kind: {kind!r}")
        except ValueError as err:
            raise InvalidArgumentError(f"Malformed initial law {text!r}: {err}")
        if mean.shape != (2 * dim,):
            raise InvalidArgumentError(f"initial law needs {2 * dim} coordinates, got {mean.size}")
        if std < 0:
            raise InvalidArgumentError("std must be nonnegative")
        return cls(mean, std)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        Z = np.broadcast_to(self.mean, (n, self.mean.size)).copy()
        if self.std > 0:
            Z += self.std * rng.standard_normal(Z.shape)
        return Z

    def describe(self) -> str:
        coords = ",".join(repr(float(c)) for c in self.mean)
        return f"gaussian:{coords};{self.std!r}" if self.std > 0 else f"point:{coords}"


@dataclass(frozen=True)
class FarReport:
    t: float
    alpha_target: float
    C: float
    R: float
    C1: float
    K: float


@dataclass(frozen=True)
class SmallReport:
    factor: float
    t_min: float
    delta_cap: float


@dataclass(frozen=True)
class MidReport:
    factor: float
    log_factor: float
    a: float
    R: float
    R_prime: float
    C_star: float
    beta_w_cap: float


@dataclass(frozen=True)
class CertifyConfig:
    """Knobs of the certificate pipeline beyond the simulation settings."""
    r: float = 0.5
    delta: float = 0.1
    beta_w: float = 0.5
    alpha_target: float = 0.5
    hypothesis_radius: float = 20.0
    drift_times: Tuple[float, ...] = (0.25, 0.5, 1.0)
    drift_radius: float = 3.0
    drift_grid: int = 5
    gradient_times: Tuple[float, ...] = (1.0,)
    n_random_observables: int = 2
    coupling_pairs: int = 20000
    pairing: str = Pairing.ALL_PAIRS
    drift_fallback: bool = True
    t_cert: Optional[float] = None


@dataclass
class HarrisCertificate:
    """Every constant of the certificate with its provenance."""
    lp: LyapunovParams
    C_M: float
    mp: MetricParams
    C1_prop: float
    K: float
    R_region: float
    a_coupling: float
    gamma_far: float
    gamma_small: float
    gamma_mid: float
    T_cert: float
    C_final: float
    lambda_final: float
    log_gamma: Dict[str, float] = field(default_factory=dict)
    C_grow: float = 1.0
    C_star: float = 1.0
    delta_cap: float = 1.0
    R_far: float = 0.0
    drift_form: Optional[str] = None
    drift_fallback: bool = False
    mid_degenerate: bool = False
    coupling: List[ProbEstimate] = field(default_factory=list)
    potential: str = ""

    def items(self) -> List[Tuple[str, float, str]]:
        """(key, value, provenance) rows in report order."""
        lp, mp = self.lp, self.mp
        return [
            ("potential", self.potential, Provenance.CONFIGURED),
            ("a_upper", lp.a_upper, Provenance.DERIVED),
            ("a_star", lp.a_star, Provenance.DERIVED),
            ("k", lp.k, Provenance.DERIVED),
            ("beta", lp.beta, Provenance.DERIVED),
            ("kappa", lp.kappa, Provenance.DERIVED),
            ("C_kappa", lp.c_kappa, Provenance.DERIVED),
            ("M", lp.M, Provenance.DERIVED),
            ("C_M", self.C_M, Provenance.DERIVED),
            ("r", mp.r, Provenance.CONFIGURED),
            ("r0", mp.r, Provenance.CONFIGURED),
            ("delta", mp.delta, Provenance.DERIVED),
            ("delta_cap", self.delta_cap, Provenance.DERIVED),
            ("beta_w", mp.beta_w, Provenance.DERIVED),
            ("drift_form", self.drift_form or "", Provenance.MEASURED),
            ("drift_fallback", self.drift_fallback, Provenance.MEASURED),
            ("C_grow", self.C_grow, Provenance.MEASURED),
            ("R_far", self.R_far, Provenance.DERIVED),
            ("C1_prop", self.C1_prop, Provenance.DERIVED),
            ("K", self.K, Provenance.DERIVED),
            ("R_region", self.R_region, Provenance.DERIVED),
            ("mid_degenerate", self.mid_degenerate, Provenance.DERIVED),
            ("C_star", self.C_star, Provenance.DERIVED),
            ("a_coupling", self.a_coupling, Provenance.MEASURED),
            ("gamma_far", self.gamma_far, Provenance.DERIVED),
            ("gamma_small", self.gamma_small, Provenance.DERIVED),
            ("gamma_mid", self.gamma_mid, Provenance.MEASURED),
            ("log_gamma_far", self.log_gamma.get(Stage.FAR, math.nan), Provenance.DERIVED),
            ("log_gamma_small", self.log_gamma.get(Stage.SMALL, math.nan), Provenance.DERIVED),
            ("log_gamma_mid", self.log_gamma.get(Stage.MID, math.nan), Provenance.MEASURED),
            ("T_cert", self.T_cert, Provenance.DERIVED),
            ("C_final", self.C_final, Provenance.MEASURED),
            ("lambda_final", self.lambda_final, Provenance.MEASURED),
        ]


def far_radius(lp: LyapunovParams, t: float, C: float, alpha_target: float) -> float:
    """Smallest R with (1 - xi(t)) a q_lower R^2 >= ln(C/alpha), by root finding."""
    target = math.log(C / alpha_target)
    if target <= 0:
        return 0.0
    rate = (1.0 - lp.xi(t)) * lp.a * lp.q_lower

    def gap(R):
        return rate * R * R - target

    if gap(FAR_SEARCH_LIMIT) < 0:
        raise CertificateError(f"no far-region radius below {FAR_SEARCH_LIMIT:g} at t={t:g}; increase t",
                               stage=Stage.FAR, constant="R")
    return brentq(gap, 0.0, FAR_SEARCH_LIMIT)


def far_region_factor(lp: LyapunovParams, mp: MetricParams, t: float, alpha_target: float = 0.5,
                      C: float = 1.0) -> FarReport:
    """Radius R beyond which C L^{xi(t)} <= alpha L, and C1 = C R e^{a e0} e^{a q_upper R^2}, K = 4 C1."""
    if not 0.5 <= alpha_target < 1:
        raise InvalidArgumentError(f"alpha_target must lie in [1/2, 1), got {alpha_target}")
    if t <= 0:
        raise InvalidArgumentError("t must be positive")
    R = max(far_radius(lp, t, C, alpha_target), R_FLOOR)
    C1 = C * R * math.exp(lp.log_L_upper(R))
    logger.info("far region t=%.4g: R=%.5g C1=%.5g K=%.5g", t, R, C1, 4 * C1)
    return FarReport(t, alpha_target, C, R, C1, 4.0 * C1)


def far_log_gamma(far: FarReport, beta_w: float) -> float:
    """ln of sup over rho >= K of (1 + beta_w (C1 + alpha rho)) / (1 + beta_w rho), attained at K."""
    return (math.log1p(beta_w * (far.C1 + far.alpha_target * far.K))
            - math.log1p(beta_w * far.K))


def small_region_threshold(lp: LyapunovParams, r: float) -> float:
    """max(4 ln(kappa/r)/beta, 3 ln 12): kappa xi(t) <= r and 3 e^{-t/3} <= 1/4."""
    return max(4.0 * math.log(lp.kappa / r) / lp.beta, 3.0 * math.log(12.0))


def delta_cap(cm: float, lp: LyapunovParams) -> float:
    """delta <= 1/(2(C + 2)) with C = sqrt(C_M) (1 + 1) C_kappa."""
    C = math.sqrt(cm) * 2.0 * lp.c_kappa
    return 1.0 / (2.0 * (C + 2.0))


def small_region_factor(cm: float, mp: MetricParams, t: float) -> SmallReport:
    """Contraction 3/4 of d when rho_r < delta, valid once t is past the threshold."""
    t_min = small_region_threshold(mp.lp, mp.r)
    if t < t_min * (1 - 1e-12):
        raise PreconditionError(f"t={t:.6g} is below the small-region threshold {t_min:.6g}",
                                minimal_t=t_min)
    return SmallReport(SMALL_FACTOR, t_min, delta_cap(cm, mp.lp))


def mid_radius(lp: LyapunovParams, r: float, C1: float, delta: float,
               floor: float = MID_RADIUS_FLOOR) -> float:
    """Radius beyond which L^r <= (delta/(8 C1)) L, never below floor.

    Any larger radius also satisfies the inequality.
    """
    if r >= 1:
        raise CertificateError("the middle region needs r < 1", stage=Stage.MID, constant="r")
    target = math.log(8.0 * C1 / delta)
    return max(math.sqrt(max(target, 0.0) / ((1.0 - r) * lp.a * lp.q_lower)), floor)


def tail_radius(lp: LyapunovParams, R: float, C1: float) -> float:
    """R' with int_R^{R'} L_*(s) ds = 8 C1."""
    need = 8.0 * C1
    upper = R + need / float(lp.L_lower(R))
    if upper <= R:
        return R

    def gap(Rp):
        return quad(lambda s: float(lp.L_lower(s)), R, Rp)[0] - need

    if gap(upper) <= 0:
        return upper
    return brentq(gap, R, upper)


def c_star(lp: LyapunovParams, C_grow: float, t: float, R_prime: float) -> float:
    return lp.c_kappa * C_grow * math.exp(lp.kappa * lp.xi(t) * float(lp.log_L_upper(R_prime)))


def mid_region_factor(lp: LyapunovParams, mp: MetricParams, far: FarReport, coupling: Sequence[ProbEstimate],
                      C_grow: float, t: float) -> MidReport:
    """1 - a/4 from the coupling lower bound a, with beta_w <= a/(8 C_*)."""
    a = min((c.lower_bound for c in coupling), default=0.0)
    if a <= 0:
        raise InconclusiveError("coupling probability lower bound is 0; increase the number of pairs or t",
                                stage=Stage.MID, constant="a_coupling")
    R = mid_radius(lp, mp.r, far.C1, mp.delta)
    R_prime = tail_radius(lp, R, far.C1)
    cs = c_star(lp, C_grow, t, R_prime)
    cap = a / (8.0 * cs)
    if mp.beta_w > cap * (1 + 1e-12):
        raise PreconditionError(f"beta_w={mp.beta_w:.4g} exceeds a/(8 C_*)={cap:.4g}")
    log_factor = math.log1p(-a / 4.0)
    return MidReport(math.exp(log_factor), log_factor, a, R, R_prime, cs, cap)


def coupling_anchors(dim: int, radius: float) -> List[PhaseState]:
    """{-radius u, 0, radius u} at rest, u the unit diagonal of position space."""
    u = np.ones(dim) / math.sqrt(dim)
    return [PhaseState(s * radius * u, np.zeros(dim)) for s in (-1.0, 0.0, 1.0)]


def _stage(name: str, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except CertificateError:
        raise
    except HypocertError as err:
        raise CertificateError(str(err), stage=name) from err


def _observables(dim: int, seed: int, n_random: int) -> List[QuadraticObservable]:
    fns = [QuadraticObservable.linear(np.eye(2 * dim)[i]) for i in range(2 * dim)]
    rng = block_rng(seed, 900, 0)
    fns += [QuadraticObservable.random(rng, dim, 0.5) for _ in range(n_random)]
    return fns


def assemble(p: PotentialSpec, cfg: SimConfig, cc: Optional[CertifyConfig] = None) -> HarrisCertificate:
    """Run the whole pipeline; any failing stage raises CertificateError naming it."""
    cc = cc or CertifyConfig()
    hyp = check_hypotheses(p, cc.hypothesis_radius, 401 if p.dim == 1 else 41)
    if not hyp.passed:
        failing = "hess_bound" if not hyp.hessian_ok else "c3"
        raise CertificateError(f"{p.name} violates its hypotheses (drift margin {hyp.drift_margin:.3g}, "
                               f"hessian margin {hyp.hessian_margin:.3g})",
                               stage=Stage.HYPOTHESES, constant=failing)

    lp = _stage(Stage.LYAPUNOV, derive_params, p)
    cm = c_m(p.M)

    z_grid = default_z_grid(p.dim, cc.drift_radius, cc.drift_grid)
    form = None
    fallback = False
    for t in cc.drift_times:
        rep = _stage(Stage.DRIFT, verify_drift, p, lp, t, z_grid, cfg)
        if rep.inconclusive:
            raise InconclusiveError(f"drift weights saturate at t={t:g}; shrink the grid radius",
                                    stage=Stage.DRIFT, constant="C(a)")
        if not rep.passed:
            if not (cc.drift_fallback and rep.fallback_passed):
                raise CertificateError(f"drift inequality fails at t={t:g}", stage=Stage.DRIFT, constant="C(a)")
            logger.warning("drift at t=%g holds only with the C(a) e^{(1+M)t} slack", t)
            fallback = True
        form = rep.tightest_form if form is None else max(form, rep.tightest_form, key=_form_rank)

    fns = _observables(p.dim, cfg.master_seed, cc.n_random_observables)
    for t in cc.gradient_times:
        rep = _stage(Stage.GRADIENT, verify_gradient_bound, p, t, fns, default_z_grid(p.dim, 1.0, 3), cfg)
        if not rep.passed:
            raise CertificateError(f"gradient bound fails at t={t:g}", stage=Stage.GRADIENT, constant="C_M")

    cap = delta_cap(cm, lp)
    delta = min(cc.delta, cap)
    mp = _stage(Stage.SMALL, MetricParams, lp=lp, p=p, r=cc.r, delta=delta, beta_w=cc.beta_w)
    T = small_region_threshold(lp, cc.r) if cc.t_cert is None else cc.t_cert
    small = _stage(Stage.SMALL, small_region_factor, cm, mp, T)

    C_grow = _stage(Stage.FAR, drift_ratio, p, lp, T, z_grid, cfg)
    far = _stage(Stage.FAR, far_region_factor, lp, mp, T, cc.alpha_target, C_grow)

    R = mid_radius(lp, mp.r, far.C1, mp.delta)
    R_prime = tail_radius(lp, R, far.C1)
    raw_R = mid_radius(lp, mp.r, far.C1, mp.delta, floor=0.0)
    degenerate = raw_R < MID_RADIUS_FLOOR
    if degenerate:
        logger.warning("middle-region radius %.3g is below %g; using the floor", raw_R, MID_RADIUS_FLOOR)
    anchors = coupling_anchors(p.dim, R_prime)
    pair_cfg = cfg.replace(n_paths=cc.coupling_pairs)
    coupling = []
    for i, z1 in enumerate(anchors):
        for j, z2 in enumerate(anchors):
            est = _stage(Stage.COUPLING, coupling_probability, p, z1, z2, T, mp.delta, pair_cfg, mp,
                         R=R_prime * (1 + 1e-9), R_prime=R_prime * (1 + 1e-9), pairing=cc.pairing,
                         stream=1000 + 2 * (3 * i + j))
            coupling.append(est)
    a = min(c.lower_bound for c in coupling)
    if a <= 0:
        raise InconclusiveError("coupling inconclusive: no successes; increase coupling pairs",
                                stage=Stage.COUPLING, constant="a_coupling")

    cs = c_star(lp, C_grow, T, R_prime)
    mp = mp.replace(beta_w=min(cc.beta_w, a / (8.0 * cs)))
    mid = _stage(Stage.MID, mid_region_factor, lp, mp, far, coupling, C_grow, T)

    log_gamma = {
        Stage.FAR: far_log_gamma(far, mp.beta_w),
        Stage.SMALL: math.log(small.factor),
        Stage.MID: mid.log_factor,
    }
    worst = max(log_gamma.values())
    if worst >= 0:
        raise CertificateError("a regional factor is not below 1", stage=max(log_gamma, key=log_gamma.get),
                               constant="gamma")
    lam = -worst / T
    C_final = C_grow * (1.0 / mp.delta + mp.beta_w) / (mp.beta_w * math.exp(worst))
    cert = HarrisCertificate(
        lp=lp, C_M=cm, mp=mp, C1_prop=far.C1, K=far.K, R_region=R_prime, a_coupling=a,
        gamma_far=math.exp(log_gamma[Stage.FAR]), gamma_small=small.factor,
        gamma_mid=mid.factor, T_cert=T, C_final=C_final, lambda_final=lam,
        log_gamma=log_gamma, C_grow=C_grow, C_star=cs, delta_cap=cap, R_far=far.R,
        drift_form=form, drift_fallback=fallback, mid_degenerate=degenerate,
        coupling=coupling, potential=p.name,
    )
    logger.info("certificate for %s: lambda=%.6g C=%.6g T=%.4g", p.name, lam, C_final, T)
    return cert


def _form_rank(form: Optional[str]) -> int:
    return DriftForm.ALL.index(form) if form in DriftForm.ALL else len(DriftForm.ALL)


@dataclass
class DecayCurve:
    t: np.ndarray
    w1: np.ndarray
    floor: np.ndarray
    w1_rho: Optional[np.ndarray] = None
    lambda_hat: float = math.nan
    ci: float = math.nan
    lambda_hat_rho: float = math.nan
    ci_rho: float = math.nan
    window: Tuple[int, ...] = ()

    @property
    def inconclusive(self) -> bool:
        return len(self.window) < 3 or not math.isfinite(self.lambda_hat)


def _fit_rate(t: np.ndarray, w: np.ndarray, floor: np.ndarray):
    window = tuple(int(i) for i in np.nonzero(w > FIT_FLOOR_MULTIPLE * floor)[0])
    if len(window) < 3:
        return math.nan, math.nan, window
    idx = list(window)
    fit = linregress(t[idx], np.log(w[idx]))
    return float(-fit.slope), float(1.96 * fit.stderr), window


def measure_decay(p: PotentialSpec, mu0_a: InitialLaw, mu0_b: InitialLaw, t_grid: Sequence[float],
                  cfg: SimConfig, mp: Optional[MetricParams] = None, rho_n: int = 256,
                  stream: int = 2000) -> DecayCurve:
    """Empirical W1 decay between two laws, with a same-law noise floor and a log-linear rate fit."""
    t = np.asarray(t_grid, dtype=float)
    if np.any(np.diff(t) < 0):
        raise InvalidArgumentError("t_grid must be sorted")
    n = min(cfg.n_paths, MAX_MATCHING_SIZE)
    sim = cfg.replace(n_paths=n, t_final=max(cfg.t_final, float(t[-1])))
    init = [law.sample(n, block_rng(cfg.master_seed, stream + i, 0))
            for i, law in enumerate((mu0_a, mu0_b, mu0_a))]
    ens = [simulate_ensemble(Z0, p, sim, t, stream=stream + 10 + i, record_jacobian=False)
           for i, Z0 in enumerate(init)]
    A, B, A2 = (e.states for e in ens)
    w1 = np.array([wasserstein1(A[:, k], B[:, k], workers=cfg.workers) for k in range(len(t))])
    floor = np.array([wasserstein1(A[:, k], A2[:, k], workers=cfg.workers) for k in range(len(t))])
    curve = DecayCurve(t, w1, floor)
    curve.lambda_hat, curve.ci, curve.window = _fit_rate(t, w1, floor)
    if mp is not None:
        m = min(rho_n, n)
        rho = make_ground_metric(GroundMetric.RHO, mp)
        curve.w1_rho = np.array([wasserstein1(A[:m, k], B[:m, k], rho, cfg.workers) for k in range(len(t))])
        floor_rho = np.array([wasserstein1(A[:m, k], A2[:m, k], rho, cfg.workers) for k in range(len(t))])
        curve.lambda_hat_rho, curve.ci_rho, _ = _fit_rate(t, curve.w1_rho, floor_rho)
    if curve.inconclusive:
        logger.warning("decay curve stays within %g x the noise floor; rate inconclusive", FIT_FLOOR_MULTIPLE)
    else:
        logger.info("decay rate %.4f +- %.4f over %d points", curve.lambda_hat, curve.ci, len(curve.window))
    return curve
