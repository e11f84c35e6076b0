"""
Confining Potentials Module
Builds potentials U for the kinetic Langevin dynamics and checks the two
hypotheses the convergence argument rests on:

    Hess U(x) <= M                      (bounded Hessian)
    x . grad U(x) >= c1 U(x) + c2 |x|^2 - c3   (drift condition)

Two potentials ship: the exactly solvable quadratic |x|^2/2, and a 1D double
well made of a quadratic plus a Gaussian bump, which keeps a bounded Hessian
(the quartic double well does not).

All callables are vectorised: `eval` maps (..., d) -> (...), `grad` maps
(..., d) -> (..., d) and `hess` maps (..., d) -> (..., d, d).
"""

import itertools
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Tuple

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from hypocert_base import ConstructionError, InvalidArgumentError, PotentialKind

logger = logging.getLogger(__name__)

ArrayFn = Callable[[np.ndarray], np.ndarray]

# Scan window and grid used to calibrate non-quadratic potentials.
SCAN_HALF_WIDTH = 50.0
SCAN_POINTS = 200_001
C1_CANDIDATES = (1.0, 0.75, 0.5, 0.25)
C2_CANDIDATES = tuple(np.linspace(0.5, 0.05, 10))


@dataclass(frozen=True)
class PotentialSpec:
    """A confining potential together with its hypothesis constants."""
    dim: int
    eval: ArrayFn
    grad: ArrayFn
    hess_bound: float
    c1: float
    c2: float
    c3: float
    name: str
    hess: Optional[ArrayFn] = None
    minimizer: Optional[np.ndarray] = None
    params: Dict[str, float] = field(default_factory=dict)
    c1_clamped: bool = False

    def __post_init__(self):
        if self.dim < 1:
            raise InvalidArgumentError(f"dim must be >= 1, got {self.dim}")
        if self.hess_bound < 0:
            raise InvalidArgumentError("hess_bound M must be nonnegative")
        if self.c1 <= 0 or self.c2 <= 0:
            raise InvalidArgumentError("c1 and c2 must be positive")
        if self.c3 < 0:
            raise InvalidArgumentError(f"c3 must be positive, got {self.c3}")
        if self.c1 > 1.0:
            logger.warning("%s: c1=%.4g clamped to 1", self.name, self.c1)
            object.__setattr__(self, "c1", 1.0)
            object.__setattr__(self, "c1_clamped", True)

    @property
    def M(self) -> float:
        return self.hess_bound

    @property
    def is_quadratic(self) -> bool:
        return self.name == PotentialKind.QUADRATIC

    def with_constants(self, c1: Optional[float] = None, c2: Optional[float] = None,
                       c3: Optional[float] = None) -> "PotentialSpec":
        """Return a copy with user-supplied drift constants (validated again)."""
        return PotentialSpec(
            dim=self.dim, eval=self.eval, grad=self.grad, hess_bound=self.hess_bound,
            c1=self.c1 if c1 is None else c1,
            c2=self.c2 if c2 is None else c2,
            c3=self.c3 if c3 is None else c3,
            name=self.name, hess=self.hess, minimizer=self.minimizer,
            params=dict(self.params),
        )


@dataclass(frozen=True)
class HypothesisReport:
    """Worst-case margins of both hypotheses over a grid in B(0, radius)."""
    potential: str
    radius: float
    n_points: int
    drift_margin: float
    drift_argmin: np.ndarray
    hessian_margin: float
    hessian_argmin: np.ndarray

    @property
    def drift_ok(self) -> bool:
        return self.drift_margin >= -1e-9

    @property
    def hessian_ok(self) -> bool:
        return self.hessian_margin >= -1e-9

    @property
    def passed(self) -> bool:
        return self.drift_ok and self.hessian_ok


def hessian(p: PotentialSpec, x: np.ndarray) -> np.ndarray:
    """Hessian of U at x (shape (..., d)); analytic if available.

    Otherwise central finite differences of `grad` with step
    h = 1e-5 * max(1, |x|), symmetrised.
    """
    x = np.asarray(x, dtype=float)
    if p.hess is not None:
        return p.hess(x)
    d = p.dim
    h = 1e-5 * np.maximum(1.0, np.linalg.norm(x, axis=-1))[..., None]
    cols = []
    for j in range(d):
        e = np.zeros(d)
        e[j] = 1.0
        cols.append((p.grad(x + h * e) - p.grad(x - h * e)) / (2.0 * h))
    H = np.stack(cols, axis=-1)
    return 0.5 * (H + np.swapaxes(H, -1, -2))


def make_quadratic(dim: int) -> PotentialSpec:
    """U(x) = |x|^2/2 with M = 1 and (c1, c2, c3) = (1, 1/2, 0)."""
    if dim < 1:
        raise InvalidArgumentError(f"dim must be >= 1, got {dim}")

    def u(x):
        return 0.5 * np.sum(np.asarray(x, dtype=float) ** 2, axis=-1)

    def grad(x):
        return np.array(x, dtype=float, copy=True)

    def hess(x):
        x = np.asarray(x, dtype=float)
        return np.broadcast_to(np.eye(dim), x.shape[:-1] + (dim, dim)).copy()

    return PotentialSpec(
        dim=dim, eval=u, grad=grad, hess=hess, hess_bound=1.0,
        c1=1.0, c2=0.5, c3=0.0, name=PotentialKind.QUADRATIC,
        minimizer=np.zeros(dim), params={"dim": float(dim)},
    )


def _bump_raw(amplitude: float, width: float):
    """Unshifted U, U', U'' of x^2/2 + A exp(-x^2/(2 w^2)) in 1D."""
    a_w2 = amplitude / width ** 2

    def u(x):
        return 0.5 * x ** 2 + amplitude * np.exp(-x ** 2 / (2.0 * width ** 2))

    def du(x):
        return x * (1.0 - a_w2 * np.exp(-x ** 2 / (2.0 * width ** 2)))

    def d2u(x):
        s = x ** 2 / (2.0 * width ** 2)
        return 1.0 + a_w2 * np.exp(-s) * (2.0 * s - 1.0)

    return u, du, d2u


def _bump_minimizer(amplitude: float, width: float, du) -> float:
    # Wells exist only when A/w^2 > 1; otherwise the origin is the minimum.
    if amplitude / width ** 2 <= 1.0:
        return 0.0
    return brentq(du, 1e-9 * width, SCAN_HALF_WIDTH)


def _refined_max(fn, xs: np.ndarray) -> Tuple[float, int]:
    """Grid maximum of fn, polished by a bounded search between the neighbours of the argmax."""
    values = fn(xs)
    idx = int(np.argmax(values))
    lo, hi = xs[max(idx - 1, 0)], xs[min(idx + 1, len(xs) - 1)]
    res = minimize_scalar(lambda s: -float(fn(np.array(s))), bounds=(lo, hi), method="bounded",
                          options={"xatol": 1e-12})
    return max(float(values[idx]), -float(res.fun)), idx


def _search_drift_constants(xs: np.ndarray, u, du, c3_max: float) -> Tuple[float, float, float]:
    """Largest c2 (then c1) for which some c3 in (0, c3_max] makes the drift hold.

    The analytic tail requires c1/2 + c2 <= 1, which every candidate meets.
    """
    worst = None
    for c2, c1 in itertools.product(C2_CANDIDATES, C1_CANDIDATES):
        def need_fn(x, c1=c1, c2=c2):
            return c1 * u(x) + c2 * x ** 2 - x * du(x)

        peak, idx = _refined_max(need_fn, xs)
        c3 = max(peak, 0.0) + 1e-9
        if c3 <= c3_max:
            return c1, float(c2), c3
        if worst is None or peak > worst[1]:
            worst = (float(xs[idx]), peak)
    raise ConstructionError(
        f"drift condition violated for every (c1, c2, c3) in the search range; "
        f"worst point x={worst[0]:.6g}", point=worst[0])


def make_bump_double_well(amplitude: float, width: float,
                          c3_max: Optional[float] = None) -> PotentialSpec:
    """U(x) = x^2/2 + A exp(-x^2/(2w^2)), shifted so min U = 0 (1D).

    M is the maximum of U'' over a dense scan of [-50, 50] joined with the
    tail value 1; (c1, c2, c3) come from a coarse search that maximises c2
    subject to the drift inequality on the same scan.
    """
    if amplitude < 0 or width <= 0:
        raise InvalidArgumentError("amplitude must be >= 0 and width > 0")
    u_raw, du, d2u = _bump_raw(amplitude, width)
    x_star = _bump_minimizer(amplitude, width, du)
    u_min = float(u_raw(x_star))

    xs = np.linspace(-SCAN_HALF_WIDTH, SCAN_HALF_WIDTH, SCAN_POINTS)
    M = max(_refined_max(d2u, xs)[0], 1.0)
    c3_cap = 10.0 * (1.0 + amplitude) if c3_max is None else c3_max
    c1, c2, c3 = _search_drift_constants(xs, lambda x: u_raw(x) - u_min, du, c3_cap)
    logger.info("bump double well A=%.4g w=%.4g: x*=%.6g M=%.6g c=(%.3g, %.3g, %.4g)",
                amplitude, width, x_star, M, c1, c2, c3)

    def u(x):
        x = np.asarray(x, dtype=float)
        return u_raw(x[..., 0]) - u_min

    def grad(x):
        x = np.asarray(x, dtype=float)
        return du(x[..., :1])

    def hess(x):
        x = np.asarray(x, dtype=float)
        return d2u(x[..., :1])[..., None]

    return PotentialSpec(
        dim=1, eval=u, grad=grad, hess=hess, hess_bound=M,
        c1=c1, c2=c2, c3=c3, name=PotentialKind.BUMP_DOUBLE_WELL,
        minimizer=np.array([x_star]),
        params={"amplitude": float(amplitude), "width": float(width)},
    )


def ball_grid(dim: int, radius: float, n_grid: int) -> np.ndarray:
    """Deterministic tensor grid of n_grid points per axis, clipped to B(0, radius)."""
    axis = np.linspace(-radius, radius, n_grid)
    pts = np.stack(np.meshgrid(*([axis] * dim), indexing="ij"), axis=-1).reshape(-1, dim)
    return pts[np.linalg.norm(pts, axis=1) <= radius * (1 + 1e-12)]


def check_hypotheses(p: PotentialSpec, radius: float, n_grid: int) -> HypothesisReport:
    """Worst-case margins of the drift and Hessian inequalities on B(0, radius).

    The Hessian margin is M - lambda_max(Hess U(x)), which is the worst case
    of M - h.Hess U(x).h over unit h.
    """
    if radius <= 0:
        raise InvalidArgumentError("radius must be positive")
    if n_grid < 2:
        raise InvalidArgumentError("n_grid must be >= 2")
    if p.c3 < 0:
        raise InvalidArgumentError("c3 must be positive")
    xs = ball_grid(p.dim, radius, n_grid)
    u = p.eval(xs)
    drift = np.sum(xs * p.grad(xs), axis=-1) - (p.c1 * u + p.c2 * np.sum(xs ** 2, axis=-1) - p.c3)
    top = np.linalg.eigvalsh(hessian(p, xs))[..., -1]
    hmargin = p.hess_bound - top
    i, j = int(np.argmin(drift)), int(np.argmin(hmargin))
    report = HypothesisReport(
        potential=p.name, radius=radius, n_points=len(xs),
        drift_margin=float(drift[i]), drift_argmin=xs[i].copy(),
        hessian_margin=float(hmargin[j]), hessian_argmin=xs[j].copy(),
    )
    if not report.passed:
        logger.warning("%s fails hypotheses: drift=%.3g at %s, hessian=%.3g at %s",
                       p.name, report.drift_margin, xs[i], report.hessian_margin, xs[j])
    return report
