"""
Carré du Champ Forms
Evaluates the twisted carré du champ

    Gamma(f, g) = 2 grad_x f.grad_x g - grad_x f.grad_v g - grad_v f.grad_x g + 2 grad_v f.grad_v g

and its iterate Gamma_2(f) = L Gamma(f, f) - 2 Gamma(f, L f) exactly on quadratic
observables f(z) = z.Az + b.z + c, for the generator

    L = (sigma^2/2) Lap_v + v.grad_x - (v + grad U).grad_v.

Writing H = 2A, K = [[2I, -I], [-I, 2I]] and D(x) for the drift Jacobian,
the drift terms of Gamma_2 cancel and what remains is

    Gamma_2(f)(z) = sigma^2 tr_vv(H K H) - 2 grad f^T K D(x)^T grad f.

The semigroup gradient bound |grad P_t f|^2 <= C_M P_t(f^2) + 3 e^{-t/3} P_t |grad f|^2
is checked by Monte Carlo with grad P_t f(z) = E[J_{0,t}^T grad f(Z_t)].
"""

import logging
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np

from dynamics import SQRT2, PhaseState, SimConfig, drift_matrix, simulate_ensemble
from hypocert_base import InvalidArgumentError
from potentials import PotentialSpec

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QuadraticObservable:
    """f(z) = z.Az + b.z + c on phase space of dimension 2d."""
    A: np.ndarray
    b: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        b = np.atleast_1d(np.asarray(self.b, dtype=float))
        if A.shape[0] != A.shape[1] or A.shape[0] != b.shape[0] or b.shape[0] % 2:
            raise InvalidArgumentError(f"A must be 2d x 2d and b of length 2d, got {A.shape}, {b.shape}")
        if not np.allclose(A, A.T, atol=1e-12, rtol=0.0):
            raise InvalidArgumentError("A must be symmetric")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)
        object.__setattr__(self, "c", float(self.c))

    @property
    def dim(self) -> int:
        return self.b.shape[0] // 2

    @property
    def hessian(self) -> np.ndarray:
        return 2.0 * self.A

    def __call__(self, Z: np.ndarray) -> np.ndarray:
        Z = np.asarray(Z, dtype=float)
        return np.einsum("...i,ij,...j->...", Z, self.A, Z) + Z @ self.b + self.c

    def grad(self, Z: np.ndarray) -> np.ndarray:
        return np.asarray(Z, dtype=float) @ self.hessian + self.b

    @classmethod
    def linear(cls, b: Sequence[float]) -> "QuadraticObservable":
        b = np.asarray(b, dtype=float)
        return cls(np.zeros((b.size, b.size)), b, 0.0)

    @classmethod
    def constant(cls, dim: int, c: float) -> "QuadraticObservable":
        return cls(np.zeros((2 * dim, 2 * dim)), np.zeros(2 * dim), c)

    @classmethod
    def random(cls, rng: np.random.Generator, dim: int, scale: float = 1.0) -> "QuadraticObservable":
        S = rng.normal(scale=scale, size=(2 * dim, 2 * dim))
        return cls(0.5 * (S + S.T), rng.normal(scale=scale, size=2 * dim), float(rng.normal()))


def twist_matrix(dim: int) -> np.ndarray:
    """K = [[2I, -I], [-I, 2I]], the matrix of Gamma on gradients."""
    eye = np.eye(dim)
    return np.block([[2 * eye, -eye], [-eye, 2 * eye]])


def gamma_grad(gf: np.ndarray, gg: np.ndarray) -> np.ndarray:
    """Gamma evaluated on gradient vectors of shape (..., 2d)."""
    K = twist_matrix(gf.shape[-1] // 2)
    return np.einsum("...i,ij,...j->...", gf, K, gg)


def gamma(f: QuadraticObservable, g: QuadraticObservable, z: PhaseState) -> float:
    """Symmetric twisted carré du champ Gamma(f, g)(z)."""
    zv = z.as_vector()
    return float(gamma_grad(f.grad(zv), g.grad(zv)))


def gamma2(f: QuadraticObservable, p: PotentialSpec, z: PhaseState, sigma: float = SQRT2) -> float:
    """Gamma_2(f)(z) = L Gamma(f, f) - 2 Gamma(f, L f), in closed form."""
    d = p.dim
    if f.dim != d:
        raise InvalidArgumentError(f"observable dimension {f.dim} does not match potential dimension {d}")
    K = twist_matrix(d)
    H = f.hessian
    diffusion = sigma ** 2 * float(np.trace((H @ K @ H)[d:, d:]))
    gf = f.grad(z.as_vector())
    D = drift_matrix(p, z.x[None, :])[0]
    return diffusion - 2.0 * float(gf @ K @ D.T @ gf)


def c_m(M: float) -> float:
    """C_M = 15 + 6M^2 + 2M."""
    return 15.0 + 6.0 * M * M + 2.0 * M


def gamma2_lower_bound(f: QuadraticObservable, z: PhaseState, M: float) -> float:
    """|grad_x f|^2 - (14 + 6M^2 + 2M) |grad_v f|^2."""
    gf = f.grad(z.as_vector())
    d = f.dim
    return float(gf[:d] @ gf[:d] - (c_m(M) - 1.0) * (gf[d:] @ gf[d:]))


@dataclass(frozen=True)
class GradientRow:
    z: np.ndarray
    t: float
    fn_index: int
    lhs: float
    rhs: float
    se: float

    @property
    def margin(self) -> float:
        return self.rhs + 3.0 * self.se - self.lhs

    @property
    def passed(self) -> bool:
        return self.margin >= 0


@dataclass
class GradientReport:
    t: float
    C_M: float
    rows: List[GradientRow] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows)

    @property
    def worst_margin(self) -> float:
        return min((r.margin for r in self.rows), default=math.inf)


def gradient_terms(states: np.ndarray, jacobians: np.ndarray, f: QuadraticObservable, M: float,
                   t: float):
    """(lhs, rhs, se) of the gradient bound on one ensemble slice."""
    gf = f.grad(states)
    G = np.einsum("nji,nj->ni", jacobians, gf)
    n = G.shape[0]
    m = G.mean(axis=0)
    lhs = float(m @ m)
    if n > 1:
        cov = np.atleast_2d(np.cov(G, rowvar=False))
        se = math.sqrt(max(4.0 * float(m @ cov @ m) / n, 0.0))
    else:
        se = 0.0
    rhs = c_m(M) * float(np.mean(f(states) ** 2)) + 3.0 * math.exp(-t / 3.0) * float(np.mean(np.sum(gf * gf, axis=-1)))
    return lhs, rhs, se


def verify_gradient_bound(p: PotentialSpec, t: float, test_fns: Sequence[QuadraticObservable],
                          z_grid: Sequence[PhaseState], cfg: SimConfig,
                          stream: int = 300) -> GradientReport:
    """Monte-Carlo check of the semigroup gradient bound.

    All test functions at one grid point share the same paths.
    """
    if t <= 0:
        raise InvalidArgumentError("t must be positive")
    report = GradientReport(t=t, C_M=c_m(p.M))
    sim = cfg.replace(t_final=max(cfg.t_final, t), dt=min(cfg.dt, t))
    for i, z in enumerate(z_grid):
        ens = simulate_ensemble(z, p, sim, [t], stream=stream + i)
        for j, f in enumerate(test_fns):
            lhs, rhs, se = gradient_terms(ens.states[:, 0], ens.jacobians[:, 0], f, p.M, t)
            row = GradientRow(z.as_vector(), t, j, lhs, rhs, se)
            report.rows.append(row)
            if not row.passed:
                logger.warning("gradient bound fails at z=%s f#%d t=%.3g: lhs=%.5g rhs=%.5g se=%.3g",
                               z.as_vector(), j, t, lhs, rhs, se)
    logger.info("gradient bound t=%.3g: passed=%s worst margin=%.4g", t, report.passed, report.worst_margin)
    return report
