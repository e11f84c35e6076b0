import numpy as np
import pytest

from dynamics import SQRT2, PhaseState, SimConfig
from gamma2 import (
    GradientRow, QuadraticObservable, c_m, gamma, gamma2, gamma2_lower_bound, gamma_grad,
    gradient_terms, verify_gradient_bound,
)
from hypocert_base import InvalidArgumentError
from lyapunov import default_z_grid
from potentials import make_quadratic


def _generator(fn, z, p, sigma, h=1e-3):
    """Finite-difference (sigma^2/2) Lap_v + v.grad_x - (v + grad U).grad_v at one point."""
    d = p.dim
    x, v = z[:d], z[d:]
    out = 0.0
    for i in range(2 * d):
        e = np.zeros(2 * d)
        e[i] = h
        first = (fn(z + e) - fn(z - e)) / (2 * h)
        if i < d:
            out += v[i] * first
        else:
            second = (fn(z + e) - 2 * fn(z) + fn(z - e)) / h ** 2
            out += 0.5 * sigma ** 2 * second - (v[i - d] + p.grad(x[None, :])[0, i - d]) * first
    return out


def _L_exact(f, p, sigma):
    d = p.dim

    def Lf(z):
        g = f.grad(z)
        x, v = z[:d], z[d:]
        lap = float(np.trace(f.hessian[d:, d:]))
        return 0.5 * sigma ** 2 * lap + v @ g[:d] - (v + p.grad(x[None, :])[0]) @ g[d:]

    return Lf


def test_gamma_of_position_is_two():
    x = QuadraticObservable.linear([1.0, 0.0])
    assert gamma(x, x, PhaseState.origin(1)) == pytest.approx(2.0)


def test_gamma_sandwich(rng):
    for _ in range(1000):
        g = rng.normal(size=4)
        val = float(gamma_grad(g, g))
        assert g @ g - 1e-10 <= val <= 3 * (g @ g) + 1e-10


def test_gamma2_of_linear_observables(quadratic):
    z = PhaseState([0.3], [-0.7])
    assert gamma2(QuadraticObservable.linear([1.0, 0.0]), quadratic, z) == pytest.approx(2.0)
    assert gamma2(QuadraticObservable.linear([0.0, 1.0]), quadratic, z) == pytest.approx(2.0)


@pytest.mark.parametrize("dim", [1, 2])
def test_gamma2_matches_generator_definition(dim, rng):
    p = make_quadratic(dim)
    for _ in range(20):
        f = QuadraticObservable.random(rng, dim)
        z = rng.normal(size=2 * dim)
        Lf = _L_exact(f, p, SQRT2)

        def gamma_ff(w):
            gf = f.grad(w)
            return float(gamma_grad(gf, gf))

        def grad_Lf(w, h=1e-3):
            out = np.zeros(2 * dim)
            for i in range(2 * dim):
                e = np.zeros(2 * dim)
                e[i] = h
                out[i] = (Lf(w + e) - Lf(w - e)) / (2 * h)
            return out

        expected = _generator(gamma_ff, z, p, SQRT2) - 2.0 * float(gamma_grad(f.grad(z), grad_Lf(z)))
        actual = gamma2(f, p, PhaseState.from_vector(z), SQRT2)
        assert actual == pytest.approx(expected, rel=1e-5, abs=1e-5)


@pytest.mark.parametrize("which", ["quadratic", "bump"])
def test_gamma2_pointwise_lower_bound(which, quadratic, bump, rng):
    p = quadratic if which == "quadratic" else bump
    for _ in range(1000):
        f = QuadraticObservable.random(rng, 1)
        z = PhaseState.from_vector(rng.normal(scale=3.0, size=2))
        assert gamma2(f, p, z) >= gamma2_lower_bound(f, z, p.M) - 1e-10


def test_c_m():
    assert c_m(1.0) == 23.0
    assert c_m(0.0) == 15.0


def test_observable_validation():
    with pytest.raises(InvalidArgumentError):
        QuadraticObservable(np.array([[0.0, 1.0], [0.0, 0.0]]), np.zeros(2))
    with pytest.raises(InvalidArgumentError):
        QuadraticObservable(np.eye(3), np.zeros(3))


def test_observable_dimension_must_match(quadratic_2d):
    with pytest.raises(InvalidArgumentError):
        gamma2(QuadraticObservable.linear([1.0, 0.0]), quadratic_2d, PhaseState.origin(2))


def test_constant_observable_has_zero_gradient_terms(quadratic):
    f = QuadraticObservable.constant(1, 2.0)
    states = np.zeros((5, 2))
    jac = np.broadcast_to(np.eye(2), (5, 2, 2))
    lhs, rhs, se = gradient_terms(states, jac, f, 1.0, 1.0)
    assert lhs == 0.0
    assert rhs == pytest.approx(23.0 * 4.0)
    assert se == 0.0


def test_gradient_row_margin():
    row = GradientRow(np.zeros(2), 1.0, 0, lhs=2.0, rhs=1.0, se=0.5)
    assert row.margin == pytest.approx(0.5)
    assert row.passed
    assert not GradientRow(np.zeros(2), 1.0, 0, lhs=3.0, rhs=1.0, se=0.5).passed


def test_gradient_bound_on_quadratic(quadratic, rng):
    cfg = SimConfig(dt=0.01, t_final=2.0, n_paths=2000, master_seed=11, workers=1)
    fns = [QuadraticObservable.linear([1.0, 0.0]), QuadraticObservable.linear([0.0, 1.0]),
           QuadraticObservable.random(rng, 1, 0.5)]
    for t in (0.5, 2.0):
        report = verify_gradient_bound(quadratic, t, fns, default_z_grid(1, 1.0, 3), cfg)
        assert report.passed, report.worst_margin
        assert len(report.rows) == 27


def test_gradient_bound_rejects_nonpositive_time(quadratic, small_sim):
    with pytest.raises(InvalidArgumentError):
        verify_gradient_bound(quadratic, 0.0, [], default_z_grid(1), small_sim)


def _check_gradient_suite(quadratic, rng, n_paths):
    cfg = SimConfig(dt=0.01, t_final=10.0, n_paths=n_paths, master_seed=20240601)
    fns = [QuadraticObservable.linear([1.0, 0.0]), QuadraticObservable.linear([0.0, 1.0])]
    fns += [QuadraticObservable.random(rng, 1, 0.5) for _ in range(2)]
    for t in (0.5, 1.0, 2.0, 10.0):
        assert verify_gradient_bound(quadratic, t, fns, default_z_grid(1, 1.0, 3), cfg).passed


def test_gradient_bound_suite_reduced(quadratic, rng):
    _check_gradient_suite(quadratic, rng, 1000)


@pytest.mark.slow
def test_gradient_bound_suite(quadratic, rng):
    _check_gradient_suite(quadratic, rng, 10000)
