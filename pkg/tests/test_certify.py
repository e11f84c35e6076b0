import math

import numpy as np
import pytest
from scipy.integrate import quad

import certify
from certify import (
    CertifyConfig, InitialLaw, Stage, assemble, c_star, coupling_anchors, delta_cap, far_log_gamma,
    far_region_factor, measure_decay, mid_radius, mid_region_factor, small_region_factor,
    small_region_threshold, tail_radius,
)
from dynamics import SimConfig
from gamma2 import c_m
from hypocert_base import CertificateError, InconclusiveError, InvalidArgumentError, PreconditionError
from lyapunov import DriftForm, DriftReport, DriftRow, derive_params
from malliavin import ProbEstimate
from metric import MetricParams
from potentials import PotentialSpec


@pytest.fixture
def mp(quadratic, quadratic_lp):
    return MetricParams(lp=quadratic_lp, p=quadratic, r=0.5, delta=0.004, beta_w=0.5)


def _estimate(lower: float) -> ProbEstimate:
    return ProbEstimate(np.zeros(2), np.zeros(2), 1.0, 0.1, 1000, 10, 0.01, lower, 0.02,
                        10, 0.01, lower, 0.02)


def _drift_report(t, passed, within_growth=True, saturated=False):
    row = DriftRow(np.zeros(1), np.zeros(1), 1.0, 1.0, 1.0, 1.0, passed, saturated, within_growth)
    forms = {DriftForm.HEADER: passed, DriftForm.SLACK: passed, DriftForm.SLACK_GROWTH: within_growth}
    return DriftReport(t=t, a=0.0, rows=[row], form_passed=forms)


def test_initial_law_parsing(rng):
    point = InitialLaw.parse("point:3,0", 1)
    assert np.array_equal(point.mean, [3.0, 0.0])
    assert np.array_equal(point.sample(4, rng), np.tile([3.0, 0.0], (4, 1)))
    gauss = InitialLaw.parse("gaussian:0,0,1,1;0.5", 2)
    assert gauss.std == 0.5
    again = InitialLaw.parse(gauss.describe(), 2)
    assert np.array_equal(again.mean, gauss.mean) and again.std == gauss.std
    assert gauss.sample(1000, rng).std(axis=0) == pytest.approx([0.5] * 4, rel=0.15)


@pytest.mark.parametrize("text", ["point:1", "uniform:0,0", "point:a,b", "gaussian:0,0;-1"])
def test_initial_law_rejects_bad_input(text):
    with pytest.raises(InvalidArgumentError):
        InitialLaw.parse(text, 1)


def test_small_region_threshold_for_quadratic(quadratic_lp):
    expected = 4.0 * math.log((16.0 / 3.0) / 0.5) / (1.0 / 3.0)
    assert small_region_threshold(quadratic_lp, 0.5) == pytest.approx(expected, rel=1e-9)


def test_small_region_needs_enough_time(quadratic_lp, mp):
    with pytest.raises(PreconditionError) as info:
        small_region_factor(c_m(1.0), mp, 1.0)
    assert info.value.minimal_t == pytest.approx(small_region_threshold(quadratic_lp, 0.5))
    report = small_region_factor(c_m(1.0), mp, info.value.minimal_t)
    assert report.factor == 0.75


def test_delta_cap(quadratic_lp):
    cap = delta_cap(c_m(1.0), quadratic_lp)
    assert 0 < cap < 0.25
    assert cap == pytest.approx(1.0 / (2.0 * (math.sqrt(23.0) * 2.0 * quadratic_lp.c_kappa + 2.0)))


def test_far_region_radius_gives_contraction(quadratic_lp, mp):
    t = small_region_threshold(quadratic_lp, 0.5)
    far = far_region_factor(quadratic_lp, mp, t, alpha_target=0.5, C=3.0)
    lp = quadratic_lp
    assert (1 - lp.xi(t)) * lp.a * lp.q_lower * far.R ** 2 == pytest.approx(math.log(3.0 / 0.5), rel=1e-6)
    assert far.K == pytest.approx(4 * far.C1)
    assert far_log_gamma(far, 0.5) < 0
    assert far_log_gamma(far, 1e-40) < 0


def test_far_region_validation(quadratic_lp, mp):
    with pytest.raises(InvalidArgumentError):
        far_region_factor(quadratic_lp, mp, 10.0, alpha_target=0.3)
    with pytest.raises(CertificateError) as info:
        far_region_factor(quadratic_lp, mp, 1e-6, alpha_target=0.5, C=10.0)
    assert info.value.stage == Stage.FAR


def test_tail_radius_accumulates_the_required_mass(quadratic_lp):
    R = 10.0
    Rp = tail_radius(quadratic_lp, R, 50.0)
    assert Rp > R
    mass = quad(lambda s: float(quadratic_lp.L_lower(s)), R, Rp)[0]
    assert mass == pytest.approx(8 * 50.0, rel=1e-6)


def test_mid_radius_needs_r_below_one(quadratic_lp):
    with pytest.raises(CertificateError) as info:
        mid_radius(quadratic_lp, 1.0, 10.0, 0.1)
    assert info.value.stage == Stage.MID
    assert mid_radius(quadratic_lp, 0.5, 10.0, 0.1) > 0


def test_mid_region_factor(quadratic_lp, mp):
    t = small_region_threshold(quadratic_lp, 0.5)
    far = far_region_factor(quadratic_lp, mp, t)
    with pytest.raises(InconclusiveError) as info:
        mid_region_factor(quadratic_lp, mp, far, [_estimate(0.0)], 1.0, t)
    assert info.value.stage == Stage.MID
    with pytest.raises(PreconditionError):
        mid_region_factor(quadratic_lp, mp, far, [_estimate(0.2)], 1.0, t)
    R = mid_radius(quadratic_lp, mp.r, far.C1, mp.delta)
    cs = c_star(quadratic_lp, 1.0, t, tail_radius(quadratic_lp, R, far.C1))
    small_beta = mp.replace(beta_w=0.2 / (8 * cs))
    mid = mid_region_factor(quadratic_lp, small_beta, far, [_estimate(0.3), _estimate(0.2)], 1.0, t)
    assert mid.factor == pytest.approx(0.95)
    assert mid.log_factor == pytest.approx(math.log(0.95))


def test_coupling_anchors():
    anchors = coupling_anchors(2, 5.0)
    norms = [np.linalg.norm(z.as_vector()) for z in anchors]
    assert norms == pytest.approx([5.0, 0.0, 5.0])


def test_hypothesis_failures_name_the_stage(quadratic, bump, small_sim):
    tight = PotentialSpec(dim=1, eval=quadratic.eval, grad=quadratic.grad, hess=quadratic.hess,
                          hess_bound=0.5, c1=1.0, c2=0.5, c3=0.0, name="tight")
    with pytest.raises(CertificateError) as info:
        assemble(tight, small_sim)
    assert (info.value.stage, info.value.constant) == (Stage.HYPOTHESES, "hess_bound")
    with pytest.raises(CertificateError) as info:
        assemble(bump.with_constants(c3=0.0), small_sim)
    assert (info.value.stage, info.value.constant) == (Stage.HYPOTHESES, "c3")
    assert str(info.value).startswith("[hypotheses]")


def test_stage_wrapper_keeps_the_stage_name():
    def boom():
        raise InvalidArgumentError("bad t")

    with pytest.raises(CertificateError) as info:
        certify._stage(Stage.GRADIENT, boom)
    assert info.value.stage == Stage.GRADIENT
    assert isinstance(info.value.__cause__, InvalidArgumentError)


def test_saturated_drift_is_inconclusive(quadratic, small_sim, monkeypatch):
    monkeypatch.setattr(certify, "verify_drift", lambda p, lp, t, grid, cfg: _drift_report(t, False, saturated=True))
    with pytest.raises(InconclusiveError) as info:
        assemble(quadratic, small_sim)
    assert info.value.stage == Stage.DRIFT


def test_growth_slack_fallback_can_be_disabled(quadratic, small_sim, monkeypatch):
    monkeypatch.setattr(certify, "verify_drift", lambda p, lp, t, grid, cfg: _drift_report(t, False))
    with pytest.raises(CertificateError) as info:
        assemble(quadratic, small_sim, CertifyConfig(drift_fallback=False))
    assert not isinstance(info.value, InconclusiveError)
    assert (info.value.stage, info.value.constant) == (Stage.DRIFT, "C(a)")
    # With the fallback the drift stage passes and the run stops at the small region.
    with pytest.raises(CertificateError) as info:
        assemble(quadratic, small_sim, CertifyConfig(gradient_times=(), t_cert=1.0))
    assert info.value.stage == Stage.SMALL


def test_certification_time_below_threshold_fails_the_small_stage(quadratic, small_sim):
    cc = CertifyConfig(drift_times=(), gradient_times=(), t_cert=5.0)
    with pytest.raises(CertificateError) as info:
        assemble(quadratic, small_sim, cc)
    assert info.value.stage == Stage.SMALL
    assert isinstance(info.value.__cause__, PreconditionError)
    assert info.value.__cause__.minimal_t == pytest.approx(small_region_threshold(derive_params(quadratic), 0.5))


def test_mid_radius_floor(quadratic_lp):
    assert mid_radius(quadratic_lp, 0.5, 1e-9, 0.004, floor=0.0) == 0.0
    assert mid_radius(quadratic_lp, 0.5, 1e-9, 0.004) == certify.MID_RADIUS_FLOOR
    assert mid_radius(quadratic_lp, 0.5, 10.0, 0.1) > certify.MID_RADIUS_FLOOR


def test_decay_starts_at_the_initial_distance(quadratic):
    cfg = SimConfig(dt=0.02, t_final=2.0, n_paths=256, master_seed=31, workers=1)
    curve = measure_decay(quadratic, InitialLaw.parse("point:3,0", 1), InitialLaw.parse("point:-3,0", 1),
                          [0.0, 1.0, 2.0], cfg)
    assert curve.w1[0] == pytest.approx(6.0)
    assert curve.floor[0] == 0.0
    assert curve.w1[-1] < curve.w1[0]
    assert curve.w1_rho is None


def test_decay_rejects_unsorted_grid(quadratic, small_sim):
    law = InitialLaw.parse("point:0,0", 1)
    with pytest.raises(InvalidArgumentError):
        measure_decay(quadratic, law, law, [1.0, 0.5], small_sim)


def _spectral_rate(quadratic, n_paths):
    cfg = SimConfig(dt=0.01, t_final=8.0, n_paths=n_paths, master_seed=20240601)
    curve = measure_decay(quadratic, InitialLaw.parse("point:3,0", 1), InitialLaw.parse("point:-3,0", 1),
                          np.linspace(0.0, 8.0, 17), cfg)
    return curve.lambda_hat


def test_spectral_rate_is_recovered_reduced(quadratic):
    assert 0.35 <= _spectral_rate(quadratic, 1024) <= 0.65


@pytest.mark.slow
def test_spectral_rate_is_recovered(quadratic):
    assert 0.4 <= _spectral_rate(quadratic, 4096) <= 0.6


@pytest.mark.slow
@pytest.mark.parametrize("which", ["quadratic", "bump"])
def test_certificate_has_positive_rate(which, quadratic, bump):
    p = quadratic if which == "quadratic" else bump
    cfg = SimConfig(dt=0.01, t_final=10.0, n_paths=20000, master_seed=20240601)
    cert = assemble(p, cfg, CertifyConfig())
    assert cert.lambda_final > 0
    assert cert.C_final > 0
    assert max(cert.log_gamma.values()) < 0
    assert cert.lp == derive_params(p)
    keys = [key for key, _, _ in cert.items()]
    assert "lambda_final" in keys and "gamma_mid" in keys
    if which == "quadratic":
        curve = measure_decay(p, InitialLaw.parse("point:3,0", 1), InitialLaw.parse("point:-3,0", 1),
                              np.linspace(0.0, 8.0, 17), cfg.replace(n_paths=4096))
        assert cert.lambda_final <= curve.lambda_hat + curve.ci
    assert cert.drift_fallback == (which == "bump")


def test_certificate_reduced_quadratic(quadratic):
    cfg = SimConfig(dt=0.02, t_final=10.0, n_paths=1000, master_seed=20240601)
    cert = assemble(quadratic, cfg, CertifyConfig(coupling_pairs=4000))
    assert cert.lambda_final > 0
    assert cert.C_final > 0
    assert max(cert.log_gamma.values()) < 0
    assert not cert.drift_fallback
    assert cert.mid_degenerate
    assert cert.R_region >= certify.MID_RADIUS_FLOOR
    assert all(est.lower_bound > 0 for est in cert.coupling)
    items = dict((key, value) for key, value, _ in cert.items())
    assert items["mid_degenerate"] is True


def test_certificate_reduced_bump_uses_the_drift_fallback(bump):
    cfg = SimConfig(dt=0.02, t_final=10.0, n_paths=1000, master_seed=20240601)
    try:
        cert = assemble(bump, cfg, CertifyConfig(coupling_pairs=4000))
    except InconclusiveError as err:
        # Too few pairs to see a coupling; every earlier stage has passed.
        assert err.stage == Stage.COUPLING
    else:
        assert cert.drift_fallback
        assert cert.lambda_final > 0
