import math

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import integrate

from eigen import analytic_slice_potentials
from errors import DomainError, FitError, IllPosedError
from fitting import (
    LevenbergMarquardt, ResonanceSample, TimeDelayCurve, assemble_potential, bw_time_delay,
    fit_jt_slice, fit_pjt_slice, fit_time_delay, slice_residual, synth_data, synth_time_delay,
)
from vibronic import JTParams, PJTParams

ROUND_TRIP = 1e-6
QX = np.linspace(-0.5, 0.5, 41)


def shifted(samples, c):
    return [ResonanceSample(s.qx, s.branch, s.eps_n + c, s.gamma_n, s.v_ion) for s in samples]


def test_assemble_potential():
    s = ResonanceSample(qx=0.1, branch=2, eps_n=0.3, gamma_n=0.02, v_ion=0.1)
    assert_allclose(assemble_potential(s), 0.4 - 0.01j, rtol=1e-15)
    assert s.Q.qy == 0.0
    with pytest.raises(DomainError):
        assemble_potential(ResonanceSample(qx=0.1, branch=2, eps_n=0.3, gamma_n=-0.01))


def test_bw_peak_and_area():
    assert_allclose(bw_time_delay(0.3, [(0.3, 0.01)], 0.5), 2 / 0.01 + 0.5, rtol=1e-14)
    area, _ = integrate.quad(lambda e: bw_time_delay(e, [(0.3, 0.01)], 0.0), -9.7, 10.3, points=[0.3], limit=200)
    assert_allclose(area, 2 * math.atan(2 * 10.0 / 0.01), rtol=1e-8)
    assert abs(area - math.pi) < 1e-3
    E = np.linspace(0.2, 0.4, 5)
    assert bw_time_delay(E, [(0.3, 0.01), (0.32, 0.02)], 0.0).shape == (5,)
    with pytest.raises(DomainError):
        bw_time_delay(0.3, [(0.3, 0.0)], 0.0)


def test_time_delay_curve_validation():
    with pytest.raises(DomainError):
        TimeDelayCurve([0.1, 0.1, 0.2], [1.0, 2.0, 3.0])
    with pytest.raises(DomainError):
        TimeDelayCurve([0.1, 0.2], [1.0, math.nan])


def test_bw_fit_single_resonance():
    curve = synth_time_delay(np.linspace(0.25, 0.35, 2001), [(0.3, 0.01)], 0.5)
    fit = fit_time_delay(curve, 1)
    assert_allclose(fit.resonances[0], (0.3, 0.01), atol=ROUND_TRIP)
    assert_allclose(fit.bg, 0.5, atol=ROUND_TRIP)
    assert fit.result.converged
    assert fit.result.diagnostics['flags'] == []


def test_bw_fit_overlapping_resonances():
    truth = [(0.300, 0.010), (0.305, 0.020)]
    curve = synth_time_delay(np.linspace(0.25, 0.35, 2001), truth, 0.2)
    fit = fit_time_delay(curve, 2, init=[0.299, 0.012, 0.307, 0.018, 0.1])
    found = sorted(fit.resonances)
    assert_allclose(found, truth, atol=ROUND_TRIP)
    assert_allclose(fit.bg, 0.2, atol=ROUND_TRIP)


def test_bw_fit_flat_curve():
    curve = TimeDelayCurve(np.linspace(0.25, 0.35, 101), np.full(101, 3.0))
    with pytest.raises(FitError):
        fit_time_delay(curve, 1)


def test_levenberg_marquardt_monotone():
    x = np.linspace(0, 1, 30)
    y = 2.0 * np.exp(-1.3 * x)
    residual = lambda p: p[0] * np.exp(p[1] * x) - y
    jacobian = lambda p: np.column_stack([np.exp(p[1] * x), p[0] * x * np.exp(p[1] * x)])
    lm = LevenbergMarquardt(residual, jacobian)
    p = lm.minimize(np.array([1.0, 0.0]))
    assert lm.converged
    assert_allclose(p, [2.0, -1.3], rtol=1e-8)
    assert np.all(np.diff(lm.history) <= 0)


def test_synth_data_is_deterministic(pjt2):
    a = synth_data(pjt2, QX, noise=1e-4, seed=7)
    b = synth_data(pjt2, QX, noise=1e-4, seed=7)
    c = synth_data(pjt2, QX, noise=1e-4, seed=8)
    assert a == b
    assert a != c
    clean = synth_data(pjt2, QX)
    assert len(clean) == 3 * len(QX)
    v1, v2, v3 = analytic_slice_potentials(pjt2, QX[0])
    assert_allclose(clean[1].gamma_n, -2 * v2.imag, rtol=1e-15)
    assert [s.branch for s in clean[:3]] == [1, 2, 3]


def test_jt_fit_exact(jt):
    result = fit_jt_slice(synth_data(jt, QX))
    assert_allclose(result.params.values(), jt.values(), atol=1e-12)
    assert result.residual < 1e-24
    assert result.diagnostics['rank'] == 4


def test_jt_fit_needs_both_branches(jt):
    data = [s for s in synth_data(jt, QX) if s.branch == 2]
    with pytest.raises(IllPosedError):
        fit_jt_slice(data)


def test_pjt_fit_round_trip(pjt2):
    data = synth_data(pjt2, QX)
    result = fit_pjt_slice(data, order=2)
    assert result.converged
    assert_allclose(result.params.values(), pjt2.values(), atol=ROUND_TRIP)
    assert result.residual < 1e-18
    assert 'width_sign_violations' in result.diagnostics
    assert result.covariance.shape == (12, 12)


def test_pjt_third_order_round_trip(pjt3):
    data = synth_data(pjt3, QX)
    result = fit_pjt_slice(data, order=3)
    assert_allclose(result.params.values(), pjt3.values(), atol=ROUND_TRIP)
    second = fit_pjt_slice(data, order=2)
    assert second.residual > 1e-12
    assert result.residual < 1e-18


def test_residual_is_reproducible(pjt2):
    data = synth_data(pjt2, QX, noise=1e-4, seed=3)
    result = fit_pjt_slice(data)
    assert_allclose(slice_residual(result.params, data), result.residual, rtol=1e-14)
    assert np.all(np.diff(result.history) <= 0)


def test_noisy_fits_converge(pjt2):
    for seed in range(100):
        result = fit_pjt_slice(synth_data(pjt2, QX, noise=1e-4, seed=seed))
        assert result.converged
        assert abs(result.params.alpha - pjt2.alpha) < 5e-3
        assert abs(result.params.eps_E - pjt2.eps_E) < 5e-4


def test_energy_shift_moves_only_onsite_terms(pjt2):
    data = synth_data(pjt2, QX)
    base = fit_pjt_slice(data).params
    moved = fit_pjt_slice(shifted(data, 0.1)).params
    assert_allclose(moved.eps_E - base.eps_E, 0.1, atol=1e-9)
    assert_allclose(moved.eps_A - base.eps_A, 0.1, atol=1e-9)
    for name in ('omega', 'k', 'g', 'alpha'):
        assert_allclose(getattr(moved, name), getattr(base, name), atol=1e-9)


def test_alpha_sign_is_canonical(pjt2):
    flipped = PJTParams(**{**dict(zip(pjt2.names(), pjt2.values())), 'alpha': -pjt2.alpha})
    result = fit_pjt_slice(synth_data(pjt2, QX), init=flipped)
    assert result.params.alpha.real >= 0
    assert_allclose(result.params.alpha, pjt2.alpha, atol=ROUND_TRIP)


def test_pjt_fit_ill_posed(pjt2):
    data = synth_data(pjt2, QX)
    with pytest.raises(IllPosedError):
        fit_pjt_slice([s for s in data if s.qx >= 0])
    with pytest.raises(IllPosedError):
        fit_pjt_slice([s for s in data if s.branch == 2])
    with pytest.raises(IllPosedError):
        fit_pjt_slice(data[:6])
    with pytest.raises(DomainError):
        fit_pjt_slice(data, order=4)


def test_jt_fit_with_noise():
    jt = JTParams(eps_E=0.3339 - 0.0121j, omega=-0.0741 + 0.0089j, k=-0.0034 - 0.0011j, g=0.0268 + 0.0014j)
    data = synth_data(jt, QX, noise=1e-5, seed=1)
    result = fit_jt_slice(data)
    assert_allclose(result.params.k, jt.k, atol=1e-4)
    assert_allclose(result.params.g, jt.g, atol=1e-3)
