import math

import numpy as np
import pytest
from scipy import integrate

from bprelab.experiments import (
    EstimateReport,
    PhiFunctional,
    limit_law_Zn,
    path_constancy,
    ratio_convergence,
    tail_fit,
)
from bprelab.offspring import preset
from bprelab.reports import mean_stderr, ratio_stderr, wls_line_fit

MODEL = preset("uniform-unit")


def test_wls_recovers_exact_line():
    x = np.array([1.0, 2.0, 3.0, 4.0])
    y = 2.5 - 1.5 * x
    slope, intercept, slope_se, intercept_se = wls_line_fit(x, y, np.full(4, 0.1))
    assert slope == pytest.approx(-1.5, abs=1e-12)
    assert intercept == pytest.approx(2.5, abs=1e-12)
    assert slope_se > 0 and intercept_se > 0
    with pytest.raises(ValueError):
        wls_line_fit(x, y, np.zeros(4))


def test_moment_helpers():
    vals = np.array([1.0, 2.0, 3.0, 4.0])
    m, se = mean_stderr(vals.sum(), (vals**2).sum(), 4)
    assert m == pytest.approx(2.5) and se == pytest.approx(vals.std(ddof=1) / 2.0)
    r, rse = ratio_stderr(vals.sum(), (vals**2).sum(), vals.sum(), (vals**2).sum(),
                          (vals**2).sum(), 4)
    assert r == 1.0 and rse == pytest.approx(0.0, abs=1e-12)


def test_estimate_report_validation():
    with pytest.raises(ValueError):
        EstimateReport(value=1.0, stderr=-1.0, replicates=1, seed={})


def test_tail_point_mass_has_zero_variance():
    # a deterministic environment makes the inner quantity exact, so the
    # spread across replicates is pure float roundoff
    fit = tail_fit(preset("point-mass"), [4, 8, 16, 32, 64], replicates=2000, seed=3)
    assert np.all(fit.stderr <= 1e-9 * fit.p)
    again = tail_fit(preset("point-mass"), [4, 8, 16, 32, 64], replicates=500, seed=9)
    assert np.allclose(fit.p, again.p, rtol=1e-12)  # replicate-count independent


def test_tail_small_horizon_oracle():
    # P(extinct exactly at 2) by two-dimensional quadrature over the two laws
    def f(s, x):
        return 1.0 - (1.0 - s) / (math.exp(-x) + (1.0 - s))

    oracle, err = integrate.dblquad(
        lambda x2, x1: (f(f(0.0, x2), x1) - f(0.0, x1)) / 4.0, -1, 1, -1, 1, epsabs=1e-12
    )
    fit = tail_fit(MODEL, [1, 10], replicates=200_000, seed=11)
    assert abs(fit.p[0] - oracle) < 3.5 * fit.stderr[0]


def test_tail_requires_decade_span():
    with pytest.raises(ValueError):
        tail_fit(MODEL, [64, 128], replicates=100, seed=0)


def test_tail_reproducible():
    a = tail_fit(MODEL, [4, 8, 16, 32, 64], replicates=30_000, seed=7, workers=1)
    b = tail_fit(MODEL, [4, 8, 16, 32, 64], replicates=30_000, seed=7, workers=3)
    assert np.array_equal(a.p, b.p) and a.slope == b.slope


def test_limit_law_endpoints_and_monotonicity():
    res = limit_law_Zn(MODEL, (24, 48), replicates=30_000, seed=13, k_max=10)
    assert res.ratios[0][0] == 0.0 and res.ratios[0][-1] == 1.0
    assert res.ratios[1][0] == 0.0 and res.ratios[1][-1] == 1.0
    assert np.all(np.diff(res.ratios[0]) >= 0.0)
    assert np.all(res.ratios <= 1.0 + 1e-12)
    assert np.all(res.pmf >= 0.0)
    assert res.pmf[0].sum() <= 1.0 + 1e-9
    assert res.sup_distance >= 0.0


def test_path_constancy_degenerate_window():
    # delta = 0.49 leaves at most a couple of grid points; still legal
    res = path_constancy(MODEL, [32], delta=0.49, target_accepted=150, seed=15, batch=20_000)
    assert res.accepted[0] >= 150
    assert 0.0 <= res.exceedance[0] <= 1.0
    with pytest.raises(ValueError):
        path_constancy(MODEL, [16], delta=0.6, target_accepted=10, seed=1)


def test_path_constancy_partial_flagged():
    res = path_constancy(MODEL, [24], delta=0.25, target_accepted=10_000, seed=16,
                         batch=5_000, max_batches=2)
    assert res.partial
    assert res.accepted[0] < 10_000


def test_path_constancy_y_positive():
    res, ensembles = path_constancy(MODEL, [20], delta=0.25, target_accepted=200,
                                    seed=17, batch=20_000, keep_paths=True)
    paths = ensembles[0]
    idx = np.arange(int(0.25 * 20), int(0.75 * 20) + 1)
    assert np.all(paths.y_values(idx) > 0.0)
    assert res.epsilon > 0.0


def test_phi_functional_contract():
    g = PhiFunctional(alpha=(1.0, 1.0), beta=(1.0, 1.0), gamma=(1.0, 1.0))
    assert g.bound == 1.0
    w = np.array([0.5, 1.0])
    b = np.array([0.0, 2.0])
    assert np.all(g(w, b) <= g.bound)
    assert g(w, b)[0] == pytest.approx(1.0 / (0.5 + 1.0) ** 2)
    with pytest.raises(ValueError):
        PhiFunctional(alpha=(1.0, 0.0), beta=(1.0, 1.0), gamma=(1.0, 1.0))


def test_ratio_convergence_identity_functional():
    res = ratio_convergence(MODEL, None, [4, 8, 16], replicates=20_000, seed=19)
    assert np.all(res.ratio == 1.0)
    assert res.bound_pass()


def test_ratio_convergence_phi():
    g = PhiFunctional(alpha=(1.0, 1.0), beta=(1.0, 1.0), gamma=(1.0, 1.0))
    res = ratio_convergence(MODEL, g, [64, 128, 256, 512], replicates=150_000, seed=20)
    assert np.all(res.ratio <= res.bound)
    assert np.all(res.ratio > 0.0)
    assert res.stabilization_pass(3.0), (res.ratio, res.stderr)
