import math

import numpy as np
import pytest
from scipy import integrate

from bprelab.offspring import preset
from bprelab.rng import substream
from bprelab.walk import (
    estimate_renewal,
    harmonicity_residuals,
    pplus_expectation,
    star_constants,
    summarize,
)

MODEL = preset("uniform-unit")

# independent oracle values for u_K on the uniform-unit walk, computed by a
# deterministic killed-density recursion (grid step 0.002, second order),
# truncation depth K = 2000
U_DEPTH_2000 = {0.5: 1.926681, 1.5: 4.280574, 3.0: 7.669172}


def naive_summary(s):
    l = min(s[1:])
    m = max(s[1:])
    tau = min(i for i, v in enumerate(s) if v == min(s))
    return l, m, tau


def test_summarize_examples():
    w = summarize([0.0, 1.0, 2.0])
    assert (w.l, w.m, w.tau) == (1.0, 2.0, 0)
    w = summarize([0.0, -1.0, 1.0, -1.0])
    assert w.tau == 1  # first of the two minima
    w = summarize([0.0, -2.0])
    assert (w.l, w.m, w.tau) == (-2.0, -2.0, 1)
    with pytest.raises(ValueError):
        summarize([0.0])


def test_summarize_agrees_with_naive_rescan():
    rng = substream(3, 21, 0)
    for _ in range(50):
        s = np.concatenate([[0.0], np.cumsum(rng.uniform(-1, 1, 40))])
        w = summarize(s)
        assert (w.l, w.m, w.tau) == naive_summary(list(s))


def test_renewal_u_basics():
    grid = [0.0, 0.5, 1.0, 1.5, 2.0, 3.0]
    table = estimate_renewal(MODEL, "plus", grid, depth=2000, replicates=120_000, seed=31)
    assert table.values[0] == 1.0  # exactly: staying negative forbids S_k >= 0
    assert np.all(np.diff(table.values) >= 0.0)
    assert np.all(np.diff(table.partials, axis=0) >= -1e-12)
    for x, ref in U_DEPTH_2000.items():
        i = grid.index(x)
        assert abs(table.values[i] - ref) < 4.0 * table.stderr[i]
    # interpolation / extrapolation behavior
    assert table.evaluate(-1.0) == 0.0
    assert table.evaluate(4.0) > table.values[-1]
    assert not table.covers(4.0)


def test_renewal_v_side():
    table = estimate_renewal(MODEL, "minus", [0.0, 0.5, 1.0], depth=1000, replicates=60_000, seed=32)
    assert table.values[0] == 1.0
    assert np.all(np.diff(table.values) >= 0.0)


def test_harmonicity_report_small():
    grid = np.round(np.arange(0, 2.751, 0.0625), 6)
    xs = [0.0, 1.0, 1.75]
    table, rep = harmonicity_residuals(
        MODEL, xs, grid, depth=20_000, replicates=60_000, outer_draws=20_000,
        seed=41, chunk_size=5_000,
    )
    assert rep.passes(3.0), f"residuals {rep.residual} vs se {rep.stderr}"
    with pytest.raises(ValueError):
        harmonicity_residuals(MODEL, [3.0], grid, depth=100, replicates=8000, seed=1)


def test_star_constants_oracles():
    st = star_constants(MODEL, [1, 2], replicates=400_000, seed=14)
    half_e = (1.0 - math.exp(-1.0)) / 2.0
    assert abs(st.k1[0] - half_e) < 4 * st.k1_stderr[0]
    assert abs(st.k2[0] - half_e) < 4 * st.k2_stderr[0]
    # two-step quadrature oracles over the square of uniform increments
    k1_2, _ = integrate.dblquad(
        lambda x2, x1: math.exp(-x1 - x2) / 4.0 if x1 >= 0 and x1 + x2 >= 0 else 0.0,
        -1, 1, -1, 1,
    )
    k2_2, _ = integrate.dblquad(
        lambda x2, x1: math.exp(x1 + x2) / 4.0 if x2 < 0 and x1 + x2 < 0 else 0.0,
        -1, 1, -1, 1,
    )
    assert abs(st.k1[1] - k1_2) < 4 * st.k1_stderr[1]
    assert abs(st.k2[1] - k2_2) < 4 * st.k2_stderr[1]


def test_star_consecutive_ratios_shape():
    st = star_constants(MODEL, [8, 16, 32], replicates=100_000, seed=15)
    r, r_se = st.consecutive_ratios("k1")
    assert len(r) == 2 and np.all(r > 0) and np.all(r_se > 0)


def make_u_table(depth=3000, reps=150_000, seed=6):
    grid = np.round(np.arange(0, 8.01, 0.25), 4)
    return estimate_renewal(MODEL, "plus", grid, depth=depth, replicates=reps, seed=seed)


def test_pplus_normalization_exact():
    table = make_u_table()
    rep = pplus_expectation(MODEL, lambda st: np.ones_like(st.s_n), 40, 0.0, 60_000, table, seed=7)
    assert rep.value == 1.0 and rep.stderr == 0.0


def test_pplus_indicator_decay():
    table = make_u_table()
    # {S_n <= 0} has zero mass under the conditioned law of continuous steps
    zero = pplus_expectation(MODEL, lambda st: (st.s_n <= 0.0).astype(float), 50, 0.0,
                             60_000, table, seed=8)
    assert zero.value == 0.0
    vals = []
    for n in (25, 100, 400):
        r = pplus_expectation(MODEL, lambda st: (st.s_n <= 1.0).astype(float), n, 0.0,
                              150_000, table, seed=9)
        vals.append(r)
    assert vals[1].value < vals[0].value - 3 * math.hypot(vals[0].stderr, vals[1].stderr)
    assert vals[2].value < vals[1].value


def test_pplus_b_series_stabilizes():
    # the second-moment series under the conditioned measure is a.s. finite;
    # its mean grows but with shrinking increments
    table = make_u_table()
    est = {}
    for n in (100, 200, 400):
        est[n] = pplus_expectation(MODEL, lambda st: st.b_n, n, 0.0, 150_000, table, seed=10)
    inc1 = est[200].value - est[100].value
    inc2 = est[400].value - est[200].value
    assert inc1 > 0 and inc2 > 0
    assert inc2 < 0.85 * inc1
    assert est[400].metadata["plug_in_bias"]["table_depth"] == table.depth


def test_pplus_zero_effective_sample():
    table = make_u_table()
    sinking = preset("point-mass", x_value=-0.5)
    with pytest.raises(RuntimeError):
        pplus_expectation(sinking, lambda st: st.b_n, 5, 0.0, 2000, table, seed=11)


def test_pplus_rejects_wrong_table_side():
    v_table = estimate_renewal(MODEL, "minus", [0.0, 1.0], depth=200, replicates=5000, seed=12)
    with pytest.raises(ValueError):
        pplus_expectation(MODEL, lambda st: st.b_n, 5, 0.0, 1000, v_table, seed=13)
