import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bprelab.genfun import (
    Composition,
    build_suffix_table,
    empty_composition,
    evaluate,
    extend_left,
    extend_right,
    extinction_pmf_given_env,
    log1mexp,
    pgf_coefficients,
    prefix_compositions,
    splice,
)
from bprelab.offspring import EnvRealization, law_from_params, preset, sample_environment
from bprelab.rng import substream


def env_from_arrays(x, eta):
    return EnvRealization(x=np.asarray(x, float), eta=np.asarray(eta, float))


def test_empty_composition_is_identity():
    c = empty_composition()
    assert c.survival == 1.0
    assert evaluate(c, 0.3) == pytest.approx(0.3, abs=1e-15)
    assert evaluate(c, 1.0) == 1.0
    with pytest.raises(ValueError):
        Composition(0.5, 0.0, 2, 2)  # nonempty values on an empty span


def test_single_and_double_extension():
    law = law_from_params(0.0, 1.0)
    c1 = extend_right(empty_composition(), law)
    assert math.exp(-c1.neg_log_a) == pytest.approx(1.0)
    assert math.exp(c1.log_b) == pytest.approx(1.0)
    assert c1.survival == pytest.approx(0.5)
    c2 = extend_right(c1, law)
    assert math.exp(c2.log_b) == pytest.approx(2.0)
    assert c2.survival == pytest.approx(1.0 / 3.0)
    # direct evaluation agrees with f(f(s)) for f(s) = 1/(2-s)
    assert evaluate(c2, 0.5) == pytest.approx(0.75, abs=1e-14)
    assert evaluate(c2, 0.0) == pytest.approx(2.0 / 3.0, abs=1e-14)


def test_extend_left_matches_extend_right_on_single_law():
    law = law_from_params(0.4, 0.9)
    r = extend_right(empty_composition(0), law)
    l = extend_left(empty_composition(1), law)
    assert l.neg_log_a == pytest.approx(r.neg_log_a, abs=1e-15)
    assert l.log_b == pytest.approx(r.log_b, abs=1e-15)


def test_extend_left_vanishing_eta_keeps_b():
    base = extend_right(empty_composition(1), law_from_params(0.3, 1.1))
    out = extend_left(base, law_from_params(0.0, 1e-13))
    assert out.neg_log_a == pytest.approx(base.neg_log_a)
    assert out.log_b == pytest.approx(base.log_b, abs=1e-12)


def test_evaluate_monotone_and_endpoints():
    env = sample_environment(preset("uniform-unit"), 30, seed=3)
    comp = prefix_compositions(env, 30)[30]
    s = np.linspace(0.0, 1.0, 41)
    vals = np.array([evaluate(comp, v) for v in s])
    assert np.all(np.diff(vals) >= -1e-15)
    assert vals[-1] == 1.0
    with pytest.raises(ValueError):
        evaluate(comp, 1.5)


@given(seed=st.integers(0, 10_000), n=st.integers(2, 60), drift=st.floats(-0.4, 0.4))
@settings(max_examples=60, deadline=None)
def test_splice_identity_property(seed, n, drift):
    rng = substream(seed, 11, 0)
    x = rng.uniform(-1.0, 1.0, n) + drift
    eta = rng.uniform(1.0, 1.5, n)
    env = env_from_arrays(x, eta)
    comps = prefix_compositions(env)
    j = int(rng.integers(0, n + 1))
    right = empty_composition(j)
    for i in range(j + 1, n + 1):
        right = extend_right(right, env.law(i))
    sp = splice(comps[j], right)
    assert np.isclose(sp.neg_log_a, comps[n].neg_log_a, rtol=1e-12, atol=1e-12)
    assert np.isclose(sp.log_b, comps[n].log_b, rtol=1e-12, atol=1e-12)


def test_log_domain_survives_extreme_drift():
    # |S| walks out to ~400 in both directions without overflow
    n = 1000
    rng = substream(5, 12, 0)
    for drift in (-0.4, 0.4):
        x = rng.uniform(-1.0, 1.0, n) + drift
        eta = rng.uniform(1.0, 1.5, n)
        env = env_from_arrays(x, eta)
        comp = prefix_compositions(env)[n]
        assert abs(comp.neg_log_a) > 250.0
        assert math.isfinite(comp.log_b)
        surv = comp.survival
        assert 0.0 <= surv < 1.0
        pm = extinction_pmf_given_env(env)
        assert np.all(pm.pmf >= 0.0)
        assert pm.total == pytest.approx(1.0, abs=1e-12)


def test_pgf_coefficients_geometric_structure():
    law = law_from_params(0.0, 1.0)
    c2 = extend_right(extend_right(empty_composition(), law), law)
    coeff = pgf_coefficients(c2, 50)
    # composite of two copies of 1/(2-s) has a = 1, b = 2, so q = 2/3 and
    # the positive part is (1/9) (2/3)^{k-1}
    assert coeff[0] == pytest.approx(2.0 / 3.0, rel=1e-12)
    k = np.arange(1, 51)
    assert np.allclose(coeff[1:], (1.0 / 9.0) * (2.0 / 3.0) ** (k - 1), rtol=1e-12)
    # direct check against evaluate: sum_k coeff_k s^k == f(s)
    for s in (0.2, 0.7, 0.95):
        series = float((coeff * s ** np.arange(51)).sum())
        assert series == pytest.approx(evaluate(c2, s), abs=1e-10)
    empty = pgf_coefficients(empty_composition(), 5)
    assert empty[1] == 1.0 and empty.sum() == 1.0


def test_extinction_pmf_two_standard_laws():
    env = env_from_arrays([0.0, 0.0], [1.0, 1.0])
    pm = extinction_pmf_given_env(env)
    assert pm.pmf[0] == pytest.approx(0.5, abs=1e-14)
    assert pm.pmf[1] == pytest.approx(1.0 / 6.0, abs=1e-14)
    assert pm.survival == pytest.approx(1.0 / 3.0, abs=1e-14)


def test_extinction_pmf_sums_to_one_deep():
    env = sample_environment(preset("uniform-unit"), 10_000, seed=8)
    pm = extinction_pmf_given_env(env)
    assert np.all(pm.pmf >= 0.0)
    assert pm.total == pytest.approx(1.0, abs=1e-12)


def test_extinction_pmf_against_forward_simulation():
    # quenched oracle: simulate the population through one fixed environment
    env = sample_environment(preset("uniform-unit"), 12, seed=21)
    pm = extinction_pmf_given_env(env)
    rng = substream(99, 13, 0)
    n_paths = 100_000
    z = np.ones(n_paths, dtype=np.int64)
    t_obs = np.zeros(n_paths, dtype=np.int64)  # 0 = still alive at the horizon
    for k in range(1, 13):
        law = env.law(k)
        alive = z > 0
        litters = rng.binomial(z[alive], 1.0 - law.f0)
        extra = np.zeros(len(litters), dtype=np.int64)
        pos = litters > 0
        extra[pos] = rng.negative_binomial(litters[pos], 1.0 - law.q)
        znew = litters + extra
        died = znew == 0
        idx = np.flatnonzero(alive)
        t_obs[idx[died]] = k
        z[alive] = znew
    for k in (1, 2, 3, 6, 12):
        phat = (t_obs == k).mean()
        se = math.sqrt(max(phat * (1 - phat), 1e-12) / n_paths)
        assert abs(phat - pm.pmf[k - 1]) < 3.5 * se


def test_suffix_table_consistency():
    env = sample_environment(preset("uniform-unit"), 21, seed=4)
    table = build_suffix_table(env, 20)
    assert table.f0(20, 20) == 0.0
    # f_{m,n}(0) nondecreasing in the horizon
    for m in range(0, 20):
        assert table.f0(m, 21) >= table.f0(m, 20) - 1e-15
    # spot-check against direct right-extension builds
    for m in (0, 7, 19):
        direct = empty_composition(m)
        for i in range(m + 1, 21):
            direct = extend_right(direct, env.law(i))
        assert np.isclose(direct.neg_log_a, table.nla_n[m], rtol=1e-12, atol=1e-12)
        assert np.isclose(direct.log_b, table.logb_n[m], rtol=1e-12, atol=1e-12)
    with pytest.raises(ValueError):
        build_suffix_table(env, 21)  # needs n+1 laws


def test_log1mexp_edges():
    assert log1mexp(-1e-12) < -20.0
    assert log1mexp(-50.0) == pytest.approx(-math.exp(-50.0), abs=1e-60)
    assert log1mexp(0.0) == -math.inf
