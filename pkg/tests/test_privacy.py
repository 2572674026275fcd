import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import binary_awgn_mi_quad
from splitmask.privacy import (F32_ROUNDOFF, PrivacyParams, evaluate, lemma_bound, mi_bound_colluding,
                               mi_bound_joint, mi_bound_single, mi_oracle_scalar, paper_table_bound,
                               paper_table_rows, perfect_privacy_f32, required_sigma2)

TABLE = [(1.6e7, 1.25e-6), (2.5e7, 8e-7), (1e8, 2e-7), (4e8, 5e-8)]


@pytest.mark.parametrize("sigma2,expected", TABLE)
def test_paper_table_preset(sigma2, expected):
    assert paper_table_bound(sigma2) == expected


def test_single_bound_calibrated_to_numerator_20():
    # K C1^2 ratio^2 / 2 = 20 with K=2, C1=1 needs ratio^2 = 20
    p = PrivacyParams(K=2, C1=1.0, sigma2=1.6e7, alpha_max=math.sqrt(20.0), alpha_min=1.0)
    assert math.isclose(mi_bound_single(p), 1.25e-6, rel_tol=1e-14)
    assert math.isclose(mi_bound_single(p.with_sigma2(4e8)), 5e-8, rel_tol=1e-14)


def test_single_bound_direct_formula():
    p = PrivacyParams(K=2, C1=1.0, sigma2=4e8, alpha_max=math.sqrt(10.0), alpha_min=1.0)
    assert math.isclose(mi_bound_single(p), 2.5e-8, rel_tol=1e-14)


def test_single_bound_reduces_without_coefficient_spread():
    for K, C1, s2 in [(1, 1.0, 1.0), (3, 0.5, 1e6), (4, 2.0, 3e7)]:
        p = PrivacyParams(K=K, C1=C1, sigma2=s2, alpha_max=0.7, alpha_min=0.7)
        assert mi_bound_single(p) == K * C1 ** 2 / (2 * s2)


def test_joint_bound():
    assert math.isclose(mi_bound_joint(PrivacyParams(K=2, C1=1.0, sigma2=4e8)), 6.4e-7, rel_tol=1e-15)
    assert mi_bound_joint(PrivacyParams(K=2, C1=0.0, sigma2=4e8)) == 0.0
    p = PrivacyParams(K=3, C1=0.4, sigma2=5e5)
    assert mi_bound_joint(p.with_sigma2(1e6)) == mi_bound_joint(p) / 2


def test_colluding_bound():
    assert mi_bound_colluding(PrivacyParams(var_sum=0.0)) == 0.0
    assert math.isclose(mi_bound_colluding(PrivacyParams(var_sum=1.0, C_min=1.0, sigma2=1e8)), 1e-8, rel_tol=1e-15)
    p = PrivacyParams(var_sum=3.0, C_min=0.8, sigma2=1e5)
    assert math.isclose(mi_bound_colluding(PrivacyParams(var_sum=3.0, C_min=0.4, sigma2=1e5)),
                        2 * mi_bound_colluding(p), rel_tol=1e-15)


def test_params_validation():
    with pytest.raises(ValueError):
        PrivacyParams(sigma2=0.0)
    with pytest.raises(ValueError):
        PrivacyParams(alpha_max=0.5, alpha_min=1.0)
    with pytest.raises(ValueError):
        PrivacyParams(C_min=0.0)
    with pytest.raises(ValueError):
        evaluate(PrivacyParams(), "nonsense")


def test_bounds_monotone_sweeps():
    sigmas = np.logspace(2, 10, 30)
    c1s = np.linspace(0, 3, 30)
    for which in ("single", "joint", "colluding"):
        vals = [evaluate(PrivacyParams(K=2, C1=1.0, sigma2=s, var_sum=2.0), which) for s in sigmas]
        assert all(a >= b for a, b in zip(vals, vals[1:]))
        vals = [evaluate(PrivacyParams(K=2, C1=c, sigma2=1e6, var_sum=2 * c * c), which) for c in c1s]
        assert all(a <= b for a, b in zip(vals, vals[1:]))


def test_required_sigma2_examples():
    p20 = PrivacyParams(K=2, C1=1.0, alpha_max=math.sqrt(20.0))
    assert math.isclose(required_sigma2(1.25e-6, p20, "paper-table"), 1.6e7, rel_tol=1e-12)
    assert math.isclose(required_sigma2(1.25e-6, p20, "single"), 1.6e7, rel_tol=1e-12)
    assert math.isclose(required_sigma2(6.4e-7, PrivacyParams(K=2, C1=1.0), "joint"), 4e8, rel_tol=1e-12)
    with pytest.raises(ValueError):
        required_sigma2(0.0, p20)


@settings(max_examples=200, deadline=None)
@given(K=st.integers(1, 6), C1=st.floats(0.01, 10), ratio=st.floats(1, 10), s0=st.floats(1e-3, 1e12),
       which=st.sampled_from(["single", "joint", "colluding", "paper-table"]))
def test_required_sigma2_roundtrip(K, C1, ratio, s0, which):
    p = PrivacyParams(K=K, C1=C1, sigma2=s0, alpha_max=ratio, alpha_min=1.0, var_sum=K * C1 * C1)
    target = evaluate(p, which)
    s = required_sigma2(target, p, which)
    assert math.isclose(s, s0, rel_tol=1e-12)
    assert evaluate(p.with_sigma2(s), which) <= target
    assert evaluate(p.with_sigma2(math.nextafter(s, 0.0)), which) > target


def test_perfect_privacy_predicate():
    assert perfect_privacy_f32(F32_ROUNDOFF / 2)
    assert not perfect_privacy_f32(F32_ROUNDOFF)
    rows = paper_table_rows()
    assert [r["perfect_privacy_f32"] for r in rows[:4]] == [False, False, False, True]


def test_paper_table_rows_and_direct_row():
    rows = paper_table_rows()
    assert [r["bound_single"] for r in rows[:4]] == [v for _, v in TABLE]
    assert all(r["source"] == "paper-table" for r in rows[:4])
    assert rows[4]["source"] == "direct"
    assert math.isclose(rows[4]["bound_single"], 2.5e-8, rel_tol=1e-14)


# -- scalar channel oracle ------------------------------------------------------

def test_oracle_degenerate_and_errors():
    assert mi_oracle_scalar(0.0, 1.0, 1.0, 1.0) == 0.0
    with pytest.raises(ValueError):
        mi_oracle_scalar(1.0, 1.0, 0.0, 1.0)
    with pytest.raises(ValueError):
        mi_oracle_scalar(1.0, 1.0, 1.0, 1.0, grid=999)


def test_oracle_examples():
    v = mi_oracle_scalar(1.0, 1.0, 1.0, 1e6)
    assert 0 <= v <= 5e-7 + 1e-6
    assert abs(mi_oracle_scalar(1.0, 1.0, 1.0, 1e-6) - math.log(2)) < 1e-3


@pytest.mark.parametrize("C1,a,b,s2", [(1, 1, 1, 1), (1, 1, 1, 1e6), (2, 0.3, 1.5, 0.5), (0.5, 2, 0.1, 10),
                                       (1, -0.7, 0.9, 3.0), (3, 1, -2, 0.01)])
def test_oracle_matches_quadrature(C1, a, b, s2):
    assert abs(mi_oracle_scalar(C1, a, b, s2) - binary_awgn_mi_quad(C1, a, b, s2)) < 1e-9


@settings(max_examples=300, deadline=None)
@given(C1=st.floats(0, 5), a=st.floats(-5, 5), b=st.floats(0.01, 5).flatmap(lambda x: st.sampled_from([x, -x])),
       log_s2=st.floats(-4, 8))
def test_oracle_never_exceeds_lemma_bound(C1, a, b, log_s2):
    s2 = 10.0 ** log_s2
    v = mi_oracle_scalar(C1, a, b, s2)
    assert 0.0 <= v <= math.log(2)
    assert v <= min(lemma_bound(C1, a, b, s2), math.log(2)) + 1e-6
