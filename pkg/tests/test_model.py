import math

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from adweight.errors import DimensionError, DomainError, UnknownStudyError
from adweight.model import (
    ObservationRow,
    OutcomeModelSpec,
    SharedParams,
    TrialParams,
    expit,
    mean_response,
    parse_term,
    score_contributions,
)

finite = st.floats(min_value=-700, max_value=700, allow_nan=False)


def test_expit_zero():
    assert expit(0.0) == 0.5


def test_expit_log3():
    assert expit(math.log(3.0)) == pytest.approx(0.75, abs=1e-15)


def test_expit_far_negative_matches_high_precision():
    v = expit(-745.0)
    assert 0.0 < v < 1e-300
    mpmath.mp.dps = 50
    exact = float(1 / (1 + mpmath.exp(745)))
    assert v == pytest.approx(exact, rel=1e-10)


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_expit_rejects_non_finite(bad):
    with pytest.raises(DomainError):
        expit(bad)


@given(finite)
def test_expit_symmetry_and_range(eta):
    p = expit(eta)
    assert 0.0 <= p <= 1.0
    assert p + expit(-eta) == pytest.approx(1.0, abs=1e-15)


def test_expit_vectorised():
    out = expit(np.array([-1.0, 0.0, 1.0]))
    assert out.shape == (3,)
    assert out[1] == 0.5


def test_parse_term_forms():
    assert parse_term("X*L2") == ("X", "L2")
    assert parse_term("X:L2") == ("X", "L2")
    assert parse_term(("L1",)) == ("L1",)
    with pytest.raises(DimensionError):
        parse_term("X*L1*L2")


def test_spec_rejects_unknown_covariate():
    with pytest.raises(DimensionError):
        OutcomeModelSpec(("L1",), ["L3"])


def test_spec_subgroup_block():
    s = OutcomeModelSpec(("L1", "L2"), ["L2"], "L1")
    assert s.n_trial == 4
    assert s.trial_term_labels == ["intercept", "treatment", "L1", "X*L1"]
    with pytest.raises(DimensionError):
        OutcomeModelSpec(("L1", "L2"), ["L1"], "L1")


def test_mean_response_zero_predictor(spec):
    tp = TrialParams(0.0, 0.0)
    sp = SharedParams(np.zeros(3))
    assert mean_response(spec, tp, sp, 1, np.array([0.3, 1.0])) == 0.5


def test_mean_response_simulation_example(spec):
    tp = TrialParams(0.25, 1.0)
    sp = SharedParams(np.array([1.5, -1.5, 2.0]))
    assert mean_response(spec, tp, sp, 1, np.array([0.0, 1.0])) == pytest.approx(expit(1.75), abs=1e-15)


def test_mean_response_interaction_irrelevant_in_control():
    s = OutcomeModelSpec(("L1",), ["X*L1"])
    tp = TrialParams(0.3, 0.2)
    a = mean_response(s, tp, SharedParams(np.array([5.0])), 0, np.array([0.7]))
    b = mean_response(s, tp, SharedParams(np.array([-3.0])), 0, np.array([0.7]))
    assert a == b


def test_mean_response_dimension_mismatch(spec):
    with pytest.raises(DimensionError):
        mean_response(spec, TrialParams(0.0, 0.0), SharedParams(np.zeros(2)), 1, np.array([0.1, 1.0]))


def test_mean_response_subgroup_terms():
    s = OutcomeModelSpec(("L1", "L2"), ["L2"], "L1")
    tp = TrialParams(0.1, 0.2, (0.3, 0.4))
    v = mean_response(s, tp, SharedParams(np.array([0.5])), 1, np.array([1.0, 2.0]))
    assert v == pytest.approx(expit(0.1 + 0.2 + 0.3 + 0.4 + 1.0))


@settings(max_examples=50)
@given(st.floats(-5, 5), st.floats(-5, 5), st.floats(-5, 5), st.floats(0, 1))
def test_mean_response_monotone_in_treatment(phi0, phi1, delta, l1):
    s = OutcomeModelSpec(("L1",), ["L1"])
    sp = SharedParams(np.array([0.7]))
    lo = mean_response(s, TrialParams(phi0, phi1), sp, 1, np.array([l1]))
    hi = mean_response(s, TrialParams(phi0, phi1 + abs(delta) + 1e-3), sp, 1, np.array([l1]))
    assert hi >= lo
    c0 = mean_response(s, TrialParams(phi0, phi1), sp, 0, np.array([l1]))
    c1 = mean_response(s, TrialParams(phi0, phi1 + delta), sp, 0, np.array([l1]))
    assert c0 == c1


def test_trial_params_validation():
    with pytest.raises(DomainError):
        TrialParams(np.nan, 0.0)
    tp = TrialParams.from_array([1.0, 2.0, 3.0, 4.0])
    assert tp.extra == (3.0, 4.0)
    np.testing.assert_array_equal(tp.as_array(), [1, 2, 3, 4])


def test_observation_row_validation():
    with pytest.raises(DomainError):
        ObservationRow(1, 2, 0, np.array([0.0]))


def test_score_zero_residual(spec):
    tps = {4: TrialParams(0.2, 0.3), 5: TrialParams(0.1, 0.0)}
    sp = SharedParams(np.array([1.0, -1.0, 0.5]))
    l = np.array([0.4, 1.0])
    q = mean_response(spec, tps[4], sp, 1, l)
    obs = ObservationRow(4, 1, q, l)
    assert np.all(score_contributions(spec, tps, sp, obs) == 0.0)


def test_score_structural_zero_for_other_trials(spec):
    tps = {4: TrialParams(0.2, 0.3), 5: TrialParams(0.1, 0.0)}
    sp = SharedParams(np.array([1.0, -1.0, 0.5]))
    obs = ObservationRow(5, 1, 1, np.array([0.4, 1.0]))
    g = score_contributions(spec, tps, sp, obs)
    assert np.all(g[:2] == 0.0)
    assert np.all(g[2:4] != 0.0)


def test_score_unknown_study(spec):
    tps = {4: TrialParams(0.2, 0.3)}
    with pytest.raises(UnknownStudyError):
        score_contributions(spec, tps, SharedParams(np.zeros(3)), ObservationRow(9, 1, 1, np.array([0.4, 1.0])))
