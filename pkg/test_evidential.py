import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.integrate import quad

from errors import InvalidInputError
from evidential import (
    combined_uncertainty,
    dirichlet_log_density,
    dissonance,
    evidence_from_logits,
    opinion_from_evidence,
    opinion_from_logits,
    predict_class,
    vacuity,
)

evidence_rows = st.integers(min_value=2, max_value=8).flatmap(
    lambda c: arrays(np.float64, (c,), elements=st.floats(0.0, 1e4, allow_nan=False))
)


def test_evidence_from_logits_examples():
    assert np.allclose(evidence_from_logits([0, 0, 0]), [1, 1, 1])
    assert np.allclose(evidence_from_logits([math.log(2), 0]), [2, 1])
    assert np.allclose(evidence_from_logits([50], clamp=10), [math.exp(10)])


def test_evidence_from_logits_rejects_bad_input():
    with pytest.raises(InvalidInputError):
        evidence_from_logits([np.nan, 0.0])
    with pytest.raises(InvalidInputError):
        evidence_from_logits([0.0, 0.0], clamp=0)


def test_opinion_examples():
    op = opinion_from_evidence([0, 0])
    assert np.allclose(op.alpha, [1, 1]) and op.strength == 2 and np.allclose(op.beliefs, [0, 0])

    op = opinion_from_evidence([10, 0])
    assert np.allclose(op.alpha, [11, 1]) and op.strength == 12
    assert np.allclose(op.beliefs, [10 / 12, 0])

    op = opinion_from_evidence([1, 1])
    assert np.allclose(op.beliefs, [0.25, 0.25]) and op.strength == 4


def test_opinion_rejects_negative_or_single_class():
    with pytest.raises(InvalidInputError):
        opinion_from_evidence([-1.0, 2.0])
    with pytest.raises(InvalidInputError):
        opinion_from_evidence([3.0])


def test_opinion_is_read_only():
    op = opinion_from_evidence([1.0, 2.0])
    with pytest.raises(ValueError):
        op.beliefs[0] = 0.5


def test_vacuity_examples():
    assert vacuity(opinion_from_evidence([0, 0, 0])) == pytest.approx(1.0)
    assert vacuity(opinion_from_evidence([10, 0])) == pytest.approx(2 / 12)
    assert vacuity(opinion_from_evidence([1, 1])) == pytest.approx(0.5)


def test_dissonance_examples():
    assert dissonance(opinion_from_evidence([0, 0, 0])) == 0.0
    assert dissonance(opinion_from_evidence([2, 0, 0])) == 0.0
    assert dissonance(opinion_from_evidence([1, 1])) == pytest.approx(0.5)


def test_batch_matches_rows():
    e = np.array([[1.0, 1.0, 0.0], [5.0, 0.5, 2.0], [0.0, 0.0, 0.0]])
    batch = opinion_from_evidence(e)
    for i, row in enumerate(e):
        single = opinion_from_evidence(row)
        assert vacuity(batch)[i] == pytest.approx(vacuity(single))
        assert dissonance(batch)[i] == pytest.approx(dissonance(single))


@settings(max_examples=300, deadline=None)
@given(evidence_rows)
def test_beliefs_plus_vacuity_is_one(e):
    op = opinion_from_evidence(e)
    assert abs(op.beliefs.sum() + vacuity(op) - 1.0) <= 1e-9


@settings(max_examples=200, deadline=None)
@given(evidence_rows)
def test_dissonance_bounded_by_belief_mass(e):
    op = opinion_from_evidence(e)
    d = dissonance(op)
    assert -1e-12 <= d <= op.beliefs.sum() + 1e-12


@given(st.integers(2, 8), st.integers(0, 7), st.floats(1e-3, 1e4))
def test_single_nonzero_belief_has_no_dissonance(c, k, value):
    e = np.zeros(c)
    e[k % c] = value
    assert dissonance(opinion_from_evidence(e)) == 0.0


def test_combined_uncertainty_examples():
    assert combined_uncertainty(0.4, 0.1, 1.0) == pytest.approx(0.4)
    assert combined_uncertainty(0.4, 0.1, 0.0) == pytest.approx(0.9)
    assert combined_uncertainty(0.5, 0.2, 0.3) == pytest.approx(0.71)
    with pytest.raises(InvalidInputError):
        combined_uncertainty(0.5, 0.2, 1.5)


def test_combined_uncertainty_endpoints_exact():
    rng = np.random.default_rng(0)
    op = opinion_from_logits(rng.normal(0, 3, size=(200, 5)))
    vac, diss = vacuity(op), dissonance(op)
    assert np.array_equal(combined_uncertainty(vac, diss, 1.0), vac)
    assert np.array_equal(combined_uncertainty(vac, diss, 0.0), 1.0 - diss)


def test_predict_class_examples():
    assert predict_class(opinion_from_evidence([0, 4, 0])) == 1
    assert predict_class(opinion_from_evidence([0, 0])) == 0
    assert predict_class(opinion_from_evidence([1, 2, 8])) == 2


def test_dirichlet_log_density_examples():
    assert dirichlet_log_density([0.5, 0.5], [1, 1]) == pytest.approx(0.0)
    assert dirichlet_log_density([0.5, 0.5], [2, 2]) == pytest.approx(math.log(1.5))
    assert dirichlet_log_density([0.9, 0.1], [1, 1]) == pytest.approx(0.0)
    with pytest.raises(InvalidInputError):
        dirichlet_log_density([0.7, 0.7], [1, 1])


@settings(max_examples=200, deadline=None)
@given(evidence_rows, st.integers(0, 7), st.floats(1e-2, 1e3))
def test_vacuity_drops_when_any_evidence_grows(e, k, extra):
    more = e.copy()
    more[k % len(e)] += extra
    assert vacuity(opinion_from_evidence(more)) < vacuity(opinion_from_evidence(e))


@settings(max_examples=200, deadline=None)
@given(st.data(), evidence_rows)
def test_uncertainty_ignores_class_order(data, e):
    order = data.draw(st.permutations(range(len(e))))
    op, shuffled = opinion_from_evidence(e), opinion_from_evidence(e[list(order)])
    assert vacuity(shuffled) == pytest.approx(vacuity(op), rel=1e-12)
    assert dissonance(shuffled) == pytest.approx(dissonance(op), rel=1e-9, abs=1e-12)


@pytest.mark.parametrize("alpha", [(1.0, 1.0), (2.0, 2.0), (3.5, 1.2), (10.0, 4.0)])
def test_two_class_density_integrates_to_one(alpha):
    total, _ = quad(lambda x: math.exp(dirichlet_log_density([x, 1.0 - x], alpha)), 0.0, 1.0)
    assert total == pytest.approx(1.0, abs=1e-3)
