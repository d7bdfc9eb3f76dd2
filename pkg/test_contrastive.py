"""
Contrastive Loss Tests
======================

Closed forms, symmetry, additivity and gradients of the loss stack.

Usage:
    pytest test_contrastive.py
"""

import sys
sys.dont_write_bytecode = True

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from contrastive import (
    EmbeddingBatch,
    LossConfig,
    info_nce,
    pairwise_loss,
    pairwise_loss_node,
    wildsat_loss,
    wildsat_loss_node,
)
from exceptions import ConfigError, ShapeError, ValidationError
from numerics import ParameterStore, Tape, finite_diff_check, l2_normalize_rows


def _unit(rng, n, d):
    return l2_normalize_rows(rng.standard_normal((n, d)))


def test_single_element_is_zero():
    assert info_nce(np.array([0.6, 0.8]), np.array([[0.0, 1.0]]), 0) == 0.0
    assert pairwise_loss([[1.0, 0.0]], [[0.0, 1.0]]) == 0.0


@pytest.mark.parametrize('tau', [0.07, 0.5, 1.0])
def test_two_sample_closed_form(tau):
    E = np.eye(2)
    assert info_nce(E[0], E, 0, tau) == pytest.approx(math.log1p(math.exp(-1.0 / tau)), abs=1e-9)


def test_two_sample_unit_temperature_value():
    assert info_nce(np.array([1.0, 0.0]), np.eye(2), 0, 1.0) == pytest.approx(0.31326, abs=1e-5)


def test_random_batches_average_log_n():
    rng = np.random.default_rng(0)
    values = []
    for _ in range(1000):
        E = _unit(rng, 64, 64)
        z = _unit(rng, 1, 64)[0]
        values.append(info_nce(z, E, 0, temperature=1.0))
    assert abs(np.mean(values) - math.log(64)) < 0.1


def test_identity_batch_closed_form():
    Z = np.eye(4)
    expected = math.log1p(3 * math.exp(-1 / 0.07))
    assert pairwise_loss(Z, Z, 0.07) == pytest.approx(expected, rel=1e-6)
    assert expected == pytest.approx(3 * math.exp(-1 / 0.07), rel=1e-5)


def test_pairwise_matches_mean_of_info_nce():
    rng = np.random.default_rng(1)
    Z, E = _unit(rng, 5, 3), _unit(rng, 5, 3)
    expected = sum(info_nce(Z[i], E, i, 0.2) + info_nce(E[i], Z, i, 0.2) for i in range(5)) / 10
    assert pairwise_loss(Z, E, 0.2) == pytest.approx(expected, abs=1e-12)


@pytest.mark.parametrize('seed', range(100))
def test_pairwise_is_symmetric(seed):
    rng = np.random.default_rng(seed)
    Z, E = _unit(rng, 6, 4), _unit(rng, 6, 4)
    assert pairwise_loss(Z, E) == pytest.approx(pairwise_loss(E, Z), abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_pairwise_is_permutation_equivariant(seed):
    rng = np.random.default_rng(seed)
    Z, E = _unit(rng, 7, 5), _unit(rng, 7, 5)
    order = rng.permutation(7)
    assert pairwise_loss(Z[order], E[order]) == pytest.approx(pairwise_loss(Z, E), abs=1e-12)


@given(st.integers(0, 2 ** 32 - 1))
def test_info_nce_is_non_negative_and_monotone(seed):
    rng = np.random.default_rng(seed)
    E = _unit(rng, 5, 3)
    z = _unit(rng, 1, 3)[0]
    loss = info_nce(z, E, 2, 0.1)
    assert loss >= 0.0
    # pull the positive toward z without touching the other rows
    E_closer = E.copy()
    E_closer[2] = l2_normalize_rows((E[2] + 0.5 * z)[None])[0]
    if E_closer[2] @ z > E[2] @ z:
        assert info_nce(z, E_closer, 2, 0.1) <= loss + 1e-12


def test_near_parallel_batches_stay_finite():
    rng = np.random.default_rng(2)
    base = _unit(rng, 1, 8)
    Z = l2_normalize_rows(base + 1e-9 * rng.standard_normal((16, 8)))
    E = l2_normalize_rows(base + 1e-9 * rng.standard_normal((16, 8)))
    assert math.isfinite(pairwise_loss(Z, E, 0.07))
    assert pairwise_loss(Z, E, 0.07) == pytest.approx(math.log(16), abs=1e-3)


def test_temperature_changes_the_loss():
    rng = np.random.default_rng(3)
    Z, E = _unit(rng, 4, 3), _unit(rng, 4, 3)
    assert pairwise_loss(Z, E, 0.2) != pytest.approx(pairwise_loss(Z, E, 0.1), abs=1e-6)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        pairwise_loss(np.eye(3), np.eye(4))


def test_wildsat_total_is_sum_of_terms():
    rng = np.random.default_rng(4)
    batches = [_unit(rng, 6, 4) for _ in range(6)]
    result = wildsat_loss(*batches)
    assert result.total == pytest.approx(result.image + result.text + result.location, abs=1e-12)
    assert result.image == pytest.approx(pairwise_loss(batches[0], batches[1]), abs=1e-12)


def test_wildsat_repeated_pair_is_three_times():
    rng = np.random.default_rng(5)
    Z, E = _unit(rng, 5, 4), _unit(rng, 5, 4)
    assert wildsat_loss(Z, E, Z, E, Z, E).total == pytest.approx(3 * pairwise_loss(Z, E), abs=1e-12)


def test_wildsat_inconsistent_batch_sizes():
    rng = np.random.default_rng(6)
    with pytest.raises(ShapeError):
        wildsat_loss(_unit(rng, 4, 3), _unit(rng, 4, 3), _unit(rng, 5, 3), _unit(rng, 5, 3))


def test_disabled_terms_are_skipped():
    rng = np.random.default_rng(7)
    Z, E = _unit(rng, 4, 3), _unit(rng, 4, 3)
    result = wildsat_loss(Z, E, Z, E, config=LossConfig(location_weight=0.0))
    assert result.location == 0.0
    assert result.total == pytest.approx(2 * pairwise_loss(Z, E), abs=1e-12)
    with pytest.raises(ConfigError):
        LossConfig(image_weight=0.0, text_weight=0.0, location_weight=0.0).validate()


def test_embedding_batch_validates_rows():
    EmbeddingBatch(np.eye(3), 'e_txt')
    with pytest.raises(ValidationError, match='not unit norm'):
        EmbeddingBatch(2 * np.eye(3), 'e_txt')
    with pytest.raises(ValidationError):
        EmbeddingBatch(np.eye(3), 'audio')


def test_head_gradients_are_nonzero_and_match_finite_differences():
    rng = np.random.default_rng(8)
    params = ParameterStore()
    for name in ('heads.image', 'heads.txt', 'heads.loc', 'heads.e_txt', 'heads.e_loc'):
        params.add(name, rng.standard_normal((5, 4)))
    features = rng.standard_normal((6, 5))
    tape = Tape()
    x = tape.constant(features)

    def head(inputs, name):
        return tape.l2_normalize_rows(tape.constant(inputs) @ tape.param(params, name))

    total, _ = wildsat_loss_node(tape, {
        'image': (tape.l2_normalize_rows(x @ tape.param(params, 'heads.image')),
                  head(features + 0.1 * rng.standard_normal(features.shape), 'heads.image')),
        'text': (tape.l2_normalize_rows(x @ tape.param(params, 'heads.txt')),
                 head(rng.standard_normal((6, 5)), 'heads.e_txt')),
        'location': (tape.l2_normalize_rows(x @ tape.param(params, 'heads.loc')),
                     head(rng.standard_normal((6, 5)), 'heads.e_loc')),
    }, LossConfig())
    tape.output('loss', total)
    report = finite_diff_check(tape, params, tolerance=1e-4)
    assert report.passed, report.failures[:3]
    from numerics import backward
    assert all(np.any(g != 0) for g in backward(tape).values())


def test_on_tape_loss_matches_numeric():
    rng = np.random.default_rng(9)
    Z, E = _unit(rng, 5, 3), _unit(rng, 5, 3)
    tape = Tape()
    node = pairwise_loss_node(tape, tape.constant(Z), tape.constant(E), 0.07)
    assert float(node.value) == pytest.approx(pairwise_loss(Z, E, 0.07), abs=1e-12)
