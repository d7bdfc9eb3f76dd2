"""
Evaluation Tests
================

Linear probes, metric oracles, the retrieval index and zero-shot
classification, plus the synthetic-world acceptance runs.

Usage:
    pytest test_evaluation.py
    pytest test_evaluation.py --slow
"""

import sys
sys.dont_write_bytecode = True

import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from encoders import WildsatModel
from evaluation import (
    ProbeConfig,
    RetrievalIndex,
    accuracy,
    build_index,
    classification_report,
    confusion_matrix,
    extract_features,
    fit_linear_probe,
    load_index,
    mean_iou,
    mean_top_k_accuracy,
    micro_f1,
    per_class_f1,
    plot_confusion_matrix,
    query_index,
    save_index,
    tile_text_embeddings,
    top_k_accuracy,
    zero_shot_classify,
)
from exceptions import ShapeError, ValidationError


@pytest.fixture
def model(train_config):
    return WildsatModel(train_config.model, seed=0)


def _clusters(seed=0, n=20):
    rng = np.random.default_rng(seed)
    centres = np.array([[3.0, 0.0, 0.0, 0.0], [-3.0, 0.0, 0.0, 0.0]])
    labels = np.repeat([0, 1], n)
    return centres[labels] + 0.5 * rng.standard_normal((2 * n, 4)), labels


# ---------------------------------------------------------------------------
# Linear probes
# ---------------------------------------------------------------------------

def test_probe_separates_clusters():
    features, labels = _clusters()
    head = fit_linear_probe(features, labels, config=ProbeConfig(epochs=100, lr=0.05))
    assert accuracy(head.predict(features), labels) == 1.0
    np.testing.assert_allclose(head.scores(features).sum(axis=1), 1.0)


def test_multi_label_and_encounter_probes():
    features, labels = _clusters(1)
    targets = np.stack([labels == 0, labels == 1, np.ones_like(labels, dtype=bool)], axis=1).astype(float)
    head = fit_linear_probe(features, targets, task='multi_label', config=ProbeConfig(epochs=100, lr=0.05))
    predicted = head.predict(features)
    assert predicted.dtype == bool and predicted.shape == targets.shape
    assert micro_f1(predicted, targets.astype(bool)) > 0.95

    rates = 0.5 * targets
    encounter = fit_linear_probe(features, rates, task='encounter_rate', config=ProbeConfig(epochs=20))
    scores = encounter.predict(features)
    assert np.all((scores >= 0) & (scores <= 1))


def test_probe_leaves_encoder_untouched(model, tiny_world):
    pixels = np.stack([tile.pixels for tile in tiny_world.tiles])
    labels = np.array([tiny_world.tile_labels[tile.tile_id] for tile in tiny_world.tiles])
    before = model.params.digest()
    features = extract_features(model, pixels, batch_size=5)
    assert features.shape == (len(pixels), 8)
    fit_linear_probe(features, labels, config=ProbeConfig(epochs=5), model=model)
    assert model.params.digest() == before


def test_feature_batching_does_not_change_features(model, tiny_world):
    pixels = np.stack([tile.pixels for tile in tiny_world.tiles[:10]])
    np.testing.assert_allclose(extract_features(model, pixels, batch_size=3),
                               extract_features(model, pixels, batch_size=64), atol=1e-12)


def test_probe_rejects_empty_class():
    features, _ = _clusters(n=2)
    with pytest.raises(ValidationError, match='class 1 has no examples'):
        fit_linear_probe(features, np.array([0, 0, 2, 2]))


def test_probe_rejects_mismatched_labels():
    features, labels = _clusters()
    with pytest.raises(ShapeError):
        fit_linear_probe(features, labels[:-1])
    with pytest.raises(ValidationError):
        fit_linear_probe(features, labels, task='regression')
    with pytest.raises(ValidationError):
        fit_linear_probe(features, labels.astype(float), task='single_label')
    with pytest.raises(ValidationError):
        fit_linear_probe(features, np.full((len(labels), 2), 0.5), task='multi_label')


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def test_accuracy_and_confusion_orientation():
    assert accuracy([0, 1, 1, 2], [0, 1, 2, 2]) == 0.75
    matrix = confusion_matrix([1], [0], 2)
    assert matrix[0, 1] == 1 and matrix.sum() == 1
    with pytest.raises(ShapeError):
        accuracy([0, 1], [0])


def test_micro_f1_worked_example():
    assert micro_f1([{0, 1}, {2}], [{0}, {2, 3}]) == pytest.approx(4 / 6)
    assert micro_f1([set()], [set()]) == 1.0


_SUBSETS = [frozenset(c) for r in range(5) for c in itertools.combinations(range(4), r)]


def _brute_f1(pred, true):
    tp = sum(1 for x in range(4) if x in pred and x in true)
    fp = sum(1 for x in range(4) if x in pred and x not in true)
    fn = sum(1 for x in range(4) if x not in pred and x in true)
    return 1.0 if tp + fp + fn == 0 else 2 * tp / (2 * tp + fp + fn)


def test_micro_f1_matches_brute_force_on_every_subset_pair():
    for pred, true in itertools.product(_SUBSETS, repeat=2):
        mask_pred = np.array([x in pred for x in range(4)])
        mask_true = np.array([x in true for x in range(4)])
        assert micro_f1([pred], [true]) == _brute_f1(pred, true)
        assert micro_f1([mask_pred], [mask_true]) == _brute_f1(pred, true)


def _brute_iou(pred, true):
    scores = []
    for c in (0, 1):
        p = {i for i in range(4) if (i in pred) == bool(c)}
        t = {i for i in range(4) if (i in true) == bool(c)}
        if p | t:
            scores.append(len(p & t) / len(p | t))
    return sum(scores) / len(scores)


def test_mean_iou_matches_brute_force_on_every_subset_pair():
    for pred, true in itertools.product(_SUBSETS, repeat=2):
        pred_map = np.array([int(i in pred) for i in range(4)]).reshape(2, 2)
        true_map = np.array([int(i in true) for i in range(4)]).reshape(2, 2)
        assert mean_iou(pred_map, true_map, 2) == pytest.approx(_brute_iou(pred, true), abs=1e-15)


def test_mean_iou_worked_example():
    assert mean_iou(np.array([0, 0, 1, 1]), np.array([0, 1, 1, 0]), 2) == pytest.approx(1 / 3)


def test_per_class_f1_and_report():
    f1 = per_class_f1([0, 1, 1], [0, 1, 0], 3)
    np.testing.assert_allclose(f1, [2 / 3, 2 / 3, 1.0])
    report = classification_report([0, 1, 1], [0, 1, 0], 3)
    assert report['accuracy'] == pytest.approx(2 / 3)
    assert report['confusion_matrix'][0] == [1, 1, 0]


@pytest.mark.parametrize('observed, expected', [
    ({0, 2}, 1.0),
    ({1, 3}, 0.0),
    ({0, 1}, 0.5),
    ({3}, 0.0),
    ({0, 1, 2, 3}, 1.0),
])
def test_top_k_accuracy_cases(observed, expected):
    assert top_k_accuracy([0.9, 0.1, 0.8, 0.2], observed) == expected


def test_top_k_ties_rank_lower_index_first():
    assert top_k_accuracy([0.5, 0.5, 0.5], {0}) == 1.0
    assert top_k_accuracy([0.5, 0.5, 0.5], {1}) == 0.0


def _brute_top_k(rates, observed):
    k = len(observed)
    ranked = sorted(range(len(rates)), key=lambda s: (-rates[s], s))[:k]
    return len(set(ranked) & set(observed)) / k


def test_top_k_matches_brute_force_on_six_species():
    rng = np.random.default_rng(0)
    for _ in range(50):
        rates = rng.integers(0, 5, size=6) / 4.0
        for r in range(1, 7):
            for observed in itertools.combinations(range(6), r):
                assert top_k_accuracy(rates, observed) == _brute_top_k(list(rates), observed)


@given(st.lists(st.integers(0, 100), min_size=6, max_size=6), st.sets(st.integers(0, 5), min_size=1))
def test_top_k_invariant_under_monotone_transform(levels, observed):
    rates = np.array(levels) / 100.0
    assert top_k_accuracy(np.sqrt(rates), observed) == top_k_accuracy(rates, observed)


def test_top_k_rejects_bad_input():
    with pytest.raises(ValidationError):
        top_k_accuracy([0.5, 0.2], set())
    with pytest.raises(ValidationError):
        top_k_accuracy([1.5, 0.2], {0})


def test_mean_top_k_skips_empty_samples():
    mean, skipped = mean_top_k_accuracy([[0.9, 0.1], [0.2, 0.8], [0.5, 0.5]], [{0}, {0}, set()])
    assert mean == 0.5
    assert skipped == 1


def test_confusion_plot_is_written(tmp_path):
    path = tmp_path / 'confusion.png'
    plot_confusion_matrix(confusion_matrix([0, 1, 1], [0, 1, 0], 2), str(path))
    assert path.stat().st_size > 0


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

@pytest.fixture
def basis_index():
    return RetrievalIndex([10, 11, 12], np.eye(3))


def test_query_identity_basis(basis_index):
    assert query_index(basis_index, [0.0, 1.0, 0.0], k=1) == [(11, 1.0)]


def test_query_clamps_k_and_breaks_ties_by_id(basis_index):
    results = query_index(basis_index, [1.0, 1.0, 0.0], k=10)
    assert [tile_id for tile_id, _ in results] == [10, 11, 12]
    assert results[0][1] == pytest.approx(results[1][1])


def test_query_is_rescale_invariant(basis_index):
    query = np.array([0.2, 0.9, -0.4])
    plain = query_index(basis_index, query, 3)
    scaled = query_index(basis_index, 7.5 * query, 3)
    assert [tile_id for tile_id, _ in scaled] == [tile_id for tile_id, _ in plain]
    for (_, a), (_, b) in zip(scaled, plain):
        assert a == pytest.approx(b, abs=1e-12)


def test_query_rejects_bad_input(basis_index):
    with pytest.raises(ValidationError):
        query_index(basis_index, [1.0, 0.0, 0.0], k=0)
    with pytest.raises(ShapeError):
        query_index(basis_index, [1.0, 0.0], k=1)
    with pytest.raises(ValidationError):
        query_index(basis_index, [0.0, 0.0, 0.0], k=1)
    with pytest.raises(ValidationError):
        RetrievalIndex([1, 2], 2 * np.eye(2))


def test_index_rows_find_themselves(model, tiny_world):
    index = build_index(model, tiny_world.tiles)
    assert index.n == len(tiny_world.tiles)
    for row in range(0, index.n, 7):
        (_, cosine), = query_index(index, index.embeddings[row], k=1)
        assert cosine == pytest.approx(1.0, abs=1e-9)


def test_raw_text_query_goes_through_projection(model, tiny_world):
    index = build_index(model, tiny_world.tiles)
    raw = tiny_world.text_prototypes[0]
    assert query_index(index, raw, 5, model=model) == query_index(index, model.project_text(raw), 5)
    with pytest.raises(ShapeError):
        query_index(index, np.ones(5), 5, model=model)


def test_index_file_round_trip(model, tiny_world, tmp_path):
    index = build_index(model, tiny_world.tiles)
    path = str(tmp_path / 'index.json')
    save_index(index, path)
    loaded = load_index(path)
    assert loaded.tile_ids == index.tile_ids
    np.testing.assert_allclose(loaded.embeddings, index.embeddings, atol=1e-6)


# ---------------------------------------------------------------------------
# Zero-shot
# ---------------------------------------------------------------------------

def test_single_class_always_wins(model, tiny_world):
    classes = tiny_world.text_prototypes[:1]
    assert zero_shot_classify(model, tiny_world.tiles[0].pixels, classes) == 0
    pixels = np.stack([tile.pixels for tile in tiny_world.tiles[:5]])
    np.testing.assert_array_equal(zero_shot_classify(model, pixels, classes), np.zeros(5))


def test_zero_shot_agrees_with_transposed_retrieval(model, tiny_world):
    classes = tiny_world.text_prototypes
    class_index = RetrievalIndex(list(range(len(classes))), model.project_text(classes))
    pixels = np.stack([tile.pixels for tile in tiny_world.tiles])
    predictions = zero_shot_classify(model, pixels, classes)
    embeddings = tile_text_embeddings(model, pixels)
    for prediction, embedding in zip(predictions, embeddings):
        assert query_index(class_index, embedding, k=1)[0][0] == prediction


# ---------------------------------------------------------------------------
# Acceptance on the synthetic world
# ---------------------------------------------------------------------------

ACCEPTANCE_SEEDS = range(5)


def _site_split(world):
    """Even sites train, odd sites test, so no site has timestamps on both sides."""
    sites = np.array([tile.tile_id // world.config.timestamps_per_site for tile in world.tiles])
    return np.flatnonzero(sites % 2 == 0), np.flatnonzero(sites % 2 == 1)


def _probe_accuracy(world, model, seed):
    pixels = np.stack([tile.pixels for tile in world.tiles])
    labels = np.array([world.tile_labels[tile.tile_id] for tile in world.tiles])
    features = extract_features(model, pixels)
    train_rows, test_rows = _site_split(world)
    head = fit_linear_probe(features[train_rows], labels[train_rows],
                            config=ProbeConfig(epochs=100, lr=1e-2, seed=seed), model=model,
                            num_classes=world.config.habitats)
    return accuracy(head.predict(features[test_rows]), labels[test_rows])


@pytest.fixture(scope='module', params=ACCEPTANCE_SEEDS)
def desk_run(request):
    """Default world (8 habitats, 32 species, 256 tiles) trained under both PEFT modes."""
    from encoders import init_parameters
    from geodata import pair_samples
    from instance.seeds.world import SyntheticWorldConfig, generate_synthetic_world
    from training import TrainConfig, train

    seed = request.param
    world = generate_synthetic_world(SyntheticWorldConfig(seed=seed))
    samples = pair_samples(world.observations, world.tiles, world.texts, world.raster, seed=seed).samples
    base = TrainConfig.from_profile('desk')
    runs = {}
    for peft in ('full', 'scale_shift'):
        config = TrainConfig.from_dict({'epochs': 20, 'lr': 2e-3, 'seed': seed, 'prefetch': 0, 'peft': peft},
                                       base=base)
        runs[peft] = WildsatModel(config.model, train(config, samples).params)
    initial = init_parameters(base.model, seed)
    return world, WildsatModel(base.model, initial.copy()), runs, initial


@pytest.mark.slow
def test_training_beats_random_init_by_fifteen_points(desk_run):
    world, random_init, runs, _ = desk_run
    baseline = _probe_accuracy(world, random_init, world.config.seed)
    assert _probe_accuracy(world, runs['full'], world.config.seed) - baseline >= 0.15


@pytest.mark.slow
def test_scale_shift_keeps_kernels_and_still_improves(desk_run):
    world, random_init, runs, initial = desk_run
    tuned = runs['scale_shift'].params
    for name in tuned.names():
        if name.startswith('image.conv'):
            assert tuned[name].tobytes() == initial[name].tobytes(), name
    baseline = _probe_accuracy(world, random_init, world.config.seed)
    assert _probe_accuracy(world, runs['scale_shift'], world.config.seed) - baseline >= 0.05


@pytest.mark.slow
def test_text_queries_retrieve_their_habitat(desk_run):
    world, _, runs, _ = desk_run
    model = runs['full']
    index = build_index(model, world.tiles)
    chance = 1 / world.config.habitats
    for habitat, prototype in enumerate(world.text_prototypes):
        hits = query_index(index, prototype, 10, model=model)
        precision = np.mean([world.tile_labels[tile_id] == habitat for tile_id, _ in hits])
        assert precision >= 3 * chance, habitat


@pytest.mark.slow
def test_zero_shot_beats_chance(desk_run):
    world, _, runs, _ = desk_run
    model = runs['full']
    pixels = np.stack([tile.pixels for tile in world.tiles])
    labels = np.array([world.tile_labels[tile.tile_id] for tile in world.tiles])
    predictions = zero_shot_classify(model, pixels, world.text_prototypes)
    assert accuracy(predictions, labels) >= 2 / world.config.habitats
