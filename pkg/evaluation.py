"""
Evaluation
==========

Frozen-encoder linear probes, the metric suite, the cosine retrieval index
and zero-shot classification.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from exceptions import ShapeError, ValidationError, WildsatError
from extensions import atomic_write_bytes, atomic_write_text, get_logger
from numerics import AdamState, ParameterStore, Tape, adam_step, as_tensor, backward, l2_normalize_rows

logger = get_logger('evaluation')

TASKS = ('single_label', 'multi_label', 'encounter_rate')
UNIT_NORM_TOLERANCE = 1e-9


# ---------------------------------------------------------------------------
# Linear probes
# ---------------------------------------------------------------------------

@dataclass
class ProbeConfig:
    epochs: int = 200
    lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0
    threshold: float = 0.5
    standardize: bool = True


@dataclass(eq=False)
class ProbeHead:
    weight: np.ndarray
    bias: np.ndarray
    task: str
    mean: np.ndarray
    std: np.ndarray

    def scores(self, features):
        logits = ((as_tensor(features) - self.mean) / self.std) @ self.weight + self.bias
        if self.task == 'single_label':
            shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
            return shifted / shifted.sum(axis=1, keepdims=True)
        return 1.0 / (1.0 + np.exp(-logits))

    def predict(self, features, threshold=0.5):
        """Class indices (single label), boolean label sets (multi label) or rates (encounter)."""
        scores = self.scores(features)
        if self.task == 'single_label':
            return np.argmax(scores, axis=1)
        if self.task == 'multi_label':
            return scores >= threshold
        return scores


def extract_features(model, pixels, batch_size=64):
    """Evaluation-mode image features for an N×C×H×W stack."""
    pixels = as_tensor(pixels)
    chunks = [model.encode_image(pixels[i:i + batch_size]) for i in range(0, len(pixels), batch_size)]
    return np.concatenate(chunks, axis=0)


def _check_labels(labels, task, n, num_classes):
    if task not in TASKS:
        raise ValidationError(f'unknown probe task {task!r}')
    labels = np.asarray(labels)
    if len(labels) != n:
        raise ShapeError(f'{n} feature rows but {len(labels)} labels')
    if task == 'single_label':
        if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
            raise ValidationError('single_label probes need one integer class per example')
        k = num_classes or int(labels.max()) + 1
        if labels.min() < 0 or labels.max() >= k:
            raise ValidationError(f'class labels must lie in [0, {k})')
        counts = np.bincount(labels, minlength=k)
        empty = np.flatnonzero(counts == 0)
        if empty.size:
            raise ValidationError(f'class {int(empty[0])} has no examples')
        return labels, k
    if labels.ndim != 2:
        raise ValidationError(f'{task} probes need an n×K label matrix')
    labels = labels.astype(np.float64)
    if task == 'multi_label' and not np.all((labels == 0) | (labels == 1)):
        raise ValidationError('multi_label targets must be 0 or 1')
    if not np.all((labels >= 0) & (labels <= 1)):
        raise ValidationError('encounter-rate targets must lie in [0, 1]')
    return labels, labels.shape[1]


def _probe_loss(tape, features, targets, task, params):
    logits = tape.add_bias(features @ tape.param(params, 'probe.weight'), tape.param(params, 'probe.bias'))
    m, k = logits.shape
    if task == 'single_label':
        positives = tape.sum(tape.mul(logits, tape.constant(targets)))
        return (tape.sum(tape.logsumexp(logits, axis=1)) - positives) / m
    # binary cross-entropy with logits: softplus(x) − y·x
    return (tape.sum(tape.softplus(logits)) - tape.sum(tape.mul(logits, tape.constant(targets)))) / (m * k)


def fit_linear_probe(features, labels, task='single_label', config=None, model=None, num_classes=None):
    """Train a linear decoder on frozen features by Adam.

    When `model` is given its parameter digest is compared before and after
    the fit; the encoder is never touched.
    """
    config = config or ProbeConfig()
    features = as_tensor(features)
    if features.ndim != 2:
        raise ShapeError(f'probe features must be n×d, got {features.shape}')
    labels, k = _check_labels(labels, task, len(features), num_classes)
    digest = model.params.digest() if model is not None else None

    mean = features.mean(axis=0) if config.standardize else np.zeros(features.shape[1])
    std = features.std(axis=0) if config.standardize else np.ones(features.shape[1])
    std = np.where(std < 1e-12, 1.0, std)
    x = (features - mean) / std
    targets = np.eye(k)[labels] if task == 'single_label' else labels

    rng = np.random.default_rng(config.seed)
    bound = np.sqrt(1.0 / x.shape[1])
    params = ParameterStore()
    params.add('probe.weight', rng.uniform(-bound, bound, size=(x.shape[1], k)))
    params.add('probe.bias', np.zeros(k))
    adam = AdamState(lr=config.lr)
    for epoch in range(config.epochs):
        order = np.random.default_rng([config.seed, epoch]).permutation(len(x))
        for start in range(0, len(x), config.batch_size):
            rows = order[start:start + config.batch_size]
            tape = Tape()
            loss = _probe_loss(tape, tape.constant(x[rows]), targets[rows], task, params)
            adam_step(params, backward(tape, loss), adam)

    if model is not None and model.params.digest() != digest:
        raise WildsatError('encoder parameters changed during probe training')
    head = ProbeHead(params['probe.weight'], params['probe.bias'], task, mean, std)
    logger.info(f"Fitted {task} probe: {len(x)} examples, {k} outputs, {config.epochs} epochs")
    return head


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

def _aligned(preds, labels):
    preds = np.asarray(preds)
    labels = np.asarray(labels)
    if preds.shape != labels.shape:
        raise ShapeError(f'predictions {preds.shape} and labels {labels.shape} differ')
    if preds.size == 0:
        raise ValidationError('no predictions to score')
    return preds, labels


def accuracy(preds, labels):
    preds, labels = _aligned(preds, labels)
    return float(np.mean(preds == labels))


def confusion_matrix(preds, labels, num_classes):
    """Counts with true classes along rows and predicted classes along columns."""
    preds, labels = _aligned(preds, labels)
    matrix = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(matrix, (labels.astype(int), preds.astype(int)), 1)
    return matrix


def _as_sets(rows):
    out = []
    for row in rows:
        row = np.asarray(row) if not isinstance(row, (set, frozenset)) else row
        if isinstance(row, np.ndarray) and row.dtype == bool:
            out.append(set(np.flatnonzero(row).tolist()))
        else:
            out.append(set(int(v) for v in row))
    return out


def micro_f1(pred_sets, true_sets):
    """2·TP / (2·TP + FP + FN) pooled over all samples; an empty denominator scores 1.0."""
    pred_sets, true_sets = _as_sets(pred_sets), _as_sets(true_sets)
    if len(pred_sets) != len(true_sets):
        raise ShapeError(f'{len(pred_sets)} prediction sets but {len(true_sets)} label sets')
    tp = sum(len(p & t) for p, t in zip(pred_sets, true_sets))
    fp = sum(len(p - t) for p, t in zip(pred_sets, true_sets))
    fn = sum(len(t - p) for p, t in zip(pred_sets, true_sets))
    denominator = 2 * tp + fp + fn
    return 1.0 if denominator == 0 else 2 * tp / denominator


def per_class_f1(preds, labels, num_classes):
    matrix = confusion_matrix(preds, labels, num_classes)
    tp = np.diag(matrix).astype(np.float64)
    fp = matrix.sum(axis=0) - tp
    fn = matrix.sum(axis=1) - tp
    denominator = 2 * tp + fp + fn
    return np.where(denominator == 0, 1.0, 2 * tp / np.where(denominator == 0, 1.0, denominator))


def mean_iou(preds, labels, num_classes):
    """Mean intersection-over-union over classes present in either map."""
    preds, labels = _aligned(preds, labels)
    scores = []
    for c in range(num_classes):
        predicted, actual = preds == c, labels == c
        union = np.count_nonzero(predicted | actual)
        if union:
            scores.append(np.count_nonzero(predicted & actual) / union)
    if not scores:
        raise ValidationError('no class occurs in predictions or labels')
    return float(np.mean(scores))


def top_k_accuracy(rates, observed):
    """|top-k(rates) ∩ observed| / k with k = |observed|; equal rates rank the lower index first."""
    rates = np.asarray(rates, dtype=np.float64)
    observed = set(int(s) for s in observed)
    if not observed:
        raise ValidationError('observed species set is empty')
    if rates.ndim != 1 or np.any((rates < 0) | (rates > 1)):
        raise ValidationError('encounter rates must be a vector in [0, 1]')
    k = len(observed)
    ranked = np.argsort(-rates, kind='stable')[:k]
    return len(observed.intersection(ranked.tolist())) / k


def mean_top_k_accuracy(rates, observed_sets):
    """Average top-k accuracy over samples; returns (mean, number of skipped empty samples)."""
    scores, skipped = [], 0
    for row, observed in zip(rates, observed_sets):
        if len(observed) == 0:
            skipped += 1
            continue
        scores.append(top_k_accuracy(row, observed))
    if not scores:
        raise ValidationError('every sample has an empty observed set')
    if skipped:
        logger.warning(f"Skipped {skipped} samples without observed species")
    return float(np.mean(scores)), skipped


def plot_confusion_matrix(matrix, path, title='Confusion matrix'):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt
    import seaborn as sns

    fig, ax = plt.subplots(figsize=(6, 5))
    sns.heatmap(matrix, annot=matrix.shape[0] <= 12, fmt='d', cmap='Blues', ax=ax)
    ax.set_xlabel('predicted')
    ax.set_ylabel('true')
    ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    logger.info(f"Confusion matrix plot written to {path}")


# ---------------------------------------------------------------------------
# Retrieval
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class RetrievalIndex:
    tile_ids: list
    embeddings: np.ndarray
    text_dim: int | None = None

    def __post_init__(self):
        self.tile_ids = [int(t) for t in self.tile_ids]
        self.embeddings = as_tensor(self.embeddings)
        if self.embeddings.ndim != 2 or len(self.tile_ids) != self.embeddings.shape[0]:
            raise ShapeError(f'{len(self.tile_ids)} tile ids for an index of shape {self.embeddings.shape}')
        norms = np.linalg.norm(self.embeddings, axis=1)
        if np.any(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE):
            raise ValidationError('index rows must be unit norm')

    @property
    def n(self):
        return len(self.tile_ids)

    @property
    def d(self):
        return self.embeddings.shape[1]


def tile_text_embeddings(model, pixels, batch_size=64):
    """Tile embeddings in the shared space through the text-aligned image head."""
    features = extract_features(model, pixels, batch_size)
    return model.project_values(features, ('heads.txt',))[0]


def build_index(model, tiles, batch_size=64):
    if not tiles:
        raise ValidationError('no tiles to index')
    pixels = np.stack([tile.pixels for tile in tiles])
    index = RetrievalIndex([tile.tile_id for tile in tiles], tile_text_embeddings(model, pixels, batch_size),
                           text_dim=model.config.text_dim)
    logger.info(f"Built retrieval index: {index.n} tiles, d={index.d}")
    return index


def query_index(index, query, k, model=None):
    """Top-k (tile_id, cosine) pairs; raw text queries go through the text projection when `model` is given."""
    if k < 1:
        raise ValidationError(f'k must be at least 1, got {k}')
    query = as_tensor(query)
    if query.ndim != 1:
        raise ShapeError(f'query must be a vector, got shape {query.shape}')
    if model is not None:
        if query.shape[0] != model.config.text_dim:
            raise ShapeError(f'query has {query.shape[0]} dims, text projection expects {model.config.text_dim}')
        query = model.project_text(query)
    elif query.shape[0] != index.d:
        raise ShapeError(f'query has {query.shape[0]} dims, index rows have {index.d}')
    query = l2_normalize_rows(query[None])[0]
    cosines = index.embeddings @ query
    order = np.lexsort((np.asarray(index.tile_ids), -cosines))[:min(k, index.n)]
    return [(index.tile_ids[i], float(cosines[i])) for i in order]


def save_index(index, path):
    """`path` holds {tile_ids, n, d, text_dim}; the sibling `.bin` holds float32 rows.

    `text_dim` is the raw text dimension the index was built for; such queries
    must go through the checkpoint's text projection.
    """
    blob = os.path.splitext(path)[0] + '.bin'
    atomic_write_bytes(blob, np.ascontiguousarray(index.embeddings, dtype='<f4').tobytes())
    header = {'tile_ids': index.tile_ids, 'n': index.n, 'd': index.d, 'text_dim': index.text_dim}
    atomic_write_text(path, json.dumps(header, indent=2, sort_keys=True) + '\n')
    logger.info(f"Index saved to {path}")


def load_index(path):
    try:
        with open(path, encoding='utf-8') as handle:
            header = json.load(handle)
        with open(os.path.splitext(path)[0] + '.bin', 'rb') as handle:
            blob = handle.read()
    except (OSError, json.JSONDecodeError) as exc:
        raise ValidationError(f'cannot read index {path}: {exc}') from None
    n, d = int(header['n']), int(header['d'])
    if len(header['tile_ids']) != n or len(blob) != n * d * 4:
        raise ValidationError(f'index {path} does not hold {n}×{d} float32 rows')
    rows = np.frombuffer(blob, dtype='<f4').astype(np.float64).reshape(n, d)
    return RetrievalIndex(header['tile_ids'], l2_normalize_rows(rows), text_dim=header.get('text_dim'))


# ---------------------------------------------------------------------------
# Zero-shot classification
# ---------------------------------------------------------------------------

def zero_shot_classify(model, pixels, class_embeddings):
    """Index of the projected class text embedding closest to each tile; ties pick the lower class."""
    pixels = as_tensor(pixels)
    single = pixels.ndim == 3
    classes = model.project_text(np.atleast_2d(as_tensor(class_embeddings)))
    tiles = tile_text_embeddings(model, pixels[None] if single else pixels)
    predictions = np.argmax(tiles @ classes.T, axis=1)
    return int(predictions[0]) if single else predictions


def classification_report(preds, labels, num_classes):
    return {
        'accuracy': accuracy(preds, labels),
        'per_class_f1': per_class_f1(preds, labels, num_classes).tolist(),
        'confusion_matrix': confusion_matrix(preds, labels, num_classes).tolist(),
    }
