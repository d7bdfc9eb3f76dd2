"""
Contrastive losses
==================

InfoNCE for one anchor, the symmetric in-batch loss between two aligned
embedding batches, and the three-term objective that ties the image encoder
to its augmented view, to text and to location.

The numeric helpers evaluate the same graph the training loop records, so a
value computed here and a value read off a training tape agree bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from exceptions import ConfigError, ShapeError, ValidationError
from numerics import Tape, as_tensor

MODALITIES = ('image_t1', 'image_t2', 'txt_head', 'loc_head', 'e_txt', 'e_loc')
UNIT_NORM_TOLERANCE = 1e-9
TERMS = ('image', 'text', 'location')


@dataclass(eq=False)
class EmbeddingBatch:
    matrix: np.ndarray
    modality: str

    def __post_init__(self):
        self.matrix = as_tensor(self.matrix)
        if self.modality not in MODALITIES:
            raise ValidationError(f'unknown modality {self.modality!r}')
        if self.matrix.ndim != 2 or self.matrix.shape[0] < 1:
            raise ShapeError(f'{self.modality} batch must be a non-empty n×d matrix, got {self.matrix.shape}')
        norms = np.linalg.norm(self.matrix, axis=1)
        off = np.flatnonzero(np.abs(norms - 1.0) > UNIT_NORM_TOLERANCE)
        if off.size:
            raise ValidationError(f'{self.modality} row {int(off[0])} is not unit norm ({norms[off[0]]:.12f})')

    @property
    def n(self):
        return self.matrix.shape[0]


@dataclass
class LossConfig:
    temperature: float = 0.07
    image_weight: float = 1.0
    text_weight: float = 1.0
    location_weight: float = 1.0

    def validate(self):
        if not self.temperature > 0:
            raise ConfigError(f'temperature must be positive, got {self.temperature}')
        weights = self.weights()
        if any(w < 0 for w in weights.values()):
            raise ConfigError('loss weights must be non-negative')
        if not any(weights.values()):
            raise ConfigError('at least one loss term must stay enabled')

    def weights(self):
        return {'image': self.image_weight, 'text': self.text_weight, 'location': self.location_weight}


@dataclass
class LossBreakdown:
    total: float
    image: float
    text: float
    location: float

    def as_dict(self):
        return {'total': self.total, 'image': self.image, 'text': self.text, 'location': self.location}


def _matrix(batch):
    return batch.matrix if isinstance(batch, EmbeddingBatch) else as_tensor(batch)


def _check_temperature(temperature):
    if not temperature > 0:
        raise ValidationError(f'temperature must be positive, got {temperature}')


def info_nce(z, embeddings, index, temperature=0.07):
    """−log softmax_j(z·e_j / τ) at j = index."""
    _check_temperature(temperature)
    E = _matrix(embeddings)
    z = as_tensor(z)
    if E.ndim != 2 or z.shape != (E.shape[1],):
        raise ShapeError(f'anchor of shape {z.shape} does not match batch {E.shape}')
    if not 0 <= index < E.shape[0]:
        raise ValidationError(f'index {index} outside batch of {E.shape[0]}')
    logits = E @ z / temperature
    peak = logits.max()
    return float(peak + np.log(np.sum(np.exp(logits - peak))) - logits[index])


def pairwise_loss_node(tape, Z, E, temperature):
    """Symmetric batch loss on the tape: (Σ lse(S) + Σ lse(Sᵀ) − 2 tr S) / 2n with S = Z·Eᵀ/τ."""
    _check_temperature(temperature)
    if Z.shape != E.shape:
        raise ShapeError(f'paired batches differ in shape: {Z.shape} vs {E.shape}')
    n = Z.shape[0]
    logits = tape.scale(Z @ E.T, 1.0 / temperature)
    rows = tape.sum(tape.logsumexp(logits, axis=1))
    cols = tape.sum(tape.logsumexp(logits, axis=0))
    positives = tape.sum(tape.diagonal(logits))
    return tape.scale(rows + cols - positives * 2.0, 1.0 / (2 * n))


def wildsat_loss_node(tape, pairs, config):
    """Weighted sum of the enabled pairwise terms.

    `pairs` maps a term name ('image', 'text', 'location') to a (Z, E) pair of
    tape nodes, or to None when the term is disabled. Returns the total node
    and the per-term nodes.
    """
    config.validate()
    weights = config.weights()
    terms = {}
    total = None
    for name in TERMS:
        pair = pairs.get(name)
        if pair is None or weights[name] == 0:
            continue
        term = pairwise_loss_node(tape, pair[0], pair[1], config.temperature)
        terms[name] = term
        weighted = term if weights[name] == 1.0 else term * float(weights[name])
        total = weighted if total is None else total + weighted
    if total is None:
        raise ConfigError('every loss term is disabled')
    n = {pair[0].shape[0] for pair in pairs.values() if pair is not None}
    if len(n) != 1:
        raise ShapeError(f'loss terms disagree on batch size: {sorted(n)}')
    return total, terms


def pairwise_loss(Z, E, temperature=0.07):
    tape = Tape()
    return float(pairwise_loss_node(tape, tape.constant(_matrix(Z)), tape.constant(_matrix(E)), temperature).value)


def wildsat_loss(image_t1, image_t2, txt_head=None, e_txt=None, loc_head=None, e_loc=None, config=None):
    """Three-term objective over already-projected embedding batches."""
    config = config or LossConfig()
    tape = Tape()

    def pair(a, b):
        if a is None or b is None:
            return None
        return tape.constant(_matrix(a)), tape.constant(_matrix(b))

    total, terms = wildsat_loss_node(tape, {
        'image': pair(image_t1, image_t2),
        'text': pair(txt_head, e_txt),
        'location': pair(loc_head, e_loc),
    }, config)
    values = {name: float(node.value) for name, node in terms.items()}
    return LossBreakdown(total=float(total.value), image=values.get('image', 0.0),
                         text=values.get('text', 0.0), location=values.get('location', 0.0))
