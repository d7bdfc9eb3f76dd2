"""
Numerics
========

Dense float64 tensors (numpy arrays), a recorded computation tape with
reverse-mode differentiation over a fixed set of operations, the Adam
optimizer and a central finite-difference gradient checker.

A tape is built eagerly: every op computes its value when it is recorded.
`forward_eval` replays the recorded nodes in order, optionally with new
values for named leaves, and `backward` walks them in reverse.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from exceptions import (
    DegenerateEmbeddingError,
    ShapeError,
    UnsupportedOpError,
    ValidationError,
)

NORM_EPS = 1e-12
SCALE_SHIFT_EPS = 1e-5
RUNNING_MOMENTUM = 0.1

LEAF_OPS = ('input', 'param', 'constant')


def as_tensor(value):
    return np.asarray(value, dtype=np.float64)


def l2_normalize_rows(matrix):
    """Scale every row of an n×d matrix to unit Euclidean norm."""
    m = as_tensor(matrix)
    if m.ndim != 2:
        raise ShapeError(f'l2_normalize_rows expects a matrix, got shape {m.shape}')
    norms = np.sqrt(np.sum(m * m, axis=1))
    bad = np.flatnonzero(~(norms > NORM_EPS))
    if bad.size:
        raise DegenerateEmbeddingError(int(bad[0]))
    return m / norms[:, None]


# ---------------------------------------------------------------------------
# Op kernels: forward(values, attrs) -> array, backward(g, values, out, attrs)
# -> list of input gradients (None where an input needs none)
# ---------------------------------------------------------------------------

def _require(condition, message):
    if not condition:
        raise ShapeError(message)


def _matmul_fwd(values, attrs):
    a, b = values
    _require(a.ndim == 2 and b.ndim == 2, f'matmul expects matrices, got {a.shape} and {b.shape}')
    _require(a.shape[1] == b.shape[0], f'matmul inner dims differ: {a.shape} @ {b.shape}')
    return a @ b


def _matmul_bwd(g, values, out, attrs):
    a, b = values
    return [g @ b.T, a.T @ g]


def _add_fwd(values, attrs):
    a, b = values
    _require(a.shape == b.shape, f'add expects equal shapes, got {a.shape} and {b.shape}')
    return a + b


def _add_bwd(g, values, out, attrs):
    return [g, g]


def _mul_fwd(values, attrs):
    a, b = values
    _require(a.shape == b.shape, f'mul expects equal shapes, got {a.shape} and {b.shape}')
    return a * b


def _mul_bwd(g, values, out, attrs):
    a, b = values
    return [g * b, g * a]


def _add_bias_fwd(values, attrs):
    x, b = values
    _require(b.ndim == 1 and x.ndim >= 1 and x.shape[-1] == b.shape[0],
             f'bias of shape {b.shape} does not match input {x.shape}')
    return x + b


def _add_bias_bwd(g, values, out, attrs):
    return [g, g.reshape(-1, g.shape[-1]).sum(axis=0)]


def _relu_fwd(values, attrs):
    return np.maximum(values[0], 0.0)


def _relu_bwd(g, values, out, attrs):
    return [g * (values[0] > 0.0)]


def _softplus_fwd(values, attrs):
    return np.logaddexp(0.0, values[0])


def _softplus_bwd(g, values, out, attrs):
    return [g * 0.5 * (1.0 + np.tanh(0.5 * values[0]))]


def _conv_windows(x, kernel_shape, stride, padding):
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    windows = sliding_window_view(xp, kernel_shape, axis=(2, 3))[:, :, ::stride, ::stride]
    return xp, windows


def _conv2d_fwd(values, attrs):
    x, k = values
    stride, padding = attrs['stride'], attrs['padding']
    _require(x.ndim == 4 and k.ndim == 4, f'conv2d expects NCHW input and FCKK kernel, got {x.shape}, {k.shape}')
    _require(x.shape[1] == k.shape[1], f'conv2d channel mismatch: input {x.shape[1]}, kernel {k.shape[1]}')
    _require(x.shape[2] + 2 * padding >= k.shape[2] and x.shape[3] + 2 * padding >= k.shape[3],
             f'conv2d kernel {k.shape[2:]} larger than padded input {x.shape[2:]}')
    _, windows = _conv_windows(x, k.shape[2:], stride, padding)
    out = np.tensordot(windows, k, axes=([1, 4, 5], [1, 2, 3]))
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def _conv2d_bwd(g, values, out, attrs):
    x, k = values
    stride, padding = attrs['stride'], attrs['padding']
    xp, windows = _conv_windows(x, k.shape[2:], stride, padding)
    grad_k = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
    grad_xp = np.zeros_like(xp)
    ho, wo = g.shape[2], g.shape[3]
    for i in range(k.shape[2]):
        for j in range(k.shape[3]):
            contrib = np.tensordot(g, k[:, :, i, j], axes=([1], [0])).transpose(0, 3, 1, 2)
            grad_xp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += contrib
    h, w = x.shape[2], x.shape[3]
    return [grad_xp[:, :, padding:padding + h, padding:padding + w], grad_k]


def _global_avg_pool_fwd(values, attrs):
    x = values[0]
    _require(x.ndim == 4, f'global average pool expects NCHW input, got {x.shape}')
    return x.mean(axis=(2, 3))


def _global_avg_pool_bwd(g, values, out, attrs):
    x = values[0]
    scale = 1.0 / (x.shape[2] * x.shape[3])
    return [np.broadcast_to(g[:, :, None, None] * scale, x.shape).copy()]


def _norm_layout(x):
    if x.ndim == 2:
        return (0,), (1, x.shape[1])
    return (0, 2, 3), (1, x.shape[1], 1, 1)


def _norm_stats(x, attrs):
    axes, shape = _norm_layout(x)
    if attrs.get('running_mean') is None:
        return x.mean(axis=axes, keepdims=True), x.var(axis=axes, keepdims=True)
    return attrs['running_mean'].reshape(shape), attrs['running_var'].reshape(shape)


def _scale_shift_norm_fwd(values, attrs):
    x, gamma, beta = values
    _require(x.ndim in (2, 4), f'scale-shift norm expects (N,C) or (N,C,H,W), got {x.shape}')
    _require(gamma.shape == (x.shape[1],) and beta.shape == (x.shape[1],),
             f'scale/shift of shape {gamma.shape}/{beta.shape} do not match {x.shape[1]} channels')
    _, shape = _norm_layout(x)
    mean, var = _norm_stats(x, attrs)
    x_hat = (x - mean) / np.sqrt(var + attrs['eps'])
    return gamma.reshape(shape) * x_hat + beta.reshape(shape)


def _scale_shift_norm_bwd(g, values, out, attrs):
    x, gamma, beta = values
    axes, shape = _norm_layout(x)
    mean, var = _norm_stats(x, attrs)
    inv_std = 1.0 / np.sqrt(var + attrs['eps'])
    x_hat = (x - mean) * inv_std
    grad_gamma = (g * x_hat).sum(axis=axes)
    grad_beta = g.sum(axis=axes)
    grad_x_hat = g * gamma.reshape(shape)
    if attrs.get('running_mean') is None:
        m = x.size // x.shape[1]
        grad_x = inv_std / m * (
            m * grad_x_hat
            - grad_x_hat.sum(axis=axes, keepdims=True)
            - x_hat * (grad_x_hat * x_hat).sum(axis=axes, keepdims=True)
        )
    else:
        grad_x = grad_x_hat * inv_std
    return [grad_x, grad_gamma, grad_beta]


def _l2_normalize_rows_fwd(values, attrs):
    return l2_normalize_rows(values[0])


def _l2_normalize_rows_bwd(g, values, out, attrs):
    x = values[0]
    norms = np.sqrt(np.sum(x * x, axis=1, keepdims=True))
    return [(g - out * np.sum(g * out, axis=1, keepdims=True)) / norms]


def _logsumexp_fwd(values, attrs):
    x = values[0]
    axis = attrs['axis']
    _require(x.ndim == 2, f'logsumexp expects a matrix, got {x.shape}')
    peak = x.max(axis=axis, keepdims=True)
    return np.squeeze(peak + np.log(np.sum(np.exp(x - peak), axis=axis, keepdims=True)), axis=axis)


def _logsumexp_bwd(g, values, out, attrs):
    x = values[0]
    axis = attrs['axis']
    return [np.expand_dims(g, axis) * np.exp(x - np.expand_dims(out, axis))]


def _sum_fwd(values, attrs):
    return np.asarray(values[0].sum())


def _sum_bwd(g, values, out, attrs):
    return [np.full(values[0].shape, float(g))]


def _mean_fwd(values, attrs):
    return np.asarray(values[0].mean())


def _mean_bwd(g, values, out, attrs):
    x = values[0]
    return [np.full(x.shape, float(g) / x.size)]


def _concat_fwd(values, attrs):
    axis = attrs['axis']
    ranks = {v.ndim for v in values}
    _require(len(ranks) == 1, 'concat inputs differ in rank')
    for v in values[1:]:
        other = [d for i, d in enumerate(v.shape) if i != axis % v.ndim]
        first = [d for i, d in enumerate(values[0].shape) if i != axis % v.ndim]
        _require(other == first, f'concat shapes {values[0].shape} and {v.shape} differ off axis {axis}')
    return np.concatenate(values, axis=axis)


def _concat_bwd(g, values, out, attrs):
    axis = attrs['axis']
    bounds = np.cumsum([v.shape[axis] for v in values])[:-1]
    return list(np.split(g, bounds, axis=axis))


def _scale_fwd(values, attrs):
    return values[0] * attrs['factor']


def _scale_bwd(g, values, out, attrs):
    return [g * attrs['factor']]


def _transpose_fwd(values, attrs):
    x = values[0]
    _require(x.ndim == 2, f'transpose expects a matrix, got {x.shape}')
    return np.ascontiguousarray(x.T)


def _transpose_bwd(g, values, out, attrs):
    return [np.ascontiguousarray(g.T)]


def _diagonal_fwd(values, attrs):
    x = values[0]
    _require(x.ndim == 2 and x.shape[0] == x.shape[1], f'diagonal expects a square matrix, got {x.shape}')
    return np.diagonal(x).copy()


def _diagonal_bwd(g, values, out, attrs):
    return [np.diag(g)]


_FORWARD = {
    'matmul': _matmul_fwd,
    'add': _add_fwd,
    'mul': _mul_fwd,
    'add_bias': _add_bias_fwd,
    'relu': _relu_fwd,
    'softplus': _softplus_fwd,
    'conv2d': _conv2d_fwd,
    'global_avg_pool': _global_avg_pool_fwd,
    'scale_shift_norm': _scale_shift_norm_fwd,
    'l2_normalize_rows': _l2_normalize_rows_fwd,
    'logsumexp': _logsumexp_fwd,
    'sum': _sum_fwd,
    'mean': _mean_fwd,
    'concat': _concat_fwd,
    'scale': _scale_fwd,
    'transpose': _transpose_fwd,
    'diagonal': _diagonal_fwd,
}

_BACKWARD = {
    'matmul': _matmul_bwd,
    'add': _add_bwd,
    'mul': _mul_bwd,
    'add_bias': _add_bias_bwd,
    'relu': _relu_bwd,
    'softplus': _softplus_bwd,
    'conv2d': _conv2d_bwd,
    'global_avg_pool': _global_avg_pool_bwd,
    'scale_shift_norm': _scale_shift_norm_bwd,
    'l2_normalize_rows': _l2_normalize_rows_bwd,
    'logsumexp': _logsumexp_bwd,
    'sum': _sum_bwd,
    'mean': _mean_bwd,
    'concat': _concat_bwd,
    'scale': _scale_bwd,
    'transpose': _transpose_bwd,
    'diagonal': _diagonal_bwd,
}

SUPPORTED_OPS = frozenset(_FORWARD)


def _apply(op, index, values, attrs):
    kernel = _FORWARD.get(op)
    if kernel is None:
        raise UnsupportedOpError(f'unsupported op kind {op!r} at node {index}')
    try:
        return kernel(values, attrs)
    except DegenerateEmbeddingError:
        raise
    except ShapeError as exc:
        raise ShapeError(str(exc), node=index) from None
    except ValueError as exc:
        raise ShapeError(f'{op}: {exc}', node=index) from None


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class Node:
    op: str
    inputs: tuple
    attrs: dict
    value: np.ndarray
    name: str | None = None
    trainable: bool = False


class Var:
    """Handle on a tape node with arithmetic sugar."""

    __slots__ = ('tape', 'id')

    def __init__(self, tape, node_id):
        self.tape = tape
        self.id = node_id

    @property
    def value(self):
        return self.tape.nodes[self.id].value

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return self.tape.transpose(self)

    def _lift(self, other):
        return other if isinstance(other, Var) else self.tape.constant(other)

    def __matmul__(self, other):
        return self.tape.matmul(self, self._lift(other))

    def __add__(self, other):
        return self.tape.add(self, self._lift(other))

    __radd__ = __add__

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return self.tape.scale(self, float(other))
        return self.tape.mul(self, self._lift(other))

    __rmul__ = __mul__

    def __neg__(self):
        return self.tape.scale(self, -1.0)

    def __sub__(self, other):
        return self + (-self._lift(other))

    def __truediv__(self, other):
        return self.tape.scale(self, 1.0 / float(other))


class Tape:
    """Ordered record of nodes; inputs always precede their consumers."""

    def __init__(self):
        self.nodes = []
        self.outputs = {}
        self._leaves = {}

    def __len__(self):
        return len(self.nodes)

    def _append(self, node):
        self.nodes.append(node)
        return Var(self, len(self.nodes) - 1)

    def _leaf(self, op, name, value, trainable=False):
        if name in self._leaves:
            raise ValidationError(f'duplicate leaf name {name!r}')
        var = self._append(Node(op, (), {}, as_tensor(value), name=name, trainable=trainable))
        self._leaves[name] = var.id
        return var

    def input(self, name, value):
        return self._leaf('input', name, value)

    def constant(self, value):
        return self._append(Node('constant', (), {}, as_tensor(value)))

    def param(self, store, name):
        """Leaf for a stored parameter; repeated requests share one node."""
        if name in self._leaves:
            return Var(self, self._leaves[name])
        entry = store.entry(name)
        return self._leaf('param', name, entry.value, trainable=entry.trainable)

    def leaf(self, name):
        return Var(self, self._leaves[name])

    def leaf_names(self):
        return list(self._leaves)

    def record(self, op, inputs, **attrs):
        ids = tuple(v.id for v in inputs)
        value = _apply(op, len(self.nodes), [self.nodes[i].value for i in ids], attrs)
        return self._append(Node(op, ids, attrs, value))

    def output(self, name, var):
        self.outputs[name] = var.id
        return var

    def value(self, var):
        return self.nodes[var.id].value

    # op shorthands

    def matmul(self, a, b):
        return self.record('matmul', (a, b))

    def add(self, a, b):
        return self.record('add', (a, b))

    def mul(self, a, b):
        return self.record('mul', (a, b))

    def add_bias(self, x, b):
        return self.record('add_bias', (x, b))

    def relu(self, x):
        return self.record('relu', (x,))

    def softplus(self, x):
        return self.record('softplus', (x,))

    def conv2d(self, x, kernel, stride=1, padding=0):
        return self.record('conv2d', (x, kernel), stride=int(stride), padding=int(padding))

    def global_avg_pool(self, x):
        return self.record('global_avg_pool', (x,))

    def scale_shift_norm(self, x, gamma, beta, running_mean=None, running_var=None, eps=SCALE_SHIFT_EPS):
        if running_mean is not None:
            running_mean = as_tensor(running_mean).copy()
            running_var = as_tensor(running_var).copy()
        return self.record('scale_shift_norm', (x, gamma, beta),
                           running_mean=running_mean, running_var=running_var, eps=eps)

    def l2_normalize_rows(self, x):
        return self.record('l2_normalize_rows', (x,))

    def logsumexp(self, x, axis=1):
        return self.record('logsumexp', (x,), axis=axis)

    def sum(self, x):
        return self.record('sum', (x,))

    def mean(self, x):
        return self.record('mean', (x,))

    def concat(self, xs, axis=0):
        return self.record('concat', tuple(xs), axis=axis)

    def scale(self, x, factor):
        return self.record('scale', (x,), factor=float(factor))

    def transpose(self, x):
        return self.record('transpose', (x,))

    def diagonal(self, x):
        return self.record('diagonal', (x,))


def _output_id(tape, output):
    if output is not None:
        return tape.outputs[output] if isinstance(output, str) else output.id
    if len(tape.outputs) == 1:
        return next(iter(tape.outputs.values()))
    if not tape.outputs and tape.nodes:
        return len(tape.nodes) - 1
    raise ValidationError('tape has several outputs; name the one to differentiate')


def forward_eval(tape, inputs=None):
    """Replay the tape; named leaves take new values from `inputs`."""
    inputs = inputs or {}
    unknown = set(inputs) - set(tape.leaf_names())
    if unknown:
        raise ValidationError(f'unknown tape inputs: {sorted(unknown)}')
    for index, node in enumerate(tape.nodes):
        if node.op in LEAF_OPS:
            if node.name in inputs:
                value = as_tensor(inputs[node.name])
                if value.shape != node.value.shape:
                    raise ShapeError(f'input {node.name!r} has shape {value.shape}, expected {node.value.shape}',
                                     node=index)
                node.value = value
            continue
        node.value = _apply(node.op, index, [tape.nodes[i].value for i in node.inputs], node.attrs)
    if not tape.outputs:
        return {'output': tape.nodes[-1].value} if tape.nodes else {}
    return {name: tape.nodes[i].value for name, i in tape.outputs.items()}


def backward(tape, output=None, seed=None):
    """Gradients of a scalar output with respect to every trainable param leaf."""
    out_id = _output_id(tape, output)
    out_value = tape.nodes[out_id].value
    if out_value.size != 1:
        raise ShapeError(f'backward needs a scalar output, got shape {out_value.shape}', node=out_id)
    grads = [None] * len(tape.nodes)
    grads[out_id] = np.ones_like(out_value) if seed is None else as_tensor(seed).reshape(out_value.shape)
    for index in range(out_id, -1, -1):
        g = grads[index]
        node = tape.nodes[index]
        if g is None or node.op in LEAF_OPS:
            continue
        values = [tape.nodes[i].value for i in node.inputs]
        for source, grad in zip(node.inputs, _BACKWARD[node.op](g, values, node.value, node.attrs)):
            if grad is None:
                continue
            grads[source] = grad if grads[source] is None else grads[source] + grad
    result = {}
    for index, node in enumerate(tape.nodes):
        if node.op == 'param' and node.trainable:
            g = grads[index]
            result[node.name] = np.zeros_like(node.value) if g is None else g
    return result


# ---------------------------------------------------------------------------
# Parameters and optimizer
# ---------------------------------------------------------------------------

@dataclass
class Parameter:
    value: np.ndarray
    trainable: bool = True


class ParameterStore:
    """Named parameters (θ) plus non-trainable buffers such as running statistics."""

    def __init__(self):
        self._entries = {}
        self._buffers = {}

    def __contains__(self, name):
        return name in self._entries

    def __getitem__(self, name):
        return self.entry(name).value

    def __iter__(self):
        return iter(self._entries)

    def __len__(self):
        return len(self._entries)

    def add(self, name, value, trainable=True):
        if name in self._entries:
            raise ValidationError(f'parameter {name!r} already exists')
        self._entries[name] = Parameter(as_tensor(value).copy(), bool(trainable))

    def entry(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise ValidationError(f'unknown parameter {name!r}') from None

    def names(self):
        return list(self._entries)

    def trainable_names(self):
        return [name for name, entry in self._entries.items() if entry.trainable]

    def set_value(self, name, value):
        entry = self.entry(name)
        value = as_tensor(value)
        if value.shape != entry.value.shape:
            raise ShapeError(f'parameter {name!r} has shape {entry.value.shape}, got {value.shape}')
        entry.value = value

    def set_trainable(self, names):
        names = set(names)
        unknown = names - set(self._entries)
        if unknown:
            raise ValidationError(f'unknown parameters in mask: {sorted(unknown)}')
        for name, entry in self._entries.items():
            entry.trainable = name in names

    def add_buffer(self, name, value):
        if name in self._buffers:
            raise ValidationError(f'buffer {name!r} already exists')
        self._buffers[name] = as_tensor(value).copy()

    def buffer(self, name):
        return self._buffers[name]

    def set_buffer(self, name, value):
        value = as_tensor(value)
        if value.shape != self._buffers[name].shape:
            raise ShapeError(f'buffer {name!r} has shape {self._buffers[name].shape}, got {value.shape}')
        self._buffers[name] = value

    def buffer_names(self):
        return list(self._buffers)

    def copy(self):
        other = ParameterStore()
        for name, entry in self._entries.items():
            other.add(name, entry.value, entry.trainable)
        for name, value in self._buffers.items():
            other.add_buffer(name, value)
        return other

    def digest(self, prefix=''):
        """sha256 over names and little-endian float64 bytes of matching parameters."""
        sha = hashlib.sha256()
        for name, entry in self._entries.items():
            if name.startswith(prefix):
                sha.update(name.encode('utf-8'))
                sha.update(np.ascontiguousarray(entry.value, dtype='<f8').tobytes())
        return sha.hexdigest()


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update of the parameters named in `grads`, in place."""
    for name, grad in grads.items():
        entry = params.entry(name)
        if not entry.trainable:
            raise ValidationError(f'parameter {name!r} is frozen')
        if np.shape(grad) != entry.value.shape:
            raise ShapeError(f'gradient for {name!r} has shape {np.shape(grad)}, expected {entry.value.shape}')
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t
    for name, grad in grads.items():
        grad = as_tensor(grad)
        value = params[name]
        m = state.beta1 * state.m.get(name, np.zeros_like(value)) + (1.0 - state.beta1) * grad
        v = state.beta2 * state.v.get(name, np.zeros_like(value)) + (1.0 - state.beta2) * grad * grad
        state.m[name] = m
        state.v[name] = v
        m_hat = m / correction1
        v_hat = v / correction2
        params.set_value(name, value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps))
    return params, state


# ---------------------------------------------------------------------------
# Gradient check
# ---------------------------------------------------------------------------

GRAD_FLOOR = 1e-7
GRAD_FLOOR_ATOL = 1e-9


@dataclass
class GradCheckReport:
    max_rel_error: float
    passed: bool
    checked: int
    worst: tuple | None = None
    failures: list = field(default_factory=list)


def relative_error(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def finite_diff_check(tape, params, tolerance=1e-4, h=1e-5, output=None, grads=None,
                      max_coords=None, seed=0, retry_kinks=True):
    """Compare analytic gradients with central differences on the replayed tape.

    `grads` replaces the analytic gradients (useful as a negative control).
    `max_coords` samples that many coordinates per parameter.
    """
    out_id = _output_id(tape, output)
    analytic = backward(tape, output) if grads is None else grads
    base = {name: tape.nodes[tape._leaves[name]].value.copy() for name in analytic if name in tape._leaves}
    rng = np.random.default_rng(seed)

    def loss_at(name, coord, step):
        perturbed = base[name].copy()
        perturbed.flat[coord] += step
        forward_eval(tape, {name: perturbed})
        plus = float(tape.nodes[out_id].value)
        perturbed.flat[coord] -= 2 * step
        forward_eval(tape, {name: perturbed})
        minus = float(tape.nodes[out_id].value)
        # every other leaf must see this one at its recorded value
        forward_eval(tape, {name: base[name]})
        return (plus - minus) / (2 * step)

    max_err = 0.0
    worst = None
    failures = []
    checked = 0
    try:
        for name in analytic:
            if name not in params or name not in base:
                continue
            size = base[name].size
            coords = range(size)
            if max_coords is not None and size > max_coords:
                coords = np.sort(rng.choice(size, max_coords, replace=False))
            for coord in coords:
                a = float(np.asarray(analytic[name]).flat[coord])
                numeric = loss_at(name, coord, h)
                err = relative_error(a, numeric)
                if err > tolerance and retry_kinks:
                    for step in (h / 10, h / 100):
                        err = min(err, relative_error(a, loss_at(name, coord, step)))
                checked += 1
                if max(abs(a), abs(numeric)) < GRAD_FLOOR:
                    if abs(a - numeric) > GRAD_FLOOR_ATOL:
                        failures.append((name, int(coord), err))
                    continue
                if err > max_err:
                    max_err, worst = err, (name, int(coord))
                if err > tolerance:
                    failures.append((name, int(coord), err))
    finally:
        forward_eval(tape, base)
    return GradCheckReport(max_rel_error=max_err, passed=not failures, checked=checked,
                           worst=worst, failures=failures)
