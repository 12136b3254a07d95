"""Frozen-base classifier with a federated trainable head.

The base is a fixed random projection standing in for a pre-trained
feature extractor. Only the head (two dense layers) is trained and
exchanged between clients and server.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass

import numpy as np

from fedmesh import kernels

HEAD_INIT_RANGE = 0.1


class ShapeError(ValueError):
    pass


class LayoutError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    def __init__(self, block, what="gradient"):
        super().__init__(f"non-finite {what} in parameter block {block!r}")
        self.block = block


class DecodeError(ValueError):
    pass


def _layout_size(layout):
    return sum(math.prod(shape) for _, shape in layout)


class ParamVector:
    """Flat, ordered float32 parameters plus their ``(name, shape)`` layout."""

    __slots__ = ("values", "layout")

    def __init__(self, values, layout, dtype=np.float32):
        self.layout = tuple((str(name), tuple(int(d) for d in shape)) for name, shape in layout)
        self.values = np.ascontiguousarray(values, dtype=dtype).reshape(-1)
        expected = _layout_size(self.layout)
        if self.values.size != expected:
            raise LayoutError(
                f"layout declares {expected} elements, got {self.values.size} values"
            )

    @classmethod
    def from_blocks(cls, blocks, dtype=np.float32):
        layout = [(name, np.shape(arr)) for name, arr in blocks.items()]
        flat = [np.asarray(arr, dtype=np.float64).reshape(-1) for arr in blocks.values()]
        values = np.concatenate(flat) if flat else np.zeros(0)
        return cls(values, layout, dtype=dtype)

    def __len__(self):
        return self.values.size

    def blocks(self):
        """Name -> reshaped view into ``values``."""
        out, offset = {}, 0
        for name, shape in self.layout:
            size = math.prod(shape)
            out[name] = self.values[offset:offset + size].reshape(shape)
            offset += size
        return out

    def copy(self):
        return ParamVector(self.values.copy(), self.layout, dtype=self.values.dtype)

    def is_finite(self):
        return bool(np.all(np.isfinite(self.values)))

    def same_layout(self, other):
        return self.layout == other.layout

    def __eq__(self, other):
        # bit-exact, so -0.0 != 0.0 and equal NaN payloads compare equal
        if not isinstance(other, ParamVector):
            return NotImplemented
        return (
            self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and self.values.tobytes() == other.values.tobytes()
        )

    def __hash__(self):
        return hash((self.layout, self.values.tobytes()))

    def __repr__(self):
        shapes = ", ".join(f"{n}{list(s)}" for n, s in self.layout)
        return f"ParamVector({len(self)} values: {shapes})"


def head_layout(feature_dim, hidden_dim):
    return (
        ("w1", (feature_dim, hidden_dim)),
        ("b1", (hidden_dim,)),
        ("w2", (hidden_dim, 2)),
        ("b2", (2,)),
    )


def head_param_count(feature_dim, hidden_dim):
    return feature_dim * hidden_dim + hidden_dim + hidden_dim * 2 + 2


@dataclass(frozen=True)
class ModelDims:
    input_dim: int = 196
    feature_dim: int = 32
    hidden_dim: int = 16

    def __post_init__(self):
        for name in ("input_dim", "feature_dim", "hidden_dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")


def _base_rng(seed):
    return np.random.default_rng([int(seed), 0])


def _head_rng(seed):
    return np.random.default_rng([int(seed), 1])


def make_base(dims, seed):
    """Seeded frozen projection, uniform in +-1/sqrt(input_dim), read-only."""
    bound = 1.0 / math.sqrt(dims.input_dim)
    base = _base_rng(seed).uniform(-bound, bound, size=(dims.input_dim, dims.feature_dim))
    base.flags.writeable = False
    return base


def init_head(dims, seed):
    rng = _head_rng(seed)
    F, H = dims.feature_dim, dims.hidden_dim
    blocks = {
        "w1": rng.uniform(-HEAD_INIT_RANGE, HEAD_INIT_RANGE, size=(F, H)),
        "b1": np.zeros(H),
        "w2": rng.uniform(-HEAD_INIT_RANGE, HEAD_INIT_RANGE, size=(H, 2)),
        "b2": np.zeros(2),
    }
    return ParamVector.from_blocks(blocks)


@dataclass
class FrozenBaseModel:
    dims: ModelDims
    base_weights: np.ndarray
    head: ParamVector
    seed: int = 0

    @classmethod
    def create(cls, dims=None, seed=0, head=None):
        dims = dims or ModelDims()
        model = cls(dims, make_base(dims, seed), init_head(dims, seed), int(seed))
        if head is not None:
            model = model.with_head(head)
        return model

    def with_head(self, head):
        if head.layout != head_layout(self.dims.feature_dim, self.dims.hidden_dim):
            raise LayoutError(f"head layout {head.layout} does not fit {self.dims}")
        return FrozenBaseModel(self.dims, self.base_weights, head, self.seed)

    def check_batch(self, batch):
        batch = np.asarray(batch, dtype=np.float64)
        if batch.ndim == 1:
            batch = batch.reshape(1, -1)
        if batch.ndim != 2 or batch.shape[1] != self.dims.input_dim:
            got = batch.shape[-1] if batch.ndim else 0
            raise ShapeError(
                f"batch has {got} columns but the model expects input_dim={self.dims.input_dim}"
            )
        if not np.all(np.isfinite(batch)):
            raise ValueError("batch contains non-finite values")
        return batch

    def features(self, batch):
        return self.check_batch(batch) @ self.base_weights


def _flat64(head):
    return head.values.astype(np.float64)


def forward(model, batch):
    """Class probabilities ``[n, 2]``: projection, ReLU hidden layer, softmax."""
    feats = model.features(batch)
    return kernels.forward(feats, _flat64(model.head), model.dims.feature_dim, model.dims.hidden_dim)


def loss(probabilities, labels):
    """Mean negative log-probability of the true class, clamped at 1e-12."""
    probs = np.asarray(probabilities, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("loss needs a non-empty [n, 2] probability matrix")
    if probs.shape[0] != labels.size:
        raise ShapeError(f"{probs.shape[0]} probability rows but {labels.size} labels")
    p_true = probs[np.arange(labels.size), labels]
    return float(np.mean(-np.log(np.maximum(p_true, kernels._pykernels.PROB_FLOOR))))


def _check_grad(grad, layout):
    offset = 0
    for name, shape in layout:
        size = math.prod(shape)
        if not np.all(np.isfinite(grad[offset:offset + size])):
            raise NonFiniteError(name)
        offset += size


def loss_and_gradient(model, batch, labels):
    feats = model.features(batch)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != feats.shape[0]:
        raise ShapeError(f"{feats.shape[0]} rows but {labels.size} labels")
    if labels.size == 0:
        raise ValueError("empty batch")
    value, grad = kernels.loss_and_grad(
        feats, labels, _flat64(model.head), model.dims.feature_dim, model.dims.hidden_dim
    )
    _check_grad(grad, model.head.layout)
    return value, ParamVector(grad, model.head.layout, dtype=np.float64)


def gradient(model, batch, labels):
    """d(loss)/d(head) as a float64 ParamVector; the base gets no gradient."""
    return loss_and_gradient(model, batch, labels)[1]


@dataclass(frozen=True)
class AdamState:
    first_moment: np.ndarray
    second_moment: np.ndarray
    layout: tuple
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8

    @classmethod
    def fresh(cls, params, beta1=0.9, beta2=0.999, epsilon=1e-8):
        n = len(params)
        return cls(np.zeros(n), np.zeros(n), params.layout, 0, beta1, beta2, epsilon)


def adam_step(params, grad, state, lr):
    """One bias-corrected Adam update; returns new (params, state), inputs untouched."""
    if not (params.layout == grad.layout == state.layout):
        raise LayoutError("params, grad and optimizer state have different layouts")
    flat = params.values.astype(np.float64)
    m = state.first_moment.copy()
    v = state.second_moment.copy()
    t = state.step_count + 1
    kernels.adam_update(
        flat, np.ascontiguousarray(grad.values, dtype=np.float64), m, v, float(lr),
        state.beta1, state.beta2, state.epsilon,
        1.0 - state.beta1 ** t, 1.0 - state.beta2 ** t,
    )
    _check_grad(flat, params.layout)
    new_state = AdamState(m, v, state.layout, t, state.beta1, state.beta2, state.epsilon)
    return ParamVector(flat, params.layout), new_state


# --- parameter serialization --------------------------------------------------
#
# u32 BE block count
# per block: u16 BE name length, name (utf-8), u8 ndim, ndim x u32 BE dims
# u32 BE value count, values as float32 little-endian

def serialize_params(params):
    parts = [struct.pack(">I", len(params.layout))]
    for name, shape in params.layout:
        raw = name.encode("utf-8")
        parts.append(struct.pack(">H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(">B", len(shape)))
        parts.append(struct.pack(f">{len(shape)}I", *shape))
    parts.append(struct.pack(">I", len(params)))
    parts.append(np.asarray(params.values, dtype="<f4").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data):
        self.data = memoryview(data)
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.data):
            raise DecodeError(
                f"truncated {what}: expected {self.pos + n} bytes, have {len(self.data)}"
            )
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def read_params(reader):
    (nblocks,) = reader.unpack(">I", "block count")
    layout = []
    for _ in range(nblocks):
        (nlen,) = reader.unpack(">H", "block name length")
        name = bytes(reader.take(nlen, "block name")).decode("utf-8")
        (ndim,) = reader.unpack(">B", "block rank")
        shape = reader.unpack(f">{ndim}I", "block shape")
        layout.append((name, shape))
    (count,) = reader.unpack(">I", "value count")
    if count != _layout_size(layout):
        raise DecodeError(f"layout declares {_layout_size(layout)} values, header says {count}")
    values = np.frombuffer(reader.take(4 * count, "values"), dtype="<f4")
    return ParamVector(values.astype(np.float32), layout)


def deserialize_params(data):
    reader = _Reader(data)
    params = read_params(reader)
    if reader.pos != len(reader.data):
        raise DecodeError(
            f"over-long parameter encoding: expected {reader.pos} bytes, got {len(reader.data)}"
        )
    return params
