"""Building blocks of the cross-modal classifier.

All layers take batched inputs: sequences are ``B × F × D`` arrays (or
nodes) with a boolean ``B × F`` mask whose ``True`` entries are valid
frames. Masked frames are expected to hold zeros.
"""
from __future__ import annotations

import math

import numpy as np

from . import numerics as nx
from .errors import MaskError, ShapeError
from .numerics import Node


def uniform_init(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    """Container of named parameter nodes, in a fixed canonical order."""

    def parameters(self, prefix: str = "") -> list[tuple[str, Node]]:
        out = []
        for key, value in self.__dict__.items():
            if isinstance(value, Node) and value.requires_grad:
                out.append((prefix + key, value))
            elif isinstance(value, Layer):
                out.extend(value.parameters(f"{prefix}{key}."))
        return out


class AffineLayer(Layer):
    def __init__(self, d_in: int, d_out: int, rng: np.random.Generator):
        self.weight = nx.parameter(uniform_init(rng, d_in, (d_in, d_out)))
        self.bias = nx.parameter(np.zeros(d_out))

    def __call__(self, x) -> Node:
        return nx.add(nx.matmul(x, self.weight), self.bias)


class LayerNorm(Layer):
    def __init__(self, dim: int, eps: float = 1e-5):
        self.gamma = nx.parameter(np.ones(dim))
        self.beta = nx.parameter(np.zeros(dim))
        self.eps = eps

    def __call__(self, x) -> Node:
        return nx.layer_norm(x, self.gamma, self.beta, self.eps)


class GRUCell(Layer):
    """One direction of a GRU.

    Gate order inside the stacked weights is update, reset, candidate::

        z = σ(x W_z + h U_z + b_z)
        r = σ(x W_r + h U_r + b_r)
        c = tanh(x W_c + r ⊙ (h U_c) + b_c)
        h' = (1 − z) ⊙ h + z ⊙ c
    """

    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.hidden = hidden
        self.w_update = nx.parameter(uniform_init(rng, d_in, (d_in, hidden)))
        self.u_update = nx.parameter(uniform_init(rng, hidden, (hidden, hidden)))
        self.b_update = nx.parameter(np.zeros(hidden))
        self.w_reset = nx.parameter(uniform_init(rng, d_in, (d_in, hidden)))
        self.u_reset = nx.parameter(uniform_init(rng, hidden, (hidden, hidden)))
        self.b_reset = nx.parameter(np.zeros(hidden))
        self.w_cand = nx.parameter(uniform_init(rng, d_in, (d_in, hidden)))
        self.u_cand = nx.parameter(uniform_init(rng, hidden, (hidden, hidden)))
        self.b_cand = nx.parameter(np.zeros(hidden))

    def run(self, x: Node, mask: np.ndarray, reverse: bool = False) -> Node:
        """Run over ``x`` (``B × F × d_in``); masked steps keep the state and emit zeros."""
        batch, frames = mask.shape
        h_size = self.hidden
        w = nx.concat([self.w_update, self.w_reset, self.w_cand], axis=1)
        u = nx.concat([self.u_update, self.u_reset, self.u_cand], axis=1)
        b = nx.concat([self.b_update, self.b_reset, self.b_cand], axis=0)
        projected = nx.add(nx.matmul(x, w), b)
        maskf = mask.astype(np.float64)[:, :, None]

        state = nx.constant(np.zeros((batch, h_size)))
        outputs = [None] * frames
        steps = range(frames - 1, -1, -1) if reverse else range(frames)
        for t in steps:
            xt = nx.take(projected, (slice(None), t))
            rec = nx.matmul(state, u)
            gates = nx.sigmoid(nx.add(nx.take(xt, (slice(None), slice(0, 2 * h_size))),
                                      nx.take(rec, (slice(None), slice(0, 2 * h_size)))))
            z = nx.take(gates, (slice(None), slice(0, h_size)))
            r = nx.take(gates, (slice(None), slice(h_size, 2 * h_size)))
            cand = nx.tanh(nx.add(nx.take(xt, (slice(None), slice(2 * h_size, None))),
                                  nx.mul(r, nx.take(rec, (slice(None), slice(2 * h_size, None))))))
            m = maskf[:, t]
            state = nx.add(state, nx.mul(nx.mul(z, m), nx.sub(cand, state)))
            outputs[t] = nx.mul(state, m)
        return nx.stack(outputs, axis=1)


class BiGRULayer(Layer):
    def __init__(self, d_in: int, hidden: int, rng: np.random.Generator):
        self.forward_cell = GRUCell(d_in, hidden, rng)
        self.backward_cell = GRUCell(d_in, hidden, rng)

    @property
    def output_dim(self) -> int:
        return 2 * self.forward_cell.hidden

    def __call__(self, seq, mask) -> Node:
        return gru_forward(self, seq, mask)


def _check_mask(seq: Node, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim == 1:
        mask = mask[None, :]
    if mask.shape != seq.shape[:2]:
        raise ShapeError(f"mask shape {mask.shape} does not match sequence frames {seq.shape[:2]}")
    return mask


def _batched(seq) -> tuple[Node, bool]:
    seq = nx.constant(seq)
    if seq.value.ndim == 2:
        return nx.reshape(seq, (1,) + seq.shape), True
    return seq, False


def gru_forward(layer: BiGRULayer, seq, mask) -> Node:
    """Bidirectional GRU; output is forward and backward states concatenated (width 2h)."""
    seq, squeeze = _batched(seq)
    mask = _check_mask(seq, mask)
    fwd = layer.forward_cell.run(seq, mask)
    bwd = layer.backward_cell.run(seq, mask, reverse=True)
    out = nx.concat([fwd, bwd], axis=-1)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


class CrossAttentionLayer(Layer):
    """Single-head attention with queries from one modality, keys/values from another.

    The four projections are bias-free square matrices.
    """

    heads = 1

    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = nx.parameter(uniform_init(rng, dim, (dim, dim)))
        self.key = nx.parameter(uniform_init(rng, dim, (dim, dim)))
        self.value = nx.parameter(uniform_init(rng, dim, (dim, dim)))
        self.output = nx.parameter(uniform_init(rng, dim, (dim, dim)))

    def __call__(self, query_seq, kv_seq, kv_mask) -> Node:
        return cross_attention(self, query_seq, kv_seq, kv_mask)


def cross_attention(layer: CrossAttentionLayer, query_seq, kv_seq, kv_mask) -> Node:
    query_seq, squeeze = _batched(query_seq)
    kv_seq, _ = _batched(kv_seq)
    kv_mask = _check_mask(kv_seq, kv_mask)
    if not kv_mask.any(axis=1).all():
        raise MaskError("cross-attention key sequence is fully masked")
    attended = nx.scaled_dot_attention(nx.matmul(query_seq, layer.query), nx.matmul(kv_seq, layer.key),
                                       nx.matmul(kv_seq, layer.value), kv_mask)
    out = nx.matmul(attended, layer.output)
    return nx.reshape(out, out.shape[1:]) if squeeze else out


class AttentionPooling(Layer):
    def __init__(self, dim: int, rng: np.random.Generator):
        self.query = nx.parameter(uniform_init(rng, dim, (dim,)))

    def __call__(self, seq, mask) -> Node:
        return attention_pool(self, seq, mask)


def pooling_weights(pool: AttentionPooling, seq, mask) -> Node:
    """Softmax over valid frames of ``(r_i · m) / sqrt(D)``; shape ``B × F``."""
    seq, _ = _batched(seq)
    mask = _check_mask(seq, mask)
    if not mask.any(axis=1).all():
        raise MaskError("attention pooling needs at least one valid frame per sample")
    dim = seq.shape[-1]
    scores = nx.matmul(seq, nx.reshape(pool.query, (dim, 1)))
    scores = nx.mul(nx.reshape(scores, seq.shape[:2]), 1.0 / math.sqrt(dim))
    return nx.softmax(scores, mask)


def attention_pool(pool: AttentionPooling, seq, mask) -> Node:
    """Weighted average of frames; returns ``B × D`` (``1 × D`` for a single sequence)."""
    seq, _ = _batched(seq)
    weights = pooling_weights(pool, seq, mask)
    batch, frames = weights.shape
    pooled = nx.matmul(nx.reshape(weights, (batch, 1, frames)), seq)
    return nx.reshape(pooled, (batch, seq.shape[-1]))
