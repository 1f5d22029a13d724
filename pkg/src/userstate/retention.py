"""Decayed linear attention ("retention") in three equivalent execution forms.

The output of token n is o_n = q_n * sum_{m<=n} decay^(n-m) k_m^T v_m. Because
there is no softmax, the k^T v products can be summed first, which yields

  * a parallel form   O = (Q K^T . D) V   with D[n, m] = decay^(n-m) for n >= m,
  * a token recurrence S_n = decay * S_{n-1} + k_n^T v_n,  o_n = q_n S_n,
  * a chunk-wise form that processes a block in parallel while threading the
    cross-block state S.

All three produce identical outputs up to float rounding; the equivalence is
what makes constant-cost incremental inference possible and is pinned down by
the test-suite oracles.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .tensor import Tensor


class ConfigError(ValueError):
    """Invalid retention configuration."""


class EmptyChunkError(ValueError):
    """A chunk-wise call received zero tokens."""


@dataclass(frozen=True)
class RetentionHeadConfig:
    head_index: int
    key_dim: int
    value_dim: int
    decay: float

    def __post_init__(self):
        if not (0.0 < self.decay < 1.0):
            raise ConfigError(f"decay must lie strictly in (0, 1), got {self.decay}")
        if self.key_dim < 1 or self.value_dim < 1:
            raise ConfigError("key_dim and value_dim must be positive")


@dataclass
class HeadState:
    """Cross-chunk memory of one head: the running sum of decayed k^T v outer
    products, a [key_dim, value_dim] matrix. All-zero for a fresh user."""

    matrix: np.ndarray

    @classmethod
    def zero(cls, key_dim: int, value_dim: int, dtype=np.float32) -> "HeadState":
        return cls(np.zeros((key_dim, value_dim), dtype=dtype))

    def copy(self) -> "HeadState":
        return HeadState(self.matrix.copy())


@dataclass
class LayerState:
    heads: list[HeadState]
    layer_index: int = 0

    def copy(self) -> "LayerState":
        return LayerState([h.copy() for h in self.heads], self.layer_index)


def decay_schedule(num_heads: int) -> list[float]:
    """Per-head decay 1 - 2^-(5+h): shorter memory for low heads, longer for high."""
    return [1.0 - 2.0 ** -(5 + h) for h in range(num_heads)]


def _check_decay(decay: float) -> float:
    if not (0.0 < decay < 1.0):
        raise ConfigError(f"decay must lie strictly in (0, 1), got {decay}")
    return float(decay)


def decay_matrix(length: int, decay: float, dtype) -> np.ndarray:
    """Lower-triangular D with D[n, m] = decay^(n-m) for n >= m, else 0."""
    idx = np.arange(length)
    gap = idx[:, None] - idx[None, :]
    with np.errstate(over="ignore"):
        d = np.where(gap >= 0, float(decay) ** np.maximum(gap, 0), 0.0)
    return d.astype(dtype)


def retention_parallel(q: Tensor, k: Tensor, v: Tensor, decay: float) -> Tensor:
    """Full-sequence form: O = (Q K^T . D) V. Differentiable; used in training."""
    decay = _check_decay(decay)
    if q.ndim != 2 or k.ndim != 2 or v.ndim != 2:
        raise T.ShapeError("retention_parallel: q, k, v must be 2-D")
    if q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise T.ShapeError(f"retention_parallel: shapes disagree: "
                           f"q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[0] < 1:
        raise EmptyChunkError("retention_parallel: empty sequence")
    d = Tensor(decay_matrix(q.shape[0], decay, q.dtype))
    scores = T.mul(T.matmul(q, T.transpose(k)), d)
    return T.matmul(scores, v)


def retention_recurrent_step(q_n: np.ndarray, k_n: np.ndarray, v_n: np.ndarray,
                             state: HeadState, decay: float
                             ) -> tuple[np.ndarray, HeadState]:
    """One token of the recurrence: S' = decay*S + k^T v, o = q S'.

    Constant cost per step regardless of how much history S already holds.
    Pure numpy; the recurrent path is an inference/oracle route, not a
    training route.
    """
    decay = _check_decay(decay)
    q_n = np.atleast_2d(np.asarray(q_n))
    k_n = np.atleast_2d(np.asarray(k_n))
    v_n = np.atleast_2d(np.asarray(v_n))
    if k_n.shape[1] != state.matrix.shape[0] or v_n.shape[1] != state.matrix.shape[1]:
        raise T.ShapeError(f"retention_recurrent_step: token dims {k_n.shape[1]}x"
                           f"{v_n.shape[1]} do not match state {state.matrix.shape}")
    new_s = decay * state.matrix + k_n.T @ v_n
    o_n = q_n @ new_s
    return o_n[0], HeadState(new_s)


def retention_chunkwise(q: Tensor, k: Tensor, v: Tensor, state_in: HeadState,
                        decay: float) -> tuple[Tensor, HeadState]:
    """Process a chunk in parallel while threading the cross-chunk state.

    With 1-based in-chunk index i:
      O[i]  = q_i (decay^i * S_in + sum_{m<=i} decay^(i-m) k_m^T v_m)
      S_out = decay^C * S_in + sum_m decay^(C-m) k_m^T v_m
    """
    decay = _check_decay(decay)
    if q.ndim != 2 or q.shape != k.shape or q.shape[0] != v.shape[0]:
        raise T.ShapeError(f"retention_chunkwise: shapes disagree: "
                           f"q{q.shape} k{k.shape} v{v.shape}")
    length = q.shape[0]
    if length == 0:
        raise EmptyChunkError("retention_chunkwise: empty chunk")
    if state_in.matrix.shape != (k.shape[1], v.shape[1]):
        raise T.ShapeError(f"retention_chunkwise: state {state_in.matrix.shape} does "
                           f"not match head dims ({k.shape[1]}, {v.shape[1]})")

    inner = retention_parallel(q, k, v, decay)

    # cross-chunk correction: row i picks up decay^(i+1) * q_i S_in (0-based i)
    pows = (decay ** np.arange(1, length + 1)).astype(q.dtype)
    carried = T.matmul(q, Tensor(state_in.matrix.astype(q.dtype)))
    carried = T.mul(carried, Tensor(np.repeat(pows[:, None], v.shape[1], axis=1)))
    out = T.add(inner, carried)

    # states are inference data, never differentiated through
    w = (decay ** np.arange(length - 1, -1, -1)).astype(state_in.matrix.dtype)
    k_np = k.data.astype(state_in.matrix.dtype)
    v_np = v.data.astype(state_in.matrix.dtype)
    new_s = (decay ** length) * state_in.matrix + (k_np * w[:, None]).T @ v_np
    return out, HeadState(new_s)


@dataclass(frozen=True)
class MultiHeadConfig:
    hidden_size: int
    num_heads: int

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(f"hidden size {self.hidden_size} not divisible by "
                              f"{self.num_heads} heads")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads


@dataclass
class MultiHeadWeights:
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor


def multi_head_retention(x: Tensor, weights: MultiHeadWeights,
                         config: MultiHeadConfig,
                         state: LayerState | None = None
                         ) -> tuple[Tensor, LayerState]:
    """Project, run per-head retention, concatenate, output-project.

    Per-head decays follow ``decay_schedule``. Queries and keys are scaled by
    head_dim^-1/2 before any product. When ``state`` is None the parallel form
    runs from a zero state; either way the resulting LayerState is returned so
    callers can thread it into the next chunk.
    """
    dh = config.head_dim
    scl = dh ** -0.5
    q_all = T.scale(T.matmul(x, weights.w_q), scl)
    k_all = T.scale(T.matmul(x, weights.w_k), scl)
    v_all = T.matmul(x, weights.w_v)
    decays = decay_schedule(config.num_heads)

    dtype = state.heads[0].matrix.dtype if state is not None else x.dtype
    outs, new_heads = [], []
    for h in range(config.num_heads):
        q_h = T.slice_cols(q_all, h * dh, (h + 1) * dh)
        k_h = T.slice_cols(k_all, h * dh, (h + 1) * dh)
        v_h = T.slice_cols(v_all, h * dh, (h + 1) * dh)
        if state is None:
            o_h = retention_parallel(q_h, k_h, v_h, decays[h])
            length = x.shape[0]
            w = (decays[h] ** np.arange(length - 1, -1, -1)).astype(dtype)
            s_new = (k_h.data.astype(dtype) * w[:, None]).T @ v_h.data.astype(dtype)
            new_heads.append(HeadState(s_new))
        else:
            o_h, s_new = retention_chunkwise(q_h, k_h, v_h, state.heads[h], decays[h])
            new_heads.append(s_new)
        outs.append(o_h)
    merged = outs[0] if len(outs) == 1 else T.concat_cols(outs)
    out = T.matmul(merged, weights.w_o)
    layer_index = state.layer_index if state is not None else 0
    return out, LayerState(new_heads, layer_index)


def zero_layer_state(config: MultiHeadConfig, layer_index: int = 0,
                     dtype=np.float32) -> LayerState:
    dh = config.head_dim
    return LayerState([HeadState.zero(dh, dh, dtype) for _ in range(config.num_heads)],
                      layer_index)
