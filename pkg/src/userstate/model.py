"""Behavior-sequence encoder: embedding table, stacked pre-norm retention
blocks, prediction heads, and mean-pooled sequence embeddings.

Two forward routes exist. The parallel route consumes whole sequences and is
the training path. The chunk-wise route consumes one block at a time while
threading per-layer retention states, which is what makes per-user embedding
updates cost the same regardless of history length. Both routes produce the
same hidden states up to float rounding.
"""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field, asdict
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import retention as R
from .retention import LayerState, MultiHeadConfig, MultiHeadWeights

MAGIC = b"USEW"
FORMAT_VERSION = 1


class LengthError(ValueError):
    """Sequence longer than the configured maximum."""


class EmptyPoolError(ValueError):
    """Pooling requested over zero unmasked positions."""


class StaleStateError(ValueError):
    """A state was produced by a model with a different parameter fingerprint."""


class FormatError(ValueError):
    """Corrupt or foreign parameter/state file."""


class VersionError(ValueError):
    """Parameter/state file written by an incompatible format version."""


class ConfigError(ValueError):
    """Invalid or mismatched model configuration."""


@dataclass(frozen=True)
class ModelConfig:
    vocab_size: int = 66
    num_layers: int = 2
    num_heads: int = 2
    hidden_size: int = 32
    ffn_size: int = 128
    num_predicted: int = 64
    future_window: int = 16
    max_seq_len: int = 256
    # reserved: the decay-only form is implemented; a normalized variant is not
    normalized_retention: bool = False

    def __post_init__(self):
        if self.hidden_size % self.num_heads != 0:
            raise ConfigError(f"hidden_size {self.hidden_size} not divisible by "
                              f"num_heads {self.num_heads}")
        if self.future_window < 1:
            raise ConfigError("future_window must be >= 1")
        if self.num_predicted > self.vocab_size:
            raise ConfigError("num_predicted cannot exceed vocab_size")
        if self.normalized_retention:
            raise ConfigError("normalized retention is reserved and not implemented")

    @property
    def head_dim(self) -> int:
        return self.hidden_size // self.num_heads

    def multi_head(self) -> MultiHeadConfig:
        return MultiHeadConfig(self.hidden_size, self.num_heads)


@dataclass
class LayerParams:
    ln1_gain: Tensor
    ln1_bias: Tensor
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor
    ffn_w1: Tensor
    ffn_b1: Tensor
    ffn_w2: Tensor
    ffn_b2: Tensor

    def weights(self) -> MultiHeadWeights:
        return MultiHeadWeights(self.w_q, self.w_k, self.w_v, self.w_o)


class Parameters:
    """All learnable weights plus a content fingerprint.

    The fingerprint is a sha256 over the raw weight payload in declared order;
    it changes iff any weight changes. It is cached, so in-place mutation must
    go through ``invalidate_fingerprint`` (the optimizer does).
    """

    def __init__(self, config: ModelConfig, embedding: Tensor,
                 layers: list[LayerParams], final_gain: Tensor, final_bias: Tensor,
                 fbp_w: Tensor, fbp_b: Tensor, clm_w: Tensor, clm_b: Tensor):
        self.config = config
        self.embedding = embedding
        self.layers = layers
        self.final_gain = final_gain
        self.final_bias = final_bias
        self.fbp_w = fbp_w
        self.fbp_b = fbp_b
        self.clm_w = clm_w
        self.clm_b = clm_b
        self._fingerprint: str | None = None

    def named_tensors(self) -> list[tuple[str, Tensor]]:
        out = [("embedding", self.embedding)]
        for i, lay in enumerate(self.layers):
            for name in ("ln1_gain", "ln1_bias", "w_q", "w_k", "w_v", "w_o",
                         "ln2_gain", "ln2_bias", "ffn_w1", "ffn_b1", "ffn_w2",
                         "ffn_b2"):
                out.append((f"layer{i}.{name}", getattr(lay, name)))
        out += [("final_gain", self.final_gain), ("final_bias", self.final_bias),
                ("fbp_w", self.fbp_w), ("fbp_b", self.fbp_b),
                ("clm_w", self.clm_w), ("clm_b", self.clm_b)]
        return out

    def tensors(self) -> list[Tensor]:
        return [t for _, t in self.named_tensors()]

    @property
    def dtype(self):
        return self.embedding.dtype

    def payload_bytes(self) -> bytes:
        buf = io.BytesIO()
        wire = "<f8" if self.dtype == np.float64 else "<f4"
        for _, t in self.named_tensors():
            buf.write(np.ascontiguousarray(t.data, dtype=wire).tobytes())
        return buf.getvalue()

    def fingerprint(self) -> str:
        if self._fingerprint is None:
            self._fingerprint = hashlib.sha256(self.payload_bytes()).hexdigest()
        return self._fingerprint

    def invalidate_fingerprint(self) -> None:
        self._fingerprint = None


def init_parameters(config: ModelConfig, seed: int = 0, dtype=np.float32) -> Parameters:
    """Weights ~ N(0, 0.02); zero biases; unit layer-norm gains."""
    rng = np.random.default_rng(seed)
    d, f, v = config.hidden_size, config.ffn_size, config.vocab_size

    def w(shape):
        return T.randn(rng, shape, std=0.02, dtype=dtype, requires_grad=True)

    def zero(shape):
        return T.zeros(shape, dtype=dtype, requires_grad=True)

    def one(shape):
        return T.ones(shape, dtype=dtype, requires_grad=True)

    layers = [LayerParams(ln1_gain=one(d), ln1_bias=zero(d),
                          w_q=w((d, d)), w_k=w((d, d)), w_v=w((d, d)), w_o=w((d, d)),
                          ln2_gain=one(d), ln2_bias=zero(d),
                          ffn_w1=w((d, f)), ffn_b1=zero(f),
                          ffn_w2=w((f, d)), ffn_b2=zero(d))
              for _ in range(config.num_layers)]
    return Parameters(config, embedding=w((v, d)), layers=layers,
                      final_gain=one(d), final_bias=zero(d),
                      fbp_w=w((d, config.num_predicted)), fbp_b=zero(config.num_predicted),
                      clm_w=w((d, v)), clm_b=zero(v))


@dataclass
class ModelState:
    """Per-layer retention states plus bookkeeping for one user/stream."""
    layer_states: list[LayerState]
    tokens_processed: int
    fingerprint: str

    def copy(self) -> "ModelState":
        return ModelState([s.copy() for s in self.layer_states],
                          self.tokens_processed, self.fingerprint)


def fresh_state(params: Parameters, dtype=None) -> ModelState:
    cfg = params.config.multi_head()
    dt = dtype or params.dtype
    states = [R.zero_layer_state(cfg, i, dt) for i in range(params.config.num_layers)]
    return ModelState(states, 0, params.fingerprint())


def _check_ids(ids: Sequence[int], config: ModelConfig) -> np.ndarray:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.ndim != 1 or arr.size == 0:
        raise R.EmptyChunkError("forward: empty behavior sequence")
    if arr.min() < 0 or arr.max() >= config.vocab_size:
        bad = int(arr[(arr < 0) | (arr >= config.vocab_size)][0])
        raise IndexError(f"behavior id {bad} outside vocab of size {config.vocab_size}")
    return arr


def _block(x: Tensor, lay: LayerParams, mh_cfg: MultiHeadConfig,
           state: LayerState | None) -> tuple[Tensor, LayerState]:
    h = T.layer_norm(x, lay.ln1_gain, lay.ln1_bias)
    mhr, new_state = R.multi_head_retention(h, lay.weights(), mh_cfg, state)
    x = T.add(x, mhr)
    h2 = T.layer_norm(x, lay.ln2_gain, lay.ln2_bias)
    ff = T.add_bias(T.matmul(h2, lay.ffn_w1), lay.ffn_b1)
    ff = T.add_bias(T.matmul(T.gelu(ff), lay.ffn_w2), lay.ffn_b2)
    return T.add(x, ff), new_state


def forward_sequence(params: Parameters, ids: Sequence[int]) -> Tensor:
    """Parallel forward over one full sequence; returns hidden states [T, d]."""
    cfg = params.config
    arr = _check_ids(ids, cfg)
    if arr.size > cfg.max_seq_len:
        raise LengthError(f"sequence length {arr.size} exceeds max_seq_len "
                          f"{cfg.max_seq_len}")
    x = T.gather_rows(params.embedding, arr)
    mh = cfg.multi_head()
    for lay in params.layers:
        x, _ = _block(x, lay, mh, None)
    return T.layer_norm(x, params.final_gain, params.final_bias)


def forward_parallel(params: Parameters, batch: Sequence[Sequence[int]]
                     ) -> list[Tensor]:
    """Parallel forward over a batch of variable-length sequences.

    Sequences are independent; there is no cross-sequence mixing, so the batch
    is just a list and no padding is ever introduced.
    """
    return [forward_sequence(params, ids) for ids in batch]


def forward_chunkwise(params: Parameters, ids: Sequence[int], state: ModelState
                      ) -> tuple[Tensor, ModelState]:
    """Consume one chunk, threading retention state through every layer."""
    cfg = params.config
    fp = params.fingerprint()
    if state.fingerprint != fp:
        raise StaleStateError(f"state fingerprint {state.fingerprint[:12]}... does not "
                              f"match model fingerprint {fp[:12]}...")
    arr = _check_ids(ids, cfg)
    if arr.size > cfg.max_seq_len:
        raise LengthError(f"chunk length {arr.size} exceeds max_seq_len {cfg.max_seq_len}")
    x = T.gather_rows(params.embedding, arr)
    mh = cfg.multi_head()
    new_layer_states = []
    for lay, lay_state in zip(params.layers, state.layer_states):
        x, new_state = _block(x, lay, mh, lay_state)
        new_layer_states.append(new_state)
    hidden = T.layer_norm(x, params.final_gain, params.final_bias)
    return hidden, ModelState(new_layer_states, state.tokens_processed + arr.size, fp)


def embed(hidden: Tensor, mask: Sequence[int] | None = None) -> Tensor:
    """Mean of unmasked hidden rows (mask entry 1 keeps the row)."""
    if hidden.ndim != 2:
        raise T.ShapeError(f"embed: hidden must be [T, d], got {hidden.shape}")
    if mask is None:
        rows = hidden
    else:
        keep = np.flatnonzero(np.asarray(mask))
        if keep.size == 0:
            raise EmptyPoolError("embed: every position is masked out")
        if len(mask) != hidden.shape[0]:
            raise T.ShapeError("embed: mask length does not match sequence length")
        rows = T.gather_rows(hidden, keep)
    return T.tmean(rows, axis=0)


def fbp_logits(hidden: Tensor, params: Parameters) -> Tensor:
    """Per-position logits over the predicted-behavior set, [T, N]."""
    return T.add_bias(T.matmul(hidden, params.fbp_w), params.fbp_b)


def clm_logits(hidden: Tensor, params: Parameters) -> Tensor:
    """Per-position next-behavior logits over the full vocab, [T, vocab]."""
    return T.add_bias(T.matmul(hidden, params.clm_w), params.clm_b)


def sequence_embedding(params: Parameters, ids: Sequence[int],
                       chunk_size: int | None = None) -> np.ndarray:
    """Inference helper: mean-pooled embedding of one sequence, no gradients.

    Sequences longer than max_seq_len are consumed chunk-wise from a zero
    state, which produces the same result as one parallel pass would.
    """
    with T.no_grad():
        limit = chunk_size or params.config.max_seq_len
        if len(ids) <= min(limit, params.config.max_seq_len):
            return embed(forward_sequence(params, ids)).data.copy()
        state = fresh_state(params)
        total = np.zeros(params.config.hidden_size, dtype=np.float64)
        n = 0
        for start in range(0, len(ids), limit):
            chunk = ids[start:start + limit]
            hidden, state = forward_chunkwise(params, chunk, state)
            total += hidden.data.sum(axis=0)
            n += len(chunk)
        return (total / n).astype(params.dtype)


# ---------------------------------------------------------------------------
# persistence

def _config_dict(config: ModelConfig, dtype) -> dict:
    d = asdict(config)
    d["dtype"] = "float64" if dtype == np.float64 else "float32"
    return d


def save_params(params: Parameters, path) -> None:
    payload = params.payload_bytes()
    digest = hashlib.sha256(payload).digest()
    cfg = json.dumps(_config_dict(params.config, params.dtype),
                     sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", FORMAT_VERSION))
        f.write(struct.pack("<I", len(cfg)))
        f.write(cfg)
        f.write(digest)
        f.write(payload)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated parameter file while reading {what}")
    return data


def load_params(path, expected_config: ModelConfig | None = None) -> Parameters:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != MAGIC:
            raise FormatError("not a parameter file (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != FORMAT_VERSION:
            raise VersionError(f"parameter format version {version}, "
                               f"expected {FORMAT_VERSION}")
        (cfg_len,) = struct.unpack("<I", _read_exact(f, 4, "config length"))
        try:
            cfg_dict = json.loads(_read_exact(f, cfg_len, "config block"))
        except json.JSONDecodeError as e:
            raise FormatError(f"unreadable config block: {e}") from e
        digest = _read_exact(f, 32, "fingerprint")
        payload = f.read()

    dtype = np.float64 if cfg_dict.pop("dtype", "float32") == "float64" else np.float32
    try:
        config = ModelConfig(**cfg_dict)
    except TypeError as e:
        raise FormatError(f"config block has unexpected fields: {e}") from e
    if expected_config is not None and config != expected_config:
        raise ConfigError(f"file declares config {config}, expected {expected_config}")

    if hashlib.sha256(payload).digest() != digest:
        raise FormatError("payload does not match stored fingerprint (corrupt file)")

    params = init_parameters(config, seed=0, dtype=dtype)
    wire = "<f8" if dtype == np.float64 else "<f4"
    itemsize = np.dtype(wire).itemsize
    off = 0
    for name, t in params.named_tensors():
        nbytes = t.data.size * itemsize
        if off + nbytes > len(payload):
            raise FormatError(f"payload too short while reading {name}")
        arr = np.frombuffer(payload, dtype=wire, count=t.data.size, offset=off)
        t.data = arr.reshape(t.data.shape).astype(dtype)
        off += nbytes
    if off != len(payload):
        raise FormatError("payload has trailing bytes beyond declared weights")
    params.invalidate_fingerprint()
    return params
