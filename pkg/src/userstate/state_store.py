"""Persistent per-user model states and the four embedding-update strategies.

The stateful route threads the model's retention state through each period and
maintains the user embedding as a count-weighted running mean of all hidden
states ever produced; it matches a full recomputation over the concatenated
history while paying only for the new behaviors. The three stateless routes
(recent-only, pooled period embeddings, full recompute) exist for comparison
and benchmarking.
"""

from __future__ import annotations

import enum
import hashlib
import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from . import model as M
from .model import FormatError, StaleStateError
from .retention import HeadState, LayerState

STATE_MAGIC = b"USES"
STATE_VERSION = 1
DEFAULT_CHUNK = 64


class EmptyUpdateError(ValueError):
    """An update was requested with zero new behaviors."""


class BudgetError(ValueError):
    """Full-history recomputation refused: history exceeds the memory budget."""


class MigrationError(ValueError):
    """State record written by an incompatible format version."""


class UpdateStrategy(enum.Enum):
    STATEFUL = "stateful"
    RECENT_ONLY = "recent-only"
    POOL_EMBEDDINGS = "pool"
    RECOMPUTE_ALL = "recompute-all"


@dataclass
class UserState:
    user_id: str
    fingerprint: str
    model_state: M.ModelState
    behaviors_seen: int
    running_embedding: np.ndarray          # float64 accumulator
    periods_seen: int
    period_embeddings: list[np.ndarray] = field(default_factory=list)
    period_counts: list[int] = field(default_factory=list)
    version: int = STATE_VERSION

    def copy(self) -> "UserState":
        return UserState(self.user_id, self.fingerprint, self.model_state.copy(),
                         self.behaviors_seen, self.running_embedding.copy(),
                         self.periods_seen,
                         [e.copy() for e in self.period_embeddings],
                         list(self.period_counts), self.version)


def init_user(user_id: str, params: M.Parameters) -> UserState:
    """Fresh user: all-zero retention states, zero counts, zero embedding."""
    d = params.config.hidden_size
    return UserState(user_id=user_id, fingerprint=params.fingerprint(),
                     model_state=M.fresh_state(params), behaviors_seen=0,
                     running_embedding=np.zeros(d, dtype=np.float64),
                     periods_seen=0)


def _check_update(state: UserState, new_behaviors: Sequence[int],
                  params: M.Parameters) -> np.ndarray:
    fp = params.fingerprint()
    if state.fingerprint != fp:
        raise StaleStateError(f"state fingerprint {state.fingerprint[:12]}... does "
                              f"not match model fingerprint {fp[:12]}...")
    arr = np.asarray(new_behaviors, dtype=np.int64)
    if arr.size == 0:
        raise EmptyUpdateError(f"user {state.user_id}: empty period update")
    return arr


def _chunked_hidden_sum(params: M.Parameters, ids: np.ndarray,
                        model_state: M.ModelState, chunk_size: int
                        ) -> tuple[np.ndarray, M.ModelState]:
    total = np.zeros(params.config.hidden_size, dtype=np.float64)
    state = model_state
    for start in range(0, ids.size, chunk_size):
        hidden, state = M.forward_chunkwise(params, ids[start:start + chunk_size], state)
        total += hidden.data.sum(axis=0, dtype=np.float64)
    return total, state


def update_stateful(state: UserState, new_behaviors: Sequence[int],
                    params: M.Parameters, chunk_size: int = DEFAULT_CHUNK
                    ) -> tuple[UserState, np.ndarray]:
    """Consume one period chunk-wise and fold its mean hidden state into the
    running-mean embedding:  e <- (n_old/n_new) e + (delta/n_new) mean(new)."""
    arr = _check_update(state, new_behaviors, params)
    with T.no_grad():
        hidden_sum, model_state = _chunked_hidden_sum(params, arr,
                                                      state.model_state, chunk_size)
    delta = arr.size
    n_new = state.behaviors_seen + delta
    emb = (state.behaviors_seen / n_new) * state.running_embedding \
        + hidden_sum / n_new
    new_state = UserState(state.user_id, state.fingerprint, model_state,
                          n_new, emb, state.periods_seen + 1,
                          [e.copy() for e in state.period_embeddings],
                          list(state.period_counts))
    return new_state, emb.astype(params.dtype)


def update_recent_only(new_behaviors: Sequence[int], params: M.Parameters,
                       chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    """Stateless: embed this period alone from a fresh zero state."""
    arr = np.asarray(new_behaviors, dtype=np.int64)
    if arr.size == 0:
        raise EmptyUpdateError("empty period update")
    return M.sequence_embedding(params, arr, chunk_size)


def update_pool(state: UserState, new_behaviors: Sequence[int],
                params: M.Parameters, chunk_size: int = DEFAULT_CHUNK,
                weight_by_count: bool = False) -> tuple[UserState, np.ndarray]:
    """Stateless pooling: embed the period alone, keep all period embeddings,
    return their mean (equal-weight by default; behavior-count weights behind
    the flag since period sizes may differ)."""
    arr = _check_update(state, new_behaviors, params)
    period_emb = update_recent_only(arr, params, chunk_size)
    embeddings = [e.copy() for e in state.period_embeddings] + [period_emb.copy()]
    counts = list(state.period_counts) + [int(arr.size)]
    if weight_by_count:
        w = np.asarray(counts, dtype=np.float64)
        pooled = (np.stack(embeddings).astype(np.float64) * (w / w.sum())[:, None]).sum(axis=0)
    else:
        pooled = np.stack(embeddings).astype(np.float64).mean(axis=0)
    new_state = UserState(state.user_id, state.fingerprint, state.model_state.copy(),
                          state.behaviors_seen + arr.size, state.running_embedding.copy(),
                          state.periods_seen + 1, embeddings, counts)
    return new_state, pooled.astype(params.dtype)


def update_recompute_all(full_history: Sequence[int], params: M.Parameters,
                         memory_budget: int | None = None,
                         chunk_size: int = DEFAULT_CHUNK) -> np.ndarray:
    """Stateless full recomputation: one parallel pass over the whole history
    when it fits, otherwise chunk-wise from a zero state (identical result)."""
    arr = np.asarray(full_history, dtype=np.int64)
    if arr.size == 0:
        raise EmptyUpdateError("empty history")
    if memory_budget is not None and arr.size > memory_budget:
        raise BudgetError(f"history of {arr.size} behaviors exceeds the memory "
                          f"budget of {memory_budget}; use the stateful or "
                          f"chunk-wise route")
    return M.sequence_embedding(params, arr, chunk_size)


# ---------------------------------------------------------------------------
# persistence: per-user binary records plus a text manifest

def _write_arr(buf: io.BytesIO, arr: np.ndarray) -> None:
    buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def save_state(state: UserState, path) -> None:
    buf = io.BytesIO()
    uid = state.user_id.encode()
    buf.write(struct.pack("<I", len(uid)))
    buf.write(uid)
    buf.write(bytes.fromhex(state.fingerprint))
    buf.write(struct.pack("<QQI", state.behaviors_seen,
                          state.model_state.tokens_processed, state.periods_seen))
    d = state.running_embedding.size
    layers = state.model_state.layer_states
    heads = len(layers[0].heads) if layers else 0
    dh = layers[0].heads[0].matrix.shape[0] if heads else 0
    dv = layers[0].heads[0].matrix.shape[1] if heads else 0
    buf.write(struct.pack("<IIIII", d, len(layers), heads, dh, dv))
    _write_arr(buf, state.running_embedding)
    for lay in layers:
        for head in lay.heads:
            _write_arr(buf, head.matrix)
    buf.write(struct.pack("<I", len(state.period_embeddings)))
    for emb, count in zip(state.period_embeddings, state.period_counts):
        buf.write(struct.pack("<Q", count))
        _write_arr(buf, emb)
    payload = buf.getvalue()
    with open(path, "wb") as f:
        f.write(STATE_MAGIC)
        f.write(struct.pack("<I", STATE_VERSION))
        f.write(hashlib.sha256(payload).digest())
        f.write(payload)


def _read_exact(f, n: int, what: str) -> bytes:
    data = f.read(n)
    if len(data) != n:
        raise FormatError(f"truncated state record while reading {what}")
    return data


def load_state(path, expected_fingerprint: str | None = None) -> UserState:
    with open(path, "rb") as f:
        if _read_exact(f, 4, "magic") != STATE_MAGIC:
            raise FormatError("not a state record (bad magic)")
        (version,) = struct.unpack("<I", _read_exact(f, 4, "version"))
        if version != STATE_VERSION:
            raise MigrationError(f"state record version {version}, expected "
                                 f"{STATE_VERSION}; no migration path")
        digest = _read_exact(f, 32, "checksum")
        payload = f.read()
    if hashlib.sha256(payload).digest() != digest:
        raise FormatError("state payload does not match checksum (corrupt record)")

    buf = io.BytesIO(payload)
    (uid_len,) = struct.unpack("<I", buf.read(4))
    user_id = buf.read(uid_len).decode()
    fingerprint = buf.read(32).hex()
    behaviors_seen, tokens, periods_seen = struct.unpack("<QQI", buf.read(20))
    d, n_layers, n_heads, dh, dv = struct.unpack("<IIIII", buf.read(20))

    def read_arr(shape) -> np.ndarray:
        n = int(np.prod(shape))
        return np.frombuffer(buf.read(4 * n), dtype="<f4").reshape(shape).copy()

    emb = read_arr((d,)).astype(np.float64)
    layer_states = [LayerState([HeadState(read_arr((dh, dv)).astype(np.float32))
                                for _ in range(n_heads)], i)
                    for i in range(n_layers)]
    (n_periods,) = struct.unpack("<I", buf.read(4))
    period_embeddings, period_counts = [], []
    for _ in range(n_periods):
        (count,) = struct.unpack("<Q", buf.read(8))
        period_counts.append(count)
        period_embeddings.append(read_arr((d,)).astype(np.float32))
    if buf.read(1):
        raise FormatError("state record has trailing bytes")

    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise StaleStateError(f"state fingerprint {fingerprint[:12]}... does not "
                              f"match model fingerprint {expected_fingerprint[:12]}...")
    model_state = M.ModelState(layer_states, tokens, fingerprint)
    return UserState(user_id, fingerprint, model_state, behaviors_seen, emb,
                     periods_seen, period_embeddings, period_counts)


class StateStore:
    """Directory of per-user state records plus a line-delimited manifest.

    Single writer per user id; records are written atomically (temp file then
    rename) so concurrent readers always see the last committed record. The
    store can optionally archive raw period sequences for the recompute-all
    strategy and benchmarks.
    """

    def __init__(self, root: str | Path, archive_history: bool = False):
        self.root = Path(root)
        self.archive_history = archive_history
        (self.root / "users").mkdir(parents=True, exist_ok=True)
        if archive_history:
            (self.root / "history").mkdir(exist_ok=True)

    @property
    def manifest_path(self) -> Path:
        return self.root / "manifest.tsv"

    def _record_path(self, user_id: str) -> Path:
        safe = "".join(c if c.isalnum() or c in "-_" else "x" for c in user_id)
        tag = hashlib.sha256(user_id.encode()).hexdigest()[:8]
        return self.root / "users" / f"{safe}-{tag}.state"

    def save_user(self, state: UserState) -> Path:
        path = self._record_path(state.user_id)
        tmp = path.with_suffix(".tmp")
        save_state(state, tmp)
        tmp.replace(path)
        self._rewrite_manifest()
        return path

    def load_user(self, user_id: str,
                  expected_fingerprint: str | None = None) -> UserState:
        path = self._record_path(user_id)
        if not path.exists():
            raise KeyError(f"no state record for user {user_id}")
        return load_state(path, expected_fingerprint)

    def user_ids(self) -> list[str]:
        out = []
        for path in sorted((self.root / "users").glob("*.state")):
            out.append(load_state(path).user_id)
        return out

    def _rewrite_manifest(self) -> None:
        rows = []
        for path in sorted((self.root / "users").glob("*.state")):
            st = load_state(path)
            rows.append(f"{st.user_id}\t{path.relative_to(self.root)}\t"
                        f"{st.behaviors_seen}\t{st.periods_seen}\t{st.fingerprint}")
        self.manifest_path.write_text("\n".join(rows) + ("\n" if rows else ""))

    def read_manifest(self) -> list[dict]:
        if not self.manifest_path.exists():
            return []
        rows = []
        for line in self.manifest_path.read_text().splitlines():
            if not line.strip():
                continue
            uid, path, n, periods, fp = line.split("\t")
            rows.append({"user_id": uid, "path": path, "behaviors_seen": int(n),
                         "periods_seen": int(periods), "fingerprint": fp})
        return rows

    def append_history(self, user_id: str, ids: Sequence[int]) -> None:
        if not self.archive_history:
            raise RuntimeError("store was opened without history archiving")
        path = self.root / "history" / f"{self._record_path(user_id).stem}.tsv"
        with open(path, "a") as f:
            f.write(" ".join(str(i) for i in np.asarray(ids, dtype=np.int64)) + "\n")

    def load_history(self, user_id: str) -> np.ndarray:
        path = self.root / "history" / f"{self._record_path(user_id).stem}.tsv"
        if not path.exists():
            return np.array([], dtype=np.int64)
        chunks = [np.array(line.split(), dtype=np.int64)
                  for line in path.read_text().splitlines() if line.strip()]
        return np.concatenate(chunks) if chunks else np.array([], dtype=np.int64)
