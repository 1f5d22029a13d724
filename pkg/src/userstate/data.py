"""Behavior vocabulary, synthetic persona-driven log generation, dataset file
formats, and count-based vectorizers.

The generator plants two signals on purpose: per-user perturbations of an
archetype's Markov transition structure (so windows of one user look more
alike than windows of two users; the contrastive objective can learn it), and
session structure plus transition regularity (so near-future behavior is
predictable; the window-prediction objective can learn it).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PAD_ID = 0
NEW_SESSION_ID = 1
NUM_SPECIALS = 2

_ARCH_STREAM = 101
_USER_STREAM = 202

_VERBS = ["open", "close", "send", "read", "view", "like", "share", "save",
          "edit", "search", "scroll", "tap"]
_OBJECTS = ["app", "camera", "chat", "message", "story", "filter", "map",
            "profile", "snap", "feed", "group", "settings"]


class SpecError(ValueError):
    """Degenerate persona specification."""


class VocabError(ValueError):
    """Unknown behavior id or mismatched vocabulary fingerprint."""


@dataclass(frozen=True)
class BehaviorVocab:
    """Dense-id vocabulary; ids 0 and 1 are reserved for pad and session start."""
    names: tuple[str, ...]

    def __post_init__(self):
        if len(self.names) < NUM_SPECIALS:
            raise VocabError("vocabulary must at least contain the special markers")
        if self.names[PAD_ID] != "pad" or self.names[NEW_SESSION_ID] != "new_session":
            raise VocabError("ids 0 and 1 are fixed to pad and new_session")

    @property
    def size(self) -> int:
        return len(self.names)

    @property
    def num_behaviors(self) -> int:
        return self.size - NUM_SPECIALS

    def fingerprint(self) -> str:
        text = "\n".join(f"{i}\t{n}" for i, n in enumerate(self.names))
        return hashlib.sha256(text.encode()).hexdigest()


def default_vocab(num_behaviors: int = 64) -> BehaviorVocab:
    combos = [f"{v}_{o}" for o in _OBJECTS for v in _VERBS]
    if num_behaviors > len(combos):
        raise VocabError(f"can name at most {len(combos)} behaviors")
    return BehaviorVocab(("pad", "new_session", *combos[:num_behaviors]))


def write_vocab(vocab: BehaviorVocab, path) -> None:
    with open(path, "w") as f:
        f.write(f"# vocab-fingerprint: {vocab.fingerprint()}\n")
        for i, name in enumerate(vocab.names):
            f.write(f"{i}\t{name}\n")


def read_vocab(path) -> BehaviorVocab:
    names: list[str] = []
    declared = None
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if "vocab-fingerprint:" in line:
                    declared = line.split("vocab-fingerprint:", 1)[1].strip()
                continue
            idx, name = line.split("\t")
            if int(idx) != len(names):
                raise VocabError(f"non-dense vocab ids near id {idx}")
            names.append(name)
    vocab = BehaviorVocab(tuple(names))
    if declared is not None and declared != vocab.fingerprint():
        raise VocabError("vocab file fingerprint does not match its contents")
    return vocab


@dataclass(frozen=True)
class PersonaSpec:
    """Controls for the synthetic log generator."""
    num_behaviors: int = 64
    num_archetypes: int = 8
    perturbation_scale: float = 0.3
    session_mean: float = 12.0
    drift_rate: float = 0.0
    drift_period: int = 64
    archetype_logit_scale: float = 1.0
    transitions: np.ndarray | None = None   # optional explicit [K, B, B] rows

    def __post_init__(self):
        if self.num_behaviors < 2 or self.num_archetypes < 1:
            raise SpecError("need at least 2 behaviors and 1 archetype")
        if not (0.0 <= self.drift_rate < 1.0):
            raise SpecError("drift_rate must lie in [0, 1)")
        if self.session_mean < 1.0:
            raise SpecError("session_mean must be >= 1")
        if self.transitions is not None:
            t = np.asarray(self.transitions, dtype=np.float64)
            if t.shape != (self.num_archetypes, self.num_behaviors, self.num_behaviors):
                raise SpecError(f"transitions must be [K, B, B], got {t.shape}")
            if np.any(t < 0) or not np.allclose(t.sum(axis=2), 1.0, atol=1e-6):
                raise SpecError("transition rows must be non-negative and sum to 1")
            if np.any(np.diagonal(t, axis1=1, axis2=2) > 1.0 - 1e-9):
                raise SpecError("absorbing state: a behavior only transitions to itself")


@dataclass
class BehaviorSequence:
    user_id: str
    ids: np.ndarray

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=np.int64)

    def validate(self, vocab_size: int) -> None:
        if self.ids.size == 0:
            raise VocabError(f"user {self.user_id}: empty sequence")
        if self.ids[0] != NEW_SESSION_ID:
            raise VocabError(f"user {self.user_id}: sequence must begin with "
                             "the session marker")
        if np.any(self.ids == PAD_ID):
            raise VocabError(f"user {self.user_id}: pad id inside a sequence")
        if self.ids.min() < 0 or self.ids.max() >= vocab_size:
            raise VocabError(f"user {self.user_id}: behavior id outside vocab "
                             f"of size {vocab_size}")


@dataclass
class Dataset:
    vocab: BehaviorVocab
    sequences: list[BehaviorSequence] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.sequences)

    def user_ids(self) -> list[str]:
        return [s.user_id for s in self.sequences]

    def by_user(self, user_id: str) -> BehaviorSequence:
        for s in self.sequences:
            if s.user_id == user_id:
                return s
        raise KeyError(user_id)


def _softmax_rows(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def archetype_logits(spec: PersonaSpec, seed: int) -> np.ndarray:
    """Base [K, B, B] transition logits, derived deterministically from the seed."""
    if spec.transitions is not None:
        with np.errstate(divide="ignore"):
            return np.log(np.maximum(np.asarray(spec.transitions, dtype=np.float64),
                                     1e-12))
    rng = np.random.default_rng([seed, _ARCH_STREAM])
    return rng.normal(0.0, spec.archetype_logit_scale,
                      (spec.num_archetypes, spec.num_behaviors, spec.num_behaviors))


def generate_user(spec: PersonaSpec, base_logits: np.ndarray, user_index: int,
                  length: int, seed: int) -> BehaviorSequence:
    """One user's log from its own substream: archetype choice, perturbed
    transitions, geometric sessions, optional per-period drift."""
    rng = np.random.default_rng([seed, _USER_STREAM, user_index])
    archetype = int(rng.integers(spec.num_archetypes))
    logits = base_logits[archetype] + rng.normal(0.0, spec.perturbation_scale,
                                                 base_logits[archetype].shape)
    probs = _softmax_rows(logits)

    b = spec.num_behaviors
    ids: list[int] = []
    current = int(rng.integers(b))
    session_left = 0
    emitted = 0
    while len(ids) < length:
        if spec.drift_rate > 0 and emitted > 0 and emitted % spec.drift_period == 0:
            logits = logits + rng.normal(0.0, spec.drift_rate, logits.shape)
            probs = _softmax_rows(logits)
        if session_left == 0:
            ids.append(NEW_SESSION_ID)
            session_left = int(rng.geometric(1.0 / spec.session_mean))
            if len(ids) >= length:
                break
            continue
        current = int(rng.choice(b, p=probs[current]))
        ids.append(current + NUM_SPECIALS)
        session_left -= 1
        emitted += 1
    return BehaviorSequence(f"u{user_index:05d}", np.asarray(ids[:length]))


def generate_dataset(spec: PersonaSpec, num_users: int, length_per_user: int,
                     seed: int) -> Dataset:
    """Deterministic synthetic corpus; per-user substreams keyed by
    (seed, user index) so generation order never matters."""
    vocab = default_vocab(spec.num_behaviors)
    base = archetype_logits(spec, seed)
    # reject specs whose rows are effectively absorbing after softmax
    probs = _softmax_rows(base)
    if np.any(np.diagonal(probs, axis1=1, axis2=2) > 1.0 - 1e-9):
        raise SpecError("absorbing state in archetype transitions")
    seqs = [generate_user(spec, base, i, length_per_user, seed)
            for i in range(num_users)]
    for s in seqs:
        s.validate(vocab.size)
    return Dataset(vocab, seqs)


# ---------------------------------------------------------------------------
# dataset files: `user_id<TAB>space-separated ids`, '#' header lines

def write_dataset(dataset: Dataset, path, provenance: str | None = None) -> None:
    with open(path, "w") as f:
        if provenance:
            f.write(f"# {provenance}\n")
        f.write(f"# vocab-fingerprint: {dataset.vocab.fingerprint()}\n")
        for seq in dataset.sequences:
            f.write(f"{seq.user_id}\t{' '.join(str(i) for i in seq.ids)}\n")


def read_dataset(path, vocab: BehaviorVocab) -> Dataset:
    sequences: list[BehaviorSequence] = []
    declared = None
    with open(path) as f:
        for line in f:
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                if "vocab-fingerprint:" in line:
                    declared = line.split("vocab-fingerprint:", 1)[1].strip()
                continue
            user_id, _, rest = line.partition("\t")
            ids = np.array(rest.split(), dtype=np.int64) if rest.strip() else \
                np.array([], dtype=np.int64)
            sequences.append(BehaviorSequence(user_id, ids))
    if declared is not None and declared != vocab.fingerprint():
        raise VocabError("dataset was written against a different vocabulary "
                         f"(fingerprint {declared[:12]}... vs "
                         f"{vocab.fingerprint()[:12]}...)")
    for seq in sequences:
        if seq.ids.size and (seq.ids.max() >= vocab.size or seq.ids.min() < 0):
            bad = int(seq.ids[(seq.ids >= vocab.size) | (seq.ids < 0)][0])
            raise VocabError(f"unknown behavior id {bad} for user {seq.user_id}")
    return Dataset(vocab, sequences)


# ---------------------------------------------------------------------------
# count vectorizers

def tf_vector(ids: Sequence[int], vocab_size: int) -> np.ndarray:
    """Behavior-count vector normalized to sum 1."""
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size == 0:
        raise VocabError("cannot vectorize an empty sequence")
    counts = np.bincount(arr, minlength=vocab_size).astype(np.float64)
    return counts / counts.sum()


def tfidf_vectors(docs: Iterable[Sequence[int]], vocab_size: int) -> np.ndarray:
    """TF rows scaled by idf = log((1 + D) / (1 + df)) + 1.

    With the add-one smoothing on both counts, a behavior present in every
    document gets idf exactly 1.0 (instead of the unsmoothed 0).
    """
    docs = list(docs)
    tf = np.stack([tf_vector(d, vocab_size) for d in docs])
    df = (tf > 0).sum(axis=0).astype(np.float64)
    idf = np.log((1.0 + len(docs)) / (1.0 + df)) + 1.0
    return tf * idf[None, :]


def cosine(a: np.ndarray, b: np.ndarray) -> float:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))
