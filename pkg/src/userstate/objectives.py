"""Training objectives.

Two losses carry the method: future-window behavior prediction (multi-label
BCE over "does behavior n occur within the next W actions", asked at every
eligible position) and same-user prediction (a symmetric in-batch contrastive
loss over pairs of disjoint windows from one user). A causal next-behavior
cross-entropy exists for the ablation wiring.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor
from . import model as M


class InsufficientLengthError(ValueError):
    """Sequence too short for the requested future window."""


class DegenerateEmbeddingError(ValueError):
    """A zero-norm embedding cannot enter a cosine-similarity loss."""


@dataclass
class ContrastiveBatch:
    """Aligned anchor/positive embeddings from the same users, plus temperature."""
    anchors: list[Tensor]
    positives: list[Tensor]
    temperature: float

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature must be positive, got {self.temperature}")
        if len(self.anchors) != len(self.positives):
            raise ValueError("anchors and positives must align one-to-one")
        if 2 * len(self.anchors) < 4:
            raise ValueError("need at least 2 pairs so every anchor has an "
                             "in-batch negative")


def build_fbp_labels(ids: Sequence[int], future_window: int, num_predicted: int,
                     first_id: int = 0) -> np.ndarray:
    """Binary matrix [(T - W) x N]: entry (i, n) says whether behavior
    ``first_id + n`` occurs anywhere in positions i+1 .. i+W (1-based i).

    ``first_id`` shifts the label columns so special markers (pad, session
    start) stay out of the predicted set.
    """
    arr = np.asarray(ids, dtype=np.int64)
    t = arr.size
    w = int(future_window)
    if t <= w:
        raise InsufficientLengthError(f"sequence length {t} must exceed "
                                      f"future window {w}")
    labels = np.zeros((t - w, num_predicted), dtype=np.float32)
    cols = arr - first_id
    valid = (cols >= 0) & (cols < num_predicted)
    for i in range(t - w):
        window = slice(i + 1, i + 1 + w)
        seen = cols[window][valid[window]]
        labels[i, seen] = 1.0
    return labels


def fbp_loss(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean BCE over every (position, behavior) cell, fused stable form."""
    return T.bce_with_logits(logits, labels)


def sup_loss(batch: ContrastiveBatch, negatives: str = "all") -> Tensor:
    """Symmetric contrastive loss over 2M embeddings.

    Each of the 2M embeddings acts as an anchor once; its positive is its
    pair partner and, with ``negatives="all"``, the denominator runs over all
    other 2M-1 embeddings. ``negatives="pair-partners-excluded"`` restricts an
    anchor's denominator to its positive plus the other same-side embeddings.
    Cosine similarities, so the loss is invariant to per-embedding scaling.
    """
    m = len(batch.anchors)
    embs = list(batch.anchors) + list(batch.positives)
    for e in embs:
        if e.ndim != 1:
            raise T.ShapeError(f"sup_loss: embeddings must be 1-D, got {e.shape}")
        if float(np.linalg.norm(e.data)) == 0.0:
            raise DegenerateEmbeddingError("zero-norm embedding in contrastive batch")
    unit = [T.div(e, T.sqrt(T.tsum(T.mul(e, e)))) for e in embs]
    mat = T.stack_rows(unit)
    sims = T.scale(T.matmul(mat, T.transpose(mat)), 1.0 / batch.temperature)

    n = 2 * m
    mask = np.zeros((n, n), dtype=sims.dtype)
    np.fill_diagonal(mask, -1e30)
    if negatives == "pair-partners-excluded":
        for k in range(m):
            for j in range(m):
                if j != k:
                    mask[k, m + j] = -1e30      # anchor k ignores other positives
                    mask[m + k, j] = -1e30      # positive k ignores other anchors
    elif negatives != "all":
        raise ValueError(f"unknown negatives mode {negatives!r}")

    log_p = T.log_softmax(T.add(sims, Tensor(mask)), axis=1)
    pick = np.zeros((n, n), dtype=sims.dtype)
    for k in range(m):
        pick[k, m + k] = 1.0
        pick[m + k, k] = 1.0
    return T.scale(T.tsum(T.mul(log_p, Tensor(pick))), -1.0 / n)


def clm_loss(logits: Tensor, next_ids: Sequence[int]) -> Tensor:
    """Mean cross-entropy of each position's next behavior."""
    return T.nll_from_log_probs(T.log_softmax(logits, axis=1), next_ids)


def _member_fbp(ids: Sequence[int], hidden: Tensor, params: M.Parameters,
                label_first_id: int) -> Tensor:
    cfg = params.config
    labels = build_fbp_labels(ids, cfg.future_window, cfg.num_predicted,
                              label_first_id)
    positions = T.slice_rows(hidden, 0, len(ids) - cfg.future_window)
    return fbp_loss(M.fbp_logits(positions, params), labels)


def _member_clm(ids: Sequence[int], hidden: Tensor, params: M.Parameters) -> Tensor:
    arr = np.asarray(ids, dtype=np.int64)
    if arr.size < 2:
        raise InsufficientLengthError("next-behavior loss needs length >= 2")
    positions = T.slice_rows(hidden, 0, arr.size - 1)
    return clm_loss(M.clm_logits(positions, params), arr[1:])


def combined_loss(pairs: Sequence[tuple[Sequence[int], Sequence[int]]],
                  params: M.Parameters,
                  temperature: float = 0.1,
                  objectives: frozenset[str] | set[str] = frozenset({"fbp", "sup"}),
                  label_first_id: int = 2,
                  negatives: str = "all") -> tuple[Tensor, dict[str, float]]:
    """Per-batch loss over M window pairs; one backward pass covers everything.

    With both main objectives enabled this is
      (1/M) sum_k [ (l_sup(k,k+) + l_sup(k+,k))/2 + l_fbp(k) + l_fbp(k+) ],
    i.e. the contrastive term averaged over both directions plus the sum of
    both members' window-prediction losses. Subsets wire the ablations.
    """
    bad = set(objectives) - {"fbp", "sup", "clm"}
    if bad:
        raise ValueError(f"unknown objectives: {sorted(bad)}")
    if not objectives:
        raise ValueError("objective set is empty")
    m = len(pairs)
    if "sup" in objectives and m < 2:
        raise ValueError("contrastive objective needs at least 2 pairs in a batch")

    hiddens = [(M.forward_sequence(params, a), M.forward_sequence(params, b))
               for a, b in pairs]

    components: dict[str, float] = {}
    terms: list[Tensor] = []

    if "sup" in objectives:
        batch = ContrastiveBatch([M.embed(h) for h, _ in hiddens],
                                 [M.embed(h) for _, h in hiddens], temperature)
        sup = sup_loss(batch, negatives)
        components["sup"] = sup.item()
        terms.append(sup)

    if "fbp" in objectives:
        member_losses = []
        for (ids_a, ids_b), (h_a, h_b) in zip(pairs, hiddens):
            member_losses.append(_member_fbp(ids_a, h_a, params, label_first_id))
            member_losses.append(_member_fbp(ids_b, h_b, params, label_first_id))
        total = member_losses[0]
        for term in member_losses[1:]:
            total = T.add(total, term)
        fbp_term = T.scale(total, 1.0 / m)
        components["fbp"] = fbp_term.item() / 2.0   # mean per member, for logs
        terms.append(fbp_term)

    if "clm" in objectives:
        member_losses = []
        for (ids_a, ids_b), (h_a, h_b) in zip(pairs, hiddens):
            member_losses.append(_member_clm(ids_a, h_a, params))
            member_losses.append(_member_clm(ids_b, h_b, params))
        total = member_losses[0]
        for term in member_losses[1:]:
            total = T.add(total, term)
        clm_term = T.scale(total, 1.0 / m)
        components["clm"] = clm_term.item() / 2.0
        terms.append(clm_term)

    loss = terms[0]
    for term in terms[1:]:
        loss = T.add(loss, term)
    return loss, components
