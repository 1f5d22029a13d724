"""Pair sampling, optimization, and the learning-rate schedule.

Training consumes pairs of disjoint same-user windows: the contrastive
objective needs the pair, and the window-prediction objective runs on both
members. Users are admitted only when long enough to host two windows plus
twice the safety gap. The schedule is a linear warmup to the peak over the
first 6% of steps, then a linear decay to zero.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from . import model as M
from . import objectives as O
from .data import Dataset, NUM_SPECIALS

_SPLIT_STREAM = 11
_EPOCH_STREAM = 22
_VAL_STREAM = 33


class DatasetError(ValueError):
    """Dataset cannot support the requested sampling."""


class ScheduleError(ValueError):
    """Step outside the schedule's domain."""


class TrainingDivergedError(RuntimeError):
    """Loss went non-finite; carries the offending batch for diagnosis."""

    def __init__(self, message: str, batch_dump: dict):
        super().__init__(message)
        self.batch_dump = batch_dump


@dataclass(frozen=True)
class TrainConfig:
    seq_len: int = 64
    pair_gap: int = 16
    future_window: int = 16
    batch_size: int = 32
    epochs: int = 10
    peak_lr: float = 4e-4
    warmup_fraction: float = 0.06
    weight_decay: float = 0.01
    temperature: float = 0.1
    seed: int = 0
    objectives: tuple[str, ...] = ("fbp", "sup")
    beta1: float = 0.9
    beta2: float = 0.98
    eps: float = 1e-8
    clip_norm: float = 1.0

    def __post_init__(self):
        if not (0.0 < self.warmup_fraction < 1.0):
            raise ValueError("warmup_fraction must lie in (0, 1)")
        bad = set(self.objectives) - {"fbp", "sup", "clm"}
        if bad:
            raise ValueError(f"unknown objectives: {sorted(bad)}")
        if "sup" in self.objectives and self.batch_size < 2:
            raise ValueError("contrastive training needs batch_size >= 2")

    @property
    def admission_threshold(self) -> int:
        """Minimum user length: two windows plus twice the gap."""
        return 2 * self.seq_len + 2 * self.pair_gap


@dataclass(frozen=True)
class TrainingPair:
    user_id: str
    first_start: int
    second_start: int
    length: int

    def __post_init__(self):
        if self.second_start < self.first_start + self.length:
            raise ValueError("windows overlap")

    def distance(self) -> int:
        return self.second_start - (self.first_start + self.length)

    def windows(self, ids: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        a = ids[self.first_start:self.first_start + self.length]
        b = ids[self.second_start:self.second_start + self.length]
        return a, b


def qualifying_users(dataset: Dataset, config: TrainConfig) -> list[int]:
    thr = config.admission_threshold
    return [i for i, s in enumerate(dataset.sequences) if s.ids.size >= thr]


def sample_pairs(dataset: Dataset, config: TrainConfig,
                 rng: np.random.Generator,
                 user_indices: list[int] | None = None) -> list[TrainingPair]:
    """One pair per qualifying user, window starts uniform over valid
    placements, inter-window distance at least ``pair_gap``."""
    idxs = user_indices if user_indices is not None else qualifying_users(dataset, config)
    if len(idxs) < config.batch_size:
        raise DatasetError(
            f"dataset admits {len(idxs)} users of length >= "
            f"{config.admission_threshold}, need at least {config.batch_size}")
    length, gap = config.seq_len, config.pair_gap
    pairs = []
    for i in idxs:
        seq = dataset.sequences[i]
        t = seq.ids.size
        a = int(rng.integers(0, t - 2 * length - gap + 1))
        b = int(rng.integers(a + length + gap, t - length + 1))
        pair = TrainingPair(seq.user_id, a, b, length)
        if pair.distance() < gap:
            raise AssertionError("sampler produced a pair violating the gap")
        pairs.append(pair)
    return pairs


def lr_at(step: int, total_steps: int, config: TrainConfig) -> float:
    """Piecewise-linear schedule: 0 -> peak over the first 6% of steps, then
    peak -> 0 at the end. Exact peak at the warmup boundary."""
    if step < 0 or step > total_steps:
        raise ScheduleError(f"step {step} outside [0, {total_steps}]")
    if total_steps == 0:
        return 0.0
    warmup_end = max(1, math.ceil(config.warmup_fraction * total_steps))
    if step <= warmup_end:
        return config.peak_lr * step / warmup_end
    return config.peak_lr * (total_steps - step) / (total_steps - warmup_end)


class AdamW:
    """Adam with decoupled weight decay; decay applies to matrices only."""

    def __init__(self, named_tensors: list[tuple[str, T.Tensor]],
                 beta1: float = 0.9, beta2: float = 0.98, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.named = named_tensors
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.weight_decay = weight_decay
        self.t = 0
        self.m = {name: np.zeros_like(t.data) for name, t in named_tensors}
        self.v = {name: np.zeros_like(t.data) for name, t in named_tensors}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        bc1 = 1.0 - b1 ** self.t
        bc2 = 1.0 - b2 ** self.t
        for name, p in self.named:
            if p.grad is None:
                continue
            g = p.grad
            self.m[name] = b1 * self.m[name] + (1 - b1) * g
            self.v[name] = b2 * self.v[name] + (1 - b2) * g * g
            m_hat = self.m[name] / bc1
            v_hat = self.v[name] / bc2
            p.data -= (lr * m_hat / (np.sqrt(v_hat) + self.eps)).astype(p.data.dtype)
            if self.weight_decay and p.data.ndim >= 2:
                p.data -= (lr * self.weight_decay) * p.data

    def zero_grad(self) -> None:
        for _, p in self.named:
            p.zero_grad()


def clip_gradients(tensors: list[T.Tensor], max_norm: float) -> float:
    total = T.global_grad_norm(tensors)
    if max_norm and total > max_norm:
        factor = max_norm / (total + 1e-12)
        for p in tensors:
            if p.grad is not None:
                p.grad *= factor
    return total


def _batch_loss(batch_pairs: list[TrainingPair], dataset: Dataset,
                params: M.Parameters, config: TrainConfig):
    windows = [p.windows(dataset.by_user(p.user_id).ids) for p in batch_pairs]
    return O.combined_loss(windows, params, temperature=config.temperature,
                           objectives=frozenset(config.objectives),
                           label_first_id=NUM_SPECIALS)


def train(dataset: Dataset, model_config: M.ModelConfig, config: TrainConfig,
          out_dir: str | Path | None = None,
          params: M.Parameters | None = None
          ) -> tuple[M.Parameters, list[dict]]:
    """Full training run: 19:1 user split, per-epoch validation and checkpoint,
    reproducible from the seed in single-worker mode."""
    if model_config.future_window != config.future_window:
        raise M.ConfigError("model future_window and train future_window disagree")
    if config.seq_len <= config.future_window:
        raise M.ConfigError("seq_len must exceed future_window so every window "
                            "has label positions")

    idxs = qualifying_users(dataset, config)
    if len(idxs) < config.batch_size + 1:
        raise DatasetError(
            f"dataset admits {len(idxs)} users of length >= "
            f"{config.admission_threshold}, need at least {config.batch_size + 1}")
    split_rng = np.random.default_rng([config.seed, _SPLIT_STREAM])
    order = list(split_rng.permutation(len(idxs)))
    n_val = max(2 if "sup" in config.objectives else 1, len(idxs) // 20)
    val_users = [idxs[i] for i in order[:n_val]]
    train_users = [idxs[i] for i in order[n_val:]]

    steps_per_epoch = len(train_users) // config.batch_size
    if steps_per_epoch == 0:
        raise DatasetError("not enough training users for a single batch")
    total_steps = config.epochs * steps_per_epoch

    if params is None:
        params = M.init_parameters(model_config, seed=config.seed)
    opt = AdamW(params.named_tensors(), config.beta1, config.beta2, config.eps,
                config.weight_decay)
    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    metrics: list[dict] = []
    step = 0
    for epoch in range(config.epochs):
        epoch_rng = np.random.default_rng([config.seed, _EPOCH_STREAM, epoch])
        pairs = sample_pairs(dataset, config, epoch_rng, train_users)
        epoch_rng.shuffle(pairs)
        for start in range(0, steps_per_epoch * config.batch_size, config.batch_size):
            batch = pairs[start:start + config.batch_size]
            loss, comps = _batch_loss(batch, dataset, params, config)
            loss_val = loss.item()
            if not math.isfinite(loss_val):
                dump = {"epoch": epoch, "step": step,
                        "batch": [{"user": p.user_id, "first": p.first_start,
                                   "second": p.second_start, "len": p.length}
                                  for p in batch]}
                if out_path is not None:
                    (out_path / "diverged_batch.json").write_text(json.dumps(dump, indent=2))
                raise TrainingDivergedError(
                    f"non-finite loss at step {step}", dump)
            opt.zero_grad()
            loss.backward()
            clip_gradients(params.tensors(), config.clip_norm)
            step += 1
            lr = lr_at(step, total_steps, config)
            opt.step(lr)
            params.invalidate_fingerprint()
            metrics.append({"step": step, "epoch": epoch, "lr": lr,
                            "train_loss": loss_val, "val_loss": "",
                            **{k: comps.get(k, "") for k in ("fbp", "sup", "clm")}})

        val_loss = validation_loss(dataset, params, config, val_users, epoch)
        metrics.append({"step": step, "epoch": epoch, "lr": lr_at(step, total_steps, config),
                        "train_loss": "", "val_loss": val_loss,
                        "fbp": "", "sup": "", "clm": ""})
        if out_path is not None:
            M.save_params(params, out_path / f"checkpoint_epoch{epoch:02d}.bin")
    return params, metrics


def validation_loss(dataset: Dataset, params: M.Parameters, config: TrainConfig,
                    val_users: list[int], epoch: int) -> float:
    rng = np.random.default_rng([config.seed, _VAL_STREAM, epoch])
    cfg = config if len(val_users) >= config.batch_size else \
        replace(config, batch_size=max(2, len(val_users)))
    pairs = sample_pairs(dataset, cfg, rng, val_users)
    losses = []
    with T.no_grad():
        for start in range(0, len(pairs) - len(pairs) % cfg.batch_size, cfg.batch_size):
            batch = pairs[start:start + cfg.batch_size]
            loss, _ = _batch_loss(batch, dataset, params, cfg)
            losses.append(loss.item())
        if not losses:
            loss, _ = _batch_loss(pairs[:max(2, len(pairs))], dataset, params, cfg)
            losses.append(loss.item())
    return float(np.mean(losses))


def write_metrics_csv(rows: list[dict], path, header_comment: str | None = None) -> None:
    cols = ["step", "epoch", "lr", "train_loss", "val_loss", "fbp", "sup", "clm"]
    with open(path, "w") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        f.write(",".join(cols) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in cols) + "\n")
