"""Evaluation harness: ranking and classification metrics, the two static
tasks (user retrieval against hard negatives, future-behavior prediction via a
linear-probe MLP), the dynamic multi-period simulation, and the wall-clock
benchmark comparing update strategies.

All randomness flows from explicit seeds; evaluation is deterministic in
single-worker mode. Timing uses monotonic clocks and medians over repetitions
with a warm-up pass excluded.
"""

from __future__ import annotations

import logging
import time
import zlib
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from . import model as M
from . import state_store as S
from .data import Dataset, NUM_SPECIALS, cosine, tf_vector, tfidf_vectors
from .trainer import AdamW

log = logging.getLogger(__name__)

Embedder = Callable[[np.ndarray], np.ndarray]


class TaskError(ValueError):
    """Task construction impossible with the given data."""


class UndefinedMetricError(ValueError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class DataExhaustedError(ValueError):
    """The simulation schedule needs more behaviors than the data holds."""


# ---------------------------------------------------------------------------
# metrics

def mrr(ranks: Sequence[int]) -> float:
    """Mean reciprocal rank; ranks are 1-based."""
    arr = np.asarray(ranks, dtype=np.float64)
    if arr.size == 0:
        raise UndefinedMetricError("mrr of an empty rank list")
    if arr.min() < 1:
        raise UndefinedMetricError("ranks must be >= 1")
    return float((1.0 / arr).mean())


def harmonic_baseline(n_candidates: int) -> float:
    """Expected MRR of a uniformly random ranking over n candidates: H(n)/n."""
    return float(sum(1.0 / r for r in range(1, n_candidates + 1)) / n_candidates)


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores: Sequence[float], labels: Sequence[int]) -> float:
    """Probability that a random positive outscores a random negative, ties
    half-credited; computed by the rank statistic."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels)
    if s.shape != y.shape or s.ndim != 1:
        raise UndefinedMetricError("scores and labels must be flat and aligned")
    pos = int((y == 1).sum())
    neg = int((y == 0).sum())
    if pos + neg != y.size:
        raise UndefinedMetricError("labels must be 0/1")
    if pos == 0 or neg == 0:
        raise UndefinedMetricError("AUC needs both classes present")
    ranks = _average_ranks(s)
    rank_sum = float(ranks[y == 1].sum())
    return (rank_sum - pos * (pos + 1) / 2.0) / (pos * neg)


# ---------------------------------------------------------------------------
# embedders

def tf_embedder(vocab_size: int) -> Embedder:
    return lambda ids: tf_vector(ids, vocab_size)


def tfidf_embedder(dataset: Dataset) -> Embedder:
    """Inverse-document-frequency weights come from the dataset's documents;
    new sequences are embedded as tf * idf under those corpus weights."""
    docs = [s.ids for s in dataset.sequences]
    present = np.stack([tf_vector(d, dataset.vocab.size) > 0 for d in docs])
    df = present.sum(axis=0).astype(np.float64)
    idf = np.log((1.0 + len(docs)) / (1.0 + df)) + 1.0
    return lambda ids: tf_vector(ids, dataset.vocab.size) * idf


def model_embedder(params: M.Parameters, chunk_size: int | None = None) -> Embedder:
    return lambda ids: M.sequence_embedding(params, ids, chunk_size)


def random_embedder(dim: int, seed: int = 0) -> Embedder:
    """Content-keyed random vectors: deterministic per sequence, independent
    of evaluation order. The null model for metric calibration."""
    def embed(ids: np.ndarray) -> np.ndarray:
        key = zlib.crc32(np.asarray(ids, dtype=np.int64).tobytes())
        rng = np.random.default_rng([seed, key])
        return rng.standard_normal(dim)
    return embed


# ---------------------------------------------------------------------------
# user retrieval with hard negatives

@dataclass
class RetrievalInstance:
    query: np.ndarray
    candidates: list[np.ndarray]
    positive_index: int


def build_retrieval_task(dataset: Dataset, num_instances: int,
                         n_candidates: int = 20, hard_threshold: float = 0.8,
                         window: int = 128, gap: int = 16, seed: int = 0
                         ) -> list[RetrievalInstance]:
    """Per instance: a query window, one disjoint same-user window as the
    positive, and negatives drawn from other users whose TF cosine with the
    query exceeds the threshold (topped up with the most similar remaining
    windows when the hard pool underfills; logged)."""
    rng = np.random.default_rng([seed, 1])
    need = 2 * window + gap
    eligible = [i for i, s in enumerate(dataset.sequences) if s.ids.size >= need]
    if len(eligible) < n_candidates + 1:
        raise TaskError(f"retrieval needs at least {n_candidates + 1} users of "
                        f"length >= {need}, got {len(eligible)}")
    if num_instances > len(eligible):
        raise TaskError(f"cannot build {num_instances} instances from "
                        f"{len(eligible)} eligible users")

    vocab_size = dataset.vocab.size
    query_users = rng.choice(len(eligible), size=num_instances, replace=False)
    instances = []
    underfilled = 0
    for qi in query_users:
        seq = dataset.sequences[eligible[qi]]
        t = seq.ids.size
        a = int(rng.integers(0, t - need + 1))
        b = int(rng.integers(a + window + gap, t - window + 1))
        query = seq.ids[a:a + window]
        positive = seq.ids[b:b + window]

        q_tf = tf_vector(query, vocab_size)
        neg_windows, sims = [], []
        for oi in eligible:
            if oi == eligible[qi]:
                continue
            other = dataset.sequences[oi]
            start = int(rng.integers(0, other.ids.size - window + 1))
            w = other.ids[start:start + window]
            neg_windows.append(w)
            sims.append(cosine(q_tf, tf_vector(w, vocab_size)))
        sims = np.asarray(sims)
        hard = np.flatnonzero(sims > hard_threshold)
        k = n_candidates - 1
        if hard.size >= k:
            chosen = list(rng.choice(hard, size=k, replace=False))
        else:
            underfilled += 1
            hard_set = set(hard.tolist())
            top_up = [i for i in np.argsort(-sims, kind="stable")
                      if i not in hard_set][:k - hard.size]
            chosen = list(hard) + top_up
        candidates = [neg_windows[int(i)] for i in chosen]
        pos_idx = int(rng.integers(0, len(candidates) + 1))
        candidates.insert(pos_idx, positive)
        instances.append(RetrievalInstance(query, candidates, pos_idx))
    if underfilled:
        log.info("retrieval: %d/%d instances fell back to top-similarity "
                 "negatives (hard pool under %.2f underfilled)",
                 underfilled, num_instances, hard_threshold)
    return instances


def run_retrieval(instances: Sequence[RetrievalInstance], embedder: Embedder,
                  workers: int = 1) -> float:
    """Rank candidates by cosine with the query embedding (ties broken by
    candidate index); return the MRR of the positive candidates."""
    def rank_of(inst: RetrievalInstance) -> int:
        q = embedder(inst.query)
        sims = np.array([cosine(q, embedder(c)) for c in inst.candidates])
        order = np.argsort(-sims, kind="stable")
        return int(np.flatnonzero(order == inst.positive_index)[0]) + 1

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=workers) as pool:
            ranks = list(pool.map(rank_of, instances))
    else:
        ranks = [rank_of(inst) for inst in instances]
    return mrr(ranks)


# ---------------------------------------------------------------------------
# probe classifier

@dataclass
class ProbeConfig:
    hidden: int = 64
    epochs: int = 200
    lr: float = 0.01
    check_every: int = 10
    patience: int = 5
    seed: int = 0


class MLPProbe:
    """One-hidden-layer multi-label classifier trained on frozen embeddings,
    early-stopped on validation macro AUC."""

    def __init__(self, in_dim: int, out_dim: int, cfg: ProbeConfig):
        rng = np.random.default_rng(cfg.seed)
        self.cfg = cfg
        std1 = in_dim ** -0.5
        std2 = cfg.hidden ** -0.5
        self.w1 = T.randn(rng, (in_dim, cfg.hidden), std=std1, requires_grad=True)
        self.b1 = T.zeros((cfg.hidden,), requires_grad=True)
        self.w2 = T.randn(rng, (cfg.hidden, out_dim), std=std2, requires_grad=True)
        self.b2 = T.zeros((out_dim,), requires_grad=True)

    def _params(self) -> list[tuple[str, T.Tensor]]:
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2)]

    def _forward(self, x: T.Tensor) -> T.Tensor:
        h = T.gelu(T.add_bias(T.matmul(x, self.w1), self.b1))
        return T.add_bias(T.matmul(h, self.w2), self.b2)

    def scores(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self._forward(T.Tensor(x.astype(np.float32))).data

    def fit(self, x: np.ndarray, y: np.ndarray,
            x_val: np.ndarray, y_val: np.ndarray) -> float:
        xt = T.Tensor(x.astype(np.float32))
        opt = AdamW(self._params(), weight_decay=0.0)
        best_auc, best_weights, stale = -1.0, None, 0
        for epoch in range(1, self.cfg.epochs + 1):
            loss = T.bce_with_logits(self._forward(xt), y.astype(np.float32))
            opt.zero_grad()
            loss.backward()
            opt.step(self.cfg.lr)
            if epoch % self.cfg.check_every == 0:
                val_auc = macro_auc(self.scores(x_val), y_val)
                if val_auc > best_auc:
                    best_auc = val_auc
                    best_weights = [p.data.copy() for _, p in self._params()]
                    stale = 0
                else:
                    stale += 1
                    if stale >= self.cfg.patience:
                        break
        if best_weights is not None:
            for (_, p), w in zip(self._params(), best_weights):
                p.data = w
        return best_auc


def macro_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean AUC over label columns that contain both classes; columns with a
    single class are excluded (and logged)."""
    vals, skipped = [], 0
    for j in range(labels.shape[1]):
        col = labels[:, j]
        if col.min() == col.max():
            skipped += 1
            continue
        vals.append(auc(scores[:, j], col.astype(int)))
    if not vals:
        raise UndefinedMetricError("every label column is single-class")
    if skipped:
        log.debug("macro_auc: skipped %d single-class columns", skipped)
    return float(np.mean(vals))


def presence_labels(ids: np.ndarray, start: int, horizon: int,
                    num_predicted: int, first_id: int = NUM_SPECIALS) -> np.ndarray:
    """Binary vector: does behavior (first_id + n) occur in ids[start:start+horizon]."""
    window = ids[start:start + horizon]
    out = np.zeros(num_predicted, dtype=np.float32)
    cols = window - first_id
    out[cols[(cols >= 0) & (cols < num_predicted)]] = 1.0
    return out


def future_behavior_task(dataset: Dataset, embedder: Embedder,
                         horizon: int = 64, input_len: int = 128,
                         num_predicted: int | None = None,
                         probe_cfg: ProbeConfig | None = None,
                         seed: int = 0) -> float:
    """Embed each user's input window, predict per-behavior presence within
    the next ``horizon`` actions with a probe, 3:1:1 split, macro AUC."""
    probe_cfg = probe_cfg or ProbeConfig(seed=seed)
    n_pred = num_predicted or dataset.vocab.num_behaviors
    eligible = [s for s in dataset.sequences if s.ids.size >= input_len + horizon]
    if len(eligible) < 10:
        raise TaskError(f"future-behavior task needs >= 10 users of length "
                        f">= {input_len + horizon}, got {len(eligible)}")
    embs = np.stack([embedder(s.ids[:input_len]) for s in eligible])
    labels = np.stack([presence_labels(s.ids, input_len, horizon, n_pred)
                       for s in eligible])
    rng = np.random.default_rng([seed, 2])
    order = rng.permutation(len(eligible))
    n = len(eligible)
    n_train, n_val = 3 * n // 5, n // 5
    tr = order[:n_train]
    va = order[n_train:n_train + n_val]
    te = order[n_train + n_val:]
    probe = MLPProbe(embs.shape[1], n_pred, probe_cfg)
    probe.fit(embs[tr], labels[tr], embs[va], labels[va])
    return macro_auc(probe.scores(embs[te]), labels[te])


# ---------------------------------------------------------------------------
# dynamic simulation

@dataclass(frozen=True)
class SimulationSchedule:
    initial: int = 64
    increment: int = 64
    periods: int = 8

    def __post_init__(self):
        if self.initial < 1 or self.increment < 1 or self.periods < 1:
            raise ValueError("schedule needs initial, increment, periods >= 1")

    def period_slice(self, period: int) -> tuple[int, int]:
        if period == 0:
            return 0, self.initial
        start = self.initial + (period - 1) * self.increment
        return start, start + self.increment

    def consumed(self, period: int) -> int:
        return self.initial + period * self.increment

    @property
    def required_length(self) -> int:
        # all periods plus one increment of next-period labels
        return self.initial + self.periods * self.increment


ALL_STRATEGIES = (S.UpdateStrategy.STATEFUL, S.UpdateStrategy.RECENT_ONLY,
                  S.UpdateStrategy.POOL_EMBEDDINGS, S.UpdateStrategy.RECOMPUTE_ALL)


def simulate_dynamic(dataset: Dataset, params: M.Parameters,
                     schedule: SimulationSchedule,
                     strategies: Sequence[S.UpdateStrategy] = ALL_STRATEGIES,
                     seed: int = 0, probe_cfg: ProbeConfig | None = None,
                     num_users: int | None = None,
                     retrain_probe_each_period: bool = False,
                     chunk_size: int = S.DEFAULT_CHUNK
                     ) -> tuple[list[dict], list[dict]]:
    """Multi-period protocol. Per period and strategy it reports next-period
    behavior-prediction macro AUC (probe trained once on period-0 embeddings of
    an independent user split) and re-identification MRR against historical
    embeddings computed once over the full simulated span. Wall-clock per
    update strategy is recorded alongside.
    """
    probe_cfg = probe_cfg or ProbeConfig(seed=seed)
    need = schedule.required_length
    eligible = [s for s in dataset.sequences if s.ids.size >= need]
    if len(eligible) < 8:
        raise DataExhaustedError(f"schedule needs {need} behaviors per user; "
                                 f"only {len(eligible)} users are long enough")
    rng = np.random.default_rng([seed, 3])
    order = rng.permutation(len(eligible))
    n_probe = len(eligible) // 2
    probe_users = [eligible[i] for i in order[:n_probe]]
    sim_users = [eligible[i] for i in order[n_probe:]]
    if num_users is not None:
        sim_users = sim_users[:num_users]
    n_pred = params.config.num_predicted

    def period0_embedding(seq) -> np.ndarray:
        return M.sequence_embedding(params, seq.ids[:schedule.initial], chunk_size)

    def train_probe(embs: np.ndarray, labels: np.ndarray) -> MLPProbe:
        p_rng = np.random.default_rng([seed, 4])
        p_order = p_rng.permutation(len(embs))
        n_val = max(1, len(embs) // 5)
        va, tr = p_order[:n_val], p_order[n_val:]
        probe = MLPProbe(embs.shape[1], n_pred, probe_cfg)
        probe.fit(embs[tr], labels[tr], embs[va], labels[va])
        return probe

    probe_embs = np.stack([period0_embedding(s) for s in probe_users])
    probe_labels = np.stack([presence_labels(s.ids, schedule.initial,
                                             schedule.increment, n_pred)
                             for s in probe_users])
    probe = train_probe(probe_embs, probe_labels)

    hist_len = schedule.consumed(schedule.periods - 1)
    hist_embs = np.stack([M.sequence_embedding(params, s.ids[:hist_len], chunk_size)
                          for s in sim_users])
    hist_unit = hist_embs / np.linalg.norm(hist_embs, axis=1, keepdims=True)

    states: dict[S.UpdateStrategy, list[S.UserState]] = {}
    for strat in strategies:
        if strat in (S.UpdateStrategy.STATEFUL, S.UpdateStrategy.POOL_EMBEDDINGS):
            states[strat] = [S.init_user(s.user_id, params) for s in sim_users]

    metric_rows, timing_rows = [], []
    cumulative = {strat: 0.0 for strat in strategies}
    for period in range(schedule.periods):
        lo, hi = schedule.period_slice(period)
        for strat in strategies:
            embs = np.zeros((len(sim_users), params.config.hidden_size),
                            dtype=np.float64)
            t0 = time.perf_counter()
            for ui, seq in enumerate(sim_users):
                chunk = seq.ids[lo:hi]
                if strat is S.UpdateStrategy.STATEFUL:
                    states[strat][ui], emb = S.update_stateful(
                        states[strat][ui], chunk, params, chunk_size)
                elif strat is S.UpdateStrategy.RECENT_ONLY:
                    emb = S.update_recent_only(chunk, params, chunk_size)
                elif strat is S.UpdateStrategy.POOL_EMBEDDINGS:
                    states[strat][ui], emb = S.update_pool(
                        states[strat][ui], chunk, params, chunk_size)
                else:
                    emb = S.update_recompute_all(seq.ids[:hi], params,
                                                 chunk_size=chunk_size)
                embs[ui] = emb
            elapsed = time.perf_counter() - t0
            cumulative[strat] += elapsed
            timing_rows.append({"strategy": strat.value, "period": period,
                                "period_seconds": elapsed,
                                "cumulative_seconds": cumulative[strat]})

            if retrain_probe_each_period and period > 0:
                pe = np.stack([_strategy_embedding(strat, s, schedule, period,
                                                   params, chunk_size)
                               for s in probe_users])
                pl = np.stack([presence_labels(s.ids, schedule.consumed(period),
                                               schedule.increment, n_pred)
                               for s in probe_users])
                period_probe = train_probe(pe, pl)
            else:
                period_probe = probe

            labels = np.stack([presence_labels(s.ids, hi, schedule.increment, n_pred)
                               for s in sim_users])
            npp = macro_auc(period_probe.scores(embs.astype(np.float32)), labels)
            metric_rows.append({"metric": "npp_auc", "strategy": strat.value,
                                "period": period, "seed": seed, "value": npp})

            unit = embs / np.maximum(np.linalg.norm(embs, axis=1, keepdims=True), 1e-12)
            sims = unit @ hist_unit.T
            ranks = []
            for ui in range(len(sim_users)):
                order = np.argsort(-sims[ui], kind="stable")
                ranks.append(int(np.flatnonzero(order == ui)[0]) + 1)
            metric_rows.append({"metric": "reid_mrr", "strategy": strat.value,
                                "period": period, "seed": seed, "value": mrr(ranks)})
    return metric_rows, timing_rows


def _strategy_embedding(strategy: S.UpdateStrategy, seq, schedule: SimulationSchedule,
                        period: int, params: M.Parameters, chunk_size: int
                        ) -> np.ndarray:
    """Embedding of one user at one period under a strategy, from scratch.
    Only used by the retrain-per-period probe variant."""
    end = schedule.consumed(period)
    if strategy is S.UpdateStrategy.RECENT_ONLY:
        lo, hi = schedule.period_slice(period)
        return S.update_recent_only(seq.ids[lo:hi], params, chunk_size)
    if strategy is S.UpdateStrategy.POOL_EMBEDDINGS:
        st = S.init_user(seq.user_id, params)
        emb = None
        for p in range(period + 1):
            lo, hi = schedule.period_slice(p)
            st, emb = S.update_pool(st, seq.ids[lo:hi], params, chunk_size)
        return emb
    return S.update_recompute_all(seq.ids[:end], params, chunk_size=chunk_size)


# ---------------------------------------------------------------------------
# wall-clock benchmark

def bench_strategies(dataset: Dataset, params: M.Parameters,
                     schedule: SimulationSchedule, num_users: int = 16,
                     repetitions: int = 5, seed: int = 0,
                     chunk_size: int = S.DEFAULT_CHUNK) -> list[dict]:
    """Median wall-clock per strategy per period, warm-up excluded.

    Updates stream one user at a time, which bounds peak memory at a single
    sequence regardless of strategy (the batch-size analogue of equalizing
    the memory budget between strategies).
    """
    need = schedule.consumed(schedule.periods - 1)
    eligible = [s for s in dataset.sequences if s.ids.size >= need]
    if len(eligible) < num_users:
        raise DataExhaustedError(f"benchmark needs {num_users} users with "
                                 f">= {need} behaviors, got {len(eligible)}")
    users = eligible[:num_users]

    # warm-up: exercise every code path once, untimed
    warm_state = S.init_user("warmup", params)
    warm_ids = users[0].ids[:schedule.initial]
    S.update_stateful(warm_state, warm_ids, params, chunk_size)
    S.update_recent_only(warm_ids, params, chunk_size)
    S.update_recompute_all(warm_ids, params, chunk_size=chunk_size)

    rows = []
    for strat in ALL_STRATEGIES:
        states = [S.init_user(s.user_id, params) for s in users]
        cumulative = 0.0
        for period in range(schedule.periods):
            lo, hi = schedule.period_slice(period)
            samples = []
            for _ in range(repetitions):
                trial_states = [st.copy() for st in states]
                t0 = time.perf_counter()
                for ui, seq in enumerate(users):
                    chunk = seq.ids[lo:hi]
                    if strat is S.UpdateStrategy.STATEFUL:
                        trial_states[ui], _ = S.update_stateful(
                            trial_states[ui], chunk, params, chunk_size)
                    elif strat is S.UpdateStrategy.RECENT_ONLY:
                        S.update_recent_only(chunk, params, chunk_size)
                    elif strat is S.UpdateStrategy.POOL_EMBEDDINGS:
                        trial_states[ui], _ = S.update_pool(
                            trial_states[ui], chunk, params, chunk_size)
                    else:
                        S.update_recompute_all(seq.ids[:hi], params,
                                               chunk_size=chunk_size)
                samples.append(time.perf_counter() - t0)
            states = trial_states
            period_s = float(np.median(samples))
            cumulative += period_s
            rows.append({"strategy": strat.value, "period": period,
                         "period_seconds": period_s,
                         "cumulative_seconds": cumulative})
    return rows


def write_rows_csv(rows: list[dict], columns: list[str], path,
                   header_comment: str | None = None) -> None:
    with open(path, "w") as f:
        if header_comment:
            f.write(f"# {header_comment}\n")
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(str(row.get(c, "")) for c in columns) + "\n")


def linear_fit_r2(xs: Sequence[float], ys: Sequence[float]) -> float:
    """R^2 of an ordinary least-squares line; the benchmark's linearity check."""
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(x, y, 1)
    pred = a * x + b
    ss_res = float(((y - pred) ** 2).sum())
    ss_tot = float(((y - y.mean()) ** 2).sum())
    if ss_tot == 0:
        return 1.0
    return 1.0 - ss_res / ss_tot
