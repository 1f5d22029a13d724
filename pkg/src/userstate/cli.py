"""Operator surface: data generation, training, embedding, state updates,
evaluation, the dynamic simulation, the efficiency benchmark, the future-window
sweep, and state inspection.

Configuration comes from optional ``key = value`` text files overridden by
command-line flags; the resolved configuration is echoed and hashed into a
provenance header at the top of every output file. Every subcommand honors
``--seed``; ``--workers 1`` (the default) keeps runs bit-reproducible.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import data as D
from . import evaluation as E
from . import model as M
from . import state_store as S
from . import trainer as TR


class ValidationFailure(Exception):
    """Bad configuration value; carries the offending key."""

    def __init__(self, key: str, message: str):
        super().__init__(f"{key}: {message}")
        self.key = key


def read_config_file(path: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationFailure(f"{path}:{lineno}", "expected 'key = value'")
        key, _, value = line.partition("=")
        values[key.strip()] = value.strip()
    return values


def _coerce(text: str, like) -> object:
    if isinstance(like, bool):
        if text.lower() in ("1", "true", "yes", "on"):
            return True
        if text.lower() in ("0", "false", "no", "off"):
            return False
        raise ValidationFailure("config", f"expected a boolean, got {text!r}")
    if like is None:
        return text
    return type(like)(text)


def resolve_config(args: argparse.Namespace, keys: list[str]) -> dict:
    """Merge config-file values with flags; flags win. Echo the result."""
    file_vals = read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key in keys:
        flag_val = getattr(args, key.replace("-", "_"), None)
        if key in file_vals and flag_val == _DEFAULTS.get(key, flag_val):
            # flag left at its default: the file value wins
            resolved[key] = _coerce(file_vals[key], flag_val)
        else:
            resolved[key] = flag_val
    for key in resolved:
        setattr(args, key.replace("-", "_"), resolved[key])
    return resolved


def config_hash(resolved: dict) -> str:
    text = "\n".join(f"{k}={resolved[k]}" for k in sorted(resolved))
    return hashlib.sha256(text.encode()).hexdigest()[:12]


def provenance(resolved: dict) -> str:
    line = f"userstate v{__version__} config_hash={config_hash(resolved)}"
    if "seed" in resolved:
        line += f" seed={resolved['seed']}"
    return line


def echo(resolved: dict) -> None:
    print(f"# {provenance(resolved)}")
    for k in sorted(resolved):
        print(f"# {k} = {resolved[k]}")


_DEFAULTS: dict[str, object] = {}


def _track_defaults(parser: argparse.ArgumentParser) -> None:
    for action in parser._actions:
        if action.dest != "help":
            _DEFAULTS[action.dest.replace("_", "-")] = action.default


# ---------------------------------------------------------------------------
# subcommands

def cmd_gen_data(args) -> int:
    keys = ["users", "length", "seed", "vocab-size", "archetypes", "perturbation",
            "session-mean", "drift", "out"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    spec = D.PersonaSpec(num_behaviors=args.vocab_size,
                         num_archetypes=args.archetypes,
                         perturbation_scale=args.perturbation,
                         session_mean=args.session_mean,
                         drift_rate=args.drift)
    dataset = D.generate_dataset(spec, args.users, args.length, args.seed)
    out = Path(args.out)
    D.write_dataset(dataset, out, provenance=provenance(resolved))
    D.write_vocab(dataset.vocab, out.with_suffix(".vocab"))
    print(f"wrote {len(dataset)} users to {out} "
          f"(vocab {dataset.vocab.size} at {out.with_suffix('.vocab')})")
    return 0


def _load_dataset(args) -> D.Dataset:
    data_path = Path(args.data)
    vocab_path = Path(args.vocab) if getattr(args, "vocab", None) \
        else data_path.with_suffix(".vocab")
    vocab = D.read_vocab(vocab_path)
    return D.read_dataset(data_path, vocab)


_OBJECTIVE_SETS = {
    "use": ("fbp", "sup"),
    "use-fbp": ("fbp",),
    "use-sup": ("sup",),
    "use-clm": ("clm",),
}


def cmd_train(args) -> int:
    keys = ["data", "objective", "out", "metrics", "seed", "epochs", "seq-len",
            "pair-gap", "future-window", "batch-size", "peak-lr", "temperature",
            "layers", "heads", "hidden", "ffn", "checkpoint-dir"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    if args.objective not in _OBJECTIVE_SETS:
        raise ValidationFailure("objective", f"unknown objective {args.objective!r}; "
                                             f"choose from {sorted(_OBJECTIVE_SETS)}")
    dataset = _load_dataset(args)
    model_cfg = M.ModelConfig(vocab_size=dataset.vocab.size,
                              num_layers=args.layers, num_heads=args.heads,
                              hidden_size=args.hidden, ffn_size=args.ffn,
                              num_predicted=dataset.vocab.num_behaviors,
                              future_window=args.future_window)
    train_cfg = TR.TrainConfig(seq_len=args.seq_len, pair_gap=args.pair_gap,
                               future_window=args.future_window,
                               batch_size=args.batch_size, epochs=args.epochs,
                               peak_lr=args.peak_lr, temperature=args.temperature,
                               seed=args.seed,
                               objectives=_OBJECTIVE_SETS[args.objective])
    params, metrics = TR.train(dataset, model_cfg, train_cfg,
                               out_dir=args.checkpoint_dir)
    M.save_params(params, args.out)
    if args.metrics:
        TR.write_metrics_csv(metrics, args.metrics, provenance(resolved))
    final = [m for m in metrics if m["val_loss"] != ""]
    if final:
        print(f"final validation loss: {final[-1]['val_loss']:.4f}")
    print(f"wrote model to {args.out} (fingerprint {params.fingerprint()[:12]})")
    return 0


def cmd_embed(args) -> int:
    keys = ["model", "data", "out", "seed", "workers"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    params = M.load_params(args.model)
    dataset = _load_dataset(args)
    embedder = E.model_embedder(params)

    def one(seq):
        return seq.user_id, embedder(seq.ids)

    if args.workers > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            rows = list(pool.map(one, dataset.sequences))
    else:
        rows = [one(s) for s in dataset.sequences]
    with open(args.out, "w") as f:
        f.write(f"# {provenance(resolved)}\n")
        dims = ",".join(f"e{i}" for i in range(params.config.hidden_size))
        f.write(f"user_id,{dims}\n")
        for uid, vec in rows:
            f.write(uid + "," + ",".join(f"{v:.6g}" for v in vec) + "\n")
    print(f"wrote {len(rows)} embeddings to {args.out}")
    return 0


_STRATEGIES = {s.value: s for s in S.UpdateStrategy}


def cmd_update_state(args) -> int:
    keys = ["model", "store", "data", "strategy", "seed", "archive"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    if args.strategy not in _STRATEGIES:
        raise ValidationFailure("strategy", f"unknown strategy {args.strategy!r}; "
                                            f"choose from {sorted(_STRATEGIES)}")
    strategy = _STRATEGIES[args.strategy]
    params = M.load_params(args.model)
    dataset = _load_dataset(args)
    store = S.StateStore(args.store, archive_history=args.archive
                         or strategy is S.UpdateStrategy.RECOMPUTE_ALL)
    fp = params.fingerprint()
    for seq in dataset.sequences:
        try:
            state = store.load_user(seq.user_id, expected_fingerprint=fp)
        except KeyError:
            state = S.init_user(seq.user_id, params)
        if strategy is S.UpdateStrategy.STATEFUL:
            state, emb = S.update_stateful(state, seq.ids, params)
        elif strategy is S.UpdateStrategy.RECENT_ONLY:
            emb = S.update_recent_only(seq.ids, params)
            state.periods_seen += 1
            state.behaviors_seen += seq.ids.size
        elif strategy is S.UpdateStrategy.POOL_EMBEDDINGS:
            state, emb = S.update_pool(state, seq.ids, params)
        else:
            store.append_history(seq.user_id, seq.ids)
            history = store.load_history(seq.user_id)
            emb = S.update_recompute_all(history, params)
            state.periods_seen += 1
            state.behaviors_seen += seq.ids.size
        if args.archive and strategy is not S.UpdateStrategy.RECOMPUTE_ALL:
            store.append_history(seq.user_id, seq.ids)
        store.save_user(state)
        print(f"{seq.user_id}\t{emb[:4].round(4).tolist()}... "
              f"(n={state.behaviors_seen}, periods={state.periods_seen})")
    return 0


def _make_embedder(args, dataset: D.Dataset, seed: int) -> tuple[str, E.Embedder]:
    if args.model:
        params = M.load_params(args.model)
        return "model", E.model_embedder(params)
    name = args.embedder
    if name == "tf":
        return "tf", E.tf_embedder(dataset.vocab.size)
    if name == "tfidf":
        return "tfidf", E.tfidf_embedder(dataset)
    if name == "random":
        return "random", E.random_embedder(32, seed)
    raise ValidationFailure("embedder", f"unknown embedder {name!r}")


def cmd_eval(args) -> int:
    keys = ["data", "model", "embedder", "out", "seed", "candidates", "window",
            "threshold", "instances", "horizon", "input-len", "workers"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    dataset = _load_dataset(args)
    name, embedder = _make_embedder(args, dataset, args.seed)
    rows = []
    if args.task == "retrieval":
        instances = E.build_retrieval_task(dataset, num_instances=args.instances,
                                           n_candidates=args.candidates,
                                           hard_threshold=args.threshold,
                                           window=args.window, seed=args.seed)
        value = E.run_retrieval(instances, embedder, workers=args.workers)
        rows.append({"metric": "retrieval_mrr", "strategy": name, "period": "",
                     "seed": args.seed, "value": value})
        print(f"retrieval MRR ({name}, {len(instances)} instances, "
              f"{args.candidates} candidates): {value:.4f} "
              f"[random baseline {E.harmonic_baseline(args.candidates):.4f}]")
    else:
        value = E.future_behavior_task(dataset, embedder, horizon=args.horizon,
                                       input_len=args.input_len, seed=args.seed)
        rows.append({"metric": "future_behavior_auc", "strategy": name,
                     "period": "", "seed": args.seed, "value": value})
        print(f"future-behavior macro AUC ({name}): {value:.4f}")
    if args.out:
        E.write_rows_csv(rows, ["metric", "strategy", "period", "seed", "value"],
                         args.out, provenance(resolved))
    return 0


def cmd_simulate(args) -> int:
    keys = ["model", "data", "periods", "initial", "increment", "strategies",
            "seed", "out", "timing-out", "users"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    params = M.load_params(args.model)
    dataset = _load_dataset(args)
    schedule = E.SimulationSchedule(args.initial, args.increment, args.periods)
    strategies = []
    for name in args.strategies.split(","):
        name = name.strip()
        if name not in _STRATEGIES:
            raise ValidationFailure("strategies", f"unknown strategy {name!r}")
        strategies.append(_STRATEGIES[name])
    metric_rows, timing_rows = E.simulate_dynamic(
        dataset, params, schedule, strategies, seed=args.seed,
        num_users=args.users)
    E.write_rows_csv(metric_rows, ["metric", "strategy", "period", "seed", "value"],
                     args.out, provenance(resolved))
    if args.timing_out:
        E.write_rows_csv(timing_rows,
                         ["strategy", "period", "period_seconds", "cumulative_seconds"],
                         args.timing_out, provenance(resolved))
    for metric in ("npp_auc", "reid_mrr"):
        print(f"{metric} (mean over periods):")
        for strat in strategies:
            vals = [r["value"] for r in metric_rows
                    if r["metric"] == metric and r["strategy"] == strat.value]
            print(f"  {strat.value:<14} {np.mean(vals):.4f}")
    return 0


def cmd_bench(args) -> int:
    keys = ["model", "data", "periods", "initial", "increment", "users", "reps",
            "seed", "out"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    params = M.load_params(args.model)
    if args.data:
        dataset = _load_dataset(args)
    else:
        spec = D.PersonaSpec(num_behaviors=params.config.vocab_size - D.NUM_SPECIALS)
        length = args.initial + args.periods * args.increment
        dataset = D.generate_dataset(spec, args.users, length, args.seed)
    schedule = E.SimulationSchedule(args.initial, args.increment, args.periods)
    rows = E.bench_strategies(dataset, params, schedule, num_users=args.users,
                              repetitions=args.reps, seed=args.seed)
    E.write_rows_csv(rows, ["strategy", "period", "period_seconds",
                            "cumulative_seconds"], args.out, provenance(resolved))
    for strat in E.ALL_STRATEGIES:
        total = max(r["cumulative_seconds"] for r in rows
                    if r["strategy"] == strat.value)
        print(f"{strat.value:<14} cumulative {total:.3f}s over {args.periods} periods")
    return 0


def cmd_sweep_w(args) -> int:
    keys = ["data", "w", "input-lengths", "seed", "epochs", "out", "seq-len",
            "candidates", "instances"]
    resolved = resolve_config(args, keys)
    echo(resolved)
    dataset = _load_dataset(args)
    windows = [int(w) for w in args.w.split(",")]
    input_lengths = [int(n) for n in args.input_lengths.split(",")]
    rows = []
    for w in windows:
        if w >= args.seq_len:
            raise ValidationFailure("w", f"future window {w} must be smaller than "
                                         f"seq-len {args.seq_len}")
        model_cfg = M.ModelConfig(vocab_size=dataset.vocab.size,
                                  num_predicted=dataset.vocab.num_behaviors,
                                  future_window=w)
        train_cfg = TR.TrainConfig(seq_len=args.seq_len, future_window=w,
                                   epochs=args.epochs, seed=args.seed,
                                   objectives=("fbp",))
        params, _ = TR.train(dataset, model_cfg, train_cfg)
        embedder = E.model_embedder(params)
        for n in input_lengths:
            instances = E.build_retrieval_task(dataset, num_instances=args.instances,
                                               n_candidates=args.candidates,
                                               window=n, seed=args.seed)
            value = E.run_retrieval(instances, embedder)
            rows.append({"metric": "retrieval_mrr", "strategy": f"w={w}",
                         "period": n, "seed": args.seed, "value": value})
            print(f"W={w:<5} input_len={n:<5} MRR={value:.4f}")
    E.write_rows_csv(rows, ["metric", "strategy", "period", "seed", "value"],
                     args.out, provenance(resolved))
    return 0


def cmd_inspect_state(args) -> int:
    store = S.StateStore(args.store)
    state = store.load_user(args.user)
    print(f"user_id:          {state.user_id}")
    print(f"fingerprint:      {state.fingerprint}")
    print(f"format version:   {state.version}")
    print(f"behaviors_seen:   {state.behaviors_seen}")
    print(f"tokens_processed: {state.model_state.tokens_processed}")
    print(f"periods_seen:     {state.periods_seen}")
    print(f"layers:           {len(state.model_state.layer_states)}")
    heads = state.model_state.layer_states[0].heads if state.model_state.layer_states else []
    print(f"heads per layer:  {len(heads)}")
    if heads:
        print(f"state shape:      {heads[0].matrix.shape[0]}x{heads[0].matrix.shape[1]}")
    print(f"embedding[:8]:    {state.running_embedding[:8].round(5).tolist()}")
    print(f"pooled periods:   {len(state.period_embeddings)}")
    return 0


# ---------------------------------------------------------------------------
# parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="userstate",
        description="Stateful behavior-sequence user embeddings: data, training, "
                    "state updates, evaluation, benchmarking.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="key = value config file; flags override")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("gen-data", help="generate a synthetic persona corpus")
    common(p)
    p.add_argument("--users", type=int, default=800)
    p.add_argument("--length", type=int, default=1024)
    p.add_argument("--vocab-size", type=int, default=64)
    p.add_argument("--archetypes", type=int, default=8)
    p.add_argument("--perturbation", type=float, default=0.3)
    p.add_argument("--session-mean", type=float, default=12.0)
    p.add_argument("--drift", type=float, default=0.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    _track_defaults(p)

    p = sub.add_parser("train", help="train a model on a corpus")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--objective", default="use",
                   choices=sorted(_OBJECTIVE_SETS))
    p.add_argument("--out", required=True)
    p.add_argument("--metrics")
    p.add_argument("--checkpoint-dir")
    p.add_argument("--epochs", type=int, default=10)
    p.add_argument("--seq-len", type=int, default=64)
    p.add_argument("--pair-gap", type=int, default=16)
    p.add_argument("--future-window", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--peak-lr", type=float, default=4e-4)
    p.add_argument("--temperature", type=float, default=0.1)
    p.add_argument("--layers", type=int, default=2)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--hidden", type=int, default=32)
    p.add_argument("--ffn", type=int, default=128)
    p.set_defaults(func=cmd_train)
    _track_defaults(p)

    p = sub.add_parser("embed", help="embed every sequence in a corpus")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--out", required=True)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_embed)
    _track_defaults(p)

    p = sub.add_parser("update-state", help="apply one period of new behaviors "
                                            "to a state store")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--strategy", default="stateful", choices=sorted(_STRATEGIES))
    p.add_argument("--archive", action="store_true",
                   help="also archive raw sequences in the store")
    p.set_defaults(func=cmd_update_state)
    _track_defaults(p)

    p = sub.add_parser("eval", help="static evaluation tasks")
    common(p)
    p.add_argument("task", choices=["retrieval", "fbp"])
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--model")
    p.add_argument("--embedder", default="tf", choices=["tf", "tfidf", "random"])
    p.add_argument("--out")
    p.add_argument("--candidates", type=int, default=20)
    p.add_argument("--window", type=int, default=128)
    p.add_argument("--threshold", type=float, default=0.8)
    p.add_argument("--instances", type=int, default=200)
    p.add_argument("--horizon", type=int, default=64)
    p.add_argument("--input-len", type=int, default=128)
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_eval)
    _track_defaults(p)

    p = sub.add_parser("simulate", help="dynamic multi-period simulation")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--periods", type=int, default=8)
    p.add_argument("--initial", type=int, default=64)
    p.add_argument("--increment", type=int, default=64)
    p.add_argument("--strategies",
                   default="stateful,recent-only,pool,recompute-all")
    p.add_argument("--users", type=int, default=None)
    p.add_argument("--out", required=True)
    p.add_argument("--timing-out")
    p.set_defaults(func=cmd_simulate)
    _track_defaults(p)

    p = sub.add_parser("bench", help="wall-clock benchmark of update strategies")
    common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data")
    p.add_argument("--vocab")
    p.add_argument("--periods", type=int, default=16)
    p.add_argument("--initial", type=int, default=64)
    p.add_argument("--increment", type=int, default=64)
    p.add_argument("--users", type=int, default=16)
    p.add_argument("--reps", type=int, default=5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)
    _track_defaults(p)

    p = sub.add_parser("sweep-w", help="train per-future-window models and "
                                       "report retrieval across input lengths")
    common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--vocab")
    p.add_argument("--w", default="16,32,64")
    p.add_argument("--input-lengths", default="64,128")
    p.add_argument("--epochs", type=int, default=4)
    p.add_argument("--seq-len", type=int, default=96)
    p.add_argument("--candidates", type=int, default=20)
    p.add_argument("--instances", type=int, default=100)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep_w)
    _track_defaults(p)

    p = sub.add_parser("inspect-state", help="dump a stored user state header")
    common(p)
    p.add_argument("--store", required=True)
    p.add_argument("--user", required=True)
    p.set_defaults(func=cmd_inspect_state)
    _track_defaults(p)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ValidationFailure as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    except (ValueError, KeyError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
