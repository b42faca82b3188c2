"""Command-line entry point: ``rankkit <command> [options]``.

Exit codes: 0 success, 2 configuration or schema error, 3 data error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import experiments as ex
from .bandit import Posterior, posterior_update
from .checkpoint import check_topology, load_model, save_model
from .config import ExperimentConfig, load_config
from .datagen import (
    generate,
    generate_replay_log,
    make_world,
    read_jsonl,
    read_replay_jsonl,
    truth_scorer,
    write_jsonl,
    write_replay_jsonl,
)
from .errors import (
    ConfigError,
    DimensionError,
    DivergenceError,
    InputError,
    NumericalError,
    ParameterError,
    SchemaError,
    SnapshotError,
    UndefinedMetricError,
)
from .metrics import UndefinedReplayRate, metrics_report, replay_contribution_rate, write_report
from .model import Batch, MultiTaskModel
from .tensor import make_rng
from .training import Snapshot, apply_incremental_init, fisher_diag, make_penalty, train

log = logging.getLogger("rankkit")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE = 0, 2, 3, 4


def _config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
    if args.seed is not None:
        cfg.seed = args.seed
    return cfg


def _read_examples(paths) -> list:
    out = []
    for p in paths:
        out += read_jsonl(p)
    if not out:
        raise InputError(f"no examples in {', '.join(map(str, paths))}")
    return out


def _dump(obj):
    print(json.dumps(obj, indent=2, sort_keys=True))


# --- commands -------------------------------------------------------------------------


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    windows = args.windows if args.windows is not None else cfg.data.windows
    if windows < 1:
        raise ConfigError("--windows must be >= 1")
    world_cfg = cfg.world
    if world_cfg.max_windows < windows + 1:
        world_cfg = replace(world_cfg, max_windows=windows + 1)
    world = make_world(world_cfg, seed=cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for w in range(windows):
        n = cfg.data.cold_rows if w == 0 else cfg.data.rows_per_window
        path = out / f"window_{w}.jsonl"
        write_jsonl(path, generate(world, n, w, make_rng(cfg.seed, f"datagen-w{w}")))
        written.append(str(path))
    path = out / "test.jsonl"
    write_jsonl(path, generate(world, cfg.data.test_rows, windows, make_rng(cfg.seed, "datagen-test")))
    written.append(str(path))
    if cfg.data.replay_sessions > 0:
        sessions = generate_replay_log(
            world,
            truth_scorer(world, world.tasks[0]),
            cfg.data.replay_sessions,
            cfg.data.top_n,
            make_rng(cfg.seed, "datagen-replay"),
            cfg.data.replay_candidates,
            window=windows,
        )
        path = out / "replay.jsonl"
        write_replay_jsonl(path, sessions)
        written.append(str(path))
    _dump({"files": written})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    incremental = args.from_checkpoint is not None or args.cold_checkpoint is not None
    if incremental and (args.from_checkpoint is None or args.cold_checkpoint is None):
        raise ConfigError("incremental training needs both --from-checkpoint and --cold-checkpoint")
    examples = _read_examples(args.data)
    model = MultiTaskModel(copy.deepcopy(cfg.model), seed=cfg.seed)
    batch = Batch.from_examples(examples, model.config)
    opt = cfg.optimizer
    steps = args.steps
    penalty = None
    if incremental:
        snaps = []
        for path in (args.cold_checkpoint, args.from_checkpoint):
            prev, _, _ = load_model(path)
            check_topology(prev, cfg.model)
            if prev.is_quantized:
                raise SnapshotError(f"{path}: cannot continue training from a quantized checkpoint")
            params = prev.parameters()
            if any(p.fisher_diag is None for p in params):
                raise SnapshotError(f"{path}: checkpoint lacks Fisher diagonals")
            snaps.append(Snapshot.from_params(params))
        cold, prior = snaps
        apply_incremental_init(model.parameters(), cold, prior, cfg.incremental.cold_weight)
        penalty = make_penalty(cold, prior, cfg.incremental)
        if steps is None:
            steps = max(1, int(cfg.incremental.step_fraction * opt.total_steps))
    if steps is not None:
        opt = replace(opt, total_steps=steps)

    def on_epoch(epoch, loss):
        print(f"epoch {epoch} mean_loss {loss:.6f}")

    result = train(model, batch, opt, make_rng(cfg.seed, "shuffle"), penalty=penalty, on_epoch=on_epoch)
    fisher_diag(model, batch, cfg.incremental.fisher_max_examples)
    if cfg.quantize_embeddings:
        model.quantize_embeddings()
    kind = "incremental" if incremental else "cold"
    posteriors = refresh_posteriors(model, batch, cfg)
    save_model(
        args.out_checkpoint, model, kind=kind, posteriors=posteriors, meta={"steps": result.steps, "seed": cfg.seed}
    )
    report = _evaluate(model, examples)
    report["final_loss"] = result.losses[-1] if result.losses else None
    report["kind"] = kind
    _dump(report)
    return EXIT_OK


def refresh_posteriors(model: MultiTaskModel, batch: Batch, cfg: ExperimentConfig) -> dict:
    """Last-layer posteriors rebuilt on the refreshed representation from the
    most recent ``buffer_capacity`` rows of the training data."""
    b = cfg.bandit
    n = len(batch)
    rows = batch.take(np.arange(max(0, n - b.buffer_capacity), n))
    out = {}
    for j, task in enumerate(model.config.tasks):
        m = rows.mask[:, j]
        z = model.representation(rows, task)[m]
        out[task] = posterior_update(Posterior(z.shape[1], b.prior_scale, b.noise_variance), z, rows.labels[m, j])
    return out


def _evaluate(model: MultiTaskModel, examples, sessions=None) -> dict:
    batch = Batch.from_examples(examples, model.config)
    probs = model.predict_proba(batch)
    labels = np.ma.masked_array(batch.labels, mask=~batch.mask)
    replay = None
    if sessions is not None:
        replay = replay_contribution_rate(sessions, model_contribution_scorer(model))
    return metrics_report(labels, probs, model.config.tasks, replay)


def model_contribution_scorer(model: MultiTaskModel):
    """Model's P(any contribution): every task after the first counts; a
    single-task model scores with its only task."""

    def score(examples):
        p = model.predict_proba(Batch.from_examples(list(examples), model.config))
        if p.shape[1] == 1:
            return p[:, 0]
        return 1.0 - np.prod(1.0 - p[:, 1:], axis=1)

    return score


def cmd_eval(args) -> int:
    model, manifest, _ = load_model(args.checkpoint)
    examples = _read_examples(args.data)
    sessions = read_replay_jsonl(args.replay_log) if args.replay_log else None
    report = _evaluate(model, examples, sessions)
    report["checkpoint_kind"] = manifest["kind"]
    report["quantized"] = model.is_quantized
    if args.compare_checkpoint:
        other, _, _ = load_model(args.compare_checkpoint)
        ref = _evaluate(other, examples)
        report["auc_delta_vs_compare"] = {
            t: (None if e["auc"] is None or ref["per_task"][t]["auc"] is None else e["auc"] - ref["per_task"][t]["auc"])
            for t, e in report["per_task"].items()
        }
    for t, e in report["per_task"].items():
        if e["auc"] is None:
            log.warning("AUC undefined for task %s: evaluation slice has a single class", t)
    if args.out:
        write_report(report, args.out, args.csv)
    _dump(report)
    return EXIT_OK


def cmd_quantize(args) -> int:
    model, manifest, posteriors = load_model(args.checkpoint)
    if model.is_quantized:
        raise InputError(f"{args.checkpoint} is already quantized; quantization is not idempotent")
    before = sum(t.value.nbytes for e in model.embeddings.values() for t in e.tables)
    model.quantize_embeddings()
    after = sum(q.nbytes() for e in model.embeddings.values() for q in e.quantized.values())
    save_model(args.out, model, kind=manifest["kind"], posteriors=posteriors, meta=manifest.get("meta", {}))
    _dump(
        {
            "embedding_bytes_before": before,
            "embedding_bytes_after": after,
            "reduction": (1.0 - after / before) if before else 0.0,
        }
    )
    return EXIT_OK


def cmd_bandit_sim(args) -> int:
    cfg = _config(args)
    b = cfg.bandit
    rounds = args.rounds if args.rounds is not None else b.rounds
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    policies = ("thompson", "greedy", "random")
    if args.checkpoint:
        model, _, _ = load_model(args.checkpoint)
        world = make_world(cfg.world, seed=cfg.seed)
        curves = {
            pol: np.stack(
                [
                    ex.contextual_regret(
                        model, world, s, rounds, b.candidates, pol, b.task, b.prior_scale, b.noise_variance,
                        b.update_every, b.explore_pulls,
                    )
                    for s in seeds
                ]
            )
            for pol in policies
        }
    else:
        curves = ex.regret_curves(
            seeds, rounds, b.arm_means, b.noise_sd, b.explore_pulls, b.prior_scale, b.noise_variance,
            b.update_every, policies,
        )
    if args.out:
        with open(args.out, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["policy", "seed", "round", "cumulative_regret"])
            for pol in policies:
                for i, s in enumerate(seeds):
                    for r in range(rounds):
                        w.writerow([pol, s, r + 1, repr(float(curves[pol][i, r]))])
                mean = curves[pol].mean(axis=0)
                for r in range(rounds):
                    w.writerow([pol, "mean", r + 1, repr(float(mean[r]))])
    _dump({pol: {"mean_final_regret": float(curves[pol][:, -1].mean())} for pol in policies})
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config(args)
    variants = ex.parse_variants(args.variants)
    tr = te = None
    if args.data:
        if not args.test_data:
            raise ConfigError("--data requires --test-data")
        tr, te = _read_examples(args.data), _read_examples(args.test_data)
    seeds = list(range(cfg.seed, cfg.seed + args.seeds))
    rows = ex.run_ablation(
        variants,
        cfg.model,
        cfg.world,
        cfg.optimizer,
        seeds,
        world_seed=cfg.seed,
        n_train=args.train_rows,
        n_test=args.test_rows,
        train_examples=tr,
        test_examples=te,
    )
    table = ex.ablation_table_markdown(rows)
    if args.out_md:
        Path(args.out_md).write_text(table, encoding="utf-8")
    if args.out_csv:
        with open(args.out_csv, "w", newline="", encoding="utf-8") as fh:
            w = csv.DictWriter(fh, fieldnames=ex.ABLATION_CSV_FIELDS, extrasaction="ignore")
            w.writeheader()
            for r in rows:
                w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.as_dict().items()})
    print(table, end="")
    return EXIT_OK


# --- parser ----------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="master seed (overrides config)")
    common.add_argument("--config", default=argparse.SUPPRESS, help="experiment config JSON")
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS)

    p = argparse.ArgumentParser(prog="rankkit", description="Desk-scale ranking-model toolkit.", parents=[common])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", parents=[common], help="write synthetic JSONL windows, test set and replay log")
    g.add_argument("--out", required=True)
    g.add_argument("--windows", type=int)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", parents=[common], help="cold-start or incremental training")
    t.add_argument("--data", nargs="+", required=True)
    t.add_argument("--out-checkpoint", required=True)
    t.add_argument("--from-checkpoint")
    t.add_argument("--cold-checkpoint")
    t.add_argument("--steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", parents=[common], help="metrics report for a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", nargs="+", required=True)
    e.add_argument("--replay-log")
    e.add_argument("--compare-checkpoint", help="report AUC deltas against this checkpoint")
    e.add_argument("--out", help="report JSON path")
    e.add_argument("--csv", help="flat CSV mirror of the report")
    e.set_defaults(func=cmd_eval)

    q = sub.add_parser("quantize", parents=[common], help="int8 post-training quantization of embedding tables")
    q.add_argument("--checkpoint", required=True)
    q.add_argument("--out", required=True)
    q.set_defaults(func=cmd_quantize)

    b = sub.add_parser("bandit-sim", parents=[common], help="regret curves for thompson, greedy and random")
    b.add_argument("--rounds", type=int)
    b.add_argument("--seeds", type=int, default=20)
    b.add_argument("--checkpoint", help="use this model's penultimate layer as the bandit context")
    b.add_argument("--out", help="CSV of per-seed and mean curves")
    b.set_defaults(func=cmd_bandit_sim)

    a = sub.add_parser("ablate", parents=[common], help="cumulative variant ablation table")
    a.add_argument("--variants", required=True, help="comma-separated, e.g. mlp-baseline,+ids,+residual-dcn")
    a.add_argument("--data", nargs="+", help="training JSONL (default: generated per seed)")
    a.add_argument("--test-data", nargs="+")
    a.add_argument("--seeds", type=int, default=5)
    a.add_argument("--train-rows", type=int, default=60_000)
    a.add_argument("--test-rows", type=int, default=20_000)
    a.add_argument("--out-md")
    a.add_argument("--out-csv")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name, default in (("seed", None), ("config", None), ("verbose", False)):
        if not hasattr(args, name):
            setattr(args, name, default)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, SchemaError, ParameterError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged at step {exc.step}: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (
        InputError, SnapshotError, UndefinedMetricError, UndefinedReplayRate, DimensionError, NumericalError, OSError
    ) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
