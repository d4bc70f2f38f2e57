"""``setpool`` command line: gen, train, eval, weights, selfcheck.

Exit codes: 0 ok, 2 configuration/data error, 3 training divergence,
4 checkpoint missing or incompatible with the data.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .actor_critic import METRIC_COLUMNS, ActorCritic, TrainingDiverged, load_checkpoint, save_checkpoint, train_on_policy
from .config import RunConfig, build_config, rng_for
from .data import ConfigError, DataError, Dataset, gen_synthetic, load_embeddings, save_embeddings, split
from .env import infer_weights
from .evaluate import evaluate, outlier_below_median_rate, policy_weights, uniform_weights, write_results
from .offpolicy import train_off_policy
from .selfcheck import run_selfcheck

EXIT_OK, EXIT_CONFIG, EXIT_DIVERGED, EXIT_ARTIFACT = 0, 2, 3, 4

log = logging.getLogger("setpool")


class ArtifactError(RuntimeError):
    pass


def load_dataset(cfg: RunConfig) -> Dataset:
    if cfg.data:
        if not Path(cfg.data).exists():
            raise ConfigError("data", f"no such file {cfg.data!r}")
        return load_embeddings(cfg.data)
    return gen_synthetic(cfg.synthetic(), rng_for(cfg.seed, "data"))


def split_dataset(cfg: RunConfig) -> tuple[Dataset, Dataset]:
    return split(load_dataset(cfg), cfg.test_fraction, rng_for(cfg.seed, "split"))


def load_model(path, dim: int) -> ActorCritic:
    try:
        p = load_checkpoint(path)
    except (OSError, ValueError, KeyError) as exc:
        raise ArtifactError(f"cannot load checkpoint {path}: {exc}") from None
    if p.dim != dim:
        raise ArtifactError(f"checkpoint expects {p.dim}-dim features, data has {dim}")
    return p


def write_metrics_csv(rows: list[dict], path) -> None:
    lines = [",".join(METRIC_COLUMNS)]
    for r in rows:
        lines.append(",".join(str(r[c]) if c in ("iter", "episodes_seen") else repr(float(r[c]))
                              for c in METRIC_COLUMNS))
    Path(path).write_text("\n".join(lines) + "\n")


def cmd_gen(cfg: RunConfig, out: str) -> int:
    ds = gen_synthetic(cfg.synthetic(), rng_for(cfg.seed, "data"))
    save_embeddings(ds, out)
    print(f"wrote {len(ds.sets)} sets, {ds.num_identities} identities, dim {ds.dim} to {out}")
    return EXIT_OK


def train_model(cfg: RunConfig, train: Dataset) -> tuple[ActorCritic, list[dict]]:
    p = ActorCritic.create(train.dim, train.num_identities, rng_for(cfg.seed, "init"), cfg.hidden_dims(),
                           cfg.head_hidden_dims(), cfg.features, cfg.gamma, cfg.lam)
    tc = cfg.train()
    if cfg.mode == "on":
        rows = train_on_policy(p, train, tc, rng_for(cfg.seed, "rollout"))
    else:
        rows = train_off_policy(p, train, tc, rng_for(cfg.seed, "rollout"), rng_for(cfg.seed, "replay"))
    return p, rows


def cmd_train(cfg: RunConfig, out: str) -> int:
    train, _ = split_dataset(cfg)
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    p, rows = train_model(cfg, train)
    save_checkpoint(p, out_dir / "checkpoint")
    write_metrics_csv(rows, out_dir / "metrics.csv")
    (out_dir / "manifest.txt").write_text(f"version=setpool {__version__}\n" + cfg.to_text())
    if rows:
        n = max(1, len(rows) // 10)
        first = np.mean([r["xent_loss"] for r in rows[:n]])
        last = np.mean([r["xent_loss"] for r in rows[-n:]])
        print(f"{cfg.mode}-policy training: {len(rows)} updates, xent {first:.4f} -> {last:.4f}")
    print(f"checkpoint written to {out_dir / 'checkpoint'}")
    return EXIT_OK


def cmd_eval(cfg: RunConfig, checkpoint: str | None, baseline: str, out: str) -> int:
    _, test = split_dataset(cfg)
    if baseline == "avepool":
        weight_fn = uniform_weights
    else:
        if not checkpoint:
            raise ConfigError("checkpoint", "required unless --baseline avepool")
        weight_fn = policy_weights(load_model(checkpoint, test.dim))
    metrics, curves, _ = evaluate(test, weight_fn, cfg.distance, cfg.workers)
    if any(fs.quality is not None for fs in test.sets):
        metrics["outlier_below_median"] = outlier_below_median_rate(test, weight_fn)[0]
    write_results(out, metrics, curves)
    for k in sorted(metrics):
        print(f"{k:>22}: {metrics[k]:.4f}")
    return EXIT_OK


def cmd_weights(cfg: RunConfig, checkpoint: str, set_id: str) -> int:
    ds = load_dataset(cfg)
    try:
        fs = ds.by_id(set_id)
    except KeyError:
        raise ConfigError("set_id", f"unknown set {set_id!r}") from None
    p = load_model(checkpoint, ds.dim)
    w, _ = infer_weights(fs, p)
    print(f"{'member':>6} {'yaw':>7} {'quality':>8} {'weight':>10}")
    for i in sorted(range(len(fs)), key=lambda i: (-w[i], i)):
        q = f"{fs.quality[i]:8.3f}" if fs.quality is not None else f"{'-':>8}"
        print(f"{i:>6} {fs.yaws[i]:7.2f} {q} {w[i]:10.6f}")
    return EXIT_OK


def cmd_selfcheck(cfg: RunConfig, fault: str | None) -> int:
    results = run_selfcheck(dim=min(cfg.dim, 16), hidden=cfg.hidden_dims(), seed=cfg.seed, fault=fault)
    for r in results:
        print(r.line())
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed}/{len(results)} checks passed")
    return EXIT_OK if failed == 0 else 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        common.add_argument(f"--{f.name.replace('_', '-')}", dest=f.name, default=None, metavar=f.type.upper(),
                            help=f"default: {f.default}")

    parser = argparse.ArgumentParser(prog="setpool", description="Learned attention pooling of embedding sets.")
    parser.add_argument("--version", action="version", version=f"setpool {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", parents=[common], help="write a synthetic embedding CSV")
    p.add_argument("--out", required=True)
    p = sub.add_parser("train", parents=[common], help="train on the identity-disjoint training split")
    p.add_argument("--out", default="run")
    p = sub.add_parser("eval", parents=[common], help="verification and identification on the test split")
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", choices=("none", "avepool"), default="none")
    p.add_argument("--out", default="eval")
    p = sub.add_parser("weights", parents=[common], help="per-member weights of one set")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--set-id", required=True)
    p = sub.add_parser("selfcheck", parents=[common], help="numerical self-checks")
    p.add_argument("--inject-fault", choices=("backward",), help=argparse.SUPPRESS)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    overrides = {f.name: getattr(args, f.name) for f in fields(RunConfig)}
    try:
        cfg = build_config(args.config, overrides)
        if args.command == "gen":
            return cmd_gen(cfg, args.out)
        if args.command == "train":
            return cmd_train(cfg, args.out)
        if args.command == "eval":
            return cmd_eval(cfg, args.checkpoint, args.baseline, args.out)
        if args.command == "weights":
            return cmd_weights(cfg, args.checkpoint, args.set_id)
        return cmd_selfcheck(cfg, args.inject_fault)
    except (ConfigError, DataError, FileNotFoundError) as exc:
        print(f"setpool: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except TrainingDiverged as exc:
        print(f"setpool: training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ArtifactError as exc:
        print(f"setpool: {exc}", file=sys.stderr)
        return EXIT_ARTIFACT


if __name__ == "__main__":
    sys.exit(main())
