"""Command-line entrypoint: `fedsim run | pretrain | inspect-partition`.

Exit codes: 0 success, 2 configuration problem, 3 I/O problem, 4 numerical
divergence.  The FEDSIM_LOG_LEVEL environment variable (error, info, debug)
controls diagnostic verbosity and never affects results.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import rng as streams
from .config import ConfigError, parse_config
from .datamodules import (
    DatasetError,
    PartitionError,
    PartitionPlan,
    partition_iid,
    partition_niid,
    shard_label_histogram,
)
from .federated import DivergenceError, FederatedError, pretrain, run_experiment
from .numerics import NumericsError
from .paramfile import ParamFileError, write_params
from .profiler import Profiler, render_report
from .telemetry import CsvSink, JsonlSink

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGENCE = 4

logger = logging.getLogger("fedsim")

_LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}


def _setup_logging() -> None:
    name = os.environ.get("FEDSIM_LOG_LEVEL", "error").lower()
    logging.basicConfig(format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(_LOG_LEVELS.get(name, logging.ERROR))


def _guarded(fn) -> int:
    try:
        return fn()
    except ConfigError as exc:
        for line in exc.errors:
            print(f"config error: {line}", file=sys.stderr)
        return EXIT_CONFIG
    except (FederatedError, NumericsError, PartitionError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (ParamFileError, DatasetError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


def cmd_run(config_path: str, out_dir: str, threads: int = 1, seed: int | None = None) -> int:
    def run() -> int:
        config = parse_config(config_path, seed_override=seed)
        out = Path(out_dir)
        try:
            os.makedirs(out, exist_ok=False)
        except FileExistsError:
            print(
                f"i/o error: run directory {out} already exists; refusing to overwrite",
                file=sys.stderr,
            )
            return EXIT_IO
        (out / "config.json").write_text(
            json.dumps(config.resolved, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        logger.info("loading datasets")
        train = config.load_train_dataset()
        test = config.load_test_dataset()
        fl = config.fl_config(train)
        if config.telemetry_format == "jsonl":
            sink = JsonlSink(out / "telemetry.jsonl")
        else:
            sink = CsvSink(out)
        profiler = Profiler()
        logger.info(
            "running %d rounds over %d agents (threads=%d)",
            fl.global_epochs,
            fl.num_agents,
            threads,
        )
        try:
            report = run_experiment(
                fl,
                train,
                test,
                sink=sink,
                profiler=profiler,
                threads=threads,
                rss_sampling=config.rss_sampling,
            )
            entries = profiler.report()
            for entry in entries:
                sink.emit(entry)
        finally:
            sink.close()
        write_params(out / "params.flpv", report.final_params)
        (out / "profile.txt").write_text(render_report(entries), encoding="utf-8")
        summary = {"status": "ok", "exit_code": EXIT_OK, **report.to_dict()}
        (out / "summary.json").write_text(
            json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8"
        )
        print(
            f"run complete: {len(report.rounds)} rounds, "
            f"final loss {report.final_loss:.6f}, "
            f"final accuracy {report.final_accuracy:.4f} -> {out}"
        )
        return EXIT_OK

    return _guarded(run)


def cmd_pretrain(config_path: str, out_path: str, seed: int | None = None) -> int:
    def run() -> int:
        config = parse_config(config_path, seed_override=seed)
        train = config.load_train_dataset()
        spec = config.model_spec(train)
        batch_size = config.resolved["training"]["batch_size"]
        pretrain(
            spec,
            train,
            epochs=config.pretrain_epochs,
            lr=config.pretrain_lr,
            seed=config.seed,
            out_path=out_path,
            batch_size=batch_size,
        )
        print(
            f"pretrain complete: {config.pretrain_epochs} epoch(s), "
            f"{spec.total_params} parameters -> {out_path}"
        )
        return EXIT_OK

    return _guarded(run)


def cmd_inspect_partition(config_path: str, out_path: str, seed: int | None = None) -> int:
    def run() -> int:
        config = parse_config(config_path, seed_override=seed)
        train = config.load_train_dataset()
        plan = PartitionPlan(
            scheme=config.resolved["partition"]["scheme"],
            num_agents=config.resolved["agents"]["count"],
            niid_factor=config.resolved["partition"]["niid_factor"],
            seed=streams.derive_seed(config.seed, streams.STREAM_PARTITION),
        )
        shards = partition_iid(train, plan) if plan.scheme == "iid" else partition_niid(train, plan)
        with open(out_path, "w", encoding="utf-8") as fh:
            dataset_counts = [0] * train.num_classes
            lines = []
            for shard in shards:
                counts = shard_label_histogram(train, shard)
                for c, count in enumerate(counts):
                    dataset_counts[c] += int(count)
                lines.append(
                    {
                        "kind": "histogram",
                        "agent": shard.owner,
                        "shard": len(shard),
                        "counts": [int(c) for c in counts],
                    }
                )
            header = {
                "kind": "dataset",
                "n": train.n_samples,
                "scheme": plan.scheme,
                "niid_factor": plan.niid_factor,
                "counts": dataset_counts,
            }
            for obj in [header, *lines]:
                fh.write(json.dumps(obj, separators=(",", ":")) + "\n")
        print(f"partition histograms for {len(shards)} agents -> {out_path}")
        return EXIT_OK

    return _guarded(run)


def main(argv: list[str] | None = None) -> int:
    _setup_logging()
    parser = argparse.ArgumentParser(
        prog="fedsim",
        description="Deterministic federated-learning simulation toolkit.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a federated experiment into a fresh directory")
    run_p.add_argument("--config", required=True, help="experiment config file (JSON)")
    run_p.add_argument("--out", required=True, help="run directory to create")
    run_p.add_argument(
        "--threads", type=int, default=1, help="local-training parallelism (default 1)"
    )
    run_p.add_argument("--seed", type=int, default=None, help="override the config seed")

    pre_p = sub.add_parser("pretrain", help="centralized training producing an FLPV file")
    pre_p.add_argument("--config", required=True)
    pre_p.add_argument("--out", required=True, help="FLPV output path")
    pre_p.add_argument("--seed", type=int, default=None)

    ins_p = sub.add_parser(
        "inspect-partition", help="write per-agent label histograms as JSONL"
    )
    ins_p.add_argument("--config", required=True)
    ins_p.add_argument("--out", required=True, help="JSONL output path")
    ins_p.add_argument("--seed", type=int, default=None)

    args = parser.parse_args(argv)
    if args.command == "run":
        if args.threads < 1:
            parser.error("--threads must be >= 1")
        return cmd_run(args.config, args.out, threads=args.threads, seed=args.seed)
    if args.command == "pretrain":
        return cmd_pretrain(args.config, args.out, seed=args.seed)
    return cmd_inspect_partition(args.config, args.out, seed=args.seed)


if __name__ == "__main__":
    sys.exit(main())
