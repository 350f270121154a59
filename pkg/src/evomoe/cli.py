"""Command-line surface: reproducible experiments from JSON run configs.

Commands: gen-model, search, baseline, apply, eval, profile, stats.
Every stochastic step takes its seed from the config file (environment is
never consulted), so a config fully determines all outputs.

Exit codes: 0 success, 1 configuration error, 2 I/O or file-format error,
3 numeric or combinatorial-guard failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

import numpy as np

from . import backend, baselines, evaluation, evolution, profiler
from .compression import GroupAssignment, apply_genome, load_genome, save_genome
from .model import ModelConfig, gen_random_model, load_model, save_model
from .serialize import FormatError, dump_json, dumps_json, load_json

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

BASELINE_METHODS = ("random", "frequency", "soft", "naee", "dynamic", "oracle")


class ConfigError(ValueError):
    """A run config is missing fields or holds invalid values."""


def _section(doc: dict, key: str, where: str) -> dict:
    if key not in doc:
        raise ConfigError(f"{where}: missing required section {key!r}")
    value = doc[key]
    if not isinstance(value, dict):
        raise ConfigError(f"{where}: section {key!r} must be an object")
    return value


def _require(section: dict, key: str, where: str):
    if key not in section:
        raise ConfigError(f"{where}: missing required field {key!r}")
    return section[key]


def _model_config(section: dict, where: str) -> ModelConfig:
    try:
        return ModelConfig(**{k: int(_require(section, k, where)) for k in (
            "d_model", "d_ffn", "n_layers", "n_experts", "top_k",
            "vocab_size", "max_seq_len")})
    except ValueError as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _load_task(model, section: dict, where: str) -> evaluation.Task:
    return evaluation.make_task(
        model,
        kind=_require(section, "kind", where),
        n_sequences=int(_require(section, "n_sequences", where)),
        seq_len=int(_require(section, "seq_len", where)),
        seed=int(_require(section, "seed", where)))


def _print_param_report(report: profiler.ParamReport) -> None:
    print(f"expert params     {report.expert_params:>20,}")
    print(f"attention params  {report.attention_params:>20,}")
    print(f"router params     {report.router_params:>20,}")
    print(f"embedding params  {report.embedding_params:>20,}")
    print(f"total params      {report.total_params:>20,}")
    print(f"expert fraction   {report.expert_fraction:>20.4f}")


def cmd_gen_model(args) -> int:
    doc = load_json(args.config)
    where = str(args.config)
    config = _model_config(_section(doc, "model", where), where)
    if "seed" not in doc:
        raise ConfigError(f"{where}: missing required field 'seed'")
    model = gen_random_model(config, int(doc["seed"]))
    save_model(model, args.out)
    _print_param_report(profiler.count_params(config))
    print(f"wrote {args.out}")
    return 0


def _search_config(section: dict, where: str, threads: int) -> evolution.SearchConfig:
    if "seed" not in section:
        raise ConfigError(f"{where}: search section must set 'seed'")
    allowed = {"retained", "n_groups", "prune_iters", "merge_iters", "epochs_per_iter",
               "m_cp", "init_population", "mutation_sigma", "prune_mutation_rate",
               "seed", "merge_only", "active_experts"}
    unknown = set(section) - allowed
    if unknown:
        raise ConfigError(f"{where}: unknown search fields {sorted(unknown)}")
    try:
        return evolution.SearchConfig(threads=threads, **section)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def _threads(args) -> int:
    if args.threads is not None:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        return args.threads
    return os.cpu_count() or 1


def cmd_search(args) -> int:
    doc = load_json(args.config)
    where = str(args.config)
    model = load_model(_require(doc, "model", where))
    task = _load_task(model, _section(doc, "task", where), where)
    cfg = _search_config(_section(doc, "search", where), where, _threads(args))
    out_dir = Path(_require(doc, "out_dir", where))
    out_dir.mkdir(parents=True, exist_ok=True)

    best, trace = evolution.search(model, task, cfg)
    save_genome(best.genome, out_dir / "genome.json")
    evolution.write_trace_csv(trace, out_dir / "trace.csv")
    prune_end = trace.last_of_phase("prune")
    merge_end = trace.last_of_phase("merge")
    report = {
        "best_fitness": best.fitness,
        "prune_end_fitness": None if prune_end is None else prune_end.best_fitness,
        "merge_end_fitness": None if merge_end is None else merge_end.best_fitness,
        "evaluations": trace.rows[-1].evaluations,
        "backend": backend.active_backend(),
        "threads": cfg.threads,
    }
    dump_json(report, out_dir / "report.json")
    print(f"search done: best={best.fitness!r} "
          f"prune_end={None if prune_end is None else prune_end.best_fitness!r} "
          f"merge_end={None if merge_end is None else merge_end.best_fitness!r} "
          f"evaluations={report['evaluations']} backend={report['backend']}")
    return 0


def _write_oracle_csv(table, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["pattern_id", "subsets", "fitness"])
        for row in table:
            subsets = ";".join("+".join(str(e) for e in s) for s in row.subsets)
            writer.writerow([row.pattern_id, subsets, repr(row.fitness)])


def _write_naee_csv(audit, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "subset", "mse", "chosen"])
        for rec in audit:
            writer.writerow([rec.layer, "+".join(str(e) for e in rec.subset),
                             repr(rec.mse), int(rec.chosen)])


def cmd_baseline(args) -> int:
    if args.method not in BASELINE_METHODS:
        raise ConfigError(f"unknown baseline method {args.method!r}; "
                          f"expected one of {', '.join(BASELINE_METHODS)}")
    doc = load_json(args.config)
    where = str(args.config)
    model = load_model(_require(doc, "model", where))
    task = _load_task(model, _section(doc, "task", where), where)
    section = _section(doc, "baseline", where)
    out_dir = Path(_require(doc, "out_dir", where))
    out_dir.mkdir(parents=True, exist_ok=True)
    report = {"method": args.method, "backend": backend.active_backend()}

    if args.method == "dynamic":
        calib = baselines.make_calibration_batch(
            model,
            n_sequences=int(section.get("calib_sequences", 64)),
            seq_len=int(section.get("calib_seq_len", 16)),
            seed=int(_require(section, "calib_seed", where)))
        thresholds = baselines.dynamic_skip_calibrate(model, calib.tokens)
        logits, avg_active = baselines.dynamic_skip_forward(model, thresholds, task.tokens)
        report["avg_active_experts"] = avg_active
        report["score"] = evaluation.score_final_logits(task, logits)
        dump_json({"thresholds": [float(t) for t in thresholds]}, out_dir / "thresholds.json")
    else:
        retained = int(_require(section, "retained", where))
        if args.method == "random":
            genome = baselines.random_prune(model.config, retained,
                                            int(_require(section, "seed", where)))
        elif args.method == "oracle":
            groups = GroupAssignment.uniform(
                model.config.n_layers, int(section.get("n_groups", model.config.n_layers)))
            genome, table = baselines.brute_force_oracle(model, task, retained, groups)
            _write_oracle_csv(table, out_dir / "oracle_table.csv")
            report["patterns_evaluated"] = len(table)
        else:
            calib = baselines.make_calibration_batch(
                model,
                n_sequences=int(section.get("calib_sequences", 64)),
                seq_len=int(section.get("calib_seq_len", 16)),
                seed=int(_require(section, "calib_seed", where)))
            if args.method == "frequency":
                genome = baselines.frequency_prune(model, calib, retained)
            elif args.method == "soft":
                genome = baselines.soft_activation_prune(model, calib, retained)
            else:
                genome, audit = baselines.naee_prune(
                    model, calib, retained,
                    subsample=section.get("subsample"),
                    seed=int(section.get("seed", 0)))
                _write_naee_csv(audit, out_dir / "naee_audit.csv")
        report["score"] = evaluation.fitness(apply_genome(model, genome), task)
        save_genome(genome, out_dir / "genome.json")
    dump_json(report, out_dir / "report.json")
    print(f"baseline {args.method}: " + " ".join(
        f"{k}={v!r}" for k, v in report.items() if k not in ("method", "backend")))
    return 0


def cmd_apply(args) -> int:
    model = load_model(args.model)
    genome = load_genome(args.genome)
    save_model(apply_genome(model, genome), args.out)
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.model)
    task = _load_task(model, _section(load_json(args.task_config), "task",
                                      str(args.task_config)), str(args.task_config))
    target = model
    if args.genome is not None:
        target = apply_genome(model, load_genome(args.genome))
    score = evaluation.fitness(target, task, active_experts=args.active_experts)
    print(dumps_json({"fitness": score, "kind": task.kind,
                      "active_experts": args.active_experts,
                      "backend": backend.active_backend()}).rstrip())
    return 0


def cmd_profile(args) -> int:
    if args.mixtral:
        config = profiler.mixtral_8x7b_config()
    elif args.config is not None:
        doc = load_json(args.config)
        config = _model_config(_section(doc, "model", str(args.config)), str(args.config))
    else:
        raise ConfigError("profile needs --config or --mixtral")
    report = profiler.count_params(config)
    _print_param_report(report)
    retained = args.retained if args.retained is not None else config.n_experts
    cost = profiler.compression_cost(config, retained, args.active, args.dtype_bytes)
    active = args.active if args.active is not None else min(config.top_k, retained)
    print(f"--- keep E'={retained}, route k'={active} ---")
    print(f"params after      {cost.params_after:>20,}")
    print(f"param reduction   {cost.param_reduction_fraction:>20.2%}")
    print(f"memory (w={args.dtype_bytes}B)     {cost.memory_bytes / 2**30:>17.1f} GiB")
    print(f"flops/token       {cost.flops_per_token_prefill:>20,}")
    print(f"est. moe speedup  {cost.estimated_moe_speedup:>20.2f}x")
    if args.out:
        dump_json({"params": report.__dict__, "cost": cost.__dict__}, args.out)
    return 0


def cmd_stats(args) -> int:
    model = load_model(args.model)
    doc = load_json(args.task_config)
    section = _section(doc, "task", str(args.task_config))
    rng = np.random.default_rng(int(_require(section, "seed", str(args.task_config))))
    tokens = rng.integers(0, model.config.vocab_size,
                          size=(int(_require(section, "n_sequences", str(args.task_config))),
                                int(_require(section, "seq_len", str(args.task_config)))),
                          dtype=np.int64)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    evaluation.write_stats_csv(evaluation.collect_expert_stats(model, tokens),
                               out_dir / "stats_full.csv")
    written = ["stats_full.csv"]
    if args.genome is not None:
        compressed = apply_genome(model, load_genome(args.genome))
        evaluation.write_stats_csv(evaluation.collect_expert_stats(compressed, tokens),
                                   out_dir / "stats_compressed.csv")
        written.append("stats_compressed.csv")
    print(f"wrote {', '.join(written)} to {out_dir}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evomoe",
        description="Evolutionary expert pruning and merging for toy sparse-MoE transformers.")
    parser.add_argument("--backend", choices=["auto", "compiled", "numpy"], default="auto",
                        help="execution lane for forward passes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-model", help="build and save a seeded random model")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_gen_model)

    p = sub.add_parser("search", help="run the two-phase evolutionary search")
    p.add_argument("--config", required=True, type=Path)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads for fitness evaluation (default: all cores)")
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("baseline", help="run a comparison pruning method")
    p.add_argument("--method", required=True)
    p.add_argument("--config", required=True, type=Path)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("apply", help="apply a genome to a checkpoint and save the result")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--genome", required=True, type=Path)
    p.add_argument("--out", required=True, type=Path)
    p.set_defaults(func=cmd_apply)

    p = sub.add_parser("eval", help="score a checkpoint (optionally + genome) on a task")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--task-config", required=True, type=Path)
    p.add_argument("--genome", type=Path)
    p.add_argument("--active-experts", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("profile", help="analytic parameter/memory/FLOP report")
    p.add_argument("--config", type=Path)
    p.add_argument("--mixtral", action="store_true",
                   help="use published Mixtral 8x7B dimensions")
    p.add_argument("--retained", type=int, default=None)
    p.add_argument("--active", type=int, default=None)
    p.add_argument("--dtype-bytes", type=int, default=2)
    p.add_argument("--out", type=Path)
    p.set_defaults(func=cmd_profile)

    p = sub.add_parser("stats", help="dump expert-activation statistics CSVs")
    p.add_argument("--model", required=True, type=Path)
    p.add_argument("--task-config", required=True, type=Path)
    p.add_argument("--genome", type=Path)
    p.add_argument("--out-dir", required=True, type=Path)
    p.set_defaults(func=cmd_stats)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        backend.set_backend(args.backend)
        return args.func(args)
    except baselines.GuardError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except FormatError as exc:
        print(f"file format error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ValueError, TypeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
