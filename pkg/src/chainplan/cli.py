"""planctl: generate datasets, train, evaluate, and reproduce experiments.

Subcommands: generate | train | eval | ablate | report. Exit codes:
0 success, 2 configuration error, 3 training divergence.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

from .corpus import (
    CorpusConfig,
    CorpusError,
    DatasetError,
    build_split,
    load_dataset,
    save_dataset,
)
from .engine import EngineError, load_into, save_parameters, set_default_dtype
from .experiments import (
    DESK_CORPUS,
    DESK_MODEL,
    EXPERIMENTS,
    ExperimentError,
    default_config,
    git_describe,
    read_csv,
    run_experiment,
)
from .losses import LossConfig
from .metrics import MetricsError, evaluate
from .model import PlannerConfig, build_model
from .training import DivergenceError, TrainConfig, train

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGED = 3


class CliError(Exception):
    pass


def _load_json(path: str | None) -> dict:
    if not path:
        return {}
    try:
        with open(path) as fh:
            return json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read config {path}: {exc}") from exc


def _parse_restriction(text: str | None):
    if not text:
        return None
    try:
        positions = tuple(int(x) for x in text.split(","))
    except ValueError as exc:
        raise CliError(f"bad restriction {text!r}; expected e.g. 1,3,5") from exc
    if not positions:
        raise CliError("empty restriction")
    return positions


def cmd_generate(args) -> int:
    overrides = _load_json(args.config).get("corpus", _load_json(args.config))
    try:
        corpus = CorpusConfig(**{**DESK_CORPUS, **overrides})
        corpus.validate()
    except (TypeError, CorpusError) as exc:
        raise CliError(str(exc)) from exc
    horizons = args.horizons or [3, 4, 5, 6]
    os.makedirs(args.out, exist_ok=True)
    for t in horizons:
        split, _ = build_split(corpus, t, seed=args.seed, ratio=args.ratio)
        path = os.path.join(args.out, f"T{t}")
        save_dataset(split, path)
        # provenance sidecar: lets training regenerate latent states
        with open(os.path.join(path, "corpus.json"), "w") as fh:
            json.dump({"corpus": dataclasses.asdict(corpus),
                       "seed": args.seed}, fh, indent=2, sort_keys=True)
            fh.write("\n")
        print(f"T={t}: {len(split.train)} train / {len(split.test)} test "
              f"instances -> {path}")
    return EXIT_OK


def _video_lookup(dataset_dir: str):
    """Regenerate the corpus videos recorded in the dataset's sidecar."""
    sidecar = os.path.join(dataset_dir, "corpus.json")
    if not os.path.exists(sidecar):
        raise CliError(
            "this dataset has no corpus.json sidecar, so latent states are "
            "unavailable; state-supervised training needs a generated corpus")
    with open(sidecar) as fh:
        info = json.load(fh)
    from .corpus import generate_corpus
    _, videos = generate_corpus(CorpusConfig(**info["corpus"]), info["seed"])
    return videos


def _planner_config_from(meta: dict, args, overrides: dict) -> PlannerConfig:
    fields = dict(DESK_MODEL)
    fields.update(overrides)
    fields.update(horizon=meta["horizon"], n_actions=meta["n_actions"],
                  feature_dim=meta["feature_dim"])
    if args.gamma is not None:
        fields["gamma"] = args.gamma
    if args.time_layer:
        fields["time_layer"] = args.time_layer
    return PlannerConfig(**fields)


def cmd_train(args) -> int:
    cfg_file = _load_json(args.config)
    try:
        split = load_dataset(args.dataset)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    meta = dict(horizon=split.horizon, n_actions=split.n_actions,
                feature_dim=split.feature_dim)
    if args.T and args.T != split.horizon:
        raise CliError(f"dataset horizon is {split.horizon}, --T said {args.T}")
    try:
        mcfg = _planner_config_from(meta, args, cfg_file.get("model", {}))
        model = build_model(args.variant, mcfg, seed=args.seed)
        tcfg = TrainConfig(**{**cfg_file.get("train", {}), "seed": args.seed,
                              **({"epochs": args.epochs} if args.epochs else {})})
    except (EngineError, TypeError) as exc:
        raise CliError(str(exc)) from exc
    positions = _parse_restriction(args.restriction) \
        if args.variant == "subchain" else None
    if args.variant == "subchain" and positions is None:
        raise CliError("--variant subchain requires --restriction, e.g. 1,3,5")
    state_lookup = None
    if args.variant == "state-supervised":
        state_lookup = _video_lookup(args.dataset)
    loss = LossConfig(gamma=mcfg.gamma, positions=positions)
    os.makedirs(args.out, exist_ok=True)
    log = train(model, split, tcfg, loss, state_lookup=state_lookup)
    save_parameters(model.parameters(), os.path.join(args.out, "params.bin"))
    sidecar = {
        "model": mcfg.to_dict(),
        "variant": args.variant,
        "loss_positions": list(positions) if positions else None,
        "train": tcfg.to_dict(),
        "dataset": os.path.abspath(args.dataset),
        "git_describe": git_describe(),
    }
    with open(os.path.join(args.out, "config.json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    log.write_csv(os.path.join(args.out, "trainlog.csv"))
    print(f"trained {args.variant} for {tcfg.epochs} epochs; "
          f"final loss {log.final_loss:.6f}; checkpoint in {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        with open(os.path.join(args.checkpoint, "config.json")) as fh:
            sidecar = json.load(fh)
    except OSError as exc:
        raise CliError(f"cannot read checkpoint sidecar: {exc}") from exc
    try:
        split = load_dataset(args.dataset)
    except DatasetError as exc:
        raise CliError(str(exc)) from exc
    mcfg = PlannerConfig.from_dict(sidecar["model"])
    if mcfg.horizon != split.horizon or mcfg.n_actions != split.n_actions:
        raise CliError("checkpoint and dataset disagree on horizon or classes")
    model = build_model(sidecar["variant"], mcfg, seed=0)
    load_into(model.parameters(), os.path.join(args.checkpoint, "params.bin"))
    restriction = _parse_restriction(args.restriction)
    try:
        report, profile = evaluate(model, split.test, restriction=restriction)
    except MetricsError as exc:
        raise CliError(str(exc)) from exc
    os.makedirs(args.out, exist_ok=True)
    restr = "-".join(map(str, restriction)) if restriction else "full"
    with open(os.path.join(args.out, "metrics.csv"), "w") as fh:
        fh.write("horizon,variant,restriction,sr,macc,miou,n\n")
        fh.write(f"{split.horizon},{sidecar['variant']},{restr},"
                 f"{report.success_rate:.10g},{report.mean_accuracy:.10g},"
                 f"{report.mean_iou:.10g},{report.n_samples}\n")
    with open(os.path.join(args.out, "profile.csv"), "w") as fh:
        fh.write("t,rel_pos,error_rate\n")
        for i, (pos, rate) in enumerate(zip(profile.positions, profile.rates)):
            fh.write(f"{i + 1},{pos:.10g},{rate:.10g}\n")
    print(f"SR={report.success_rate:.4f} mAcc={report.mean_accuracy:.4f} "
          f"mIoU={report.mean_iou:.4f} over {report.n_samples} samples")
    return EXIT_OK


def cmd_ablate(args) -> int:
    seeds = tuple(int(s) for s in args.seeds.split(",")) if args.seeds \
        else (0, 1, 2, 3, 4)
    overrides = _load_json(args.config)
    try:
        config = default_config(args.experiment, args.out, seeds=seeds,
                                corpus_overrides=overrides.get("corpus"),
                                model_overrides=overrides.get("model"),
                                train_overrides=overrides.get("train"))
        if args.T:
            config.horizons = (args.T,)
        if args.gamma is not None:
            config.gamma = args.gamma
    except ExperimentError as exc:
        raise CliError(str(exc)) from exc

    def progress(rec):
        print(f"  [{rec.variant} T={rec.horizon} seed={rec.seed}] "
              f"SR={rec.report.success_rate:.3f} "
              f"mAcc={rec.report.mean_accuracy:.3f}", flush=True)

    print(f"running {args.experiment} with seeds {seeds}")
    run_experiment(config, progress=progress)
    print(f"results in {os.path.join(args.out, 'results.csv')}")
    return EXIT_OK


def _result_line(row) -> str:
    return (f"| {row['horizon']} | {row['variant']} | {row['restriction']} "
            f"| {row['seed']} | {float(row['sr']):.4f} "
            f"| {float(row['macc']):.4f} | {float(row['miou']):.4f} "
            f"| {row['config_hash']} |")


def cmd_report(args) -> int:
    results_path = os.path.join(args.run_dir, "results.csv")
    if not os.path.exists(results_path):
        raise CliError(f"no results.csv under {args.run_dir}")
    rows = read_csv(results_path)
    by_exp: dict[str, list[dict]] = {}
    for row in rows:
        by_exp.setdefault(row["experiment"], []).append(row)
    header = ("| horizon | variant | restriction | seed | SR | mAcc | mIoU "
              "| config |")
    rule = "|---|---|---|---|---|---|---|---|"
    lines = ["# Experiment report", ""]
    for exp in sorted(by_exp):
        medians = [r for r in by_exp[exp] if r["seed"] == "median"]
        per_seed = [r for r in by_exp[exp] if r["seed"] != "median"]
        lines += [f"## {exp}", "", "Medians over seeds:", "", header, rule]
        lines += [_result_line(r) for r in medians]
        lines += ["", "Per-seed results:", "", header, rule]
        lines += [_result_line(r) for r in per_seed]
        lines.append("")
    if os.path.exists(os.path.join(args.run_dir, "profiles.csv")):
        lines.append("Error profiles: see `profiles.csv` "
                     "(rel_pos, error_rate per variant; plot-ready).")
        lines.append("")
    out_path = os.path.join(args.run_dir, "report.md")
    with open(out_path, "w") as fh:
        fh.write("\n".join(lines))
    print(f"wrote {out_path}")
    return EXIT_OK


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="planctl",
        description="synthetic procedure-planning experiments")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write synthetic dataset directories")
    p.add_argument("--config", help="JSON file with corpus overrides")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--T", dest="horizons", type=int, action="append",
                   help="horizon(s) to window; repeatable (default 3..6)")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_generate)

    p = sub.add_parser("train", help="train one model on a dataset")
    p.add_argument("--config", help="JSON file with model/train overrides")
    p.add_argument("--dataset", required=True)
    p.add_argument("--variant", default="decoupled",
                   choices=["decoupled", "no-decouple", "autoregressive",
                            "state-supervised", "subchain"])
    p.add_argument("--T", type=int, help="expected horizon (checked)")
    p.add_argument("--gamma", type=float)
    p.add_argument("--time-layer", choices=["mlp", "avgpool", "linear",
                                            "conv1d"])
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--restriction", help="supervised positions for subchain")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--restriction", help="1-based positions, e.g. 1,3,5")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="run a registry experiment")
    p.add_argument("--experiment", required=True, choices=sorted(EXPERIMENTS))
    p.add_argument("--seeds", help="comma-separated, default 0,1,2,3,4")
    p.add_argument("--T", type=int, help="override the horizon")
    p.add_argument("--gamma", type=float)
    p.add_argument("--config", help="JSON with corpus/train overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("--run-dir", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    precision = os.environ.get("PLANCTL_PRECISION")
    if precision:
        try:
            set_default_dtype(precision)
        except EngineError as exc:
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_CONFIG
    args = make_parser().parse_args(argv)
    try:
        return args.fn(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusError, ExperimentError, EngineError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"error: training diverged at epoch {exc.epoch}", file=sys.stderr)
        return EXIT_DIVERGED


if __name__ == "__main__":
    sys.exit(main())
