"""Experiment registry: one-command desk-scale reproductions.

Each experiment regenerates its corpus per seed, trains the variants it
compares on the same split, and emits two CSVs: metric rows (per seed
plus a median-aggregate row) and per-timestep error profiles. Every row
carries the hash of the resolved configuration that produced it.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import json
import os
import subprocess
import tempfile
from dataclasses import dataclass

import numpy as np

from .corpus import CorpusConfig, DatasetSplit, build_split
from .losses import LossConfig
from .metrics import ErrorProfile, MetricsReport, evaluate
from .model import PlannerConfig, build_model
from .training import TrainConfig, train


class ExperimentError(Exception):
    pass


# Desk-scale protocol: small enough that the full registry runs on one
# laptop core in well under an hour, large enough that every directional
# effect survives seed noise.
DESK_CORPUS = dict(n_videos=400, actions_per_task=20, edge_density=0.8,
                   block_shift_sigma=1.0, zipf_exponent=1.0)
DESK_MODEL = dict(d_model=64, n_heads=4, memory_size=16, feedforward_dim=256)
DESK_SEEDS = (0, 1, 2, 3, 4)

# Per-experiment budgets. The profile-shape experiments need the longer
# schedules (endpoint features emerge slowly in whole-chain models); the
# standalone-vs-in-chain comparison additionally needs the small batch,
# more data, and a wider model so the whole-chain arm reliably trains
# past the standalone head's ceiling before the comparison is scored.
DESK_EPOCHS = {
    "error-profile": 250,
    "ar-vs-nar": 250,
    "subchain-reliability": 250,
    "failed-decoupling": 400,
    "decoupling": 120,
    "time-layers": 200,
    "gamma-sweep": 120,
}
DESK_BATCH = {"failed-decoupling": 64}
DESK_CORPUS_OVERRIDES = {
    "failed-decoupling": dict(actions_per_task=28, n_videos=600),
    "subchain-reliability": dict(actions_per_task=28),
}
DESK_MODEL_OVERRIDES = {
    "failed-decoupling": dict(d_model=96, feedforward_dim=384),
}


def desk_train_config(experiment: str, seed: int) -> TrainConfig:
    epochs = DESK_EPOCHS[experiment]
    return TrainConfig(epochs=epochs, base_lr=0.02,
                       decay_start=max(epochs - 50, 1), decay_period=50,
                       batch_size=DESK_BATCH.get(experiment, 128), seed=seed)


@dataclass
class ExperimentConfig:
    """Everything needed to rerun an experiment, JSON round-trippable."""
    experiment: str
    horizons: tuple[int, ...]
    variants: tuple[str, ...]
    seeds: tuple[int, ...]
    corpus: dict
    model: dict
    train: dict
    out_dir: str
    split_ratio: float = 0.7
    gamma: float = 1.5

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "ExperimentConfig":
        d = json.loads(text)
        for key in ("horizons", "variants", "seeds"):
            d[key] = tuple(d[key])
        return cls(**d)

    def hash(self) -> str:
        payload = dataclasses.asdict(self)
        payload.pop("out_dir")  # location does not change the science
        canon = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()[:16]


@dataclass
class RunRecord:
    experiment: str
    seed: int
    variant: str
    horizon: int
    restriction: tuple[int, ...] | None
    report: MetricsReport
    profile: ErrorProfile
    train_log_path: str
    git_describe: str
    config_hash: str


def default_config(experiment: str, out_dir: str, seeds=DESK_SEEDS,
                   corpus_overrides: dict | None = None,
                   model_overrides: dict | None = None,
                   train_overrides: dict | None = None) -> ExperimentConfig:
    if experiment not in EXPERIMENTS:
        raise ExperimentError(f"unknown experiment {experiment!r}; "
                              f"known: {sorted(EXPERIMENTS)}")
    horizons, variants = EXPERIMENT_AXES[experiment]
    corpus = dict(DESK_CORPUS)
    corpus.update(DESK_CORPUS_OVERRIDES.get(experiment, {}))
    corpus.update(corpus_overrides or {})
    model = dict(DESK_MODEL)
    model.update(DESK_MODEL_OVERRIDES.get(experiment, {}))
    model.update(model_overrides or {})
    train_cfg = dataclasses.asdict(desk_train_config(experiment, 0))
    train_cfg.update(train_overrides or {})
    return ExperimentConfig(
        experiment=experiment, horizons=horizons, variants=variants,
        seeds=tuple(seeds), corpus=corpus, model=model,
        train=train_cfg, out_dir=out_dir)


def git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=10)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


# ---------------------------------------------------------------------------
# single runs
# ---------------------------------------------------------------------------

def _corpus_config(config: ExperimentConfig) -> CorpusConfig:
    return CorpusConfig(**config.corpus)


def _model_config(config: ExperimentConfig, horizon: int,
                  corpus: CorpusConfig, decouple: bool = True,
                  time_layer: str = "mlp", gamma: float | None = None) -> PlannerConfig:
    return PlannerConfig(horizon=horizon, n_actions=corpus.n_actions,
                         feature_dim=corpus.feature_dim, decouple=decouple,
                         time_layer=time_layer,
                         gamma=config.gamma if gamma is None else gamma,
                         **config.model)


def fit(config: ExperimentConfig, split: DatasetSplit, variant: str,
        horizon: int, seed: int, *, time_layer: str = "mlp",
        gamma: float | None = None,
        loss_positions: tuple[int, ...] | None = None,
        log_dir: str | None = None):
    """Train one variant on the split; returns (model, train-log path)."""
    corpus = _corpus_config(config)
    mcfg = _model_config(config, horizon, corpus,
                         decouple=(variant == "decoupled"),
                         time_layer=time_layer, gamma=gamma)
    model = build_model(variant, mcfg, seed=seed)
    tcfg = TrainConfig(**{**config.train, "seed": seed})
    g = mcfg.gamma if gamma is None else gamma
    log = train(model, split, tcfg, LossConfig(gamma=g, positions=loss_positions))
    log_path = ""
    if log_dir:
        os.makedirs(log_dir, exist_ok=True)
        tag = f"{variant}_T{horizon}_seed{seed}"
        if loss_positions:
            tag += "_pos" + "-".join(map(str, loss_positions))
        log_path = os.path.join(log_dir, f"train_{tag}.csv")
        log.write_csv(log_path)
    return model, log_path


def score(config: ExperimentConfig, model, split: DatasetSplit, label: str,
          horizon: int, seed: int, restriction: tuple[int, ...] | None = None,
          log_path: str = "") -> RunRecord:
    """Evaluate a trained model into a RunRecord."""
    report, profile = evaluate(model, split.test, restriction=restriction)
    return RunRecord(experiment=config.experiment, seed=seed, variant=label,
                     horizon=horizon, restriction=restriction, report=report,
                     profile=profile, train_log_path=log_path,
                     git_describe=git_describe(), config_hash=config.hash())


def train_and_eval(config: ExperimentConfig, split: DatasetSplit, variant: str,
                   horizon: int, seed: int, *, label: str | None = None,
                   time_layer: str = "mlp", gamma: float | None = None,
                   loss_positions: tuple[int, ...] | None = None,
                   restriction: tuple[int, ...] | None = None,
                   log_dir: str | None = None) -> RunRecord:
    """One (variant, seed) run: build, train, evaluate, record."""
    model, log_path = fit(config, split, variant, horizon, seed,
                          time_layer=time_layer, gamma=gamma,
                          loss_positions=loss_positions, log_dir=log_dir)
    return score(config, model, split, label or variant, horizon, seed,
                 restriction=restriction, log_path=log_path)


def build_seed_split(config: ExperimentConfig, horizon: int, seed: int):
    split, videos = build_split(_corpus_config(config), horizon, seed=seed,
                                ratio=config.split_ratio)
    return split, videos


# ---------------------------------------------------------------------------
# the registry
# ---------------------------------------------------------------------------

def _exp_error_profile(config: ExperimentConfig, progress) -> list[RunRecord]:
    """Per-timestep error rates of the whole-chain model across horizons."""
    records = []
    for horizon in config.horizons:
        for seed in config.seeds:
            split, _ = build_seed_split(config, horizon, seed)
            records.append(train_and_eval(
                config, split, "no-decouple", horizon, seed,
                log_dir=os.path.join(config.out_dir, "logs")))
            progress(records[-1])
    return records


def _exp_ar_vs_nar(config: ExperimentConfig, progress) -> list[RunRecord]:
    """Autoregressive vs one-shot decoding error accumulation shapes."""
    records = []
    horizon = config.horizons[0]
    for seed in config.seeds:
        split, _ = build_seed_split(config, horizon, seed)
        for variant in config.variants:
            records.append(train_and_eval(
                config, split, variant, horizon, seed,
                log_dir=os.path.join(config.out_dir, "logs")))
            progress(records[-1])
    return records


def _exp_subchain_reliability(config: ExperimentConfig, progress,
                              chains=None) -> list[RunRecord]:
    """Standalone sub-chain heads vs the same positions inside the chain."""
    records = []
    horizon = config.horizons[0]
    log_dir = os.path.join(config.out_dir, "logs")
    chains = chains or [(1, m, horizon) for m in range(2, horizon)]
    for seed in config.seeds:
        split, _ = build_seed_split(config, horizon, seed)
        whole, whole_log = fit(config, split, "no_decouple", horizon, seed,
                               log_dir=log_dir)
        for sub in chains:
            rec = score(config, whole, split, "in-chain", horizon, seed,
                        restriction=sub, log_path=whole_log)
            records.append(rec)
            progress(rec)
            rec = train_and_eval(config, split, "subchain", horizon, seed,
                                 label="standalone", loss_positions=sub,
                                 restriction=sub, log_dir=log_dir)
            records.append(rec)
            progress(rec)
    return records


def _exp_failed_decoupling(config: ExperimentConfig, progress) -> list[RunRecord]:
    return _exp_subchain_reliability(config, progress, chains=[(1, 2, 3)])


def _exp_decoupling(config: ExperimentConfig, progress) -> list[RunRecord]:
    """Single decoder vs the decoupled decoder bank at matched budget."""
    records = []
    for horizon in config.horizons:
        for seed in config.seeds:
            split, _ = build_seed_split(config, horizon, seed)
            for variant in config.variants:
                records.append(train_and_eval(
                    config, split, variant, horizon, seed,
                    log_dir=os.path.join(config.out_dir, "logs")))
                progress(records[-1])
    return records


def _exp_time_layers(config: ExperimentConfig, progress) -> list[RunRecord]:
    """Time-axis fusion layer comparison at the short horizon."""
    records = []
    horizon = config.horizons[0]
    for seed in config.seeds:
        split, _ = build_seed_split(config, horizon, seed)
        for kind in config.variants:
            rec = train_and_eval(config, split, "no-decouple", horizon, seed,
                                 label=kind, time_layer=kind,
                                 log_dir=os.path.join(config.out_dir, "logs"))
            records.append(rec)
            progress(rec)
    return records


def _exp_gamma_sweep(config: ExperimentConfig, progress) -> list[RunRecord]:
    """Focal exponent sweep on the configured corpus."""
    records = []
    horizon = config.horizons[0]
    for seed in config.seeds:
        split, _ = build_seed_split(config, horizon, seed)
        for spec in config.variants:
            gamma = float(spec.split("=", 1)[1])
            rec = train_and_eval(config, split, "decoupled", horizon, seed,
                                 label=spec, gamma=gamma,
                                 log_dir=os.path.join(config.out_dir, "logs"))
            records.append(rec)
            progress(rec)
    return records


EXPERIMENTS = {
    "error-profile": _exp_error_profile,
    "ar-vs-nar": _exp_ar_vs_nar,
    "subchain-reliability": _exp_subchain_reliability,
    "failed-decoupling": _exp_failed_decoupling,
    "decoupling": _exp_decoupling,
    "time-layers": _exp_time_layers,
    "gamma-sweep": _exp_gamma_sweep,
}

EXPERIMENT_AXES = {
    "error-profile": ((3, 4, 5, 6), ("no-decouple",)),
    "ar-vs-nar": ((5,), ("autoregressive", "no-decouple")),
    "subchain-reliability": ((5,), ("standalone", "in-chain")),
    "failed-decoupling": ((5,), ("standalone", "in-chain")),
    "decoupling": ((4, 5), ("no-decouple", "decoupled")),
    "time-layers": ((3,), ("avgpool", "linear", "conv1d", "mlp")),
    "gamma-sweep": ((4,), ("gamma=0", "gamma=1.0", "gamma=1.5", "gamma=2.0")),
}


def _run_single_seed(payload: tuple[str, int]) -> list[RunRecord]:
    config_json, seed = payload
    config = ExperimentConfig.from_json(config_json)
    config.seeds = (seed,)
    return EXPERIMENTS[config.experiment](config, lambda rec: None)


def run_experiment(config: ExperimentConfig, progress=None) -> list[RunRecord]:
    """Run every (seed, variant) cell; CSV output is canonical-sorted, so
    the bytes do not depend on the parallelism degree (PLANCTL_THREADS)."""
    if config.experiment not in EXPERIMENTS:
        raise ExperimentError(f"unknown experiment {config.experiment!r}")
    if progress is None:
        progress = lambda rec: None
    os.makedirs(config.out_dir, exist_ok=True)
    with open(os.path.join(config.out_dir, "config.json"), "w") as fh:
        fh.write(config.to_json() + "\n")
    workers = int(os.environ.get("PLANCTL_THREADS", "1"))
    if workers > 1 and len(config.seeds) > 1:
        import multiprocessing
        jobs = [(config.to_json(), seed) for seed in config.seeds]
        with multiprocessing.Pool(min(workers, len(jobs))) as pool:
            chunks = pool.map(_run_single_seed, jobs)
        records = [rec for chunk in chunks for rec in chunk]
        for rec in records:
            rec.config_hash = config.hash()  # hash of the full seed set
            progress(rec)
    else:
        records = EXPERIMENTS[config.experiment](config, progress)
    write_records(records, config.out_dir)
    return records


# ---------------------------------------------------------------------------
# CSV emission
# ---------------------------------------------------------------------------

RESULT_COLUMNS = ["experiment", "horizon", "variant", "restriction", "seed",
                  "sr", "macc", "miou", "n", "config_hash"]
PROFILE_COLUMNS = ["experiment", "horizon", "variant", "restriction", "seed",
                   "t", "rel_pos", "error_rate", "config_hash"]


def _fmt(x: float) -> str:
    return f"{x:.10g}"


def _restriction_str(r) -> str:
    return "-".join(map(str, r)) if r else "full"


def records_to_rows(records: list[RunRecord]):
    rows, prows = [], []
    for rec in records:
        rows.append([rec.experiment, rec.horizon, rec.variant,
                     _restriction_str(rec.restriction), rec.seed,
                     _fmt(rec.report.success_rate), _fmt(rec.report.mean_accuracy),
                     _fmt(rec.report.mean_iou), rec.report.n_samples,
                     rec.config_hash])
        for i, (pos, rate) in enumerate(zip(rec.profile.positions,
                                            rec.profile.rates)):
            prows.append([rec.experiment, rec.horizon, rec.variant,
                          _restriction_str(rec.restriction), rec.seed, i + 1,
                          _fmt(pos), _fmt(rate), rec.config_hash])
    return rows, prows


def median_rows(records: list[RunRecord]):
    """One aggregate row per (horizon, variant, restriction) group."""
    groups: dict = {}
    for rec in records:
        key = (rec.experiment, rec.horizon, rec.variant,
               _restriction_str(rec.restriction), rec.config_hash)
        groups.setdefault(key, []).append(rec)
    rows, prows = [], []
    for key in sorted(groups, key=str):
        exp, horizon, variant, restriction, chash = key
        group = groups[key]
        rows.append([exp, horizon, variant, restriction, "median",
                     _fmt(float(np.median([r.report.success_rate for r in group]))),
                     _fmt(float(np.median([r.report.mean_accuracy for r in group]))),
                     _fmt(float(np.median([r.report.mean_iou for r in group]))),
                     sum(r.report.n_samples for r in group), chash])
        n_pos = len(group[0].profile.rates)
        for i in range(n_pos):
            rates = [r.profile.rates[i] for r in group]
            rows_pos = group[0].profile.positions[i]
            prows.append([exp, horizon, variant, restriction, "median", i + 1,
                          _fmt(rows_pos), _fmt(float(np.median(rates))), chash])
    return rows, prows


def write_records(records: list[RunRecord], out_dir: str) -> None:
    rows, prows = records_to_rows(records)
    med, pmed = median_rows(records)
    # canonical order keeps bytes independent of execution order
    key = lambda row: tuple(str(x) for x in row)
    _write_csv(os.path.join(out_dir, "results.csv"), RESULT_COLUMNS,
               sorted(rows, key=key) + med)
    _write_csv(os.path.join(out_dir, "profiles.csv"), PROFILE_COLUMNS,
               sorted(prows, key=key) + pmed)


def _write_csv(path: str, header: list[str], rows) -> None:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(os.path.abspath(path)))
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(buf.getvalue())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def read_csv(path: str) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
