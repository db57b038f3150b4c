"""Command-line harness: generate | train | ablate | sweep | report.

All outputs are deterministic given identical inputs and seeds; wall-clock
data is segregated into per-run meta.json files so reports and CSVs can be
compared byte for byte. Exit codes: 0 success, 1 internal error, 2 user or
config error.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from . import datagen as dg
from .errors import ConfigError, UsageError
from .features import FeatureSchema
from .models import ModelConfig, dense_param_formula
from .training import InitScheme, RunReport, TrainConfig, build_model, train

SWEEP_KNOBS = ("n1", "d_trfm", "d_ffn", "n2", "d_hifm", "n_h")

LADDER_RUNGS = (
    "mlp",
    "shared-transformer",
    "hhft-encoder-only",
    "hhft",
    "hhft-init",
    "hhft-scaled",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """One experiment: a model recipe, its data source, and the seed list."""

    model: ModelConfig
    init: InitScheme
    train: TrainConfig
    seeds: tuple[int, ...]
    dataset_path: str | None = None
    generator: dg.GeneratorConfig | None = None

    def validate(self) -> None:
        self.model.validate()
        self.init.validate()
        self.train.validate()
        if not self.seeds:
            raise ConfigError("seeds list is empty")
        if (self.dataset_path is None) == (self.generator is None):
            raise ConfigError(
                "exactly one of 'dataset' or 'generator' must be given"
            )

    def to_json_dict(self) -> dict:
        model = self.model.to_json_dict()
        out = {
            "variant": model["variant"],
            "schema": model["schema"],
            "encoder": model["encoder"],
            "hiformer": model["hiformer"],
            "head_hidden": model["head_hidden"],
            "init": self.init.to_json_dict(),
            "train": self.train.to_json_dict(),
            "seeds": list(self.seeds),
        }
        if self.dataset_path is not None:
            out["dataset"] = self.dataset_path
        if self.generator is not None:
            gen = self.generator.to_json_dict()
            del gen["schema"]  # lives once at the top level
            out["generator"] = gen
        return out

    @staticmethod
    def from_json_dict(obj: dict) -> "ExperimentConfig":
        schema = FeatureSchema.from_json_dict(obj["schema"])
        model = ModelConfig.from_json_dict(
            {
                "variant": obj.get("variant", "hhft"),
                "schema": obj["schema"],
                "encoder": obj.get("encoder", {}),
                "hiformer": obj.get("hiformer", {}),
                "head_hidden": obj.get("head_hidden"),
            }
        )
        generator = None
        if obj.get("generator") is not None:
            generator = dg.GeneratorConfig.from_json_dict(
                {**obj["generator"], "schema": schema.to_json_dict()}
            )
        config = ExperimentConfig(
            model=model,
            init=InitScheme.from_json_dict(obj.get("init", {})),
            train=TrainConfig.from_json_dict(obj.get("train", {})),
            seeds=tuple(int(s) for s in obj.get("seeds", [0])),
            dataset_path=obj.get("dataset"),
            generator=generator,
        )
        config.validate()
        return config


@dataclass(frozen=True)
class SweepSpec:
    """Scaling sweep: scale exactly one knob of a base experiment."""

    base: ExperimentConfig
    knob: str
    multipliers: tuple[float, ...]

    def validate(self) -> None:
        self.base.validate()
        if isinstance(self.knob, (list, tuple)):
            raise ConfigError(
                "sweeps scale one knob at a time, keeping other parameters "
                f"fixed; got {list(self.knob)}"
            )
        if self.knob not in SWEEP_KNOBS:
            raise ConfigError(
                f"unknown sweep knob {self.knob!r}; pick one of {SWEEP_KNOBS}"
            )
        if not self.multipliers:
            raise ConfigError("multiplier list is empty")

    @staticmethod
    def from_json_dict(obj: dict) -> "SweepSpec":
        spec = SweepSpec(
            base=ExperimentConfig.from_json_dict(obj["base"]),
            knob=obj.get("knob"),
            multipliers=tuple(float(m) for m in obj.get("multipliers", [])),
        )
        spec.validate()
        return spec


def _scaled_int(value: int, multiplier: float) -> int:
    return max(1, round(value * multiplier))


def apply_knob(config: ExperimentConfig, knob: str,
               multiplier: float) -> ExperimentConfig:
    """Return a copy of `config` with one knob scaled; everything else fixed."""
    model = config.model
    if knob == "n1":
        encoder = replace(model.encoder, n1=_scaled_int(model.encoder.n1,
                                                        multiplier))
        model = replace(model, encoder=encoder)
    elif knob == "d_trfm":
        d = _scaled_int(model.schema.d, multiplier)
        schema = replace(model.schema, d=d)
        model = replace(model, schema=schema, encoder=replace(model.encoder, d=d))
    elif knob == "d_ffn":
        encoder = replace(model.encoder,
                          d_ffn=_scaled_int(model.encoder.d_ffn, multiplier))
        model = replace(model, encoder=encoder)
    elif knob == "n2":
        model = replace(model, hiformer=replace(
            model.hiformer, n2=_scaled_int(model.hiformer.n2, multiplier)))
    elif knob == "d_hifm":
        model = replace(model, hiformer=replace(
            model.hiformer, d_h=_scaled_int(model.hiformer.d_h, multiplier)))
    elif knob == "n_h":
        model = replace(model, hiformer=replace(
            model.hiformer, n_h=_scaled_int(model.hiformer.n_h, multiplier)))
    else:
        raise ConfigError(f"unknown sweep knob {knob!r}")
    model.validate()
    scaled = replace(config, model=model)
    if config.generator is not None and knob == "d_trfm":
        scaled = replace(scaled, generator=replace(config.generator,
                                                   schema=model.schema))
    return scaled


# ---------------------------------------------------------------------------
# file helpers (deterministic bytes; timing lives only in meta.json)
# ---------------------------------------------------------------------------


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_epochs_csv(path: Path, report: RunReport) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "train_loss", "eval_auc", "eval_logloss",
                         "seconds"])
        for row in report.epochs:
            writer.writerow([
                row.epoch,
                repr(row.train_loss),
                "" if row.eval_auc is None else repr(row.eval_auc),
                "" if row.eval_logloss is None else repr(row.eval_logloss),
                repr(row.seconds),
            ])


# ---------------------------------------------------------------------------
# orchestration
# ---------------------------------------------------------------------------


def _resolve_dataset(config: ExperimentConfig) -> dg.Dataset:
    if config.dataset_path is not None:
        root = Path(config.dataset_path)
        if not (root / dg.HEADER_NAME).exists():
            raise ConfigError(f"dataset path does not exist: {root}")
        return dg.load_dataset(root)
    return dg.generate_dataset(config.generator)


def _run_one_seed(config: ExperimentConfig, dataset: dg.Dataset, seed: int,
                  run_dir: Path, write_checkpoint: bool = True) -> RunReport:
    train_config = replace(config.train, seed=seed)
    scheme = replace(config.init, seed=seed)
    model = build_model(config.model, scheme, dtype=train_config.dtype)
    run_dir.mkdir(parents=True, exist_ok=True)
    checkpoint = run_dir / "best.ckpt" if write_checkpoint else None
    report = train(
        model, dataset, train_config, checkpoint_path=checkpoint,
        extra_echo={"init": scheme.to_json_dict()},
    )
    _write_json(run_dir / "report.json", report.to_json_dict())
    _write_epochs_csv(run_dir / "epochs.csv", report)
    _write_json(run_dir / "meta.json", {
        "written_unix": time.time(),
        **report.timing_json_dict(),
    })
    return report


def run_experiment(config: ExperimentConfig, out_dir, parallel: int = 1,
                   dataset: dg.Dataset | None = None) -> dict:
    """Train `config` once per seed; write run dirs plus an aggregate report."""
    config.validate()
    out = Path(out_dir)
    if dataset is None:
        dataset = _resolve_dataset(config)

    def one(seed: int) -> RunReport:
        return _run_one_seed(config, dataset, seed, out / f"run_seed{seed}")

    if parallel > 1 and len(config.seeds) > 1:
        with ThreadPoolExecutor(max_workers=parallel) as pool:
            reports = list(pool.map(one, config.seeds))
    else:
        reports = [one(seed) for seed in config.seeds]

    finals = np.array([r.final_auc for r in reports])
    bests = np.array([r.best_auc for r in reports])
    aggregate = {
        "config": config.to_json_dict(),
        "per_seed": [
            {"seed": r.seed, "final_auc": r.final_auc, "best_auc": r.best_auc,
             "final_logloss": r.final_logloss}
            for r in reports
        ],
        "final_auc_mean": float(finals.mean()),
        "final_auc_std": float(finals.std()),
        "best_auc_mean": float(bests.mean()),
        "best_auc_std": float(bests.std()),
        "dense_params": reports[0].dense_params,
        "embedding_params": reports[0].embedding_params,
        "flops_per_record": reports[0].flops_per_record,
        "bayes_auc": dg.bayes_auc(dataset.ground_truth, dataset.eval_records),
    }
    _write_json(out / "aggregate.json", aggregate)
    return aggregate


def ladder_configs(base: ExperimentConfig) -> list[tuple[str, ExperimentConfig]]:
    """The six ablation rungs, in fixed order, derived from one base config."""

    def with_model(**changes) -> ModelConfig:
        return replace(base.model, **changes)

    rungs: list[tuple[str, ExperimentConfig]] = []
    rungs.append(("mlp", replace(base, model=with_model(variant="mlp"))))
    rungs.append((
        "shared-transformer",
        replace(base, model=with_model(variant="shared-transformer")),
    ))
    rungs.append((
        "hhft-encoder-only",
        replace(base, model=with_model(
            variant="hhft", hiformer=replace(base.model.hiformer, n2=0))),
    ))
    rungs.append(("hhft", replace(base, model=with_model(variant="hhft"))))
    rungs.append((
        "hhft-init",
        replace(base, model=with_model(variant="hhft"),
                init=replace(base.init, kind="zeros-residual-out")),
    ))
    scaled = apply_knob(replace(base, model=with_model(variant="hhft")),
                        "d_trfm", 2.0)
    rungs.append(("hhft-scaled", scaled))
    assert tuple(name for name, _ in rungs) == LADDER_RUNGS
    return rungs


def run_ablation(base: ExperimentConfig, out_dir, parallel: int = 1) -> dict:
    """Train every ladder rung on identical data and seeds; emit deltas vs mlp."""
    out = Path(out_dir)
    dataset = _resolve_dataset(base)
    rows = []
    for name, config in ladder_configs(base):
        try:
            aggregate = run_experiment(config, out / name, parallel=parallel,
                                       dataset=dataset)
        except Exception as exc:
            raise type(exc)(f"ladder rung {name!r} failed: {exc}") from exc
        rows.append({
            "rung": name,
            "final_auc_mean": aggregate["final_auc_mean"],
            "final_auc_std": aggregate["final_auc_std"],
            "dense_params": aggregate["dense_params"],
            "flops_per_record": aggregate["flops_per_record"],
        })
    base_auc = rows[0]["final_auc_mean"]
    for row in rows:
        row["delta_vs_mlp"] = row["final_auc_mean"] - base_auc
    ladder = {
        "rungs": rows,
        "bayes_auc": dg.bayes_auc(dataset.ground_truth, dataset.eval_records),
    }
    _write_json(out / "ladder.json", ladder)
    with open(out / "ladder.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rung", "auc_mean", "auc_std", "delta_vs_mlp",
                         "dense_params", "flops_per_record"])
        for row in rows:
            writer.writerow([
                row["rung"], repr(row["final_auc_mean"]),
                repr(row["final_auc_std"]), repr(row["delta_vs_mlp"]),
                row["dense_params"], row["flops_per_record"],
            ])
    return ladder


def run_sweep(spec: SweepSpec, out_dir, parallel: int = 1) -> dict:
    """Scale one knob across its multipliers; one aggregated row per point."""
    spec.validate()
    out = Path(out_dir)
    dataset = _resolve_dataset(spec.base)
    rows = []
    for multiplier in sorted(spec.multipliers):
        config = apply_knob(spec.base, spec.knob, multiplier)
        tag = f"{spec.knob}_x{multiplier:g}"
        aggregate = run_experiment(config, out / tag, parallel=parallel,
                                   dataset=dataset)
        base_echo = spec.base.to_json_dict()
        point_echo = config.to_json_dict()
        rows.append({
            "knob": spec.knob,
            "multiplier": multiplier,
            "value": _knob_value(config, spec.knob),
            "dense_params": dense_param_formula(config.model),
            "flops_per_record": aggregate["flops_per_record"],
            "auc_mean": aggregate["final_auc_mean"],
            "auc_std": aggregate["final_auc_std"],
            "config_fields_changed": _diff_fields(base_echo, point_echo),
        })
    sweep = {
        "knob": spec.knob,
        "rows": rows,
        "bayes_auc": dg.bayes_auc(dataset.ground_truth, dataset.eval_records),
    }
    _write_json(out / "sweep.json", sweep)
    with open(out / "sweep.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["knob", "multiplier", "value", "dense_params",
                         "auc_mean", "auc_std", "flops_per_record"])
        for row in rows:
            writer.writerow([
                row["knob"], repr(row["multiplier"]), row["value"],
                row["dense_params"], repr(row["auc_mean"]),
                repr(row["auc_std"]), row["flops_per_record"],
            ])
    return sweep


def _knob_value(config: ExperimentConfig, knob: str) -> int:
    model = config.model
    return {
        "n1": model.encoder.n1,
        "d_trfm": model.schema.d,
        "d_ffn": model.encoder.d_ffn,
        "n2": model.hiformer.n2,
        "d_hifm": model.hiformer.d_h,
        "n_h": model.hiformer.n_h,
    }[knob]


def _diff_fields(a: dict, b: dict, prefix: str = "") -> list[str]:
    """Dotted paths of leaf fields that differ between two config echoes."""
    diffs = []
    for key in sorted(set(a) | set(b)):
        path = f"{prefix}.{key}" if prefix else str(key)
        va, vb = a.get(key), b.get(key)
        if isinstance(va, dict) and isinstance(vb, dict):
            diffs.extend(_diff_fields(va, vb, path))
        elif va != vb:
            diffs.append(path)
    return diffs


def consolidate_reports(run_dirs) -> dict:
    """Merge per-run report.json files, keyed by run directory name."""
    merged: dict[str, dict] = {}
    for run_dir in run_dirs:
        root = Path(run_dir)
        report_path = root / "report.json"
        if not report_path.exists():
            raise ConfigError(f"no report.json under {root}")
        run_id = root.name
        if run_id in merged:
            raise ConfigError(f"conflicting run id {run_id!r} (from {root})")
        with open(report_path, encoding="utf-8") as fh:
            merged[run_id] = json.load(fh)
    return {"runs": merged}


# ---------------------------------------------------------------------------
# argument parsing and entry point
# ---------------------------------------------------------------------------


def _load_json_file(path: str) -> dict:
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    with open(p, encoding="utf-8") as fh:
        try:
            return json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON at line {exc.lineno}, "
                              f"column {exc.colno}: {exc.msg}") from None


def _apply_global_overrides(config: ExperimentConfig,
                            args) -> ExperimentConfig:
    if getattr(args, "seed", None) is not None:
        config = replace(config, seeds=(args.seed,))
    if getattr(args, "precision", None) is not None:
        config = replace(config,
                         train=replace(config.train, precision=args.precision))
    return config


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the config's seed list with one seed")
    parser.add_argument("--precision", choices=("f32", "f64"), default=None,
                        help="override training precision")
    parser.add_argument("--out-dir", default="runs",
                        help="directory for generated files and reports")
    parser.add_argument("--parallel", type=int, default=1, metavar="N",
                        help="run independent seeds on N threads")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hhft",
        description="Heterogeneous-feature transformer ranking experiments",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_gen = sub.add_parser("generate", help="write a synthetic dataset")
    p_gen.add_argument("config", help="generator config JSON")
    _add_common(p_gen)

    p_train = sub.add_parser("train", help="train one model over its seeds")
    p_train.add_argument("config", help="experiment config JSON")
    _add_common(p_train)

    p_ablate = sub.add_parser("ablate", help="train the six-rung ablation ladder")
    p_ablate.add_argument("config", help="experiment config JSON (ladder base)")
    _add_common(p_ablate)

    p_sweep = sub.add_parser("sweep", help="scale one knob, training per point")
    p_sweep.add_argument("config", help="sweep spec JSON")
    _add_common(p_sweep)

    p_report = sub.add_parser("report", help="consolidate run directories")
    p_report.add_argument("run_dirs", nargs="+", help="run directories")
    _add_common(p_report)

    return parser


def _cmd_generate(args) -> int:
    obj = _load_json_file(args.config)
    config = dg.GeneratorConfig.from_json_dict(obj)
    if getattr(args, "seed", None) is not None:
        config = replace(config, seed=args.seed)
    dataset = dg.generate(config, args.out_dir)
    print(f"wrote {len(dataset.records)} records "
          f"({len(dataset.train_indices)} train / {len(dataset.eval_indices)} "
          f"eval) to {args.out_dir}")
    return 0


def _cmd_train(args) -> int:
    config = _apply_global_overrides(
        ExperimentConfig.from_json_dict(_load_json_file(args.config)), args)
    aggregate = run_experiment(config, args.out_dir, parallel=args.parallel)
    print(f"{config.model.variant}: final AUC "
          f"{aggregate['final_auc_mean']:.4f} +- "
          f"{aggregate['final_auc_std']:.4f} over {len(config.seeds)} seed(s); "
          f"oracle ceiling {aggregate['bayes_auc']:.4f}")
    return 0


def _cmd_ablate(args) -> int:
    base = _apply_global_overrides(
        ExperimentConfig.from_json_dict(_load_json_file(args.config)), args)
    ladder = run_ablation(base, args.out_dir, parallel=args.parallel)
    for row in ladder["rungs"]:
        print(f"{row['rung']:>20}: AUC {row['final_auc_mean']:.4f} "
              f"(delta vs mlp {row['delta_vs_mlp']:+.4f})")
    return 0


def _cmd_sweep(args) -> int:
    obj = _load_json_file(args.config)
    spec = SweepSpec.from_json_dict(obj)
    if getattr(args, "seed", None) is not None or \
            getattr(args, "precision", None) is not None:
        spec = SweepSpec(base=_apply_global_overrides(spec.base, args),
                         knob=spec.knob, multipliers=spec.multipliers)
    sweep = run_sweep(spec, args.out_dir, parallel=args.parallel)
    for row in sweep["rows"]:
        print(f"{row['knob']} x{row['multiplier']:g} (value {row['value']}): "
              f"AUC {row['auc_mean']:.4f} +- {row['auc_std']:.4f}, "
              f"{row['dense_params']} dense params")
    return 0


def _cmd_report(args) -> int:
    merged = consolidate_reports(args.run_dirs)
    out = Path(args.out_dir)
    _write_json(out / "consolidated.json", merged)
    with open(out / "consolidated.csv", "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["run_id", "seed", "final_auc", "best_auc",
                         "final_logloss", "dense_params"])
        for run_id, report in merged["runs"].items():
            writer.writerow([
                run_id, report.get("seed"), repr(report.get("final_auc")),
                repr(report.get("best_auc")), repr(report.get("final_logloss")),
                report.get("dense_params"),
            ])
    print(f"consolidated {len(merged['runs'])} run(s) into {out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "train": _cmd_train,
    "ablate": _cmd_ablate,
    "sweep": _cmd_sweep,
    "report": _cmd_report,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (KeyboardInterrupt, SystemExit):
        raise
    except Exception as exc:  # internal failure
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
