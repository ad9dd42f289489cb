"""Command-line entry point.

    siamese-transfer experiment --config run.yaml --out results/
    siamese-transfer synth --config synth.yaml --out data/
    siamese-transfer gradcheck

Exit status: 0 success, 1 invalid configuration or input, 2 runtime or
numeric failure (including a gradient check above threshold).
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys
import tempfile
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from . import gradcheck
from .data_pipeline import Dataset, SynthConfig, dumps_csv, load_csv, synth_generate
from .errors import ConfigError, InvalidInputError, ParseError
from .protocols import (
    AGGREGATE_FIELDS,
    FINETUNE_PROTOCOLS,
    PROTOCOLS,
    TRIAL_FIELDS,
    ExperimentConfig,
    ExperimentResult,
    NetworkConfig,
    TrainConfig,
    TrialRow,
    evaluate,
    load_model,
    pretrain,
    run_experiment,
    run_idt,
    save_model,
    to_dict,
)

log = logging.getLogger("siamese_transfer")

SUBCOMMANDS = ("pretrain", "finetune", "idt", "oodt", "experiment", "synth", "gradcheck")
FORMATS = ("json", "csv")
EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


def default_synth_configs() -> dict:
    """Source/target generators for the built-in transfer scenario.

    Shared class geometry, disjoint speakers, and a class-conditional shift
    on the target that leaves out-of-domain UAR well below in-domain.
    """
    return {
        "source": SynthConfig(speaker_count=10, samples_per_speaker_per_class=10,
                              class_center_separation=5.0, speaker_offset_scale=1.0,
                              noise_scale=1.0, seed=1, sample_seed=11, speaker_prefix="src"),
        "target": SynthConfig(speaker_count=20, samples_per_speaker_per_class=4,
                              class_center_separation=5.0, speaker_offset_scale=1.0,
                              noise_scale=1.0, domain_shift=2.0, class_shift_scale=6.0,
                              seed=1, sample_seed=22, speaker_prefix="tgt"),
    }


@dataclass
class RunConfig:
    subcommand: str
    source: str | None = None
    target: str | None = None
    model: str | None = None
    out: str = "results"
    seed: int = 0
    formats: tuple[str, ...] = FORMATS
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)
    synth: dict = field(default_factory=default_synth_configs)

    def to_dict(self) -> dict:
        d = {
            "subcommand": self.subcommand,
            "source": self.source,
            "target": self.target,
            "model": self.model,
            "out": self.out,
            "seed": self.seed,
            "formats": list(self.formats),
            "experiment": to_dict(self.experiment),
            "synth": {k: to_dict(v) for k, v in self.synth.items()},
        }
        return d


def _build(cls, data, where: str):
    """Instantiate a config dataclass from a mapping, rejecting unknown keys."""
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown keys: {', '.join(unknown)}")
    kwargs = {}
    nested = {"network": NetworkConfig, "pretrain": TrainConfig, "finetune": TrainConfig}
    for key, value in data.items():
        if cls is ExperimentConfig and key in nested:
            kwargs[key] = _build(nested[key], value, f"{where}.{key}")
        elif isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"{where}: {exc}") from None


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(x) for x in text.split(",") if x.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


def _str_list(text: str) -> tuple[str, ...]:
    return tuple(x.strip() for x in text.split(",") if x.strip())


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="siamese-transfer",
                                     description="Siamese transfer-learning experiments.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="YAML config file; flags override its values")
        p.add_argument("--source", help="source feature CSV")
        p.add_argument("--target", help="target feature CSV")
        p.add_argument("--model", help="pretrained model .npz (finetune, oodt)")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed")
        p.add_argument("--format", type=_str_list, dest="formats", help="json,csv")
        p.add_argument("--parallel", type=int, help="concurrent trials")
        p.add_argument("--protocols", type=_str_list, help=",".join(PROTOCOLS))
        p.add_argument("--frozen-layers", type=_int_list, dest="frozen_layers")
        p.add_argument("--adopted-speakers", type=_int_list, dest="adopted_speaker_counts")
        p.add_argument("--repetitions", type=int)
    return parser


def parse_config(args: argparse.Namespace) -> RunConfig:
    """Merge the config file (if any) with command-line flags and validate."""
    data: dict = {}
    if args.config:
        try:
            with open(args.config, encoding="utf-8") as fh:
                data = yaml.safe_load(fh) or {}
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from None
        except yaml.YAMLError as exc:
            raise ConfigError(f"malformed config: {exc}") from None
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a mapping")
    known = {f.name for f in dataclasses.fields(RunConfig)} - {"subcommand"}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")

    exp_data = dict(data.get("experiment") or {})
    for key in ("protocols", "frozen_layers", "adopted_speaker_counts", "repetitions", "parallel"):
        value = getattr(args, key, None)
        if value is not None:
            exp_data[key] = list(value) if isinstance(value, tuple) else value
    experiment = _build(ExperimentConfig, exp_data, "experiment")

    synth = default_synth_configs()
    synth_data = data.get("synth") or {}
    if not isinstance(synth_data, dict):
        raise ConfigError("synth: expected a mapping")
    bad = sorted(set(synth_data) - {"source", "target"})
    if bad:
        raise ConfigError(f"synth: unknown keys: {', '.join(bad)}")
    for role, section in synth_data.items():
        merged = {**to_dict(synth[role]), **(section or {})}
        synth[role] = _build(SynthConfig, merged, f"synth.{role}")

    run = RunConfig(
        subcommand=args.subcommand,
        source=args.source or data.get("source"),
        target=args.target or data.get("target"),
        model=args.model or data.get("model"),
        out=args.out or data.get("out", "results"),
        seed=args.seed if args.seed is not None else data.get("seed", 0),
        formats=tuple(args.formats or data.get("formats", FORMATS)),
        experiment=experiment,
        synth=synth,
    )
    run.experiment.master_seed = run.seed
    validate(run)
    return run


def validate(run: RunConfig) -> None:
    if not isinstance(run.seed, int) or run.seed < 0:
        raise ConfigError("seed must be a nonnegative integer")
    bad = [f for f in run.formats if f not in FORMATS]
    if bad or not run.formats:
        raise ConfigError(f"format must be drawn from {FORMATS}, got {list(run.formats)}")
    run.experiment.validate()
    for cfg in run.synth.values():
        cfg.validate()
    needs = {
        "pretrain": ("source",),
        "finetune": ("target",),
        "oodt": ("target",),
        "idt": ("target",),
        "experiment": ("target",),
    }.get(run.subcommand, ())
    for key in needs:
        if getattr(run, key) is None:
            raise ConfigError(f"{run.subcommand} needs --{key}")
    if run.subcommand in ("finetune", "oodt") and run.model is None and run.source is None:
        raise ConfigError(f"{run.subcommand} needs --source or --model")
    if run.subcommand == "experiment" and run.source is None and run.model is None and \
            any(p != "idt" for p in run.experiment.protocols):
        raise ConfigError("experiment protocols other than idt need --source or --model")
    for key in ("source", "target", "model"):
        path = getattr(run, key)
        if path is not None and not Path(path).is_file():
            raise ConfigError(f"{key} file not found: {path}")


def _trial_records(result: ExperimentResult) -> list[dict]:
    records = []
    for row in result.trials:
        rec = {name: getattr(row, name) for name in TRIAL_FIELDS}
        records.append(rec)
    return records


def _csv_text(fields, records) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(fields)
    for rec in records:
        writer.writerow(["" if rec[f] is None else (repr(rec[f]) if isinstance(rec[f], float)
                         else rec[f]) for f in fields])
    return buf.getvalue()


def _write_atomic(files: dict[str, str], out_dir: Path) -> list[Path]:
    """Write every file to a temp name first; rename only once all succeeded."""
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out_dir}: {exc}") from exc
    staged = []
    try:
        for name, text in files.items():
            fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=out_dir)
            with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
                fh.write(text)
            staged.append((tmp, out_dir / name))
    except OSError:
        for tmp, _ in staged:
            os.unlink(tmp)
        raise
    for tmp, final in staged:
        os.replace(tmp, final)
    return [final for _, final in staged]


def emit_results(result: ExperimentResult, formats, out_dir, config: dict | None = None) -> list[Path]:
    """Write trials/aggregates as CSV and/or one JSON file, plus config.json."""
    if not result.trials:
        raise InvalidInputError("no result rows to emit")
    result = result.sorted()
    config = config if config is not None else result.config
    trials = _trial_records(result)
    aggregates = [dataclasses.asdict(a) for a in result.aggregates()]
    files = {"config.json": json.dumps(config, indent=2, sort_keys=True) + "\n"}
    if "csv" in formats:
        files["trials.csv"] = _csv_text(TRIAL_FIELDS, trials)
        files["aggregates.csv"] = _csv_text(AGGREGATE_FIELDS, aggregates)
    if "json" in formats:
        payload = {"config": config, "trials": trials, "aggregates": aggregates}
        files["results.json"] = json.dumps(payload, indent=2, sort_keys=True) + "\n"
    return _write_atomic(files, Path(out_dir))


def format_summary(result: ExperimentResult) -> str:
    lines = [f"{'protocol':<12} {'frozen':>6} {'speakers':>8} {'trials':>6}  UAR%"]
    for a in result.aggregates():
        uar_txt = "failed" if a.uar_mean is None else f"{100 * a.uar_mean:.1f} ± {100 * a.uar_std:.1f}"
        lines.append(f"{a.protocol:<12} {a.frozen_layers:>6} {a.adopted_speakers:>8} "
                     f"{a.n_trials:>6}  {uar_txt}")
    return "\n".join(lines)


def gradcheck_command(seed: int = 0, step: float = 1e-5, out=sys.stdout) -> int:
    errors = gradcheck.check_losses(seed, step)
    ok = True
    for name, err in errors.items():
        passed = err < gradcheck.THRESHOLD
        ok &= passed
        print(f"{name:<9} max relative error {err:.3e}  {'ok' if passed else 'FAIL'}", file=out)
    print(f"threshold {gradcheck.THRESHOLD:.0e}, step {step:.0e}, seed {seed}", file=out)
    return EXIT_OK if ok else EXIT_RUNTIME


def _load(path: str | None) -> Dataset | None:
    return None if path is None else load_csv(path)


def _run(run: RunConfig) -> int:
    out_dir = Path(run.out)
    config_echo = run.to_dict()
    exp = run.experiment

    if run.subcommand == "gradcheck":
        return gradcheck_command(run.seed)

    if run.subcommand == "synth":
        files = {f"{role}.csv": dumps_csv(synth_generate(cfg)) for role, cfg in run.synth.items()}
        files["config.json"] = json.dumps(config_echo, indent=2, sort_keys=True) + "\n"
        for path in _write_atomic(files, out_dir):
            print(path)
        return EXIT_OK

    source, target = _load(run.source), _load(run.target)
    model = load_model(run.model) if run.model else None

    if run.subcommand == "pretrain":
        model, tlog = pretrain(source, exp.pretrain, run.seed, exp.network)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_model(model, out_dir / "model.npz")
        _write_atomic({"config.json": json.dumps(config_echo, indent=2, sort_keys=True) + "\n",
                       "train_log.json": json.dumps(dataclasses.asdict(tlog), indent=2) + "\n"},
                      out_dir)
        print(f"trained {tlog.epochs_run} epochs, final BCE {tlog.epoch_bce[-1]:.4f}"
              if tlog.epoch_bce else "no training epochs run")
        print(out_dir / "model.npz")
        return EXIT_OK

    if run.subcommand == "oodt":
        if model is None:
            model, _ = pretrain(source, exp.pretrain, run.seed, exp.network)
        refs = source if source is not None else None
        if refs is None:
            raise ConfigError("oodt needs --source for reference samples")
        uar_value = evaluate(model, refs, target)
        result = ExperimentResult([TrialRow("oodt", exp.source_tag, exp.target_tag, 0, 0, 0, "",
                                            run.seed, uar_value, 0)])
    elif run.subcommand == "idt":
        result = run_idt(target, exp)
    else:
        if run.subcommand == "finetune":
            exp.protocols = tuple(p for p in exp.protocols if p in FINETUNE_PROTOCOLS) \
                or FINETUNE_PROTOCOLS
        result = run_experiment(exp, target, source, model)

    emit_results(result, run.formats, out_dir, config_echo)
    print(format_summary(result))
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        run = parse_config(args)
    except (ConfigError, ParseError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    try:
        return _run(run)
    except (ConfigError, ParseError, InvalidInputError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (ArithmeticError, OSError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
