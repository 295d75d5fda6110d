"""Command-line pipeline: generate -> group -> pretrain -> probe, plus ablations.

Exit codes: 0 success, 1 contract/parameter error, 2 I/O or format error,
3 training divergence.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import datagen
from .encoder import load_bank, save_bank
from .errors import ContractError, FormatError, MBSLError, TrainingError
from .grouping import GroupingResult, grouping_variant
from .trainer import ABLATIONS, TrainConfig, ablate, ablation_table, linear_probe, run, write_loss_csv

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

EXIT_OK, EXIT_CONTRACT, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3

DATASET_DEFAULTS = {"seed": 0, "n_windows": 512, "fs": 50.0, "window_len": 256, "task": "regression",
                    "latent_band": [1.0, 2.5], "n_classes": 3, "harmonics": 3, "derived_fft": False,
                    "shared_intensity": True, "modalities": None}
MODALITY_KEYS = {"name", "channels", "kind", "amplitude_range", "noise_std"}
GROUPING_DEFAULTS = {"method": "tsne", "threshold": "median", "variant": "img", "sample_cap": 200}
MODEL_KEYS = ("hidden", "output_dim", "kernel_size", "layers", "scales")
OUTPUT_DEFAULTS = {"dir": "mbsl_out"}
TRAINING_KEYS = tuple(f.name for f in fields(TrainConfig)
                      if f.name not in MODEL_KEYS + ("grouping", "grouping_method", "threshold"))


class ConfigError(ContractError):
    pass


@dataclass
class ExperimentConfig:
    dataset: dict = field(default_factory=lambda: dict(DATASET_DEFAULTS))
    grouping: dict = field(default_factory=lambda: dict(GROUPING_DEFAULTS))
    model: dict = field(default_factory=dict)
    training: dict = field(default_factory=dict)
    output: dict = field(default_factory=lambda: dict(OUTPUT_DEFAULTS))

    @property
    def out_dir(self) -> Path:
        return Path(self.output["dir"])

    def specs(self) -> list:
        mods = self.dataset["modalities"]
        if mods is None:
            return datagen.default_specs()
        specs = []
        for i, m in enumerate(mods):
            _reject_unknown(m, MODALITY_KEYS, f"dataset.modalities[{i}]")
            try:
                specs.append(datagen.ModalitySpec(**{k: (tuple(v) if k == "amplitude_range" else v)
                                                     for k, v in m.items()}))
            except (MBSLError, TypeError, ValueError) as e:
                bad = next((k for k in ("channels", "kind", "amplitude_range", "noise_std", "name")
                            if k in str(e)), "?")
                raise ConfigError(f"dataset.modalities[{i}].{bad}: {e}") from None
        return specs

    def train_config(self) -> TrainConfig:
        d = dict(self.training)
        d.update(self.model)
        g = self.grouping
        d.update(grouping=g["variant"], grouping_method=g["method"],
                 threshold=None if g["threshold"] in (None, "median") else float(g["threshold"]))
        try:
            return TrainConfig.from_dict(d)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"training/model: {e}") from None


def _reject_unknown(section: dict, allowed, where: str):
    if not isinstance(section, dict):
        raise ConfigError(f"{where} must be a table")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {unknown}")


def parse_config(raw: dict) -> ExperimentConfig:
    _reject_unknown(raw, {"dataset", "grouping", "model", "training", "output"}, "config")
    cfg = ExperimentConfig()
    checks = (("dataset", DATASET_DEFAULTS), ("grouping", GROUPING_DEFAULTS), ("model", MODEL_KEYS),
              ("training", TRAINING_KEYS), ("output", OUTPUT_DEFAULTS))
    for name, allowed in checks:
        section = raw.get(name, {})
        _reject_unknown(section, allowed, name)
        getattr(cfg, name).update(section)
    return cfg


def load_config(path) -> ExperimentConfig:
    """TOML, or JSON when the file name ends in ``.json``."""
    if path is None:
        return ExperimentConfig()
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as e:
        raise FormatError(f"cannot read config {p}: {e}", field="config") from None
    try:
        raw = json.loads(text) if p.suffix == ".json" else tomllib.loads(text)
    except (json.JSONDecodeError, tomllib.TOMLDecodeError) as e:
        raise FormatError(f"{p}: {e}", field="config") from None
    return parse_config(raw)


# ---------------------------------------------------------------------------
# steps


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _load_dataset(path) -> datagen.MultiModalDataset:
    p = Path(path)
    if not p.is_dir():
        raise FormatError(f"dataset directory {p} does not exist", field="dataset")
    return datagen.load(p)


def _grouping_from_bank(bank, dataset) -> GroupingResult:
    index = {n: i for i, n in enumerate(dataset.names)}
    try:
        groups = [[index[n] for n in spec.modality_names] for spec in bank.specs]
    except KeyError as e:
        raise ContractError(f"checkpoint modality {e} is not in the dataset") from None
    M = len(dataset.names)
    return GroupingResult(groups, np.zeros((M, M)), names=dataset.names)


def step_generate(cfg: ExperimentConfig) -> Path:
    d = cfg.dataset
    ds = datagen.generate(d["seed"], d["n_windows"], d["fs"], d["window_len"], cfg.specs(), task=d["task"],
                          latent_band=tuple(d["latent_band"]), n_classes=d["n_classes"],
                          harmonics=d["harmonics"], derived_fft=d["derived_fft"],
                          shared_intensity=d["shared_intensity"])
    out = cfg.out_dir / "dataset"
    datagen.save(ds, out)
    print(_dump(datagen.manifest_dict(ds)), end="")
    return out


def step_group(dataset_dir, cfg: ExperimentConfig, out_file=None) -> GroupingResult:
    ds = _load_dataset(dataset_dir)
    g = cfg.grouping
    seed = cfg.train_config().seed
    thr = None if g["threshold"] in (None, "median") else float(g["threshold"])
    res = grouping_variant(ds, g["variant"], seed, g["method"], thr, g["sample_cap"])
    text = res.to_json()
    _write(Path(out_file) if out_file else cfg.out_dir / "grouping.json", text + "\n")
    print(text)
    return res


def step_pretrain(dataset_dir, cfg: ExperimentConfig, grouping_file=None):
    ds = _load_dataset(dataset_dir)
    tc = cfg.train_config()
    gpath = Path(grouping_file) if grouping_file else cfg.out_dir / "grouping.json"
    if gpath.exists():
        try:
            grouping = GroupingResult.from_dict(json.loads(gpath.read_text()))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as e:
            raise FormatError(f"{gpath}: malformed grouping ({e})", field="grouping") from None
    else:
        grouping = step_group(dataset_dir, cfg, gpath)
    bank, grouping, report = run(ds, tc, grouping=grouping, tag="pretrain")
    out = cfg.out_dir
    save_bank(bank, out / "checkpoint")
    write_loss_csv(out / "loss.csv", report.loss_curve, report.loss_name)
    _write(out / "pretrain_report.json", report.to_json() + "\n")
    print(_dump({"steps": len(report.loss_curve), "final_loss": report.loss_curve[-1] if report.loss_curve else None,
                 "test": report.metrics.get("test")}), end="")
    return report


def step_probe(dataset_dir, cfg: ExperimentConfig, checkpoint=None) -> dict:
    ck = Path(checkpoint) if checkpoint else cfg.out_dir / "checkpoint"
    if not (ck / "manifest.json").exists():
        raise FormatError(f"no checkpoint at {ck}; run 'mbsl pretrain' first", field="checkpoint")
    bank = load_bank(ck)
    ds = _load_dataset(dataset_dir)
    result = linear_probe(bank, _grouping_from_bank(bank, ds), ds, cfg.train_config())
    _write(cfg.out_dir / "probe_report.json", _dump(result))
    print(_dump(result), end="")
    return result


def step_ablate(dataset_dir, cfg: ExperimentConfig, variants=None, jobs: int = 1) -> dict:
    ds = _load_dataset(dataset_dir)
    tc = cfg.train_config()
    g = cfg.grouping
    thr = None if g["threshold"] in (None, "median") else float(g["threshold"])
    base = grouping_variant(ds, "img", tc.seed, g["method"], thr, g["sample_cap"])
    reports = ablate(ds, tc, variants, jobs=jobs, base_grouping=base)
    table = ablation_table(reports)
    out = cfg.out_dir
    for r in reports:
        _write(out / "ablation" / f"{r.tag}.json", r.to_json() + "\n")
    _write(out / "ablation_table.json", _dump(table))
    print(_dump(table), end="")
    return table


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(p, dataset=True):
    p.add_argument("--config", help="TOML or JSON experiment config")
    p.add_argument("--out", help="output directory (overrides output.dir)")
    p.add_argument("--seed", type=int, help="training seed (overrides training.seed)")
    if dataset:
        p.add_argument("--dataset", help="dataset directory (default: <out>/dataset)")


def _add_training(p):
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--max-steps", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mbsl", description="Grouped multi-scale contrastive pretraining "
                                     "on synthetic multi-modal biomedical time series.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic dataset")
    _add_common(p, dataset=False)
    p.add_argument("--n-windows", type=int)

    p = sub.add_parser("group", help="group modalities by inter-modal distance")
    _add_common(p)
    p.add_argument("--method", choices=["tsne", "pca"])
    p.add_argument("--threshold", help="distance threshold, or 'median'")
    p.add_argument("--variant", choices=["img", "none", "random", "full"])
    p.add_argument("--output-file", help="where to write the grouping JSON")

    p = sub.add_parser("pretrain", help="contrastive pretraining and probe; writes a checkpoint")
    _add_common(p)
    _add_training(p)
    p.add_argument("--grouping", help="grouping JSON (default: <out>/grouping.json, computed if absent)")

    p = sub.add_parser("probe", help="linear probe of a saved checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", help="checkpoint directory (default: <out>/checkpoint)")

    p = sub.add_parser("ablate", help="run ablation variants and write a comparison table")
    _add_common(p)
    _add_training(p)
    p.add_argument("--variants", help=f"comma-separated subset of: {','.join(ABLATIONS)}")
    p.add_argument("--jobs", type=int, default=1, help="run variants in this many worker processes")

    p = sub.add_parser("all", help="generate, group, pretrain and probe in one go")
    _add_common(p, dataset=False)
    _add_training(p)
    p.add_argument("--n-windows", type=int)
    return parser


def _apply_overrides(cfg: ExperimentConfig, args):
    if getattr(args, "out", None):
        cfg.output["dir"] = args.out
    if getattr(args, "seed", None) is not None:
        cfg.training["seed"] = args.seed
    for flag, key in (("epochs", "epochs"), ("batch_size", "batch_size"), ("max_steps", "max_steps")):
        if getattr(args, flag, None) is not None:
            cfg.training[key] = getattr(args, flag)
    if getattr(args, "n_windows", None) is not None:
        cfg.dataset["n_windows"] = args.n_windows
    for flag in ("method", "variant", "threshold"):
        if getattr(args, flag, None) is not None:
            cfg.grouping[flag] = args.__dict__[flag]
    return cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = _apply_overrides(load_config(args.config), args)
        dataset_dir = getattr(args, "dataset", None) or cfg.out_dir / "dataset"
        if args.command == "generate":
            step_generate(cfg)
        elif args.command == "group":
            step_group(dataset_dir, cfg, args.output_file)
        elif args.command == "pretrain":
            step_pretrain(dataset_dir, cfg, args.grouping)
        elif args.command == "probe":
            step_probe(dataset_dir, cfg, args.checkpoint)
        elif args.command == "ablate":
            variants = [v.strip() for v in args.variants.split(",")] if args.variants else None
            step_ablate(dataset_dir, cfg, variants, args.jobs)
        else:
            step_generate(cfg)
            step_group(cfg.out_dir / "dataset", cfg)
            step_pretrain(cfg.out_dir / "dataset", cfg)
            step_probe(cfg.out_dir / "dataset", cfg)
    except TrainingError as e:
        print(f"mbsl: training diverged at step {e.step}: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except FormatError as e:
        where = f" [{e.field}]" if e.field else ""
        print(f"mbsl: {e}{where}", file=sys.stderr)
        return EXIT_IO
    except OSError as e:
        print(f"mbsl: I/O error: {e}", file=sys.stderr)
        return EXIT_IO
    except (MBSLError, ValueError) as e:
        print(f"mbsl: {e}", file=sys.stderr)
        return EXIT_CONTRACT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
