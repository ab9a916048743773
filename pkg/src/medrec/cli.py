"""Command line entry point: synth, train, eval, predict, stats, inspect."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .checkpoint import load_checkpoint, read_meta
from .config import ABLATIONS, CURRICULUM_DIRECTIONS, PRESETS, RunConfig, build_config, with_overrides
from .data import load_dataset, read_patients, split_dataset
from .errors import ConfigurationError, MedrecError
from .metrics import bootstrap_evaluate, predict_dump, visit_breakdown, write_dump
from .model import MedRecModel
from .objective import DDI_MODES
from .optim import MOMENT_MODES
from .stats import dataset_stats, format_stats
from .synth import SynthConfig, write_synthetic
from .train import training_loop

log = logging.getLogger("medrec")


def _synth_config(args) -> SynthConfig:
    values = {}
    if args.config:
        import yaml

        doc = yaml.safe_load(Path(args.config).read_text(encoding="utf-8")) or {}
        known = {f.name for f in fields(SynthConfig)}
        for key, value in doc.items():
            name = str(key).replace("-", "_")
            if name not in known:
                raise ConfigurationError(f"unknown synth key {key!r}")
            values[name] = value
    flags = {
        "n_patients": args.patients, "seed": args.seed, "n_diag": args.n_diag,
        "n_proc": args.n_proc, "n_med": args.n_med, "mean_visits": args.mean_visits,
        "max_visits": args.max_visits, "persistence": args.persistence,
        "ddi_density": args.ddi_density,
    }
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.ddi_avoiding:
        values["ddi_avoiding"] = True
    for key in ("diag_per_visit", "meds_per_diag"):
        if key in values:
            values[key] = tuple(values[key])
    return SynthConfig(**values)


def cmd_synth(args) -> int:
    out = Path(args.out)
    if out.exists() and any(out.iterdir()) and not args.overwrite:
        raise ConfigurationError(f"{out} exists and is not empty; pass --overwrite to replace it")
    cfg = _synth_config(args)
    dataset = write_synthetic(cfg, out)
    report = dataset_stats(dataset.patients, dataset.ddi)
    print(f"wrote {len(dataset.patients)} patients to {out}")
    print("\n".join(format_stats(report).splitlines()[:8]))
    return 0


def _run_config(args) -> RunConfig:
    overrides = {
        "dim": args.dim, "n_inducing": args.n_inducing, "heads": args.heads,
        "n_states": args.states, "rab_heads": args.rab_heads, "lr": args.lr,
        "epochs": args.epochs, "seed": args.seed, "alpha": args.alpha,
        "patience": args.patience, "max_iter": args.max_iter,
        "moment_mode": args.moment_mode, "ddi_mode": args.ddi_mode,
        "curriculum": args.curriculum,
    }
    for name in ABLATIONS:
        if getattr(args, name):
            overrides[name] = True
    cfg = build_config(args.preset, args.config, overrides)
    return with_overrides(cfg, patience=None) if args.no_early_stop else cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    dataset = load_dataset(args.data)
    split = split_dataset(dataset.patients, cfg.split_ratios, cfg.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(json.dumps(cfg.to_json(), indent=2) + "\n", encoding="utf-8")
    (out / "split.json").write_text(json.dumps({
        "train": list(split.train), "validation": list(split.validation), "test": list(split.test),
    }) + "\n", encoding="utf-8")
    model = MedRecModel(cfg.model_config(*dataset.vocab.sizes))
    log.info("training %s on %d patients", cfg.variant, len(split.train))
    result = training_loop(model, dataset, split.train, cfg, split.validation, out)
    print(json.dumps({
        "variant": cfg.variant,
        "epochs_run": result.epochs_run,
        "steps": len(result.loss_trace),
        "best_epoch": result.best_epoch,
        "best_val_jaccard": result.best_score,
        "checkpoint": str(out / "checkpoint.npz"),
        "loss_trace": str(out / f"loss_trace_{cfg.variant}.csv"),
    }, indent=2))
    return 0


def _check_vocab(model: MedRecModel, sizes: tuple[int, int, int], source: str) -> None:
    c = model.config
    if (c.n_diag, c.n_proc, c.n_med) != tuple(sizes):
        raise ConfigurationError(
            f"checkpoint vocabulary {(c.n_diag, c.n_proc, c.n_med)} does not match {source} {tuple(sizes)}"
        )


def cmd_eval(args) -> int:
    model, _, meta = load_checkpoint(args.checkpoint)
    dataset = load_dataset(args.data)
    _check_vocab(model, dataset.vocab.sizes, args.data)
    run = meta.get("extra", {}).get("config", {})
    seed = run.get("seed", 2023)
    ratios = run.get("split_ratios", (4, 1, 1))
    split = split_dataset(dataset.patients, ratios, seed)
    patients = dataset.subset(split.part(args.split))
    dump = predict_dump(model, patients)
    rounds = args.rounds if args.rounds is not None else run.get("eval_rounds", 10)
    fraction = args.fraction if args.fraction is not None else run.get("eval_fraction", 0.8)
    report = bootstrap_evaluate(dump, dataset.ddi, rounds, fraction, args.seed if args.seed is not None else seed)
    if args.by_visit:
        report.by_visit = visit_breakdown(dump, dataset.ddi)
    report.config = {"checkpoint": str(args.checkpoint), "split": args.split, "run": run}
    if args.dump:
        write_dump(args.dump, dump)
    doc = json.dumps(report.to_json(), indent=2)
    if args.out:
        Path(args.out).write_text(doc + "\n", encoding="utf-8")
    print(report.format() if args.text else doc)
    return 0


def cmd_predict(args) -> int:
    model, _, _ = load_checkpoint(args.checkpoint)
    c = model.config
    patients = read_patients(args.patients, (c.n_diag, c.n_proc, c.n_med), supervised=False)
    dump = predict_dump(model, patients)
    write_dump(args.out or "/dev/stdout", dump)
    return 0


def cmd_stats(args) -> int:
    dataset = load_dataset(args.data)
    report = dataset_stats(dataset.patients, dataset.ddi)
    if args.json:
        print(json.dumps(report, indent=2))
    else:
        print(format_stats(report))
    return 0


def cmd_inspect(args) -> int:
    meta = read_meta(args.checkpoint)
    with np.load(args.checkpoint, allow_pickle=False) as archive:
        shapes = {k[len("param/"):]: list(archive[k].shape) for k in archive.files if k.startswith("param/")}
    meta["parameter_count"] = int(sum(int(np.prod(s)) for s in shapes.values()))
    meta["parameters"] = shapes
    print(json.dumps(meta, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="medrec", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="YAML/JSON file with generator settings")
    p.add_argument("--patients", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--n-diag", type=int)
    p.add_argument("--n-proc", type=int)
    p.add_argument("--n-med", type=int)
    p.add_argument("--mean-visits", type=float)
    p.add_argument("--max-visits", type=int)
    p.add_argument("--persistence", type=float)
    p.add_argument("--ddi-density", type=float)
    p.add_argument("--ddi-avoiding", action="store_true")
    p.add_argument("--overwrite", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write checkpoints")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.add_argument("--preset", choices=sorted(PRESETS))
    p.add_argument("--dim", type=int)
    p.add_argument("--n-inducing", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--states", type=int)
    p.add_argument("--rab-heads", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--alpha", type=float)
    p.add_argument("--patience", type=int)
    p.add_argument("--no-early-stop", action="store_true")
    p.add_argument("--max-iter", type=int)
    p.add_argument("--moment-mode", choices=MOMENT_MODES)
    p.add_argument("--ddi-mode", choices=DDI_MODES)
    p.add_argument("--curriculum", choices=CURRICULUM_DIRECTIONS)
    for name in ABLATIONS:
        p.add_argument("--" + name.replace("_", "-"), dest=name, action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="bootstrap evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=("train", "validation", "test"))
    p.add_argument("--rounds", type=int)
    p.add_argument("--fraction", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--by-visit", action="store_true", help="add metrics for visits 1..5")
    p.add_argument("--dump", help="also write the prediction dump here")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--text", action="store_true", help="print a table instead of JSON")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="predict medications for a patients.jsonl file")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--patients", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--json", action="store_true")
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("inspect", help="print checkpoint metadata")
    p.add_argument("--checkpoint", required=True)
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return args.func(args)
    except (MedrecError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
