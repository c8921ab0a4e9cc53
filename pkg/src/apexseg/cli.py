"""Command-line entry point: ``apexseg {gen-data,train,eval,ablate,compare}``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from .ablation import ROW_KEYS, AblationConfig, build_model, grid, load_config, row_config
from .data import (GeneratorConfig, file_hash, generate_dataset, load_generator_config, read_dataset,
                   write_dataset)
from .decoder import ANATOMY
from .harness import (ablation_csv, dataset_info, paired_comparison, paired_runs, run_configs,
                      split_records)
from .kernels import warmup
from .train import (evaluate, kfold_split, load_checkpoint, manifest, prepare, save_checkpoint, train_model,
                    write_json, write_pgm)


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def _load_records(path: str):
    records = read_dataset(path)
    if not records:
        raise SystemExit(f"{path}: dataset holds no records")
    return records


def _ablation_config(args, records) -> AblationConfig:
    overrides = {"seed": args.seed, "fold": args.fold, "folds": args.folds, "epochs": args.epochs}
    dataset_rho = records[0].meta.get("rho")
    if args.rho is not None and dataset_rho is not None and abs(args.rho - dataset_rho) > 1e-12:
        raise SystemExit(f"--rho {args.rho} disagrees with the dataset's rho {dataset_rho}; regenerate the data")
    overrides["rho"] = args.rho if args.rho is not None else dataset_rho
    if args.config:
        return load_config(args.config, **overrides)
    A = dataset_info(records)[0]
    return row_config(args.row, A, **{k: v for k, v in overrides.items() if v is not None})


def cmd_gen_data(args) -> int:
    cfg = load_generator_config(args.config) if args.config else GeneratorConfig()
    changes = {k: v for k, v in (("seed", args.seed), ("rho", args.rho)) if v is not None}
    if changes:
        cfg = GeneratorConfig.from_dict({**cfg.to_dict(), **changes})
    records = generate_dataset(cfg)
    write_dataset(args.out, records, {"anatomy": cfg.anatomy_names(), "pathology": cfg.pathology_names()})
    print(f"wrote {len(records)} samples to {args.out} sha1 {file_hash(args.out)}")
    return 0


def _train_records(args, records):
    train = split_records(records, "train")
    if args.limit is not None:
        train = train[:args.limit]
    return train


def cmd_train(args) -> int:
    records = _load_records(args.dataset)
    cfg = _ablation_config(args, records)
    A, P, mode = dataset_info(records)
    pool = _train_records(args, records)
    data = prepare(pool, A, P, mode)
    if args.full:
        train_idx = val_idx = list(range(len(pool)))
    else:
        train_idx, val_idx = kfold_split(len(pool), cfg.folds, cfg.seed)[cfg.fold]
    model = build_model(cfg, A, P)
    _log(f"{cfg.label}: {model.num_parameters()} parameters, {len(train_idx)} training samples")
    tr = train_model(model, data.subset(train_idx), cfg, log=_log if args.verbose else None)
    report, _ = evaluate(model, data.subset(val_idx))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"config": cfg.to_dict(), "num_anatomy": A, "num_pathology": P, "mode": mode}
    save_checkpoint(model, out / "checkpoint.apexck", meta)
    extra = {"num_parameters": model.num_parameters(), "train_samples": len(train_idx),
             "eval_samples": len(val_idx), "eval_split": "train" if args.full else f"fold{cfg.fold}-val"}
    write_json(out / "manifest.json", manifest(cfg, file_hash(args.dataset), tr, report, extra))
    print(f"{cfg.label}: miou {report.miou * 100:.2f} mbiou {report.mbiou * 100:.2f} map {report.map * 100:.2f}")
    return 0


def cmd_eval(args) -> int:
    meta, state = load_checkpoint(args.checkpoint)
    cfg = AblationConfig.from_dict(meta["config"])
    A, P = meta["num_anatomy"], meta["num_pathology"]
    model = build_model(cfg, A, P)
    model.load_state_dict(state)
    records = _load_records(args.dataset)
    pool = split_records(records, args.split)
    if args.limit is not None:
        pool = pool[:args.limit]
    data = prepare(pool, A, P, meta.get("mode", "semantic"))
    report, preds = evaluate(model, data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "metrics.json", report.to_json_dict())
    if args.dump_masks:
        mask_dir = out / "masks"
        mask_dir.mkdir(exist_ok=True)
        for i, lab in enumerate(preds.pathology):
            write_pgm(mask_dir / f"{i:04d}_pathology.pgm", lab, P)
        if preds.anatomy is not None:
            for i, lab in enumerate(preds.anatomy):
                write_pgm(mask_dir / f"{i:04d}_{ANATOMY}.pgm", lab, A)
    print(f"{cfg.label} on {args.split} ({len(pool)} samples): miou {report.miou * 100:.2f} "
          f"mbiou {report.mbiou * 100:.2f} map {report.map * 100:.2f}")
    return 0


def cmd_ablate(args) -> int:
    records = _load_records(args.dataset)
    pool = _train_records(args, records)
    A = dataset_info(records)[0]
    rows = args.rows.split(",") if args.rows else list(ROW_KEYS)
    unknown = set(rows) - set(ROW_KEYS)
    if unknown:
        raise SystemExit(f"unknown rows {sorted(unknown)}; choose from {', '.join(ROW_KEYS)}")
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [args.seed if args.seed is not None else 0]
    overrides = {"epochs": args.epochs} if args.epochs is not None else {}
    rho = records[0].meta.get("rho")
    if rho is not None:
        overrides["rho"] = rho
    cfgs = [c for c in grid(A, args.folds, tuple(seeds), **overrides) if c.label in rows]
    start = time.perf_counter()
    results = run_configs(cfgs, pool, args.jobs)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    text = ablation_csv(results)
    (out / "ablation.csv").write_text(text, encoding="utf-8")
    write_json(out / "cells.json", [{"config": r.config.to_dict(), "metrics": r.report.to_json_dict(),
                                     "losses": r.losses} for r in results])
    _log(f"{len(results)} runs in {time.perf_counter() - start:.0f}s")
    print(text, end="")
    return 0


def cmd_compare(args) -> int:
    """Paired comparison of two rows over folds x seeds (sign test)."""
    records = _load_records(args.dataset)
    pool = _train_records(args, records)
    seeds = [int(s) for s in args.seeds.split(",")]
    overrides = {"epochs": args.epochs} if args.epochs is not None else {}
    runs = paired_runs([args.a, args.b], pool, seeds, args.folds, args.jobs, **overrides)
    cmp = paired_comparison(runs[args.a], runs[args.b])
    result = {"a": args.a, "b": args.b, "a_miou": runs[args.a], "b_miou": runs[args.b],
              "mean_gap_points": cmp.mean_gap, "wins": cmp.wins, "losses": cmp.losses, "ties": cmp.ties,
              "p_value": cmp.p_value}
    print(json.dumps(result, indent=2))
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        write_json(args.out, result)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="apexseg", description="Anatomy-guided pathology segmentation harness")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset file")
    g.add_argument("--config", help="generator key-value config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)
    g.add_argument("--rho", type=float)
    g.set_defaults(func=cmd_gen_data)

    def common(sp, need_out=True):
        sp.add_argument("--dataset", required=True)
        sp.add_argument("--out", required=need_out)
        sp.add_argument("--seed", type=int)
        sp.add_argument("--folds", type=int, default=5)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--limit", type=int, help="use only the first N training samples")

    t = sub.add_parser("train", help="train one configuration")
    common(t)
    t.add_argument("--config", help="ablation key-value config")
    t.add_argument("--row", default="ca", choices=ROW_KEYS, help="grid row when no --config is given")
    t.add_argument("--fold", type=int, default=0)
    t.add_argument("--rho", type=float)
    t.add_argument("--full", action="store_true", help="train and evaluate on all training samples")
    t.add_argument("--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", default="test", choices=("train", "test", "all"))
    e.add_argument("--out", required=True)
    e.add_argument("--limit", type=int)
    e.add_argument("--dump-masks", action="store_true", help="write PGM label images per sample and branch")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the ablation grid and write the table")
    common(a)
    a.add_argument("--rows", help="comma-separated subset of grid rows")
    a.add_argument("--seeds", help="comma-separated seeds (default: --seed or 0)")
    a.add_argument("--jobs", type=int, default=1)
    a.set_defaults(func=cmd_ablate)

    c = sub.add_parser("compare", help="paired sign test between two grid rows")
    common(c, need_out=False)
    c.add_argument("--a", default="ca", choices=ROW_KEYS)
    c.add_argument("--b", default="baseline", choices=ROW_KEYS)
    c.add_argument("--seeds", default="0,1,2")
    c.add_argument("--jobs", type=int, default=1)
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    warmup()
    try:
        return args.func(args)
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
