"""Command-line entry point.

Subcommands: train, infer, eval, inflate, split, verify.
Exit codes: 0 success, 2 input/validation error, 3 partial evaluation,
4 numeric fault.
"""
from __future__ import annotations

import argparse
import os
import sys

from . import data, metrics, pipeline
from .config import load_config
from .errors import (ConfigError, DimensionError, FormatError, NumericFault,
                     ValidationError, XdsegError)
from .inflate import InflationPlan, inflate_store, verify_inflation_equivalence
from .io import read_volume
from .store import load_checkpoint, save_checkpoint

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_PARTIAL = 3
EXIT_NUMERIC = 4


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--seed", type=int, help="override [run] seed")
    p.add_argument("--precision", choices=("single", "double"),
                   help="override [run] precision")
    p.add_argument("--out", help="override output location")


def _load_cfg(args, require=True):
    if not args.config:
        if require:
            raise ConfigError("--config is required for this command")
        return None
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.precision:
        cfg.precision = args.precision
    if args.out:
        cfg.out_dir = args.out
    return cfg


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    run_dir = pipeline.train_run(cfg, resume=args.resume)
    print(f"run complete: {run_dir}")
    return EXIT_OK


def cmd_infer(args) -> int:
    cfg = _load_cfg(args)
    out_dir = args.out or cfg.out_dir
    written = pipeline.infer_run(cfg, args.checkpoint, args.manifest, out_dir)
    print(f"wrote {len(written)} mask(s) to {out_dir}")
    return EXIT_OK


def _mask_paths(directory: str) -> dict[str, str]:
    found = {}
    for name in sorted(os.listdir(directory)):
        if name.endswith((".nii", ".nii.gz", ".mhd")):
            case = name
            for suffix in (".nii.gz", ".nii", ".mhd"):
                if case.endswith(suffix):
                    case = case[: -len(suffix)]
                    break
            found[case] = os.path.join(directory, name)
    return found


def cmd_eval(args) -> int:
    classes = [int(c) for c in args.classes.replace(",", " ").split()]
    preds = _mask_paths(args.pred_dir)
    gts = _mask_paths(args.gt_dir)
    missing = sorted(set(gts) - set(preds))
    reports = []
    for case_id in sorted(gts):
        if case_id not in preds:
            continue
        gt, spacing = read_volume(gts[case_id])
        pred, _ = read_volume(preds[case_id])
        if args.spacing == "unit":
            spacing = (1.0,) * gt.ndim
        reports.append(metrics.evaluate_case(
            pred, gt, spacing, classes, case_id=case_id,
            connectivity=args.connectivity))
    if not reports:
        raise ValidationError("no matching cases between pred and gt dirs")
    out = args.out or "report.csv"
    tmp = out + ".tmp"
    metrics.write_report_csv(tmp, reports)
    os.replace(tmp, out)
    print(f"evaluated {len(reports)} case(s) -> {out}")
    if missing:
        for case_id in missing:
            print(f"skipped (no prediction): {case_id}", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_inflate(args) -> int:
    if not args.out:
        raise ConfigError("inflate needs --out for the inflated checkpoint")
    store = load_checkpoint(args.input)
    plan = InflationPlan(kd=args.kd, mode=args.mode)
    inflated = inflate_store(store, plan)
    save_checkpoint(inflated, args.out)
    worst = 0.0
    for entry in store.entries:
        if entry.role == "conv-kernel":
            rep = verify_inflation_equivalence(
                store[entry.name], args.kd, mode=args.mode)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                print(f"verification FAILED for {entry.name}: "
                      f"rel error {rep.max_rel_error:.3e}", file=sys.stderr)
                return EXIT_NUMERIC
    print(f"inflated {len(inflated.entries)} entries (kd={args.kd}, "
          f"mode={args.mode}); max equivalence rel error {worst:.3e}")
    return EXIT_OK


def cmd_split(args) -> int:
    rows = data.read_manifest(args.manifest)
    ids = [r.case_id for r in rows]
    by_id = {r.case_id: r for r in rows}
    if args.folds:
        folds = data.kfold_split(ids, args.folds, seed=args.seed or 0)
        for r in rows:
            r.split = next(f"fold{i}" for i, fold in enumerate(folds)
                           if r.case_id in fold)
    else:
        train_ids, val_ids = data.holdout_split(
            ids, args.holdout, seed=args.seed or 0)
        for cid in train_ids:
            by_id[cid].split = "train"
        for cid in val_ids:
            by_id[cid].split = "val"
    out = args.out or args.manifest
    tmp = out + ".tmp"
    data.write_manifest(tmp, rows)
    os.replace(tmp, out)
    print(f"wrote split manifest: {out}")
    return EXIT_OK


def cmd_verify(args) -> int:
    store = load_checkpoint(args.checkpoint)
    kernels = [e for e in store.entries if e.role == "conv-kernel"]
    bad2d = [e.name for e in kernels if store[e.name].ndim != 4]
    if bad2d:
        raise ValidationError(
            f"verification needs a 2D store; non-2D kernels: {bad2d}")
    failed = []
    worst = 0.0
    for entry in kernels:
        for kd in (1, 2, 3, 5):
            rep = verify_inflation_equivalence(
                store[entry.name], kd, mode=args.mode)
            worst = max(worst, rep.max_rel_error)
            if not rep.passed:
                failed.append((entry.name, kd, rep.max_rel_error))
    for name, kd, err in failed:
        print(f"FAIL {name} kd={kd}: rel error {err:.3e}", file=sys.stderr)
    print(f"checked {len(kernels)} kernel(s); max rel error {worst:.3e}; "
          f"{'FAIL' if failed else 'PASS'}")
    return EXIT_NUMERIC if failed else EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xdseg",
        description="Cross-dimensional segmentation: train, infer, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="run a training loop from a config")
    _add_common(p)
    p.add_argument("--resume", help="run directory to continue from")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("infer", help="segment manifest cases with a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.set_defaults(fn=cmd_infer)

    p = sub.add_parser("eval", help="per-case metrics and cohort summary CSV")
    _add_common(p)
    p.add_argument("--pred-dir", required=True)
    p.add_argument("--gt-dir", required=True)
    p.add_argument("--classes", default="1",
                   help="comma-separated integer labels to score")
    p.add_argument("--spacing", choices=("from-gt", "unit"), default="from-gt")
    p.add_argument("--connectivity", type=int, choices=(6, 26), default=6)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("inflate", help="depth-inflate a 2D checkpoint to 3D")
    _add_common(p)
    p.add_argument("--input", required=True, help="2D checkpoint path")
    p.add_argument("--kd", type=int, required=True, help="target kernel depth")
    p.add_argument("--mode", choices=("replicate", "replicate-scaled"),
                   default="replicate")
    p.set_defaults(fn=cmd_inflate)

    p = sub.add_parser("split", help="assign fold/holdout tags in a manifest")
    _add_common(p)
    p.add_argument("--manifest", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--folds", type=int)
    group.add_argument("--holdout", type=float,
                       help="validation fraction in (0, 1)")
    p.set_defaults(fn=cmd_split)

    p = sub.add_parser("verify",
                       help="check inflation equivalence for a 2D checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--mode", choices=("replicate", "replicate-scaled"),
                   default="replicate")
    p.set_defaults(fn=cmd_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericFault as exc:
        print(f"numeric fault: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, ValidationError, DimensionError, FormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except FileNotFoundError as exc:
        print(f"error: missing file: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except XdsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
