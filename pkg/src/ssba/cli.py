"""Command-line harness: ``ssba {craft,train,evaluate,defend,sweep,report}``.

Every subcommand reads a YAML config (or a named preset) plus ``--set
key.sub=value`` overrides. Failures print one JSON error record on stderr and
exit nonzero.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .config import ExperimentConfig, preset
from .core import ConfigurationError, DependencyError, GeometryError, TrainingError

EXIT_OK, EXIT_FAILURE, EXIT_USAGE, EXIT_DEPENDENCY, EXIT_LOCKED, EXIT_TRAINING = 0, 1, 2, 3, 4, 5
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".ppm", ".pgm")


class UsageError(Exception):
    pass


def _add_config_args(p):
    p.add_argument("--config", type=Path, help="YAML experiment config")
    p.add_argument("--preset", help="start from a built-in desk-scale preset (mnist, cifar10, synthetic)")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="dotted-key override, repeatable (e.g. --set train.epochs=3)")
    p.add_argument("--out", help="output directory (overrides output_dir)")
    p.add_argument("--force", action="store_true", help="recompute even if the stage already completed")


def build_parser():
    parser = argparse.ArgumentParser(prog="ssba", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    for name, text in (("craft", "build the poisoned training set and manifest"),
                       ("train", "train a model on the crafted set"),
                       ("evaluate", "compute CDA/ASR/FPR on held-out validation sets")):
        _add_config_args(sub.add_parser(name, help=text))

    p = sub.add_parser("defend", help="run the enabled defences on a trained run, or purify an image directory")
    _add_config_args(p)
    p.add_argument("--reps", type=int, default=1, help="repetitions with different defence seeds")
    p.add_argument("--images", type=Path, help="purify every image in this directory instead")
    p.add_argument("--checkpoint", type=Path, help="model checkpoint for --images")
    p.add_argument("--output", type=Path, help="destination for repaired images (with --images)")
    p.add_argument("--threshold", type=float, default=0.8, help="saliency fraction removed (with --images)")

    p = sub.add_parser("sweep", help="one craft/train/evaluate run per grid value")
    _add_config_args(p)
    p.add_argument("--axis", required=True,
                   choices=("poison_fraction", "cover_fraction", "num_source_classes", "num_backdoors"))
    p.add_argument("--grid", required=True, help="comma-separated values")
    p.add_argument("--kinds", help="comma-separated attack kinds (default: the config's kind)")

    p = sub.add_parser("report", help="aggregate evaluation reports below a directory")
    p.add_argument("root", type=Path)
    p.add_argument("--output", type=Path, help="results table path (default <root>/results.csv)")
    return parser


def load_config(args):
    if args.config and args.preset:
        raise UsageError("pass either --config or --preset, not both")
    overrides = list(args.overrides)
    if args.out:
        overrides.append(f"output_dir={args.out}")
    if args.config:
        return ExperimentConfig.load(args.config, overrides)
    if args.preset:
        return preset(args.preset).with_overrides(overrides)
    raise UsageError("a config is required: pass --config FILE or --preset NAME")


def _parse_grid(text, axis):
    vals = []
    for tok in text.split(","):
        tok = tok.strip()
        if not tok:
            continue
        try:
            vals.append(int(tok) if axis in ("num_source_classes", "num_backdoors") else float(tok))
        except ValueError as exc:
            raise UsageError(f"grid value {tok!r} is not a number") from exc
    if not vals:
        raise UsageError("sweep grid is empty")
    return vals


REQUIRED_ARTIFACT = {"train": "manifest", "evaluate": "checkpoint", "defend": "checkpoint"}


def _stage(args, stage):
    from . import pipeline

    cfg = load_config(args)
    if stage == "craft":
        run = pipeline.RunDir.resolve(cfg)
    else:
        try:
            run = pipeline.RunDir.resolve(cfg, create=False)
        except DependencyError as exc:
            raise DependencyError(f"{stage} needs the {REQUIRED_ARTIFACT[stage]} of an earlier stage; {exc}",
                                  artifact=REQUIRED_ARTIFACT[stage]) from exc
    kwargs = {"reps": args.reps} if stage == "defend" else {}
    with run.lock():
        cfg.dump(run.path / "config.yaml")
        result = pipeline.STAGE_FUNCS[stage](cfg, run, force=args.force, **kwargs)
    record = {"status": "ok", "command": stage, "run_id": run.run_id, "run_dir": str(run.path)}
    if stage == "evaluate":
        record.update(cda=result.cda, asr=result.asr, fpr=result.fpr)
    if stage == "defend":
        record["summary"] = result["summary"]
    print(json.dumps(record))


def _purify_dir(args):
    from PIL import Image

    from .defences import FebruusPurifier
    from .training import BackdoorClassifier

    if args.checkpoint is None:
        raise UsageError("--images needs --checkpoint")
    if not args.checkpoint.exists():
        raise DependencyError(f"checkpoint {args.checkpoint} not found", artifact="checkpoint")
    if not args.images.is_dir():
        raise UsageError(f"{args.images} is not a directory")
    clf = BackdoorClassifier.load(args.checkpoint)
    h, w, c = clf.input_shape_
    files = sorted(p for p in args.images.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise UsageError(f"no images in {args.images}")
    mode = "L" if c == 1 else "RGB"
    X = np.stack([np.asarray(Image.open(f).convert(mode).resize((w, h)), dtype=np.float32).reshape(h, w, c) / 255.0
                  for f in files])
    pur = FebruusPurifier(clf, threshold=args.threshold)
    repaired, pred, skipped = pur.purify(X)
    before = pur.last_original_predictions_
    out = args.output or args.images.with_name(args.images.name + "-purified")
    out.mkdir(parents=True, exist_ok=True)
    for f, img in zip(files, repaired):
        arr = np.round(img * 255).astype(np.uint8)
        Image.fromarray(arr[..., 0] if c == 1 else arr, mode).save(out / (f.stem + ".png"))
    with (out / "predictions.csv").open("w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["file", "before", "after", "changed", "skipped"])
        for f, b, a, s in zip(files, before, pred, skipped):
            wr.writerow([f.name, int(b), int(a), int(b != a), int(s)])
    print(json.dumps({"status": "ok", "command": "defend", "images": len(files), "output": str(out),
                      "changed": int((before != pred).sum())}))


def _sweep(args):
    from . import pipeline
    from .evaluation import plot_sweep, sweep, write_results_table

    cfg = load_config(args)
    grid = _parse_grid(args.grid, args.axis)
    kinds = [k.strip() for k in args.kinds.split(",")] if args.kinds else [cfg.attack.kind]
    out = Path(cfg.output_dir) / pipeline.sweep_name(cfg, args.axis, grid)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for kind in kinds:
        base = cfg.with_overrides([f"attack.kind={kind}", f"output_dir={out}"])
        rows.extend(sweep(args.axis, grid, base))
    table = write_results_table(rows, out / "results.csv")
    plot_sweep(rows, out / f"{args.axis}.png")
    failed = [r for r in rows if r.get("error")]
    print(json.dumps({"status": "ok" if not failed else "partial", "command": "sweep", "table": str(table),
                      "rows": len(rows), "failed": len(failed)}))
    return EXIT_FAILURE if failed else EXIT_OK


def _report(args):
    from .evaluation import RESULT_COLUMNS, write_results_table
    from .pipeline import collect_reports

    if not args.root.is_dir():
        raise UsageError(f"{args.root} is not a directory")
    rows = collect_reports(args.root)
    path = write_results_table(rows, args.output or args.root / "results.csv")
    w = csv.writer(sys.stdout)
    w.writerow(RESULT_COLUMNS)
    for r in rows:
        w.writerow(["" if r.get(k) is None else r.get(k) for k in RESULT_COLUMNS])
    print(json.dumps({"status": "ok", "command": "report", "rows": len(rows), "table": str(path)}), file=sys.stderr)


def _error_record(command, exc, code):
    rec = {"status": "error", "command": command, "error": type(exc).__name__, "message": str(exc),
           "exit_code": code}
    artifact = getattr(exc, "artifact", None)
    if artifact:
        rec["artifact"] = artifact
    epoch = getattr(exc, "epoch", None)
    if epoch is not None:
        rec["epoch"] = epoch
    return rec


def _exit_code(exc, locked_type):
    if isinstance(exc, (UsageError, ConfigurationError, GeometryError)):
        return EXIT_USAGE
    if isinstance(exc, DependencyError):
        return EXIT_DEPENDENCY
    if isinstance(exc, locked_type):
        return EXIT_LOCKED
    if isinstance(exc, TrainingError):
        return EXIT_TRAINING
    return EXIT_FAILURE


def run_subcommand(argv):
    """Parse ``argv`` and run one subcommand; returns the process exit status."""
    from .pipeline import RunLockedError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("craft", "train", "evaluate"):
            _stage(args, args.command)
        elif args.command == "defend":
            if args.images is not None:
                _purify_dir(args)
            else:
                _stage(args, "defend")
        elif args.command == "sweep":
            return _sweep(args)
        elif args.command == "report":
            _report(args)
        return EXIT_OK
    except Exception as exc:  # noqa: BLE001 - every failure becomes a structured record
        code = _exit_code(exc, RunLockedError)
        if code == EXIT_FAILURE:
            logging.getLogger(__name__).debug("unhandled error", exc_info=True)
        print(json.dumps(_error_record(args.command, exc, code)), file=sys.stderr)
        return code


def main(argv=None):
    sys.exit(run_subcommand(sys.argv[1:] if argv is None else argv))


if __name__ == "__main__":
    main()
