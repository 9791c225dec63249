"""Command-line interface.

Subcommands: ``run`` (full per-subject quantification), ``phantom``
(synthetic test subjects), ``warp`` (field integration/application),
``metrics`` (agreement between two results), ``parcellate`` (regions
only, no thickness or loss estimation).  Failures in a known stage exit
with status 2 and name the stage on stderr.
"""

from __future__ import annotations

import argparse
import concurrent.futures
import csv
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from ._version import __version__
from .metrics import cv_rmsd, dsc, pearson, rmsd
from .nifti import FormatError
from .phantom import make_phantom
from .pipeline import PipelineConfig, StageError, run_pipeline, save_outputs
from .volume import LabelVolume, load_volume, save_volume
from .warp import apply_field, integrate_svf, load_field, resample_field, save_field

log = logging.getLogger(__name__)


def _load_seg(path: str) -> LabelVolume:
    try:
        vol = load_volume(path)
    except (FileNotFoundError, FormatError, ValueError) as e:
        raise StageError("load", f"{path}: {e}") from e
    if not isinstance(vol, LabelVolume):
        raise StageError("load", f"{path}: segmentation must be an integer volume")
    return vol


def _load_field_arg(args, steps: int):
    """Return the deformation field implied by --svf/--dvf, or None."""
    try:
        if args.svf:
            return integrate_svf(load_field(args.svf, kind="velocity"), steps=steps)
        if args.dvf:
            return load_field(args.dvf, kind="deformation")
    except (FileNotFoundError, FormatError, ValueError) as e:
        raise StageError("load", str(e)) from e
    return None


def _build_config(args) -> PipelineConfig:
    try:
        cfg = PipelineConfig.from_file(args.config) if args.config else PipelineConfig()
        overrides = {}
        if getattr(args, "side", None):
            overrides["side"] = args.side
        if getattr(args, "no_thickness", False):
            overrides["with_thickness"] = False
        if getattr(args, "no_fcl", False):
            overrides["with_fcl"] = False
        if overrides:
            cfg = replace(cfg, **overrides)
        return cfg
    except (FileNotFoundError, ValueError, json.JSONDecodeError) as e:
        raise StageError("config", str(e)) from e


def _subject_name(path: str) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            return name[: -len(suffix)]
    return Path(path).stem


def _run_one(seg_path: str, template_path: str | None, svf: str | None,
             dvf: str | None, cfg_json: str, out_dir: str) -> None:
    cfg = PipelineConfig.from_dict(json.loads(cfg_json))
    ns = argparse.Namespace(svf=svf, dvf=dvf)
    field = _load_field_arg(ns, cfg.svf_steps)
    seg = _load_seg(seg_path)
    template = _load_seg(template_path) if template_path else None
    result = run_pipeline(seg, cfg, template_seg=template, field=field)
    save_outputs(result, out_dir)


def _cmd_run(args) -> int:
    cfg = _build_config(args)
    if args.dump_config:
        sys.stdout.write(cfg.to_json())
        return 0
    if args.svf and args.dvf:
        raise StageError("config", "--svf and --dvf are mutually exclusive")
    out = Path(args.out)

    jobs = []
    for seg_path in args.seg:
        sub_out = out if len(args.seg) == 1 else out / _subject_name(seg_path)
        jobs.append((seg_path, args.template_seg, args.svf, args.dvf,
                     cfg.to_json(), str(sub_out)))

    failures = []
    if args.workers > 1 and len(jobs) > 1:
        with concurrent.futures.ProcessPoolExecutor(max_workers=args.workers) as pool:
            futs = {pool.submit(_run_one, *j): j[0] for j in jobs}
            for fut in concurrent.futures.as_completed(futs):
                try:
                    fut.result()
                except StageError as e:
                    failures.append((futs[fut], e))
    else:
        for j in jobs:
            try:
                _run_one(*j)
            except StageError as e:
                failures.append((j[0], e))

    for seg_path, e in failures:
        print(f"error in stage {e.stage} ({seg_path}): {e}", file=sys.stderr)
    return 2 if failures else 0


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    return obj


def _cmd_phantom(args) -> int:
    kwargs = {}
    if args.kind in ("cuboid", "shell"):
        kwargs["seed"] = args.seed
    if args.kind == "shell":
        kwargs["defect_fraction"] = args.defect_fraction
    if args.kind == "cuboid":
        kwargs["defect_width"] = args.defect_width
    if args.kind in ("two-lobe", "tibial-disc", "knee"):
        kwargs["side"] = args.side or "right"
    if args.spacing:
        kwargs["spacing_mm"] = args.spacing
    try:
        ph = make_phantom(args.kind, **kwargs)
    except ValueError as e:
        raise StageError("phantom", str(e)) from e

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_volume(ph.seg, out / "seg.nii.gz", descrip=f"phantom {args.kind}")
    if ph.template_seg is not None:
        save_volume(ph.template_seg, out / "template_seg.nii.gz",
                    descrip=f"phantom {args.kind} template")
    (out / "truth.json").write_text(
        json.dumps(_jsonable(ph.truth), indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_warp(args) -> int:
    if bool(args.svf) == bool(args.dvf):
        raise StageError("config", "exactly one of --svf/--dvf is required")
    field = _load_field_arg(args, args.steps)
    try:
        if args.resample_to:
            ref = load_volume(args.resample_to)
            field = resample_field(field, ref.geometry)
        if args.apply:
            vol = load_volume(args.apply)
            warped = apply_field(vol, field)
            save_volume(warped, args.out)
        else:
            save_field(field, args.out, descrip="integrated deformation")
    except (FileNotFoundError, FormatError, ValueError) as e:
        raise StageError("warp", str(e)) from e
    return 0


def _read_report_column(path: str, column: str) -> dict[str, float]:
    with open(path) as fh:
        lines = [ln for ln in fh if not ln.startswith("#")]
    rows = list(csv.DictReader(lines))
    if not rows or column not in rows[0]:
        raise StageError("metrics", f"{path}: no column {column!r}")
    return {r["region"]: float(r[column]) for r in rows}


def _cmd_metrics(args) -> int:
    out: dict = {}
    if args.seg_a and args.seg_b:
        a = _load_seg(args.seg_a)
        b = _load_seg(args.seg_b)
        labels = [int(v) for v in args.labels.split(",")] if args.labels else \
            sorted(set(a.labels_present()) | set(b.labels_present()))
        try:
            out["dsc"] = {str(lbl): dsc(a.mask([lbl]), b.mask([lbl])) for lbl in labels}
        except ValueError as e:
            raise StageError("metrics", str(e)) from e
    elif args.report_a and args.report_b:
        col = args.column
        av = _read_report_column(args.report_a, col)
        bv = _read_report_column(args.report_b, col)
        regions = sorted(set(av) & set(bv))
        if len(regions) < 2:
            raise StageError("metrics", "fewer than two shared regions")
        ya = [av[r] for r in regions]
        yb = [bv[r] for r in regions]
        try:
            out[col] = {"pearson": pearson(ya, yb), "rmsd": rmsd(ya, yb),
                        "cv_rmsd": cv_rmsd(ya, yb), "n": len(regions)}
        except ValueError as e:
            raise StageError("metrics", str(e)) from e
    else:
        raise StageError("config", "need --seg-a/--seg-b or --report-a/--report-b")
    sys.stdout.write(json.dumps(out, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_parcellate(args) -> int:
    args.no_thickness = True
    args.no_fcl = True
    cfg = _build_config(args)
    seg = _load_seg(args.seg)
    result = run_pipeline(seg, cfg)
    save_outputs(result, args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="kneecart",
                                description="Knee cartilage morphometrics from segmentations.")
    p.add_argument("--version", action="version", version=f"kneecart {__version__}")
    p.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="quantify one or more subjects")
    run.add_argument("--seg", nargs="+", required=True, help="subject segmentation(s)")
    run.add_argument("--template-seg", help="template segmentation (optional)")
    run.add_argument("--svf", help="stationary velocity field (NIfTI, template to subject)")
    run.add_argument("--dvf", help="precomputed displacement field")
    run.add_argument("--config", help="pipeline config JSON")
    run.add_argument("--side", choices=("left", "right"))
    run.add_argument("--out", required=True, help="output directory")
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--no-thickness", action="store_true")
    run.add_argument("--no-fcl", action="store_true")
    run.add_argument("--dump-config", action="store_true",
                     help="print the effective config and exit")
    run.set_defaults(func=_cmd_run)

    ph = sub.add_parser("phantom", help="write a synthetic test subject")
    ph.add_argument("--kind", required=True,
                    choices=("slab", "cuboid", "shell", "two-lobe", "tibial-disc", "knee"))
    ph.add_argument("--out", required=True)
    ph.add_argument("--seed", type=int, default=0)
    ph.add_argument("--defect-fraction", type=float, default=0.0)
    ph.add_argument("--defect-width", type=int, default=0)
    ph.add_argument("--spacing", type=float, default=0.0)
    ph.add_argument("--side", choices=("left", "right"))
    ph.set_defaults(func=_cmd_phantom)

    wp = sub.add_parser("warp", help="integrate or apply deformation fields")
    wp.add_argument("--svf")
    wp.add_argument("--dvf")
    wp.add_argument("--steps", type=int, default=7)
    wp.add_argument("--apply", help="volume to warp")
    wp.add_argument("--resample-to", help="resample the field onto this volume's grid")
    wp.add_argument("--out", required=True)
    wp.set_defaults(func=_cmd_warp)

    mt = sub.add_parser("metrics", help="agreement between two results")
    mt.add_argument("--seg-a")
    mt.add_argument("--seg-b")
    mt.add_argument("--labels", help="comma-separated label codes for DSC")
    mt.add_argument("--report-a")
    mt.add_argument("--report-b")
    mt.add_argument("--column", default="mean_thickness_mm")
    mt.set_defaults(func=_cmd_metrics)

    pc = sub.add_parser("parcellate", help="regions and atlas only")
    pc.add_argument("--seg", required=True)
    pc.add_argument("--config")
    pc.add_argument("--side", choices=("left", "right"))
    pc.add_argument("--out", required=True)
    pc.set_defaults(func=_cmd_parcellate)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except StageError as e:
        print(f"error in stage {e.stage}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
