"""Command-line interface.

Exit codes: 0 success, 1 usage error, 2 invalid input data.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import warnings
from typing import Optional, Sequence

import numpy as np

from . import io as cio
from .box_intervals import BoxMethod, Sidedness
from .conformal import coverage_distribution
from .harness import PipelineConfig, SimulationSpec, generate_arrays, run_coverage_study, split_images, _rng
from .label_sets import LabelMethod
from .matching import group_by_image, match_dataset
from .metrics import stratified_report
from .pipeline import (
    Correction,
    DetectionBatch,
    MiscoverageConfig,
    batches_from_samples,
    calibrate_batch,
    predict_batch,
)
from .records import DetectionRecord, GroundTruthObject

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2

DEFAULT_STUDY_CONFIGS = [
    PipelineConfig(name="classthr-std", box_method="std"),
    PipelineConfig(name="classthr-ens", box_method="ens"),
    PipelineConfig(name="classthr-cqr", box_method="cqr"),
]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _format_warning(message, category, filename, lineno, line=None):
    return f"warning: {message}\n"


# -- subcommands --------------------------------------------------------------------


def _class_mapping(args):
    return cio.load_class_mapping(args.class_map) if getattr(args, "class_map", None) else None


def cmd_match(args) -> int:
    stats_d, stats_t = {}, {}
    dets = cio.load_detections(args.detections, lenient=args.lenient, stats=stats_d)
    truths = cio.load_truth(args.truth, _class_mapping(args), lenient=args.lenient, stats=stats_t)
    for name, st in (("detections", stats_d), ("truth", stats_t)):
        if st.get("dropped"):
            warnings.warn(f"dropped {st['dropped']} invalid {name} line(s)")
    samples = match_dataset(group_by_image(dets), group_by_image(truths), args.iou_threshold)
    n = cio.save_matched(args.output, samples)
    print(f"matched {n} of {len(truths)} ground-truth objects ({len(dets)} detections)")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    stats = {}
    samples = cio.load_matched(args.matched, lenient=args.lenient, stats=stats)
    if stats.get("dropped"):
        warnings.warn(f"dropped {stats['dropped']} invalid matched line(s)")
    if not samples:
        raise cio.DataError(f"{args.matched}: no matched samples")
    X, y = batches_from_samples(samples)
    model = calibrate_batch(
        X,
        y,
        MiscoverageConfig(args.alpha_label, args.alpha_box),
        box_method=args.box_method,
        correction=args.correction,
        label_method=args.label_method,
        min_class_count=args.min_class_count,
        n_classes=args.n_classes,
    )
    cio.save_model(model, args.output)
    print(
        f"calibrated {len(samples)} samples, {model.n_classes} classes, "
        f"box method {model.box_method.value} with {model.correction.value} correction"
    )
    return EXIT_OK


def _match_for_oracle(dets, truths):
    samples = match_dataset(group_by_image(dets), group_by_image(truths))
    return [s.prediction for s in samples], [s.truth for s in samples]


def cmd_predict(args) -> int:
    model = cio.load_model(args.model)
    label_method = LabelMethod(args.label_method) if args.label_method else model.label_method
    dets = cio.load_detections(args.detections)
    truths = None
    if args.truth:
        truths = cio.load_truth(args.truth, _class_mapping(args))
    if label_method is LabelMethod.ORACLE:
        if truths is None:
            raise UsageError("predict: the oracle label method needs --truth")
        dets, truths = _match_for_oracle(dets, truths)
    elif truths is not None:
        # truth is only needed by the oracle; pairing happens in `evaluate`
        truths = None
    if not dets:
        raise cio.DataError("no detections to predict")
    X = DetectionBatch.from_records(dets)
    labels = None if truths is None else [t.label for t in truths]
    out = predict_batch(model, X, labels, label_method)
    n = cio.write_jsonl(args.output, cio.prediction_rows(dets, out, truths))
    print(f"wrote {n} predictions ({label_method.value} label sets, {model.box_method.value} intervals)")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    rows = cio.load_predictions(args.predictions)
    truths = cio.load_truth(args.truth, _class_mapping(args))
    if not rows:
        raise cio.DataError(f"{args.predictions}: no predictions")
    by_det = {}
    for i, r in enumerate(rows):
        by_det[id(r["detection"])] = i
    samples = match_dataset(group_by_image([r["detection"] for r in rows]), group_by_image(truths))
    if not samples:
        raise cio.DataError("no prediction matched a ground-truth object")
    idx = [by_det[id(s.prediction)] for s in samples]
    k = len(rows[0]["detection"].probs)
    mask = np.zeros((len(idx), k), dtype=bool)
    for j, i in enumerate(idx):
        mask[j, rows[i]["label_set"]] = True
    lo = np.array([rows[i]["lo"] for i in idx], dtype=float)
    hi = np.array([rows[i]["hi"] for i in idx], dtype=float)
    pred = np.array([rows[i]["detection"].box for i in idx], dtype=float)
    probs = np.array([rows[i]["detection"].probs for i in idx], dtype=float)
    truth_boxes = np.array([s.truth.box for s in samples], dtype=float)
    labels = np.array([s.truth.label for s in samples], dtype=int)
    sidedness = Sidedness(rows[idx[0]]["sidedness"])
    report = stratified_report(
        mask, lo, hi, pred, truth_boxes, labels, probs=probs, sidedness=sidedness, n_classes=k,
        config={"predictions": os.path.basename(args.predictions), "matched": len(samples)},
    )
    text = report.to_csv()
    if args.output:
        with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    if args.json:
        with open(args.json, "w", encoding="utf-8", newline="\n") as fh:
            json.dump(_jsonable(report.to_dict()), fh, indent=2, sort_keys=True)
            fh.write("\n")
    return EXIT_OK


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, float):
        return None if np.isnan(obj) else cio.encode_float(obj)
    return obj


def load_study_file(path):
    with open(path, encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise cio.DataError(f"{path}: malformed JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise cio.DataError(f"{path}: expected a JSON object")
    spec_d = raw.get("spec", {k: v for k, v in raw.items() if k != "configs"})
    spec = SimulationSpec.from_dict(spec_d)
    try:
        configs = [PipelineConfig.from_dict(c) for c in raw.get("configs", [])] or DEFAULT_STUDY_CONFIGS
    except TypeError as exc:
        raise cio.DataError(f"{path}: invalid pipeline config ({exc})") from None
    return spec, configs


def dump_synthetic(data, directory) -> None:
    """Write a calibration/test split of the synthetic data as JSONL inputs."""
    os.makedirs(directory, exist_ok=True)
    spec = data.spec
    cal = split_images(_rng(spec.seed, 1, 0), data.image_index, spec.calibration_fraction)
    det = data.detections
    for part, sel in (("cal", cal), ("test", ~cal)):
        idx = np.flatnonzero(sel)
        dets = (
            DetectionRecord(
                image_id=f"img{data.image_index[i]:06d}",
                box=det.boxes[i],
                probs=det.probs[i],
                confidence=det.confidence[i],
                sigma=None if det.sigma is None else det.sigma[i],
                q_lo=det.q_lo[i],
                q_hi=det.q_hi[i],
                image_width=spec.image_width,
                image_height=spec.image_height,
            )
            for i in idx
        )
        truths = (
            GroundTruthObject(f"img{data.image_index[i]:06d}", data.truth_boxes[i], data.labels[i])
            for i in idx
        )
        cio.save_detections(os.path.join(directory, f"{part}_detections.jsonl"), dets)
        cio.save_truth(os.path.join(directory, f"{part}_truth.jsonl"), truths)


def cmd_simulate(args) -> int:
    spec, configs = load_study_file(args.spec)
    if args.trials is not None:
        spec.n_trials = args.trials
        spec.validate()
    data = generate_arrays(spec)
    if args.dump_data:
        dump_synthetic(data, args.dump_data)
        print(f"wrote calibration/test split to {args.dump_data}")
    if args.output or args.aggregate or not args.dump_data:
        summary = run_coverage_study(spec, configs, data=data, n_jobs=args.n_jobs)
        if args.output:
            with open(args.output, "w", encoding="utf-8", newline="\n") as fh:
                fh.write(summary.to_csv())
        agg = summary.aggregate()
        if args.aggregate:
            import csv

            with open(args.aggregate, "w", encoding="utf-8", newline="\n") as fh:
                w = csv.DictWriter(fh, fieldnames=list(agg[0]), lineterminator="\n")
                w.writeheader()
                w.writerows(agg)
        for row in agg:
            if row["cell"] == "all" and row["metric"] in ("label_coverage", "box_coverage", "joint_coverage", "mpiw"):
                print(f"{row['config']:<24} {row['metric']:<16} mean={row['mean']:.4f}")
    return EXIT_OK


def cmd_coverage_bounds(args) -> int:
    dist = coverage_distribution(args.n, args.alpha)
    if dist.degenerate:
        print(f"l = 0: coverage is 1 almost surely for n={args.n}, alpha={args.alpha}")
        return EXIT_OK
    lo, hi = dist.bounds(args.lower, args.upper)
    print(f"Beta({dist.a:g}, {dist.b:g})")
    print(f"mean {dist.mean:.6f}")
    print(f"q{args.lower:g} {lo:.6f}")
    print(f"q{args.upper:g} {hi:.6f}")
    return EXIT_OK


# -- parser -------------------------------------------------------------------------------


def _alpha(s: str) -> float:
    try:
        v = float(s)
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a number: {s!r}") from None
    return v


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="conformal-od", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    m = sub.add_parser("match", help="pair detections with ground truth (IoU >= threshold)")
    m.add_argument("--detections", required=True)
    m.add_argument("--truth", required=True)
    m.add_argument("--output", required=True)
    m.add_argument("--class-map")
    m.add_argument("--iou-threshold", type=float, default=0.5)
    m.add_argument("--lenient", action="store_true", help="drop invalid lines instead of failing")
    m.set_defaults(func=cmd_match)

    c = sub.add_parser("calibrate", help="matched samples -> calibration model")
    c.add_argument("--matched", required=True)
    c.add_argument("--output", required=True)
    c.add_argument("--alpha-label", type=_alpha, default=0.01)
    c.add_argument("--alpha-box", type=_alpha, default=0.1)
    c.add_argument("--box-method", choices=[b.value for b in BoxMethod], default="std")
    c.add_argument("--correction", choices=[x.value for x in Correction], default=None)
    c.add_argument("--label-method", choices=[x.value for x in LabelMethod], default="classthr")
    c.add_argument("--min-class-count", type=int, default=2)
    c.add_argument("--n-classes", type=int, default=None)
    c.add_argument("--lenient", action="store_true")
    c.set_defaults(func=cmd_calibrate)

    pr = sub.add_parser("predict", help="detections + model -> label sets and intervals")
    pr.add_argument("--detections", required=True)
    pr.add_argument("--model", required=True)
    pr.add_argument("--output", required=True)
    pr.add_argument("--label-method", choices=[x.value for x in LabelMethod], default=None)
    pr.add_argument("--truth", help="ground truth, required by the oracle label method")
    pr.add_argument("--class-map")
    pr.set_defaults(func=cmd_predict)

    e = sub.add_parser("evaluate", help="predictions + truth -> coverage report (CSV)")
    e.add_argument("--predictions", required=True)
    e.add_argument("--truth", required=True)
    e.add_argument("--class-map")
    e.add_argument("--output", help="CSV path (default: stdout)")
    e.add_argument("--json", help="also write the report as JSON")
    e.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("simulate", help="run a synthetic coverage study")
    s.add_argument("--spec", required=True, help="JSON file with 'spec' and optional 'configs'")
    s.add_argument("--output", help="per-trial CSV")
    s.add_argument("--aggregate", help="per-cell mean and 1%%/99%% quantiles CSV")
    s.add_argument("--dump-data", help="directory for a calibration/test split as JSONL")
    s.add_argument("--trials", type=int, default=None)
    s.add_argument("--n-jobs", type=int, default=1)
    s.set_defaults(func=cmd_simulate)

    b = sub.add_parser("coverage-bounds", help="Beta law of split-conformal coverage")
    b.add_argument("--n", type=int, required=True)
    b.add_argument("--alpha", type=_alpha, required=True)
    b.add_argument("--lower", type=float, default=0.01)
    b.add_argument("--upper", type=float, default=0.99)
    b.set_defaults(func=cmd_coverage_bounds)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    saved = warnings.formatwarning
    warnings.formatwarning = _format_warning
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    finally:
        warnings.formatwarning = saved


if __name__ == "__main__":
    sys.exit(main())
