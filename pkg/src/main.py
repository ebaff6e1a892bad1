import argparse
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import pandas as pd

from dataset import align_cases, read_grades, read_measurements, read_ratings
from evaluation import agreement_table, binary_oa, confusion, summary_metrics
from exceptions import KneeGradingError, PhantomError
from fuse import ForestParams
from ingest import preprocess, read_study
from jsd import calibrate_thresholds, class_occupancy, save_thresholds
from phantom import PhantomSpec, generate, merge_fixtures, random_specs, write_study
from pipeline import GradingConfig, KneeGradingPipeline, StudyReport, failure_record
from training import train_fusion
from utilities import __version__, canonical_json, load_config, read_json, setup_logging, write_atomic
from visualize import plot_agreement, plot_confusion, render_overlay, save_overlay

logger = logging.getLogger(__name__)


def study_paths(path):
    """ The study files under `path` (a single file, or every non-sidecar file of a directory). """

    path = Path(path)
    if path.is_dir():
        return sorted(p for p in path.iterdir()
                      if p.is_file() and p.suffix.lower() != ".json" and not p.name.startswith("."))
    return [path]


def grade_study(pipeline, path, out_dir, overlay=True):
    """ Grades one study file and writes `<source_id>.report.json` (and the overlay PNG). """

    try:
        img = preprocess(read_study(path))
    except KneeGradingError as err:
        logger.warning("Cannot ingest %s: %s", path, err)
        report = StudyReport(Path(path).stem, "unknown", (), pipeline.backend_names, pipeline.config_digest,
                             errors=(failure_record(err),))
    else:
        report = pipeline.grade(img)
        if overlay:
            canvas, _ = render_overlay(img, report)
            save_overlay(Path(out_dir) / f"{report.source_id}.overlay.png", canvas)
    write_atomic(Path(out_dir) / f"{report.source_id}.report.json", report.to_json())
    return report


def cmd_grade(args):
    config = GradingConfig.from_sources(
        load_config(args.config),
        backend_detections=args.backend_detections, backend_masks=args.backend_masks,
        backend_probs=args.backend_probs, model=args.model, thresholds=args.thresholds,
        sharpen_ratio=args.sharpen_ratio,
    )
    pipeline = KneeGradingPipeline.from_config(config)
    paths = study_paths(args.input)
    try:
        if args.workers > 1:
            with ThreadPoolExecutor(max_workers=args.workers) as pool:
                reports = list(pool.map(lambda p: grade_study(pipeline, p, args.out, not args.no_overlay), paths))
        else:
            reports = [grade_study(pipeline, p, args.out, not args.no_overlay) for p in paths]
    finally:
        pipeline.close()

    for report in reports:
        for knee in report.knees:
            if knee.graded:
                print(f"{report.source_id} {knee.knee_side}: KL {knee.assessment.kl_grade} "
                      f"(JSN med {knee.jsn.med} lat {knee.jsn.lat}, "
                      f"D_avg med {knee.measurement.med_mm:.2f} mm lat {knee.measurement.lat_mm:.2f} mm)")
            else:
                print(f"{report.source_id} {knee.knee_side}: failed at stage {knee.failure['stage']}")
        for error in report.errors:
            print(f"{report.source_id}: failed at stage {error['stage']}")
    return 1 if any(r.all_failed for r in reports) else 0


def cmd_evaluate(args):
    predictions = read_grades(args.predictions)
    labels = read_grades(args.labels)
    cases, preds, truth = align_cases(predictions, labels)

    cm = confusion(preds, truth)
    metrics = summary_metrics(cm)
    binary = binary_oa(cm)
    if args.ratings:
        ratings = read_ratings(args.ratings)
        ratings["algorithm"] = dict(zip(cases, preds))
    else:
        ratings = {"algorithm": dict(zip(cases, preds)), "reference": dict(zip(cases, truth))}
    table = agreement_table(ratings, workers=args.workers)

    out = Path(args.out)
    document = {"n_cases": len(cases), "confusion": cm.to_document(), "metrics": metrics,
                "binary": binary, "agreement": table.to_document(), "software_version": __version__}
    write_atomic(out / "metrics.json", canonical_json(document))
    plot_confusion(cm, out / "confusion.png")
    plot_agreement(table, out / "agreement.png")

    print(f"accuracy: {metrics['accuracy']:.4f}  balanced accuracy: {metrics['balanced_accuracy']:.4f}  "
          f"weighted F1: {metrics['weighted_f1']:.4f}")
    print(pd.DataFrame(metrics["per_class"]).to_string(index=False))
    print(f"binary (KL>=2) accuracy: {binary['accuracy']:.4f}  precision: {binary['precision']:.4f}  "
          f"F1: {binary['f1']:.4f}")
    print(pd.DataFrame(table.kappa, index=table.rater_ids, columns=table.rater_ids).round(4).to_string())
    return 0


def cmd_calibrate(args):
    distances = read_measurements(args.input)
    thresholds = calibrate_thresholds(distances)
    save_thresholds(thresholds, args.out)
    rows = []
    for side, column, boundaries in (("med", 0, thresholds.med_boundaries), ("lat", 1, thresholds.lat_boundaries)):
        rows.append({"side": side, "boundaries": ", ".join(f"{b:g}" for b in boundaries),
                     **{f"JSN {g}": n for g, n in enumerate(class_occupancy(distances[:, column], boundaries))}})
    print(pd.DataFrame(rows).to_string(index=False))
    return 0


def cmd_train_fusion(args):
    train_fusion(args)
    return 0


def _phantom_specs(args):
    if args.spec:
        document = read_json(args.spec, PhantomError)
        entries = document.get("specs") if isinstance(document, dict) else document
        if not isinstance(entries, list):
            raise PhantomError("phantom spec document must be a list or hold a 'specs' list")
        return [PhantomSpec.from_document(entry) for entry in entries]
    return random_specs(args.seed, args.count)


def cmd_phantom(args):
    specs = _phantom_specs(args)
    out = Path(args.out)
    truths = []
    for spec in specs:
        image, truth = generate(spec)
        write_study(image, out)
        truths.append(truth)
    masks, detections = merge_fixtures(truths)
    write_atomic(out / "masks.json", canonical_json(masks))
    write_atomic(out / "detections.json", canonical_json(detections))
    write_atomic(out / "truth.json", canonical_json({
        "specs": [s.to_document() for s in specs],
        "truth": [t.to_document() for t in truths],
    }))
    print(f"wrote {len(specs)} phantom studies and backend fixtures to {out}")
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="knee-kl",
        description="Knee osteoarthritis KL grading from radiographs",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="Debug logging")
    parser.add_argument("--version", action="version", version=__version__)
    commands = parser.add_subparsers(dest="command", required=True)

    def command(name, func, help_text):
        sub = commands.add_parser(name, help=help_text, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sub.set_defaults(func=func)
        return sub

    grade = command("grade", cmd_grade, "Grade a study (or every study in a directory)")
    grade.add_argument("--input", required=True, help="Study file or directory of studies")
    grade.add_argument("--backend-detections", default=None,
                       help="Detection document, or 'heuristic' (config default: heuristic)")
    grade.add_argument("--backend-masks", default=None, help="Segmenter backend: file:, process: or torch:")
    grade.add_argument("--backend-probs", default=None,
                       help="Classifier backend: stub:, file:, process: or torch: (config default: stub:uniform)")
    grade.add_argument("--model", default=None, help="Fusion model document")
    grade.add_argument("--thresholds", default=None, help="JSN threshold document (published values if omitted)")
    grade.add_argument("--sharpen-ratio", default=None, type=float, help="Laplacian sharpening ratio (0.3)")
    grade.add_argument("--config", default=None, help="JSON config with flag defaults ($KNEE_KL_CONFIG)")
    grade.add_argument("--workers", default=1, type=int, help="Studies graded concurrently")
    grade.add_argument("--no-overlay", action="store_true", help="Skip the overlay renders")
    grade.add_argument("--out", required=True, help="Output directory for reports and overlays")

    evaluate = command("evaluate", cmd_evaluate, "Score predictions against labels")
    evaluate.add_argument("--predictions", required=True, help="CSV with case_id, kl")
    evaluate.add_argument("--labels", required=True, help="CSV with case_id, kl")
    evaluate.add_argument("--ratings", default=None, help="CSV with case_id and one column per rater")
    evaluate.add_argument("--workers", default=1, type=int, help="Rater pairs scored concurrently")
    evaluate.add_argument("--out", required=True, help="Output directory for the metrics report")

    calibrate = command("calibrate", cmd_calibrate, "Calibrate JSN thresholds from measured distances")
    calibrate.add_argument("--input", required=True, help="CSV with med_px, lat_px columns")
    calibrate.add_argument("--out", required=True, help="Threshold document to write")

    defaults = ForestParams()
    train = command("train-fusion", cmd_train_fusion, "Train the fusion random forest")
    train.add_argument("--input", required=True, help="CSV with p0..p4, med_px, lat_px, kl")
    train.add_argument("--out", required=True, help="Model document to write")
    train.add_argument("--seed", default=defaults.master_seed, type=int, help="Master seed")
    train.add_argument("--n-trees", default=defaults.n_trees, type=int, help="Number of trees")
    train.add_argument("--max-depth", default=defaults.max_depth, type=int, help="Maximum tree depth")
    train.add_argument("--min-leaf", default=defaults.min_leaf, type=int, help="Minimum samples per leaf")
    train.add_argument("--features-per-split", default=defaults.features_per_split, type=int,
                       help="Features sampled at each node")
    train.add_argument("--holdout", default=0.0, type=float,
                       help="Fraction held out to compare against the argmax and JSN-only baselines")
    train.add_argument("--workers", default=1, type=int, help="Trees grown concurrently")

    phantom = command("phantom", cmd_phantom, "Generate phantom studies and backend fixtures")
    phantom.add_argument("--spec", default=None, help="JSON list of phantom specs")
    phantom.add_argument("--count", default=3, type=int, help="Random specs to draw when no --spec is given")
    phantom.add_argument("--seed", default=0, type=int, help="Seed for random specs")
    phantom.add_argument("--out", required=True, help="Output directory")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    setup_logging(args.verbose)
    try:
        return args.func(args)
    except KneeGradingError as err:
        print(f"error ({err.stage}): {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
