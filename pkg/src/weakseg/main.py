"""
main.py

Command-line entry point:

    python -m weakseg.main phantom --n 12 --out data/
    python -m weakseg.main clinical-fit --data data/ --out out/
    python -m weakseg.main train --task liver --data data/ --out out/
    python -m weakseg.main train --task both --data data/ --clinical-model out/clinical_model.json --out out/
    python -m weakseg.main train --task tumor --data data/ --clinical-model out/clinical_model.json --out out/
    python -m weakseg.main segment --image data/phantom-0000_image.nii \\
        --liver-params out/liver.params --tumor-params out/tumor.params --out out/
    python -m weakseg.main evaluate --data data/ --liver-params ... --tumor-params ... --out out/
    python -m weakseg.main ablate --out out/
    python -m weakseg.main smoothing-experiment --out out/
    python -m weakseg.main report --liver out/seg_liver.nii --tumor out/seg_tumor.nii --out out/

Every command accepts --config (key = value file), --seed, --out (default:
the configured out_dir), --allow-extra (ignore unknown clinical columns) and
--verbose. Errors are printed as "error: <message>" with exit status 2.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .clinical import (
    compute_tlvr,
    load_model,
    regression_summary,
    save_model,
    tlvr_labels,
    write_coefficients_csv,
    write_selection_csv,
)
from .config import PipelineConfig, dump_config, load_config
from .errors import WeaksegError
from .metrics import stratified_table, write_cohort_csv
from .phantom import PhantomSpec, generate_cohort, read_cohort, write_cohort
from .pipeline import (
    fit_clinical,
    run_ablation,
    run_smoothing_experiment,
    run_two_step,
    train_liver,
    train_tumor,
    train_two_step,
    weak_labels,
)
from .preprocess import standardize_orientation
from .report import emit_report, write_report
from .segmenter import load_params, save_params, write_curves_csv
from .visualization import ensure_folder, plot_overlay, plot_selection_curve, plot_training_curves
from .volio import read_clinical_csv, read_mask, read_nifti, write_mask

logger = logging.getLogger(__name__)


def _config(args):
    base = PipelineConfig.desk_scale()
    cfg = load_config(args.config, base) if args.config else base
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    return cfg


def _spec(args):
    spec = PhantomSpec.low_contrast() if args.contrast == "low" else PhantomSpec.high_contrast()
    return spec.replace(noise_sigma=args.clinical_noise) if args.clinical_noise is not None else spec


def _split(cases, val_fraction=0.25):
    n_val = max(1, int(round(len(cases) * val_fraction))) if len(cases) > 1 else 0
    return cases[:len(cases) - n_val], cases[len(cases) - n_val:]


# ______________________________________________________________________________
# Commands


def cmd_phantom(args, cfg, out):
    cases = generate_cohort(_spec(args), args.n, cfg.seed)
    write_cohort(cases, out)
    dump_config(cfg, out / "config.txt")
    print(f"wrote {len(cases)} phantoms to {out}")


def cmd_clinical_fit(args, cfg, out):
    cases = read_cohort(args.data, args.allow_extra)
    model, report = fit_clinical(cases, cfg)
    save_model(model, out / "clinical_model.json")
    write_coefficients_csv(model, out / "clinical_coefficients.csv")
    labels = tlvr_labels([c.record for c in cases], [c.liver for c in cases],
                         [c.tumor for c in cases], model)
    summary = regression_summary([t.r_true for t in labels], [t.r_hat for t in labels])
    if report is not None:
        write_selection_csv(report, out / "clinical_selection.csv")
        plot_selection_curve(report, out / "clinical_selection.png")
        print(f"selected {report.best_n} features, cv pearson {report.best_pearson:.3f}"
              + ("" if report.informative else " (not informative)"))
    print(f"fit on {len(cases)} records: mse {summary['mse']:.3g}, mae {summary['mae']:.3g}, "
          f"pearson {summary['pearson']:.3f}")


def cmd_train(args, cfg, out):
    train_cases, val_cases = _split(read_cohort(args.data, args.allow_extra))
    clinical_model = load_model(args.clinical_model) if args.clinical_model else None
    if args.task == "both":
        model, liver_curves, tumor_curves = train_two_step(train_cases, val_cases, cfg, clinical_model)
        trained = {"liver": (model.liver, liver_curves), "tumor": (model.tumor, tumor_curves)}
    elif args.task == "liver":
        trained = {"liver": train_liver(train_cases, val_cases, cfg)}
    else:
        r_hats = weak_labels(train_cases, clinical_model) if clinical_model is not None else None
        trained = {"tumor": train_tumor(train_cases, val_cases, cfg, r_hats)}
    for task, (params, curves) in trained.items():
        save_params(params, out / f"{task}.params")
        write_curves_csv(curves, out / f"{task}_curves.csv")
        print(f"trained {task} model: best val dice {max(curves.val_dice):.4f}")


def cmd_segment(args, cfg, out):
    volume = read_nifti(args.image)
    result = run_two_step(volume, load_params(args.liver_params), load_params(args.tumor_params),
                          cfg, contour=not args.no_contour)
    write_mask(result.liver, out / "seg_liver.nii")
    write_mask(result.tumor, out / "seg_tumor.nii")
    plot_overlay(standardize_orientation(volume), result.liver, result.tumor, out / "seg_overlay.png")
    print(f"liver voxels {result.liver.count()}, tumor voxels {result.tumor.count()}")


def cmd_evaluate(args, cfg, out):
    cases = read_cohort(args.data, args.allow_extra)
    liver, tumor = load_params(args.liver_params), load_params(args.tumor_params)
    results = []
    for case in cases:
        outcome = run_two_step(case.volume, liver, tumor, cfg, not args.no_contour,
                               (case.liver, case.tumor))
        results.append(("two_step", outcome.metrics))
    table = write_cohort_csv(results, out / "evaluation.csv")
    stratified_table([r for _, r in results], args.stratify).to_csv(
        out / "evaluation_stratified.csv", index=False)
    print(table.to_string(index=False))


def cmd_ablate(args, cfg, out):
    spec = _spec(args)
    train_cases = generate_cohort(spec, args.n_train, cfg.seed)
    test_cases = generate_cohort(spec, args.n_test, cfg.seed + 1000)
    clinical_cases = generate_cohort(spec, args.n_clinical, cfg.seed + 2000)
    model, _ = fit_clinical(clinical_cases, cfg)
    seeds = range(cfg.seed, cfg.seed + args.seeds)
    result = run_ablation(train_cases, test_cases, cfg, seeds, model, path=out / "ablation.csv")
    print(result.table.to_string(index=False))


def cmd_smoothing_experiment(args, cfg, out):
    spec = _spec(args)
    train_cases = generate_cohort(spec, args.n_train, cfg.seed)
    val_cases = generate_cohort(spec, args.n_val, cfg.seed + 1000)
    clinical_cases = generate_cohort(spec, args.n_clinical, cfg.seed + 2000)
    model, _ = fit_clinical(clinical_cases, cfg)
    seeds = tuple(range(cfg.seed, cfg.seed + args.seeds))
    experiment = run_smoothing_experiment(train_cases, val_cases, cfg, seeds, model, out_dir=out)
    first = seeds[0]
    plot_training_curves({
        "without smoothing": experiment.curves[(first, 0.0)],
        "with smoothing": experiment.curves[(first, 0.5)],
    }, out / "smoothing_curves.png")
    for key, value in experiment.summary.items():
        print(f"{key}: {value}")


def cmd_report(args, cfg, out):
    liver = read_mask(args.liver)
    tumor = read_mask(args.tumor)
    record = None
    if args.clinical:
        records = {r.patient_id: r for r in read_clinical_csv(args.clinical, args.allow_extra)}
        record = records.get(args.patient)
        if record is None:
            raise WeaksegError(f"patient {args.patient!r} not found in {args.clinical}")
    text, summary = emit_report(liver, tumor, record=record)
    write_report(text, summary, out)
    logger.info("observed tlvr %.4f", compute_tlvr(liver, tumor))
    print(text, end="")


COMMANDS = {
    "phantom": cmd_phantom,
    "clinical-fit": cmd_clinical_fit,
    "train": cmd_train,
    "segment": cmd_segment,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "smoothing-experiment": cmd_smoothing_experiment,
    "report": cmd_report,
}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value configuration file")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--out", help="output directory (default: the configured out_dir)")
    common.add_argument("--allow-extra", action="store_true",
                        help="ignore clinical CSV columns outside the feature schema")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    phantoms = argparse.ArgumentParser(add_help=False)
    phantoms.add_argument("--contrast", choices=("high", "low"), default="high")
    phantoms.add_argument("--clinical-noise", type=float, help="clinical model noise sigma")

    parser = argparse.ArgumentParser(
        prog="weakseg", description="Knowledge-informed liver and tumor segmentation")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", parents=[common, phantoms], help="generate a phantom cohort")
    p.add_argument("--n", type=int, default=12)

    p = sub.add_parser("clinical-fit", parents=[common], help="fit the clinical TLVR model")
    p.add_argument("--data", required=True)

    p = sub.add_parser("train", parents=[common], help="train the liver, tumor or both models")
    p.add_argument("--task", choices=("liver", "tumor", "both"), required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--clinical-model", help="clinical model JSON for weak labels")

    for name, help_text in (("segment", "two-step segmentation of one image"),
                            ("evaluate", "score a cohort")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("--liver-params", required=True)
        p.add_argument("--tumor-params", required=True)
        p.add_argument("--no-contour", action="store_true")
        if name == "segment":
            p.add_argument("--image", required=True)
        else:
            p.add_argument("--data", required=True)
            p.add_argument("--stratify", choices=("volume", "diameter"), default="volume")

    p = sub.add_parser("ablate", parents=[common, phantoms], help="ablation over variants")
    p.add_argument("--n-train", type=int, default=4)
    p.add_argument("--n-test", type=int, default=4)
    p.add_argument("--n-clinical", type=int, default=40)
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("smoothing-experiment", parents=[common, phantoms],
                       help="training curves with and without label smoothing")
    p.add_argument("--n-train", type=int, default=6)
    p.add_argument("--n-val", type=int, default=4)
    p.add_argument("--n-clinical", type=int, default=40)
    p.add_argument("--seeds", type=int, default=5)

    p = sub.add_parser("report", parents=[common], help="diagnostic summary of a segmentation")
    p.add_argument("--liver", required=True)
    p.add_argument("--tumor", required=True)
    p.add_argument("--clinical", help="clinical CSV")
    p.add_argument("--patient", help="patient_id within the clinical CSV")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        cfg = _config(args)
        out = ensure_folder(args.out or cfg.out_dir)
        COMMANDS[args.command](args, cfg, out)
    except WeaksegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
