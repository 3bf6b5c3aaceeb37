"""Command-line entry point: ``dvn <verb> [--config FILE] [--seed N] [--out PATH]``.

Exit codes: 0 success, 2 configuration or input error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from ..attacks import AttackConfig, attack_dataset
from ..checkpoint import CheckpointFormatError
from ..classifier import accuracy, load_classifier, predict, save_classifier
from ..datasets import Origin, load_dataset, save_dataset
from ..errors import NumericError, TrainingError
from ..scoring import DecisionThreshold, calibrate_threshold, iwae_scores, read_score_dump, write_score_dump
from ..trainer import load_checkpoint, save_checkpoint, train_dvn
from . import plotting
from .config import ConfigError, ExperimentConfig, load_config
from .experiments import (
    StageError,
    compare_baseline_msp,
    default_delta_grid,
    prepare_splits,
    run_ablation_suite,
    run_experiment,
    threshold_sweep,
    train_configured_classifier,
)

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3

log = logging.getLogger("dvn")


def _config(args) -> ExperimentConfig:
    if args.config is None:
        raise ConfigError(f"{args.verb} needs --config")
    return load_config(args.config, seed=args.seed, output_dir=args.out)


def _out_dir(args, cfg: ExperimentConfig | None = None) -> Path:
    out = Path(args.out or (cfg.output_dir if cfg else "."))
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_train_classifier(args) -> None:
    cfg = _config(args)
    train, _, test = prepare_splits(cfg)
    clf = train_configured_classifier(cfg, train)
    out = _out_dir(args, cfg)
    save_classifier(clf, out / "classifier.ckpt")
    np.savetxt(out / "classifier_loss.csv", np.asarray(clf.loss_history), header="loss", comments="")
    print(f"classifier test accuracy {accuracy(clf, test):.4f} -> {out / 'classifier.ckpt'}")


def cmd_train_dvn(args) -> None:
    cfg = _config(args)
    train, _, _ = prepare_splits(cfg)
    vcfg = cfg.effective_verifier()
    model, train_log = train_dvn(train, vcfg)
    out = _out_dir(args, cfg)
    save_checkpoint(model, out / "verifier.ckpt", vcfg)
    if len(train_log):
        train_log.to_csv(out / "train_log.csv")
        plotting.plot_training_curves(out / "train_log.svg", train_log.rows)
    print(f"verifier -> {out / 'verifier.ckpt'}")


def cmd_score(args) -> None:
    model = load_checkpoint(args.verifier)
    data = load_dataset(args.data)
    if args.labels == "given":
        labels = data.y
    else:
        if args.classifier is None:
            raise ConfigError("--labels predicted needs --classifier")
        labels, _ = predict(load_classifier(args.classifier), data.x)
    seed = 0 if args.seed is None else args.seed
    scores = iwae_scores(model, data.x, labels, k=args.k, seed=seed, prior=args.prior)
    threshold = None
    if args.threshold:
        t = json.loads(Path(args.threshold).read_text())
        threshold = DecisionThreshold(float(t["delta"]), t.get("target_tpr", 0.95), t.get("calibration_size", 0))
    out = Path(args.out or "scores.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    write_score_dump(out, scores, labels, threshold)
    print(f"{len(scores)} scores -> {out}")


def cmd_calibrate(args) -> None:
    _, _, scores = read_score_dump(args.scores)
    t = calibrate_threshold(scores, args.target_tpr, origin=Origin.IN_DISTRIBUTION)
    out = Path(args.out or "threshold.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(json.dumps({"delta": t.delta, "target_tpr": t.target_tpr,
                               "calibration_size": t.calibration_size}, indent=2) + "\n")
    print(f"delta = {t.delta!r} -> {out}")


def cmd_attack(args) -> None:
    clf = load_classifier(args.classifier)
    data = load_dataset(args.data)
    cfg = AttackConfig(args.epsilon, args.alpha, args.steps, args.clip_min, args.clip_max)
    adv, success = attack_dataset(clf, data, args.method, cfg, successful_only=not args.keep_failed)
    out = Path(args.out or f"{args.method}.txt")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(adv, out)
    print(f"{args.method}: success rate {success.mean():.4f}, wrote {len(adv)} samples -> {out}")


def _print_rows(rows) -> None:
    for r in rows:
        print(f"{r['neg_set']:>16}  n={r['n_neg']:<5d} tnr95={r['tnr95']:.4f} auroc={r['auroc']:.4f} "
              f"ver_acc={r['ver_acc']:.4f} aupr_in={r['aupr_in']:.4f}")


def cmd_evaluate(args) -> None:
    cfg = _config(args)
    report = run_experiment(cfg)
    print(f"delta = {report.threshold.delta:.4f}, achieved ID-test TPR = {report.achieved_tpr:.4f}")
    _print_rows(report.rows)


def cmd_sweep(args) -> None:
    run_dir = Path(args.run)
    _, _, id_scores = read_score_dump(run_dir / "scores_id_test.csv")
    neg = {}
    for path in sorted(run_dir.glob("scores_*.csv")):
        name = path.stem[len("scores_"):]
        if name not in ("id_test", "id_val"):
            neg[name] = read_score_dump(path)[2]
    if not neg:
        raise ConfigError(f"no negative score dumps in {run_dir}")
    grid = default_delta_grid(id_scores, neg, args.num)
    out = Path(args.out or run_dir)
    threshold_sweep(id_scores, neg, grid, out)
    print(f"sweep over {len(grid)} thresholds -> {out / 'sweep.csv'}")


def cmd_report(args) -> None:
    cfg = _config(args)
    out = _out_dir(args, cfg)
    report = run_experiment(cfg)
    _print_rows(report.rows)
    grid = default_delta_grid(report.id_scores, report.neg_scores, args.num)
    threshold_sweep(report.id_scores, report.neg_scores, grid, out)
    for name in report.neg_scores:
        for r in compare_baseline_msp(report, name, out, cfg.target_tpr):
            print(f"{name:>16}  {r['detector']:>4} auroc={r['auroc']:.4f} aupr_in={r['aupr_in']:.4f}")
    if args.ablations:
        rows = run_ablation_suite(cfg, out / "ablations")
        for r in rows:
            print(f"{r['variant']:>20} {r['neg_set']:>16} auroc={r['auroc']:.4f}")
    print(f"report -> {out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dvn", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, fn, help_):
        sp = sub.add_parser(name, help=help_)
        sp.add_argument("--config", help="experiment config (INI-style key = value with sections)")
        sp.add_argument("--seed", type=int, help="overrides the config seed")
        sp.add_argument("--out", help="output file or directory")
        sp.set_defaults(fn=fn)
        return sp

    verb("train-classifier", cmd_train_classifier, "train the classifier to be verified")
    verb("train-dvn", cmd_train_dvn, "train the verifier on ID training data")

    sp = verb("score", cmd_score, "importance-weighted scores for a dataset file")
    sp.add_argument("--verifier", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--classifier")
    sp.add_argument("--labels", choices=("predicted", "given"), default="predicted")
    sp.add_argument("--k", type=int, default=100)
    sp.add_argument("--prior", choices=("corrected", "standard"), default="corrected")
    sp.add_argument("--threshold", help="threshold JSON; fills the decision column")

    sp = verb("calibrate", cmd_calibrate, "threshold from ID validation scores")
    sp.add_argument("--scores", required=True)
    sp.add_argument("--target-tpr", type=float, default=0.95)

    sp = verb("attack", cmd_attack, "FGSM or BIM adversarials against a classifier")
    sp.add_argument("--classifier", required=True)
    sp.add_argument("--data", required=True)
    sp.add_argument("--method", choices=("fgsm", "bim"), default="fgsm")
    sp.add_argument("--epsilon", type=float, default=0.1)
    sp.add_argument("--alpha", type=float, default=0.025)
    sp.add_argument("--steps", type=int, default=10)
    sp.add_argument("--clip-min", type=float, default=0.0)
    sp.add_argument("--clip-max", type=float, default=1.0)
    sp.add_argument("--keep-failed", action="store_true", help="keep unsuccessful perturbations too")

    verb("evaluate", cmd_evaluate, "full run: train, calibrate, score, metrics")

    sp = verb("sweep", cmd_sweep, "TPR/FPR over a threshold grid from an evaluate run")
    sp.add_argument("--run", required=True, help="output directory of an evaluate run")
    sp.add_argument("--num", type=int, default=101)

    sp = verb("report", cmd_report, "evaluate plus sweep, MSP comparison and figures")
    sp.add_argument("--num", type=int, default=101)
    sp.add_argument("--ablations", action="store_true", help="also run the ablation suite")
    return p


def _is_numeric(exc: BaseException) -> bool:
    while exc is not None:
        if isinstance(exc, (NumericError, TrainingError, FloatingPointError)):
            return True
        exc = exc.__cause__
    return False


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (StageError, NumericError, TrainingError, ValueError, OSError, CheckpointFormatError) as exc:
        if _is_numeric(exc):
            print(f"numeric failure: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        if isinstance(exc, StageError) and not isinstance(exc.__cause__, (ValueError, OSError)):
            raise
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
