"""End-to-end experiments: train, calibrate on ID validation, score negatives, write tables.

Seeds are derived from the single run seed ``s``:

    data s, split s+1, classifier s+2, verifier s+3, scoring s+4.., negatives s+10..
"""

from __future__ import annotations

import json
import logging
import math
import platform
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .. import __version__
from ..attacks import attack_dataset
from ..classifier import (
    Classifier,
    accuracy,
    conv_arch,
    load_classifier,
    mlp_arch,
    msp_score,
    predict,
    save_classifier,
    train_classifier,
)
from ..datasets import (
    Dataset,
    Origin,
    cluster_means,
    load_dataset,
    load_digits_dataset,
    make_noise_ood,
    make_shifted_ood,
    make_synthetic_id,
    split,
)
from ..metrics import ScorePools, aupr, auroc, pr_curve, roc_curve, tnr_at_tpr, write_metrics_table
from ..model import VerifierModel
from ..oracle import LinearGaussianModel, orthogonal_linear_gaussian, sample_oracle
from ..scoring import (
    DecisionThreshold,
    achieved_tpr,
    calibrate_threshold,
    iwae_scores,
    write_score_dump,
)
from ..trainer import TrainLog, load_checkpoint, save_checkpoint, train_dvn
from . import plotting
from .config import DataSpec, ExperimentConfig

log = logging.getLogger(__name__)


class StageError(RuntimeError):
    """A pipeline stage failed; ``stage`` names it and ``__cause__`` holds the original error."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass
class NegativeSet:
    name: str
    data: Dataset
    # labels handed to the verifier; None means "use the classifier's prediction"
    probe_labels: np.ndarray | None = None


@dataclass
class DetectionReport:
    rows: list
    threshold: DecisionThreshold
    achieved_tpr: float
    manifest: dict
    id_scores: np.ndarray = None
    neg_scores: dict = field(default_factory=dict)
    id_test: Dataset = None
    negatives: dict = field(default_factory=dict)
    classifier: Classifier = None
    verifier: VerifierModel = None
    train_log: TrainLog = None

    def row(self, neg_set: str) -> dict:
        for r in self.rows:
            if r["neg_set"] == neg_set:
                return r
        raise KeyError(neg_set)


# -- data ---------------------------------------------------------------------------

def oracle_model(spec: DataSpec, seed: int) -> LinearGaussianModel:
    """Orthogonal-loading linear-Gaussian model with class offsets on a polygon."""
    base = orthogonal_linear_gaussian(spec.num_classes, spec.dim, spec.latent_dim, seed,
                                      loading_scale=spec.loading_scale)
    return LinearGaussianModel(base.loadings, cluster_means(spec.num_classes, spec.dim, spec.separation), 1.0)


def build_id_dataset(spec: DataSpec, seed: int) -> Dataset:
    if spec.kind == "synthetic":
        return make_synthetic_id(spec.num_classes, spec.dim, spec.n, spec.separation, seed, spec.std)
    if spec.kind == "digits":
        return load_digits_dataset()
    if spec.kind == "oracle":
        return sample_oracle(oracle_model(spec, seed), None, spec.n, seed)
    if spec.kind == "file":
        return load_dataset(spec.path).with_origin(Origin.IN_DISTRIBUTION)
    raise ValueError(f"unknown ID dataset kind {spec.kind!r}")


def prepare_splits(cfg: ExperimentConfig) -> tuple[Dataset, Dataset, Dataset]:
    """(train, validation, test) for the configured ID dataset and run seed."""
    data = build_id_dataset(cfg.id_dataset, cfg.seed)
    train, val, test = split(data, cfg.id_dataset.split, cfg.seed + 1)
    return train, val, test


def wrong_labels(y: np.ndarray, num_classes: int, seed: int) -> np.ndarray:
    """A uniformly random label different from each entry of ``y``."""
    shift = np.random.default_rng(seed).integers(1, num_classes, size=len(y))
    return (y + shift) % num_classes


def build_negative(spec: DataSpec, id_spec: DataSpec, id_test: Dataset, seed: int) -> NegativeSet:
    c, d = id_test.num_classes, id_test.dim
    if spec.kind in ("uniform", "gaussian"):
        return NegativeSet(spec.name, make_noise_ood(spec.kind, spec.n, d, seed, num_classes=c))
    if spec.kind == "shifted":
        return NegativeSet(spec.name, make_shifted_ood(c, d, spec.n, id_spec.separation, seed, id_spec.std))
    if spec.kind == "file":
        data = load_dataset(spec.path).with_origin(Origin.OOD)
        if data.dim != d:
            raise ValueError(f"negative set {spec.name!r} has dimension {data.dim}, expected {d}")
        return NegativeSet(spec.name, data)
    if spec.kind == "wrong_label":
        probe = wrong_labels(id_test.y, c, seed)
        return NegativeSet(spec.name, id_test.with_origin(Origin.OOD), probe_labels=probe)
    raise ValueError(f"unknown negative kind {spec.kind!r}")


# -- pipeline -----------------------------------------------------------------------

def _versions() -> dict:
    import scipy
    import sklearn
    import torch

    return {"dvn": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__, "torch": torch.__version__, "sklearn": sklearn.__version__}


class _Run:
    def __init__(self, cfg: ExperimentConfig, out: Path):
        self.cfg = cfg
        self.out = out
        self.timings: dict = {}
        self.artifacts: list = []
        self.stage = None

    @contextmanager
    def step(self, name: str):
        self.stage = name
        t0 = time.perf_counter()
        try:
            yield
        except Exception as exc:
            self.timings[name] = time.perf_counter() - t0
            self.fail(name, exc)
            raise StageError(name, exc) from exc
        self.timings[name] = time.perf_counter() - t0

    def manifest(self, **extra) -> dict:
        cfg = self.cfg
        return {
            "config_hash": cfg.config_hash,
            "seed": cfg.seed,
            "ablation": vars(cfg.ablation),
            "versions": _versions(),
            "wall_clock_seconds": self.timings,
            "artifacts": sorted(self.artifacts),
            **extra,
        }

    def write_manifest(self, **extra) -> dict:
        man = self.manifest(**extra)
        (self.out / "manifest.json").write_text(json.dumps(man, indent=2, sort_keys=True, default=str) + "\n")
        return man

    def fail(self, stage: str, exc: BaseException) -> None:
        try:
            self.write_manifest(status="failed", failed_stage=stage, error=f"{type(exc).__name__}: {exc}")
        except OSError:
            log.exception("could not write failure manifest")

    def path(self, name: str) -> Path:
        self.artifacts.append(name)
        return self.out / name


def _classifier_arch(cfg: ExperimentConfig, data: Dataset) -> dict:
    spec = cfg.classifier
    if spec.arch == "mlp":
        return mlp_arch(data.dim, data.num_classes, spec.hidden)
    if spec.arch == "conv":
        side = math.isqrt(data.dim)
        if side * side != data.dim:
            raise ValueError(f"conv classifier needs square images, got dimension {data.dim}")
        return conv_arch(side, data.num_classes, spec.channels, spec.conv_hidden)
    raise ValueError(f"unknown classifier arch {spec.arch!r}")


def train_configured_classifier(cfg: ExperimentConfig, train: Dataset) -> Classifier:
    return train_classifier(train, _classifier_arch(cfg, train), cfg.classifier.train, seed=cfg.seed + 2)


def run_experiment(cfg: ExperimentConfig, classifier: Classifier | None = None,
                   verifier: VerifierModel | None = None, write: bool = True) -> DetectionReport:
    """Run the full pipeline and (optionally) write its artifacts to ``cfg.output_dir``.

    A pre-trained ``classifier``/``verifier`` may be passed in to skip training;
    ablation suites use this to share models between variants. On failure a
    manifest naming the failed stage is written and :class:`StageError` raised.
    """
    out = Path(cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    run = _Run(cfg, out)
    s = cfg.seed

    with run.step("data"):
        id_train, id_val, id_test = prepare_splits(cfg)

    with run.step("classifier"):
        if classifier is None:
            ckpt = cfg.classifier.checkpoint
            if ckpt and Path(ckpt).exists():
                classifier = load_classifier(ckpt)
            else:
                classifier = train_configured_classifier(cfg, id_train)
        hash_before = classifier.parameter_hash()
        acc_before = accuracy(classifier, id_test)

    train_log = TrainLog()
    vcfg = cfg.effective_verifier()
    with run.step("verifier"):
        if verifier is None:
            if cfg.verifier_checkpoint and Path(cfg.verifier_checkpoint).exists():
                verifier = load_checkpoint(cfg.verifier_checkpoint)
            else:
                verifier, train_log = train_dvn(id_train, vcfg)

    def score(x, y, seed):
        return iwae_scores(verifier, x, y, k=cfg.k, seed=seed, prior=cfg.scoring_prior, chunk=cfg.score_chunk)

    with run.step("calibration"):
        # calibration must only ever see in-distribution data
        assert id_val.origin == Origin.IN_DISTRIBUTION
        val_pred, _ = predict(classifier, id_val.x)
        val_scores = score(id_val.x, val_pred, s + 4)
        threshold = calibrate_threshold(val_scores, cfg.target_tpr, origin=id_val.origin)

    with run.step("negatives"):
        negatives = {}
        for i, spec in enumerate(cfg.ood):
            negatives[spec.name] = build_negative(spec, cfg.id_dataset, id_test, s + 10 + i)
        for j, spec in enumerate(cfg.attacks):
            adv, _ = attack_dataset(classifier, id_test, spec.method, spec.config, cfg.successful_only)
            negatives[spec.name] = NegativeSet(spec.name, adv)

    with run.step("scoring"):
        test_pred, _ = predict(classifier, id_test.x)
        id_scores = score(id_test.x, test_pred, s + 5)
        neg_scores, neg_preds = {}, {}
        for i, (name, neg) in enumerate(negatives.items()):
            labels = neg.probe_labels
            if labels is None:
                labels, _ = predict(classifier, neg.data.x)
            neg_preds[name] = labels
            neg_scores[name] = score(neg.data.x, labels, s + 6 + 100 * (i + 1))

    with run.step("metrics"):
        id_name = cfg.id_dataset.kind
        rows = []
        for name, sc in neg_scores.items():
            row = {"id_set": id_name, "neg_set": name, "n_pos": len(id_scores), "n_neg": len(sc)}
            row.update(ScorePools(id_scores, sc).metrics(cfg.target_tpr))
            rows.append(row)
        tpr = achieved_tpr(id_scores, threshold)
        hash_after = classifier.parameter_hash()
        acc_after = accuracy(classifier, id_test)

    extra = {
        "status": "ok",
        "delta": threshold.delta,
        "target_tpr": cfg.target_tpr,
        "achieved_tpr": tpr,
        "calibration_size": threshold.calibration_size,
        "classifier_hash_before": hash_before,
        "classifier_hash_after": hash_after,
        "classifier_test_acc_before": acc_before,
        "classifier_test_acc_after": acc_after,
    }
    report = DetectionReport(rows, threshold, tpr, {}, id_scores, neg_scores, id_test,
                             negatives, classifier, verifier, train_log)
    if not write:
        report.manifest = run.manifest(**extra)
        return report

    with run.step("write"):
        write_metrics_table(run.path("metrics.csv"), rows)
        write_score_dump(run.path("scores_id_val.csv"), val_scores, val_pred, threshold)
        write_score_dump(run.path("scores_id_test.csv"), id_scores, test_pred, threshold)
        for name, sc in neg_scores.items():
            write_score_dump(run.path(f"scores_{name}.csv"), sc, neg_preds[name], threshold)
        run.path("threshold.json").write_text(json.dumps(
            {"delta": threshold.delta, "target_tpr": threshold.target_tpr,
             "calibration_size": threshold.calibration_size}, indent=2) + "\n")
        save_classifier(classifier, run.path("classifier.ckpt"))
        save_checkpoint(verifier, run.path("verifier.ckpt"), vcfg)
        if len(train_log):
            train_log.to_csv(run.path("train_log.csv"))
            plotting.plot_training_curves(run.path("train_log.svg"), train_log.rows)
        run.path("manifest.json")
    report.manifest = run.write_manifest(**extra)
    return report


# -- sweeps and baselines ------------------------------------------------------------

def default_delta_grid(id_scores, neg_scores: dict, num: int = 101) -> np.ndarray:
    pooled = np.concatenate([np.asarray(id_scores)] + [np.asarray(v) for v in neg_scores.values()])
    pooled = pooled[np.isfinite(pooled)]
    if pooled.size == 0:
        raise ValueError("no finite scores to build a grid from")
    lo, hi = float(pooled.min()), float(pooled.max())
    pad = 0.05 * (hi - lo) + 1e-6
    return np.linspace(lo - pad, hi + pad, num)


def threshold_sweep(id_scores, neg_scores: dict, delta_grid, out_dir=None, stem: str = "sweep") -> list[dict]:
    """TPR on ID and FPR on each negative set for every delta; optionally writes CSV and SVG."""
    grid = np.asarray(list(delta_grid), dtype=np.float64)
    if grid.size == 0:
        raise ValueError("delta grid is empty")
    id_scores = np.asarray(id_scores, dtype=np.float64)
    rows = []
    for delta in grid:
        row = {"delta": float(delta), "tpr_id": float(np.mean(id_scores >= delta))}
        for name, sc in neg_scores.items():
            row[f"fpr_{name}"] = float(np.mean(np.asarray(sc) >= delta))
        rows.append(row)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = list(rows[0])
        lines = [",".join(cols)] + [",".join(repr(r[c]) for c in cols) for r in rows]
        (out / f"{stem}.csv").write_text("\n".join(lines) + "\n")
        finite = np.isfinite(grid)
        plotting.plot_threshold_sweep(
            out / f"{stem}.svg", grid[finite], np.array([r["tpr_id"] for r in rows])[finite],
            {n: np.array([r[f"fpr_{n}"] for r in rows])[finite] for n in neg_scores},
        )
    return rows


def compare_baseline_msp(report: DetectionReport, neg_set: str, out_dir=None,
                         target_tpr: float = 0.95) -> list[dict]:
    """MSP and verifier scores on the same ID-test and negative pools; two rows, one per detector."""
    neg = report.negatives[neg_set]
    dvn_pos, dvn_neg = report.id_scores, report.neg_scores[neg_set]
    msp_pos = msp_score(report.classifier, report.id_test.x)
    msp_neg = msp_score(report.classifier, neg.data.x)
    assert len(msp_pos) == len(dvn_pos) and len(msp_neg) == len(dvn_neg), "detectors must share pools"
    rows, curves = [], {}
    for name, pos, negs in (("msp", msp_pos, msp_neg), ("dvn", dvn_pos, dvn_neg)):
        rows.append({"detector": name, "neg_set": neg_set, "n_pos": len(pos), "n_neg": len(negs),
                     "auroc": auroc(pos, negs), "aupr_in": aupr(pos, negs, "id"),
                     "tnr95": tnr_at_tpr(pos, negs, target_tpr)})
        fpr, tpr = roc_curve(pos, negs)
        rec, prec = pr_curve(pos, negs)
        curves[name.upper()] = {"fpr": fpr, "tpr": tpr, "recall": rec, "precision": prec}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        cols = list(rows[0])
        lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                    for r in rows]
        (out / f"msp_vs_dvn_{neg_set}.csv").write_text("\n".join(lines) + "\n")
        plotting.plot_detector_overlay(out / f"msp_vs_dvn_{neg_set}.svg", curves)
    return rows


ABLATIONS = (
    ("full", {}),
    ("no_mi", {"disable_mi": True}),
    ("no_prior_correction", {"disable_prior_correction": True}),
    ("encoder_x_and_y", {"encoder_cond_y": True}),
)


def run_ablation_suite(cfg: ExperimentConfig, out_dir=None, reports: dict | None = None) -> list[dict]:
    """Baseline plus one run per ablation flag, sharing data, seeds and the classifier.

    The prior-correction ablation only changes scoring, so it reuses the
    baseline verifier. Returns one row per (variant, negative set); if ``reports``
    is given it is filled with the full report of each variant.
    """
    out = Path(out_dir or cfg.output_dir)
    rows, base = [], None
    for name, flags in ABLATIONS:
        variant = cfg.with_ablation(**flags)
        variant.output_dir = str(out / name)
        reuse = base.verifier if (base is not None and flags == {"disable_prior_correction": True}) else None
        rep = run_experiment(variant, classifier=base.classifier if base else None, verifier=reuse)
        if base is None:
            base = rep
        if reports is not None:
            reports[name] = rep
        for r in rep.rows:
            rows.append({"variant": name, **r})
    out.mkdir(parents=True, exist_ok=True)
    cols = ["variant", "id_set", "neg_set", "n_pos", "n_neg", "tnr95", "auroc", "ver_acc", "aupr_in"]
    lines = [",".join(cols)] + [",".join(repr(r[c]) if isinstance(r[c], float) else str(r[c]) for c in cols)
                                for r in rows]
    (out / "ablations.csv").write_text("\n".join(lines) + "\n")
    return rows
