"""Synthetic detector and repeated-split Monte Carlo coverage studies.

The synthetic detector knows its own ground truth: the class posterior is
available in closed form, box noise has a known law, and quantile heads are
built from the true conditional quantiles. Every conformal guarantee can
therefore be checked on data whose exchangeability holds by construction.
"""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np
from scipy import stats

from .box_intervals import Sidedness, centered_bounds, fuse_members
from .conformal import conformal_quantile_columns, coverage_distribution
from .geometry import strata_codes
from .label_sets import expected_calibration_error, temperature_scale
from .matching import match_arrays
from .multiple_testing import bonferroni_quantiles, max_rank_quantiles
from .pipeline import (
    DetectionBatch,
    GroundTruthBatch,
    MiscoverageConfig,
    calibrate_batch,
    predict_batch,
)
from .records import DetectionRecord, GroundTruthObject

# object counts per class of the six common COCO classes
# (person, bicycle, motorcycle, car, bus, truck)
COCO_CLASS_COUNTS = (10777, 314, 367, 1918, 283, 414)


def _rng(seed: int, *keys: int) -> np.random.Generator:
    return np.random.default_rng([int(seed), *keys])


def _per_class(value, k: int, name: str) -> np.ndarray:
    arr = np.asarray(value, dtype=float)
    if arr.ndim == 0:
        return np.full(k, float(arr))
    if arr.shape != (k,):
        raise ValueError(f"{name} needs one value or {k} per-class values")
    return arr


@dataclass
class SimulationSpec:
    """Synthetic detector and study settings.

    Box noise per coordinate is ``scale * eps`` with ``eps`` equicorrelated
    across the four coordinates (``coord_correlation``). With
    ``noise_relative`` the scale is ``noise_scale`` times the object's width
    (x coordinates) or height (y coordinates), otherwise it is in pixels.

    The classifier sees ``x = signal_y * e_y + N(0, I)`` for true class y, so
    its true posterior is known exactly; reported probabilities are that
    posterior sharpened or flattened by ``temperature``.
    """

    n_classes: int = 6
    class_weights: tuple = COCO_CLASS_COUNTS
    n_images: int = 6000
    objects_per_image: float = 2.0
    image_width: float = 1280.0
    image_height: float = 720.0
    min_side: float = 12.0
    max_side: float = 360.0
    noise_scale: object = 0.05
    noise_relative: bool = True
    noise_family: str = "gaussian"
    noise_df: float = 4.0
    coord_correlation: float = 0.5
    class_signal: object = 3.0
    temperature: float = 1.0
    ensemble_size: int = 5
    ensemble_jitter: float = 0.5
    quantile_alpha: float = 0.1
    quantile_quality: float = 0.0
    calibration_fraction: float = 0.5
    n_trials: int = 100
    seed: int = 0

    def __post_init__(self):
        self.class_weights = tuple(float(w) for w in np.ravel(self.class_weights))
        self.validate()

    def validate(self) -> None:
        k = self.n_classes
        problems = []
        if k < 1:
            problems.append("n_classes must be >= 1")
        if len(self.class_weights) != k or min(self.class_weights, default=0) <= 0:
            problems.append(f"class_weights needs {k} positive entries")
        if self.n_images < 1:
            problems.append("n_images must be >= 1")
        if not self.objects_per_image > 0:
            problems.append("objects_per_image must be positive")
        if not 0 < self.min_side <= self.max_side:
            problems.append("need 0 < min_side <= max_side")
        if self.max_side > min(self.image_width, self.image_height):
            problems.append("max_side must fit inside the image")
        if np.any(_per_class(self.noise_scale, max(k, 1), "noise_scale") < 0):
            problems.append("noise_scale must be non-negative")
        if not -1.0 / 3.0 <= self.coord_correlation <= 1.0:
            # equicorrelation over 4 coordinates is positive semi-definite only here
            problems.append("coord_correlation must be in [-1/3, 1] for four coordinates")
        if self.noise_family not in ("gaussian", "student_t"):
            problems.append("noise_family must be 'gaussian' or 'student_t'")
        if self.noise_family == "student_t" and not self.noise_df > 2:
            problems.append("noise_df must exceed 2")
        if np.any(_per_class(self.class_signal, max(k, 1), "class_signal") < 0):
            problems.append("class_signal must be non-negative")
        if not self.temperature > 0:
            problems.append("temperature must be positive")
        if self.ensemble_size < 1:
            problems.append("ensemble_size must be >= 1")
        if self.ensemble_jitter < 0:
            problems.append("ensemble_jitter must be non-negative")
        if not 0 < self.quantile_alpha < 1:
            problems.append("quantile_alpha must be in (0, 1)")
        if self.quantile_quality < 0:
            problems.append("quantile_quality must be non-negative")
        if not 0 < self.calibration_fraction < 1:
            problems.append("calibration_fraction must be in (0, 1)")
        if self.n_trials < 1:
            problems.append("n_trials must be >= 1")
        if problems:
            raise ValueError("invalid simulation spec: " + "; ".join(problems))

    @classmethod
    def from_dict(cls, d: dict) -> "SimulationSpec":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown simulation spec fields: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["class_weights"] = list(self.class_weights)
        for key in ("noise_scale", "class_signal"):
            v = d[key]
            d[key] = list(v) if isinstance(v, (tuple, list, np.ndarray)) else v
        return d


@dataclass
class SyntheticData:
    """Generated objects in column form, one row per ground-truth object.

    Detection ``i`` was produced from truth ``i``; ``matched`` lists the
    pairs that survive IoU matching.
    """

    image_index: np.ndarray
    truth_boxes: np.ndarray
    labels: np.ndarray
    detections: DetectionBatch
    true_posterior: np.ndarray
    noise_scale: np.ndarray
    matched_pred: np.ndarray
    matched_truth: np.ndarray
    spec: SimulationSpec

    def matched_batches(self, temperature: float = 1.0):
        X = self.detections.subset(self.matched_pred)
        if temperature != 1.0:
            X.probs = temperature_scale(X.probs, temperature)
        y = GroundTruthBatch(self.truth_boxes[self.matched_truth], self.labels[self.matched_truth])
        return X, y, self.image_index[self.matched_truth]


def _sample_boxes(rng, n, spec: SimulationSpec) -> np.ndarray:
    side = np.exp(rng.uniform(np.log(spec.min_side), np.log(spec.max_side), n))
    aspect = np.exp(rng.normal(0.0, 0.25, n))
    w = np.clip(side * np.sqrt(aspect), 1.0, spec.image_width)
    h = np.clip(side / np.sqrt(aspect), 1.0, spec.image_height)
    x0 = rng.uniform(0.0, spec.image_width - w)
    y0 = rng.uniform(0.0, spec.image_height - h)
    return np.stack([x0, y0, x0 + w, y0 + h], axis=1)


def _coordinate_noise(rng, shape, spec: SimulationSpec) -> np.ndarray:
    rho = spec.coord_correlation
    cov = (1.0 - rho) * np.eye(4) + rho * np.ones((4, 4))
    z = rng.multivariate_normal(np.zeros(4), cov, size=shape, method="eigh")
    if spec.noise_family == "student_t":
        df = spec.noise_df
        g = rng.chisquare(df, size=shape)[..., None] / df
        z = z / np.sqrt(g) * np.sqrt((df - 2.0) / df)
    return z


def true_class_posterior(features, signal, prior) -> np.ndarray:
    """Exact posterior of the class given ``x = signal_y e_y + N(0, I)``."""
    signal = np.asarray(signal, dtype=float)
    logit = np.log(prior)[None, :] + features * signal[None, :] - 0.5 * signal[None, :] ** 2
    logit -= logit.max(axis=1, keepdims=True)
    p = np.exp(logit)
    return p / p.sum(axis=1, keepdims=True)


def generate_arrays(spec: SimulationSpec) -> SyntheticData:
    spec.validate()
    rng = _rng(spec.seed, 0)
    k = spec.n_classes
    counts = np.maximum(1, rng.poisson(spec.objects_per_image, spec.n_images))
    image_index = np.repeat(np.arange(spec.n_images), counts)
    n = image_index.size
    prior = np.asarray(spec.class_weights) / np.sum(spec.class_weights)
    labels = rng.choice(k, size=n, p=prior)
    truth = _sample_boxes(rng, n, spec)

    # classifier
    signal = _per_class(spec.class_signal, k, "class_signal")
    features = rng.normal(size=(n, k))
    features[np.arange(n), labels] += signal[labels]
    posterior = true_class_posterior(features, signal, prior)
    probs = posterior if spec.temperature == 1.0 else temperature_scale(posterior, spec.temperature)

    # box regressor: shared error plus per-member jitter, fused by confidence
    base = _per_class(spec.noise_scale, k, "noise_scale")[labels]
    if spec.noise_relative:
        w = truth[:, 2] - truth[:, 0]
        h = truth[:, 3] - truth[:, 1]
        scale = base[:, None] * np.stack([w, h, w, h], axis=1)
    else:
        scale = np.repeat(base[:, None], 4, axis=1)
    shared = _coordinate_noise(rng, n, spec)
    n_members = spec.ensemble_size
    jitter = spec.ensemble_jitter * rng.normal(size=(n_members, n, 4))
    member_conf = rng.uniform(0.5, 1.0, size=(n_members, n))
    members = truth[None] + scale[None] * (shared[None] + jitter)
    boxes, sigma, confidence = fuse_members(members, member_conf)
    weights = member_conf / member_conf.sum(axis=0)
    spread = np.sqrt(1.0 + spec.ensemble_jitter**2 * (weights**2).sum(axis=0))
    sigma_out = sigma if n_members > 1 else None

    # quantile heads: true conditional quantiles of the truth given the fused box
    z = stats.norm.ppf(1.0 - spec.quantile_alpha / 2.0)
    half = z * scale * spread[:, None]
    if spec.quantile_quality > 0:
        half = half * np.exp(spec.quantile_quality * rng.normal(size=half.shape))
    q_lo, q_hi = boxes - half, boxes + half

    # keep predicted corners ordered
    boxes = np.concatenate(
        [np.minimum(boxes[:, :2], boxes[:, 2:]), np.maximum(boxes[:, :2], boxes[:, 2:])], axis=1
    )
    image_size = np.tile([spec.image_width, spec.image_height], (n, 1))
    detections = DetectionBatch(
        boxes=boxes,
        probs=probs,
        confidence=confidence,
        sigma=sigma_out,
        q_lo=q_lo,
        q_hi=q_hi,
        image_size=image_size,
        image_ids=None,
    )
    mp, mt, _ = match_arrays(image_index, boxes, image_index, truth)
    return SyntheticData(
        image_index=image_index,
        truth_boxes=truth,
        labels=labels,
        detections=detections,
        true_posterior=posterior,
        noise_scale=scale,
        matched_pred=mp,
        matched_truth=mt,
        spec=spec,
    )


def image_id(i: int) -> str:
    return f"img{i:06d}"


def generate_dataset(spec: SimulationSpec):
    """Synthetic detections and ground truth as record lists."""
    data = generate_arrays(spec)
    det = data.detections
    detections = [
        DetectionRecord(
            image_id=image_id(data.image_index[i]),
            box=det.boxes[i],
            probs=det.probs[i],
            confidence=det.confidence[i],
            sigma=None if det.sigma is None else det.sigma[i],
            q_lo=det.q_lo[i],
            q_hi=det.q_hi[i],
            image_width=spec.image_width,
            image_height=spec.image_height,
        )
        for i in range(len(det))
    ]
    truths = [
        GroundTruthObject(image_id(data.image_index[i]), data.truth_boxes[i], data.labels[i])
        for i in range(data.labels.size)
    ]
    return detections, truths


# -- studies ---------------------------------------------------------------------------


@dataclass(frozen=True)
class PipelineConfig:
    """One calibrate/predict configuration evaluated in every trial."""

    name: str = "classthr-std"
    alpha_label: float = 0.01
    alpha_box: float = 0.1
    box_method: str = "std"
    correction: Optional[str] = None
    label_method: str = "classthr"
    temperature: float = 1.0

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        return cls(**d)


@dataclass
class ConfigTrials:
    """Per-trial metrics of one configuration (rows are trials)."""

    label_coverage: np.ndarray
    box_coverage: np.ndarray
    joint_coverage: np.ndarray
    class_label_coverage: np.ndarray
    class_box_coverage: np.ndarray
    class_joint_coverage: np.ndarray
    stratum_box_coverage: np.ndarray
    stratum_joint_coverage: np.ndarray
    mpiw: np.ndarray
    mean_set_size: np.ndarray
    class_set_size: np.ndarray
    ece: np.ndarray
    class_cal_counts: np.ndarray

    @classmethod
    def stack(cls, rows: Sequence[dict]) -> "ConfigTrials":
        return cls(**{f.name: np.array([r[f.name] for r in rows], dtype=float) for f in fields(cls)})

    @property
    def n_trials(self) -> int:
        return self.label_coverage.shape[0]


SCALAR_METRICS = ("label_coverage", "box_coverage", "joint_coverage", "mpiw", "mean_set_size", "ece")
CELL_METRICS = {
    "class_label_coverage": "class",
    "class_box_coverage": "class",
    "class_joint_coverage": "class",
    "class_set_size": "class",
    "class_cal_counts": "class",
    "stratum_box_coverage": "size",
    "stratum_joint_coverage": "size",
}
STRATUM_NAMES = ("small", "medium", "large")


@dataclass
class TrialSummary:
    spec: SimulationSpec
    configs: list
    trials: dict

    def __getitem__(self, name: str) -> ConfigTrials:
        return self.trials[name]

    def aggregate(self, lower: float = 0.01, upper: float = 0.99) -> list[dict]:
        """Mean and across-trial empirical quantiles of every metric cell."""
        rows = []
        for cfg in self.configs:
            t = self.trials[cfg.name]
            for metric, cell, values in _cells(t):
                v = values[np.isfinite(values)]
                rows.append(
                    {
                        "config": cfg.name,
                        "metric": metric,
                        "cell": cell,
                        "mean": float(v.mean()) if v.size else math.nan,
                        f"q{lower:g}": float(np.quantile(v, lower)) if v.size else math.nan,
                        f"q{upper:g}": float(np.quantile(v, upper)) if v.size else math.nan,
                    }
                )
        return rows

    def to_csv(self) -> str:
        """Long-format per-trial table: config, trial, metric, cell, value."""
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["config", "trial", "metric", "cell", "value"])
        for cfg in self.configs:
            t = self.trials[cfg.name]
            for metric, cell, values in _cells(t):
                for i, v in enumerate(values):
                    w.writerow([cfg.name, i, metric, cell, repr(float(v))])
        return buf.getvalue()


def _cells(t: ConfigTrials):
    for metric in SCALAR_METRICS:
        yield metric, "all", getattr(t, metric)
    for metric, kind in CELL_METRICS.items():
        arr = getattr(t, metric)
        for j in range(arr.shape[1]):
            cell = f"class={j}" if kind == "class" else f"size={STRATUM_NAMES[j]}"
            yield metric, cell, arr[:, j]


def _grouped_mean(values, groups, n_groups) -> np.ndarray:
    counts = np.bincount(groups, minlength=n_groups)[:n_groups]
    sums = np.bincount(groups, weights=values.astype(float), minlength=n_groups)[:n_groups]
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(counts > 0, sums / np.maximum(counts, 1), np.nan)


def evaluate_trial(cfg: PipelineConfig, X_cal, y_cal, X_test, y_test, n_classes: int) -> dict:
    """Calibrate on one split, predict the other, and collect trial metrics."""
    if cfg.temperature != 1.0:
        X_cal = _with_probs(X_cal, temperature_scale(X_cal.probs, cfg.temperature))
        X_test = _with_probs(X_test, temperature_scale(X_test.probs, cfg.temperature))
    config = MiscoverageConfig(cfg.alpha_label, cfg.alpha_box)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model = calibrate_batch(
            X_cal, y_cal, config, cfg.box_method, cfg.correction, cfg.label_method, n_classes=n_classes
        )
    out = predict_batch(model, X_test, y_test.labels)
    labels = y_test.labels
    label_cov = out.label_covered(labels)
    box_cov = out.box_covered(y_test.boxes)
    joint = label_cov & box_cov
    strata = strata_codes(y_test.boxes)
    width = out.hi - out.lo
    if out.sidedness is Sidedness.ONE_SIDED_OUTER:
        lo, hi = centered_bounds(out.lo, out.hi, X_test.boxes)
        width = hi - lo
    finite = np.all(np.isfinite(width), axis=1)
    sizes = out.set_sizes()
    return {
        "label_coverage": label_cov.mean(),
        "box_coverage": box_cov.mean(),
        "joint_coverage": joint.mean(),
        "class_label_coverage": _grouped_mean(label_cov, labels, n_classes),
        "class_box_coverage": _grouped_mean(box_cov, labels, n_classes),
        "class_joint_coverage": _grouped_mean(joint, labels, n_classes),
        "stratum_box_coverage": _grouped_mean(box_cov, strata, 3),
        "stratum_joint_coverage": _grouped_mean(joint, strata, 3),
        "mpiw": width[finite].mean() if finite.any() else np.nan,
        "mean_set_size": sizes.mean(),
        "class_set_size": _grouped_mean(sizes, labels, n_classes),
        "ece": expected_calibration_error(X_test.probs, labels),
        "class_cal_counts": np.bincount(y_cal.labels, minlength=n_classes)[:n_classes],
    }


def _with_probs(X: DetectionBatch, probs) -> DetectionBatch:
    Y = X.subset(slice(None))
    Y.probs = probs
    return Y


def split_images(rng, image_ids, fraction: float):
    """Boolean calibration mask assigning whole images to one side."""
    images = np.unique(image_ids)
    n_cal = int(round(fraction * images.size))
    cal_images = rng.permutation(images)[:n_cal]
    return np.isin(image_ids, cal_images)


def _run_trial(data: SyntheticData, configs, trial: int, X, y, img):
    rng = _rng(data.spec.seed, 1, trial)
    cal = split_images(rng, img, data.spec.calibration_fraction)
    cal_idx, test_idx = np.flatnonzero(cal), np.flatnonzero(~cal)
    X_cal, y_cal = X.subset(cal_idx), y.subset(cal_idx)
    X_test, y_test = X.subset(test_idx), y.subset(test_idx)
    return {
        cfg.name: evaluate_trial(cfg, X_cal, y_cal, X_test, y_test, data.spec.n_classes)
        for cfg in configs
    }


def run_coverage_study(
    spec: SimulationSpec,
    configs: Sequence[PipelineConfig],
    data: Optional[SyntheticData] = None,
    n_jobs: int = 1,
) -> TrialSummary:
    """Repeat random calibration/test splits of one synthetic dataset.

    Each trial reassigns whole images to calibration or test with its own
    random stream derived from ``(seed, trial)``, so serial and parallel
    runs give identical results.
    """
    configs = list(configs)
    names = [c.name for c in configs]
    if len(set(names)) != len(names):
        raise ValueError("pipeline config names must be unique")
    if data is None:
        data = generate_arrays(spec)
    X, y, img = data.matched_batches()
    if n_jobs == 1:
        per_trial = [_run_trial(data, configs, t, X, y, img) for t in range(spec.n_trials)]
    else:
        from joblib import Parallel, delayed

        per_trial = Parallel(n_jobs=n_jobs)(
            delayed(_run_trial)(data, configs, t, X, y, img) for t in range(spec.n_trials)
        )
    trials = {name: ConfigTrials.stack([r[name] for r in per_trial]) for name in names}
    return TrialSummary(spec=spec, configs=configs, trials=trials)


@dataclass
class SweepPoint:
    temperature: float
    method: str
    label_coverage: float
    mean_set_size: float
    ece: float
    class_label_coverage: np.ndarray = field(repr=False)


def temperature_sweep(
    spec: SimulationSpec,
    temperatures: Sequence[float],
    alpha_label: float = 0.01,
    data: Optional[SyntheticData] = None,
) -> list[SweepPoint]:
    """Label coverage and set size of Naive vs ClassThr under temperature
    distortion of the (otherwise calibrated) synthetic classifier."""
    configs = []
    for T in temperatures:
        for method in ("naive", "classthr"):
            configs.append(
                PipelineConfig(
                    name=f"{method}@T={T:g}",
                    alpha_label=alpha_label,
                    box_method="std",
                    label_method=method,
                    temperature=float(T),
                )
            )
    summary = run_coverage_study(spec, configs, data=data)
    points = []
    for cfg in configs:
        t = summary[cfg.name]
        points.append(
            SweepPoint(
                temperature=cfg.temperature,
                method=cfg.label_method,
                label_coverage=float(t.label_coverage.mean()),
                mean_set_size=float(t.mean_set_size.mean()),
                ece=float(t.ece.mean()),
                class_label_coverage=np.nanmean(t.class_label_coverage, axis=0),
            )
        )
    return points


# -- score-level studies ---------------------------------------------------------------


def marginal_coverage_trials(n_cal: int, alpha: float, n_trials: int, seed: int = 0) -> np.ndarray:
    """Exact conditional coverage of split CP for ``n_trials`` calibration draws.

    Scores are i.i.d. Uniform(0, 1), so the coverage attained by a quantile
    ``q`` is ``q`` itself (or 1 when the quantile is infinite).
    """
    rng = _rng(seed, 2)
    scores = rng.uniform(size=(n_trials, n_cal))
    q = conformal_quantile_columns(scores.T, alpha)
    return np.minimum(q, 1.0)


def coverage_ks_test(coverages, n_cal: int, alpha: float, level: float = 0.01) -> dict:
    """Kolmogorov-Smirnov check of per-trial coverages against Beta(n+1-l, l)."""
    coverages = np.asarray(coverages, dtype=float)
    dist = coverage_distribution(n_cal, alpha)
    res = stats.kstest(coverages, dist.frozen().cdf)
    critical = float(stats.kstwo.ppf(1.0 - level, coverages.size))
    return {
        "statistic": float(res.statistic),
        "pvalue": float(res.pvalue),
        "critical_value": critical,
        "consistent": bool(res.statistic < critical),
    }


def correlated_scores(rng, n: int, m: int, rho: float) -> np.ndarray:
    """Absolute residuals of equicorrelated standard normal coordinates."""
    cov = (1.0 - rho) * np.eye(m) + rho * np.ones((m, m))
    return np.abs(rng.multivariate_normal(np.zeros(m), cov, size=n, method="eigh"))


def correction_comparison(
    n_cal: int = 1000,
    m: int = 4,
    rho: float = 0.9,
    alpha: float = 0.1,
    n_trials: int = 200,
    n_test: int = 5000,
    seed: int = 0,
) -> dict:
    """Paired max-rank vs Bonferroni trials on correlated coordinate scores.

    Returns per-trial joint coverage and mean interval width (twice the
    quantile, as for absolute-residual intervals) of both corrections.
    """
    out = {k: np.empty(n_trials) for k in ("maxrank_coverage", "bonferroni_coverage", "maxrank_mpiw", "bonferroni_mpiw")}
    for t in range(n_trials):
        rng = _rng(seed, 3, t)
        cal = correlated_scores(rng, n_cal, m, rho)
        test = correlated_scores(rng, n_test, m, rho)
        for name, q in (
            ("maxrank", max_rank_quantiles(cal, alpha)),
            ("bonferroni", bonferroni_quantiles(cal, alpha)),
        ):
            out[f"{name}_coverage"][t] = np.mean(np.all(test <= q, axis=1))
            out[f"{name}_mpiw"][t] = np.mean(2.0 * q)
    return out
