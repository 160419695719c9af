"""Backdoor training-data detectors.

The primary detector thresholds prediction-shift uncertainty at a percentile
of the clean-validation scores after adaptively choosing the dropout rate.
Four baselines share the report format: MC-Dropout deviation, blend-entropy,
amplification-consistency, and spectral feature outliers.
"""
import csv
import json
import logging
import os
from dataclasses import dataclass, field

import numpy as np

from . import nets, uncertainty
from .nets import DropoutConfig
from .uncertainty import _images_ids

log = logging.getLogger(__name__)

DEFAULT_P_GRID = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9)
DEFAULT_SCP_FACTORS = (3, 5, 7, 9, 11)


@dataclass
class SelectionPolicy:
    p_grid: tuple = DEFAULT_P_GRID
    sigma_target: float = 0.8
    k_select: int = 3

    def __post_init__(self):
        self.p_grid = tuple(float(p) for p in self.p_grid)
        if len(self.p_grid) == 0:
            raise ValueError("p_grid must be nonempty")
        if any(not 0.0 <= p < 1.0 for p in self.p_grid):
            raise ValueError("p_grid values must lie in [0,1)")
        if any(b <= a for a, b in zip(self.p_grid, self.p_grid[1:])):
            raise ValueError("p_grid must be strictly ascending")
        if not 0.0 < self.sigma_target < 1.0:
            raise ValueError("sigma_target must be in (0,1)")


@dataclass
class DetectionConfig:
    dropout: DropoutConfig
    threshold_percentile: float = 25.0

    def __post_init__(self):
        if not 0.0 < self.threshold_percentile < 100.0:
            raise ValueError("threshold_percentile must be in (0,100)")


@dataclass
class DetectionReport:
    detector: str
    sample_ids: np.ndarray
    scores: np.ndarray
    flags: np.ndarray
    threshold: float = None
    p: float = None
    orientation: str = "lower"  # which score tail is suspicious
    config: dict = field(default_factory=dict)
    metrics: dict = None


def percentile_threshold(values, pct):
    """Percentile with linear interpolation between order statistics."""
    return float(np.percentile(np.asarray(values, dtype=np.float64), pct))


def sigma_curves(model, datasets, p_grid, k, seed=0, batch_size=512):
    """Shift ratios over a dropout-rate grid for several named datasets.

    Returns {"p": grid, "sigma": {name: [per p]},
             "destinations": {name: [per p class-count histogram]}}.
    The base prediction is computed once per dataset and shared.
    """
    grid = [float(p) for p in p_grid]
    out = {"p": grid, "sigma": {}, "destinations": {}}
    cc = model.arch.class_count
    for name, ds in datasets.items():
        images, ids = _images_ids(ds)
        if len(images) == 0:
            raise ValueError(f"dataset {name!r} is empty")
        base_cls = nets.predict_probs(model, images, batch_size).argmax(axis=1)
        sigmas, dests = [], []
        for p in grid:
            cfg = DropoutConfig(p=p, k=k, seed=seed)
            shifts = 0
            dest = np.zeros(cc, dtype=np.int64)
            if p > 0.0:
                for i in range(k):
                    cls = nets.predict_probs(model, images, batch_size, cfg,
                                             pass_index=i).argmax(axis=1)
                    moved = cls != base_cls
                    shifts += int(moved.sum())
                    dest += np.bincount(cls[moved], minlength=cc)
            sigmas.append(shifts / (k * len(images)))
            dests.append(dest)
        out["sigma"][name] = sigmas
        out["destinations"][name] = dests
    return out


def apply_selection_rule(p_grid, sigma_val, sigma_train, policy):
    """The dropout-rate rule on precomputed curves: among p with
    sigma_val >= target, maximize sigma_val - sigma_train (ties -> smallest
    p); fallback to argmax sigma_val when the target is never reached.
    Returns (p, fallback_used)."""
    best_p, best_gap = None, -np.inf
    for p, sv, st in zip(p_grid, sigma_val, sigma_train):
        if sv >= policy.sigma_target and sv - st > best_gap:
            best_p, best_gap = p, sv - st
    if best_p is not None:
        return float(best_p), False
    i = int(np.argmax(sigma_val))
    log.warning("no grid point reached sigma_target=%.3f; falling back to "
                "argmax sigma_val at p=%.3f", policy.sigma_target, p_grid[i])
    return float(p_grid[i]), True


def select_dropout_rate(model, train_data, clean_val, policy, seed=0,
                        batch_size=512):
    """Choose the dropout rate on sigma curves of the full suspect training
    set versus the clean validation set."""
    curves = sigma_curves(model, {"train": train_data, "val": clean_val},
                          policy.p_grid, policy.k_select, seed, batch_size)
    p, _ = apply_selection_rule(curves["p"], curves["sigma"]["val"],
                                curves["sigma"]["train"], policy)
    return p


def _report(detector, ids, scores, threshold, orientation, p, config):
    scores = np.asarray(scores, dtype=np.float64)
    if orientation == "lower":
        flags = scores < threshold
    else:
        flags = scores > threshold
    return DetectionReport(detector, np.asarray(ids), scores, flags,
                           float(threshold), p, orientation, config)


def psbd_detect(model, train_data, clean_val, cfg, batch_size=512):
    """Flag training samples whose prediction-shift uncertainty falls below
    the threshold_percentile of the clean-validation PSU."""
    val_images, _ = _images_ids(clean_val)
    if len(val_images) == 0:
        raise ValueError("empty validation set")
    ids, scores = uncertainty.psu_values(model, train_data, cfg.dropout,
                                         batch_size)
    _, val_scores = uncertainty.psu_values(model, clean_val, cfg.dropout,
                                           batch_size)
    t = percentile_threshold(val_scores, cfg.threshold_percentile)
    return _report("psbd", ids, scores, t, "lower", cfg.dropout.p,
                   {"dropout": {"p": cfg.dropout.p, "k": cfg.dropout.k,
                                "seed": cfg.dropout.seed},
                    "threshold_percentile": cfg.threshold_percentile})


def mc_dropout_detect(model, train_data, clean_val, cfg, batch_size=512):
    """Baseline: flag low MC-Dropout standard deviation, same percentile
    rule as the primary detector."""
    val_images, _ = _images_ids(clean_val)
    if len(val_images) == 0:
        raise ValueError("empty validation set")
    _, ids = _images_ids(train_data)
    scores = uncertainty.mc_dropout_uncertainty(model, train_data,
                                                cfg.dropout, batch_size)
    val_scores = uncertainty.mc_dropout_uncertainty(model, clean_val,
                                                    cfg.dropout, batch_size)
    t = percentile_threshold(val_scores, cfg.threshold_percentile)
    return _report("mc_dropout", ids, scores, t, "lower", cfg.dropout.p,
                   {"dropout": {"p": cfg.dropout.p, "k": cfg.dropout.k,
                                "seed": cfg.dropout.seed},
                    "threshold_percentile": cfg.threshold_percentile})


def _blend_entropy_scores(model, images, val_images, blend_count, blend_alpha,
                          rng, batch_size):
    n = len(images)
    nv = len(val_images)
    partners = np.argsort(rng.random((n, nv)), axis=1)[:, :blend_count]
    total = np.zeros(n, dtype=np.float64)
    for j in range(blend_count):
        mixed = (1.0 - blend_alpha) * images \
            + blend_alpha * val_images[partners[:, j]]
        probs = nets.predict_probs(model, mixed.astype(np.float32), batch_size)
        total += -(probs * np.log(probs + 1e-12)).sum(axis=1)
    return total / blend_count


def strip_detect(model, train_data, clean_val, blend_count=8, blend_alpha=0.5,
                 threshold_percentile=25.0, seed=0, batch_size=512):
    """Baseline: mean prediction entropy over convex blends with validation
    images; low entropy means the trigger survives blending."""
    if blend_count < 2:
        raise ValueError("blend_count must be >= 2")
    val_images, _ = _images_ids(clean_val)
    if len(val_images) < blend_count:
        raise ValueError("validation set smaller than blend_count")
    images, ids = _images_ids(train_data)
    from ._seeds import make_rng
    rng = make_rng(seed, "strip")
    scores = _blend_entropy_scores(model, images, val_images, blend_count,
                                   blend_alpha, rng, batch_size)
    val_scores = _blend_entropy_scores(model, val_images, val_images,
                                       blend_count, blend_alpha, rng,
                                       batch_size)
    t = percentile_threshold(val_scores, threshold_percentile)
    return _report("strip", ids, scores, t, "lower", None,
                   {"blend_count": blend_count, "blend_alpha": blend_alpha,
                    "threshold_percentile": threshold_percentile,
                    "seed": seed})


def _amplification_scores(model, images, factors, batch_size):
    base = nets.predict_probs(model, images, batch_size).argmax(axis=1)
    agree = np.zeros(len(images), dtype=np.float64)
    for f in factors:
        amp = np.clip(images * float(f), 0.0, 1.0).astype(np.float32)
        cls = nets.predict_probs(model, amp, batch_size).argmax(axis=1)
        agree += cls == base
    return agree / len(factors)


def scp_detect(model, train_data, clean_val, factors=DEFAULT_SCP_FACTORS,
               threshold_percentile=25.0, batch_size=512):
    """Baseline: prediction consistency under pixel amplification; high
    consistency is suspicious (upper-tail threshold)."""
    factors = tuple(factors)
    if len(factors) == 0:
        raise ValueError("factor set must be nonempty")
    if any(f <= 1 for f in factors):
        raise ValueError("amplification factors must be > 1")
    val_images, _ = _images_ids(clean_val)
    if len(val_images) == 0:
        raise ValueError("empty validation set")
    images, ids = _images_ids(train_data)
    scores = _amplification_scores(model, images, factors, batch_size)
    val_scores = _amplification_scores(model, val_images, factors, batch_size)
    t = percentile_threshold(val_scores, 100.0 - threshold_percentile)
    return _report("scp", ids, scores, t, "upper", None,
                   {"factors": list(factors),
                    "threshold_percentile": threshold_percentile})


def spectral_signature_detect(model, train_data, removal_fraction=0.15,
                              batch_size=512):
    """Baseline: per predicted class, squared projection of mean-centered
    pooled features onto their top singular direction; the top
    removal_fraction scorers of each class are flagged."""
    if not 0.0 < removal_fraction < 1.0:
        raise ValueError("removal_fraction must be in (0,1)")
    images, ids = _images_ids(train_data)
    feats = []
    preds = []
    for b0 in range(0, len(images), batch_size):
        probs, _, feat = nets.forward_features(model, images[b0:b0 + batch_size])
        feats.append(feat)
        preds.append(probs.argmax(axis=1))
    feats = np.concatenate(feats, axis=0).astype(np.float64)
    preds = np.concatenate(preds, axis=0)
    n = len(images)
    scores = np.zeros(n, dtype=np.float64)
    flags = np.zeros(n, dtype=bool)
    for c in range(model.arch.class_count):
        idx = np.flatnonzero(preds == c)
        if len(idx) == 0:
            continue
        if len(idx) == 1:
            log.warning("spectral baseline: predicted class %d has a single "
                        "sample; skipped", c)
            continue
        centered = feats[idx] - feats[idx].mean(axis=0)
        _, _, vt = np.linalg.svd(centered, full_matrices=False)
        proj = centered @ vt[0]
        scores[idx] = proj ** 2
        take = int(np.rint(removal_fraction * len(idx)))
        if take > 0:
            order = np.argsort(-scores[idx], kind="stable")
            flags[idx[order[:take]]] = True
    report = DetectionReport("spectral_signature", np.asarray(ids), scores,
                             flags, None, None, "upper",
                             {"removal_fraction": removal_fraction})
    return report


def save_report(report, path, truth=None):
    """Persist a report: JSON (detector, p, T, config) + per-sample CSV."""
    os.makedirs(path, exist_ok=True)
    doc = {"detector": report.detector, "p": report.p,
           "T": report.threshold, "orientation": report.orientation,
           "config": report.config, "flag_count": int(report.flags.sum()),
           "sample_count": int(len(report.flags))}
    if report.metrics is not None:
        doc["metrics"] = report.metrics
    with open(os.path.join(path, "report.json"), "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(path, "samples.csv"), "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "score", "flagged", "is_backdoor_truth"])
        for i in range(len(report.sample_ids)):
            t = "" if truth is None else int(truth[i])
            w.writerow([int(report.sample_ids[i]),
                        repr(float(report.scores[i])),
                        int(report.flags[i]), t])
