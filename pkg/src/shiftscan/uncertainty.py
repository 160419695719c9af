"""Dropout-inference statistics: prediction shift ratio, prediction shift
uncertainty, MC-Dropout standard deviation, feature-map similarity.

All passes share the constraint that pass i of a configuration is the
deterministic function of (seed, pass index, site index); the base pass never
uses dropout.
"""
import csv
from dataclasses import dataclass

import numpy as np

from . import nets
from .nets import DropoutConfig  # re-export: config type lives with forward()

__all__ = ["DropoutConfig", "PredictionRecord", "ShiftStats", "PsuScore",
           "collect_records", "mc_dropout_uncertainty", "shift_ratio", "psu",
           "capture_feature_maps", "similarity_mask", "export_sample_stats"]


@dataclass
class PredictionRecord:
    sample_id: int
    base_confidences: np.ndarray  # [C]
    base_class: int
    pass_confidences: np.ndarray  # [k, C]
    pass_classes: np.ndarray      # [k]


@dataclass
class ShiftStats:
    sigma: float
    shift_counts: np.ndarray        # [n] shifts per sample, each in [0, k]
    destinations: np.ndarray        # [C] counts of shifted-to classes
    k: int
    sample_count: int


@dataclass
class PsuScore:
    sample_id: int
    psu: float


def _images_ids(data):
    if hasattr(data, "dataset"):  # poisoned wrapper
        data = data.dataset
    if hasattr(data, "images"):
        return data.images, np.asarray(data.ids)
    images = np.asarray(data)
    return images, np.arange(len(images))


def dropout_pass_probs(model, images, cfg, sample_ids=None, batch_size=512):
    """Base confidences [n,C] and per-pass confidences [k,n,C]."""
    base = nets.predict_probs(model, images, batch_size)
    passes = np.stack([
        nets.predict_probs(model, images, batch_size, dropout=cfg,
                           pass_index=i, sample_ids=sample_ids)
        for i in range(cfg.k)])
    return base, passes


def collect_records(model, data, cfg, batch_size=512):
    images, ids = _images_ids(data)
    if len(images) == 0:
        raise ValueError("empty dataset")
    sid = ids if cfg.per_sample else None
    base, passes = dropout_pass_probs(model, images, cfg, sid, batch_size)
    base_cls = base.argmax(axis=1)
    pass_cls = passes.argmax(axis=2)
    return [PredictionRecord(int(ids[i]), base[i], int(base_cls[i]),
                             passes[:, i], pass_cls[:, i])
            for i in range(len(images))]


def _base_and_passes(model, data, cfg, batch_size):
    images, ids = _images_ids(data)
    if len(images) == 0:
        raise ValueError("empty dataset")
    sid = ids if cfg.per_sample else None
    return ids, *dropout_pass_probs(model, images, cfg, sid, batch_size)


def mc_dropout_uncertainty(model, data, cfg, batch_size=512):
    """Per-sample population standard deviation, across the k passes, of the
    confidence in the class that maximizes the mean pass confidence."""
    if cfg.k < 2:
        raise ValueError("mc_dropout_uncertainty needs k >= 2")
    ids, _, passes = _base_and_passes(model, data, cfg, batch_size)
    mean_conf = passes.mean(axis=0)
    cls = mean_conf.argmax(axis=1)
    vals = passes[:, np.arange(len(ids)), cls]
    return vals.std(axis=0)


def shift_ratio(model, data, cfg, batch_size=512):
    """Fraction of (sample, pass) events whose dropout argmax differs from
    the no-dropout argmax, with a histogram of shifted-to classes."""
    ids, base, passes = _base_and_passes(model, data, cfg, batch_size)
    base_cls = base.argmax(axis=1)
    pass_cls = passes.argmax(axis=2)
    shifted = pass_cls != base_cls[None, :]
    n = len(ids)
    sigma = float(shifted.sum()) / (cfg.k * n)
    destinations = np.bincount(pass_cls[shifted],
                               minlength=model.arch.class_count)
    return ShiftStats(sigma, shifted.sum(axis=0), destinations, cfg.k, n)


def psu(model, data, cfg, batch_size=512):
    """Prediction shift uncertainty per sample: base confidence of the base
    class minus the mean dropout-pass confidence of that class."""
    ids, base, passes = _base_and_passes(model, data, cfg, batch_size)
    rows = np.arange(len(ids))
    cls = base.argmax(axis=1)
    vals = base[rows, cls] - passes[:, rows, cls].mean(axis=0)
    return [PsuScore(int(i), float(v)) for i, v in zip(ids, vals)]


def psu_values(model, data, cfg, batch_size=512):
    """psu() result as (ids, values) arrays."""
    scores = psu(model, data, cfg, batch_size)
    return (np.array([s.sample_id for s in scores]),
            np.array([s.psu for s in scores]))


def capture_feature_maps(model, image, cfg=None, pass_index=0):
    """Final conv-stage activations [C, H, W] for one image, optionally under
    dropout."""
    image = np.asarray(image, dtype=np.float32)
    if image.ndim != 3:
        raise ValueError("expected one [channels, side, side] image")
    _, pre_gap, _ = nets.forward_features(model, image[None], cfg, pass_index)
    return pre_gap[0]


def similarity_mask(a, b, tol=1.0):
    """Positions where both activations are non-zero and differ by <= tol."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise ValueError("feature stacks differ in shape")
    return (a != 0) & (b != 0) & (np.abs(a - b) <= tol)


def export_sample_stats(path, ids, base_classes, base_confs, psu_vals,
                        shift_counts, truth):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "base_class", "base_conf", "psu",
                    "shift_count", "is_backdoor_truth"])
        for i in range(len(ids)):
            w.writerow([int(ids[i]), int(base_classes[i]),
                        repr(float(base_confs[i])), repr(float(psu_vals[i])),
                        int(shift_counts[i]), int(truth[i])])
