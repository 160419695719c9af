"""Metric computation and artifact emission for detection runs.

TPR/FPR come from hard flags; AUROC comes from the continuous scores by the
rank-sum statistic with tie averaging, oriented so higher means more
suspicious.  Percentile/quartile computations share one convention: linear
interpolation between order statistics.
"""
import csv
import json
import logging
import os
from dataclasses import dataclass

import numpy as np
from scipy import stats as sstats

from . import attacks, detect

log = logging.getLogger(__name__)


@dataclass
class MetricSet:
    tpr: float
    fpr: float
    auroc: float  # None when truth is degenerate
    tp: int
    fp: int
    tn: int
    fn: int

    def to_json(self):
        return {"tpr": self.tpr, "fpr": self.fpr, "auroc": self.auroc,
                "counts": {"tp": self.tp, "fp": self.fp,
                           "tn": self.tn, "fn": self.fn}}


def _align_truth(report, truth, truth_ids):
    if isinstance(truth, attacks.PoisonedDataset):
        truth_ids = truth.dataset.ids
        truth = truth.backdoor_mask
    truth = np.asarray(truth, dtype=bool)
    if truth_ids is None:
        if len(truth) != len(report.sample_ids):
            raise ValueError("truth length does not match report")
        return truth
    truth_ids = np.asarray(truth_ids)
    if len(truth_ids) != len(report.sample_ids) or \
            set(truth_ids.tolist()) != set(report.sample_ids.tolist()):
        raise ValueError("report and truth cover different sample ids")
    pos = {int(s): i for i, s in enumerate(truth_ids)}
    perm = np.array([pos[int(s)] for s in report.sample_ids])
    return truth[perm]


def auroc_score(scores, truth, orientation="upper"):
    """Rank-statistic AUROC with tie averaging; None on degenerate truth."""
    truth = np.asarray(truth, dtype=bool)
    n1 = int(truth.sum())
    n0 = len(truth) - n1
    if n1 == 0 or n0 == 0:
        return None
    s = np.asarray(scores, dtype=np.float64)
    if orientation == "lower":
        s = -s
    ranks = sstats.rankdata(s)
    return float((ranks[truth].sum() - n1 * (n1 + 1) / 2.0) / (n1 * n0))


def compute_metrics(report, truth, truth_ids=None):
    """Score a detection report against the ground-truth backdoor mask.
    The truth may be a PoisonedDataset, or a boolean mask (optionally with
    truth_ids to align by sample id)."""
    truth = _align_truth(report, truth, truth_ids)
    flags = np.asarray(report.flags, dtype=bool)
    tp = int((flags & truth).sum())
    fp = int((flags & ~truth).sum())
    fn = int((~flags & truth).sum())
    tn = int((~flags & ~truth).sum())
    tpr = tp / (tp + fn) if tp + fn else None
    fpr = fp / (fp + tn) if fp + tn else None
    auroc = auroc_score(report.scores, truth, report.orientation)
    ms = MetricSet(tpr, fpr, auroc, tp, fp, tn, fn)
    report.metrics = ms.to_json()
    return ms


def metrics_doc(report, metricset, attack, poison_ratio):
    """The per-run metrics.json payload."""
    return {"detector": report.detector, "attack": attack,
            "poison_ratio": poison_ratio, "tpr": metricset.tpr,
            "fpr": metricset.fpr, "auroc": metricset.auroc,
            "p": report.p, "T": report.threshold}


def write_json(doc, path):
    # allow_nan=False: a NaN would serialize as non-standard JSON and hide
    # an upstream bug; degenerate metrics must be None, never NaN
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=2, allow_nan=False)
        f.write("\n")


CURVE_GROUPS = ("clean_train", "clean_val", "backdoor")


def emit_curves(model, datasets, p_grid, k, out_dir, seed=0, selected_p=None,
                curves=None, histogram_group="clean_val"):
    """Write per-p shift-ratio curves for the given subsets and, when a
    selected p is supplied, the shift-destination histogram at that p.

    datasets maps group names (clean_train, clean_val, backdoor as available)
    to datasets; precomputed curves from detect.sigma_curves are reused when
    passed."""
    if len(p_grid) == 0:
        raise ValueError("empty p grid")
    if curves is None:
        curves = detect.sigma_curves(model, datasets, p_grid, k, seed)
    groups = [g for g in CURVE_GROUPS if g in curves["sigma"]]
    os.makedirs(out_dir, exist_ok=True)
    curve_path = os.path.join(out_dir, "curves.csv")
    with open(curve_path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["p"] + [f"sigma_{g}" for g in groups])
        for i, p in enumerate(curves["p"]):
            w.writerow([repr(float(p))] +
                       [repr(float(curves["sigma"][g][i])) for g in groups])
    written = [curve_path]
    if selected_p is not None and histogram_group in curves["destinations"]:
        gi = int(np.argmin(np.abs(np.asarray(curves["p"]) - selected_p)))
        dest = curves["destinations"][histogram_group][gi]
        hist_path = os.path.join(out_dir, "shift_destinations.csv")
        with open(hist_path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["class", "count"])
            for c, count in enumerate(dest):
                w.writerow([c, int(count)])
        written.append(hist_path)
    return written


def _box_stats(values):
    q1, med, q3 = (percentile(values, q) for q in (25.0, 50.0, 75.0))
    iqr = q3 - q1
    inside = values[(values >= q1 - 1.5 * iqr) & (values <= q3 + 1.5 * iqr)]
    return float(inside.min()), q1, med, q3, float(inside.max())


def percentile(values, q):
    return float(np.percentile(np.asarray(values, dtype=np.float64), q))


def emit_psu_summary(groups, path):
    """Box-plot data (Tukey whiskers) per named score group; empty groups are
    omitted with a warning."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["group", "whisker_low", "q1", "median", "q3",
                    "whisker_high", "count"])
        order = [g for g in CURVE_GROUPS if g in groups]
        order += [g for g in groups if g not in CURVE_GROUPS]
        for name in order:
            values = np.asarray(groups[name], dtype=np.float64)
            if values.size == 0:
                log.warning("psu summary: group %r is empty; row omitted",
                            name)
                continue
            lo, q1, med, q3, hi = _box_stats(values)
            w.writerow([name] + [repr(v) for v in (lo, q1, med, q3, hi)] +
                       [values.size])
    return path


def write_suite_table(rows, path):
    """Attack x detector comparison table; failed cells carry error:<stage>."""
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["attack", "detector", "tpr", "fpr", "auroc", "p", "T"])
        for row in rows:
            if row.get("error"):
                marker = f"error:{row['error']}"
                w.writerow([row.get("attack", ""), row.get("detector", ""),
                            marker, marker, marker, "", ""])
                continue
            w.writerow([row["attack"], row["detector"],
                        _cell(row.get("tpr")), _cell(row.get("fpr")),
                        _cell(row.get("auroc")), _cell(row.get("p")),
                        _cell(row.get("T"))])
    return path


def _cell(v):
    return "" if v is None else repr(float(v))
