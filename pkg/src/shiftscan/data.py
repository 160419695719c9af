"""Synthetic labeled image data and the clean validation split.

Ten procedural motif classes at a configurable resolution stand in for a
CIFAR-style corpus.  Class identity is carried by shape alone: foreground
color is drawn per sample, the background is dim low-frequency clutter, and
geometry/thickness/frequency jitter keeps the decision margins honest.
Pixel noise is kept near zero on purpose: broadband noise excites the same
high-frequency band a checkerboard trigger lives in, and the trained head
then buries the target class under a large negative bias to cancel that
leakage, which destroys the dropout-attenuation collapse onto the target
class that the whole detection pipeline measures.  Everything is a pure
function of (seed, parameters).
"""
import json
import os
from dataclasses import dataclass

import numpy as np

from ._seeds import make_rng

N_MOTIFS = 10


@dataclass
class LabeledImage:
    pixels: np.ndarray  # [3, side, side] float32 in [0, 1]
    label: int
    id: int


@dataclass
class Dataset:
    images: np.ndarray  # [n, 3, side, side] float32
    labels: np.ndarray  # [n] uint16
    ids: np.ndarray     # [n] int64
    class_count: int
    split_tag: str

    def __len__(self):
        return self.images.shape[0]

    @property
    def side(self):
        return self.images.shape[2]

    def item(self, i):
        return LabeledImage(self.images[i], int(self.labels[i]), int(self.ids[i]))

    def subset(self, index, split_tag=None):
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.ids[index],
                       self.class_count, split_tag or self.split_tag)

    def copy(self):
        return Dataset(self.images.copy(), self.labels.copy(), self.ids.copy(),
                       self.class_count, self.split_tag)


def _grids(side, rng, count):
    """Per-sample rotated/offset/scaled normalized coordinates."""
    lin = np.linspace(-1.0, 1.0, side, dtype=np.float32)
    yy, xx = np.meshgrid(lin, lin, indexing="ij")
    ang = rng.uniform(-0.9, 0.9, count).astype(np.float32)
    cx = rng.uniform(-0.35, 0.35, count).astype(np.float32)
    cy = rng.uniform(-0.35, 0.35, count).astype(np.float32)
    sc = rng.uniform(0.55, 1.45, count).astype(np.float32)
    ca, sa = np.cos(ang), np.sin(ang)
    x = (xx[None] - cx[:, None, None]) / sc[:, None, None]
    y = (yy[None] - cy[:, None, None]) / sc[:, None, None]
    xr = ca[:, None, None] * x - sa[:, None, None] * y
    yr = sa[:, None, None] * x + ca[:, None, None] * y
    return xr, yr


def _soft(d, aa=0.08):
    """Smooth indicator of d <= 0."""
    return 1.0 / (1.0 + np.exp(np.clip(d / aa, -30, 30)))


def _col(v):
    return v.astype(np.float32)[:, None, None]


def _motif_field(label, x, y, rng):
    """Scalar mask in [0,1] for one class motif, batched over samples.
    Shape parameters are drawn per sample to keep decision margins small."""
    n = x.shape[0]
    r = np.sqrt(x * x + y * y)
    if label == 0:                       # filled disk
        rad = _col(rng.uniform(0.42, 0.62, n))
        return _soft(r - rad)
    if label == 1:                       # square frame
        outer = _col(rng.uniform(0.5, 0.7, n))
        width = _col(rng.uniform(0.14, 0.26, n))
        m = np.maximum(np.abs(x), np.abs(y))
        return _soft(m - outer) * _soft(outer - width - m)
    if label == 2:                       # horizontal stripes
        f = _col(rng.uniform(4.0, 8.0, n))
        ph = _col(rng.uniform(0.0, 2 * np.pi, n))
        return _soft(-np.sin(f * y + ph) * 0.25, aa=0.05)
    if label == 3:                       # vertical stripes
        f = _col(rng.uniform(4.0, 8.0, n))
        ph = _col(rng.uniform(0.0, 2 * np.pi, n))
        return _soft(-np.sin(f * x + ph) * 0.25, aa=0.05)
    if label == 4:                       # diagonal cross
        width = _col(rng.uniform(0.10, 0.22, n))
        d = np.minimum(np.abs(x - y), np.abs(x + y))
        return _soft(d - width) * _soft(r - 0.95)
    if label == 5:                       # triangle
        slope = _col(rng.uniform(1.4, 2.2, n))
        d = np.maximum(y - 0.55, np.maximum(-x * slope - y - 0.2,
                                            x * slope - y - 0.2))
        return _soft(d)
    if label == 6:                       # ring
        rad = _col(rng.uniform(0.45, 0.62, n))
        width = _col(rng.uniform(0.09, 0.17, n))
        return _soft(np.abs(r - rad) - width)
    if label == 7:                       # coarse checker
        s = _col(rng.uniform(1.6, 2.8, n))
        px = _col(rng.uniform(0.0, 2.0, n))
        py = _col(rng.uniform(0.0, 2.0, n))
        g = np.floor(x * s + px) + np.floor(y * s + py)
        return (np.mod(g, 2) < 1).astype(np.float32)
    if label == 8:                       # radial blob (soft-edged disk)
        sig = _col(rng.uniform(0.38, 0.62, n))
        return np.exp(-(r / sig) ** 2).astype(np.float32)
    if label == 9:                       # four-dot diamond
        dist = _col(rng.uniform(0.45, 0.62, n))
        rad = _col(rng.uniform(0.16, 0.26, n))
        m = np.zeros_like(x)
        for (ox, oy) in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            d = np.sqrt((x - ox * dist) ** 2 + (y - oy * dist) ** 2)
            m = np.maximum(m, _soft(d - rad))
        return m
    raise ValueError(f"no motif for label {label}")


def _lerp_matrix(side, knots):
    """Piecewise-linear upsampling matrix [side, knots]."""
    t = np.linspace(0.0, knots - 1.0, side, dtype=np.float32)
    j0 = np.minimum(np.floor(t).astype(np.int64), knots - 2)
    w = t - j0
    u = np.zeros((side, knots), dtype=np.float32)
    u[np.arange(side), j0] = 1.0 - w
    u[np.arange(side), j0 + 1] = w
    return u


def _clutter(rng, count, side, lo, hi, knots=5):
    """Low-frequency per-channel background fields in [lo, hi]."""
    coarse = rng.uniform(lo, hi, (count, 3, knots, knots)).astype(np.float32)
    u = _lerp_matrix(side, knots)
    return np.einsum("ij,ncjk,lk->ncil", u, coarse, u, optimize=True)


def synth_dataset(seed, per_class, class_count, side):
    """Deterministic procedural dataset; labels are class-major in
    generation order."""
    if per_class < 1:
        raise ValueError(f"per_class must be >= 1, got {per_class}")
    if not 2 <= class_count <= N_MOTIFS:
        raise ValueError(f"class_count must be in [2, {N_MOTIFS}], got {class_count}")
    if side < 16:
        raise ValueError(f"side must be >= 16, got {side}")
    images = np.empty((class_count * per_class, 3, side, side), dtype=np.float32)
    rng = make_rng(seed, "synth")
    for c in range(class_count):
        x, y = _grids(side, rng, per_class)
        field = _motif_field(c, x, y, rng).astype(np.float32)[:, None]
        fg = rng.uniform(0.5, 0.95, (per_class, 3)).astype(np.float32)
        bg = _clutter(rng, per_class, side, 0.05, 0.3)
        img = bg * (1.0 - field) + fg[:, :, None, None] * field
        img += rng.normal(0.0, 0.02, img.shape).astype(np.float32)
        images[c * per_class:(c + 1) * per_class] = np.clip(img, 0.0, 1.0)
    labels = np.repeat(np.arange(class_count, dtype=np.uint16), per_class)
    ids = np.arange(class_count * per_class, dtype=np.int64)
    return Dataset(images, labels, ids, class_count, "train")


def split_validation(pool, fraction, seed, train_size):
    """Carve |clean_validation| = round(fraction * train_size) items out of
    a held-out pool; returns (clean_validation, remainder)."""
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must be in (0,1), got {fraction}")
    n_val = int(np.rint(fraction * train_size))
    if n_val == 0:
        raise ValueError("fraction yields an empty validation set")
    if n_val > len(pool):
        raise ValueError(f"pool of {len(pool)} cannot supply {n_val} validation items")
    rng = make_rng(seed, "split")
    picked = rng.choice(len(pool), size=n_val, replace=False)
    mask = np.zeros(len(pool), dtype=bool)
    mask[picked] = True
    val = pool.subset(np.nonzero(mask)[0], split_tag="clean_validation")
    rest = pool.subset(np.nonzero(~mask)[0])
    return val, rest


def save_dataset(ds, path):
    os.makedirs(path, exist_ok=True)
    meta = {"class_count": int(ds.class_count), "side": int(ds.side),
            "count": len(ds)}
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    ds.images.astype("<f4").tofile(os.path.join(path, "images.bin"))
    ds.labels.astype("<u2").tofile(os.path.join(path, "labels.bin"))


def load_dataset(path, split_tag="train"):
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    count, side = meta["count"], meta["side"]
    images = np.fromfile(os.path.join(path, "images.bin"), dtype="<f4")
    images = images.reshape(count, 3, side, side)
    labels = np.fromfile(os.path.join(path, "labels.bin"), dtype="<u2")
    ids = np.arange(count, dtype=np.int64)
    return Dataset(images, labels, ids, meta["class_count"], split_tag)
