"""Slow independent oracles used by the acceptance suite.

The forward pass here is a deliberate reimplementation: float64, explicit
window loops, masks passed in as arrays instead of drawn from seeds.  It
must never import the backend kernels, so disagreement with the package
points at the package.
"""
import itertools
from dataclasses import dataclass

import numpy as np

from shiftscan import nets

# ------------------------------------------------------------------ toy net
# One stage, one block, 1x1 images: every 3x3 convolution degenerates to its
# center tap, so the whole network is a chain of small matrix maps with a
# single maskable site of TOY_WIDTH activations.

TOY_WIDTH = 10
TOY_CLASSES = 4


@dataclass
class _ToyData:
    images: np.ndarray  # [n, 3, 1, 1]
    ids: np.ndarray

    def __len__(self):
        return len(self.images)


def toy_model(seed):
    arch = nets.ArchSpec(stage_widths=(TOY_WIDTH,), blocks_per_stage=1,
                         class_count=TOY_CLASSES)
    return nets.build_model(arch, seed)


def toy_dataset(n, seed):
    rng = np.random.default_rng(seed)
    images = rng.random((n, 3, 1, 1)).astype(np.float32)
    return _ToyData(images, np.arange(n))


def toy_probs(params, x, mask):
    """Manual center-tap forward of one pixel vector under a keep mask."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in params.items()}
    x = np.asarray(x, dtype=np.float64)
    a0 = np.maximum(P["stem.w"][:, :, 1, 1] @ x + P["stem.b"], 0.0)
    a1 = np.maximum(P["s0.b0.conv1.w"][:, :, 1, 1] @ a0
                    + P["s0.b0.conv1.b"], 0.0)
    z2 = P["s0.b0.conv2.w"][:, :, 1, 1] @ a1 + P["s0.b0.conv2.b"]
    out = np.maximum((z2 + a0) * np.asarray(mask, dtype=np.float64), 0.0)
    logits = P["head.w"] @ out + P["head.b"]
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def enumerate_expectations(model, ds, p):
    """Exact sigma / per-sample PSU / per-sample MC-Dropout std of the toy
    net over all 2**TOY_WIDTH keep patterns of its one mask site."""
    n = len(ds)
    base = np.stack([toy_probs(model.params, ds.images[i, :, 0, 0],
                               np.ones(TOY_WIDTH)) for i in range(n)])
    base_cls = base.argmax(axis=1)
    shift_prob = np.zeros(n)
    exp_conf = np.zeros((n, TOY_CLASSES))
    exp_conf2 = np.zeros((n, TOY_CLASSES))
    for bits in itertools.product((0.0, 1.0), repeat=TOY_WIDTH):
        mask = np.array(bits)
        kept = mask.sum()
        weight = (1.0 - p) ** kept * p ** (TOY_WIDTH - kept)
        for i in range(n):
            probs = toy_probs(model.params, ds.images[i, :, 0, 0], mask)
            if probs.argmax() != base_cls[i]:
                shift_prob[i] += weight
            exp_conf[i] += weight * probs
            exp_conf2[i] += weight * probs ** 2
    rows = np.arange(n)
    mean_cls = exp_conf.argmax(axis=1)
    mean = exp_conf[rows, mean_cls]
    return {"sigma": float(shift_prob.mean()),
            "psu": base[rows, base_cls] - exp_conf[rows, base_cls],
            "mc_std": np.sqrt(np.maximum(
                exp_conf2[rows, mean_cls] - mean ** 2, 0.0))}


# --------------------------------------------------------- general residual

def _conv3x3(x, w, b, stride):
    """Same-padded 3x3 cross-correlation on one [ci, h, w] float64 image."""
    ci, h, wd = x.shape
    xp = np.zeros((ci, h + 2, wd + 2), dtype=np.float64)
    xp[:, 1:-1, 1:-1] = x
    co = w.shape[0]
    ho = (h - 1) // stride + 1
    wo = (wd - 1) // stride + 1
    out = np.empty((co, ho, wo), dtype=np.float64)
    for i in range(ho):
        for j in range(wo):
            win = xp[:, i * stride:i * stride + 3, j * stride:j * stride + 3]
            out[:, i, j] = np.tensordot(w, win, axes=([1, 2, 3], [0, 1, 2]))
    return out + b[:, None, None]


def probe_site_shapes(model, side):
    """(channels, height, width) of every maskable block output, in forward
    order, for a given input side."""
    h = side
    shapes = []
    for _key, _ci, co, stride, _proj in nets._block_plan(model.arch):
        h = (h - 1) // stride + 1
        shapes.append((co, h, h))
    return shapes


def naive_probs(model, image, masks=None):
    """Forward one [c, side, side] image with explicit keep masks (one
    float array per block, or None for no dropout)."""
    P = {k: np.asarray(v, dtype=np.float64) for k, v in model.params.items()}
    x = np.asarray(image, dtype=np.float64)
    a = np.maximum(_conv3x3(x, P["stem.w"], P["stem.b"], 1), 0.0)
    for site, (key, ci, _co, stride, proj) in \
            enumerate(nets._block_plan(model.arch)):
        a1 = np.maximum(_conv3x3(a, P[f"{key}.conv1.w"],
                                 P[f"{key}.conv1.b"], stride), 0.0)
        z2 = _conv3x3(a1, P[f"{key}.conv2.w"], P[f"{key}.conv2.b"], 1)
        if proj:
            xg = a[:, ::stride, ::stride]
            sc = (P[f"{key}.short.w"] @ xg.reshape(ci, -1)).reshape(z2.shape) \
                + P[f"{key}.short.b"][:, None, None]
        else:
            sc = a
        s = z2 + sc
        if masks is not None:
            s = s * masks[site]
        a = np.maximum(s, 0.0)
    feat = a.mean(axis=(1, 2))
    logits = P["head.w"] @ feat + P["head.b"]
    z = logits - logits.max()
    e = np.exp(z)
    return e / e.sum()


def enumerate_mask_stats(model, images, side, p):
    """Exact per-sample expectations over every keep/drop pattern of every
    maskable activation: shift probability, mean confidence vector, and the
    per-class second moment (for the MC-Dropout std target).

    Cost is 2**m forward passes per image, so m (total maskable
    activations) must stay small.
    """
    shapes = probe_site_shapes(model, side)
    sizes = [int(np.prod(s)) for s in shapes]
    m = int(sum(sizes))
    if m > 20:
        raise ValueError(f"{m} maskable activations is too many to enumerate")
    n = len(images)
    cc = model.arch.class_count
    base = np.stack([naive_probs(model, img) for img in images])
    base_cls = base.argmax(axis=1)

    shift_prob = np.zeros(n)
    exp_conf = np.zeros((n, cc))
    exp_conf2 = np.zeros((n, cc))
    for bits in itertools.product((0.0, 1.0), repeat=m):
        kept = sum(bits)
        weight = (1.0 - p) ** kept * p ** (m - kept)
        if weight == 0.0:
            continue
        masks, at = [], 0
        for shape, size in zip(shapes, sizes):
            masks.append(np.array(bits[at:at + size]).reshape(shape))
            at += size
        for i in range(n):
            probs = naive_probs(model, images[i], masks)
            if probs.argmax() != base_cls[i]:
                shift_prob[i] += weight
            exp_conf[i] += weight * probs
            exp_conf2[i] += weight * probs ** 2
    return {"base": base, "base_class": base_cls, "shift_prob": shift_prob,
            "exp_conf": exp_conf, "exp_conf2": exp_conf2,
            "activation_count": m}


def exact_sigma(stats):
    return float(stats["shift_prob"].mean())


def exact_psu(stats):
    rows = np.arange(len(stats["base"]))
    cls = stats["base_class"]
    return stats["base"][rows, cls] - stats["exp_conf"][rows, cls]


def exact_mc_dropout_std(stats):
    """Std, under the exact mask distribution, of the confidence in the
    class with the highest expected confidence (the estimator's target)."""
    rows = np.arange(len(stats["base"]))
    cls = stats["exp_conf"].argmax(axis=1)
    mean = stats["exp_conf"][rows, cls]
    second = stats["exp_conf2"][rows, cls]
    return np.sqrt(np.maximum(second - mean ** 2, 0.0))
