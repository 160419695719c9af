"""Trigger functions and the poisoning engine.

Three trigger families: a bottom-right checkerboard patch, a seeded-noise
blend overlay, and a smooth displacement-field warp.  The poisoning engine
stamps triggers onto a sampled subset of a dataset, rewrites labels for
backdoor items (cover items keep theirs), and records ground-truth masks.
"""
import json
import os
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from . import data as data_mod
from ._seeds import make_rng

TRIGGER_KINDS = ("patch", "blend", "warp")


@dataclass
class TriggerSpec:
    kind: str
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise ValueError(f"unknown trigger kind {self.kind!r}")
        p = self.params
        if self.kind == "patch":
            p.setdefault("size", 3)
            p.setdefault("offset", 0)
            p.setdefault("parity", 0)
            if p["size"] < 1 or p["offset"] < 0:
                raise ValueError("patch size/offset invalid")
        elif self.kind == "blend":
            p.setdefault("alpha", 0.2)
            p.setdefault("pattern_seed", 0)
            if not 0.0 < p["alpha"] <= 1.0:
                raise ValueError(f"alpha must be in (0,1], got {p['alpha']}")
        else:
            p.setdefault("grid", 4)
            p.setdefault("strength", 2.0)
            p.setdefault("seed", 0)
            if p["strength"] <= 0:
                raise ValueError("warp strength must be > 0")


@dataclass
class PoisonSpec:
    trigger: TriggerSpec
    target_label: int
    poison_ratio: float
    cover_ratio: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.poison_ratio < 0 or self.cover_ratio < 0:
            raise ValueError("ratios must be nonnegative")
        if self.poison_ratio + self.cover_ratio > 1.0:
            raise ValueError("poison_ratio + cover_ratio exceeds 1")

    def to_json(self):
        return {"trigger": {"kind": self.trigger.kind, "params": self.trigger.params},
                "target_label": self.target_label,
                "poison_ratio": self.poison_ratio,
                "cover_ratio": self.cover_ratio,
                "seed": self.seed}

    @classmethod
    def from_json(cls, d):
        trig = TriggerSpec(d["trigger"]["kind"], dict(d["trigger"]["params"]))
        return cls(trig, d["target_label"], d["poison_ratio"],
                   d.get("cover_ratio", 0.0), d.get("seed", 0))


@dataclass
class PoisonedDataset:
    dataset: data_mod.Dataset
    backdoor_mask: np.ndarray  # bool [n]
    cover_mask: np.ndarray     # bool [n]
    spec: PoisonSpec


def _checker(size, parity):
    i, j = np.meshgrid(np.arange(size), np.arange(size), indexing="ij")
    return ((i + j + parity) % 2 == 0).astype(np.float32)


def apply_patch_trigger(image, spec):
    if spec.kind != "patch":
        raise ValueError("patch trigger expected")
    s, off = spec.params["size"], spec.params["offset"]
    px = image.pixels
    side = px.shape[1]
    if off + s > side:
        raise ValueError(f"{s}x{s} patch at offset {off} exceeds side {side}")
    out = px.copy()
    block = _checker(s, spec.params["parity"])
    r0, r1 = side - off - s, side - off
    out[:, r0:r1, r0:r1] = block  # bottom-right corner, all channels
    return data_mod.LabeledImage(out, image.label, image.id)


def blend_pattern(pattern_seed, side):
    rng = make_rng(pattern_seed, "blend-pattern")
    return rng.random((3, side, side)).astype(np.float32)


def apply_blend_trigger(image, spec):
    if spec.kind != "blend":
        raise ValueError("blend trigger expected")
    alpha = spec.params["alpha"]
    pat = blend_pattern(spec.params["pattern_seed"], image.pixels.shape[1])
    if pat.shape != image.pixels.shape:
        raise ValueError("pattern/image shape mismatch")
    out = np.clip((1.0 - alpha) * image.pixels + alpha * pat, 0.0, 1.0)
    return data_mod.LabeledImage(out.astype(np.float32), image.label, image.id)


def warp_field(spec, side):
    """Dense per-pixel displacement field [2, side, side], in pixels,
    clipped to +/- strength."""
    g = spec.params["grid"]
    strength = spec.params["strength"]
    rng = make_rng(spec.params["seed"], "warp-field")
    coarse = rng.uniform(-strength, strength, (2, g, g))
    dense = ndimage.zoom(coarse, (1, side / g, side / g), order=3)
    return np.clip(dense, -strength, strength).astype(np.float32)


def apply_warp_trigger(image, spec):
    if spec.kind != "warp":
        raise ValueError("warp trigger expected")
    px = image.pixels
    side = px.shape[1]
    fld = warp_field(spec, side)
    yy, xx = np.meshgrid(np.arange(side, dtype=np.float32),
                         np.arange(side, dtype=np.float32), indexing="ij")
    sy = np.clip(yy + fld[0], 0.0, side - 1.0)
    sx = np.clip(xx + fld[1], 0.0, side - 1.0)
    y0 = np.floor(sy).astype(np.int64)
    x0 = np.floor(sx).astype(np.int64)
    y1 = np.minimum(y0 + 1, side - 1)
    x1 = np.minimum(x0 + 1, side - 1)
    wy = (sy - y0).astype(np.float32)
    wx = (sx - x0).astype(np.float32)
    out = ((1 - wy) * (1 - wx) * px[:, y0, x0] + (1 - wy) * wx * px[:, y0, x1] +
           wy * (1 - wx) * px[:, y1, x0] + wy * wx * px[:, y1, x1])
    return data_mod.LabeledImage(np.clip(out, 0.0, 1.0).astype(np.float32),
                                 image.label, image.id)


_APPLY = {"patch": apply_patch_trigger, "blend": apply_blend_trigger,
          "warp": apply_warp_trigger}


def apply_trigger(image, spec):
    return _APPLY[spec.kind](image, spec)


def poison_dataset(clean, spec):
    """Stamp the trigger onto round(poison_ratio*N) uniformly sampled items
    (labels rewritten to the target) plus round(cover_ratio*N) further items
    (labels kept)."""
    n = len(clean)
    if spec.target_label >= clean.class_count:
        raise ValueError("target_label out of range")
    n_bd = int(np.rint(spec.poison_ratio * n))
    n_cov = int(np.rint(spec.cover_ratio * n))
    if n_bd + n_cov > n:
        raise ValueError("poison + cover counts exceed dataset size")
    rng = make_rng(spec.seed, "poison-pick")
    perm = rng.permutation(n)
    bd_idx, cov_idx = perm[:n_bd], perm[n_bd:n_bd + n_cov]
    ds = clean.copy()
    for i in np.concatenate([bd_idx, cov_idx]):
        ds.images[i] = apply_trigger(clean.item(i), spec.trigger).pixels
    ds.labels[bd_idx] = spec.target_label
    backdoor = np.zeros(n, dtype=bool)
    cover = np.zeros(n, dtype=bool)
    backdoor[bd_idx] = True
    cover[cov_idx] = True
    return PoisonedDataset(ds, backdoor, cover, spec)


def save_poisoned(poisoned, path):
    data_mod.save_dataset(poisoned.dataset, path)
    meta = poisoned.spec.to_json()
    meta["backdoor_ids"] = poisoned.dataset.ids[poisoned.backdoor_mask].tolist()
    meta["cover_ids"] = poisoned.dataset.ids[poisoned.cover_mask].tolist()
    with open(os.path.join(path, "poison_meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")


def load_poisoned(path):
    ds = data_mod.load_dataset(path)
    with open(os.path.join(path, "poison_meta.json")) as f:
        meta = json.load(f)
    spec = PoisonSpec.from_json(meta)
    backdoor = np.isin(ds.ids, meta["backdoor_ids"])
    cover = np.isin(ds.ids, meta["cover_ids"])
    return PoisonedDataset(ds, backdoor, cover, spec)
