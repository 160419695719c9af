"""Small residual CNN with inference-time dropout injection points.

Activations are held as (channels, height, width, batch) float32 so the conv
backends see a contiguous batch axis.  Dropout sites sit after each residual
addition, before the activation; masks are Bernoulli-keep draws seeded from
(seed, pass index, site index) so every batch in a pass sees the same mask.
"""
import copy
import json
import logging
import os
from dataclasses import dataclass, field, asdict

import numpy as np

from . import attacks
from ._seeds import make_rng
from .backends import conv3x3_fw, conv3x3_dw

log = logging.getLogger(__name__)


@dataclass
class DropoutConfig:
    """Inference-time dropout: each site activation is zeroed with
    probability p; survivors are NOT rescaled unless rescale is set.
    p may be None in a config template until rate selection fills it."""
    p: float
    k: int = 3
    seed: int = 0
    per_sample: bool = False
    rescale: bool = False

    def __post_init__(self):
        if self.p is not None and not 0.0 <= self.p <= 1.0:
            raise ValueError(f"p must be in [0,1], got {self.p}")
        if self.k < 1:
            raise ValueError("k must be >= 1")


@dataclass
class ArchSpec:
    stage_widths: tuple = (16, 32, 64)
    blocks_per_stage: int = 1
    class_count: int = 10
    in_channels: int = 3
    dropout_sites: str = "post_residual"

    def __post_init__(self):
        self.stage_widths = tuple(int(w) for w in self.stage_widths)
        if len(self.stage_widths) < 1 or any(w < 1 for w in self.stage_widths):
            raise ValueError("need >=1 stage with positive widths")
        if self.blocks_per_stage < 1:
            raise ValueError("blocks_per_stage must be >= 1")
        if self.dropout_sites != "post_residual":
            raise ValueError("only post-residual dropout sites are supported")

    @property
    def site_count(self):
        return len(self.stage_widths) * self.blocks_per_stage

    def to_json(self):
        d = asdict(self)
        d["stage_widths"] = list(self.stage_widths)
        return d

    @classmethod
    def from_json(cls, d):
        return cls(**{**d, "stage_widths": tuple(d["stage_widths"])})


@dataclass
class TrainConfig:
    epochs: int = 20
    learning_rate: float = 0.05
    decay_epochs: tuple = (10, 15)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    augmentation: bool = False
    normalization: bool = False
    seed: int = 0
    checkpoint_epochs: tuple = ()

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be > 0")
        self.decay_epochs = tuple(self.decay_epochs)
        self.checkpoint_epochs = tuple(self.checkpoint_epochs)


@dataclass
class AdaptiveAttackConfig:
    alpha: float = 0.5
    ada_interval: int = 50
    psu_config: DropoutConfig = field(
        default_factory=lambda: DropoutConfig(p=0.5, k=3, seed=0))

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must be in [0,1]")
        if self.ada_interval < 1:
            raise ValueError("ada_interval must be >= 1")


@dataclass
class ModelCheckpoint:
    arch: ArchSpec
    params: dict
    seed: int
    epoch: int = 0
    norm: tuple = None  # (mean[3], std[3]) when trained with normalization

    def copy(self):
        return ModelCheckpoint(self.arch, {k: v.copy() for k, v in self.params.items()},
                               self.seed, self.epoch,
                               None if self.norm is None else
                               (self.norm[0].copy(), self.norm[1].copy()))


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch, detail):
        super().__init__(f"training diverged at epoch {epoch}: {detail}")
        self.epoch = epoch


def _block_plan(arch):
    """Yield (key, in_ch, out_ch, stride, has_projection) in forward order."""
    prev = arch.stage_widths[0]
    for i, width in enumerate(arch.stage_widths):
        for j in range(arch.blocks_per_stage):
            in_ch = prev if j == 0 else width
            stride = 2 if (i > 0 and j == 0) else 1
            proj = stride != 1 or in_ch != width
            yield f"s{i}.b{j}", in_ch, width, stride, proj
        prev = width


def build_model(arch, seed, dtype=np.float32):
    rng = make_rng(seed, "init")
    params = {}

    def he(shape, fan_in):
        w = rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)
        return w.astype(dtype)

    params["stem.w"] = he((arch.stage_widths[0], arch.in_channels, 3, 3),
                          arch.in_channels * 9)
    params["stem.b"] = np.zeros(arch.stage_widths[0], dtype=dtype)
    for key, in_ch, out_ch, stride, proj in _block_plan(arch):
        params[f"{key}.conv1.w"] = he((out_ch, in_ch, 3, 3), in_ch * 9)
        params[f"{key}.conv1.b"] = np.zeros(out_ch, dtype=dtype)
        params[f"{key}.conv2.w"] = he((out_ch, out_ch, 3, 3), out_ch * 9)
        params[f"{key}.conv2.b"] = np.zeros(out_ch, dtype=dtype)
        if proj:
            params[f"{key}.short.w"] = he((out_ch, in_ch), in_ch)
            params[f"{key}.short.b"] = np.zeros(out_ch, dtype=dtype)
    params["head.w"] = he((arch.class_count, arch.stage_widths[-1]),
                          arch.stage_widths[-1])
    params["head.b"] = np.zeros(arch.class_count, dtype=dtype)
    return ModelCheckpoint(arch, params, seed=int(seed), epoch=0)


def _pad1(x):
    c, h, w, n = x.shape
    xp = np.zeros((c, h + 2, w + 2, n), dtype=x.dtype)
    xp[:, 1:-1, 1:-1, :] = x
    return xp


def _softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _site_mask(cfg, pass_index, site_index, shape, sample_ids, dtype):
    """Bernoulli keep-mask for one dropout site.  Shared mode draws one
    (C,H,W) realization for the whole pass; per-sample mode reseeds with the
    sample id."""
    c, h, w, n = shape
    if cfg.per_sample:
        if sample_ids is None:
            raise ValueError("per-sample masks need sample_ids")
        m = np.empty((c, h, w, n), dtype=dtype)
        for col, sid in enumerate(sample_ids):
            r = np.random.default_rng(np.random.SeedSequence(
                [int(cfg.seed), int(pass_index), int(site_index), int(sid)]))
            m[:, :, :, col] = r.random((c, h, w)) >= cfg.p
    else:
        r = np.random.default_rng(np.random.SeedSequence(
            [int(cfg.seed), int(pass_index), int(site_index)]))
        m = (r.random((c, h, w)) >= cfg.p).astype(dtype)[:, :, :, None]
    if cfg.rescale and cfg.p < 1.0:
        m = (m / (1.0 - cfg.p)).astype(dtype, copy=False)
    return m


def _run(model, batch, dropout=None, pass_index=0, sample_ids=None,
         want_cache=False, want_features=False):
    arch, P = model.arch, model.params
    dtype = P["stem.w"].dtype
    batch = np.asarray(batch, dtype=dtype)
    if batch.ndim != 4 or batch.shape[1] != arch.in_channels:
        raise ValueError(f"batch shape {batch.shape} does not match arch")
    x = np.ascontiguousarray(batch.transpose(1, 2, 3, 0))
    if model.norm is not None:
        mean, std = model.norm
        x = (x - mean.astype(dtype)[:, None, None, None]) \
            / std.astype(dtype)[:, None, None, None]
    cache = {"blocks": []} if want_cache else None

    xp = _pad1(x)
    a = np.maximum(conv3x3_fw(xp, P["stem.w"], P["stem.b"], 1), 0)
    if want_cache:
        cache["stem"] = (xp, a)

    site = 0
    if dropout is not None and dropout.p is None:
        raise ValueError("dropout rate p has not been selected")
    drop_active = dropout is not None and dropout.p > 0.0
    for key, in_ch, out_ch, stride, proj in _block_plan(arch):
        xp1 = _pad1(a)
        a1 = np.maximum(conv3x3_fw(xp1, P[f"{key}.conv1.w"], P[f"{key}.conv1.b"],
                                   stride), 0)
        xp2 = _pad1(a1)
        z2 = conv3x3_fw(xp2, P[f"{key}.conv2.w"], P[f"{key}.conv2.b"], 1)
        if proj:
            xg = a[:, ::stride, ::stride, :]
            sc = (P[f"{key}.short.w"] @ xg.reshape(in_ch, -1)).reshape(z2.shape) \
                + P[f"{key}.short.b"][:, None, None, None]
        else:
            xg, sc = None, a
        s = z2 + sc
        mask = None
        if drop_active:
            mask = _site_mask(dropout, pass_index, site, s.shape, sample_ids, dtype)
            s = s * mask
        out = np.maximum(s, 0)
        if want_cache:
            cache["blocks"].append(
                {"key": key, "stride": stride, "xp1": xp1, "a1": a1,
                 "xp2": xp2, "xg": xg, "mask": mask, "out": out,
                 "in_shape": a.shape})
        a = out
        site += 1

    feat = a.mean(axis=(1, 2)).T  # [N, width]
    logits = feat @ P["head.w"].T + P["head.b"]
    result = {"logits": logits, "probs": _softmax(logits), "feat": feat}
    if want_cache:
        cache["feat"] = feat
        cache["last"] = a
        result["cache"] = cache
    if want_features:
        result["pre_gap"] = np.ascontiguousarray(a.transpose(3, 0, 1, 2))
    return result


def forward(model, batch, dropout=None, pass_index=0, sample_ids=None):
    """Softmax confidences [B, class_count]."""
    return _run(model, batch, dropout, pass_index, sample_ids)["probs"]


def forward_features(model, batch, dropout=None, pass_index=0, sample_ids=None):
    """(confidences, final-stage activations [B,C,H,W], pooled features [B,C])."""
    r = _run(model, batch, dropout, pass_index, sample_ids, want_features=True)
    return r["probs"], r["pre_gap"], r["feat"]


def _conv_transpose(gy, w, stride, in_hw):
    """Gradient wrt the input of a 3x3 pad-1 convolution."""
    ci = w.shape[1]
    wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
    if stride == 1:
        g = gy
    else:
        co, ho, wo, n = gy.shape
        g = np.zeros((co, in_hw[0], in_hw[1], n), dtype=gy.dtype)
        g[:, ::stride, ::stride, :] = gy
    zb = np.zeros(ci, dtype=gy.dtype)
    return conv3x3_fw(_pad1(g), wt, zb, 1)


def _backward(model, cache, dlogits):
    P = model.params
    grads = {}
    feat = cache["feat"]
    grads["head.w"] = dlogits.T @ feat
    grads["head.b"] = dlogits.sum(axis=0)
    dfeat = dlogits @ P["head.w"]

    a_last = cache["last"]
    c, h, w, n = a_last.shape
    d = np.empty_like(a_last)
    d[:] = dfeat.T[:, None, None, :] / (h * w)

    for blk in reversed(cache["blocks"]):
        key = blk["key"]
        ds = d * (blk["out"] > 0)
        if blk["mask"] is not None:
            ds = ds * blk["mask"]
        grads[f"{key}.conv2.w"] = conv3x3_dw(blk["xp2"], ds, 1)
        grads[f"{key}.conv2.b"] = ds.sum(axis=(1, 2, 3))
        da1 = _conv_transpose(ds, P[f"{key}.conv2.w"], 1, blk["a1"].shape[1:3])
        dz1 = da1 * (blk["a1"] > 0)
        grads[f"{key}.conv1.w"] = conv3x3_dw(blk["xp1"], dz1, blk["stride"])
        grads[f"{key}.conv1.b"] = dz1.sum(axis=(1, 2, 3))
        dx = _conv_transpose(dz1, P[f"{key}.conv1.w"], blk["stride"],
                             blk["in_shape"][1:3])
        if blk["xg"] is not None:
            xg = blk["xg"]
            in_ch, co = xg.shape[0], ds.shape[0]
            ds_flat = ds.reshape(co, -1)
            grads[f"{key}.short.w"] = ds_flat @ xg.reshape(in_ch, -1).T
            grads[f"{key}.short.b"] = ds.sum(axis=(1, 2, 3))
            dxg = (P[f"{key}.short.w"].T @ ds_flat).reshape(xg.shape)
            dx[:, ::blk["stride"], ::blk["stride"], :] += dxg
        else:
            dx += ds
        d = dx

    xp0, a0 = cache["stem"]
    dz0 = d * (a0 > 0)
    grads["stem.w"] = conv3x3_dw(xp0, dz0, 1)
    grads["stem.b"] = dz0.sum(axis=(1, 2, 3))
    return grads


def loss_and_grads(model, batch, labels, dropout=None, pass_index=0):
    """Mean cross-entropy and parameter gradients for one batch."""
    r = _run(model, batch, dropout, pass_index, want_cache=True)
    logits = r["logits"]
    z = logits - logits.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    b = logits.shape[0]
    rows = np.arange(b)
    loss = float(-logp[rows, labels].mean())
    dlogits = np.exp(logp)
    dlogits[rows, labels] -= 1.0
    dlogits /= b
    return loss, _backward(model, r["cache"], dlogits), r["probs"]


def _grad_mean_pc(probs, classes, scale):
    """dlogits for scale * mean_n probs[n, classes[n]]."""
    b = probs.shape[0]
    rows = np.arange(b)
    pc = probs[rows, classes]
    d = -probs * pc[:, None]
    d[rows, classes] += pc
    return d * (scale / b)


def _augment_batch(xb, rng):
    b, c, h, w = xb.shape
    padded = np.zeros((b, c, h + 8, w + 8), dtype=xb.dtype)
    padded[:, :, 4:-4, 4:-4] = xb
    oy = rng.integers(0, 9, size=b)
    ox = rng.integers(0, 9, size=b)
    flip = rng.random(b) < 0.5
    out = np.empty_like(xb)
    for i in range(b):
        crop = padded[i, :, oy[i]:oy[i] + h, ox[i]:ox[i] + w]
        out[i] = crop[:, :, ::-1] if flip[i] else crop
    return out


def _as_dataset(data):
    return data.dataset if isinstance(data, attacks.PoisonedDataset) else data


def _train_loop(model, data, cfg, ada=None):
    ds = _as_dataset(data)
    if int(ds.labels.max(initial=0)) >= model.arch.class_count:
        raise ValueError("labels exceed arch.class_count")
    work = model.copy()
    work.seed = cfg.seed
    if cfg.normalization:
        mean = ds.images.mean(axis=(0, 2, 3)).astype(np.float32)
        std = np.maximum(ds.images.std(axis=(0, 2, 3)), 1e-6).astype(np.float32)
        work.norm = (mean, std)
    params = work.params
    trainable = sorted(params.keys())
    vel = {k: np.zeros_like(params[k]) for k in trainable}
    rng = make_rng(cfg.seed, "train")
    images = ds.images
    labels = ds.labels.astype(np.int64)
    n = len(ds)
    alpha = 0.0 if ada is None else ada.alpha
    held_lada = 0.0
    refresh_count = 0
    it = 0
    checkpoints = []
    history = []
    for epoch in range(cfg.epochs):
        lr = cfg.learning_rate * cfg.decay_factor ** sum(
            1 for m in cfg.decay_epochs if epoch >= m)
        perm = rng.permutation(n)
        epoch_loss = 0.0
        for b0 in range(0, n, cfg.batch_size):
            idx = perm[b0:b0 + cfg.batch_size]
            xb = images[idx]
            if cfg.augmentation:
                xb = _augment_batch(xb, rng)
            loss, grads, _ = loss_and_grads(work, xb, labels[idx])
            if not np.isfinite(loss):
                raise TrainingDiverged(epoch, f"loss={loss}")
            if alpha > 0.0:
                if it % ada.ada_interval == 0:
                    held_lada, g_ada = _psu_loss_and_grads(
                        work, xb, ada.psu_config, refresh_count)
                    refresh_count += 1
                    for k in trainable:
                        grads[k] = (1.0 - alpha) * grads[k] + alpha * g_ada[k]
                else:
                    for k in trainable:
                        grads[k] = (1.0 - alpha) * grads[k]
                loss = (1.0 - alpha) * loss + alpha * held_lada
            for k in trainable:
                g = grads[k] + cfg.weight_decay * params[k]
                vel[k] = cfg.momentum * vel[k] + g
                params[k] -= lr * vel[k]
            epoch_loss += loss * len(idx)
            it += 1
        history.append({"epoch": epoch + 1, "loss": epoch_loss / n, "lr": lr})
        if any(not np.isfinite(params[k]).all() for k in trainable):
            raise TrainingDiverged(epoch, "non-finite parameters")
        work.epoch = epoch + 1
        if (epoch + 1) in cfg.checkpoint_epochs or epoch + 1 == cfg.epochs:
            checkpoints.append(work.copy())
    checkpoints[-1].history = history
    return checkpoints


def _psu_loss_and_grads(model, xb, psu_cfg, refresh_index):
    """Mean batch PSU and its parameter gradient (base class held fixed)."""
    base = _run(model, xb, want_cache=True)
    q = base["probs"]
    classes = q.argmax(axis=1)
    rows = np.arange(q.shape[0])
    lada = float(q[rows, classes].mean())
    grads = _backward(model, base["cache"], _grad_mean_pc(q, classes, 1.0))
    k = psu_cfg.k
    for i in range(k):
        pass_index = refresh_index * k + i
        r = _run(model, xb, psu_cfg, pass_index, want_cache=True)
        qi = r["probs"]
        lada -= float(qi[rows, classes].mean()) / k
        gi = _backward(model, r["cache"], _grad_mean_pc(qi, classes, -1.0 / k))
        for name in grads:
            grads[name] += gi[name]
    return lada, grads


def train(model, data, cfg):
    """SGD with momentum, coupled weight decay, and step LR decay.
    Returns checkpoints at cfg.checkpoint_epochs plus the final epoch."""
    return _train_loop(model, data, cfg, ada=None)


def train_adaptive_attacker(model, data, cfg, ada):
    """Train against the dropout detector: total loss
    (1-alpha)*cross_entropy + alpha*mean_batch_psu, the PSU term refreshed
    every ada.ada_interval iterations and held constant between refreshes
    (its gradient contributes only on refresh iterations)."""
    return _train_loop(model, data, cfg, ada=ada)


def predict_probs(model, images, batch_size=512, dropout=None, pass_index=0,
                  sample_ids=None):
    outs = []
    for b0 in range(0, len(images), batch_size):
        sid = None if sample_ids is None else sample_ids[b0:b0 + batch_size]
        outs.append(forward(model, images[b0:b0 + batch_size], dropout,
                            pass_index, sid))
    return np.concatenate(outs, axis=0)


def evaluate(model, dataset, batch_size=512):
    probs = predict_probs(model, dataset.images, batch_size)
    return float((probs.argmax(axis=1) == dataset.labels).mean())


def attack_success_rate(model, dataset, trigger, target_label, batch_size=512):
    """Fraction of triggered non-target-class images classified as the target."""
    keep = dataset.labels != target_label
    if not keep.any():
        raise ValueError("no non-target samples to trigger")
    stamped = np.stack([
        attacks.apply_trigger(dataset.item(i), trigger).pixels
        for i in np.flatnonzero(keep)])
    probs = predict_probs(model, stamped, batch_size)
    return float((probs.argmax(axis=1) == target_label).mean())


def save_checkpoint(model, path):
    os.makedirs(path, exist_ok=True)
    names = sorted(model.params.keys())
    meta = {"arch": model.arch.to_json(), "epoch": model.epoch,
            "seed": model.seed,
            "params": {k: list(model.params[k].shape) for k in names},
            "norm": None if model.norm is None else
            {"mean": model.norm[0].tolist(), "std": model.norm[1].tolist()}}
    with open(os.path.join(path, "meta.json"), "w") as f:
        json.dump(meta, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(os.path.join(path, "weights.bin"), "wb") as f:
        for k in names:
            f.write(np.ascontiguousarray(model.params[k], dtype="<f4").tobytes())


def load_checkpoint(path):
    with open(os.path.join(path, "meta.json")) as f:
        meta = json.load(f)
    arch = ArchSpec.from_json(meta["arch"])
    raw = np.fromfile(os.path.join(path, "weights.bin"), dtype="<f4")
    params = {}
    off = 0
    for name in sorted(meta["params"].keys()):
        shape = tuple(meta["params"][name])
        size = int(np.prod(shape))
        params[name] = raw[off:off + size].reshape(shape).astype(np.float32)
        off += size
    if off != raw.size:
        raise ValueError(f"weights.bin holds {raw.size} floats, expected {off}")
    norm = None
    if meta.get("norm"):
        norm = (np.asarray(meta["norm"]["mean"], dtype=np.float32),
                np.asarray(meta["norm"]["std"], dtype=np.float32))
    return ModelCheckpoint(arch, params, meta["seed"], meta["epoch"], norm)
