"""End-to-end acceptance suite for the bundled desk recipes.

Each bundled config is executed once per session through the real pipeline;
the tests below read the resulting artifacts.  Expect the whole module to
take on the order of 50 minutes on a laptop CPU: five full experiments are
trained and scored from scratch, nothing is stubbed.
"""
import json
import os
import time
from fractions import Fraction

import numpy as np
import pytest

import oracle_tools
from shiftscan import attacks, cli, data, detect, nets, report, uncertainty
from shiftscan.cli import load_config, seed_for
from shiftscan.nets import DropoutConfig


# ------------------------------------------------------------ fixtures

@pytest.fixture(scope="session")
def run_root(tmp_path_factory):
    return tmp_path_factory.mktemp("acceptance")


def _execute(name, out_dir):
    t0 = time.monotonic()
    run_dir = cli.run_experiment(load_config(name), str(out_dir))
    elapsed = time.monotonic() - t0
    with open(os.path.join(run_dir, "run.json")) as f:
        summary = json.load(f)
    return {"dir": run_dir, "seconds": elapsed, "summary": summary,
            "config": load_config(os.path.join(run_dir, "config.json"))}


@pytest.fixture(scope="session")
def patch_run(run_root):
    return _execute("patch_desk", run_root)


@pytest.fixture(scope="session")
def blend_run(run_root):
    return _execute("blend_desk", run_root)


@pytest.fixture(scope="session")
def warp_run(run_root):
    return _execute("warp_desk", run_root)


@pytest.fixture(scope="session")
def benign_run(run_root):
    return _execute("benign_desk", run_root)


@pytest.fixture(scope="session")
def adaptive_run(run_root):
    return _execute("adaptive_patch_desk", run_root)


@pytest.fixture(scope="session")
def smoke_pair(run_root):
    first = _execute("smoke", run_root / "smoke1")
    second = _execute("smoke", run_root / "smoke2")
    return first, second


def _rebuild(cfg):
    """Recreate the datasets of a finished run from its resolved config."""
    dp = cfg.dataset
    train_clean = data.synth_dataset(seed_for(cfg.seed, "data-train"),
                                     dp.per_class, dp.class_count, dp.side)
    pool = data.synth_dataset(seed_for(cfg.seed, "data-pool"),
                              dp.val_pool_per_class, dp.class_count, dp.side)
    clean_val, _ = data.split_validation(pool, dp.val_fraction,
                                         seed_for(cfg.seed, "split"),
                                         train_size=len(train_clean))
    poisoned = None
    if cfg.poison is not None:
        poisoned = attacks.poison_dataset(train_clean, cfg.poison)
    return train_clean, clean_val, poisoned


def _final_model(run):
    return nets.load_checkpoint(os.path.join(run["dir"], "checkpoints",
                                             "final"))


def _detect_cfg(run, k=16):
    cfg = run["config"]
    return DropoutConfig(run["summary"]["selected_p"], k,
                         cfg.detection.dropout.seed)


# ------------------------------------------------------------ patch recipe

def test_patch_run_scale(patch_run):
    cfg = patch_run["config"]
    assert cfg.dataset.per_class * cfg.dataset.class_count == 5000
    assert cfg.dataset.val_pool_per_class * cfg.dataset.class_count == 1000
    assert cfg.poison.poison_ratio == 0.1
    assert cfg.train.epochs >= 20


def test_patch_training_quality(patch_run):
    s = patch_run["summary"]
    assert s["attack_success_rate"] >= 0.95
    assert s["clean_accuracy"] >= 0.85


def test_patch_detection_rates(patch_run):
    psbd = patch_run["summary"]["detectors"]["psbd"]
    assert psbd["tpr"] >= 0.90
    assert psbd["fpr"] <= 0.30


def test_patch_auroc(patch_run):
    assert patch_run["summary"]["detectors"]["psbd"]["auroc"] >= 0.90


def test_patch_runtime_budget(patch_run):
    assert patch_run["seconds"] <= 15 * 60


# ------------------------------------------------------------ blend / warp

def test_blend_detection_rate(blend_run):
    assert blend_run["summary"]["detectors"]["psbd"]["tpr"] >= 0.85


def test_warp_detection_rate(warp_run):
    assert warp_run["summary"]["detectors"]["psbd"]["tpr"] >= 0.85


def test_shift_detector_beats_mc_dropout(patch_run, blend_run, warp_run):
    runs = [patch_run, blend_run, warp_run]
    ours = np.mean([r["summary"]["detectors"]["psbd"]["tpr"] for r in runs])
    mc = np.mean([r["summary"]["detectors"]["mc_dropout"]["tpr"]
                  for r in runs])
    assert ours > mc


# ------------------------------------------------------------ shift curves

def test_benign_sigma_val_nondecreasing(benign_run):
    cfg = benign_run["config"]
    model = _final_model(benign_run)
    _, clean_val, _ = _rebuild(cfg)
    curves = detect.sigma_curves(model, {"val": clean_val},
                                 cfg.selection.p_grid, k=16,
                                 seed=cfg.detection.dropout.seed)
    sv = curves["sigma"]["val"]
    # Monte-Carlo estimates at k=16 may wobble; the trend must not drop by
    # more than the sampling tolerance between adjacent grid points.
    for a, b in zip(sv, sv[1:]):
        assert b >= a - 0.05


def test_patch_sigma_separation_at_selected_p(patch_run):
    model = _final_model(patch_run)
    _, clean_val, poisoned = _rebuild(patch_run["config"])
    bd = poisoned.dataset.subset(np.flatnonzero(poisoned.backdoor_mask))
    dc = _detect_cfg(patch_run)
    sigma_bd = uncertainty.shift_ratio(model, bd, dc).sigma
    sigma_val = uncertainty.shift_ratio(model, clean_val, dc).sigma
    assert sigma_bd < 0.2
    assert sigma_val >= 0.8


def test_patch_clean_val_shifts_land_on_target(patch_run):
    model = _final_model(patch_run)
    cfg = patch_run["config"]
    _, clean_val, _ = _rebuild(cfg)
    stats = uncertainty.shift_ratio(model, clean_val, _detect_cfg(patch_run))
    assert stats.destinations.sum() > 0
    modal = int(stats.destinations.argmax())
    intensity = stats.destinations[modal] / stats.destinations.sum()
    assert modal == cfg.poison.target_label
    assert intensity >= 0.5


# ------------------------------------------------------------ enumeration

def test_toy_mask_enumeration_matches_monte_carlo():
    arch = nets.ArchSpec(stage_widths=(2, 2), blocks_per_stage=1,
                         class_count=3)
    model = nets.build_model(arch, seed=9)
    rng = np.random.default_rng(5)
    images = rng.random((4, 3, 2, 2)).astype(np.float32)

    shapes = oracle_tools.probe_site_shapes(model, 2)
    assert sum(int(np.prod(s)) for s in shapes) <= 20

    naive_base = np.stack([oracle_tools.naive_probs(model, im)
                           for im in images])
    np.testing.assert_allclose(naive_base, nets.predict_probs(model, images),
                               atol=1e-5)

    for p in (0.3, 0.5):
        stats = oracle_tools.enumerate_mask_stats(model, images, 2, p)
        mc = DropoutConfig(p=p, k=4096, seed=77)
        sigma_mc = uncertainty.shift_ratio(model, images, mc).sigma
        _, psu_mc = uncertainty.psu_values(model, images, mc)
        std_mc = uncertainty.mc_dropout_uncertainty(model, images, mc)
        assert abs(sigma_mc - oracle_tools.exact_sigma(stats)) <= 0.02
        assert np.abs(psu_mc - oracle_tools.exact_psu(stats)).max() <= 0.02
        exact_std = oracle_tools.exact_mc_dropout_std(stats)
        assert np.abs(std_mc - exact_std).max() <= 0.02


# ------------------------------------------------------------ identities

def _toy_model_and_images():
    arch = nets.ArchSpec(stage_widths=(4, 5), blocks_per_stage=1,
                         class_count=4)
    model = nets.build_model(arch, seed=3)
    rng = np.random.default_rng(11)
    return model, rng.random((6, 3, 8, 8)).astype(np.float32)


def test_zero_rate_gives_zero_shift_and_zero_psu():
    model, images = _toy_model_and_images()
    dc = DropoutConfig(p=0.0, k=4, seed=1)
    assert uncertainty.shift_ratio(model, images, dc).sigma == 0.0
    _, psu = uncertainty.psu_values(model, images, dc)
    assert np.all(psu == 0.0)


def test_confidence_vectors_sum_to_one():
    model, images = _toy_model_and_images()
    for dc in (None, DropoutConfig(p=0.5, k=2, seed=4)):
        probs = nets.predict_probs(model, images, dropout=dc, pass_index=1)
        assert np.abs(probs.sum(axis=1) - 1.0).max() <= 1e-5


def test_gradient_check():
    arch = nets.ArchSpec(stage_widths=(4, 5), blocks_per_stage=1,
                         class_count=4)
    model = nets.build_model(arch, seed=3, dtype=np.float64)
    rng = np.random.default_rng(12)
    xb = rng.random((3, 3, 8, 8))
    yb = np.array([0, 2, 3])
    _, grads, _ = nets.loss_and_grads(model, xb, yb)
    # eps must stay well below the distance of any pre-ReLU value to its
    # kink; bias coordinates shift whole channels, so larger steps cross
    # activation boundaries and corrupt the finite difference
    eps, worst = 1e-7, 0.0
    pick = np.random.default_rng(0)
    for name in sorted(model.params):
        flat = model.params[name].reshape(-1)
        for idx in pick.choice(flat.size, size=min(4, flat.size),
                               replace=False):
            keep = flat[idx]
            flat[idx] = keep + eps
            lp, _, _ = nets.loss_and_grads(model, xb, yb)
            flat[idx] = keep - eps
            lm, _, _ = nets.loss_and_grads(model, xb, yb)
            flat[idx] = keep
            fd = (lp - lm) / (2 * eps)
            an = grads[name].reshape(-1)[idx]
            worst = max(worst, abs(fd - an) / max(abs(fd), abs(an), 1e-6))
    assert worst <= 1e-3


def test_metric_identities(patch_run):
    ms = patch_run["summary"]["detectors"]["psbd"]
    with open(os.path.join(patch_run["dir"], "detectors", "psbd",
                           "metrics.json")) as f:
        assert json.load(f)["tpr"] == ms["tpr"]

    # TPR + FNR = 1 as exact rational arithmetic on the run's counts
    rep = json.load(open(os.path.join(patch_run["dir"], "detectors", "psbd",
                                      "report.json")))
    counts = rep["metrics"]["counts"]
    tp, fn = counts["tp"], counts["fn"]
    assert Fraction(tp, tp + fn) + Fraction(fn, tp + fn) == 1
    # and in floating point on dyadic counts
    assert 3 / 4 + 1 / 4 == 1.0

    perfect = report.auroc_score(np.array([0.9, 0.8, 0.2, 0.1]),
                                 np.array([True, True, False, False]),
                                 orientation="upper")
    assert perfect == 1.0


# ------------------------------------------------------------ thresholds

def test_quartile_threshold_interpolation():
    t = detect.percentile_threshold([0.1, 0.2, 0.3, 0.4], 25.0)
    assert abs(t - 0.175) < 1e-12


def test_raising_percentile_never_shrinks_flag_set(smoke_pair):
    run = smoke_pair[0]
    cfg = run["config"]
    model = _final_model(run)
    _, clean_val, poisoned = _rebuild(cfg)
    previous = None
    for pct in (10.0, 25.0, 40.0, 60.0, 80.0):
        dc = detect.DetectionConfig(
            DropoutConfig(run["summary"]["selected_p"], 4,
                          cfg.detection.dropout.seed),
            threshold_percentile=pct)
        rep = detect.psbd_detect(model, poisoned.dataset, clean_val, dc)
        flagged = set(rep.sample_ids[rep.flags].tolist())
        if previous is not None:
            assert previous <= flagged
        previous = flagged


# ------------------------------------------------------------ adaptive

def test_adaptive_attacker_stays_detectable(adaptive_run):
    cfg = adaptive_run["config"]
    assert cfg.adaptive.alpha == 0.5
    assert cfg.adaptive.ada_interval == 50
    s = adaptive_run["summary"]
    assert s["attack_success_rate"] >= 0.85
    assert s["detectors"]["psbd"]["tpr"] >= 0.85


# ------------------------------------------------------------ determinism

def test_rerun_reproduces_metrics_and_csv_bytes(smoke_pair):
    first, second = smoke_pair

    def gather(root, suffixes):
        out = {}
        for dirpath, _dirs, files in os.walk(root):
            for fn in files:
                if fn.endswith(suffixes):
                    full = os.path.join(dirpath, fn)
                    out[os.path.relpath(full, root)] = full
        return out

    a = gather(first["dir"], ("metrics.json", ".csv"))
    b = gather(second["dir"], ("metrics.json", ".csv"))
    assert sorted(a) == sorted(b)
    assert any(k.endswith("metrics.json") for k in a)
    assert any(k.endswith(".csv") for k in a)
    for rel in sorted(a):
        with open(a[rel], "rb") as fa, open(b[rel], "rb") as fb:
            assert fa.read() == fb.read(), rel
