import types

import numpy as np
import pytest

from shiftscan import data, nets, uncertainty

import oracle_tools


def _model_and_ds():
    arch = nets.ArchSpec(stage_widths=(6, 8), class_count=4)
    model = nets.build_model(arch, seed=2)
    ds = data.synth_dataset(seed=3, per_class=5, class_count=4, side=16)
    return model, ds


# ------------------------------------------------- arithmetic on canned passes

def _canned_predict(base_probs, pass_probs):
    def fake(model, images, batch_size=512, dropout=None, pass_index=0,
             sample_ids=None):
        if dropout is None:
            return np.asarray(base_probs, dtype=np.float64)
        return np.asarray(pass_probs[pass_index], dtype=np.float64)
    return fake


def _stub_model(classes):
    return types.SimpleNamespace(arch=types.SimpleNamespace(class_count=classes))


def test_shift_ratio_counts_changed_argmax(monkeypatch):
    # one sample, k=3: passes predict [same, other, other] so sigma = 2/3
    base = [[0.7, 0.2, 0.1, 0.0]]
    passes = [[[0.6, 0.3, 0.1, 0.0]],
              [[0.1, 0.2, 0.7, 0.0]],
              [[0.2, 0.1, 0.7, 0.0]]]
    monkeypatch.setattr(nets, "predict_probs", _canned_predict(base, passes))
    stats = uncertainty.shift_ratio(_stub_model(4), np.zeros((1, 3, 4, 4)),
                                    nets.DropoutConfig(p=0.5, k=3, seed=0))
    assert stats.sigma == pytest.approx(2.0 / 3.0)
    assert stats.shift_counts.tolist() == [2]
    assert stats.destinations.tolist() == [0, 0, 2, 0]
    assert stats.k == 3 and stats.sample_count == 1


def test_psu_is_base_minus_mean_pass_confidence(monkeypatch):
    base = [[0.7, 0.2, 0.1, 0.0]]
    passes = [[[0.5, 0.3, 0.2, 0.0]],
              [[0.1, 0.2, 0.7, 0.0]],
              [[0.2, 0.1, 0.7, 0.0]]]
    monkeypatch.setattr(nets, "predict_probs", _canned_predict(base, passes))
    scores = uncertainty.psu(_stub_model(4), np.zeros((1, 3, 4, 4)),
                             nets.DropoutConfig(p=0.5, k=3, seed=0))
    want = 0.7 - (0.5 + 0.1 + 0.2) / 3.0
    assert scores[0].psu == pytest.approx(want, abs=1e-12)


def test_mc_dropout_uses_mean_confidence_argmax(monkeypatch):
    # mean pass confidence favors class 2 even though pass 0 favors class 0
    base = [[0.9, 0.05, 0.05, 0.0]]
    passes = [[[0.5, 0.1, 0.4, 0.0]],
              [[0.1, 0.1, 0.8, 0.0]],
              [[0.0, 0.2, 0.8, 0.0]]]
    monkeypatch.setattr(nets, "predict_probs", _canned_predict(base, passes))
    got = uncertainty.mc_dropout_uncertainty(
        _stub_model(4), np.zeros((1, 3, 4, 4)),
        nets.DropoutConfig(p=0.5, k=3, seed=0))
    vals = np.array([0.4, 0.8, 0.8])
    assert got[0] == pytest.approx(vals.std(), abs=1e-12)  # population std


# ------------------------------------------------- exact identities

def test_p_zero_gives_zero_sigma_and_psu():
    model, ds = _model_and_ds()
    cfg = nets.DropoutConfig(p=0.0, k=4, seed=9)
    stats = uncertainty.shift_ratio(model, ds, cfg)
    assert stats.sigma == 0.0
    assert stats.destinations.sum() == 0
    _, vals = uncertainty.psu_values(model, ds, cfg)
    assert np.all(vals == 0.0)


def test_confidence_rows_sum_to_one():
    model, ds = _model_and_ds()
    base, passes = uncertainty.dropout_pass_probs(
        model, ds.images, nets.DropoutConfig(p=0.5, k=3, seed=1))
    assert np.allclose(base.sum(axis=1), 1.0, atol=1e-5)
    assert np.allclose(passes.sum(axis=2), 1.0, atol=1e-5)


def test_destination_histogram_conserves_shift_events():
    model, ds = _model_and_ds()
    stats = uncertainty.shift_ratio(model, ds,
                                    nets.DropoutConfig(p=0.6, k=5, seed=2))
    assert stats.destinations.sum() == stats.shift_counts.sum()
    assert stats.sigma == pytest.approx(
        stats.shift_counts.sum() / (stats.k * stats.sample_count))


def test_psu_bounded_by_confidence_range():
    model, ds = _model_and_ds()
    _, vals = uncertainty.psu_values(model, ds,
                                     nets.DropoutConfig(p=0.7, k=4, seed=3))
    assert np.all(vals <= 1.0) and np.all(vals >= -1.0)


# ------------------------------------------------- enumeration oracle (toy)

def test_toy_oracle_matches_monte_carlo_quarter_k():
    # k=256 smoke version of the k=4096 acceptance check, wider tolerance
    model = oracle_tools.toy_model(seed=21)
    ds = oracle_tools.toy_dataset(n=8, seed=5)
    want = oracle_tools.enumerate_expectations(model, ds, p=0.5)
    cfg = nets.DropoutConfig(p=0.5, k=256, seed=13)
    stats = uncertainty.shift_ratio(model, ds, cfg)
    assert abs(stats.sigma - want["sigma"]) <= 0.06
    _, psu_vals = uncertainty.psu_values(model, ds, cfg)
    assert np.abs(psu_vals - want["psu"]).max() <= 0.06
    mc = uncertainty.mc_dropout_uncertainty(model, ds, cfg)
    assert np.abs(mc - want["mc_std"]).max() <= 0.06


def test_toy_manual_forward_matches_package_base_pass():
    # the oracle's center-tap map must be the same function the net computes
    model = oracle_tools.toy_model(seed=21)
    ds = oracle_tools.toy_dataset(n=6, seed=7)
    probs = nets.forward(model, ds.images)
    for i in range(len(ds)):
        x = ds.images[i, :, 0, 0].astype(np.float64)
        manual = oracle_tools.toy_probs(model.params, x,
                                        np.ones(oracle_tools.TOY_WIDTH))
        assert np.abs(manual - probs[i]).max() <= 1e-5


# ------------------------------------------------- validation and IO

def test_empty_dataset_rejected():
    model, ds = _model_and_ds()
    empty = ds.subset(np.array([], dtype=np.int64))
    with pytest.raises(ValueError):
        uncertainty.shift_ratio(model, empty, nets.DropoutConfig(p=0.5))


def test_mc_dropout_needs_two_passes():
    model, ds = _model_and_ds()
    with pytest.raises(ValueError):
        uncertainty.mc_dropout_uncertainty(model, ds,
                                           nets.DropoutConfig(p=0.5, k=1))


def test_collect_records_structure():
    model, ds = _model_and_ds()
    recs = uncertainty.collect_records(model, ds,
                                       nets.DropoutConfig(p=0.5, k=3, seed=1))
    assert len(recs) == len(ds)
    r = recs[0]
    assert r.pass_confidences.shape == (3, 4)
    assert r.base_class == int(r.base_confidences.argmax())
    assert r.pass_classes.shape == (3,)


def test_capture_feature_maps_shape_and_dropout():
    model, ds = _model_and_ds()
    fm = uncertainty.capture_feature_maps(model, ds.images[0])
    assert fm.shape == (8, 8, 8)  # last stage width, one stride-2 stage
    masked = uncertainty.capture_feature_maps(
        model, ds.images[0], nets.DropoutConfig(p=0.9, k=1, seed=3))
    assert not np.array_equal(fm, masked)
    with pytest.raises(ValueError):
        uncertainty.capture_feature_maps(model, ds.images[:2])


def test_similarity_mask_rules():
    a = np.array([[0.0, 1.0], [2.0, 3.0]])
    b = np.array([[0.5, 1.5], [2.0, 4.5]])
    got = uncertainty.similarity_mask(a, b, tol=1.0)
    # a==0 kills the first cell; |3-4.5|>1 kills the last
    assert got.tolist() == [[False, True], [True, False]]
    with pytest.raises(ValueError):
        uncertainty.similarity_mask(a, b[:1])


def test_export_sample_stats_round_trip(tmp_path):
    path = tmp_path / "stats.csv"
    uncertainty.export_sample_stats(
        str(path), ids=[3, 4], base_classes=[1, 0],
        base_confs=[0.25, 0.5], psu_vals=[0.125, -0.0625],
        shift_counts=[2, 0], truth=[True, False])
    lines = path.read_text().strip().split("\n")
    assert lines[0] == "sample_id,base_class,base_conf,psu,shift_count,is_backdoor_truth"
    assert lines[1] == "3,1,0.25,0.125,2,1"
    assert lines[2] == "4,0,0.5,-0.0625,0,0"
