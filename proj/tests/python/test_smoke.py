"""Smoke tests for the Python module.

The numerical core is covered by the C++ suites; these tests only prove the
binding layer round-trips arrays, applies defaults, and drives the pipeline.
"""

import json

import numpy as np
import pytest

import tsgf


def ramp_video():
    # Frame means 0.2, 0.7, 0.7: differences land at [0.5, 0.25, 0.0].
    v = np.full((3, 1, 4, 4), 0.2)
    v[1] += 0.5
    v[2] += 0.5
    return v


def test_saliency_profile_matches_hand_computation():
    p = tsgf.saliency_profile(ramp_video(), window_k=0)
    assert p["d"] == pytest.approx([0.5, 0.25, 0.0])
    assert p["s"] == pytest.approx(p["d"])
    # 0.8-quantile of {0, 0.25, 0.5} interpolates to 0.4; the mask rescales
    # headroom below it by the saliency range.
    assert p["epsilon"] == pytest.approx(0.4)
    assert p["mask"] == pytest.approx([0.0, 0.3, 0.8])


def test_static_video_opens_the_mask_fully():
    v = np.full((4, 1, 5, 5), 0.3)
    p = tsgf.saliency_profile(v)
    assert p["d"] == pytest.approx([0.0] * 4)
    assert p["mask"] == pytest.approx([1.0] * 4)
    assert p["epsilon"] == 0.0


def test_component_functions_compose_to_the_profile():
    v = ramp_video()
    d = tsgf.frame_differences(v)
    s = tsgf.smooth_saliency(d, window_k=2)
    mask, eps = tsgf.build_mask(s, quantile=0.8)
    p = tsgf.saliency_profile(v, window_k=2)
    assert d == pytest.approx(p["d"])
    assert s == pytest.approx(p["s"])
    assert eps == pytest.approx(p["epsilon"])
    assert mask == pytest.approx(p["mask"])


def test_gated_augment_respects_the_gate():
    v = ramp_video()
    partner = np.full((3, 1, 4, 4), 0.9)
    out = tsgf.gated_augment(v, s=[0.5, 0.25, 0.0], epsilon=0.4, partner=partner, seed=3)
    assert out.shape == v.shape
    # Frame 0 sits above the threshold and must come back untouched.
    np.testing.assert_array_equal(out[0], v[0])
    # The gated frames received partner pixels somewhere.
    assert (out[1] == 0.9).any()
    assert (out[2] == 0.9).any()


def test_window_kind_is_validated():
    with pytest.raises(ValueError):
        tsgf.smooth_saliency([0.1, 0.2], window_kind="boxcar")


def test_default_config_is_json():
    cfg = json.loads(tsgf.default_config())
    assert cfg["dataset"]["classes"]
    assert cfg["distill"]["iterations"] >= 1


def test_pipeline_stages_run_from_a_dict(tmp_path):
    cfg = {
        "seed": 5,
        "out_dir": str(tmp_path / "run"),
        "dataset": {
            "frames": 5, "height": 8, "width": 8, "channels": 1,
            "train_per_class": 4, "val_per_class": 0, "test_per_class": 2,
            "noise": 0.01,
            "classes": [
                {"shape": "square", "motion": "constant", "speed": 2},
                {"shape": "square", "motion": "constant", "speed": -2},
            ],
        },
        "teacher": {"epochs": 3, "lr": 0.05, "batch_size": 8},
        "distill": {"iterations": 2, "ipc": 1},
        "eval": {"epochs": 2, "widths": [4, 8, 8], "seed_count": 1},
    }
    assert "train" in tsgf.gen_data(cfg)
    assert (tmp_path / "run" / "data" / "manifest.json").exists()

    # Stage ordering is enforced with an actionable message.
    with pytest.raises(RuntimeError, match="train-teacher"):
        tsgf.distill(cfg)

    tsgf.train_teacher(cfg)
    out = tsgf.distill(cfg)
    assert "ipc 1" in out
    assert "mean" in tsgf.evaluate(cfg)
