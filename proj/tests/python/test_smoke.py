import json
import math
import pathlib

import numpy as np
import pytest

import branchnet

ROOT = pathlib.Path(__file__).resolve().parents[2]


def test_smooth_labels_and_schedule():
    p = branchnet.smooth_labels(2, 10, 0.1)
    assert len(p) == 10
    assert p[2] == pytest.approx(0.91)
    assert p[0] == pytest.approx(0.01)
    assert math.fsum(p) == pytest.approx(1.0, abs=1e-12)
    assert [branchnet.lr_at_epoch(e) for e in (0, 30, 60, 90)] == [0.05, 0.005, 0.0005, 0.00005]
    with pytest.raises(ValueError):
        branchnet.smooth_labels(10, 10, 0.1)


def test_metrics():
    assert branchnet.relative_improvement([22.02, 22.09], 20.81) == pytest.approx(5.65, abs=0.01)
    probs = np.array([[0.7, 0.2, 0.1], [0.5, 0.3, 0.2], [0.1, 0.1, 0.8], [0.2, 0.6, 0.2]])
    assert branchnet.top_k_error(probs, [0, 1, 2, 1], 1) == 25.0
    assert branchnet.top_k_error(probs, [0, 1, 2, 1], 2) == 0.0
    ens = branchnet.ensemble_probs([probs, probs[::-1].copy()])
    np.testing.assert_allclose(ens, (probs + probs[::-1]) / 2)


def test_softmax_and_conv_against_numpy():
    rng = np.random.default_rng(0)
    z = rng.normal(size=(4, 5))
    e = np.exp(z - z.max(axis=1, keepdims=True))
    np.testing.assert_allclose(branchnet.softmax(z), e / e.sum(axis=1, keepdims=True), atol=1e-14)

    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((2, 4, 3, 3))
    for i in range(3):
        for j in range(3):
            patch = xp[:, :, 2 * i:2 * i + 3, 2 * j:2 * j + 3]
            ref[:, :, i, j] = np.einsum("nchw,ochw->no", patch, w) + b
    np.testing.assert_allclose(branchnet.conv2d(x, w, b, stride=2, padding=1), ref, atol=1e-12)


def test_topology_and_parameters():
    cfg = json.loads((ROOT / "configs" / "full_scale.json").read_text())
    t = branchnet.block_topology(cfg)
    assert t["total_blocks"] == 93
    assert t["weighted_layers"] == 200
    p = branchnet.count_parameters(cfg)
    assert p["total"] == 108499984
    assert p["total"] < p["independent_ensemble"]
    with pytest.raises(ValueError):
        branchnet.count_parameters({"stage_blocks": [1], "bogus": 1})


def test_synthetic_and_shuffle():
    images, labels = branchnet.generate_synthetic(num_classes=3, samples_per_class=2, image_size=8, seed=1)
    assert images.shape == (6, 8, 8, 3)
    assert images.dtype == np.uint8
    assert labels == [0, 1, 2, 0, 1, 2]
    again, _ = branchnet.generate_synthetic(num_classes=3, samples_per_class=2, image_size=8, seed=1)
    assert np.array_equal(images, again)
    perm = branchnet.epoch_shuffle(100, 3, 7)
    assert sorted(perm) == list(range(100))
    assert perm == branchnet.epoch_shuffle(100, 3, 7)
