import math

import numpy as np
import pytest

import partmim


def figure_keypoints():
    kps = np.zeros((17, 3))
    kps[:, 0] = np.linspace(4, 28, 17)
    kps[:, 1] = np.linspace(4, 60, 17)
    kps[:, 2] = 1.0
    return kps


def test_num_masked():
    assert partmim.num_masked(32, 0.5) == 16
    assert partmim.num_masked(128, 0.75) == 96
    assert partmim.num_masked(10, 0.0) == 0


def test_sample_mask_budget_and_determinism():
    kps = figure_keypoints()
    a = partmim.sample_mask(kps, 8, 4, 8, mask_ratio=0.5, seed=3)
    b = partmim.sample_mask(kps, 8, 4, 8, mask_ratio=0.5, seed=3)
    assert a == b
    assert len(a["masked"]) == 16
    assert len(set(a["masked"])) == 16
    assert len(a["provenance"]) == 16
    r = partmim.sample_mask(kps, 8, 4, 8, strategy="random")
    assert set(r["provenance"]) == {"fill"}


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        partmim.sample_mask(np.zeros((16, 3)), 8, 4, 8)
    with pytest.raises(ValueError):
        partmim.part_patches(figure_keypoints(), "tail", 8, 4, 8)


def test_align_loss_identity_and_gradient_shape():
    one = np.array([[1.0, 0.0]])
    loss, dz, dzt = partmim.align_loss(one, one)
    assert loss == pytest.approx(0.0, abs=1e-15)
    same = np.tile(np.array([[0.6, 0.8]]), (4, 1))
    loss, dz, dzt = partmim.align_loss(same, same)
    assert loss == pytest.approx(math.log(4), abs=1e-12)
    assert dz.shape == (4, 2)


def test_normalize_targets_rows():
    x = np.random.default_rng(0).random((5, 12))
    n = partmim.normalize_targets(x)
    assert np.allclose(n.mean(axis=1), 0.0, atol=1e-12)
    assert np.all(n.var(axis=1) < 1.0)


def test_schedule():
    assert partmim.lr_at(0, 1e-3, 10, 100) == 0.0
    assert partmim.lr_at(10, 1e-3, 10, 100) == 1e-3
    assert abs(partmim.lr_at(100, 1e-3, 10, 100)) <= 1e-12


def test_grad_check_and_corruption():
    group, err = partmim.grad_check_tiny()
    assert err < 1e-4
    group, err = partmim.grad_check_tiny(corrupt="decoder.pred.weight")
    assert err > 1e-4


def test_cli_in_process(tmp_path):
    assert partmim.run_cli(["synth", "--out", str(tmp_path / "d"), "--count", "2"]) == 0
    manifest = str(tmp_path / "d" / "manifest.jsonl")
    assert partmim.run_cli(["mask-plan", "--manifest", manifest, "--out", str(tmp_path / "p.jsonl")]) == 0
    assert (tmp_path / "p.jsonl").read_text().count("\n") == 4
    assert partmim.run_cli(["pretrain", "--manifest", str(tmp_path / "missing.jsonl")]) == 2
