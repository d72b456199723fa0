import math

import pytest

import mtperson


def test_triplet_loss_examples():
    assert mtperson.triplet_loss([[0.0], [2.0], [1.0], [3.0]], [0, 0, 1, 1], margin=0.2) == pytest.approx(1.2, abs=1e-6)
    same = [[1.0, 1.0]] * 4
    assert mtperson.triplet_loss(same, [0, 0, 1, 1]) == pytest.approx(math.log(2.0), abs=1e-6)


def test_triplet_composition_error():
    with pytest.raises(mtperson.Error):
        mtperson.triplet_loss([[0.0], [1.0]], [0, 0])


def test_reid_eval_perfect_ranking():
    # Two queries, each with its match first in the gallery.
    dist = [0.1, 0.9, 0.8, 0.2]
    m_ap, cmc = mtperson.reid_eval(dist, [1, 2], [0, 0], [1, 2], [1, 1])
    assert m_ap == pytest.approx(1.0)
    assert cmc[0] == pytest.approx(1.0)


def test_pckh_threshold():
    gt = [[[10.0, 10.0, 1.0], [20.0, 20.0, 1.0]]]
    pred = [[[13.0, 14.0, 1.0], [20.0, 26.0, 1.0]]]
    # Head size 10: the first joint is 5 px away (hit), the second 6 px (miss).
    assert mtperson.pckh(pred, gt, [10.0]) == pytest.approx(0.5)


def test_synthetic_train_and_evaluate(tmp_path):
    assert mtperson.generate_synthetic(tmp_path / "data", identities=4, images_per_id=3, seed=1) == 12
    manifest = mtperson.load_manifest(tmp_path / "data" / "manifest.json")
    assert sorted(manifest["tasks"]) == ["attributes", "pose", "reid", "segmentation"]
    config = {
        "model": {"backbone": {"stage_channels": [8, 16, 16, 16], "final_channels": 32,
                               "input_height": 64, "input_width": 32}},
        "datasets": [{"manifest": str(tmp_path / "data" / "manifest.json"),
                      "losses": ["triplet", "pose_l2"], "batch": {"P": 2, "K": 2}}],
        "steps": 2,
    }
    report = mtperson.train(config, tmp_path / "run")
    assert set(report) == {"reid", "pose"}
    again = mtperson.evaluate(tmp_path / "run" / "checkpoints" / "final.pt",
                              tmp_path / "data" / "manifest.json", ["reid"])
    assert again["reid"]["mAP"] == pytest.approx(report["reid"]["mAP"], abs=1e-6)
