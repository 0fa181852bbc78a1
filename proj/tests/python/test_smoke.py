import json
from pathlib import Path

import numpy as np
import pytest

import vasc


def test_taxonomy():
    assert len(vasc.class_ids(12)) == 12
    six = vasc.class_ids(6)
    assert len(six) == 6 and set(six) <= set(vasc.class_ids(12))
    with pytest.raises(vasc.VascError):
        vasc.class_ids(7)


def test_auc_matches_pairwise():
    rng = np.random.default_rng(0)
    scores = rng.random(150).round(2).tolist()
    labels = (rng.random(150) < 0.4).tolist()
    assert vasc.auc(scores, labels) == pytest.approx(vasc.pairwise_auc(scores, labels), abs=1e-12)
    assert vasc.auc([0.1, 0.4, 0.35, 0.8], [False, False, True, True]) == pytest.approx(0.75)
    lo, hi = vasc.auc_ci(scores, labels, n_boot=200, seed=1)
    assert lo <= vasc.auc(scores, labels) <= hi


def test_macro_average():
    a, f = vasc.macro_average([0.9, 0.8], [0.5, 0.7])
    assert a == pytest.approx(0.85) and f == pytest.approx(0.6)


def test_augment_quarter_turn():
    img = np.random.default_rng(1).random((8, 8, 3), dtype=np.float32)
    out = vasc.augment(img, angle=90.0, output_size=8)
    assert out.shape == (8, 8, 3)
    # out[y, x] == in[x, W-1-y]
    assert np.allclose(out, np.transpose(img, (1, 0, 2))[::-1, :, :], atol=1e-5)


def test_default_config_round_trip():
    cfg = vasc.default_config(7)
    assert cfg["seed"] == 7
    assert vasc.validate_config({"classes": 6})["head"]["num_classes"] == 6
    cfg["train"]["learning_rate"] = -1
    with pytest.raises(vasc.VascError, match="learning_rate"):
        vasc.validate_config(cfg)


def test_model_predict_saliency_export(tmp_path):
    model = vasc.Classifier.build(classes=6, input_size=64, seed=3)
    img = np.random.default_rng(2).random((80, 70, 3), dtype=np.float32)
    p = np.array(model.predict(img))
    assert p.shape == (6,) and p.sum() == pytest.approx(1.0) and (p > 0).all()

    coarse = model.integrated_gradients(img, steps=10)
    fine = model.integrated_gradients(img, steps=200)
    assert fine["grid"].shape == (64, 64)
    assert fine["relative_residual"] <= coarse["relative_residual"] + 1e-12

    artifact = tmp_path / "model.vpt"
    model.export(artifact)
    portable = vasc.PortableModel.load(artifact)
    assert np.allclose(portable.predict(img), p, atol=1e-4)
    report = vasc.bench(portable, runs=30, warmup=5)
    assert len(report["samples_ms"]) == 30 and report["median_ms"] > 0


def test_tsne_separates_clusters():
    rng = np.random.default_rng(3)
    x = np.vstack([rng.normal(size=(40, 10)), rng.normal(size=(40, 10)) + 8])
    pts, kl = vasc.tsne(x)
    assert pts.shape == (80, 2) and len(kl) == 1000
    labels = np.repeat([0, 1], 40)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    nearest = np.argsort(d, axis=1)[:, :5]
    assert (labels[nearest] == labels[:, None]).mean() > 0.95


def test_surrogate_split_and_study(tmp_path):
    n = vasc.generate_surrogate(tmp_path / "data", classes=6, per_class=30, image_size=64)
    assert n == 180
    plan = vasc.split(tmp_path / "data" / "manifest.tsv", folds=3, per_class_cv_cap=1000)
    assert plan["test_group_ids"]
    folds = plan["fold_assignments"]
    assert not set(folds) & set(plan["test_group_ids"])

    ids = vasc.class_ids(6)
    items = [
        {"item_id": f"it{k:02d}", "image_id": f"img{k}", "file_path": f"f{k}.ppm",
         "true_class_id": ids[k % 6], "predicted_class_id": ids[k % 6], "predicted_probability": 0.9}
        for k in range(12)
    ]
    svc = vasc.StudyService(json.dumps({"format": "vasc-study-items", "version": 1, "items": items}), 6, tmp_path / "logs")
    sid = svc.create_session("r1")["session_id"]
    answered = 0
    while True:
        try:
            view = svc.next_item(sid)
        except vasc.VascError:
            break
        assert ("prediction" in view) == (view["pass"] == 2)
        svc.submit(sid, view["item_id"], ids[0])
        answered += 1
    assert answered == 24
    assert svc.status(sid)["state"] == "complete"
    report = svc.report()
    assert report["classifier"]["correct"] == 12
