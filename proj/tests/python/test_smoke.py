import math
import json

import numpy as np
import pytest

import mammovl


def test_contrastive_identities():
    assert mammovl.contrastive_loss(np.full((4, 4), 0.3)) == pytest.approx(2 * math.log(4), abs=1e-9)
    eye = np.eye(2)
    assert mammovl.contrastive_loss(eye) == pytest.approx(2 * math.log(1 + math.exp(-1)), abs=1e-9)
    loss, grad = mammovl.contrastive_loss_grad(eye, 0.5)
    assert grad.shape == (2, 2)
    assert loss > 0


def test_similarity_rejects_unnormalized_rows():
    v = np.array([[1.0, 0.0], [0.0, 1.0]])
    assert np.allclose(mammovl.similarity_matrix(v, v), np.eye(2))
    with pytest.raises(mammovl.ContractError):
        mammovl.similarity_matrix(2 * v, v)


def test_label_schemes():
    assert [mammovl.map_label(b, "FIVE") for b in range(7)] == [2, 0, 1, None, 3, 4, 4]
    assert [mammovl.map_label(b, "THREE") for b in range(7)] == [1, 0, 0, None, 2, 2, 2]
    with pytest.raises(mammovl.ConfigError):
        mammovl.map_label(1, "SEVEN")


def test_f1_against_numpy_confusion_matrix():
    rng = np.random.default_rng(0)
    pred = rng.integers(0, 3, 100)
    truth = rng.integers(0, 3, 100)
    cm = np.zeros((3, 3))
    np.add.at(cm, (truth, pred), 1)
    tp = np.diag(cm)
    expected = 2 * tp / (cm.sum(0) + cm.sum(1))
    got = mammovl.f1_scores(pred.tolist(), truth.tolist(), 3)
    assert np.allclose(got, expected, atol=1e-12)
    assert mammovl.macro_f1(got) == pytest.approx(expected.mean())


def test_kfold_keeps_patients_together():
    samples = [{"patient_id": f"P{p}", "birads": [1, 2, 4][p % 3]} for p in range(20) for _ in range(3)]
    folds = mammovl.kfold_split(samples, k=4, seed=1)
    by_patient = {}
    for s, f in zip(samples, folds):
        by_patient.setdefault(s["patient_id"], set()).add(f)
    assert all(len(v) == 1 for v in by_patient.values())
    assert sorted(set(folds)) == [0, 1, 2, 3]


def test_curation():
    rows = [{"patient_id": f"P{i}", "view": v, "birads": 2} for i, v in enumerate(["LCC", "RML", "RMLO", "LXCCL"])]
    assert [r["view"] for r in mammovl.filter_views(rows)] == ["LCC", "RMLO"]
    many = [{"patient_id": f"P{i // 4}", "birads": 2} for i in range(100)]
    assert len(mammovl.cap_class_counts(many, cap=30)) == 30


def test_letterbox_geometry():
    g = mammovl.letterbox_geometry(1000, 1000)
    assert g["scale"] == pytest.approx(0.768)
    assert g["content_width"] == 768
    assert g["pad_top"] * 2 + g["content_height"] in (1024, 1025)


def test_cli_round_trip(tmp_path):
    code, out, err = mammovl.run_cli(["synth", "--rounds", "1", "--patients", "4", "--out", str(tmp_path / "syn")])
    assert code == 0, err
    atlas = tmp_path / "syn" / "atlas.pdf"
    assert str(atlas) in out
    pairs, rejects = mammovl.extract_pairs(str(atlas))
    assert len(pairs) == 32 and rejects == []

    code, out, _ = mammovl.run_cli(["extract", str(atlas), "--out", str(tmp_path / "ex")])
    assert code == 0
    assert out.splitlines()[0] == "pairs: 32, rejects: 0"
    snapshot = json.loads((tmp_path / "ex" / "config.json").read_text())
    assert snapshot["command"] == "extract"

    code, _, err = mammovl.run_cli(["extract", str(atlas), "--out", str(tmp_path / "ex")])
    assert code == 2 and "--force" in err
    code, _, err = mammovl.run_cli(["extract", str(atlas), "--profile", "nope", "--out", str(tmp_path / "e2")])
    assert code == 2
    assert all(name in err for name in mammovl.profile_names())

    rows = mammovl.load_manifest(str(tmp_path / "syn" / "study" / "manifest.csv"))
    assert len(rows) == 16


def test_checkpoint_errors(tmp_path):
    with pytest.raises(mammovl.ConfigError):
        mammovl.checkpoint_info(str(tmp_path / "absent.ckpt"))
    (tmp_path / "junk.ckpt").write_bytes(b"definitely not a checkpoint")
    with pytest.raises(mammovl.IntegrityError):
        mammovl.checkpoint_info(str(tmp_path / "junk.ckpt"))
