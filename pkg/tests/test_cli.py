import csv
import io
import json

import numpy as np
import pytest
from PIL import Image

from neurovasc.cli import main, validate_json
from neurovasc.report import FN_COLOR, FP_COLOR, has_color

REPORTED_PARAMS = 12_429_814


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def smoke_config(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = {
        "data": {"phantom": {"grid_shape": [32, 32, 16], "n_vessels": 3, "seed": 0}, "count": 6},
        "model": {"channels": [4, 8, 12, 16, 24], "patch_shape": [32, 32, 16], "axial_heads": 2},
        "train": {"learning_rate": 1e-3, "max_epochs": 2, "seed": 0},
        "sliding_window": {"roi": [32, 32, 16], "overlap": 0.5},
        "output_dir": "run",
    }
    path = root / "exp.json"
    path.write_text(json.dumps(cfg))
    return path


@pytest.fixture(scope="module")
def trained_run(smoke_config):
    assert main(["train", "--config", str(smoke_config)]) == 0
    return smoke_config.parent / "run"


def test_phantom_twice_identical(tmp_path, capsys):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid_shape": [16, 16, 16], "n_vessels": 2}))
    for d in ("a", "b"):
        code, out, _ = run(capsys, "phantom", "--spec", str(spec), "--count", "10", "--seed", "7",
                           "--out", str(tmp_path / d))
        assert code == 0
    assert json.loads(out)["counts"] == {"train": 7, "val": 1, "test": 2}
    ma, mb = (tmp_path / "a" / "manifest.json").read_text(), (tmp_path / "b" / "manifest.json").read_text()
    assert ma == mb
    validate_json(json.loads(ma), "manifest")
    a = np.load(tmp_path / "a" / "samples" / "phantom_0009" / "labels.npy")
    assert np.array_equal(a, np.load(tmp_path / "b" / "samples" / "phantom_0009" / "labels.npy"))


def test_phantom_errors(tmp_path, capsys):
    code, _, err = run(capsys, "phantom", "--count", "0", "--out", str(tmp_path))
    assert code == 1 and "count" in err
    blocker = tmp_path / "f"
    blocker.write_text("")
    code, _, err = run(capsys, "phantom", "--count", "1", "--out", str(blocker / "x"))
    assert code == 1 and "writable" in err


def test_train_outputs(trained_run):
    for name in ("checkpoint.pt", "history.csv", "history.json", "metrics.json", "metrics.csv", "run_manifest.json"):
        assert (trained_run / name).exists(), name
    manifest = json.loads((trained_run / "run_manifest.json").read_text())
    validate_json(manifest, "run_manifest")
    assert manifest["seed"] == 0 and len(manifest["config_hash"]) == 64
    validate_json(json.loads((trained_run / "metrics.json").read_text()), "metrics")
    validate_json(json.loads((trained_run / "history.json").read_text()), "history")
    rows = list(csv.DictReader(io.StringIO((trained_run / "history.csv").read_text())))
    assert [int(r["epoch"]) for r in rows] == [1, 2]


def test_train_is_deterministic(smoke_config, trained_run, tmp_path):
    assert main(["train", "--config", str(smoke_config), "--out", str(tmp_path / "again")]) == 0
    a = json.loads((trained_run / "history.json").read_text())
    b = json.loads((tmp_path / "again" / "history.json").read_text())
    assert a["train_loss"] == b["train_loss"] and a["val_loss"] == b["val_loss"]


def test_eval_writes_metrics_and_overlays(trained_run, tmp_path, capsys):
    code, out, _ = run(capsys, "eval", "--checkpoint", str(trained_run / "checkpoint.pt"),
                       "--data", str(trained_run / "data" / "manifest.json"), "--out", str(tmp_path / "ev"))
    assert code == 0
    header = out.splitlines()[0].split(",")
    assert header == ["class", "DSC", "JI", "Sens", "Spec", "Prec", "Params", "InfTimeSec"]
    validate_json(json.loads((tmp_path / "ev" / "metrics.json").read_text()), "metrics")
    pngs = sorted((tmp_path / "ev" / "overlays").glob("*.png"))
    assert any(p.name.endswith("_mip.png") for p in pngs)
    axial = [p for p in pngs if "_axial" in p.name]
    assert axial and all(Image.open(p).size == (32, 32) for p in axial)


def test_eval_with_oracle_predictions_has_no_errors_coloured(trained_run, tmp_path, capsys, monkeypatch):
    import neurovasc.training as training

    def oracle(model, volume, spec=None):
        import torch
        lab = oracle.lookup[np.asarray(volume).tobytes()]
        return torch.nn.functional.one_hot(torch.from_numpy(lab.astype(np.int64)), 3).movedim(-1, 0).double()

    from neurovasc.training import prepare_sample
    from neurovasc.volume_io import load_manifest, load_volume
    man = load_manifest(trained_run / "data" / "manifest.json")
    oracle.lookup = {}
    for p in man.paths("test"):
        s = prepare_sample(load_volume(trained_run / "data" / p))
        oracle.lookup[s.image.tobytes()] = s.labels
    monkeypatch.setattr(training, "sliding_window_infer", oracle)
    code, _, _ = run(capsys, "eval", "--checkpoint", str(trained_run / "checkpoint.pt"),
                     "--data", str(trained_run / "data" / "manifest.json"), "--out", str(tmp_path / "or"))
    assert code == 0
    report = json.loads((tmp_path / "or" / "metrics.json").read_text())
    assert report["per_class"]["vessel"]["DSC"] == 1.0
    for p in (tmp_path / "or" / "overlays").glob("*_montage.png"):
        rgb = np.asarray(Image.open(p).convert("RGB"))
        assert not has_color(rgb, FP_COLOR) and not has_color(rgb, FN_COLOR)


def test_eval_mismatched_data(trained_run, tmp_path, capsys):
    main(["phantom", "--count", "3", "--seed", "1", "--split", "0,0,1", "--out", str(tmp_path / "tiny")])
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"grid_shape": [16, 16, 16]}))
    main(["phantom", "--spec", str(spec), "--count", "2", "--split", "0,0,1", "--out", str(tmp_path / "small")])
    capsys.readouterr()
    code, _, err = run(capsys, "eval", "--checkpoint", str(trained_run / "checkpoint.pt"),
                       "--data", str(tmp_path / "small" / "manifest.json"), "--out", str(tmp_path / "o"))
    assert code == 1 and "smaller" in err
    code, _, err = run(capsys, "eval", "--checkpoint", str(tmp_path / "small" / "manifest.json"),
                       "--data", str(tmp_path / "small" / "manifest.json"), "--out", str(tmp_path / "o"))
    assert code == 1 and "checkpoint" in err


def test_infer_writes_prediction(trained_run, tmp_path, capsys):
    vol = next((trained_run / "data" / "samples").iterdir())
    code, out, _ = run(capsys, "infer", "--checkpoint", str(trained_run / "checkpoint.pt"), "--input", str(vol),
                       "--out", str(tmp_path / "pred"))
    assert code == 0
    probs = np.load(tmp_path / "pred" / "probabilities.npy")
    assert probs.shape == (3, 32, 32, 16)
    assert np.allclose(probs.sum(0), 1, atol=1e-5)
    assert sum(json.loads(out)["voxels_per_class"]) == 32 * 32 * 16


def test_summary_default_and_json(capsys, tmp_path):
    code, out, _ = run(capsys, "summary", "--json")
    assert code == 0
    payload = json.loads(out)
    validate_json(payload, "summary")
    assert abs(payload["parameter_count"] - REPORTED_PARAMS) / REPORTED_PARAMS <= 0.2
    code, out, _ = run(capsys, "summary")
    assert code == 0 and out.strip().splitlines()[-1].startswith("total")
    bad = tmp_path / "m.json"
    bad.write_text(json.dumps({"model": {"channels": [1, 2]}}))
    code, _, err = run(capsys, "summary", "--config", str(bad))
    assert code == 1


def test_gradcheck_usage_error(capsys):
    with pytest.raises(SystemExit) as e:
        main(["gradcheck", "--scope", "nope"])
    assert e.value.code == 2


def test_gradcheck_network_scope(capsys):
    code, out, _ = run(capsys, "gradcheck", "--scope", "network")
    assert code == 0 and "PASS" in out


def test_train_missing_config(capsys, tmp_path):
    code, _, err = run(capsys, "train", "--config", str(tmp_path / "none.json"))
    assert code == 1
