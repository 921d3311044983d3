import json

import numpy as np
import pytest

from mdae.cli import main
from mdae.motion import DatasetManifest, load_sequence


def _synth(out, seed=0, cells=3, frames=16):
    return main(["synth", "--out", str(out), "--seed", str(seed), "--samples-per-cell", str(cells),
                 "--frames", str(frames), "--log-level", "warning"])


@pytest.fixture(scope="module")
def dataset(tmp_path_factory):
    out = tmp_path_factory.mktemp("data")
    assert _synth(out) == 0
    return out


def test_synth_deterministic(tmp_path, dataset):
    assert _synth(tmp_path / "b") == 0
    a, b = DatasetManifest.load(dataset / "manifest.json"), DatasetManifest.load(tmp_path / "b" / "manifest.json")
    assert [e.path for e in a] == [e.path for e in b]
    for e in a:
        assert np.array_equal(load_sequence(dataset / e.path).coords, load_sequence(tmp_path / "b" / e.path).coords)


def test_features_then_coords(tmp_path, dataset, capsys):
    first = next(iter(DatasetManifest.load(dataset / "manifest.json")))
    src = dataset / first.path
    assert main(["features", str(src), "--chain", str(dataset / "chain.json"), "--out", str(tmp_path / "f.mdaf")]) == 0
    out = tmp_path / ("back" + src.suffix)
    capsys.readouterr()
    assert main(["coords", str(tmp_path / "f.mdaf"), "--out", str(out), "--reference", str(src)]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["max_error"] < 1e-6


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        main(["nope"])
    assert exc.value.code == 2


def test_module_error_exits_1_with_json(tmp_path, capsys):
    assert main(["check-anatomy", "--data", str(tmp_path)]) == 1
    err = capsys.readouterr().err.strip().splitlines()[-1]
    payload = json.loads(err)
    assert payload["command"] == "check-anatomy" and payload["error"]


def test_config_file_defaults_and_override(tmp_path, dataset):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"out": str(tmp_path / "x"), "samples-per-cell": 1, "frames": 8, "grades": [2, 10]}))
    assert main(["synth", "--config", str(cfg)]) == 0
    assert len(DatasetManifest.load(tmp_path / "x" / "manifest.json").entries) == 4
    assert main(["synth", "--config", str(cfg), "--samples-per-cell", "2", "--out", str(tmp_path / "y")]) == 0
    assert len(DatasetManifest.load(tmp_path / "y" / "manifest.json").entries) == 8
    toml = tmp_path / "c.toml"
    toml.write_text(f'out = "{tmp_path / "z"}"\nframes = 8\nsamples_per_cell = 1\n')
    assert main(["synth", "--config", str(toml)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"no_such_flag": 1}))
    with pytest.raises(SystemExit) as exc:
        main(["synth", "--config", str(bad), "--out", str(tmp_path / "w")])
    assert exc.value.code == 2


def test_check_anatomy_rigid(dataset, capsys):
    capsys.readouterr()
    assert main(["check-anatomy", "--data", str(dataset)]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert rep["reference"]["reconstruction_error_m"] == 0.0105
    assert json.dumps(rep)  # plain JSON


def test_pipeline(tmp_path, dataset, capsys):
    d = str(dataset)
    model, emb, head = tmp_path / "m.mdam", tmp_path / "z.csv", tmp_path / "h.mdah"
    assert main(["train", "--data", d, "--out", str(model), "--steps", "3", "--T", "20", "--batch-size", "4"]) == 0
    assert main(["embed", "--data", d, "--model", str(model), "--out", str(emb)]) == 0
    header = emb.read_text().splitlines()[0].split(",")
    assert header[:6] == ["id", "participant", "technique", "grade_index", "grade", "split"] and "z0" in header
    assert main(["train-head", "--embeddings", str(emb), "--out", str(head)]) == 0
    capsys.readouterr()
    assert main(["eval-separability", "--head", str(head), "--embeddings", str(emb), "--split", "train"]) == 0
    rep = json.loads(capsys.readouterr().out)
    assert 0 <= rep["uar"] <= 1 and np.sum(rep["confusion"]) == rep["samples"]
    with pytest.warns(RuntimeWarning, match="unreliable"):
        assert main(["eval-fid", str(emb), str(emb), "--filter-a", "technique=RP", "--filter-b", "technique=FK"]) == 0
    assert json.loads(capsys.readouterr().out)["fid"] >= 0
    assert main(["project", "--embeddings", str(emb), "--out", str(tmp_path / "p.csv")]) == 0
    assert (tmp_path / "p.csv").read_text().splitlines()[0] == "index,label,pc1,pc2"

    first = next(iter(DatasetManifest.load(dataset / "manifest.json")))
    src = dataset / first.path
    out = tmp_path / ("edit" + src.suffix)
    assert main(["manipulate", str(src), "--model", str(model), "--head", str(head), "--out", str(out),
                 "--target-technique", "FK" if first.meta.technique == "RP" else "RP", "--steps", "5",
                 "--grid", "11", "--trace-out", str(tmp_path / "trace.json")]) == 0
    trace = json.loads((tmp_path / "trace.json").read_text())
    assert "lambda" in trace
    edited = load_sequence(out)
    assert edited.frames == load_sequence(src).frames

    r = tmp_path / "render"
    assert main(["render", str(out), "--chain", str(dataset / "chain.json"), "--out-dir", str(r), "--every", "4"]) == 0
    assert (r / "markers.csv").exists() and len(list(r.glob("frame_*.svg"))) == 4
    assert (r / "frame_0000.svg").read_text().startswith("<svg")


def test_resume_dims_mismatch(tmp_path, dataset, capsys):
    from mdae.network import new_model, save_checkpoint
    from mdae.diffusion import make_schedule
    from mdae.synth import default_chain

    bad = tmp_path / "bad.mdam"
    save_checkpoint(new_model(default_chain(), d_model=16, heads=2), make_schedule(T=20), None, bad)
    assert main(["train", "--data", str(dataset), "--out", str(tmp_path / "m.mdam"), "--steps", "1",
                 "--resume", str(bad)]) == 1
    assert "ShapeMismatchError" in capsys.readouterr().err
