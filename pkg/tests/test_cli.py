import csv
import io

import pytest

from anchordet.cli import main
from anchordet.config import Config, ConfigError, dump_config, load_config, parse_config_text
from anchordet.dataio import dumps_detections, load_detections
from anchordet.synth import load_scenes
from anchordet.targets import Detection

SMALL = ["--set", "scene.n_vehicle=3", "--set", "scene.n_vru=1", "--set", "scene.n_construction=1"]


@pytest.fixture
def data(tmp_path, monkeypatch):
    monkeypatch.setenv("ANCHORDET_DATA", str(tmp_path / "d"))
    return tmp_path / "d"


@pytest.fixture
def trained(data):
    assert main(["generate", "--seed", "7", "--n-scenes", "3", *SMALL]) == 0
    assert main(["train", "--seed", "1", "--set", "optim.epochs=2"]) == 0
    return data


def test_generate_is_byte_identical(data, tmp_path):
    assert main(["generate", "--seed", "7", "--n-scenes", "2", *SMALL]) == 0
    first = (data / "scenes.jsonl").read_bytes()
    assert main(["generate", "--seed", "7", "--n-scenes", "2", *SMALL, "--out", str(tmp_path / "b.jsonl")]) == 0
    assert (tmp_path / "b.jsonl").read_bytes() == first
    assert main(["generate", "--seed", "8", "--n-scenes", "2", *SMALL, "--out", str(tmp_path / "c.jsonl")]) == 0
    assert (tmp_path / "c.jsonl").read_bytes() != first


def test_encode_report(data, capsys):
    assert main(["generate", "--n-scenes", "1", *SMALL]) == 0
    assert main(["encode", "--supervision", "3d+proj2d"]) == 0
    out = capsys.readouterr().out
    assert out.startswith("scene 0:") and "vehicle" in out
    assert (data / "targets.jsonl").read_text().startswith('{"type":"header","schema":"anchordet.targets"')
    assert main(["encode", "--raster", "8mp", "--report", str(data / "r.txt")]) == 0
    assert (data / "r.txt").read_text().startswith("scene 0:")


def test_train_outputs(trained):
    assert (trained / "head.ckpt").exists()
    assert not (trained / "head.ckpt.partial").exists()
    curve = (trained / "head.curve.csv").read_text().splitlines()
    assert curve[0] == "epoch,total,class,2d,3d" and len(curve) == 3


def _ids(path):
    dets = load_detections(path)
    return {(sid, d.anchor_point_id) for sid, ds in dets.items() for d in ds}


def test_infer_both_subset_of_2d(trained, tmp_path):
    assert main(["infer", "--nms", "2d", "--out", str(tmp_path / "a.jsonl"),
                 "--set", "post.score_threshold=0.05"]) == 0
    assert main(["infer", "--nms", "both", "--out", str(tmp_path / "b.jsonl"),
                 "--set", "post.score_threshold=0.05"]) == 0
    a, b = _ids(tmp_path / "a.jsonl"), _ids(tmp_path / "b.jsonl")
    assert b <= a
    assert main(["infer", "--resolution-transfer", "--out", str(tmp_path / "t.jsonl")]) == 0
    assert set(load_detections(tmp_path / "t.jsonl")) == {0, 1, 2}


def test_eval_perfect_detections(data, capsys):
    assert main(["generate", "--n-scenes", "2", *SMALL]) == 0
    scenes = load_scenes(data / "scenes.jsonl")
    per = {s.scene_id: [Detection(lab.id, lab.cls, 1.0, lab.box2d, lab.box3d) for lab in s.labels] for s in scenes}
    (data / "detections.jsonl").write_text(dumps_detections(per))
    assert main(["eval"]) == 0
    rows = list(csv.DictReader(io.StringIO(capsys.readouterr().out)))
    assert rows and all(float(r["value"]) == 1.0 for r in rows)
    assert {r["metric"] for r in rows} == {"bev_ap", "max_f1_25d"}


def test_malformed_inputs_exit_2(data, capsys):
    assert main(["generate", "--n-scenes", "1", *SMALL]) == 0
    path = data / "scenes.jsonl"
    lines = path.read_text().splitlines()
    lines[2] = '{"type":"point","id":1'
    path.write_text("\n".join(lines) + "\n")
    assert main(["encode"]) == 2
    assert f"{path}:3:" in capsys.readouterr().err
    det = data / "detections.jsonl"
    det.write_text('{"type":"header","schema":"anchordet.detections","version":1}\n{"type":"detection"}\n')
    assert main(["eval"]) == 2
    assert f"{det}:2:" in capsys.readouterr().err
    assert main(["eval", "--detections", str(data / "missing.jsonl")]) == 2


def test_config_errors(data, tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("# comment\noptim.lr = 0.01\n\nscene.bogus = 3\n")
    assert main(["generate", "--config", str(cfg)]) == 2
    assert f"{cfg}:4:" in capsys.readouterr().err
    assert main(["generate", "--set", "post.nms=bogus", "--dump-config"]) == 2
    assert main(["generate", "--set", "scene.n_vehicle"]) == 2


def test_dump_config(capsys):
    assert main(["train", "--dump-config", "--set", "optim.lr=0.5"]) == 0
    text = capsys.readouterr().out
    assert "optim.lr = 0.5" in text and "eval.buckets = 100-200,200-300,300-400,400-500" in text
    assert parse_config_text(text).optim.lr == 0.5


def test_config_round_trip(tmp_path):
    text = dump_config()
    assert parse_config_text(text) == Config()
    p = tmp_path / "x.cfg"
    p.write_text("scene.seed = 3\neval.buckets = 100-300, 300-500\n")
    cfg = load_config(p, ["post.nms=2d"])
    assert cfg.scene.seed == 3 and cfg.eval.buckets == ((100.0, 300.0), (300.0, 500.0)) and cfg.post.nms == "2d"
    with pytest.raises(ConfigError, match="duplicate"):
        parse_config_text("optim.lr = 1\noptim.lr = 2\n")
    with pytest.raises(ConfigError, match="<config>:1"):
        parse_config_text("optim.epochs = many\n")
    with pytest.raises(ConfigError):
        parse_config_text("just words\n")


def test_ablate_and_bench(data, tmp_path):
    assert main(["generate", "--n-scenes", "2", *SMALL, "--out", str(tmp_path / "tr.jsonl")]) == 0
    assert main(["generate", "--n-scenes", "1", "--first-id", "10", *SMALL, "--out", str(tmp_path / "te.jsonl")]) == 0
    out = tmp_path / "abl.csv"
    assert main(["ablate", "--train-scenes", str(tmp_path / "tr.jsonl"), "--test-scenes", str(tmp_path / "te.jsonl"),
                 "--set", "optim.epochs=1", "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert {(r["supervision"], r["nms"]) for r in rows} == {
        ("3d", "3d"), ("3d+proj2d", "both"), ("3d+2d", "both"), ("3d+2d", "3d"), ("3d+2d", "2d")}
    assert any(r["bucket_min"] == "100" and r["bucket_max"] == "500" for r in rows)
    bench = tmp_path / "bench.csv"
    assert main(["bench", "--oracle", "--ranges", "100,200", "--reps", "1", "--warmup", "0", "--out", str(bench),
                 "--dat", str(tmp_path / "bench.dat")]) == 0
    assert len(bench.read_text().splitlines()) == 3
    assert main(["bench", "--ranges", "100,abc"]) == 2
