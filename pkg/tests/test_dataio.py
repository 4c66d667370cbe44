import json

import pytest

from anchordet.dataio import (RecordError, atomic_write, dumps_detections, dumps_targets, load_detections,
                              targets_report)
from anchordet.raster import RASTER_2MP, build_depth_raster
from anchordet.targets import Detection, build_target_grid


def _dets(scene):
    return [Detection(lab.id + 100, lab.cls, 0.5, lab.box2d, lab.box3d) for lab in scene.labels]


def test_detections_round_trip(tmp_path, small_scene):
    per = {0: _dets(small_scene), 4: []}
    path = tmp_path / "d.jsonl"
    atomic_write(path, dumps_detections(per, {"nms": "both"}))
    assert load_detections(path) == per
    header = json.loads(path.read_text().splitlines()[0])
    assert header["schema"] == "anchordet.detections" and header["version"] == 1


@pytest.mark.parametrize("first, line", [('{"type":"header","schema":"anchordet.detections","version":9}', 1),
                                         ('{"type":"frame","scene_id":0}', 1), ("", 0)])
def test_detection_header_errors(tmp_path, first, line):
    path = tmp_path / "d.jsonl"
    path.write_text(first + "\n" if first else "")
    with pytest.raises(RecordError, match=f"{path}:{line}:" if line else f"{path}: empty"):
        load_detections(path)


def test_detection_field_errors(tmp_path, small_scene):
    text = dumps_detections({0: _dets(small_scene)[:1]}).splitlines()
    rec = json.loads(text[2])
    rec["score"] = 1.5
    text[2] = json.dumps(rec)
    path = tmp_path / "d.jsonl"
    path.write_text("\n".join(text) + "\n")
    with pytest.raises(RecordError, match=f"{path}:3:"):
        load_detections(path)


def test_atomic_write_leaves_no_temp(tmp_path):
    atomic_write(tmp_path / "sub" / "x.txt", "hi")
    atomic_write(tmp_path / "sub" / "x.txt", b"bytes")
    assert [p.name for p in (tmp_path / "sub").iterdir()] == ["x.txt"]
    assert (tmp_path / "sub" / "x.txt").read_bytes() == b"bytes"


def test_targets_dump_and_report(small_scene):
    s = small_scene
    g = build_target_grid(build_depth_raster(s.cloud, s.camera, *RASTER_2MP), s.cloud, s.labels, s.camera)
    lines = dumps_targets({0: g}).splitlines()
    assert len(lines) == 2 + len(g)
    pix = [json.loads(x) for x in lines[2:]]
    assert sum(p["t3d"] is not None for p in pix) == int(g.fg.sum())
    rep = targets_report(0, g).splitlines()
    assert len(rep) == 2 + int(g.fg.sum())
    assert len(targets_report(0, g, all_pixels=True).splitlines()) == 2 + len(g)
