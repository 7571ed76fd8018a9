from __future__ import annotations

import json
import shutil

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from stream4d.errors import BadMagic, ConfigError, MalformedManifest, TruncatedFile
from stream4d.io import (RunConfig, decode_grid, encode_grid, load_manifest, read_grid, read_json, read_pgm,
                         read_ply, write_grid, write_json, write_pgm, write_ply)


@settings(max_examples=40, deadline=None)
@given(data=hnp.arrays(np.float32, hnp.array_shapes(min_dims=3, max_dims=3, max_side=6),
                       elements=st.floats(width=32, allow_nan=True, allow_infinity=True)),
       seed=st.integers(0, 2**31 - 1))
def test_grid_round_trip_is_bit_identical(data, seed):
    valid = np.random.default_rng(seed).random(data.shape[:2]) > 0.5
    g = decode_grid(encode_grid(data, valid))
    assert g.data.tobytes() == data.tobytes() and np.array_equal(g.valid, valid)


def test_grid_file_layout(tmp_path):
    data = np.arange(12, dtype=np.float32).reshape(2, 3, 2)
    valid = np.array([[1, 0, 1], [1, 1, 0]], bool)
    write_grid(tmp_path / "g.d4rg", data, valid)
    blob = (tmp_path / "g.d4rg").read_bytes()
    assert blob[:4] == b"D4RG" and len(blob) == 20 + 12 * 4 + 6
    assert np.array_equal(np.frombuffer(blob[-6:], np.uint8), valid.ravel().astype(np.uint8))
    g = read_grid(tmp_path / "g.d4rg")
    assert g.channels == 2 and np.array_equal(g.data, data)
    write_grid(tmp_path / "d.d4rg", np.ones((2, 2)))
    assert read_grid(tmp_path / "d.d4rg").squeeze().shape == (2, 2)


def test_grid_errors_name_the_file(tmp_path):
    blob = encode_grid(np.ones((4, 4, 2)))
    (tmp_path / "cut.d4rg").write_bytes(blob[:-3])
    with pytest.raises(TruncatedFile, match="cut.d4rg"):
        read_grid(tmp_path / "cut.d4rg")
    (tmp_path / "bad.d4rg").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(BadMagic, match="bad.d4rg"):
        read_grid(tmp_path / "bad.d4rg")
    with pytest.raises(TruncatedFile):
        decode_grid(blob[:10])
    with pytest.raises(ValueError):
        encode_grid(np.ones((2, 2)), np.ones((3, 3), bool))


def test_pgm_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.integers(0, 256, (7, 5), dtype=np.uint8)
    write_pgm(tmp_path / "a.pgm", img)
    assert np.array_equal(read_pgm(tmp_path / "a.pgm"), img)
    write_pgm(tmp_path / "b.pgm", np.array([[0.0, 0.5, 1.0, 2.0]]))
    assert read_pgm(tmp_path / "b.pgm").tolist() == [[0, 128, 255, 255]]
    write_pgm(tmp_path / "m.pgm", np.array([[True, False]]))
    assert read_pgm(tmp_path / "m.pgm").tolist() == [[255, 0]]
    (tmp_path / "c.pgm").write_bytes(b"P5\n# comment\n2 1\n255\n" + bytes([3, 4]))
    assert read_pgm(tmp_path / "c.pgm").tolist() == [[3, 4]]
    (tmp_path / "d.pgm").write_bytes(b"P5\n4 4\n255\n" + bytes(3))
    with pytest.raises(TruncatedFile):
        read_pgm(tmp_path / "d.pgm")
    (tmp_path / "e.pgm").write_bytes(b"P2\n1 1\n255\n0")
    with pytest.raises(BadMagic):
        read_pgm(tmp_path / "e.pgm")


@pytest.mark.parametrize("binary", [True, False])
def test_ply_round_trip(tmp_path, binary):
    rng = np.random.default_rng(1)
    n = 50
    pts = rng.normal(size=(n, 3)).astype(np.float32)
    conf = rng.uniform(1, 10, n).astype(np.float32)
    sensor = rng.integers(0, 6, n)
    ti = rng.integers(0, 5, n)
    write_ply(tmp_path / "c.ply", pts, conf, sensor, ti, binary=binary)
    rec = read_ply(tmp_path / "c.ply")
    assert rec.dtype.names == ("x", "y", "z", "confidence", "sensor", "time_index")
    assert np.array_equal(np.stack([rec["x"], rec["y"], rec["z"]], 1), pts)
    assert np.array_equal(rec["confidence"], conf)
    assert np.array_equal(rec["sensor"], sensor) and np.array_equal(rec["time_index"], ti)


def test_ply_empty_and_errors(tmp_path):
    write_ply(tmp_path / "e.ply", np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0))
    assert len(read_ply(tmp_path / "e.ply")) == 0
    write_ply(tmp_path / "f.ply", np.ones((4, 3)), np.ones(4), np.zeros(4), np.zeros(4))
    blob = (tmp_path / "f.ply").read_bytes()
    (tmp_path / "g.ply").write_bytes(blob[:-5])
    with pytest.raises(TruncatedFile):
        read_ply(tmp_path / "g.ply")
    (tmp_path / "h.ply").write_bytes(b"not a ply")
    with pytest.raises(BadMagic):
        read_ply(tmp_path / "h.ply")


def test_json_is_deterministic(tmp_path):
    write_json(tmp_path / "a.json", {"b": 1, "a": [1.5, 2]})
    assert (tmp_path / "a.json").read_text() == '{\n  "a": [\n    1.5,\n    2\n  ],\n  "b": 1\n}\n'
    (tmp_path / "bad.json").write_text("{")
    with pytest.raises(MalformedManifest, match="bad.json"):
        read_json(tmp_path / "bad.json")


def test_manifest_loads(manifest, scene):
    assert manifest.num_sensors == 6 and manifest.timestamps == scene.timestamps
    rec = manifest.frame(2, 3)
    assert rec.image.is_file() and rec.depth.is_file() and rec.flow_forward.is_file()
    assert manifest.frame(4, 0).flow_forward is None
    assert np.allclose(rec.pose.matrix, scene.camera_pose(2, 3).matrix)


def edited_manifest(dataset, tmp_path, edit):
    root = tmp_path / "copy"
    shutil.copytree(dataset.parent, root)
    path = root / dataset.name
    d = json.loads(path.read_text())
    edit(d, root)
    path.write_text(json.dumps(d))
    return path


def test_manifest_missing_file_is_named(dataset, tmp_path):
    def drop(d, root):
        (root / d["root"] / d["frames"][3]["image"]).unlink()
    path = edited_manifest(dataset, tmp_path, drop)
    with pytest.raises(MalformedManifest, match=r"frames\[3\] references missing file"):
        load_manifest(path)


@pytest.mark.parametrize("edit,message", [
    (lambda d, r: d.update(timestamps=d["timestamps"][::-1]), "strictly increasing"),
    (lambda d, r: d["frames"].pop(), "no frame for"),
    (lambda d, r: d["frames"].append(dict(d["frames"][0])), "duplicate frame"),
    (lambda d, r: d["sensors"][1].update(id=0), "duplicate sensor"),
    (lambda d, r: d.pop("sensors"), "missing 'sensors'"),
    (lambda d, r: d["frames"][0].pop("pose"), "missing 'pose'"),
    (lambda d, r: d.update(stage="diagonal"), "unknown stage"),
])
def test_manifest_validation(dataset, tmp_path, edit, message):
    with pytest.raises(MalformedManifest, match=message):
        load_manifest(edited_manifest(dataset, tmp_path, edit))


def test_missing_manifest(tmp_path):
    with pytest.raises(MalformedManifest, match="not found"):
        load_manifest(tmp_path / "nothing.json")


def test_run_config(tmp_path):
    cfg = RunConfig()
    assert (cfg.working_frames, cfg.related_timestamps, cfg.capacity, cfg.tau, cfg.gamma, cfg.alpha) == \
        (5, 4, 4096, 1.5, 1.5, 0.5)
    assert RunConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.replace(tau=2.0, gamma=None).tau == 2.0
    for bad in ({"tau": 0}, {"capacity": 0}, {"stage": "both"}, {"bogus": 1}, {"backbone": "vit"}):
        with pytest.raises(ConfigError):
            RunConfig.from_dict({**cfg.to_dict(), **bad})
    (tmp_path / "c.json").write_text('{"tau": 2.5}')
    assert RunConfig.load(tmp_path / "c.json").tau == 2.5
    (tmp_path / "l.json").write_text("[1]")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "l.json")
    with pytest.raises(ConfigError):
        RunConfig.load(tmp_path / "none.json")
