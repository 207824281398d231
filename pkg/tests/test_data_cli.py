import csv
import json
from pathlib import Path

import numpy as np
import pytest

from meshfield import cli
from meshfield.config import ConfigError, RunConfig, load_config, parse_config
from meshfield.container import ContainerError, read_container, write_container
from meshfield.data import (ManifestError, MissingFileError, load_manifest, look_at, read_png,
                            write_manifest, write_png)

TINY_CONFIG = {
    "train": {"rays_per_batch": 64},
    "render": {"samples_per_ray": 24},
    "network": {"num_frequencies": 2, "hidden": 8, "depth": 2, "skip": 1},
    "eval_samples": 24,
}


def run(argv, capsys=None):
    return cli.main([str(a) for a in argv])


# ---------------------------------------------------------------------------
# container

def test_container_round_trip(tmp_path):
    arrays = {"a": (np.arange(6.0).reshape(2, 3), "f8"), "b": (np.array(7), "i4")}
    write_container(tmp_path / "x.bin", "TEST1", arrays, {"k": 1})
    got, meta = read_container(tmp_path / "x.bin", "TEST1")
    assert meta == {"k": 1}
    assert np.array_equal(got["a"], arrays["a"][0]) and int(got["b"]) == 7


def test_container_rejects_wrong_magic_and_truncation(tmp_path):
    p = tmp_path / "x.bin"
    write_container(p, "TEST1", {"a": (np.ones(100), "f8")})
    with pytest.raises(ContainerError):
        read_container(p, "OTHER")
    raw = p.read_bytes()
    p.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(ContainerError, match="truncated"):
        read_container(p, "TEST1")


# ---------------------------------------------------------------------------
# PNG and manifests

def test_png_round_trip_premultiplied(tmp_path, rng):
    img = np.zeros((6, 5, 4))
    img[..., 3] = rng.integers(0, 256, (6, 5)) / 255.0
    img[..., :3] = rng.integers(0, 256, (6, 5, 3)) / 255.0 * img[..., 3:4]
    write_png(tmp_path / "a.png", img)
    back = read_png(tmp_path / "a.png")
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12
    assert np.all(back[..., :3] <= back[..., 3:4] + 1e-12)


def _write_frame(root, name):
    write_png(root / f"{name}.png", np.zeros((4, 4, 4)))


def test_manifest_loads_and_resolves_paths(tmp_path):
    _write_frame(tmp_path, "f0")
    write_manifest(tmp_path / "t.json", 0.6, [("f0", look_at((0, 0, 4)))], 4, 4)
    m = load_manifest(tmp_path / "t.json")
    assert m.width == 4 and len(m.cameras()) == 1
    assert m.frames[0][0] == tmp_path / "f0.png"


def test_manifest_rejects_non_rigid(tmp_path):
    _write_frame(tmp_path, "f0")
    bad = look_at((0, 0, 4))
    bad[:3, :3] *= 2.0
    write_manifest(tmp_path / "t.json", 0.6, [("f0", bad)], 4, 4)
    with pytest.raises(ManifestError, match="frame 0"):
        load_manifest(tmp_path / "t.json")


def test_manifest_missing_image(tmp_path):
    write_manifest(tmp_path / "t.json", 0.6, [("nope", look_at((0, 0, 4)))], 4, 4)
    with pytest.raises(MissingFileError, match="nope"):
        load_manifest(tmp_path / "t.json")


# ---------------------------------------------------------------------------
# config

def test_config_round_trip():
    cfg = parse_config(TINY_CONFIG)
    again = parse_config(json.loads(cfg.dumps()))
    assert again == cfg
    assert parse_config(json.loads(RunConfig().dumps())) == RunConfig()


@pytest.mark.parametrize("doc", [{"train": {"eps0": 0.5, "eps_final": 0.1}}, {"bogus": 1},
                                 {"render": {"samples_per_ray": 0}}, {"retarget_density": "x"}])
def test_config_rejects_bad_values(doc):
    with pytest.raises(ConfigError):
        parse_config(doc)


def test_load_config_invalid_json(tmp_path):
    (tmp_path / "c.json").write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(tmp_path / "c.json")


# ---------------------------------------------------------------------------
# CLI end to end on a tiny scene

@pytest.fixture(scope="module")
def flow(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.json").write_text(json.dumps(TINY_CONFIG))
    assert run(["make-synthetic", "--out", root / "scene", "--views", 3, "--test-views", 2,
                "--size", 16, "--subdiv", 2, "--samples", 64]) == 0
    assert run(["train", "--config", root / "cfg.json", "--data", root / "scene", "--out", root / "run",
                "--iters", 4, "--phase-switch", 2, "--checkpoint-every", 2]) == 0
    cam = {"transform_matrix": look_at((0.0, 0.5, 4.0)).tolist(), "w": 16, "h": 16}
    (root / "cam.json").write_text(json.dumps(cam))
    return root


def test_train_outputs(flow):
    run_dir = flow / "run"
    for f in ["model.ckpt", "config.json", "train_log.csv", "report/training.png",
              "checkpoints/iter_000002.ckpt", "checkpoints/iter_000004.ckpt"]:
        assert (run_dir / f).exists(), f
    rows = list(csv.DictReader(open(run_dir / "train_log.csv")))
    assert [int(r["iteration"]) for r in rows] == [1, 2, 3, 4]
    assert [r["phase"] for r in rows] == ["distance", "distance", "learned", "learned"]
    assert float(rows[-1]["eps"]) == 0.1
    # face params stop moving once the learned density takes over
    face = [[r[k] for k in r if k.startswith("face_")] for r in rows]
    assert face[1] == face[2] == face[3]


def test_eval_writes_csv_and_figures(flow):
    out = flow / "eval"
    assert run(["eval", "--config", flow / "cfg.json", flow / "run/model.ckpt",
                flow / "scene/transforms_test.json", "--out", out]) == 0
    rows = list(csv.DictReader(open(out / "metrics.csv")))
    assert [r["view"] for r in rows] == ["r_0", "r_1", "mean"]
    assert (out / "report/metrics.png").exists() and (out / "report/comparison.png").exists()


def test_render_is_byte_identical_on_rerun(flow):
    outs = []
    for k in range(2):
        out = flow / f"render{k}"
        assert run(["render", flow / "run/model.ckpt", "--camera", flow / "cam.json", "--out", out,
                    "--eval-samples", 24, "--save-float"]) == 0
        outs.append(out)
    for name in ["view_000.png", "view_000.npy"]:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes()


def test_animate_identity_keyframe_matches_render(flow):
    out_r, out_a = flow / "r_id", flow / "a_id"
    assert run(["render", flow / "run/model.ckpt", "--camera", flow / "cam.json", "--out", out_r,
                "--eval-samples", 24, "--save-float"]) == 0
    (flow / "keys.json").write_text(json.dumps({"keyframes": [{}, {"psi": [0.8, 0.0]}]}))
    # the trained field is in its learned-density phase, so retarget with that density
    assert run(["animate", flow / "run/model.ckpt", flow / "keys.json", "--camera", flow / "cam.json",
                "--out", out_a, "--eval-samples", 24, "--save-float", "--retarget-density", "learned"]) == 0
    a = np.load(out_a / "frame_0000.npy")
    r = np.load(out_r / "view_000.npy")
    assert np.max(np.abs(a - r)) < 1e-5
    assert np.max(np.abs(np.load(out_a / "frame_0001.npy") - r)) > 1e-3


def test_export_mesh(flow):
    assert run(["export-mesh", flow / "run/model.ckpt", "--out", flow / "m.obj"]) == 0
    text = (flow / "m.obj").read_text()
    assert text.count("\nf ") + text.startswith("f ") == 320


def test_missing_checkpoint_exit_code(tmp_path, capsys):
    assert run(["render", tmp_path / "none.ckpt"]) == cli.EXIT_CODES["missing-checkpoint"]
    assert "error: missing-checkpoint" in capsys.readouterr().err


def test_asset_mismatch_exit_code(flow, tmp_path, capsys):
    other = tmp_path / "other"
    assert run(["make-synthetic", "--out", other, "--views", 1, "--test-views", 1, "--size", 8,
                "--subdiv", 1, "--samples", 8, "--seed", 5]) == 0
    code = run(["export-mesh", flow / "run/model.ckpt", "--assets", other / "assets.head",
                "--out", tmp_path / "m.obj"])
    assert code == cli.EXIT_CODES["asset-mismatch"]
    assert "error: asset-mismatch" in capsys.readouterr().err


def test_malformed_config_exit_code(tmp_path, capsys):
    (tmp_path / "c.json").write_text(json.dumps({"train": {"eps0": -1}}))
    assert run(["render", "x.ckpt", "--config", tmp_path / "c.json"]) == cli.EXIT_CODES["malformed-config"]
    assert "error: malformed-config" in capsys.readouterr().err


def test_malformed_checkpoint_exit_code(tmp_path):
    (tmp_path / "bad.ckpt").write_bytes(b"garbage")
    assert run(["render", tmp_path / "bad.ckpt"]) == cli.EXIT_CODES["malformed-file"]


def test_missing_data_exit_code(tmp_path):
    assert run(["train", "--data", tmp_path / "nowhere", "--out", tmp_path / "r"]) == cli.EXIT_CODES["missing-file"]
