"""Scene manifests, PNG frames and the synthetic toy-head scene."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import geometry
from .field import EncodingConfig, Phase, RadianceField
from .head import FaceParams, HeadModelAssets, deform, make_toy_head, save_assets
from .render import Camera, RenderSettings, render_image
from .training import Dataset

ASSET_FILE = "assets.head"
GT_FILE = "gt_params.json"


class MissingFileError(FileNotFoundError):
    pass


class ManifestError(ValueError):
    pass


# ---------------------------------------------------------------------------
# PNG frames (straight alpha on disk, premultiplied in memory)

def to_uint8_rgba(img) -> np.ndarray:
    img = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    alpha = img[..., 3:4]
    straight = np.divide(img[..., :3], alpha, out=np.zeros_like(img[..., :3]), where=alpha > 0)
    out = np.concatenate([np.clip(straight, 0.0, 1.0), alpha], axis=-1)
    return np.round(out * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    Image.fromarray(to_uint8_rgba(img), mode="RGBA").save(path)


def read_png(path) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"image not found: {path}")
    arr = np.asarray(Image.open(path).convert("RGBA"), dtype=np.float64) / 255.0
    arr[..., :3] *= arr[..., 3:4]
    return arr


# ---------------------------------------------------------------------------
# manifests in the synthetic-NeRF "transforms" layout

@dataclass
class SceneManifest:
    camera_angle_x: float
    frames: list  # (file path, 4x4 camera-to-world)
    width: int
    height: int
    root: Path

    def cameras(self) -> list[Camera]:
        return [Camera.from_fov(self.width, self.height, self.camera_angle_x, m) for _, m in self.frames]


def write_manifest(path, camera_angle_x, frames, width, height, extra=None) -> None:
    """``frames`` holds ``(relative path without extension, c2w)`` pairs."""
    doc = {
        "camera_angle_x": float(camera_angle_x),
        "w": int(width),
        "h": int(height),
        "frames": [{"file_path": f"./{p}", "transform_matrix": np.asarray(m).tolist()} for p, m in frames],
    }
    doc.update(extra or {})
    Path(path).write_text(json.dumps(doc, indent=2))


def _resolve(root: Path, file_path: str) -> Path:
    p = root / file_path
    return p if p.suffix else p.with_suffix(".png")


def load_manifest(path) -> SceneManifest:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
        angle = float(doc["camera_angle_x"])
        raw_frames = doc["frames"]
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise ManifestError(f"{path}: malformed manifest ({exc})") from None
    frames = []
    for k, fr in enumerate(raw_frames):
        try:
            m = np.asarray(fr["transform_matrix"], dtype=np.float64)
        except (KeyError, ValueError) as exc:
            raise ManifestError(f"{path}: frame {k}: bad transform ({exc})") from None
        if m.shape != (4, 4):
            raise ManifestError(f"{path}: frame {k}: transform must be 4x4")
        R = m[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-4 or np.abs(m[3] - [0, 0, 0, 1]).max() > 1e-4:
            raise ManifestError(f"{path}: frame {k}: transform is not rigid")
        img = _resolve(path.parent, fr["file_path"])
        if not img.exists():
            raise MissingFileError(f"{path}: frame {k}: image not found: {img}")
        # orthonormalise tiny drift so Camera accepts it
        u, _, vt = np.linalg.svd(R)
        m = m.copy()
        m[:3, :3] = u @ vt
        frames.append((img, m))
    if not frames:
        raise ManifestError(f"{path}: manifest lists no frames")
    if "w" in doc and "h" in doc:
        width, height = int(doc["w"]), int(doc["h"])
    else:
        with Image.open(frames[0][0]) as im:
            width, height = im.size
    return SceneManifest(angle, frames, width, height, path.parent)


def load_dataset(manifest: SceneManifest) -> Dataset:
    images = []
    for img_path, _ in manifest.frames:
        img = read_png(img_path)
        if img.shape[:2] != (manifest.height, manifest.width):
            raise ManifestError(f"{img_path}: size {img.shape[1]}x{img.shape[0]} differs from "
                                f"{manifest.width}x{manifest.height}")
        images.append(img)
    return Dataset(np.stack(images), manifest.cameras())


# ---------------------------------------------------------------------------
# synthetic scene

def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 1.0, 0.0)) -> np.ndarray:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    back = eye - target
    back /= np.linalg.norm(back)
    if abs(back @ up) > 0.999:
        up = np.array([0.0, 0.0, 1.0])
    right = np.cross(up, back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    m = np.eye(4)
    m[:3, 0], m[:3, 1], m[:3, 2], m[:3, 3] = right, true_up, back, eye
    return m


def random_sphere_poses(n, radius, rng) -> list[np.ndarray]:
    v = rng.normal(size=(n, 3))
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    return [look_at(radius * d) for d in v]


def orbit_poses(n, radius, elevation=0.2) -> list[np.ndarray]:
    out = []
    for k in range(n):
        a = 2 * np.pi * k / n
        eye = radius * np.array([np.sin(a) * np.cos(elevation), np.sin(elevation), np.cos(a) * np.cos(elevation)])
        out.append(look_at(eye))
    return out


def procedural_color(x) -> np.ndarray:
    """Smooth albedo-like color field used as ground truth."""
    x = np.atleast_2d(x)
    r = 0.55 + 0.35 * np.sin(2.5 * x[:, 0] + 3.0 * x[:, 1] + 1.0)
    g = 0.45 + 0.30 * np.sin(3.5 * x[:, 1] - 2.0 * x[:, 2] + 2.0)
    b = 0.40 + 0.30 * np.cos(2.0 * x[:, 2] - 3.0 * x[:, 0])
    return np.clip(np.stack([r, g, b], axis=1), 0.0, 1.0)


class _ProceduralNet:
    # stands in for color_net; reads raw positions from the encoding's leading columns
    def forward(self, enc):
        return procedural_color(enc[:, :3]), None

    def __call__(self, enc):
        return self.forward(enc)[0]


def ground_truth_field(eps: float) -> RadianceField:
    field = RadianceField.create(EncodingConfig(0, True), epsilon=eps, hidden=4, depth=1, skip=1)
    field.color_net = _ProceduralNet()
    field.phase = Phase.DISTANCE
    return field


DEFAULT_GT = FaceParams(beta=[0.25, -0.15], psi=[0.7, -0.5], phi=[0, 0, 0, 0, 0, 0])
SCENE_RADIUS = 4.0
SCENE_FOV = 0.6


def make_synthetic(out_dir, n_views=100, n_test=20, seed=0, size=200, eps=0.02,
                   samples=512, params: FaceParams | None = None, n_subdiv=3,
                   progress=None) -> dict:
    """Write a toy-head scene: assets, train/test PNGs, manifests, ground truth.

    Views are rendered with the analytic shell density at width ``eps`` and
    deterministic bin-midpoint sampling.
    """
    out = Path(out_dir)
    (out / "train").mkdir(parents=True, exist_ok=True)
    (out / "test").mkdir(parents=True, exist_ok=True)
    assets = make_toy_head(n_subdiv, seed)
    params = (params or DEFAULT_GT).copy()
    params.check(assets)
    save_assets(assets, out / ASSET_FILE)
    mesh = deform(assets, params)
    bvh = geometry.build_bvh(mesh)
    field = ground_truth_field(eps)
    settings = RenderSettings(samples_per_ray=samples, stratified=False, background=None,
                              near=SCENE_RADIUS - 1.2, far=SCENE_RADIUS + 1.2)
    rng = np.random.default_rng(seed)
    poses = random_sphere_poses(n_views + n_test, SCENE_RADIUS, rng)
    focal = 0.5 * size / np.tan(0.5 * SCENE_FOV)
    splits = {"train": poses[:n_views], "test": poses[n_views:]}
    for split, split_poses in splits.items():
        frames = []
        for k, c2w in enumerate(split_poses):
            cam = Camera(size, size, focal, c2w)
            img = render_image(field, mesh, cam, settings, bvh=bvh)
            rel = f"{split}/r_{k}"
            write_png(out / f"{rel}.png", img)
            frames.append((rel, c2w))
            if progress:
                progress(split, k)
        write_manifest(out / f"transforms_{split}.json", SCENE_FOV, frames, size, size,
                       extra={"near": settings.near, "far": settings.far})
    gt = {"params": params.to_dict(), "eps": eps, "seed": seed, "n_subdiv": n_subdiv,
          "size": size, "samples": samples}
    (out / GT_FILE).write_text(json.dumps(gt, indent=2))
    return gt


def load_gt_params(path) -> FaceParams:
    path = Path(path)
    if not path.exists():
        raise MissingFileError(f"ground-truth params not found: {path}")
    return FaceParams.from_dict(json.loads(path.read_text())["params"])


def load_scene_assets(data_dir) -> HeadModelAssets:
    from .head import load_assets

    p = Path(data_dir) / ASSET_FILE
    if not p.exists():
        raise MissingFileError(f"head assets not found: {p}")
    return load_assets(p)
