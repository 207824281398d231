"""Re-posing a trained field with per-triangle affine maps.

Density is evaluated on the modified mesh; color is looked up at the point
carried back onto the trained mesh by the affine map of the nearest
triangle. Each map is fixed by the triangle's three corners plus
corner-one-plus-unit-normal, which makes it exactly determined.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import geometry
from .field import Phase, RadianceField
from .head import FaceParams, HeadModelAssets, deform
from .render import Camera, RenderSettings, generate_rays, render_rays

MIN_AREA = 1e-12


class TopologyMismatchError(ValueError):
    pass


@dataclass(frozen=True)
class TriangleAffineMap:
    linear: np.ndarray  # (m, 3, 3)
    translation: np.ndarray  # (m, 3)
    degenerate: np.ndarray  # (m,) bool; identity was substituted

    def apply(self, points, triangle_ids) -> np.ndarray:
        A = self.linear[triangle_ids]
        return np.einsum("kab,kb->ka", A, points) + self.translation[triangle_ids]

    def __len__(self):
        return len(self.translation)


def _frames(corners, normals):
    # columns: edge 1, edge 2, unit normal
    return np.stack([corners[:, 1] - corners[:, 0], corners[:, 2] - corners[:, 0], normals], axis=2)


def estimate_affines(src_corners, src_normals, dst_corners, dst_normals) -> TriangleAffineMap:
    """Batched affine fit; inputs (m, 3, 3) corners and (m, 3) unit normals."""
    src_corners = np.asarray(src_corners, dtype=np.float64)
    dst_corners = np.asarray(dst_corners, dtype=np.float64)
    m = len(src_corners)
    area_s = 0.5 * np.linalg.norm(np.cross(src_corners[:, 1] - src_corners[:, 0],
                                           src_corners[:, 2] - src_corners[:, 0]), axis=1)
    area_d = 0.5 * np.linalg.norm(np.cross(dst_corners[:, 1] - dst_corners[:, 0],
                                           dst_corners[:, 2] - dst_corners[:, 0]), axis=1)
    bad = (area_s <= MIN_AREA) | (area_d <= MIN_AREA)
    linear = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    ok = ~bad
    if ok.any():
        S = _frames(src_corners[ok], np.asarray(src_normals)[ok])
        D = _frames(dst_corners[ok], np.asarray(dst_normals)[ok])
        # A S = D  ->  S^T A^T = D^T
        linear[ok] = np.swapaxes(np.linalg.solve(np.swapaxes(S, 1, 2), np.swapaxes(D, 1, 2)), 1, 2)
    translation = dst_corners[:, 0] - np.einsum("kab,kb->ka", linear, src_corners[:, 0])
    translation[bad] = 0.0
    return TriangleAffineMap(linear, translation, bad)


def estimate_triangle_affine(src_tri, src_normal, dst_tri, dst_normal):
    """Single-triangle fit; returns ``(linear (3, 3), translation (3,), degenerate flag)``."""
    out = estimate_affines(np.asarray(src_tri)[None], np.asarray(src_normal)[None],
                           np.asarray(dst_tri)[None], np.asarray(dst_normal)[None])
    return out.linear[0], out.translation[0], bool(out.degenerate[0])


def build_affine_field(mesh_new: geometry.TriangleMesh, mesh_orig: geometry.TriangleMesh) -> TriangleAffineMap:
    """Maps carrying each triangle of ``mesh_new`` onto the same-index triangle of ``mesh_orig``."""
    if not np.array_equal(mesh_new.triangles, mesh_orig.triangles):
        raise TopologyMismatchError("meshes do not share a triangle list")
    return estimate_affines(mesh_new.corners(), mesh_new.normals, mesh_orig.corners(), mesh_orig.normals)


def retarget_point(x, bvh_new, mesh_new, affine: TriangleAffineMap) -> np.ndarray:
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    tri, _, _ = geometry.closest_points(bvh_new, mesh_new, pts)
    out = affine.apply(pts, tri)
    return out[0] if np.ndim(x) == 1 else out


def filter_open_mouth_rays(origins, directions, bvh_new, mesh_new, t_near=0.0, t_far=np.inf) -> np.ndarray:
    """Keep-mask: rays whose first surface hit is front-facing.

    Rays that miss the surface or first meet a back face (they got in through
    an opening) are dropped.
    """
    _, tri, front = geometry.first_hits(bvh_new, mesh_new, origins, directions, t_near, t_far)
    return (tri >= 0) & front


def render_retargeted(field: RadianceField, assets: HeadModelAssets, trained_params: FaceParams,
                      new_params: FaceParams, camera: Camera, settings: RenderSettings,
                      density: str = "analytic", mouth_filter: bool = False) -> np.ndarray:
    """Premultiplied RGBA render of the field re-posed to ``new_params``."""
    if density not in ("analytic", "learned"):
        raise ValueError(f"density mode must be 'analytic' or 'learned', got {density!r}")
    mesh_orig = deform(assets, trained_params)
    mesh_new = deform(assets, new_params)
    bvh_new = geometry.build_bvh(mesh_new)
    affine = build_affine_field(mesh_new, mesh_orig)
    phase = Phase.DISTANCE if density == "analytic" else Phase.LEARNED

    origins, dirs = generate_rays(camera)
    keep = None
    if mouth_filter:
        keep = filter_open_mouth_rays(origins, dirs, bvh_new, mesh_new, settings.near, settings.far)
    out = np.zeros((len(origins), 4))
    ids = np.arange(len(origins))
    step = settings.rays_per_chunk
    for s in range(0, len(origins), step):
        sl = slice(s, s + step)
        res = render_rays(field, bvh_new, mesh_new, origins[sl], dirs[sl], settings, ray_ids=ids[sl],
                          phase=phase, color_map=affine.apply,
                          keep=None if keep is None else keep[sl])
        out[sl, :3] = res.color
        out[sl, 3] = res.alpha
    return out.reshape(camera.height, camera.width, 4)
