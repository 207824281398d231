import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from meshfield import geometry
from meshfield.data import SCENE_FOV, ground_truth_field, look_at
from meshfield.geometry import TriangleMesh
from meshfield.head import FaceParams, deform, rodrigues
from meshfield.metrics import psnr
from meshfield.render import Camera, RenderSettings, generate_rays, render_image, sample_stratified
from meshfield.retarget import (TopologyMismatchError, build_affine_field, estimate_affines,
                                estimate_triangle_affine, filter_open_mouth_rays, render_retargeted,
                                retarget_point)


def unit_normal(tri):
    n = np.cross(tri[1] - tri[0], tri[2] - tri[0])
    return n / np.linalg.norm(n)


def random_rotation(r):
    q = r.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([[1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
                     [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
                     [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)]])


def test_same_triangle_gives_identity(rng):
    tri = rng.normal(size=(3, 3))
    A, b, bad = estimate_triangle_affine(tri, unit_normal(tri), tri, unit_normal(tri))
    assert not bad
    assert np.allclose(A, np.eye(3), atol=1e-12) and np.allclose(b, 0, atol=1e-12)


def test_translation_is_recovered(rng):
    tri = rng.normal(size=(3, 3))
    A, b, _ = estimate_triangle_affine(tri, unit_normal(tri), tri + [1, 2, 3], unit_normal(tri))
    assert np.allclose(A, np.eye(3), atol=1e-12) and np.allclose(b, [1, 2, 3], atol=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_rotation_is_recovered(seed):
    r = np.random.default_rng(seed)
    tri = r.normal(size=(3, 3))
    R = random_rotation(r)
    A, b, _ = estimate_triangle_affine(tri, unit_normal(tri), tri @ R.T, R @ unit_normal(tri))
    assert np.max(np.abs(A - R)) < 1e-9 and np.max(np.abs(b)) < 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_affine_moves_all_four_correspondences(seed):
    r = np.random.default_rng(seed)
    tri = r.normal(size=(3, 3))
    if np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0])) < 0.1:
        return
    G = random_rotation(r) @ (np.eye(3) + np.triu(r.normal(size=(3, 3)) * 0.3, 1))
    g = r.normal(size=3)
    dst = tri @ G.T + g
    ns, nd = unit_normal(tri), unit_normal(dst)
    A, b, _ = estimate_triangle_affine(tri, ns, dst, nd)
    src4 = np.vstack([tri, tri[0] + ns])
    dst4 = np.vstack([dst, dst[0] + nd])
    assert np.max(np.abs(src4 @ A.T + b - dst4)) < 1e-9


def test_degenerate_triangle_gets_identity_and_flag():
    tri = np.array([[0, 0, 0], [1, 0, 0], [2, 0, 0.0]])
    out = estimate_affines(tri[None], np.zeros((1, 3)), tri[None] + 1, np.zeros((1, 3)))
    assert out.degenerate[0] and np.array_equal(out.linear[0], np.eye(3))


def test_same_mesh_gives_identity_field(toy_mesh):
    field = build_affine_field(toy_mesh, toy_mesh)
    assert np.allclose(field.linear, np.eye(3), atol=1e-12)
    assert np.allclose(field.translation, 0, atol=1e-12)
    assert not field.degenerate.any()


def test_rigid_motion_gives_inverse_rotation(toy_mesh, rng):
    R = random_rotation(rng)
    moved = TriangleMesh(toy_mesh.vertices @ R.T + [0.3, -0.2, 0.5], toy_mesh.triangles)
    field = build_affine_field(moved, toy_mesh)
    assert np.max(np.abs(field.linear - R.T)) < 1e-6


def test_topology_mismatch(toy_mesh):
    other = TriangleMesh(toy_mesh.vertices, toy_mesh.triangles[:, ::-1])
    with pytest.raises(TopologyMismatchError):
        build_affine_field(other, toy_mesh)


def test_jaw_open_is_local(toy_assets, toy_mesh):
    p = toy_assets.zero_params()
    p.psi[0] = 1.0
    opened = deform(toy_assets, p)
    field = build_affine_field(opened, toy_mesh)
    moved_v = np.linalg.norm(opened.vertices - toy_mesh.vertices, axis=1) > 0
    moved_t = moved_v[toy_mesh.triangles].any(axis=1)
    assert moved_t.any() and (~moved_t).any()
    assert np.max(np.abs(field.linear[~moved_t] - np.eye(3))) < 1e-6
    assert np.max(np.abs(field.translation[~moved_t])) < 1e-6
    assert np.max(np.abs(field.linear[moved_t] - np.eye(3))) > 1e-3


def test_retarget_point_identity(toy_mesh, toy_bvh, rng):
    field = build_affine_field(toy_mesh, toy_mesh)
    x = rng.uniform(-1, 1, (50, 3))
    assert np.allclose(retarget_point(x, toy_bvh, toy_mesh, field), x, atol=1e-12)


def test_surface_points_transport_barycentrically(toy_assets, toy_mesh, rng):
    p = toy_assets.zero_params()
    p.psi[:] = [0.8, -0.4]
    new = deform(toy_assets, p)
    bvh_new = geometry.build_bvh(new)
    field = build_affine_field(new, toy_mesh)
    tris = rng.integers(0, new.n_triangles, 200)
    b = rng.dirichlet([3, 3, 3], 200)
    on_new = np.einsum("kj,kja->ka", b, new.corners()[tris])
    got = field.apply(on_new, tris)
    want = np.einsum("kj,kja->ka", b, toy_mesh.corners()[tris])
    assert np.max(np.abs(got - want)) < 1e-6
    # retarget_point picks the nearest triangle; on-surface points stay on the trained surface
    mapped = retarget_point(on_new, bvh_new, new, field)
    _, _, d = geometry.closest_points(geometry.build_bvh(toy_mesh), toy_mesh, mapped)
    assert np.max(d) < 1e-6


def test_retarget_is_lipschitz(toy_assets, toy_mesh, rng):
    p = toy_assets.zero_params()
    p.psi[0] = 1.0
    new = deform(toy_assets, p)
    bvh = geometry.build_bvh(new)
    field = build_affine_field(new, toy_mesh)
    c = new.corners()[7].mean(0) + 0.01 * new.normals[7]
    x = np.stack([c, c + 1e-5 * rng.normal(size=3) / np.sqrt(3)])
    tri = geometry.closest_points(bvh, new, x)[0]
    assert tri[0] == tri[1]
    y = retarget_point(x, bvh, new, field)
    bound = np.linalg.norm(field.linear[tri[0]], 2) * np.linalg.norm(x[1] - x[0])
    assert np.linalg.norm(y[1] - y[0]) <= bound * (1 + 1e-9)


def test_mouth_filter_rules(toy_mesh, toy_bvh, rng):
    c = toy_mesh.centroid()
    O = np.array([c + [0, 0, 4.0], c, [5.0, 5.0, 5.0]])
    D = np.array([[0, 0, -1.0], [0, 0, 1.0], [0, 0, 1.0]])
    keep = filter_open_mouth_rays(O, D, toy_bvh, toy_mesh)
    assert keep.tolist() == [True, False, False]


def test_mouth_filter_drops_misses(toy_mesh, toy_bvh):
    O = np.tile([0.0, 0.0, 4.0], (10, 1))
    D = np.tile([0.0, 0.0, 1.0], (10, 1))
    assert not filter_open_mouth_rays(O, D, toy_bvh, toy_mesh).any()


@pytest.fixture(scope="module")
def gt():
    return ground_truth_field(0.05)


def _camera(size=32, eye=(0.0, 0.0, 4.0)):
    return Camera.from_fov(size, size, SCENE_FOV, look_at(eye))


def test_rigid_rotation_matches_counter_rotated_camera(toy_assets, gt):
    trained = toy_assets.zero_params()
    posed = toy_assets.zero_params()
    posed.phi[:3] = [0.0, 0.4, 0.0]
    settings = RenderSettings(samples_per_ray=128)
    cam = _camera()
    retargeted = render_retargeted(gt, toy_assets, trained, posed, cam, settings)
    # the root turns about its joint: move the camera by the inverse motion
    R, j = rodrigues(posed.phi[:3]), toy_assets.joints[0]
    inv = np.eye(4)
    inv[:3, :3], inv[:3, 3] = R.T, j - R.T @ j
    direct = render_image(gt, deform(toy_assets, trained), Camera(cam.width, cam.height, cam.focal,
                                                                  inv @ cam.c2w), settings)
    assert psnr(retargeted, direct) > 60.0


def test_jaw_open_leaves_other_pixels(toy_assets, gt):
    trained = toy_assets.zero_params()
    opened = toy_assets.zero_params()
    opened.psi[0] = 1.0
    settings = RenderSettings(samples_per_ray=128)
    cam = _camera(40, eye=(0.0, 0.0, 4.0))
    neutral = render_retargeted(gt, toy_assets, trained, trained, cam, settings)
    moved = render_retargeted(gt, toy_assets, trained, opened, cam, settings)
    # pixels whose near-shell samples only ever see unmoved triangles
    m0, m1 = deform(toy_assets, trained), deform(toy_assets, opened)
    moved_t = (np.linalg.norm(m1.vertices - m0.vertices, axis=1) > 0)[m0.triangles].any(axis=1)
    O, D = generate_rays(cam)
    t = sample_stratified(np.full(len(O), settings.near), np.full(len(O), settings.far), 128)
    pts = (O[:, None] + t[..., None] * D[:, None]).reshape(-1, 3)
    touched = np.zeros(len(O), bool)
    for mesh in (m0, m1):
        tri, _, _ = geometry.closest_points(geometry.build_bvh(mesh), mesh, pts, radius=0.06)
        hit = (tri >= 0) & moved_t[np.maximum(tri, 0)]
        touched |= hit.reshape(len(O), -1).any(axis=1)
    far = ~touched.reshape(40, 40)
    diff = np.abs(moved - neutral).max(axis=-1)
    assert far.sum() > 0.5 * far.size and diff[~far].max() > 1e-3
    assert diff[far].max() < 1e-3


def test_learned_density_mode_runs(toy_assets):
    field = ground_truth_field(0.05)
    p = toy_assets.zero_params()
    img = render_retargeted(field, toy_assets, p, p, _camera(12), RenderSettings(samples_per_ray=32),
                            density="learned", mouth_filter=True)
    assert img.shape == (12, 12, 4) and img[..., 3].max() > 0
    with pytest.raises(ValueError):
        render_retargeted(field, toy_assets, p, p, _camera(12), RenderSettings(), density="other")
