"""Pinhole rays, stratified sampling and emission-absorption compositing.

Images are kept premultiplied in memory: ``rgb`` is the composited color
over black and ``alpha`` the accumulated opacity. Straight alpha only
appears at the PNG boundary (see :mod:`meshfield.io`).
"""

from __future__ import annotations

from dataclasses import dataclass, field as dc_field
from typing import Callable

import numpy as np

from . import geometry
from .field import FieldEval, Phase, RadianceField, evaluate


@dataclass(frozen=True)
class Camera:
    width: int
    height: int
    focal: float
    c2w: np.ndarray  # (4, 4) camera-to-world, camera looks down -z with y up

    def __post_init__(self):
        if not self.focal > 0:
            raise ValueError("focal must be positive")
        c2w = np.asarray(self.c2w, dtype=np.float64)
        if c2w.shape == (3, 4):
            c2w = np.vstack([c2w, [0, 0, 0, 1]])
        if c2w.shape != (4, 4):
            raise ValueError(f"camera-to-world must be 4x4, got {c2w.shape}")
        R = c2w[:3, :3]
        if np.abs(R.T @ R - np.eye(3)).max() > 1e-6:
            raise ValueError("camera rotation block is not orthonormal")
        object.__setattr__(self, "c2w", c2w)

    @classmethod
    def from_fov(cls, width, height, camera_angle_x, c2w) -> Camera:
        return cls(width, height, 0.5 * width / np.tan(0.5 * camera_angle_x), c2w)

    @property
    def camera_angle_x(self) -> float:
        return float(2.0 * np.arctan(0.5 * self.width / self.focal))

    @property
    def position(self) -> np.ndarray:
        return self.c2w[:3, 3].copy()


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    t_near: float
    t_far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        if abs(np.linalg.norm(d) - 1.0) > 1e-9:
            raise ValueError("ray direction must be unit length")
        if not self.t_near < self.t_far:
            raise ValueError("t_near must be < t_far")
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)


CHUNK_SAMPLES = 1 << 16


@dataclass
class RenderSettings:
    samples_per_ray: int = 192
    stratified: bool = False
    background: tuple | None = (0.0, 0.0, 0.0)  # None = transparent
    seed: int = 0
    near: float = 2.8
    far: float = 5.2
    shell_clip: bool = True
    chunk: int = 4096  # rays per chunk, further capped by CHUNK_SAMPLES

    def __post_init__(self):
        if self.samples_per_ray < 1:
            raise ValueError("samples_per_ray must be >= 1")
        if self.chunk < 1:
            raise ValueError("chunk must be >= 1")
        if not self.near < self.far:
            raise ValueError("near must be < far")

    @property
    def rays_per_chunk(self) -> int:
        # network activations scale with samples, not rays
        return max(1, min(self.chunk, CHUNK_SAMPLES // self.samples_per_ray))

    @property
    def background_rgb(self) -> np.ndarray:
        return np.zeros(3) if self.background is None else np.asarray(self.background, dtype=np.float64)


def pixel_directions(camera: Camera) -> np.ndarray:
    """Camera-space unit directions, (H, W, 3); pixel (W/2, H/2) looks along -z."""
    i, j = np.meshgrid(np.arange(camera.width, dtype=np.float64),
                       np.arange(camera.height, dtype=np.float64), indexing="xy")
    d = np.stack([(i - 0.5 * camera.width) / camera.focal,
                  -(j - 0.5 * camera.height) / camera.focal,
                  -np.ones_like(i)], axis=-1)
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def generate_rays(camera: Camera):
    """World-space ``(origins, directions)``, each (H*W, 3) in row-major pixel order."""
    d_cam = pixel_directions(camera).reshape(-1, 3)
    dirs = d_cam @ camera.c2w[:3, :3].T
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.c2w[:3, 3], dirs.shape).copy()
    return origins, dirs


def camera_rays(camera: Camera, near: float, far: float) -> list[Ray]:
    origins, dirs = generate_rays(camera)
    return [Ray(o, d, near, far) for o, d in zip(origins, dirs)]


# ---------------------------------------------------------------------------
# sampling

_M64 = np.uint64(0xFFFFFFFFFFFFFFFF)


def _splitmix(x):
    x = (x + np.uint64(0x9E3779B97F4A7C15)) & _M64
    x = ((x ^ (x >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)) & _M64
    x = ((x ^ (x >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)) & _M64
    return x ^ (x >> np.uint64(31))


def hashed_uniform(seed: int, ray_ids, n: int) -> np.ndarray:
    """Uniforms in [0, 1) that depend only on (seed, ray id, sample index)."""
    with np.errstate(over="ignore"):
        ids = np.asarray(ray_ids, dtype=np.uint64).reshape(-1, 1)
        key = _splitmix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) ^ np.uint64(0x5851F42D4C957F2D))
        x = _splitmix(_splitmix(ids ^ key) + np.arange(n, dtype=np.uint64)[None, :])
    return (x >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def sample_stratified(t_near, t_far, n: int, u=None) -> np.ndarray:
    """One sample per bin of ``[t_near, t_far]``; ``u=None`` gives bin midpoints.

    ``t_near``/``t_far`` broadcast over rays; ``u`` is (rays, n) in [0, 1) or an
    ``np.random.Generator``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    t_near = np.atleast_1d(np.asarray(t_near, dtype=np.float64))
    t_far = np.atleast_1d(np.asarray(t_far, dtype=np.float64))
    rays = max(len(t_near), len(t_far))
    if u is None:
        u = np.full((rays, n), 0.5)
    elif isinstance(u, np.random.Generator):
        u = u.random((rays, n))
    step = (t_far - t_near) / n
    return t_near[:, None] + (np.arange(n)[None, :] + u) * step[:, None]


def deltas(t, t_far) -> np.ndarray:
    """Spacing between samples; the last interval runs to ``t_far``."""
    t = np.atleast_2d(t)
    far = np.broadcast_to(np.asarray(t_far, dtype=np.float64), (t.shape[0],))
    return np.concatenate([np.diff(t, axis=1), (far - t[:, -1])[:, None]], axis=1)


# ---------------------------------------------------------------------------
# compositing

@dataclass
class CompositeCache:
    sigma: np.ndarray
    rgb: np.ndarray
    delta: np.ndarray
    trans: np.ndarray  # (R, N + 1), T_1 .. T_{N+1}
    weights: np.ndarray


def composite(sigma, rgb, delta, record=False):
    """Quadrature over samples; returns ``(color (R, 3), alpha (R,))`` [+ cache].

    Inputs are (R, N), (R, N, 3), (R, N); a single ray may drop the leading axis.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    single = sigma.ndim == 1
    sigma = np.atleast_2d(sigma)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(sigma.shape + (3,))
    delta = np.asarray(delta, dtype=np.float64).reshape(sigma.shape)
    tau = sigma * delta
    acc = np.concatenate([np.zeros((len(tau), 1)), np.cumsum(tau, axis=1)], axis=1)
    trans = np.exp(-acc)
    weights = trans[:, :-1] * -np.expm1(-tau)
    color = np.einsum("rn,rnc->rc", weights, rgb)
    alpha = 1.0 - trans[:, -1]
    if single:
        color, alpha = color[0], alpha[0]
    if record:
        return color, alpha, CompositeCache(sigma, rgb, delta, trans, weights)
    return color, alpha


def composite_backward(cache: CompositeCache, g_color, g_alpha):
    """Gradients w.r.t. sigma (R, N) and rgb (R, N, 3)."""
    g_color = np.atleast_2d(g_color)
    g_alpha = np.atleast_1d(g_alpha)
    g_rgb = cache.weights[:, :, None] * g_color[:, None, :]
    # each sample acts like color channel c_i plus an alpha channel of value 1
    e = np.einsum("rnc,rc->rn", cache.rgb, g_color) + g_alpha[:, None]
    we = cache.weights * e
    suffix = np.cumsum(we[:, ::-1], axis=1)[:, ::-1]
    after = np.concatenate([suffix[:, 1:], np.zeros((len(we), 1))], axis=1)
    g_tau = cache.trans[:, 1:] * e - after
    return g_tau * cache.delta, g_rgb


def over_background(color, alpha, background) -> np.ndarray:
    bg = np.zeros(3) if background is None else np.asarray(background, dtype=np.float64)
    return color + (1.0 - alpha)[..., None] * bg


# ---------------------------------------------------------------------------
# field rendering

@dataclass
class RayBatchTape:
    """Everything the training backward pass needs from one rendered batch."""
    comp: CompositeCache
    cand: tuple  # indices (ray, sample) of evaluated samples
    ev: FieldEval


@dataclass
class RayBatchResult:
    color: np.ndarray  # (R, 3) premultiplied
    alpha: np.ndarray  # (R,)
    tape: RayBatchTape | None = None
    t: np.ndarray | None = None


def render_rays(field: RadianceField, bvh, mesh, origins, dirs, settings: RenderSettings,
                ray_ids=None, eps=None, phase=None, record=False,
                color_map: Callable | None = None, keep=None, near=None, far=None) -> RayBatchResult:
    """Render a batch of rays against ``mesh``.

    ``color_map(points, triangle_ids) -> points`` relocates color queries
    (retargeting). ``keep`` masks rays; dropped rays return zero color/alpha.
    """
    origins = np.asarray(origins, dtype=np.float64).reshape(-1, 3)
    dirs = np.asarray(dirs, dtype=np.float64).reshape(-1, 3)
    R, N = len(origins), settings.samples_per_ray
    eps = field.epsilon if eps is None else float(eps)
    near = settings.near if near is None else near
    far = settings.far if far is None else far
    if ray_ids is None:
        ray_ids = np.arange(R)
    u = hashed_uniform(settings.seed, ray_ids, N) if settings.stratified else None
    t = sample_stratified(np.full(R, near), np.full(R, far), N, u)
    delta = deltas(t, far)

    if settings.shell_clip:
        cand = geometry.shell_candidates(bvh, origins, dirs, t, eps)
    else:
        cand = np.ones((R, N), dtype=bool)
    if keep is not None:
        cand &= np.asarray(keep, dtype=bool)[:, None]
    ri, si = np.nonzero(cand)
    pts = origins[ri] + t[ri, si, None] * dirs[ri]

    color_pts = None
    if color_map is not None and len(pts):
        tri, _, dist = geometry.closest_points(bvh, mesh, pts, radius=eps)
        color_pts = pts.copy()
        inside = dist <= eps
        color_pts[inside] = color_map(pts[inside], tri[inside])
    ev = evaluate(field, bvh, mesh, pts, eps=eps, phase=phase, color_points=color_pts, record=record)

    sigma = np.zeros((R, N))
    rgb = np.zeros((R, N, 3))
    sigma[ri, si] = ev.sigma
    rgb[ri, si] = ev.rgb
    if record:
        color, alpha, comp = composite(sigma, rgb, delta, record=True)
        return RayBatchResult(color, alpha, RayBatchTape(comp, (ri, si), ev), t)
    color, alpha = composite(sigma, rgb, delta)
    return RayBatchResult(color, alpha, None, t)


def render_ray(field: RadianceField, bvh, mesh, ray: Ray, settings: RenderSettings, ray_id=0):
    """Single-ray convenience wrapper; returns ``(rgb, alpha)``."""
    res = render_rays(field, bvh, mesh, ray.origin[None], ray.direction[None], settings,
                      ray_ids=[ray_id], near=ray.t_near, far=ray.t_far)
    return res.color[0], float(res.alpha[0])


def render_image(field: RadianceField, mesh, camera: Camera, settings: RenderSettings,
                 bvh=None, **kwargs) -> np.ndarray:
    """Premultiplied RGBA image (H, W, 4); per-pixel rays are independent."""
    bvh = geometry.build_bvh(mesh) if bvh is None else bvh
    origins, dirs = generate_rays(camera)
    out = np.zeros((len(origins), 4))
    keep = kwargs.pop("keep", None)
    step = settings.rays_per_chunk
    for s in range(0, len(origins), step):
        sl = slice(s, s + step)
        res = render_rays(field, bvh, mesh, origins[sl], dirs[sl], settings,
                          ray_ids=np.arange(len(origins))[sl],
                          keep=None if keep is None else keep[sl], **kwargs)
        out[sl, :3] = res.color
        out[sl, 3] = res.alpha
    return out.reshape(camera.height, camera.width, 4)
