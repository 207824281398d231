"""Two-phase joint fitting of the color network and the face parameters.

Steps are numbered from 1. Step ``it`` runs with distance density and
updates face parameters while ``it <= phase_switch_iter``; afterwards the
face parameters are frozen, density comes from ``density_net`` and the shell
width grows linearly to ``eps_final`` at ``it == total_iters``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field as dc_field, replace

import numpy as np

from . import geometry
from .field import Phase, RadianceField, field_backward
from .head import FaceParams, HeadModelAssets, deform, deform_jacobian
from .render import RenderSettings, composite_backward, generate_rays, over_background, render_rays

log = logging.getLogger(__name__)


class TrainingDivergedError(FloatingPointError):
    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


@dataclass
class TrainConfig:
    rays_per_batch: int = 1024
    lr_network: float = 5e-4
    lr_face: float = 5e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    total_iters: int = 20000
    phase_switch_iter: int = 10000
    eps0: float = 0.02
    eps_final: float = 0.1
    seed: int = 0

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)
        self.validate()

    def validate(self):
        if not 0 < self.eps0 <= self.eps_final:
            raise ValueError(f"need 0 < eps0 <= eps_final, got {self.eps0}, {self.eps_final}")
        if not 0 <= self.phase_switch_iter <= self.total_iters:
            raise ValueError("need 0 <= phase_switch_iter <= total_iters")
        if self.rays_per_batch < 1:
            raise ValueError("rays_per_batch must be >= 1")


@dataclass
class Dataset:
    """Posed RGBA views, premultiplied, all the same size."""
    images: np.ndarray  # (V, H, W, 4)
    cameras: list

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 4 or self.images.shape[-1] != 4:
            raise ValueError(f"images must be (V, H, W, 4), got {self.images.shape}")
        if len(self.cameras) != len(self.images):
            raise ValueError("one camera per image required")
        _, H, W, _ = self.images.shape
        for cam in self.cameras:
            if (cam.width, cam.height) != (W, H):
                raise ValueError("camera size does not match image size")
            if not np.all(np.isfinite(cam.c2w)):
                raise ValueError("non-finite camera matrix")
        rays = [generate_rays(c) for c in self.cameras]
        self.origins = np.concatenate([r[0] for r in rays])
        self.directions = np.concatenate([r[1] for r in rays])
        self.pixels = self.images.reshape(-1, 4)

    @property
    def image_size(self):
        return self.images.shape[2], self.images.shape[1]

    def __len__(self):
        return len(self.images)

    def targets(self, idx, background):
        px = self.pixels[idx]
        return over_background(px[:, :3], px[:, 3], background)


@dataclass
class TrainState:
    iteration: int
    field: RadianceField
    params: FaceParams
    moments: dict  # name -> (m, v); face params under "face"
    adam_t: dict  # name -> step count
    eps: float
    seed: int
    mesh: geometry.TriangleMesh | None = None
    bvh: geometry.Bvh | None = None

    def copy(self) -> TrainState:
        return replace(self, field=self.field.copy(), params=self.params.copy(),
                       moments={k: (m.copy(), v.copy()) for k, (m, v) in self.moments.items()},
                       adam_t=dict(self.adam_t))


@dataclass
class StepLog:
    iteration: int
    loss: float
    eps: float
    phase: str
    face: np.ndarray = dc_field(repr=False, default=None)


def init_state(field: RadianceField, params: FaceParams, assets: HeadModelAssets, cfg: TrainConfig) -> TrainState:
    state = TrainState(0, field, params.copy(), {}, {}, cfg.eps0, cfg.seed)
    mesh_refresh(state, assets)
    return state


def photometric_loss(rendered, target):
    """Total squared error over a batch and its gradient w.r.t. ``rendered``."""
    rendered = np.asarray(rendered, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if rendered.shape != target.shape:
        raise ValueError(f"batch shapes differ: {rendered.shape} vs {target.shape}")
    diff = rendered - target
    return float(np.sum(diff * diff)), 2.0 * diff


def epsilon_schedule(iteration: int, cfg: TrainConfig) -> float:
    if not 0 <= iteration <= cfg.total_iters:
        raise ValueError(f"iteration {iteration} outside [0, {cfg.total_iters}]")
    if iteration <= cfg.phase_switch_iter or cfg.total_iters == cfg.phase_switch_iter:
        return cfg.eps0
    s = (iteration - cfg.phase_switch_iter) / (cfg.total_iters - cfg.phase_switch_iter)
    # lerp form lands exactly on both endpoints
    return (1.0 - s) * cfg.eps0 + s * cfg.eps_final


def phase_at(iteration: int, cfg: TrainConfig) -> Phase:
    return Phase.DISTANCE if iteration <= cfg.phase_switch_iter else Phase.LEARNED


def adam_update(param, grad, moments, t, lr, betas=(0.9, 0.999), eps=1e-8):
    """One bias-corrected Adam step; ``t`` is the 1-based step count.

    Returns ``(new_param, (m, v))`` without touching the inputs.
    """
    b1, b2 = betas
    m, v = moments
    m = b1 * m + (1.0 - b1) * grad
    v = b2 * v + (1.0 - b2) * grad * grad
    m_hat = m / (1.0 - b1 ** t)
    v_hat = v / (1.0 - b2 ** t)
    return param - lr * m_hat / (np.sqrt(v_hat) + eps), (m, v)


def mesh_refresh(state: TrainState, assets: HeadModelAssets):
    state.mesh = deform(assets, state.params)
    state.bvh = geometry.build_bvh(state.mesh)
    return state.mesh, state.bvh


def batch_indices(dataset: Dataset, cfg: TrainConfig, iteration: int) -> np.ndarray:
    rng = np.random.default_rng([cfg.seed, iteration])
    return rng.integers(0, len(dataset.pixels), size=cfg.rays_per_batch)


def loss_and_grads(state: TrainState, assets, dataset: Dataset, idx, settings: RenderSettings,
                   eps: float, phase: Phase, want_face=True):
    """Forward + backward on the rays ``idx``.

    Returns ``(loss, network grads dict, face-param grad vector or None, render result)``.
    """
    res = render_rays(state.field, state.bvh, state.mesh, dataset.origins[idx], dataset.directions[idx],
                      settings, ray_ids=idx, eps=eps, phase=phase, record=True)
    bg = settings.background_rgb
    pred = over_background(res.color, res.alpha, bg)
    loss, g_pred = photometric_loss(pred, dataset.targets(idx, bg))
    g_sigma, g_rgb = composite_backward(res.tape.comp, g_pred, -(g_pred @ bg))
    ri, si = res.tape.cand
    fg = field_backward(state.field, res.tape.ev, g_sigma[ri, si], g_rgb[ri, si], state.mesh)
    face = None
    if want_face and phase is Phase.DISTANCE:
        jac = deform_jacobian(assets, state.params)
        face = np.einsum("na,nak->k", fg.vertices, jac)
    return loss, fg.params, face, res


def train_step(state: TrainState, assets: HeadModelAssets, dataset: Dataset, cfg: TrainConfig,
               settings: RenderSettings) -> tuple[TrainState, StepLog]:
    it = state.iteration + 1
    if it > cfg.total_iters:
        raise ValueError("training already finished")
    phase = phase_at(it, cfg)
    eps = epsilon_schedule(it, cfg)
    new = state.copy()
    new.field.phase = phase
    new.field.epsilon = eps
    step_settings = replace(settings, stratified=True, seed=int(cfg.seed * 1_000_003 + it))
    idx = batch_indices(dataset, cfg, it)
    loss, grads, face_grad, _ = loss_and_grads(new, assets, dataset, idx, step_settings, eps, phase)
    if not np.isfinite(loss):
        raise TrainingDivergedError(
            f"non-finite loss at iteration {it} (eps={eps}, phase={phase.value})",
            snapshot={"iteration": it, "params": state.params.to_dict(), "eps": eps})

    params = new.field.parameters()
    # only the networks that took part in this step move
    active = ("color.",) if phase is Phase.DISTANCE else ("color.", "density.")
    updated = {}
    for name, p in params.items():
        if not name.startswith(active):
            continue
        g = grads[name].astype(p.dtype, copy=False)
        t = new.adam_t.get(name, 0) + 1
        mom = new.moments.get(name, (np.zeros_like(p), np.zeros_like(p)))
        updated[name], new.moments[name] = adam_update(p, g, mom, t, cfg.lr_network,
                                                       cfg.adam_betas, cfg.adam_eps)
        new.adam_t[name] = t
    new.field.set_parameters(updated)

    if phase is Phase.DISTANCE:
        flat = new.params.flat()
        t = new.adam_t.get("face", 0) + 1
        mom = new.moments.get("face", (np.zeros_like(flat), np.zeros_like(flat)))
        flat, new.moments["face"] = adam_update(flat, face_grad, mom, t, cfg.lr_face,
                                                cfg.adam_betas, cfg.adam_eps)
        new.adam_t["face"] = t
        new.params = FaceParams.from_flat(flat, assets)
        mesh_refresh(new, assets)
    new.iteration = it
    new.eps = eps
    return new, StepLog(it, loss, eps, phase.value, new.params.flat())


def train(state: TrainState, assets, dataset, cfg: TrainConfig, settings: RenderSettings,
          until=None, callback=None, log_every=100):
    """Run steps up to ``until`` (default ``cfg.total_iters``); returns ``(state, logs)``."""
    until = cfg.total_iters if until is None else until
    logs = []
    while state.iteration < until:
        state, entry = train_step(state, assets, dataset, cfg, settings)
        logs.append(entry)
        if log_every and entry.iteration % log_every == 0:
            log.info("iter %d loss %.5f eps %.4f phase %s", entry.iteration, entry.loss, entry.eps, entry.phase)
        if callback is not None:
            callback(state, entry)
    return state, logs
