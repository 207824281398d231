"""Hybrid radiance field: mesh-distance shell density plus MLP color.

Two small ReLU MLPs share one frequency encoding of position. ``color_net``
ends in a sigmoid; ``density_net`` ends in a softplus and only matters once
the field is switched to learned density. Gradients are computed by hand:
each forward call returns a cache consumed by the matching backward call.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import geometry
from .container import read_container, write_container

CKPT_MAGIC = "MESHFIELD-CKPT v1"


class Phase(str, enum.Enum):
    DISTANCE = "distance"  # density = 1 - d/eps inside the shell
    LEARNED = "learned"  # density = softplus(density_net) inside the shell


@dataclass(frozen=True)
class EncodingConfig:
    num_frequencies: int = 6
    include_input: bool = True

    def __post_init__(self):
        if self.num_frequencies < 0:
            raise ValueError("num_frequencies must be >= 0")

    @property
    def width(self) -> int:
        return 3 * (int(self.include_input) + 2 * self.num_frequencies)


def encode(x, cfg: EncodingConfig) -> np.ndarray:
    """Frequency encoding ``[x, sin(2^0 pi x), cos(2^0 pi x), ...]`` per point."""
    x = np.asarray(x)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    parts = [x] if cfg.include_input else []
    for k in range(cfg.num_frequencies):
        arg = (2.0 ** k) * np.pi * x
        parts += [np.sin(arg), np.cos(arg)]
    out = np.concatenate(parts, axis=-1) if parts else np.zeros(x.shape[:-1] + (0,), x.dtype)
    return out[0] if single else out


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


class MLP:
    """ReLU MLP with the network input re-injected before one hidden layer.

    Parameters live in ``self.params`` as ``w0, b0, w1, ...``; the final layer
    is linear and followed by ``activation`` (``"sigmoid"`` or ``"softplus"``).
    """

    def __init__(self, in_dim, out_dim, hidden=128, depth=6, skip=3,
                 activation="sigmoid", rng=None, zero_output=False, dtype=np.float64):
        if activation not in ("sigmoid", "softplus"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_dim, self.out_dim = in_dim, out_dim
        self.hidden, self.depth, self.skip = hidden, depth, skip
        self.activation = activation
        rng = np.random.default_rng(0) if rng is None else rng
        self.params = {}
        dims_in = self.layer_inputs()
        for i, fan_in in enumerate(dims_in):
            fan_out = out_dim if i == depth else hidden
            bound = 1.0 / np.sqrt(fan_in)
            if i == depth and zero_output:
                w = np.zeros((fan_in, fan_out))
            else:
                w = rng.uniform(-bound, bound, (fan_in, fan_out))
            b = np.zeros(fan_out) if i == depth else rng.uniform(-bound, bound, fan_out)
            self.params[f"w{i}"] = w.astype(dtype)
            self.params[f"b{i}"] = b.astype(dtype)

    def layer_inputs(self):
        dims = []
        for i in range(self.depth + 1):
            if i == 0:
                dims.append(self.in_dim)
            elif i == self.skip:
                dims.append(self.hidden + self.in_dim)
            else:
                dims.append(self.hidden)
        return dims

    @property
    def dtype(self):
        return self.params["w0"].dtype

    def forward(self, inputs):
        """Returns ``(activated output, cache)``."""
        p = self.params
        inputs = np.asarray(inputs, dtype=self.dtype)
        h = inputs
        layer_in = []
        for i in range(self.depth):
            if i == self.skip and i > 0:
                h = np.concatenate([h, inputs], axis=1)
            layer_in.append(h)
            h = np.maximum(h @ p[f"w{i}"] + p[f"b{i}"], 0.0)
        if self.skip == self.depth:
            h = np.concatenate([h, inputs], axis=1)
        layer_in.append(h)
        z = h @ p[f"w{self.depth}"] + p[f"b{self.depth}"]
        out = sigmoid(z) if self.activation == "sigmoid" else softplus(z)
        return out, (layer_in, z, out)

    def __call__(self, inputs):
        return self.forward(inputs)[0]

    def backward(self, cache, grad_out) -> dict:
        """Parameter gradients given dL/d(activated output)."""
        layer_in, z, out = cache
        p = self.params
        grad_out = np.asarray(grad_out, dtype=self.dtype)
        if self.activation == "sigmoid":
            g = grad_out * out * (1.0 - out)
        else:
            g = grad_out * sigmoid(z)
        grads = {}
        for i in range(self.depth, -1, -1):
            h = layer_in[i]
            grads[f"w{i}"] = h.T @ g
            grads[f"b{i}"] = g.sum(axis=0)
            if i == 0:
                break
            gh = g @ p[f"w{i}"].T
            if i == self.skip:
                gh = gh[:, :self.hidden]
            # layer_in[i] is relu output of layer i-1 (minus any skip columns)
            g = gh * (layer_in[i][:, :self.hidden] > 0)
        return grads

    def copy(self) -> MLP:
        twin = object.__new__(MLP)
        twin.__dict__.update(self.__dict__)
        twin.params = {k: v.copy() for k, v in self.params.items()}
        return twin


@dataclass
class RadianceField:
    color_net: MLP
    density_net: MLP
    encoding: EncodingConfig = dc_field(default_factory=EncodingConfig)
    epsilon: float = 0.02
    phase: Phase = Phase.DISTANCE

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        self.phase = Phase(self.phase)

    @classmethod
    def create(cls, encoding=None, epsilon=0.02, hidden=128, depth=6, skip=3,
               seed=0, zero_output=False, dtype=np.float64) -> RadianceField:
        encoding = encoding or EncodingConfig()
        rng = np.random.default_rng(seed)
        kw = dict(hidden=hidden, depth=depth, skip=skip, rng=rng, zero_output=zero_output, dtype=dtype)
        color_net = MLP(encoding.width, 3, activation="sigmoid", **kw)
        density_net = MLP(encoding.width, 1, activation="softplus", **kw)
        return cls(color_net, density_net, encoding, float(epsilon))

    def parameters(self) -> dict:
        out = {f"color.{k}": v for k, v in self.color_net.params.items()}
        out.update({f"density.{k}": v for k, v in self.density_net.params.items()})
        return out

    def set_parameters(self, params: dict) -> None:
        for k, v in params.items():
            net, name = k.split(".", 1)
            target = self.color_net if net == "color" else self.density_net
            target.params[name] = v

    def copy(self) -> RadianceField:
        return RadianceField(self.color_net.copy(), self.density_net.copy(),
                             self.encoding, self.epsilon, self.phase)

    def color(self, x) -> np.ndarray:
        x = np.atleast_2d(x)
        return self.color_net(encode(x, self.encoding))


def color(x, field: RadianceField) -> np.ndarray:
    out = field.color(x)
    return out[0] if np.ndim(x) == 1 else out


def shell_density(d, eps):
    """1 - d/eps inside the shell, exactly 0 outside."""
    d = np.asarray(d, dtype=np.float64)
    return np.where(d > eps, 0.0, 1.0 - np.minimum(d, eps) / eps)


def density_phase1(x, bvh, mesh, eps):
    if not eps > 0:
        raise ValueError("eps must be positive")
    _, _, d = geometry.closest_points(bvh, mesh, x, radius=eps)
    sigma = shell_density(d, eps)
    return sigma[0] if np.ndim(x) == 1 else sigma


def density_phase2(x, bvh, mesh, eps, density_net: MLP, encoding: EncodingConfig):
    if not eps > 0:
        raise ValueError("eps must be positive")
    pts = np.atleast_2d(x)
    _, _, d = geometry.closest_points(bvh, mesh, pts, radius=eps)
    sigma = np.zeros(len(pts))
    inside = d <= eps
    if inside.any():
        sigma[inside] = density_net(encode(pts[inside], encoding))[:, 0]
    return sigma[0] if np.ndim(x) == 1 else sigma


@dataclass
class FieldEval:
    """Forward record for a set of sample points; consumed by :meth:`backward`."""
    points: np.ndarray  # (k, 3)
    shell: np.ndarray  # (k,) bool, d <= eps
    distance: np.ndarray  # (k,), inf outside the query radius
    triangle: np.ndarray  # (k,)
    barycentric: np.ndarray  # (k, 3)
    sigma: np.ndarray  # (k,)
    rgb: np.ndarray  # (k, 3), zeros outside the shell
    eps: float
    phase: Phase
    color_cache: tuple | None = None
    density_cache: tuple | None = None
    dist_grad: np.ndarray | None = None  # (s, 3) for shell points


def evaluate(field: RadianceField, bvh, mesh, points, eps=None, phase=None,
             color_points=None, record=False) -> FieldEval:
    """Density and color at ``points`` against ``mesh``.

    ``color_points`` (same length as ``points``) overrides where the color
    and learned-density networks are queried; retargeting passes the points
    mapped back to the trained pose.
    """
    eps = field.epsilon if eps is None else float(eps)
    phase = field.phase if phase is None else Phase(phase)
    points = np.ascontiguousarray(points, dtype=np.float64).reshape(-1, 3)
    k = len(points)
    tri, bary, dist = geometry.closest_points(bvh, mesh, points, radius=eps)
    shell = dist <= eps
    sigma = np.zeros(k)
    rgb = np.zeros((k, 3))
    ev = FieldEval(points, shell, dist, tri, bary, sigma, rgb, eps, phase)
    if not shell.any():
        return ev
    query = points[shell] if color_points is None else np.asarray(color_points)[shell]
    enc = encode(query, field.encoding)
    c, ccache = field.color_net.forward(enc)
    rgb[shell] = c
    if phase is Phase.DISTANCE:
        sigma[shell] = shell_density(dist[shell], eps)
        if record:
            _, ev.dist_grad = geometry.distance_gradients(mesh, points[shell], tri[shell], bary[shell])
    else:
        s, dcache = field.density_net.forward(enc)
        sigma[shell] = s[:, 0]
        ev.density_cache = dcache if record else None
    if record:
        ev.color_cache = ccache
    return ev


@dataclass
class FieldGrads:
    params: dict
    vertices: np.ndarray | None  # (n, 3) in the distance phase, else None


def field_backward(field: RadianceField, ev: FieldEval, g_sigma, g_rgb, mesh) -> FieldGrads:
    """Reverse pass from dL/dsigma (k,) and dL/drgb (k, 3) at the evaluated points."""
    grads = {k: np.zeros_like(v) for k, v in field.parameters().items()}
    verts = np.zeros((len(mesh.vertices), 3)) if ev.phase is Phase.DISTANCE else None
    shell = ev.shell
    if not shell.any():
        return FieldGrads(grads, verts)
    if ev.color_cache is None:
        raise RuntimeError("field evaluation was not recorded")
    gc = field.color_net.backward(ev.color_cache, np.asarray(g_rgb)[shell])
    grads.update({f"color.{k}": v for k, v in gc.items()})
    gs = np.asarray(g_sigma, dtype=np.float64)[shell]
    if ev.phase is Phase.DISTANCE:
        # sigma = 1 - d/eps  ->  dL/dd = -gs/eps ; dd/dv_k = -w_k (x - q)/d
        g_d = -gs / ev.eps
        g_x = g_d[:, None] * ev.dist_grad  # dL/dx through d
        corner = -ev.barycentric[shell][:, :, None] * g_x[:, None, :]  # (s, 3, 3)
        idx = mesh.triangles[ev.triangle[shell]].reshape(-1)
        flat = corner.reshape(-1, 3)
        n = len(mesh.vertices)
        for a in range(3):
            verts[:, a] = np.bincount(idx, weights=flat[:, a], minlength=n)
    else:
        gd = field.density_net.backward(ev.density_cache, gs[:, None])
        grads.update({f"density.{k}": v for k, v in gd.items()})
    return FieldGrads(grads, verts)


# ---------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, field: RadianceField, extra_meta: dict | None = None,
                    extra_arrays: dict | None = None) -> None:
    meta = {
        "encoding": {"num_frequencies": field.encoding.num_frequencies,
                     "include_input": field.encoding.include_input},
        "epsilon": field.epsilon,
        "phase": field.phase.value,
        "net": {"hidden": field.color_net.hidden, "depth": field.color_net.depth,
                "skip": field.color_net.skip},
    }
    meta.update(extra_meta or {})
    arrays = {k: (v, "f8") for k, v in field.parameters().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[k] = (v, "f8")
    write_container(path, CKPT_MAGIC, arrays, meta)


def load_checkpoint(path, dtype=np.float64):
    """Returns ``(field, meta, extra_arrays)``."""
    arrays, meta = read_container(path, CKPT_MAGIC)
    enc = EncodingConfig(**meta["encoding"])
    net = meta["net"]
    field = RadianceField.create(enc, meta["epsilon"], hidden=net["hidden"], depth=net["depth"],
                                 skip=net["skip"], dtype=dtype)
    field.phase = Phase(meta["phase"])
    names = set(field.parameters())
    missing = names - set(arrays)
    if missing:
        raise ValueError(f"{path}: checkpoint lacks weights {sorted(missing)[:3]}")
    field.set_parameters({k: arrays[k].astype(dtype) for k in names})
    extra = {k: v for k, v in arrays.items() if k not in names}
    return field, meta, extra
