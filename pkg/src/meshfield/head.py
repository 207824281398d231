"""Parametric head model: linear blendshapes followed by linear blend skinning."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .container import ContainerError, read_container, write_container
from .geometry import TriangleMesh

HEAD_MAGIC = "MESHFIELD-HEAD v1"


class ParameterShapeError(ValueError):
    """Face parameter vectors do not match the bound head assets."""


class AssetValidationError(ValueError):
    """Head assets violate a structural invariant."""


@dataclass(frozen=True)
class HeadModelAssets:
    template_vertices: np.ndarray  # (n, 3)
    shape_basis: np.ndarray  # (n, 3, k_beta)
    expression_basis: np.ndarray  # (n, 3, k_psi)
    joints: np.ndarray  # (J, 3) rest positions
    parents: np.ndarray  # (J,) parent index, -1 for the root
    skinning_weights: np.ndarray  # (n, J)
    triangles: np.ndarray  # (m, 3)

    @property
    def n_vertices(self) -> int:
        return self.template_vertices.shape[0]

    @property
    def n_shape(self) -> int:
        return self.shape_basis.shape[2]

    @property
    def n_expression(self) -> int:
        return self.expression_basis.shape[2]

    @property
    def n_joints(self) -> int:
        return self.joints.shape[0]

    @property
    def n_pose(self) -> int:
        return 3 * self.n_joints

    def validate(self) -> None:
        n = self.n_vertices
        if self.template_vertices.ndim != 2 or self.template_vertices.shape[1] != 3:
            raise AssetValidationError(f"template: expected (n, 3), got {self.template_vertices.shape}")
        for name in ("shape_basis", "expression_basis"):
            b = getattr(self, name)
            if b.ndim != 3 or b.shape[:2] != (n, 3):
                raise AssetValidationError(f"{name}: expected ({n}, 3, k), got {b.shape}")
        J = self.joints.shape[0]
        if self.joints.shape != (J, 3) or self.parents.shape != (J,) or J == 0:
            raise AssetValidationError("joints/parents: inconsistent shapes")
        if self.skinning_weights.shape != (n, J):
            raise AssetValidationError(f"weights: expected ({n}, {J}), got {self.skinning_weights.shape}")
        if self.triangles.ndim != 2 or self.triangles.shape[1] != 3:
            raise AssetValidationError(f"triangles: expected (m, 3), got {self.triangles.shape}")
        if self.triangles.size and (self.triangles.min() < 0 or self.triangles.max() >= n):
            raise AssetValidationError(f"triangles: vertex index out of range [0, {n})")
        roots = np.flatnonzero(self.parents < 0)
        if roots.tolist() != [0]:
            raise AssetValidationError("parents: joint 0 must be the single root")
        for j in range(1, J):
            # parents precede children, which also rules out cycles
            if not 0 <= self.parents[j] < j:
                raise AssetValidationError(f"parents: joint {j} has parent {self.parents[j]}, not a tree in topological order")
        if (self.skinning_weights < 0).any():
            row = int(np.argwhere(self.skinning_weights < 0)[0, 0])
            raise AssetValidationError(f"weights: row {row} has a negative entry")
        sums = self.skinning_weights.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if bad.size:
            raise AssetValidationError(f"weights: row {bad[0]} sums to {sums[bad[0]]:.6g}, expected 1")

    def zero_params(self) -> FaceParams:
        return FaceParams(np.zeros(self.n_shape), np.zeros(self.n_expression), np.zeros(self.n_pose))


@dataclass
class FaceParams:
    beta: np.ndarray
    psi: np.ndarray
    phi: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.beta = np.asarray(self.beta, dtype=np.float64).reshape(-1)
        self.psi = np.asarray(self.psi, dtype=np.float64).reshape(-1)
        self.phi = np.asarray(self.phi, dtype=np.float64).reshape(-1)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.beta, self.psi, self.phi])

    @classmethod
    def from_flat(cls, vec, assets: HeadModelAssets) -> FaceParams:
        vec = np.asarray(vec, dtype=np.float64)
        kb, ke = assets.n_shape, assets.n_expression
        if vec.shape != (kb + ke + assets.n_pose,):
            raise ParameterShapeError(f"flat parameter vector has shape {vec.shape}")
        return cls(vec[:kb], vec[kb:kb + ke], vec[kb + ke:])

    def copy(self) -> FaceParams:
        return FaceParams(self.beta.copy(), self.psi.copy(), self.phi.copy())

    def to_dict(self) -> dict:
        return {"beta": self.beta.tolist(), "psi": self.psi.tolist(), "phi": self.phi.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> FaceParams:
        return cls(d["beta"], d["psi"], d.get("phi", []))

    def check(self, assets: HeadModelAssets) -> None:
        for name, got, want in (("beta", self.beta.size, assets.n_shape),
                                ("psi", self.psi.size, assets.n_expression),
                                ("phi", self.phi.size, assets.n_pose)):
            if got != want:
                raise ParameterShapeError(f"{name}: length {got}, assets expect {want}")


def skew(v):
    x, y, z = v
    return np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])


def rodrigues(r) -> np.ndarray:
    r = np.asarray(r, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        return np.eye(3) + skew(r)
    k = skew(r / theta)
    return np.eye(3) + np.sin(theta) * k + (1.0 - np.cos(theta)) * (k @ k)


def rodrigues_derivatives(r, R=None) -> np.ndarray:
    """dR/dr_c for c = 0, 1, 2, shape (3, 3, 3) indexed [c]."""
    r = np.asarray(r, dtype=np.float64)
    if R is None:
        R = rodrigues(r)
    t2 = r @ r
    eye = np.eye(3)
    if t2 < 1e-20:
        return np.stack([skew(eye[c]) for c in range(3)])
    out = np.empty((3, 3, 3))
    kr = skew(r)
    for c in range(3):
        w = np.cross(r, (eye - R) @ eye[c])
        out[c] = (r[c] * kr + skew(w)) @ R / t2
    return out


def _kinematics(assets: HeadModelAssets, phi):
    """Global rotations and posed joint positions for every joint."""
    J = assets.n_joints
    pose = phi.reshape(J, 3)
    local = np.stack([rodrigues(pose[j]) for j in range(J)])
    glob = np.empty_like(local)
    posed = np.empty((J, 3))
    for j in range(J):
        p = assets.parents[j]
        if p < 0:
            glob[j] = local[j]
            posed[j] = assets.joints[j]
        else:
            glob[j] = glob[p] @ local[j]
            posed[j] = glob[p] @ (assets.joints[j] - assets.joints[p]) + posed[p]
    return local, glob, posed


def _shaped(assets, params):
    return (assets.template_vertices
            + assets.shape_basis @ params.beta
            + assets.expression_basis @ params.psi)


def _per_joint_offsets(assets, shaped, glob, posed):
    # M_j(v) - v with M_j(v) = R_j v + (P_j - R_j J_j), shape (J, n, 3); exactly 0 at rest
    trans = posed - np.einsum("jab,jb->ja", glob, assets.joints)
    rot_minus_eye = glob - np.eye(3)
    return np.einsum("jab,nb->jna", rot_minus_eye, shaped) + trans[:, None]


def deform(assets: HeadModelAssets, params: FaceParams) -> TriangleMesh:
    params.check(assets)
    shaped = _shaped(assets, params)
    _, glob, posed = _kinematics(assets, params.phi)
    offsets = _per_joint_offsets(assets, shaped, glob, posed)
    verts = shaped + np.einsum("nj,jna->na", assets.skinning_weights, offsets)
    return TriangleMesh(verts, assets.triangles)


def _subtrees(parents):
    J = len(parents)
    member = np.zeros((J, J), dtype=bool)  # member[a, j]: j in subtree of a
    for j in range(J):
        k = j
        while k >= 0:
            member[k, j] = True
            k = parents[k]
    return member


def deform_jacobian(assets: HeadModelAssets, params: FaceParams) -> np.ndarray:
    """Derivatives of posed vertices, shape (n, 3, k_beta + k_psi + k_phi).

    Columns follow ``FaceParams.flat`` ordering.
    """
    params.check(assets)
    shaped = _shaped(assets, params)
    local, glob, posed = _kinematics(assets, params.phi)
    W = assets.skinning_weights
    # blended rotation per vertex carries the blendshape directions
    blend_rot = np.eye(3) + np.einsum("nj,jab->nab", W, glob - np.eye(3))
    d_beta = np.einsum("nab,nbk->nak", blend_rot, assets.shape_basis)
    d_psi = np.einsum("nab,nbk->nak", blend_rot, assets.expression_basis)

    per_joint = shaped[None] + _per_joint_offsets(assets, shaped, glob, posed)
    member = _subtrees(assets.parents)
    J = assets.n_joints
    n = assets.n_vertices
    d_phi = np.zeros((n, 3, 3 * J))
    pose = params.phi.reshape(J, 3)
    for a in range(J):
        p = assets.parents[a]
        parent_rot = glob[p] if p >= 0 else np.eye(3)
        dR = rodrigues_derivatives(pose[a], local[a])
        w_sub = W[:, member[a]]  # (n, |subtree|)
        rel = per_joint[member[a]] - posed[a]  # (|subtree|, n, 3)
        for c in range(3):
            omega = parent_rot @ dR[c] @ local[a].T @ parent_rot.T
            d_phi[:, :, 3 * a + c] = np.einsum("ns,sna->na", w_sub, rel @ omega.T)
    return np.concatenate([d_beta, d_psi, d_phi], axis=2)


# ---------------------------------------------------------------------------
# synthetic toy head

def _icosphere(n_subdiv):
    t = (1.0 + 5 ** 0.5) / 2.0
    verts = [(-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
             (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
             (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1)]
    verts = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in verts]
    faces = [(0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
             (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
             (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
             (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1)]
    for _ in range(n_subdiv):
        cache = {}

        def midpoint(a, b):
            key = (a, b) if a < b else (b, a)
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        new_faces = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            new_faces += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = new_faces
    return np.array(verts), np.array(faces, dtype=np.int64)


def _smoothstep(e0, e1, x):
    s = np.clip((x - e0) / (e1 - e0), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def _f32(a):
    # keeps the toy asset exactly representable in the float32 file payload
    return np.asarray(a, dtype=np.float32).astype(np.float64)


def make_toy_head(n_subdiv: int = 3, seed: int = 0) -> HeadModelAssets:
    """Ellipsoidal icosphere head, face toward +z, y up.

    Two shape bases (height, width), two expression bases (jaw open, smile),
    two joints (neck root, jaw).
    """
    if n_subdiv < 0:
        raise ValueError("n_subdiv must be >= 0")
    rng = np.random.default_rng(seed)
    unit, tris = _icosphere(n_subdiv)
    # low-frequency seeded bumps on the radius
    coef = rng.normal(scale=0.02, size=(3, 3))
    bump = 1.0 + sum(coef[i, 0] * np.sin((i + 1) * np.pi * unit[:, 0] + coef[i, 1] * 10)
                     * np.cos((i + 1) * np.pi * unit[:, 1] + coef[i, 2] * 10) for i in range(3))
    verts = unit * bump[:, None] * np.array([0.75, 0.95, 0.85])
    x, y, z = verts.T

    joints = np.array([[0.0, -0.75, -0.1], [0.0, -0.05, -0.15]])
    parents = np.array([-1, 0])
    jaw = _smoothstep(-0.15, -0.45, y) * _smoothstep(-0.25, 0.15, z)
    weights = np.stack([1.0 - jaw, jaw], axis=1)

    shape_basis = np.zeros((len(verts), 3, 2))
    shape_basis[:, 1, 0] = 0.2 * y
    shape_basis[:, 0, 1] = 0.2 * x

    expr = np.zeros((len(verts), 3, 2))
    mouth = _smoothstep(-0.1, -0.5, y) * _smoothstep(0.2, 0.55, z)
    expr[:, 1, 0] = -0.2 * mouth
    expr[:, 2, 0] = 0.06 * mouth
    for sx in (-1.0, 1.0):
        r2 = ((x - 0.3 * sx) ** 2 + (y + 0.35) ** 2 + (z - 0.65) ** 2) / 0.35 ** 2
        bumpm = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)
        expr[:, 0, 1] += 0.15 * sx * bumpm
        expr[:, 1, 1] += 0.12 * bumpm

    assets = HeadModelAssets(
        template_vertices=_f32(verts),
        shape_basis=_f32(shape_basis),
        expression_basis=_f32(expr),
        joints=_f32(joints),
        parents=parents.astype(np.int64),
        skinning_weights=_f32(weights),  # rows sum to 1 within float32 rounding
        triangles=tris,
    )
    assets.validate()
    return assets


# ---------------------------------------------------------------------------
# file io

def save_assets(assets: HeadModelAssets, path) -> None:
    write_container(path, HEAD_MAGIC, {
        "template": (assets.template_vertices, "f4"),
        "shape_basis": (assets.shape_basis, "f4"),
        "expression_basis": (assets.expression_basis, "f4"),
        "joints": (assets.joints, "f4"),
        "parents": (assets.parents, "i4"),
        "weights": (assets.skinning_weights, "f4"),
        "triangles": (assets.triangles, "i4"),
    })


def load_assets(path) -> HeadModelAssets:
    arrays, _ = read_container(path, HEAD_MAGIC)
    names = ("template", "shape_basis", "expression_basis", "joints", "parents", "weights", "triangles")
    for name in names:
        if name not in arrays:
            raise ContainerError(f"{Path(path)}: field {name}: missing")
    f = {k: arrays[k].astype(np.float64) for k in names if k not in ("parents", "triangles")}
    assets = HeadModelAssets(
        template_vertices=f["template"],
        shape_basis=f["shape_basis"],
        expression_basis=f["expression_basis"],
        joints=f["joints"],
        parents=arrays["parents"].astype(np.int64),
        skinning_weights=f["weights"],
        triangles=arrays["triangles"].astype(np.int64),
    )
    assets.validate()
    return assets
