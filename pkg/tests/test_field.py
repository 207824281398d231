import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from meshfield import geometry
from meshfield.field import (MLP, EncodingConfig, Phase, RadianceField, color, density_phase1,
                             density_phase2, encode, evaluate, field_backward, load_checkpoint,
                             save_checkpoint, shell_density)
from meshfield.geometry import TriangleMesh
from meshfield.training import adam_update

from conftest import rel_err


def test_encode_origin():
    e = encode(np.zeros(3), EncodingConfig(2, True))
    assert e.shape == (15,)
    assert np.all(e[:3] == 0)
    sines = np.concatenate([e[3:6], e[9:12]])
    cosines = np.concatenate([e[6:9], e[12:15]])
    assert np.all(sines == 0) and np.all(cosines == 1)


def test_encode_without_frequencies_is_identity(rng):
    x = rng.normal(size=(7, 3))
    assert np.array_equal(encode(x, EncodingConfig(0, True)), x)


@given(st.integers(0, 10), st.booleans())
def test_encoding_width_formula(L, include):
    cfg = EncodingConfig(L, include)
    assert encode(np.ones((2, 3)), cfg).shape == (2, 3 * (int(include) + 2 * L)) == (2, cfg.width)


def test_shell_density_values():
    eps = 0.02
    assert shell_density(np.array([0.0]), eps)[0] == 1.0
    assert shell_density(np.array([2 * eps]), eps)[0] == 0.0
    assert shell_density(np.array([eps / 2]), eps)[0] == 0.5
    assert shell_density(np.array([eps]), eps)[0] == 0.0


def test_density_phase1_on_mesh(toy_mesh, toy_bvh):
    n = toy_mesh.normals[10]
    c = toy_mesh.corners()[10].mean(0)
    x = np.stack([c, c + 0.01 * n, c + 0.04 * n])
    s = density_phase1(x, toy_bvh, toy_mesh, 0.02)
    assert s[0] == pytest.approx(1.0, abs=1e-12)
    assert s[1] == pytest.approx(0.5, abs=1e-9)
    assert s[2] == 0.0


def test_density_phase2_zero_output_is_ln2(toy_mesh, toy_bvh):
    field = RadianceField.create(EncodingConfig(4), 0.02, hidden=16, depth=3, skip=2, zero_output=True)
    x = toy_mesh.vertices[:20]
    s = density_phase2(x, toy_bvh, toy_mesh, 0.02, field.density_net, field.encoding)
    assert np.allclose(s, math.log(2.0), atol=1e-15)


def test_compact_support_both_paths(toy_mesh, toy_bvh, rng):
    field = RadianceField.create(EncodingConfig(4), 0.05, hidden=16, depth=3, skip=2, seed=3)
    x = rng.uniform(-1.5, 1.5, size=(20000, 3))
    _, _, d = geometry.closest_points(toy_bvh, toy_mesh, x)
    out = x[d > 0.05]
    assert np.all(density_phase1(out, toy_bvh, toy_mesh, 0.05) == 0.0)
    assert np.all(density_phase2(out, toy_bvh, toy_mesh, 0.05, field.density_net, field.encoding) == 0.0)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_density_nonnegative_and_color_in_range(seed, scale):
    r = np.random.default_rng(seed)
    net_s = MLP(9, 1, hidden=8, depth=2, skip=1, activation="softplus", rng=r)
    net_c = MLP(9, 3, hidden=8, depth=2, skip=1, activation="sigmoid", rng=r)
    for net in (net_s, net_c):
        for k in net.params:
            net.params[k] = net.params[k] * scale
    x = r.normal(size=(50, 9)) * 10
    assert np.all(net_s(x) >= 0)
    c = net_c(x)
    assert np.all((c >= 0) & (c <= 1))


def test_zero_output_color_is_grey():
    field = RadianceField.create(EncodingConfig(6), zero_output=True)
    c = color(np.array([[0.1, 0.2, 0.3]]), field)
    assert np.array_equal(c, np.full((1, 3), 0.5))


def test_color_is_deterministic(rng):
    field = RadianceField.create(EncodingConfig(6), seed=4)
    x = rng.normal(size=(5, 3))
    assert np.array_equal(color(x, field), color(x, field))


def test_overfit_single_point():
    field = RadianceField.create(EncodingConfig(6), seed=0)
    net = field.color_net
    enc = encode(np.array([[0.1, -0.2, 0.3]]), field.encoding)
    target = np.array([[1.0, 0.0, 0.0]])
    moments, err = {}, np.inf
    for step in range(1, 2001):
        out, cache = net.forward(enc)
        err = np.max(np.abs(out - target))
        if err < 1e-3:
            break
        grads = net.backward(cache, 2 * (out - target))
        for k, g in grads.items():
            mom = moments.get(k, (np.zeros_like(g), np.zeros_like(g)))
            net.params[k], moments[k] = adam_update(net.params[k], g, mom, step, 1e-3)
    assert err < 1e-3


@pytest.mark.parametrize("act", ["sigmoid", "softplus"])
@pytest.mark.parametrize("skip", [1, 2])
def test_mlp_backward_finite_difference(act, skip):
    r = np.random.default_rng(11)
    net = MLP(6, 3, hidden=7, depth=2, skip=skip, activation=act, rng=r)
    x = r.normal(size=(10, 6))
    up = r.normal(size=(10, 3))
    out, cache = net.forward(x)
    grads = net.backward(cache, up)
    h = 1e-6
    for k, p in net.params.items():
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            lp = np.sum(net(x) * up)
            p[idx] = old - h
            lm = np.sum(net(x) * up)
            p[idx] = old
            fd[idx] = (lp - lm) / (2 * h)
        assert rel_err(grads[k], fd) < 1e-4, k


def _shell_points(mesh, bvh, eps, n, r):
    # sample inside the shell, away from edges and the shell boundary
    tris = r.integers(0, mesh.n_triangles, n)
    b = r.dirichlet([4, 4, 4], n)
    base = np.einsum("kj,kja->ka", b, mesh.corners()[tris])
    x = base + mesh.normals[tris] * r.uniform(0.2, 0.8, (n, 1)) * eps
    tri, bary, d = geometry.closest_points(bvh, mesh, x)
    ok = (tri == tris) & np.all(bary > 0.05, axis=1) & (d < 0.9 * eps) & (d > 0.1 * eps)
    return x[ok]


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_field_backward_vertex_gradient(toy_mesh, seed):
    r = np.random.default_rng(seed)
    eps = 0.05
    bvh = geometry.build_bvh(toy_mesh)
    field = RadianceField.create(EncodingConfig(2), eps, hidden=8, depth=2, skip=1, seed=seed)
    x = _shell_points(toy_mesh, bvh, eps, 40, r)
    gs = r.normal(size=len(x))
    gc = r.normal(size=(len(x), 3))
    ev = evaluate(field, bvh, toy_mesh, x, record=True)
    assert ev.shell.all()
    fg = field_backward(field, ev, gs, gc, toy_mesh)

    def loss(V):
        m = TriangleMesh(V, toy_mesh.triangles)
        e = evaluate(field, geometry.build_bvh(m), m, x)
        return np.sum(e.sigma * gs) + np.sum(e.rgb * gc)

    touched = np.unique(toy_mesh.triangles[ev.triangle])
    V = toy_mesh.vertices.copy()
    h = 1e-6
    fd = np.zeros((len(touched), 3))
    for i, v in enumerate(touched):
        for a in range(3):
            Vp, Vm = V.copy(), V.copy()
            Vp[v, a] += h
            Vm[v, a] -= h
            fd[i, a] = (loss(Vp) - loss(Vm)) / (2 * h)
    assert rel_err(fg.vertices[touched], fd) < 1e-4
    others = np.setdiff1d(np.arange(len(V)), touched)
    assert np.all(fg.vertices[others] == 0)


def test_field_backward_network_gradient_learned_phase(toy_mesh, toy_bvh):
    r = np.random.default_rng(5)
    eps = 0.05
    field = RadianceField.create(EncodingConfig(2), eps, hidden=6, depth=2, skip=1, seed=5)
    x = _shell_points(toy_mesh, toy_bvh, eps, 30, r)
    gs, gc = r.normal(size=len(x)), r.normal(size=(len(x), 3))
    ev = evaluate(field, toy_bvh, toy_mesh, x, phase=Phase.LEARNED, record=True)
    fg = field_backward(field, ev, gs, gc, toy_mesh)
    assert fg.vertices is None or not np.any(fg.vertices)
    params = field.parameters()
    h = 1e-6
    for name in ("density.w0", "density.b2", "color.w1", "color.b0"):
        p = params[name]
        fd = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            vals = []
            for s in (h, -h):
                p[idx] = old + s
                e = evaluate(field, toy_bvh, toy_mesh, x, phase=Phase.LEARNED)
                vals.append(np.sum(e.sigma * gs) + np.sum(e.rgb * gc))
            p[idx] = old
            fd[idx] = (vals[0] - vals[1]) / (2 * h)
        assert rel_err(fg.params[name], fd) < 1e-4, name


def test_zero_upstream_gives_zero_gradients(toy_mesh, toy_bvh, rng):
    field = RadianceField.create(EncodingConfig(2), 0.05, hidden=6, depth=2, skip=1)
    x = _shell_points(toy_mesh, toy_bvh, 0.05, 30, rng)
    ev = evaluate(field, toy_bvh, toy_mesh, x, record=True)
    fg = field_backward(field, ev, np.zeros(len(x)), np.zeros((len(x), 3)), toy_mesh)
    assert all(not np.any(g) for g in fg.params.values())
    assert not np.any(fg.vertices)


def test_checkpoint_round_trip(tmp_path):
    field = RadianceField.create(EncodingConfig(3), 0.04, hidden=10, depth=3, skip=2, seed=9)
    field.phase = Phase.LEARNED
    save_checkpoint(tmp_path / "f.ckpt", field, {"note": "x"}, {"extra": np.arange(4.0)})
    back, meta, extra = load_checkpoint(tmp_path / "f.ckpt")
    assert meta["note"] == "x" and back.phase is Phase.LEARNED and back.epsilon == 0.04
    assert np.array_equal(extra["extra"], np.arange(4.0))
    for k, v in field.parameters().items():
        assert np.array_equal(back.parameters()[k], v)
