import json

import numpy as np
import pytest

rq = pytest.importorskip("roteqnet")


def disk_mask(m):
    c = (m - 1) / 2.0
    yy, xx = np.mgrid[0:m, 0:m]
    return ((yy - c) ** 2 + (xx - c) ** 2) <= c * c + 1e-9


def masked_filters(rng, f, d, m):
    w = rng.normal(size=(f, d, m, m)).astype(np.float32)
    return w * disk_mask(m)


def test_rot_conv_shape_and_bias():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(2, 3, 12, 12)).astype(np.float32)
    w = masked_filters(rng, 4, 3, 7)
    b = rng.normal(size=4).astype(np.float32)
    y = rq.rot_conv(x, w, b, R=8, pad=3)
    assert y.shape == (2, 4, 8, 12, 12)
    y0 = rq.rot_conv(x, w, np.zeros(4, np.float32), R=8, pad=3)
    assert np.allclose(y - y0, b[None, :, None, None, None], atol=1e-5)


def test_orientation_pool_polar_cartesian_consistency():
    rng = np.random.default_rng(1)
    stack = rng.normal(size=(1, 2, 8, 6, 6)).astype(np.float32)
    u, v, rho, theta = rq.orientation_pool(stack)
    assert u.shape == (1, 2, 6, 6)
    assert np.allclose(np.hypot(u, v), rho, atol=1e-5)
    assert np.allclose(np.mod(theta, 360.0 / 8), 0.0, atol=1e-4)
    assert np.allclose(rho, np.maximum(stack.max(axis=2), 0.0), atol=1e-6)


def test_quarter_turn_magnitude_equivariance():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(1, 1, 16, 16)).astype(np.float32)
    w = masked_filters(rng, 2, 1, 7)
    b = np.zeros(2, np.float32)

    def magnitude(img):
        u, v, _, _ = rq.orientation_pool(rq.rot_conv(img, w, b, R=4, pad=3))
        return np.hypot(u, v)

    m0 = magnitude(x)
    mr = magnitude(np.ascontiguousarray(np.rot90(x, 1, axes=(2, 3))))
    err = min(
        np.abs(mr - np.rot90(m0, k, axes=(2, 3))).max() for k in (1, -1)
    )
    assert err < 1e-4


def test_vec_conv_pointwise_oracle():
    rng = np.random.default_rng(3)
    u = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    v = rng.normal(size=(2, 3, 5, 5)).astype(np.float32)
    wu = rng.normal(size=(4, 3, 1, 1)).astype(np.float32)
    wv = rng.normal(size=(4, 3, 1, 1)).astype(np.float32)
    b = rng.normal(size=4).astype(np.float32)
    got = rq.vec_conv(u, v, wu, wv, b, pad=0)
    want = (
        np.einsum("ndhw,fd->nfhw", u, wu[:, :, 0, 0])
        + np.einsum("ndhw,fd->nfhw", v, wv[:, :, 0, 0])
        + b[None, :, None, None]
    )
    assert np.allclose(got, want, atol=1e-5)


def test_vec_rot_conv_shape():
    rng = np.random.default_rng(4)
    u = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
    v = rng.normal(size=(1, 2, 8, 8)).astype(np.float32)
    wu = masked_filters(rng, 3, 2, 7)
    wv = masked_filters(rng, 3, 2, 7)
    b = np.zeros(3, np.float32)
    y = rq.vec_rot_conv(u, v, wu, wv, b, R=8, pad=3)
    assert y.shape == (1, 3, 8, 8, 8)


def test_rotate_canonical_quarter_turn_is_permutation():
    rng = np.random.default_rng(5)
    w = masked_filters(rng, 1, 1, 7)
    r = rq.rotate_canonical(w, 90.0)
    err = min(np.abs(r - np.rot90(w, k, axes=(2, 3))).max() for k in (1, -1))
    assert err < 1e-6
    full = rq.rotate_canonical(w, 360.0)
    assert np.allclose(full, w, atol=1e-6)


def test_parameter_count_reference_model():
    cfg = json.dumps({"Nf": 3, "C": 6, "in_channels": 4})
    assert rq.parameter_count(cfg) == 69822
    base = json.dumps({"Nf": 12, "C": 6, "in_channels": 4, "variant": "baseline"})
    assert rq.parameter_count(base) == 890418
