"""Tensor ops, backward, and the finite-difference oracle."""

import numpy as np
import pytest

from shellrender import autodiff as ad
from shellrender import nn
from shellrender.autodiff import Tape, Tensor


def test_add_mul_backward():
    x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.mul(x, x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0], rtol=1e-6)


def test_sigmoid_grad_at_zero():
    x = Tensor([0.0], requires_grad=True)
    with Tape() as tape:
        loss = ad.tensor_sum(ad.sigmoid(x))
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [0.25], rtol=1e-6)


def test_shape_mismatch_names_both_shapes():
    with pytest.raises(ad.ShapeError, match=r"\(2,\).*\(3,\)"):
        ad.add(Tensor([1.0, 2.0]), Tensor([1.0, 2.0, 3.0]))


def test_non_scalar_loss_rejected():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.mul(x, x)
        with pytest.raises(ad.ShapeError):
            tape.backward(y)


def test_softmax_single_element():
    y = ad.softmax(Tensor([[3.7]]), axis=1)
    np.testing.assert_allclose(y.data, [[1.0]])


def test_softmax_stability():
    y = ad.softmax(Tensor([[1000.0, 1000.0, 999.0]]), axis=1)
    assert np.all(np.isfinite(y.data))
    np.testing.assert_allclose(y.data.sum(), 1.0, rtol=1e-6)


def test_matmul_identity():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(4, 4))
    y = ad.matmul(Tensor(np.eye(4)), Tensor(x))
    np.testing.assert_allclose(y.data, x.astype(np.float32), rtol=1e-6)


def test_backward_linearity():
    rng = np.random.default_rng(1)
    x = Tensor(rng.normal(size=(5,)), requires_grad=True)

    def run(scale):
        x.zero_grad()
        with Tape() as tape:
            loss = ad.mul(ad.tensor_sum(ad.mul(x, x)), scale)
            tape.backward(loss)
        return x.grad.copy()

    g1 = run(1.0)
    g3 = run(3.0)
    np.testing.assert_allclose(g3, 3.0 * g1, rtol=1e-5)


def test_variance_matches_numpy():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(6, 4))
    v = ad.variance(Tensor(x), axis=1)
    np.testing.assert_allclose(v.data, x.astype(np.float32).var(axis=1), rtol=1e-5)


def test_expand_and_sum_roundtrip():
    x = Tensor([1.0, 2.0], requires_grad=True)
    with Tape() as tape:
        y = ad.expand(x, 0, 3)  # (3, 2)
        assert y.shape == (3, 2)
        loss = ad.tensor_sum(y)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [3.0, 3.0])


def test_concat_narrow_roundtrip():
    a = Tensor([[1.0, 2.0]], requires_grad=True)
    b = Tensor([[3.0, 4.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.concat([a, b], axis=1)
        z = ad.narrow(y, 1, 1, 2)
        loss = ad.tensor_sum(z)
        tape.backward(loss)
    np.testing.assert_allclose(a.grad, [[0.0, 1.0]])
    np.testing.assert_allclose(b.grad, [[1.0, 0.0]])


def test_take_rows_negative_index_zero_row():
    x = Tensor([[1.0, 2.0], [3.0, 4.0]], requires_grad=True)
    with Tape() as tape:
        y = ad.take_rows(x, np.array([1, -1, 0, 0]))
        np.testing.assert_allclose(y.data, [[3, 4], [0, 0], [1, 2], [1, 2]])
        loss = ad.tensor_sum(y)
        tape.backward(loss)
    np.testing.assert_allclose(x.grad, [[2.0, 2.0], [1.0, 1.0]])


def test_bilinear_resize_constant_roundtrip():
    img = Tensor(np.full((3, 8, 8), 0.7))
    up = ad.bilinear_resize(img, 2)
    assert up.shape == (3, 16, 16)
    down = ad.bilinear_resize(up, 0.5)
    np.testing.assert_allclose(down.data, img.data, rtol=1e-6)


def test_bilinear_resize_grads():
    with ad.precision("float64"):
        x = Tensor(np.random.default_rng(3).normal(size=(1, 4, 4)), requires_grad=True)

        def f(t):
            return ad.tensor_sum(ad.mul(ad.bilinear_resize(t, 2), ad.bilinear_resize(t, 2)))

        assert ad.gradcheck(f, x, eps=1e-5) < 1e-7


def test_sample_bilinear_texel_center_and_midpoint():
    m = np.zeros((2, 2, 1))
    m[0, 0, 0] = 0.0
    m[0, 1, 0] = 1.0
    t = ad.sample_bilinear(Tensor(m), np.array([[0.5, 0.5], [1.0, 0.5], [1.5, 0.5]]))
    np.testing.assert_allclose(t.data[:, 0], [0.0, 0.5, 1.0], atol=1e-6)


def test_sample_bilinear_clamps_outside():
    m = np.arange(4.0).reshape(2, 2, 1)
    t = ad.sample_bilinear(Tensor(m), np.array([[-5.0, -5.0], [99.0, 99.0]]))
    np.testing.assert_allclose(t.data[:, 0], [0.0, 3.0])


def test_sample_bilinear_linear_in_map():
    rng = np.random.default_rng(4)
    a = rng.normal(size=(5, 5, 3))
    b = rng.normal(size=(5, 5, 3))
    uv = rng.uniform(0, 5, size=(20, 2))
    lhs = ad.sample_bilinear(Tensor(2.0 * a + 3.0 * b), uv).data
    rhs = 2.0 * ad.sample_bilinear(Tensor(a), uv).data + 3.0 * ad.sample_bilinear(Tensor(b), uv).data
    np.testing.assert_allclose(lhs, rhs, rtol=1e-4, atol=1e-5)


def test_conv2d_matches_direct_computation():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(1, 2, 5, 5))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=(3,))
    y = ad.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=1, padding=1)
    assert y.shape == (1, 3, 5, 5)
    # Direct check at one interior output position.
    patch = x[0, :, 1:4, 1:4]
    want = (patch[None] * w).sum(axis=(1, 2, 3)) + b
    np.testing.assert_allclose(y.data[0, :, 2, 2], want.astype(np.float32), rtol=1e-4)


def test_conv2d_stride2_shape():
    x = Tensor(np.zeros((1, 3, 8, 8)))
    w = Tensor(np.zeros((4, 3, 3, 3)))
    y = ad.conv2d(x, w, Tensor(np.zeros(4)), stride=2, padding=1)
    assert y.shape == (1, 4, 4, 4)


def test_conv_transpose2d_doubles_and_gradchecks():
    with ad.precision("float64"):
        rng = np.random.default_rng(6)
        x = Tensor(rng.normal(size=(1, 2, 3, 3)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 3, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(3,)), requires_grad=True)
        y = ad.conv_transpose2d(x, w, b)
        assert y.shape == (1, 3, 6, 6)

        def f(xx, ww, bb):
            out = ad.conv_transpose2d(xx, ww, bb)
            return ad.tensor_sum(ad.mul(out, out))

        assert ad.gradcheck(f, [x, w, b], eps=1e-5) < 1e-6


def test_conv2d_gradcheck_double():
    with ad.precision("float64"):
        rng = np.random.default_rng(7)
        x = Tensor(rng.normal(size=(1, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(2, 2, 3, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=(2,)), requires_grad=True)

        def f(xx, ww, bb):
            out = ad.conv2d(xx, ww, bb, stride=2, padding=1)
            return ad.tensor_sum(ad.mul(out, out))

        assert ad.gradcheck(f, [x, w, b], eps=1e-5) < 1e-6


def test_masked_conv3d_identity_kernel():
    feats = Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
    # 27-neighborhood with only the center (offset 13) present.
    nbr = -np.ones((2, 27), dtype=np.int64)
    nbr[0, 13] = 0
    nbr[1, 13] = 1
    w = np.zeros((27 * 2, 2))
    w[13 * 2 + 0, 0] = 1.0
    w[13 * 2 + 1, 1] = 1.0
    y = ad.masked_conv3d(feats, nbr, Tensor(w), Tensor(np.zeros(2)))
    np.testing.assert_allclose(y.data, feats.data)


def test_gradcheck_quadratic_single_precision():
    rng = np.random.default_rng(8)
    x = Tensor(rng.uniform(0.5, 1.5, size=(6,)), requires_grad=True)

    def f(t):
        return ad.tensor_sum(ad.mul(t, t))

    assert ad.gradcheck(f, x, eps=1e-3) < 1e-3


def test_gradcheck_mlp_softplus():
    rng = np.random.default_rng(9)
    x = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
    w1 = Tensor(rng.normal(size=(4, 8)), requires_grad=True)
    w2 = Tensor(rng.normal(size=(8, 1)), requires_grad=True)

    def f(xx, a, b):
        h = ad.softplus(ad.matmul(xx, a))
        return ad.tensor_sum(ad.matmul(h, b))

    assert ad.gradcheck(f, [x, w1, w2], eps=1e-3) < 1e-2


def test_gradcheck_excludes_relu_kink():
    x = Tensor(np.array([0.0, 1.0, -1.0]), requires_grad=True)

    def f(t):
        return ad.tensor_sum(ad.relu(t))

    # Coordinate 0 sits exactly at the kink and is excluded from comparison.
    err = ad.gradcheck(f, [x], eps=1e-3, exclude=[np.array([True, False, False])])
    assert err < 1e-4


def test_double_precision_mode_tightens_gradcheck():
    with ad.precision("float64"):
        rng = np.random.default_rng(10)
        x = Tensor(rng.normal(size=(5,)), requires_grad=True)
        w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)

        def f(xx, ww):
            y = ad.sigmoid(ad.matmul(ad.reshape(xx, (1, 5)), ww))
            return ad.tensor_sum(ad.mul(y, y))

        assert ad.gradcheck(f, [x, w], eps=1e-4) < 1e-7


def test_checkpoint_roundtrip(tmp_path):
    rng = np.random.default_rng(11)
    tensors = {
        "layer.w": Tensor(rng.normal(size=(3, 4))),
        "layer.b": Tensor(rng.normal(size=(4,))),
    }
    path = tmp_path / "ckpt.bin"
    ad.save_tensors(path, tensors)
    loaded = ad.load_tensors(path)
    assert set(loaded) == {"layer.w", "layer.b"}
    for k in tensors:
        np.testing.assert_allclose(loaded[k], tensors[k].data, rtol=1e-6)


def test_checkpoint_bytes_deterministic(tmp_path):
    rng = np.random.default_rng(12)
    tensors = {"w": Tensor(rng.normal(size=(7, 7)))}
    p1, p2 = tmp_path / "a.bin", tmp_path / "b.bin"
    ad.save_tensors(p1, tensors)
    ad.save_tensors(p2, tensors)
    assert p1.read_bytes() == p2.read_bytes()


class TestLayers:
    def test_linear_forward(self):
        rng = np.random.default_rng(13)
        layer = nn.Linear(rng, 3, 2)
        x = Tensor(rng.normal(size=(4, 3)))
        y = layer(x)
        np.testing.assert_allclose(y.data, x.data @ layer.w.data + layer.b.data, rtol=1e-5)

    def test_mlp_zero_init_last(self):
        rng = np.random.default_rng(14)
        mlp = nn.MLP(rng, [3, 8, 2], zero_init_last=True)
        y = mlp(Tensor(rng.normal(size=(5, 3))))
        np.testing.assert_allclose(y.data, 0.0)

    def test_attention_single_view_collapses_to_value(self):
        rng = np.random.default_rng(15)
        att = nn.Attention(rng, q_in=3, k_in=4, v_in=4, out_dim=2)
        q = Tensor(rng.normal(size=(6, 3)))
        kf = Tensor(rng.normal(size=(6, 1, 4)))
        y = att(q, kf, kf)
        value = ad.affine(ad.reshape(kf, (6, 4)), att.v.w, att.v.b)
        want = att.out(value)
        np.testing.assert_allclose(y.data, want.data, rtol=1e-5)

    def test_attention_permutation_invariant(self):
        rng = np.random.default_rng(16)
        att = nn.Attention(rng, q_in=3, k_in=4, v_in=5, out_dim=2)
        q = Tensor(rng.normal(size=(6, 3)))
        k = rng.normal(size=(6, 4, 4))
        v = rng.normal(size=(6, 4, 5))
        perm = [2, 0, 3, 1]
        y1 = att(q, Tensor(k), Tensor(v))
        y2 = att(q, Tensor(k[:, perm]), Tensor(v[:, perm]))
        np.testing.assert_allclose(y1.data, y2.data, rtol=1e-5, atol=1e-6)

    def test_adam_reduces_quadratic(self):
        rng = np.random.default_rng(17)
        x = Tensor(rng.normal(size=(4,)), requires_grad=True)
        opt = nn.Adam({"x": x}, lr=0.1)
        for _ in range(200):
            opt.zero_grad()
            with Tape() as tape:
                loss = ad.tensor_sum(ad.mul(x, x))
                tape.backward(loss)
            opt.step()
        assert float(np.abs(x.data).max()) < 1e-2

    def test_parameters_traversal_names(self):
        rng = np.random.default_rng(18)
        mlp = nn.MLP(rng, [2, 4, 1])
        names = set(mlp.parameters())
        assert names == {"layers.0.w", "layers.0.b", "layers.1.w", "layers.1.b"}
