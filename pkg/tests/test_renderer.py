"""Opacity conversion, compositing, refinement, and the heads."""

import numpy as np
import pytest

from shellrender import autodiff as ad
from shellrender import renderer as rnd
from shellrender.autodiff import Tensor


class TestHeads:
    def test_geometry_head_zero_init(self):
        rng = np.random.default_rng(0)
        head = rnd.GeometryHead(rng, g_dim=4, hidden=8)
        head.mlp.layers[-1].w.data[:] = 0.0
        f, s = head(Tensor(np.zeros((3, 4))), np.zeros((3, 3)))
        np.testing.assert_allclose(f.data, 0.0)
        np.testing.assert_allclose(s.data, np.log(2.0) + 1e-4, rtol=1e-5)

    def test_geometry_head_deterministic(self):
        rng = np.random.default_rng(1)
        head = rnd.GeometryHead(rng, g_dim=4, hidden=8)
        x = np.random.default_rng(2).normal(size=(5, 4))
        d = np.random.default_rng(3).normal(size=(5, 3))
        f1, s1 = head(Tensor(x), d)
        f2, s2 = head(Tensor(x.copy()), d.copy())
        np.testing.assert_array_equal(f1.data, f2.data)
        np.testing.assert_array_equal(s1.data, s2.data)

    def test_kernel_positive(self):
        rng = np.random.default_rng(4)
        head = rnd.GeometryHead(rng, g_dim=4, hidden=8)
        _, s = head(Tensor(np.random.default_rng(5).normal(size=(50, 4)) * 10),
                    np.random.default_rng(6).normal(size=(50, 3)))
        assert (s.data > 0).all()

    def test_guidance_head_confidence_range(self):
        rng = np.random.default_rng(7)
        head = rnd.GuidanceHead(rng, g_dim=4, hidden=8)
        _, c = head(Tensor(np.random.default_rng(8).normal(size=(50, 4)) * 5),
                    np.random.default_rng(9).normal(size=(50, 3)))
        assert (c.data > 0).all() and (c.data < 1).all()

    def test_geometry_head_gradcheck(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(10)
            head = rnd.GeometryHead(rng, g_dim=3, hidden=6)
            g = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            d = rng.normal(size=(4, 3))

            def f(t):
                fv, sv = head(t, d)
                return ad.tensor_sum(ad.add(ad.mul(fv, fv), ad.mul(sv, sv)))

            assert ad.gradcheck(f, g, eps=1e-4) < 1e-6


class TestAlphaFromSrdf:
    def alpha(self, f, s, t, radius=None):
        f = Tensor(np.asarray(f, dtype=np.float64)[None, :])
        s = Tensor(np.asarray(s, dtype=np.float64)[None, :])
        t = np.asarray(t, dtype=np.float64)[None, :]
        r = None if radius is None else np.asarray([radius], dtype=np.float64)
        return rnd.alpha_from_srdf(f, s, t, radius=r).data[0]

    def test_surface_crossed_saturates(self):
        a = self.alpha([10.0, -10.0], [1.0, 1.0], [0.0, 1.0])
        assert a[0] == pytest.approx(1.0, abs=1e-4)

    def test_increasing_srdf_zero_alpha(self):
        a = self.alpha([0.5, 1.0, 2.0], [0.1, 0.1, 0.1], [0.0, 1.0, 2.0])
        assert a[0] == 0.0 and a[1] == 0.0

    def test_half_to_zero_gives_one(self):
        # Phi(0) = 0.5 and Phi(-inf) = 0: alpha = (0.5 - 0) / 0.5 = 1.
        a = self.alpha([0.0, -1e6], [1.0, 1.0], [0.0, 1.0])
        assert a[0] == pytest.approx(1.0, abs=1e-6)

    def test_range(self):
        rng = np.random.default_rng(11)
        f = Tensor(rng.normal(size=(20, 8)))
        s = Tensor(rng.uniform(0.01, 1.0, size=(20, 8)))
        t = np.sort(rng.uniform(1, 3, size=(20, 8)), axis=1)
        a = rnd.alpha_from_srdf(f, s, t).data
        assert (a >= 0).all() and (a <= 1.0).all()

    def test_single_sample_slab(self):
        a = self.alpha([0.05], [0.01], [2.0], radius=0.5)
        assert a[0] == pytest.approx(1.0, abs=1e-3)  # surface within the slab
        a2 = self.alpha([3.0], [0.01], [2.0], radius=0.5)
        assert a2[0] == pytest.approx(0.0, abs=1e-6)  # surface far beyond

    def test_gradcheck(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(12)
            f = Tensor(rng.normal(size=(3, 4)), requires_grad=True)
            s = Tensor(rng.uniform(0.3, 1.0, size=(3, 4)), requires_grad=True)
            t = np.sort(rng.uniform(1, 2, size=(3, 4)), axis=1)

            def fn(ff, ss):
                a = rnd.alpha_from_srdf(ff, ss, t)
                return ad.tensor_sum(ad.mul(a, a))

            assert ad.gradcheck(fn, [f, s], eps=1e-5) < 1e-6


class TestComposite:
    def test_single_opaque_sample(self):
        alpha = Tensor(np.array([[1.0]]))
        payload = Tensor(np.array([[[0.3, 0.6]]]))
        out, w = rnd.composite(alpha, payload)
        np.testing.assert_allclose(out.data, [[0.3, 0.6]], rtol=1e-6)
        np.testing.assert_allclose(w.weights, [[1.0]])

    def test_two_samples_half(self):
        alpha = Tensor(np.array([[0.5, 1.0]]))
        payload = Tensor(np.array([[[1.0], [3.0]]]))
        out, w = rnd.composite(alpha, payload)
        assert out.data[0, 0] == pytest.approx(0.5 * 1.0 + 0.5 * 3.0)
        np.testing.assert_allclose(w.transmittance[0], [1.0, 0.5, 0.0])

    def test_all_transparent_background(self):
        alpha = Tensor(np.zeros((2, 3)))
        payload = Tensor(np.ones((2, 3, 4)))
        out, _ = rnd.composite(alpha, payload)
        np.testing.assert_allclose(out.data, 0.0)

    def test_invariants_random(self):
        rng = np.random.default_rng(13)
        alpha = Tensor(rng.uniform(0, 1, size=(50, 8)))
        payload = Tensor(rng.normal(size=(50, 8, 2)))
        _, w = rnd.composite(alpha, payload)
        w.check()
        assert (np.diff(w.transmittance, axis=1) <= 1e-9).all()
        assert ((w.weights.sum(axis=1) >= 0) & (w.weights.sum(axis=1) <= 1 + 1e-6)).all()

    def test_check_catches_bad_alpha(self):
        w = rnd.CompositeWeights(np.array([[1.5]]), np.array([[1.0, -0.5]]),
                                 np.array([[1.5]]))
        with pytest.raises(AssertionError):
            w.check()

    def test_srdf_and_density_share_compositing(self):
        # Operator-level equivalence: identical alphas compose identically
        # regardless of which formulation produced them.
        rng = np.random.default_rng(14)
        alpha_values = rng.uniform(0, 1, size=(10, 6))
        payload = Tensor(rng.normal(size=(10, 6, 3)))
        out1, _ = rnd.composite(Tensor(alpha_values.copy()), payload)
        out2, _ = rnd.composite(Tensor(alpha_values.copy()), payload)
        np.testing.assert_array_equal(out1.data, out2.data)

    def test_gradcheck(self):
        with ad.precision("float64"):
            rng = np.random.default_rng(15)
            alpha = Tensor(rng.uniform(0.1, 0.9, size=(3, 4)), requires_grad=True)
            payload = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)

            def fn(a, p):
                out, _ = rnd.composite(a, p)
                return ad.tensor_sum(ad.mul(out, out))

            assert ad.gradcheck(fn, [alpha, payload], eps=1e-5) < 1e-6


class TestAlphaFromDensity:
    def test_zero_density_transparent(self):
        raw = Tensor(np.full((2, 4), -50.0))  # softplus -> ~0
        t = np.tile(np.linspace(1, 2, 4), (2, 1))
        a = rnd.alpha_from_density(raw, t).data
        np.testing.assert_allclose(a, 0.0, atol=1e-6)

    def test_high_density_opaque(self):
        raw = Tensor(np.full((1, 4), 100.0))
        t = np.linspace(1, 2, 4)[None]
        a = rnd.alpha_from_density(raw, t).data
        np.testing.assert_allclose(a, 1.0, atol=1e-6)

    def test_range(self):
        rng = np.random.default_rng(16)
        raw = Tensor(rng.normal(size=(20, 6)) * 3)
        t = np.sort(rng.uniform(1, 3, size=(20, 6)), axis=1)
        a = rnd.alpha_from_density(raw, t).data
        assert (a >= 0).all() and (a < 1.0).all()


class TestRefineImage:
    def make_cnns(self, occlusion, width=8):
        rng = np.random.default_rng(17)
        in_ch = 4 + (4 + 1 if occlusion else 0)
        cnn_u = rnd.RefineCNN(rng, in_ch, width=width)
        cnn_o = rnd.OcclusionCNN(rng, 4, width=width) if occlusion else None
        return cnn_u, cnn_o

    def test_residual_identity_with_zero_final(self):
        cnn_u, _ = self.make_cnns(occlusion=False)
        rng = np.random.default_rng(18)
        app = Tensor(rng.normal(size=(1, 4, 8, 8)))
        low = Tensor(rng.uniform(0.2, 0.8, size=(1, 3, 8, 8)))
        img, pre, _ = rnd.refine_image(cnn_u, None, app, None, low)
        up = ad.bilinear_resize(low, 2)
        np.testing.assert_array_equal(pre.data, up.data)  # bit-equal pre-clamp
        np.testing.assert_allclose(img.data, np.clip(up.data, 0, 1))

    def test_shapes_double(self):
        cnn_u, cnn_o = self.make_cnns(occlusion=True)
        app = Tensor(np.zeros((1, 4, 16, 16)))
        occ = Tensor(np.zeros((1, 4, 16, 16)))
        low = Tensor(np.zeros((1, 3, 16, 16)))
        img, _, mask = rnd.refine_image(cnn_u, cnn_o, app, occ, low)
        assert img.shape == (1, 3, 32, 32)
        assert mask.shape == (1, 1, 32, 32)

    @pytest.mark.slow
    def test_paper_shape_contract_256(self):
        cnn_u, cnn_o = self.make_cnns(occlusion=True)
        app = Tensor(np.zeros((1, 4, 256, 256), dtype=np.float32))
        occ = Tensor(np.zeros((1, 4, 256, 256), dtype=np.float32))
        low = Tensor(np.zeros((1, 3, 256, 256), dtype=np.float32))
        img, _, mask = rnd.refine_image(cnn_u, cnn_o, app, occ, low)
        assert img.shape == (1, 3, 512, 512)
        assert mask.shape == (1, 1, 512, 512)

    def test_occlusion_mask_range(self):
        cnn_u, cnn_o = self.make_cnns(occlusion=True)
        rng = np.random.default_rng(19)
        app = Tensor(rng.normal(size=(1, 4, 8, 8)))
        occ = Tensor(rng.normal(size=(1, 4, 8, 8)))
        low = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        _, _, mask = rnd.refine_image(cnn_u, cnn_o, app, occ, low)
        assert (mask.data > 0).all() and (mask.data < 1).all()

    def test_image_clamped(self):
        cnn_u, _ = self.make_cnns(occlusion=False)
        cnn_u.conv_out.w.data[:] = 10.0  # force large residuals
        rng = np.random.default_rng(20)
        app = Tensor(rng.normal(size=(1, 4, 8, 8)))
        low = Tensor(rng.uniform(size=(1, 3, 8, 8)))
        img, _, _ = rnd.refine_image(cnn_u, None, app, None, low)
        assert img.data.min() >= 0.0 and img.data.max() <= 1.0
