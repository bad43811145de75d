from pysgsf import tensor as T
from pysgsf.tensor import Tensor
from pysgsf.attention import (SGSA, LightSGSA, DenseAttention, PlainAttention, make_attention, k_th, sgsa,
                              l_sgsa, dense_attn)
import numpy as np
import unittest
import math


def reference_attention(module, x):
    """Unmasked channel attention written directly with numpy"""
    qkv = module.qkv_dwconv(module.qkv(Tensor(x))).data
    c = module.channels
    q, k, v = qkv[:, :c], qkv[:, c:2 * c], qkv[:, 2 * c:]
    n, _, h, w = x.shape
    heads = module.heads

    def split(a):
        return a.reshape(n, heads, c // heads, h * w)

    def unit(a):
        return a / np.maximum(np.sqrt((a * a).sum(axis=-1, keepdims=True)), 1e-12)

    logits = np.matmul(unit(split(q)), np.swapaxes(unit(split(k)), -1, -2)) * module.temperature.data
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, split(v)).reshape(x.shape)
    return module.project_out(Tensor(out)).data


def reference_guided(module, x, s, modulate_k):
    """Top-k masked guided attention written directly with numpy; returns (output, keep mask)"""
    qkv = module.qkv_dwconv(module.qkv(Tensor(x))).data
    c = module.channels
    q, k, v = qkv[:, :c], qkv[:, c:2 * c] * (s if modulate_k else 1), qkv[:, 2 * c:] * s
    n, _, h, w = x.shape
    heads = module.heads

    def split(a):
        return a.reshape(n, heads, c // heads, h * w)

    def unit(a):
        return a / np.maximum(np.sqrt((a * a).sum(axis=-1, keepdims=True)), 1e-12)

    logits = np.matmul(unit(split(q)), np.swapaxes(unit(split(k)), -1, -2)) * module.temperature.data
    order = np.argsort(-logits, axis=-1, kind='stable')[..., :module.k_th]
    keep = np.zeros(logits.shape, dtype=bool)
    np.put_along_axis(keep, order, True, axis=-1)
    logits = np.where(keep, logits, -np.inf)
    e = np.exp(logits - logits.max(axis=-1, keepdims=True))
    attn = e / e.sum(axis=-1, keepdims=True)
    out = np.matmul(attn, split(v)).reshape(x.shape)
    return module.project_out(Tensor(out)).data, keep


def identity_attention(cls, **kwargs):
    """Two-channel, one-head attention with q = k = v = x and an identity output projection"""
    module = cls(2, heads=1, **kwargs)
    eye = np.eye(2, dtype=np.float32)
    module.qkv.w.data = np.tile(eye, (3, 1))[:, :, None, None]
    module.qkv.b.data = np.zeros(6, dtype=np.float32)
    depthwise = np.zeros((6, 1, 3, 3), dtype=np.float32)
    depthwise[:, 0, 1, 1] = 1.0
    module.qkv_dwconv.w.data = depthwise
    module.qkv_dwconv.b.data = np.zeros(6, dtype=np.float32)
    module.project_out.w.data = eye[:, :, None, None]
    module.project_out.b.data = np.zeros(2, dtype=np.float32)
    if cls is DenseAttention:
        dense = np.zeros((2, 2, 3, 3), dtype=np.float32)
        dense[:, :, 1, 1] = eye
        module.dense_conv.w.data = dense
        module.dense_conv.b.data = np.zeros(2, dtype=np.float32)
    return module


def pixel(*values):
    return Tensor(np.array(values, dtype=np.float32).reshape(1, len(values), 1, 1))


class TestAttention(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(21)
        cls.x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
        cls.s = rng.uniform(0.5, 1.5, (2, 8, 4, 4)).astype(np.float32)
        cls.ones = np.ones((2, 8, 4, 4), dtype=np.float32)

    def test_k_th(self):
        self.assertEqual(k_th(0.67, 100), 67)
        self.assertEqual(k_th(0.67, 4), 3)
        self.assertEqual(k_th(0.01, 4), 1)
        self.assertEqual(k_th(1.0, 4), 4)
        self.assertRaises(ValueError, lambda: k_th(0.0, 4))

    def test_dense_reduction(self):
        """rho = 1 and S = 1 reduce SGSA to plain channel attention"""
        module = SGSA(8, heads=2, sparsity_ratio=1.0).reset_parameters(4)
        out = sgsa(Tensor(self.x), Tensor(self.ones), module).data
        np.testing.assert_allclose(out, reference_attention(module, self.x), atol=1e-6)

    def test_light_equals_full_without_guidance(self):
        full = SGSA(8, heads=2).reset_parameters(9)
        light = LightSGSA(8, heads=2).reset_parameters(9)
        np.testing.assert_array_equal(sgsa(Tensor(self.x), Tensor(self.ones), full).data,
                                      l_sgsa(Tensor(self.x), Tensor(self.ones), light).data)

    def test_guidance_changes_output(self):
        module = SGSA(8, heads=2).reset_parameters(2)
        a = module(Tensor(self.x), Tensor(self.ones)).data
        b = module(Tensor(self.x), Tensor(self.s)).data
        self.assertGreater(np.abs(a - b).max(), 1e-6)

    def test_keep_mask(self):
        module = SGSA(8, heads=2, sparsity_ratio=0.5).reset_parameters(0)
        module(Tensor(self.x), Tensor(self.s))
        self.assertEqual(module.last_keep.shape, (2, 2, 4, 4))
        np.testing.assert_array_equal(module.last_keep.sum(axis=-1), np.full((2, 2, 4), 2))

    def test_plain_ignores_guidance(self):
        module = PlainAttention(8, heads=4).reset_parameters(1)
        np.testing.assert_array_equal(module(Tensor(self.x), Tensor(self.s)).data, module(Tensor(self.x)).data)
        self.assertIsNone(module.last_keep)

    def test_dense_has_self_modulation(self):
        module = DenseAttention(8, heads=2).reset_parameters(3)
        self.assertIn('dense_conv.w', dict(module.named_parameters()))
        out = dense_attn(Tensor(self.x), module)
        self.assertEqual(out.shape, self.x.shape)

    def test_zero_output_projection(self):
        module = make_attention('sgsa', 8, 2).reset_parameters(0).zero_output_projections()
        np.testing.assert_array_equal(module(Tensor(self.x), Tensor(self.s)).data, np.zeros_like(self.x))

    def test_errors(self):
        self.assertRaises(ValueError, lambda: SGSA(6, heads=4))
        module = SGSA(8, heads=2)
        self.assertRaises(ValueError, lambda: module(Tensor(self.x), Tensor(np.ones((2, 8, 2, 2)))))
        self.assertRaises(ValueError, lambda: module(Tensor(self.x), None))
        self.assertRaises(ValueError, lambda: module(Tensor(np.ones((1, 4, 4, 4))), Tensor(np.ones((1, 4, 4, 4)))))
        self.assertRaises(ValueError, lambda: make_attention('global', 8))

    def test_gradients_flow(self):
        module = SGSA(8, heads=2).reset_parameters(5)
        x = Tensor(self.x, requires_grad=True)
        T.backward(T.tsum(module(x, Tensor(self.s))))
        self.assertEqual(x.grad.shape, self.x.shape)
        self.assertIsNotNone(module.temperature.grad)


class TestChannelAttention(unittest.TestCase):
    """Closed-form evaluations on one pixel: each token is a scalar, so the
    L2-normalised Q and K entries are its sign and the logits are +-1.
    """

    sigma2 = 1.0 / (1.0 + math.exp(-2.0))

    @classmethod
    def setUpClass(cls):
        rng = np.random.default_rng(33)
        cls.x = rng.standard_normal((2, 8, 4, 4)).astype(np.float32)
        cls.s = rng.uniform(0.2, 1.8, (2, 8, 4, 4)).astype(np.float32)

    def test_sgsa_by_hand(self):
        module = identity_attention(SGSA, sparsity_ratio=1.0)
        out = sgsa(pixel(0.5, -2.0), pixel(2.0, 0.5), module).data.ravel()
        np.testing.assert_allclose(out, [math.tanh(1.0), -math.tanh(1.0)], atol=1e-6)
        module = identity_attention(SGSA, sparsity_ratio=0.5)
        out = sgsa(pixel(0.5, -2.0), pixel(2.0, 0.5), module).data.ravel()
        np.testing.assert_array_equal(out, [1.0, -1.0])
        np.testing.assert_array_equal(module.last_keep.reshape(2, 2), [[True, False], [False, True]])

    def test_guidance_sign_separates_light_and_full(self):
        x, s = pixel(0.5, -2.0), pixel(1.0, -0.5)
        full = sgsa(x, s, identity_attention(SGSA, sparsity_ratio=1.0)).data.ravel()
        np.testing.assert_allclose(full, [0.75, 0.75], atol=1e-6)
        light = l_sgsa(x, s, identity_attention(LightSGSA, sparsity_ratio=1.0)).data.ravel()
        np.testing.assert_allclose(light, [1.0 - 0.5 * self.sigma2, 0.5 + 0.5 * self.sigma2], atol=1e-6)

    def test_dense_by_hand(self):
        module = identity_attention(DenseAttention)
        out = dense_attn(pixel(0.5, -2.0), module).data.ravel()
        v = [0.5 * 0.5, -2.0 * math.expm1(-2.0)]
        expected = [self.sigma2 * v[0] + (1.0 - self.sigma2) * v[1], (1.0 - self.sigma2) * v[0] + self.sigma2 * v[1]]
        np.testing.assert_allclose(out, expected, atol=1e-6)

    def test_add_fusion_by_hand(self):
        module = identity_attention(SGSA, sparsity_ratio=1.0, fusion='add')
        out = module(pixel(0.5, -2.0), pixel(2.0, 0.5)).data.ravel()
        np.testing.assert_allclose(out, [4.0 * self.sigma2 - 1.5, 2.5 - 4.0 * self.sigma2], atol=1e-6)

    def test_zero_guidance_annihilates(self):
        zeros = Tensor(np.zeros_like(self.s))
        for cls in (SGSA, LightSGSA):
            module = cls(8, heads=2).reset_parameters(6)
            out = module(Tensor(self.x), zeros).data
            bias = np.broadcast_to(module.project_out.b.data[None, :, None, None], out.shape)
            np.testing.assert_array_equal(out, bias)
        module = DenseAttention(8, heads=2).reset_parameters(6)
        module.dense_conv.w.data[...] = 0.0
        module.dense_conv.b.data[...] = 0.0
        out = dense_attn(Tensor(self.x), module).data
        np.testing.assert_array_equal(out, np.broadcast_to(module.project_out.b.data[None, :, None, None], out.shape))

    def test_light_and_full_paths(self):
        """Both guided paths against one reference; the keep sets differ only through the K modulation"""
        full = SGSA(8, heads=2, sparsity_ratio=0.5).reset_parameters(13)
        light = LightSGSA(8, heads=2, sparsity_ratio=0.5).reset_parameters(13)
        out_full = full(Tensor(self.x), Tensor(self.s)).data
        out_light = light(Tensor(self.x), Tensor(self.s)).data
        ref_full, keep_full = reference_guided(full, self.x, self.s, modulate_k=True)
        ref_light, keep_light = reference_guided(light, self.x, self.s, modulate_k=False)
        np.testing.assert_allclose(out_full, ref_full, atol=1e-5)
        np.testing.assert_allclose(out_light, ref_light, atol=1e-5)
        np.testing.assert_array_equal(full.last_keep, keep_full)
        np.testing.assert_array_equal(light.last_keep, keep_light)
        differ = (full.last_keep != light.last_keep).any(axis=-1)
        self.assertTrue(differ.any())
        self.assertEqual(keep_light.sum(), keep_full.sum())

    def test_conv1x1_fusion_layers(self):
        self.assertIn('fuse_k.w', dict(SGSA(8, heads=2, fusion='conv1x1').named_parameters()))
        names = dict(LightSGSA(8, heads=2, fusion='conv1x1').named_parameters())
        self.assertIn('fuse_v.w', names)
        self.assertNotIn('fuse_k.w', names)
        self.assertNotIn('fuse_v.w', dict(DenseAttention(8, heads=2, fusion='conv1x1').named_parameters()))
        self.assertRaises(ValueError, lambda: SGSA(8, heads=2, fusion='concat'))

    def test_conv1x1_pass_through(self):
        """Fusion convs that select t reproduce the multiply path with S = 1"""
        fused = SGSA(8, heads=2, fusion='conv1x1').reset_parameters(8)
        select = np.concatenate([np.eye(8), np.zeros((8, 8))], axis=1).astype(np.float32)[:, :, None, None]
        for layer in (fused.fuse_k, fused.fuse_v):
            layer.w.data = select.copy()
            layer.b.data = np.zeros(8, dtype=np.float32)
        plain = SGSA(8, heads=2)
        weights = dict(fused.named_parameters())
        for name, param in plain.named_parameters():
            param.data = weights[name].data.copy()
        np.testing.assert_allclose(fused(Tensor(self.x), Tensor(self.s)).data,
                                   plain(Tensor(self.x), Tensor(np.ones_like(self.s))).data, atol=1e-6)


if __name__ == '__main__':
    unittest.main()
