import zlib

import numpy as np
import pytest

from hybridla import nn
from hybridla.nn import Tensor, grad_check
from hybridla.nn import functional as F


def naive_matmul(a, b):
    m, k = a.shape
    n = b.shape[1]
    c = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for t in range(k):
                s += a[i, t] * b[t, j]
            c[i, j] = s
    return c


def naive_conv(x, w, stride, pad):
    C, H, W = x.shape
    O, _, k, _ = w.shape
    xp = np.zeros((C, H + 2 * pad, W + 2 * pad))
    xp[:, pad:pad + H, pad:pad + W] = x
    Ho = (H + 2 * pad - k) // stride + 1
    Wo = (W + 2 * pad - k) // stride + 1
    out = np.zeros((O, Ho, Wo))
    for o in range(O):
        for i in range(Ho):
            for j in range(Wo):
                s = 0.0
                for c in range(C):
                    for di in range(k):
                        for dj in range(k):
                            s += w[o, c, di, dj] * xp[c, i * stride + di, j * stride + dj]
                out[o, i, j] = s
    return out


def reference_attention(q, k, v, heads, wq, wk, wv, wo, mask=None):
    """Unfused per-head loop."""
    D = q.shape[1]
    dh = D // heads
    Q, K, V = q @ wq, k @ wk, v @ wv
    outs = []
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        s = Q[:, sl] @ K[:, sl].T / np.sqrt(dh)
        if mask is not None:
            s = np.where(mask, s, -np.inf)
        s = np.exp(s - s.max(axis=1, keepdims=True))
        a = s / s.sum(axis=1, keepdims=True)
        outs.append(a @ V[:, sl])
    return np.concatenate(outs, axis=1) @ wo


class TestMatmul:
    def test_identity(self):
        x = np.random.default_rng(0).normal(size=(3, 3))
        np.testing.assert_array_equal(nn.matmul(Tensor(np.eye(3)), Tensor(x)).data, x)

    def test_annihilator(self):
        out = nn.matmul(Tensor(np.zeros((2, 3))), Tensor(np.ones((3, 4))))
        np.testing.assert_array_equal(out.data, np.zeros((2, 4)))

    def test_against_triple_loop(self):
        rng = np.random.default_rng(1)
        for _ in range(20):
            a, b = rng.normal(size=(4, 5)), rng.normal(size=(5, 3))
            np.testing.assert_allclose(nn.matmul(Tensor(a), Tensor(b)).data, naive_matmul(a, b), atol=1e-12)

    def test_shape_error_names_shapes(self):
        with pytest.raises(nn.ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
            nn.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(nn.softmax(Tensor(np.full(7, 0.3))).data, np.full(7, 1 / 7))

    def test_shift_invariance(self):
        x = np.random.default_rng(2).normal(size=(3, 6))
        a = nn.softmax(Tensor(x), axis=1).data
        b = nn.softmax(Tensor(x + 123.4), axis=1).data
        np.testing.assert_allclose(a, b, atol=1e-12)

    def test_closed_form(self):
        np.testing.assert_allclose(nn.softmax(Tensor([0.0, np.log(3.0)])).data, [0.25, 0.75], atol=1e-15)

    def test_simplex(self):
        x = np.random.default_rng(3).uniform(-50, 50, size=(20, 9))
        p = nn.softmax(Tensor(x), axis=-1).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    def test_bad_axis(self):
        with pytest.raises(nn.ShapeError):
            nn.softmax(Tensor(np.ones((2, 2))), axis=2)


class TestLayerNorm:
    def test_constant_row(self):
        out = nn.layer_norm(Tensor(np.full((1, 5), 3.0)), np.ones(5), np.zeros(5), 1e-5)
        np.testing.assert_array_equal(out.data, np.zeros((1, 5)))

    def test_gamma_zero(self):
        beta = np.arange(4.0)
        out = nn.layer_norm(Tensor(np.random.default_rng(0).normal(size=(3, 4))), np.zeros(4), beta)
        np.testing.assert_array_equal(out.data, np.tile(beta, (3, 1)))

    def test_moments(self):
        x = np.random.default_rng(4).normal(3.0, 2.0, size=(1, 64))
        out = nn.layer_norm(Tensor(x), np.ones(64), np.zeros(64), 1e-12).data
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1) < 1e-6

    def test_eps_must_be_positive(self):
        with pytest.raises(nn.ParameterError):
            nn.layer_norm(Tensor(np.ones((1, 3))), np.ones(3), np.zeros(3), 0.0)


class TestConv2d:
    def test_identity_kernel(self):
        x = np.random.default_rng(5).normal(size=(1, 6, 7))
        out = nn.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), stride=1, pad=0)
        np.testing.assert_array_equal(out.data, x)

    def test_counting(self):
        out = nn.conv2d(Tensor(np.ones((1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), stride=1, pad=0)
        np.testing.assert_array_equal(out.data, np.full((1, 3, 3), 9.0))

    @pytest.mark.parametrize("stride,pad", [(1, 0), (1, 1), (2, 1), (2, 0), (3, 2)])
    def test_against_nested_loops(self, stride, pad):
        rng = np.random.default_rng(stride * 10 + pad)
        x, w = rng.normal(size=(3, 7, 8)), rng.normal(size=(4, 3, 3, 3))
        out = nn.conv2d(Tensor(x), Tensor(w), stride=stride, pad=pad)
        np.testing.assert_allclose(out.data, naive_conv(x, w, stride, pad), atol=1e-12)

    def test_batched_matches_single(self):
        rng = np.random.default_rng(6)
        x, w = rng.normal(size=(2, 3, 6, 6)), rng.normal(size=(4, 3, 3, 3))
        out = nn.conv2d(Tensor(x), Tensor(w), stride=2, pad=1).data
        for b in range(2):
            np.testing.assert_allclose(out[b], naive_conv(x[b], w, 2, 1), atol=1e-12)

    def test_bad_stride(self):
        with pytest.raises(nn.ParameterError):
            nn.conv2d(Tensor(np.ones((1, 3, 3))), Tensor(np.ones((1, 1, 1, 1))), stride=0)


class TestAttention:
    def test_single_key(self):
        rng = np.random.default_rng(7)
        I = np.eye(4)
        q, k, v = rng.normal(size=(1, 4)), rng.normal(size=(1, 4)), rng.normal(size=(1, 4))
        out = F.multi_head_attention(q, k, v, 2, I, I, I, I)
        np.testing.assert_allclose(out.data, v, atol=1e-15)

    def test_forced_attention(self):
        rng = np.random.default_rng(8)
        ws = [rng.normal(size=(4, 4)) for _ in range(4)]
        q, kv = rng.normal(size=(3, 4)), rng.normal(size=(5, 4))
        mask = np.zeros((3, 5), dtype=bool)
        mask[:, 2] = True
        out = F.multi_head_attention(q, kv, kv, 2, *ws, mask=mask)
        expected = np.tile(kv[2] @ ws[2] @ ws[3], (3, 1))
        np.testing.assert_allclose(out.data, expected, atol=1e-12)

    def test_against_reference(self):
        rng = np.random.default_rng(9)
        ws = [rng.normal(size=(6, 6)) for _ in range(4)]
        x = rng.normal(size=(4, 6))
        out = F.multi_head_attention(x, x, x, 2, *ws)
        np.testing.assert_allclose(out.data, reference_attention(x, x, x, 2, *ws), atol=1e-12)

    def test_indivisible_heads(self):
        with pytest.raises(nn.ParameterError):
            F.multi_head_attention(np.ones((2, 5)), np.ones((2, 5)), np.ones((2, 5)), 2,
                                   *[np.eye(5)] * 4)


class TestBilinearSample:
    def test_nan_point_gives_nan_row(self):
        f = np.ones((3, 3, 2))
        out = F.bilinear_sample(Tensor(f), Tensor(np.array([[np.nan, 0.5], [0.5, 0.5]]))).data
        assert np.isnan(out[0]).all()
        np.testing.assert_allclose(out[1], 1.0)

    def test_cell_centres_are_exact(self):
        f = np.arange(24.0).reshape(2, 4, 3)
        ys, xs = np.meshgrid(np.arange(2), np.arange(4), indexing="ij")
        pts = np.stack([(xs.ravel() + 0.5) / 4, (ys.ravel() + 0.5) / 2], axis=1)
        np.testing.assert_allclose(nn.bilinear_sample(f, pts).data, f.reshape(8, 3), atol=1e-12)

    def test_midpoint_averages_neighbours(self):
        f = np.zeros((2, 2, 1))
        f[0, 0], f[0, 1], f[1, 0], f[1, 1] = 1.0, 3.0, 5.0, 7.0
        assert nn.bilinear_sample(f, [[0.5, 0.5]]).data.item() == 4.0
        assert nn.bilinear_sample(f, [[0.5, 0.25]]).data.item() == 2.0

    def test_border_clamp(self):
        f = np.arange(6.0).reshape(1, 6, 1)
        pts = Tensor(np.array([[0.0, 0.5], [1.0, 0.5]]), requires_grad=True)
        out = nn.bilinear_sample(f, pts)
        np.testing.assert_array_equal(out.data.ravel(), [0.0, 5.0])
        out.sum().backward()
        np.testing.assert_array_equal(pts.grad, np.zeros((2, 2)))

    def test_linear_in_x(self):
        f = np.arange(5.0).reshape(1, 5, 1)       # value equals the column index
        xs = np.linspace(0.1, 0.9, 9)
        got = nn.bilinear_sample(f, np.c_[xs, np.full(9, 0.5)]).data.ravel()
        np.testing.assert_allclose(got, xs * 5 - 0.5, atol=1e-12)

    def test_gradients(self):
        rng = np.random.default_rng(3)
        f = rng.normal(size=(3, 4, 2))
        w = rng.normal(size=(5, 2))
        assert grad_check(lambda t: (nn.bilinear_sample(f, t) * w).sum(), rng.uniform(0.2, 0.8, (5, 2))) < 1e-6
        pts = rng.uniform(0, 1, (5, 2))
        assert grad_check(lambda t: (nn.bilinear_sample(t, pts) * w).sum(), f) < 1e-6

    def test_shapes(self):
        with pytest.raises(nn.ShapeError):
            nn.bilinear_sample(np.zeros((4, 3)), [[0.5, 0.5]])


class TestBackward:
    def test_sum(self):
        x = Tensor(np.random.default_rng(0).normal(size=(3, 2)), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((3, 2)))

    def test_square(self):
        x = Tensor([1.0, -2.0], requires_grad=True)
        (x * x).sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, -4.0])

    def test_accumulates(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        (x * 3.0).sum().backward()
        (x * 3.0).sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0, 6.0])

    def test_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(nn.ContractError):
            (x * 2.0).backward()

    def test_mlp_finite_differences(self):
        rng = np.random.default_rng(10)
        mlp = nn.MLP([5, 7, 6, 3], seed=1, name="mlp")
        x = rng.uniform(-2, 2, size=(4, 5))
        err = nn.grad_check_params(lambda: (nn.tanh(mlp(x)) ** 2).sum(), mlp.parameters())
        assert err < 1e-4

    def test_shared_node_diamond(self):
        x = Tensor([0.5, 1.5], requires_grad=True)
        y = x * x
        (y + y * 2.0).sum().backward()
        np.testing.assert_allclose(x.grad, 6 * x.data)


class TestGradCheck:
    def test_linear_exact(self):
        x = np.random.default_rng(0).normal(size=(5,))
        assert grad_check(lambda t: t.sum(), x) < 1e-10

    def test_sin(self):
        x = np.random.default_rng(1).normal(size=(6,))
        assert grad_check(lambda t: nn.sin(t).sum(), x) < 1e-6

    def test_rejects_bad_step(self):
        with pytest.raises(ValueError):
            grad_check(lambda t: t.sum(), np.ones(2), h=0.0)


# Primitive gradient checks, each over 50 random trials with entries in [-2, 2].
def _rand(rng, *shape):
    return rng.uniform(-2, 2, size=shape)


PRIMITIVES = {
    "matmul": lambda rng: (lambda t, b=_rand(rng, 3, 2): (nn.matmul(t, b) ** 2).sum(), _rand(rng, 4, 3)),
    "softmax": lambda rng: (lambda t, w=_rand(rng, 3, 5): (nn.softmax(t, axis=1) * w).sum(), _rand(rng, 3, 5)),
    "log_softmax": lambda rng: (lambda t, w=_rand(rng, 3, 5): (nn.log_softmax(t, axis=1) * w).sum(), _rand(rng, 3, 5)),
    "layer_norm": lambda rng: (lambda t, w=_rand(rng, 3, 6): (nn.layer_norm(t, np.full(6, 1.3), np.full(6, 0.2)) * w).sum(), _rand(rng, 3, 6)),
    "conv2d": lambda rng: (lambda t, k=_rand(rng, 2, 2, 3, 3): (nn.conv2d(t, k, stride=2, pad=1) ** 2).sum(), _rand(rng, 2, 5, 5)),
    "attention": lambda rng: (lambda t, ws=[_rand(rng, 4, 4) * 0.5 for _ in range(4)]: (F.multi_head_attention(t, t, t, 2, *ws) ** 2).sum(), _rand(rng, 3, 4)),
    "sigmoid": lambda rng: (lambda t: (nn.sigmoid(t) ** 2).sum(), _rand(rng, 7)),
    "tanh": lambda rng: (lambda t: (nn.tanh(t) ** 3).sum(), _rand(rng, 7)),
    "exp_log": lambda rng: (lambda t: nn.log(nn.exp(t) + 1.0).sum(), _rand(rng, 7)),
    "div": lambda rng: (lambda t: (1.0 / (t * t + 1.0)).sum(), _rand(rng, 7)),
    "transpose_reshape": lambda rng: (lambda t, w=_rand(rng, 6, 2): (t.transpose(1, 0).reshape(6, 2) * w).sum() ** 2, _rand(rng, 2, 6)),
    "concat_index": lambda rng: (lambda t: (nn.concat([t[1:], t[:2] * 3.0]) ** 2).sum(), _rand(rng, 5)),
    "sine_embed": lambda rng: (lambda t, w=_rand(rng, 3, 8): (F.sine_embed_tensor(t, 4) * w).sum(), rng.uniform(0, 1, size=(3, 2))),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients(name):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    worst = 0.0
    for _ in range(50):
        f, x = PRIMITIVES[name](rng)
        worst = max(worst, grad_check(f, x, h=1e-5))
    assert worst < 1e-4, f"{name}: {worst}"
