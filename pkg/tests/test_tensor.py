"""Autodiff engine tests: forward oracles via naive loops, gradients via
central finite differences in float64."""

import numpy as np
import pytest

from exposhift import tensor as T


def fd_grad(f, t, h=1e-6):
    """Dense central-difference gradient of scalar f() w.r.t. tensor t."""
    buf = t.data.reshape(-1)
    g = np.zeros_like(buf)
    for i in range(buf.size):
        orig = buf[i]
        buf[i] = orig + h
        fp = f().item()
        buf[i] = orig - h
        fm = f().item()
        buf[i] = orig
        g[i] = (fp - fm) / (2 * h)
    return g.reshape(t.data.shape)


def check_grads(f, tensors, rtol=1e-5, atol=1e-8, h=1e-6):
    with T.precision("float64"):
        loss = f()
        for t in tensors:
            t.grad = None
        loss.backward()
        for t in tensors:
            an = t.grad if t.grad is not None else np.zeros_like(t.data)
            fd = fd_grad(f, t, h=h)
            np.testing.assert_allclose(an, fd, rtol=rtol, atol=atol)


def t64(arr, rg=True):
    return T.Tensor(np.asarray(arr, dtype=np.float64), requires_grad=rg)


# ---------------------------------------------------------------------------
# basics


def test_scalar_chain():
    x = t64(2.0)
    y = (x * x + 3.0 * x + 1.0)
    y.backward()
    assert y.item() == 11.0
    assert x.grad == pytest.approx(7.0)


def test_backward_requires_scalar():
    x = t64(np.ones(3))
    with pytest.raises(T.ShapeError):
        (x * 2).backward()


def test_broadcast_gradients():
    rng = np.random.default_rng(1)
    a = t64(rng.standard_normal((3, 4)))
    b = t64(rng.standard_normal((1, 4)))
    c = t64(rng.standard_normal(()))
    check_grads(lambda: ((a * b + c) ** 2).mean(), [a, b, c])


def test_div_matmul_grads():
    rng = np.random.default_rng(2)
    a = t64(rng.standard_normal((4, 3)))
    b = t64(rng.standard_normal((3, 5)))
    d = t64(rng.random((4, 5)) + 1.0)
    check_grads(lambda: ((a @ b) / d).sum(), [a, b, d])


def test_elementwise_grads():
    rng = np.random.default_rng(3)
    x = t64(rng.random((3, 3)) + 0.5)
    check_grads(lambda: (x.exp() + x.log() + x.sqrt() + x.sigmoid()).sum(), [x])


def test_abs_relu_clip_grads_away_from_kinks():
    x = t64([[-2.0, -0.5], [0.5, 2.0]])
    check_grads(lambda: (x.abs() + x.relu() + x.clip(-1.0, 1.0)).sum(), [x])


def test_clip_zero_grad_outside_range():
    x = t64([-2.0, 0.5, 2.0])
    y = x.clip(-1.0, 1.0).sum()
    y.backward()
    np.testing.assert_array_equal(x.grad, [0.0, 1.0, 0.0])


def test_sigmoid_extreme_inputs_stable():
    x = T.Tensor(np.array([-500.0, 500.0], dtype=np.float64))
    y = x.sigmoid()
    np.testing.assert_allclose(y.data, [0.0, 1.0], atol=1e-12)


def test_sum_mean_axes():
    rng = np.random.default_rng(4)
    x = t64(rng.standard_normal((2, 3, 4)))
    check_grads(lambda: (x.sum(axis=1) * x.mean(axis=(0, 2), keepdims=True).sum()).sum(), [x])


def test_reshape_transpose_getitem_take_concat():
    rng = np.random.default_rng(5)
    a = t64(rng.standard_normal((4, 6)))
    b = t64(rng.standard_normal((2, 6)))

    def f():
        c = T.concat([a, b], axis=0)          # [6, 6]
        d = c.take([0, 0, 5, 3], axis=0)      # repeat row 0
        e = d.reshape(2, 2, 6).transpose(1, 0, 2)
        return (e[0] * e[1]).sum()

    check_grads(f, [a, b])


def test_minimum_tie_routes_to_first():
    a = t64([1.0, 2.0, 3.0])
    b = t64([1.0, 5.0, 2.0])
    m = T.minimum(a, b)
    m.sum().backward()
    np.testing.assert_array_equal(a.grad, [1.0, 1.0, 0.0])
    np.testing.assert_array_equal(b.grad, [0.0, 0.0, 1.0])


def test_softmax_matches_direct_and_grads():
    rng = np.random.default_rng(6)
    x = t64(rng.standard_normal((3, 5)))
    s = T.softmax(x, axis=1)
    e = np.exp(x.data - x.data.max(axis=1, keepdims=True))
    np.testing.assert_allclose(s.data, e / e.sum(axis=1, keepdims=True), rtol=1e-12)
    w = rng.standard_normal((3, 5))
    check_grads(lambda: (T.softmax(x, axis=1) * T.Tensor(w)).sum(), [x])


def test_linear_shape_check():
    x = t64(np.ones((2, 5)))
    w = t64(np.ones((3, 4)))
    b = t64(np.zeros(3))
    with pytest.raises(T.ShapeError, match="width"):
        T.linear(x, w, b)


def test_nonfinite_raises():
    x = T.Tensor(np.array([0.0]))
    with pytest.raises(T.NonFiniteError):
        x.log()
    with pytest.raises(T.NonFiniteError):
        T.Tensor(np.array([1e30], dtype=np.float32)).exp()


def test_no_grad_blocks_recording():
    x = t64(3.0)
    with T.no_grad():
        y = x * x
    assert not y.requires_grad
    z = x * x
    assert z.requires_grad


def test_precision_context():
    assert T.Tensor([1.0]).dtype == np.float32
    with T.precision("float64"):
        assert T.Tensor([1.0]).dtype == np.float64
    assert T.Tensor([1.0]).dtype == np.float32


def test_grad_accumulates_across_uses():
    x = t64(2.0)
    y = x * x + x * 3.0
    y.backward()
    assert x.grad == pytest.approx(7.0)


# ---------------------------------------------------------------------------
# padding


@pytest.mark.parametrize("mode", ["zero", "replicate", "reflect"])
def test_pad2d_forward_matches_numpy(mode):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 4, 5))
    np_mode = {"zero": "constant", "replicate": "edge", "reflect": "reflect"}[mode]
    ref = np.pad(x, ((0, 0), (0, 0), (1, 2), (2, 1)), mode=np_mode)
    out = T.pad2d(T.Tensor(x), (1, 2, 2, 1), mode=mode)
    np.testing.assert_allclose(out.data, ref, rtol=1e-12)


@pytest.mark.parametrize("mode", ["zero", "replicate", "reflect"])
def test_pad2d_grads(mode):
    rng = np.random.default_rng(8)
    x = t64(rng.standard_normal((1, 2, 4, 4)))
    w = rng.standard_normal((1, 2, 7, 7))
    check_grads(lambda: (T.pad2d(x, (1, 2, 2, 1), mode=mode) * T.Tensor(w)).sum(), [x])


# ---------------------------------------------------------------------------
# convolution


def naive_conv2d(x, w, b, stride, padding):
    N, C, H, W = x.shape
    Co, _, k, _ = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    Ho = (H + 2 * padding - k) // stride + 1
    Wo = (W + 2 * padding - k) // stride + 1
    out = np.zeros((N, Co, Ho, Wo), dtype=x.dtype)
    for n in range(N):
        for co in range(Co):
            for i in range(Ho):
                for j in range(Wo):
                    patch = xp[n, :, i * stride:i * stride + k, j * stride:j * stride + k]
                    out[n, co, i, j] = (patch * w[co]).sum() + b[co]
    return out


@pytest.mark.parametrize("stride,padding,k", [(1, 0, 1), (1, 1, 3), (2, 1, 3), (2, 2, 5)])
def test_conv2d_forward_oracle(stride, padding, k):
    rng = np.random.default_rng(9)
    x = rng.standard_normal((2, 3, 8, 9))
    w = rng.standard_normal((4, 3, k, k))
    b = rng.standard_normal(4)
    out = T.conv2d(T.Tensor(x), T.Tensor(w), T.Tensor(b), stride=stride, padding=padding)
    ref = naive_conv2d(x, w, b, stride, padding)
    np.testing.assert_allclose(out.data, ref, rtol=1e-10, atol=1e-12)


def test_conv2d_grads():
    rng = np.random.default_rng(10)
    x = t64(rng.standard_normal((2, 2, 5, 5)))
    w = t64(rng.standard_normal((3, 2, 3, 3)))
    b = t64(rng.standard_normal(3))
    tgt = rng.standard_normal((2, 3, 3, 3))
    check_grads(
        lambda: ((T.conv2d(x, w, b, stride=2, padding=1) - T.Tensor(tgt)) ** 2).mean(),
        [x, w, b])


def test_conv2d_shape_errors_name_offender():
    x = T.Tensor(np.zeros((1, 3, 8, 8)))
    with pytest.raises(T.ShapeError, match="channels"):
        T.conv2d(x, T.Tensor(np.zeros((4, 2, 3, 3))), T.Tensor(np.zeros(4)))
    with pytest.raises(T.ShapeError, match="odd"):
        T.conv2d(x, T.Tensor(np.zeros((4, 3, 2, 2))), T.Tensor(np.zeros(4)))
    with pytest.raises(T.ShapeError, match="square"):
        T.conv2d(x, T.Tensor(np.zeros((4, 3, 3, 5))), T.Tensor(np.zeros(4)))
    with pytest.raises(T.ShapeError, match="bias"):
        T.conv2d(x, T.Tensor(np.zeros((4, 3, 3, 3))), T.Tensor(np.zeros(5)))
    with pytest.raises(T.ShapeError, match="4-D"):
        T.conv2d(T.Tensor(np.zeros((3, 8, 8))), T.Tensor(np.zeros((4, 3, 3, 3))),
                 T.Tensor(np.zeros(4)))


# ---------------------------------------------------------------------------
# instance norm


def test_instance_norm_forward_stats():
    rng = np.random.default_rng(11)
    x = rng.standard_normal((2, 3, 6, 6)) * 4 + 2
    y = T.instance_norm(T.Tensor(x, requires_grad=False))
    np.testing.assert_allclose(y.data.mean(axis=(2, 3)), 0.0, atol=1e-6)
    np.testing.assert_allclose(y.data.var(axis=(2, 3)), 1.0, atol=1e-3)


def test_instance_norm_grads():
    rng = np.random.default_rng(12)
    x = t64(rng.standard_normal((2, 2, 4, 4)))
    w = rng.standard_normal((2, 2, 4, 4))
    check_grads(lambda: (T.instance_norm(x) * T.Tensor(w)).sum(), [x], rtol=1e-4)


# ---------------------------------------------------------------------------
# attention


def naive_attention(x, wq, bq, wk, bk, wv, bv, gamma):
    N, C, H, W = x.shape
    P = H * W
    out = np.empty_like(x)
    for n in range(N):
        flat = x[n].reshape(C, P)
        q = wq.reshape(C, C) @ flat + bq[:, None]
        k = wk.reshape(C, C) @ flat + bk[:, None]
        v = wv.reshape(C, C) @ flat + bv[:, None]
        logits = k.T @ q                       # [P(key), P(query)]
        e = np.exp(logits - logits.max(axis=0, keepdims=True))
        attn = e / e.sum(axis=0, keepdims=True)
        out[n] = (flat + gamma * (v @ attn)).reshape(C, H, W)
    return out


def test_self_attention_forward_oracle():
    rng = np.random.default_rng(13)
    C = 3
    x = rng.standard_normal((2, C, 4, 4))
    wq, wk, wv = (rng.standard_normal((C, C, 1, 1)) * 0.3 for _ in range(3))
    bq, bk, bv = (rng.standard_normal(C) * 0.1 for _ in range(3))
    gamma = 0.7
    out = T.self_attention(T.Tensor(x), T.Tensor(wq), T.Tensor(bq), T.Tensor(wk),
                           T.Tensor(bk), T.Tensor(wv), T.Tensor(bv),
                           T.Tensor(np.array(gamma)))
    ref = naive_attention(x, wq, bq, wk, bk, wv, bv, gamma)
    np.testing.assert_allclose(out.data, ref, rtol=1e-8, atol=1e-10)


def test_self_attention_identity_at_zero_gamma():
    rng = np.random.default_rng(14)
    x = rng.standard_normal((1, 4, 5, 5))
    z = [T.Tensor(rng.standard_normal((4, 4, 1, 1))), T.Tensor(np.zeros(4))] * 3
    out = T.self_attention(T.Tensor(x), *z, T.Tensor(np.zeros(())))
    np.testing.assert_array_equal(out.data, x)


def test_self_attention_grads():
    rng = np.random.default_rng(15)
    C = 2
    x = t64(rng.standard_normal((1, C, 3, 3)) * 0.5)
    wq = t64(rng.standard_normal((C, C, 1, 1)) * 0.3)
    wk = t64(rng.standard_normal((C, C, 1, 1)) * 0.3)
    wv = t64(rng.standard_normal((C, C, 1, 1)) * 0.3)
    bq, bk, bv = t64(np.zeros(C)), t64(np.zeros(C)), t64(np.zeros(C))
    gam = t64(0.5)
    w = rng.standard_normal((1, C, 3, 3))
    check_grads(
        lambda: (T.self_attention(x, wq, bq, wk, bk, wv, bv, gam) * T.Tensor(w)).sum(),
        [x, wq, wk, wv, bq, bk, bv, gam], rtol=1e-4)


# ---------------------------------------------------------------------------
# pooling and resampling


def naive_adaptive_pool(x, oh, ow):
    N, C, H, W = x.shape
    out = np.zeros((N, C, oh, ow), dtype=x.dtype)
    for i in range(oh):
        r0, r1 = (i * H) // oh, -(-((i + 1) * H) // oh)
        for j in range(ow):
            c0, c1 = (j * W) // ow, -(-((j + 1) * W) // ow)
            out[:, :, i, j] = x[:, :, r0:r1, c0:c1].mean(axis=(2, 3))
    return out


@pytest.mark.parametrize("hw,ohw", [((8, 8), (2, 2)), ((7, 5), (2, 2)), ((6, 9), (3, 2)),
                                    ((5, 5), (5, 5))])
def test_adaptive_pool_oracle(hw, ohw):
    rng = np.random.default_rng(16)
    x = rng.standard_normal((2, 3) + hw)
    out = T.adaptive_avg_pool2d(T.Tensor(x), *ohw)
    np.testing.assert_allclose(out.data, naive_adaptive_pool(x, *ohw), rtol=1e-10)


def test_adaptive_pool_grads_and_errors():
    rng = np.random.default_rng(17)
    x = t64(rng.standard_normal((1, 2, 5, 7)))
    w = rng.standard_normal((1, 2, 2, 3))
    check_grads(lambda: (T.adaptive_avg_pool2d(x, 2, 3) * T.Tensor(w)).sum(), [x])
    with pytest.raises(T.ShapeError):
        T.adaptive_avg_pool2d(x, 6, 2)
    with pytest.raises(T.ShapeError):
        T.adaptive_avg_pool2d(x, 0, 2)


def test_avg_downsample_oracle_and_grads():
    rng = np.random.default_rng(18)
    x = rng.standard_normal((1, 2, 6, 4))
    out = T.avg_downsample(T.Tensor(x), 2)
    ref = x.reshape(1, 2, 3, 2, 2, 2).mean(axis=(3, 5))
    np.testing.assert_allclose(out.data, ref, rtol=1e-10)
    xt = t64(x)
    w = rng.standard_normal((1, 2, 3, 2))
    check_grads(lambda: (T.avg_downsample(xt, 2) * T.Tensor(w)).sum(), [xt])
    with pytest.raises(T.ShapeError):
        T.avg_downsample(T.Tensor(np.zeros((1, 1, 5, 4))), 2)


def naive_bilinear_up(x, f):
    N, C, H, W = x.shape
    Ho, Wo = H * f, W * f
    out = np.zeros((N, C, Ho, Wo), dtype=x.dtype)
    for i in range(Ho):
        si = min(max((i + 0.5) * H / Ho - 0.5, 0.0), H - 1.0)
        i0 = int(np.floor(si)); i1 = min(i0 + 1, H - 1); ti = si - i0
        for j in range(Wo):
            sj = min(max((j + 0.5) * W / Wo - 0.5, 0.0), W - 1.0)
            j0 = int(np.floor(sj)); j1 = min(j0 + 1, W - 1); tj = sj - j0
            out[:, :, i, j] = ((1 - ti) * (1 - tj) * x[:, :, i0, j0]
                               + (1 - ti) * tj * x[:, :, i0, j1]
                               + ti * (1 - tj) * x[:, :, i1, j0]
                               + ti * tj * x[:, :, i1, j1])
    return out


@pytest.mark.parametrize("factor", [2, 3])
def test_bilinear_upsample_oracle(factor):
    rng = np.random.default_rng(19)
    x = rng.standard_normal((2, 2, 4, 5))
    out = T.bilinear_upsample(T.Tensor(x), factor)
    np.testing.assert_allclose(out.data, naive_bilinear_up(x, factor), rtol=1e-8, atol=1e-10)


def test_bilinear_upsample_constant_preserved():
    x = T.Tensor(np.full((1, 3, 4, 4), 0.42, dtype=np.float64))
    out = T.bilinear_upsample(x, 2)
    np.testing.assert_allclose(out.data, 0.42, rtol=1e-12)


def test_bilinear_upsample_grads():
    rng = np.random.default_rng(20)
    x = t64(rng.standard_normal((1, 2, 3, 4)))
    w = rng.standard_normal((1, 2, 6, 8))
    check_grads(lambda: (T.bilinear_upsample(x, 2) * T.Tensor(w)).sum(), [x])


# ---------------------------------------------------------------------------
# windowed minimum


def naive_windowed_min(x, window):
    N, C, H, W = x.shape
    lo = (window - 1) // 2
    hi = window // 2
    rows = np.clip(np.arange(-lo, H + hi), 0, H - 1)
    cols = np.clip(np.arange(-lo, W + hi), 0, W - 1)
    xp = x[:, :, rows][:, :, :, cols]
    out = np.zeros_like(x)
    for i in range(H):
        for j in range(W):
            out[:, :, i, j] = xp[:, :, i:i + window, j:j + window].min(axis=(2, 3))
    return out


@pytest.mark.parametrize("window,hw", [(2, (6, 6)), (3, (7, 5)), (16, (20, 24)), (16, (9, 9))])
def test_windowed_min_forward_oracle(window, hw):
    rng = np.random.default_rng(21)
    x = rng.random((2, 2) + hw)
    out = T.windowed_min2d(T.Tensor(x), window)
    np.testing.assert_array_equal(out.data, naive_windowed_min(x, window))


def test_windowed_min_grad_is_count_of_wins():
    # distinct values: each output routes 1 unit to its unique argmin
    rng = np.random.default_rng(22)
    x = rng.permutation(48).astype(np.float64).reshape(1, 1, 6, 8)
    xt = T.Tensor(x, requires_grad=True)
    out = T.windowed_min2d(xt, 3)
    out.sum().backward()
    assert xt.grad.sum() == 48.0
    # global min wins every window containing it
    gi = np.unravel_index(x.argmin(), x.shape)
    assert xt.grad[gi] >= 4.0


def test_windowed_min_tie_routes_row_major_first():
    # constant input: every window ties everywhere, so the gradient must land
    # on the top-left (row-major first) source pixel of each window
    x = np.ones((1, 1, 4, 4), dtype=np.float64)
    xt = T.Tensor(x, requires_grad=True)
    out = T.windowed_min2d(xt, 3)
    out.sum().backward()
    g = xt.grad[0, 0]
    # window of (i,j) covers i-1..i+1; its first row-major pixel maps to
    # source (max(i-1,0), max(j-1,0)) after replicate padding
    expect = np.zeros((4, 4))
    for i in range(4):
        for j in range(4):
            expect[max(i - 1, 0), max(j - 1, 0)] += 1.0
    np.testing.assert_array_equal(g, expect)
    assert g[0, 0] == 4.0 and g[3, 3] == 0.0


def test_windowed_min_grads_fd():
    rng = np.random.default_rng(23)
    x = t64(rng.permutation(30).astype(np.float64).reshape(1, 1, 5, 6) * 0.1)
    w = rng.standard_normal((1, 1, 5, 6))
    check_grads(lambda: (T.windowed_min2d(x, 3) * T.Tensor(w)).sum(), [x], h=1e-4)


# ---------------------------------------------------------------------------
# params


def test_paramset_registry():
    ps = T.ParamSet()
    ps.add("a.w", np.zeros((2, 2)))
    ps.add("a.b", np.zeros(2))
    with pytest.raises(ValueError, match="duplicate"):
        ps.add("a.w", np.zeros(1))
    assert ps.names() == ["a.w", "a.b"]
    assert "a.w" in ps and len(ps) == 2
    arrays = ps.arrays()
    arrays["a.w"] = np.ones((2, 2))
    ps.load_arrays(arrays)
    np.testing.assert_array_equal(ps["a.w"].data, np.ones((2, 2), dtype=np.float32))
    with pytest.raises(T.ShapeError):
        ps.load_arrays({"a.w": np.ones(3), "a.b": np.zeros(2)})
    with pytest.raises(KeyError):
        ps.load_arrays({"a.w": np.ones((2, 2))})


def test_kaiming_uniform_bound():
    rng = np.random.default_rng(24)
    w = T.kaiming_uniform(rng, (64, 64), fan_in=9 * 16)
    bound = np.sqrt(6.0 / (9 * 16))
    assert np.abs(w).max() <= bound
    assert np.abs(w).max() > 0.8 * bound      # actually fills the range


def test_gradcheck_utility_passes_and_fails():
    rng = np.random.default_rng(25)
    with T.precision("float64"):
        ps = T.ParamSet()
        ps.add("w", rng.standard_normal((4, 4)))
        x = T.Tensor(rng.standard_normal((4, 4)))
        T.gradcheck(lambda: ((ps["w"] @ x) ** 2).mean(), list(ps),
                    np.random.default_rng(0), n_samples=5)

        class Broken(T.Tensor):
            pass

        # a deliberately wrong backward must be caught
        ps2 = T.ParamSet()
        ps2.add("w", rng.standard_normal(6))

        def bad_loss():
            w = ps2["w"]
            out = T.Tensor.__new__(T.Tensor)
            out.data = np.asarray((w.data ** 3).sum())
            out.grad = None
            out.requires_grad = True
            out._parents = (w,)

            def bwd(g):
                w.grad = g * 2 * w.data       # wrong: claims d/dw = 2w
            out._backward = bwd
            return out

        with pytest.raises(AssertionError):
            T.gradcheck(bad_loss, list(ps2), np.random.default_rng(0), n_samples=5)
