import math

import numpy as np
import pytest

from fdcheck import REL_TOL, max_rel_error, numeric_grad, pick_coords
from ofdmaseg import autodiff as ad, segnet
from ofdmaseg.autodiff import Tensor


def brute_conv2d(x, kernel, bias, stride, dilation, pad_y, pad_x):
    """Direct 2-D cross-correlation: out[f,y,x] = sum_c sum_y' sum_x' K[f,c,y',x'] in[c, ...]."""
    c, h, w = x.shape
    f, _, ky, kx = kernel.shape
    xp = np.zeros((c, h + 2 * pad_y, w + 2 * pad_x))
    xp[:, pad_y:pad_y + h, pad_x:pad_x + w] = x
    ho = (h + 2 * pad_y - dilation * (ky - 1) - 1) // stride + 1
    wo = (w + 2 * pad_x - dilation * (kx - 1) - 1) // stride + 1
    out = np.zeros((f, ho, wo))
    for fi in range(f):
        for yo in range(ho):
            for xo in range(wo):
                acc = 0.0
                for ci in range(c):
                    for dy in range(ky):
                        for dx in range(kx):
                            acc += kernel[fi, ci, dy, dx] * xp[ci, yo * stride + dy * dilation,
                                                              xo * stride + dx * dilation]
                out[fi, yo, xo] = acc + bias[fi]
    return out


def random_config(rng):
    return dict(c=int(rng.integers(1, 9)), f=int(rng.integers(1, 9)), k=int(rng.choice([3, 5])),
                stride=int(rng.choice([1, 2])), dilation=int(rng.choice([1, 2, 4])),
                h=int(rng.integers(5, 13)), w=int(rng.integers(5, 13)))


def flat_conv_case(seed):
    rng = np.random.default_rng(seed)
    cfg = random_config(rng)
    x = rng.standard_normal((cfg["c"], cfg["h"], cfg["w"]))
    beta = rng.standard_normal((cfg["f"], cfg["c"], cfg["k"]))
    gamma = rng.standard_normal((cfg["f"], cfg["c"], cfg["k"]))
    bias = rng.standard_normal(cfg["f"])
    pad = ad.same_padding(cfg["k"], cfg["dilation"])
    kernel = beta[:, :, :, None] * gamma[:, :, None, :]
    expect = brute_conv2d(x, kernel, bias, cfg["stride"], cfg["dilation"], pad, pad)
    return cfg, x, beta, gamma, bias, expect


@pytest.mark.parametrize("method", ["gemm", "separable"])
@pytest.mark.parametrize("seed", range(0, 100, 10))
def test_flattened_conv_matches_bruteforce(seed, method):
    for s in range(seed, seed + 10):
        cfg, x, beta, gamma, bias, expect = flat_conv_case(s)
        got = segnet.flattened_conv(x, beta, gamma, bias, cfg["stride"], cfg["dilation"], method=method).data
        assert got.shape == expect.shape
        assert np.max(np.abs(got - expect)) / np.max(np.abs(expect)) < 1e-6


def test_separable_handles_unequal_kernel_lengths():
    rng = np.random.default_rng(7)
    x = rng.standard_normal((3, 9, 10))
    beta, gamma = rng.standard_normal((2, 3, 5)), rng.standard_normal((2, 3, 3))
    bias = np.zeros(2)
    got = segnet.flattened_conv(x, beta, gamma, bias, method="separable").data
    kernel = beta[:, :, :, None] * gamma[:, :, None, :]
    expect = brute_conv2d(x, kernel, bias, 1, 1, 2, 1)
    np.testing.assert_allclose(got, expect, rtol=1e-10, atol=1e-10)


def test_centre_one_hot_is_identity():
    x = np.random.default_rng(0).standard_normal((1, 7, 9))
    e = np.zeros((1, 1, 3))
    e[0, 0, 1] = 1.0
    for method in ("gemm", "separable"):
        np.testing.assert_allclose(segnet.flattened_conv(x, e, e, method=method).data, x, atol=1e-15)


def test_zero_beta_gives_bias():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 6, 6))
    bias = np.array([0.5, -1.0])
    y = segnet.flattened_conv(x, np.zeros((2, 4, 3)), rng.standard_normal((2, 4, 3)), bias).data
    np.testing.assert_array_equal(y, np.broadcast_to(bias[:, None, None], (2, 6, 6)))


def test_flattened_conv_shape_errors():
    with pytest.raises(ValueError):
        segnet.flattened_conv(np.zeros((3, 8, 8)), np.zeros((2, 4, 3)), np.zeros((2, 4, 3)))
    with pytest.raises(ValueError):
        segnet.flattened_conv(np.zeros((3, 8, 8)), np.zeros((2, 3, 4)), np.zeros((2, 3, 4)))


@pytest.mark.parametrize("trial", range(20))
def test_flattened_conv_grads_both_routes(trial):
    rng = np.random.default_rng(900 + trial)
    cfg = random_config(rng)
    x = rng.standard_normal((2, cfg["c"], cfg["h"], cfg["w"]))
    beta = rng.standard_normal((cfg["f"], cfg["c"], cfg["k"]))
    gamma = rng.standard_normal((cfg["f"], cfg["c"], cfg["k"]))
    bias = rng.standard_normal(cfg["f"])
    out_shape = segnet.flattened_conv(x, beta, gamma, bias, cfg["stride"], cfg["dilation"]).shape
    w = rng.standard_normal(out_shape)
    for method in ("gemm", "separable"):
        def f(arrs):
            y = segnet.flattened_conv(*arrs, cfg["stride"], cfg["dilation"], method=method)
            return ad.reduce_sum(ad.mul(y, w))
        ts = [Tensor(a.copy(), True) for a in (x, beta, gamma, bias)]
        ad.backward(f(ts))
        work = [x.copy(), beta.copy(), gamma.copy(), bias.copy()]
        for i, t in enumerate(ts):
            coords = pick_coords(t.size, rng, 8)
            num = numeric_grad(lambda a: float(f([Tensor(v) for v in a]).data), work, i, coords)
            assert max_rel_error(t.grad.flat[coords], num) < REL_TOL


def test_pointwise_grads():
    rng = np.random.default_rng(5)
    x, wt, b = rng.standard_normal((2, 6, 4, 5)), rng.standard_normal((3, 6)), rng.standard_normal(3)
    g = rng.standard_normal((2, 3, 4, 5))
    f = lambda a: ad.reduce_sum(ad.mul(segnet.pointwise(*a), g))  # noqa: E731
    ts = [Tensor(a.copy(), True) for a in (x, wt, b)]
    ad.backward(f(ts))
    work = [x.copy(), wt.copy(), b.copy()]
    for i, t in enumerate(ts):
        coords = pick_coords(t.size, rng)
        num = numeric_grad(lambda a: float(f([Tensor(v) for v in a]).data), work, i, coords)
        assert max_rel_error(t.grad.flat[coords], num) < REL_TOL


def _randomised_params(in_ch, seed):
    params = segnet.init_params(in_ch, seed)
    rng = np.random.default_rng(seed + 1000)
    params["cls.weight"].data = 0.3 * rng.standard_normal(params["cls.weight"].shape)
    for k, p in params.items():
        if k.endswith(".bias"):
            p.data = 0.1 * rng.standard_normal(p.shape)
    return params


@pytest.mark.parametrize("trial", range(20))
def test_full_network_loss_gradient(trial):
    """Forward plus summed cross-entropy on an 8-channel 16x16 crop vs central differences."""
    rng = np.random.default_rng(trial)
    params = _randomised_params(8, trial)
    image = rng.uniform(0, 1, (1, 8, 16, 16))
    mask = rng.integers(0, 5, (1, 16, 16))
    names = list(params)
    loss = segnet.loss(segnet.forward(params, image), mask)
    ad.backward(loss)
    arrays = [params[n].data.copy() for n in names]

    def f(arrs):
        p = {n: Tensor(a) for n, a in zip(names, arrs)}
        return float(segnet.loss(segnet.forward(p, image), mask).data)

    worst = 0.0
    for i in rng.choice(len(names), 8, replace=False):
        coords = pick_coords(arrays[i].size, rng, 3)
        num = numeric_grad(f, arrays, i, coords)
        worst = max(worst, max_rel_error(params[names[i]].grad.flat[coords], num))
    assert worst < REL_TOL


def test_forward_shape_and_uniform_start():
    params = segnet.init_params(3, 0)
    image = np.random.default_rng(0).uniform(0, 1, (3, 256, 300))
    logits = segnet.forward(params, image).data
    assert logits.shape == (1, 5, 256, 300)
    p = ad.softmax_over_channel(logits).data
    np.testing.assert_allclose(p, 0.2, atol=1e-12)


def test_shift_by_eight_columns():
    params = _randomised_params(3, 3)
    rng = np.random.default_rng(4)
    img = rng.uniform(0, 1, (1, 3, 32, 224))
    shifted = np.roll(img, 8, axis=3)
    a = segnet.forward(params, img).data
    b = segnet.forward(params, shifted).data
    margin = 80  # beyond the receptive-field half-width
    inner_a = a[..., margin:-margin - 8]
    inner_b = b[..., margin + 8:-margin]
    assert np.max(np.abs(inner_a - inner_b)) < 1e-3


def test_loss_matches_pixel_loop():
    rng = np.random.default_rng(6)
    logits = 4 * rng.standard_normal((2, 5, 6, 7))
    mask = rng.integers(0, 5, (2, 6, 7))
    total = 0.0
    for n in range(2):
        for y in range(6):
            for x in range(7):
                z = logits[n, :, y, x]
                p = math.exp(z[mask[n, y, x]]) / sum(math.exp(v) for v in z)
                total -= math.log(max(p, 1e-12))
    assert abs(float(segnet.loss(logits, mask).data) - total) < 1e-9 * max(1.0, abs(total))


def test_loss_limits():
    mask = np.random.default_rng(0).integers(0, 5, (4, 5))
    uniform = np.zeros((1, 5, 4, 5))
    assert abs(float(segnet.loss(uniform, mask).data) - 20 * math.log(5)) < 1e-12
    perfect = np.full((1, 5, 4, 5), -60.0)
    np.put_along_axis(perfect, mask[None, None], 60.0, axis=1)
    assert 0 <= float(segnet.loss(perfect, mask).data) < 1e-40
    with pytest.raises(ValueError):
        segnet.loss(uniform, np.full((4, 5), 5))


def test_non_finite_input_rejected():
    img = np.zeros((3, 16, 16))
    img[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        segnet.forward(segnet.init_params(3, 0), img)


def test_two_channel_variant():
    p2, p3 = segnet.init_params(2, 0), segnet.init_params(3, 0)
    assert segnet.count_params(p3) - segnet.count_params(p2) == 16 * (5 + 5)
    with pytest.raises(ValueError, match="2-channel"):
        segnet.forward(p2, np.zeros((3, 16, 16)))
    assert segnet.forward(p2, np.zeros((2, 16, 16))).shape == (1, 5, 16, 16)


def test_predict_ties_to_lowest_code():
    pred = segnet.predict(segnet.init_params(3, 0), np.zeros((3, 16, 24)))
    assert pred.shape == (1, 16, 24) and not np.any(pred)


def test_parameter_budget():
    n = segnet.count_params(segnet.init_params(3, 0))
    assert 30_000 < n < 300_000
