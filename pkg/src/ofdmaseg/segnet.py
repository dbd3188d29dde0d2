"""Encoder-decoder segmentation network built from flattened convolutions.

A flattened convolution factorizes every (filter, input channel) kernel into
a vertical vector ``beta`` and a horizontal vector ``gamma``:

    out[f, y, x] = sum_c sum_x' gamma[f, c, x'] * sum_y' beta[f, c, y'] * in[c, y + y', x + x']

(cross-correlation indexing, as is usual for learned filters). Two
evaluation routes give the same numbers: ``"separable"`` runs the vertical
pass, the horizontal pass and the channel sum exactly in that order;
``"gemm"`` composes the rank-1 kernel ``beta (x) gamma`` and runs one im2col
matrix product, which is far faster and is what the network uses.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from ._rng import make_rng
from .autodiff import Tensor

N_CLASSES = 5
DOWNSAMPLE = 8


@dataclass(frozen=True)
class ConvLayer:
    name: str
    in_ch: int
    out_ch: int
    k: int = 3
    stride: int = 1
    dilation: int = 1


@dataclass(frozen=True)
class PointwiseLayer:
    name: str
    in_ch: int
    out_ch: int


def layer_table(in_channels: int = 3, n_classes: int = N_CLASSES) -> list:
    return [
        ConvLayer("stem", in_channels, 16, k=5, stride=2),
        ConvLayer("enc1", 16, 32, stride=2),
        ConvLayer("enc1b", 32, 32),
        ConvLayer("enc2", 32, 64, stride=2),
        ConvLayer("enc2b", 64, 64),
        ConvLayer("aspp_d1", 64, 32, dilation=1),
        ConvLayer("aspp_d2", 64, 32, dilation=2),
        ConvLayer("aspp_d4", 64, 32, dilation=4),
        PointwiseLayer("aspp_proj", 96, 64),
        ConvLayer("dec", 96, 32),
        PointwiseLayer("cls", 32, n_classes),
    ]


def flattened_conv(x, beta, gamma, bias=None, stride: int = 1, dilation: int = 1,
                   padding: int | None = None, method: str = "gemm") -> Tensor:
    """Flattened convolution of x (N, C, H, W) or (C, H, W).

    beta is (F, C, ky), gamma is (F, C, kx), bias is (F,). ``padding``
    defaults to "same" (``dilation * (k - 1) // 2`` per axis).
    """
    x, beta, gamma = ad.as_tensor(x), ad.as_tensor(beta), ad.as_tensor(gamma)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    if x.ndim != 4 or beta.ndim != 3 or gamma.ndim != 3:
        raise ValueError(f"flattened_conv: expected (N,C,H,W) input with (F,C,k) filters, "
                         f"got {x.shape}, {beta.shape}, {gamma.shape}")
    f, c, ky = beta.shape
    kx = gamma.shape[2]
    if x.shape[1] != c or gamma.shape[:2] != (f, c):
        raise ValueError(f"flattened_conv: input {x.shape} does not match beta {beta.shape} / gamma {gamma.shape}")
    if ky % 2 == 0 or kx % 2 == 0:
        raise ValueError("flattened_conv: kernel lengths must be odd")
    py = ad.same_padding(ky, dilation) if padding is None else padding
    px = ad.same_padding(kx, dilation) if padding is None else padding
    if method == "gemm":
        if py != px:
            raise ValueError("gemm route needs equal vertical and horizontal padding")
        kernel = ad.mul(ad.reshape(beta, (f, c, ky, 1)), ad.reshape(gamma, (f, c, 1, kx)))
        y = ad.conv2d(x, kernel, stride=stride, dilation=dilation, padding=py)
    elif method == "separable":
        n, _, h, w = x.shape
        z = ad.conv1d_along_axis(ad.reshape(x, (n, 1, c, h, w)), beta, axis=3,
                                 stride=stride, dilation=dilation, padding=py)
        z = ad.conv1d_along_axis(z, gamma, axis=4, stride=stride, dilation=dilation, padding=px)
        y = ad.reduce_sum(z, axis=2)
    else:
        raise ValueError(f"unknown flattened_conv method {method!r}")
    if bias is not None:
        y = ad.add(y, ad.reshape(ad.as_tensor(bias), (1, f, 1, 1)))
    if squeeze:
        y = ad.reshape(y, y.shape[1:])
    return y


def pointwise(x, weight, bias=None) -> Tensor:
    """1x1 convolution: x (N, C, H, W), weight (F, C)."""
    x, weight = ad.as_tensor(x), ad.as_tensor(weight)
    if x.ndim != 4 or weight.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ValueError(f"pointwise: input {x.shape} does not match weight {weight.shape}")
    n, c, h, w = x.shape
    y = ad.reshape(ad.matmul(weight, ad.reshape(x, (n, c, h * w))), (n, weight.shape[0], h, w))
    if bias is not None:
        y = ad.add(y, ad.reshape(ad.as_tensor(bias), (1, -1, 1, 1)))
    return y


def init_params(in_channels: int = 3, seed: int = 0, n_classes: int = N_CLASSES) -> "OrderedDict[str, Tensor]":
    """Fresh parameters for the layer table.

    beta and gamma are drawn zero-mean uniform with equal variance chosen
    so the composed kernel entries have variance 1 / fan_in; the final
    classifier starts at zero (uniform softmax).
    """
    rng = make_rng(seed)
    params: "OrderedDict[str, Tensor]" = OrderedDict()
    for layer in layer_table(in_channels, n_classes):
        if isinstance(layer, ConvLayer):
            fan_in = layer.in_ch * layer.k * layer.k
            bound = math.sqrt(3.0 * math.sqrt(1.0 / fan_in))
            shape = (layer.out_ch, layer.in_ch, layer.k)
            params[f"{layer.name}.beta"] = Tensor(rng.uniform(-bound, bound, shape), True)
            params[f"{layer.name}.gamma"] = Tensor(rng.uniform(-bound, bound, shape), True)
        elif layer.name == "cls":
            params[f"{layer.name}.weight"] = Tensor(np.zeros((layer.out_ch, layer.in_ch)), True)
        else:
            bound = math.sqrt(3.0 / layer.in_ch)
            params[f"{layer.name}.weight"] = Tensor(rng.uniform(-bound, bound, (layer.out_ch, layer.in_ch)), True)
        params[f"{layer.name}.bias"] = Tensor(np.zeros(layer.out_ch), True)
    return params


def in_channels_of(params) -> int:
    return params["stem.beta"].shape[1]


def count_params(params) -> int:
    return int(sum(p.size for p in params.values()))


def _conv(params, layer: ConvLayer, x, method: str) -> Tensor:
    p = layer.name
    return ad.relu(flattened_conv(x, params[f"{p}.beta"], params[f"{p}.gamma"], params[f"{p}.bias"],
                                  stride=layer.stride, dilation=layer.dilation, method=method))


def _pad_to_multiple(img: np.ndarray, m: int) -> tuple[np.ndarray, int, int]:
    h, w = img.shape[-2:]
    ph, pw = (-h) % m, (-w) % m
    if ph or pw:
        widths = [(0, 0)] * (img.ndim - 2) + [(0, ph), (0, pw)]
        img = np.pad(img, widths, mode="reflect")
    return img, h, w


def prepare_input(image, in_channels: int) -> np.ndarray:
    img = np.asarray(image, dtype=np.float64)
    if img.ndim == 3:
        img = img[None]
    if img.ndim != 4:
        raise ValueError(f"expected a (C,H,W) or (N,C,H,W) image, got shape {img.shape}")
    if img.shape[1] != in_channels:
        raise ValueError(f"model takes {in_channels}-channel input, image has {img.shape[1]} channels")
    if not np.all(np.isfinite(img)):
        raise ValueError("image contains non-finite values")
    return img


def forward(params, image, method: str = "gemm") -> Tensor:
    """Logits (N, 5, H, W) for images in [0, 1] of shape (N, C, H, W) or (C, H, W).

    The width (and height) is reflect-padded up to a multiple of 8 and the
    logits are cropped back, so a 256x300 image runs at 256x304.
    """
    layers = {layer.name: layer for layer in layer_table(in_channels_of(params))}
    img = prepare_input(image, in_channels_of(params))
    img, h, w = _pad_to_multiple(img, DOWNSAMPLE)
    x = Tensor(2.0 * img - 1.0)

    x = _conv(params, layers["stem"], x, method)
    x = _conv(params, layers["enc1"], x, method)
    skip = _conv(params, layers["enc1b"], x, method)
    x = _conv(params, layers["enc2"], skip, method)
    x = _conv(params, layers["enc2b"], x, method)
    branches = [_conv(params, layers[n], x, method) for n in ("aspp_d1", "aspp_d2", "aspp_d4")]
    x = ad.relu(pointwise(ad.concat(branches, axis=1), params["aspp_proj.weight"], params["aspp_proj.bias"]))
    x = ad.concat([ad.bilinear_upsample(x, 2), skip], axis=1)
    x = _conv(params, layers["dec"], x, method)
    # 1x1 classifier before the x4 upsample: both are linear and upsampling keeps constants
    x = pointwise(x, params["cls.weight"], params["cls.bias"])
    x = ad.bilinear_upsample(x, 4)
    if x.shape[2:] != (h, w):
        x = ad.getitem(x, (slice(None), slice(None), slice(0, h), slice(0, w)))
    return x


def loss(logits, mask) -> Tensor:
    """Summed pixel cross-entropy ``-sum ln p_true`` with a 1e-12 probability floor."""
    logits = ad.as_tensor(logits)
    mask = np.asarray(mask)
    if mask.ndim == logits.ndim - 2:
        mask = mask[None]
    if not np.issubdtype(mask.dtype, np.integer):
        if not np.all(np.mod(mask, 1) == 0):
            raise ValueError("mask must hold integer class codes")
        mask = mask.astype(np.int64)
    return ad.softmax_cross_entropy(logits, mask.astype(np.int64), axis=1)


def predict(params, image) -> np.ndarray:
    """Argmax class per pixel; ties go to the lowest class code."""
    logits = forward(params, image).data
    if not np.all(np.isfinite(logits)):
        raise RuntimeError("network produced non-finite logits")
    return np.argmax(logits, axis=1).astype(np.uint8)


def params_to_arrays(params) -> "OrderedDict[str, np.ndarray]":
    return OrderedDict((k, v.data.copy()) for k, v in params.items())


def arrays_to_params(arrays) -> "OrderedDict[str, Tensor]":
    return OrderedDict((k, Tensor(np.array(v, dtype=np.float64), True)) for k, v in arrays.items())
