"""Grouped 2-D cross-correlation and adaptive pooling on :class:`Tensor`.

Inputs are ``[N, C, H, W]`` batches; a bare ``[C, H, W]`` map is accepted
and returned without the batch axis.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .autodiff import Tensor, _result, as_tensor
from .errors import GroupDivisibility, ShapeMismatch


def _pair(v) -> tuple[int, int]:
    if isinstance(v, int):
        return (v, v)
    return (int(v[0]), int(v[1]))


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d_grouped(x: Tensor, weight: Tensor, bias: Tensor | None = None,
                   stride=(1, 1), padding=(0, 0), groups: int = 1) -> Tensor:
    """Cross-correlate ``x`` with ``weight[C_out, C_in/G, kH, kW]`` in ``groups`` groups."""
    x, weight = as_tensor(x), as_tensor(weight)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4 or weight.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [N,C,H,W] and [O,C/G,kH,kW], got {x.shape}, {weight.shape}")
    n, c_in, h, w = x.shape
    c_out, cg, kh, kw = weight.shape
    if groups < 1 or c_in % groups or c_out % groups:
        raise GroupDivisibility(f"channels {c_in}->{c_out} not divisible by groups={groups}")
    if cg != c_in // groups:
        raise ShapeMismatch(f"filter expects {cg} channels per group, input has {c_in // groups}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    if h + 2 * ph < kh or w + 2 * pw < kw:
        raise ShapeMismatch(f"kernel {(kh, kw)} larger than padded input {(h + 2 * ph, w + 2 * pw)}")
    ho = conv_output_size(h, kh, sh, ph)
    wo = conv_output_size(w, kw, sw, pw)
    og = c_out // groups

    xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if (ph or pw) else x.data
    # [N, C, Ho, Wo, kH, kW] strided view, no copy yet
    patches = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::sh, ::sw][:, :, :ho, :wo]

    out = np.empty((n, c_out, ho, wo), dtype=np.result_type(x.data, weight.data))
    for g in range(groups):
        pg = patches[:, g * cg:(g + 1) * cg]
        wg = weight.data[g * og:(g + 1) * og]
        # -> [N, Ho, Wo, Og]
        out[:, g * og:(g + 1) * og] = np.tensordot(pg, wg, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out += bias.data.reshape(1, -1, 1, 1)

    def back(gout):
        gx = gw = gb = None
        if weight.requires_grad:
            gw = np.empty_like(weight.data)
            for g in range(groups):
                gw[g * og:(g + 1) * og] = np.tensordot(
                    gout[:, g * og:(g + 1) * og], patches[:, g * cg:(g + 1) * cg],
                    axes=([0, 2, 3], [0, 2, 3]))
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for g in range(groups):
                wg = weight.data[g * og:(g + 1) * og]
                # [N, Ho, Wo, Cg, kH, kW]
                gp = np.tensordot(gout[:, g * og:(g + 1) * og], wg, axes=([1], [0]))
                gp = gp.transpose(0, 3, 1, 2, 4, 5)
                sl = gxp[:, g * cg:(g + 1) * cg]
                for i in range(kh):
                    for j in range(kw):
                        sl[:, :, i:i + sh * ho:sh, j:j + sw * wo:sw] += gp[..., i, j]
            gx = gxp[:, :, ph:ph + h, pw:pw + w]
        if bias is not None and bias.requires_grad:
            gb = gout.sum(axis=(0, 2, 3))
        return (gx, gw, gb) if bias is not None else (gx, gw)

    parents = (x, weight, bias) if bias is not None else (x, weight)
    y = _result(out, parents, back)
    if unbatched:
        y = y.reshape(y.shape[1:])
    return y


def _bins(size: int, out: int) -> list[tuple[int, int]]:
    return [(math.floor(i * size / out), math.ceil((i + 1) * size / out)) for i in range(out)]


def _adaptive_pool(x: Tensor, out_hw, mode: str) -> Tensor:
    x = as_tensor(x)
    unbatched = x.ndim == 3
    if unbatched:
        x = x.reshape((1,) + x.shape)
    if x.ndim != 4:
        raise ShapeMismatch(f"adaptive pool expects [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    oh, ow = _pair(out_hw)
    if not (1 <= oh <= h and 1 <= ow <= w):
        raise ShapeMismatch(f"pool target {(oh, ow)} exceeds input {(h, w)}")
    hb, wb = _bins(h, oh), _bins(w, ow)
    out = np.empty((n, c, oh, ow), dtype=x.dtype)
    argmax: dict[tuple[int, int], np.ndarray] = {}
    for i, (h0, h1) in enumerate(hb):
        for j, (w0, w1) in enumerate(wb):
            region = x.data[:, :, h0:h1, w0:w1]
            if mode == "avg":
                out[:, :, i, j] = region.mean(axis=(2, 3))
            else:
                flat = region.reshape(n, c, -1)
                k = np.argmax(flat, axis=2)
                argmax[i, j] = k
                out[:, :, i, j] = np.take_along_axis(flat, k[..., None], axis=2)[..., 0]

    def back(g):
        gx = np.zeros_like(x.data)
        for i, (h0, h1) in enumerate(hb):
            for j, (w0, w1) in enumerate(wb):
                if mode == "avg":
                    area = (h1 - h0) * (w1 - w0)
                    gx[:, :, h0:h1, w0:w1] += (g[:, :, i, j] / area)[:, :, None, None]
                else:
                    k = argmax[i, j]
                    rw = w1 - w0
                    rows = h0 + k // rw
                    cols = w0 + k % rw
                    ni, ci = np.indices((n, c))
                    np.add.at(gx, (ni, ci, rows, cols), g[:, :, i, j])
        return (gx,)

    y = _result(out, (x,), back)
    if unbatched:
        y = y.reshape(y.shape[1:])
    return y


def adaptive_avg_pool2d(x: Tensor, out_hw) -> Tensor:
    return _adaptive_pool(x, out_hw, "avg")


def adaptive_max_pool2d(x: Tensor, out_hw) -> Tensor:
    return _adaptive_pool(x, out_hw, "max")
