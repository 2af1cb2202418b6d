"""Convolution operators over 4D cost volumes.

Four multiply-accumulate layouts share one calling convention
(``op(x, bank, stride)``), differing in how the 3D window and the
channel mix are factored:

* ``full``   - dense k*k*k window over (d, h, w), every input channel
               feeding every output channel.
* ``fwsc``   - per-channel k*k*k window over (d, h, w), then a 1x1x1
               channel mix.
* ``dwsc``   - per-disparity k*k*k window over the (c, h, w) cube, then
               a 1x1x1 mix across disparities; the channel count is
               preserved, and stride touches h and w only.
* ``fdwsc``  - per-channel k*k window over (h, w), per-channel length-k
               window over d, then a 1x1x1 channel mix.

There is also a transposed variant (``deconv3d_full``) that upsamples
by the stride via zero insertion.

All windows use zero "same" padding, so output extents are
ceil(n / stride) along strided axes.  Kernel extents must be odd.
Partial sums always accumulate in float64; outputs are cast back to the
input's storage dtype at the end.

Engine rule: every window stage -- dense or per-slice -- runs as one
einsum over a strided window view.  Taps are gathered in place, never
packed into im2col-style buffers, so wall-time tracks the stage's
multiply count and the benchmark compares layouts rather than copy
machinery.  The dense stage works channels-last so the contraction
streams the output-channel axis contiguously; per-slice stages window
only their non-unit kernel axes.  1x1x1 mixes are plain matrix
products.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .volume import (
    Shape4,
    Volume4,
    VolumeError,
    load_volume,
    save_volume,
    uniform_open,
)

__all__ = [
    "VARIANTS",
    "KernelBank",
    "KernelError",
    "backward",
    "conv3d_full",
    "conv3d_fwsc",
    "conv3d_dwsc",
    "conv3d_fdwsc",
    "deconv3d_full",
    "depthwise_cube",
    "forward",
    "load_bank",
    "out_extent",
    "pointwise_mix",
    "save_bank",
    "scale_shift",
]

VARIANTS = ("full", "fwsc", "dwsc", "fdwsc")


class KernelError(ValueError):
    """Raised on malformed banks or operator arguments."""


def out_extent(n: int, stride: int) -> int:
    """Output length of a same-padded strided window: ceil(n / stride)."""
    return -(-n // stride)


def _check_stride(stride: int) -> int:
    s = int(stride)
    if s < 1:
        raise KernelError(f"stride must be >= 1, got {stride}")
    return s


def _check_vec(name: str, v, length: int) -> Optional[np.ndarray]:
    if v is None:
        return None
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (length,):
        raise KernelError(f"{name} must have shape ({length},), got {arr.shape}")
    if not np.isfinite(arr).all():
        raise KernelError(f"{name} contains non-finite values")
    return arr


# ----------------------------------------------------------------------
# kernel banks
# ----------------------------------------------------------------------

# array names each variant carries, with shape builders
_ARRAY_SHAPES = {
    "full": lambda b: {"weights": (b.c_out, b.c_in, b.k, b.k, b.k)},
    "fwsc": lambda b: {
        "depthwise": (b.c_in, b.k, b.k, b.k),
        "pointwise": (b.c_out, b.c_in),
    },
    "dwsc": lambda b: {
        "depthwise": (b.d_in, b.k, b.k, b.k),
        "pointwise": (b.d_out, b.d_in),
    },
    "fdwsc": lambda b: {
        "spatial": (b.c_in, b.k, b.k),
        "disparity": (b.c_in, b.k),
        "pointwise": (b.c_out, b.c_in),
    },
}

def _check_scalars(variant, k, c_in, c_out, d_in, d_out):
    """Validate and normalize the scalar fields shared by every bank."""
    if variant not in VARIANTS:
        raise KernelError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    k = int(k)
    if k < 1 or k % 2 == 0:
        raise KernelError(f"kernel extent must be odd and >= 1, got {k}")
    if c_in < 1 or c_out < 1:
        raise KernelError(f"channel counts must be >= 1, got c_in={c_in} c_out={c_out}")
    if variant == "dwsc":
        if c_out != c_in:
            raise KernelError(
                "dwsc preserves the channel count: "
                f"c_out must equal c_in ({c_in}), got {c_out}"
            )
        if d_in is None:
            raise KernelError("dwsc banks require d_in")
        d_out = d_in if d_out is None else int(d_out)
        d_in = int(d_in)
        if d_in < 1 or d_out < 1:
            raise KernelError(f"disparity counts must be >= 1, got d_in={d_in} d_out={d_out}")
    else:
        d_in = d_out = None
    return k, int(c_in), int(c_out), d_in, d_out


# seed offsets so every array draws from its own deterministic stream
_ROLE = {
    "weights": 0,
    "depthwise": 0,
    "pointwise": 1,
    "spatial": 2,
    "disparity": 3,
    "bias": 4,
    "bn_scale": 5,
    "bn_shift": 6,
}


class KernelBank:
    """Weights for one layer: named float64 arrays plus optional per-channel
    bias and batch-norm affine (scale, shift) applied after the mix."""

    __slots__ = (
        "variant",
        "k",
        "c_in",
        "c_out",
        "d_in",
        "d_out",
        "arrays",
        "bias",
        "bn_scale",
        "bn_shift",
    )

    def __init__(
        self,
        variant: str,
        k: int,
        c_in: int,
        c_out: int,
        arrays: dict,
        *,
        d_in: Optional[int] = None,
        d_out: Optional[int] = None,
        bias=None,
        bn_scale=None,
        bn_shift=None,
    ):
        k, c_in, c_out, d_in, d_out = _check_scalars(variant, k, c_in, c_out, d_in, d_out)

        self.variant = variant
        self.k = k
        self.c_in = c_in
        self.c_out = c_out
        self.d_in = d_in
        self.d_out = d_out

        want = _ARRAY_SHAPES[variant](self)
        if set(arrays) != set(want):
            raise KernelError(
                f"{variant} bank needs arrays {sorted(want)}, got {sorted(arrays)}"
            )
        store = {}
        for name, shape in want.items():
            arr = np.asarray(arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise KernelError(f"array {name!r} must have shape {shape}, got {arr.shape}")
            if not np.isfinite(arr).all():
                raise KernelError(f"array {name!r} contains non-finite values")
            store[name] = arr
        self.arrays = store

        self.bias = _check_vec("bias", bias, self.c_out)
        scale = _check_vec("bn_scale", bn_scale, self.c_out)
        shift = _check_vec("bn_shift", bn_shift, self.c_out)
        if (scale is None) != (shift is None):
            raise KernelError("bn_scale and bn_shift must be given together")
        self.bn_scale = scale
        self.bn_shift = shift

    # -- construction ---------------------------------------------------

    @classmethod
    def random(
        cls,
        variant: str,
        k: int,
        c_in: int,
        c_out: Optional[int] = None,
        *,
        d_in: Optional[int] = None,
        d_out: Optional[int] = None,
        seed: int = 0,
        bias: bool = False,
        bn: bool = False,
    ) -> "KernelBank":
        """Seeded bank; each stage is uniform in +-1/sqrt(fan_in)."""
        if c_out is None:
            c_out = c_in
        k, c_in, c_out, d_in, d_out = _check_scalars(variant, k, c_in, c_out, d_in, d_out)
        fans = {
            "weights": c_in * k ** 3,
            "depthwise": k ** 3,
            "pointwise": d_in if variant == "dwsc" else c_in,
            "spatial": k ** 2,
            "disparity": k,
        }
        dims = _Dims(k, c_in, c_out, d_in, d_out)
        arrays = {}
        for name, shape in _ARRAY_SHAPES[variant](dims).items():
            size = int(np.prod(shape))
            scale = 1.0 / float(np.sqrt(fans[name]))
            arrays[name] = uniform_open(seed * 8 + _ROLE[name], size).reshape(shape) * scale
        b = 0.1 * uniform_open(seed * 8 + _ROLE["bias"], c_out) if bias else None
        s = 1.0 + 0.25 * uniform_open(seed * 8 + _ROLE["bn_scale"], c_out) if bn else None
        t = 0.1 * uniform_open(seed * 8 + _ROLE["bn_shift"], c_out) if bn else None
        return cls(
            variant,
            k,
            c_in,
            c_out,
            arrays,
            d_in=d_in,
            d_out=d_out,
            bias=b,
            bn_scale=s,
            bn_shift=t,
        )

    # -- properties -------------------------------------------------------

    def param_count(self) -> int:
        n = sum(a.size for a in self.arrays.values())
        if self.bias is not None:
            n += self.bias.size
        if self.bn_scale is not None:
            n += self.bn_scale.size + self.bn_shift.size
        return n

    def __repr__(self) -> str:
        extra = ""
        if self.variant == "dwsc":
            extra = f", d_in={self.d_in}, d_out={self.d_out}"
        return (
            f"KernelBank({self.variant!r}, k={self.k}, "
            f"c_in={self.c_in}, c_out={self.c_out}{extra})"
        )


class _Dims:
    """Shape-builder view over validated scalars (see _ARRAY_SHAPES)."""

    def __init__(self, k, c_in, c_out, d_in, d_out):
        self.k, self.c_in, self.c_out = k, c_in, c_out
        self.d_in, self.d_out = d_in, d_out


# ----------------------------------------------------------------------
# cores (float64 in, float64 out)
# ----------------------------------------------------------------------


def _pad_same(arr: np.ndarray, ks) -> np.ndarray:
    """Zero-pad the last three axes for windows of extent ks = (ka, kb, kc)."""
    pads = [(0, 0)] + [((k - 1) // 2, k // 2) for k in ks]
    if any(p != (0, 0) for p in pads[1:]):
        arr = np.pad(arr, pads, mode="constant")
    return arr


def _depthwise_core(x: np.ndarray, w: np.ndarray, strides) -> np.ndarray:
    """Per-slice windowed MAC.

    x: (n, A, B, C) float64, unpadded; w: (n, ka, kb, kc); strides
    (sa, sb, sc).  Slice i of the output only ever reads slice i of the
    input.  One einsum over a strided window view; axes whose kernel
    extent is 1 are left out of the window so the split-stage layouts
    (k*k over h,w; k over d) gather exactly their own taps.
    """
    n = w.shape[0]
    ks = w.shape[1:]
    xp = _pad_same(x, ks)
    axes = tuple(ax for ax, k in zip((1, 2, 3), ks) if k > 1)
    wins = tuple(k for k in ks if k > 1)
    labels = "".join(l for l, k in zip("abc", ks) if k > 1)
    win = sliding_window_view(xp, wins, axis=axes) if axes else xp
    win = win[:, :: strides[0], :: strides[1], :: strides[2]]
    return np.einsum(
        f"nzyx{labels},n{labels}->nzyx",
        win,
        w.reshape((n,) + wins),
        optimize=False,
    )


def _conv_full_core(x: np.ndarray, w: np.ndarray, strides) -> np.ndarray:
    """Dense window + channel mix.

    x: (ci, A, B, C) float64, unpadded; w: (co, ci, ka, kb, kc).  One
    einsum over a strided window view, laid out channels-last so the
    contraction's innermost axis (output channel) is contiguous in both
    operands.
    """
    co, ci, ka, kb, kc = w.shape
    sa, sb, sc = strides
    xt = np.ascontiguousarray(np.moveaxis(x, 0, -1))
    pads = [((k - 1) // 2, k // 2) for k in (ka, kb, kc)]
    if any(p != (0, 0) for p in pads):
        xt = np.pad(xt, pads + [(0, 0)], mode="constant")
    win = sliding_window_view(xt, (ka, kb, kc), axis=(0, 1, 2))
    win = win[::sa, ::sb, ::sc]
    wt = np.ascontiguousarray(w.transpose(1, 2, 3, 4, 0))
    out = np.einsum("zyxiabc,iabco->zyxo", win, wt, optimize=False)
    return np.ascontiguousarray(np.moveaxis(out, -1, 0))


def _pointwise_core(x: np.ndarray, pw: np.ndarray) -> np.ndarray:
    """1x1x1 mix along axis 0: x (n_in, ...) -> (n_out, ...)."""
    return np.tensordot(pw, x, axes=([1], [0]))


def _affine_core(z: np.ndarray, bank: KernelBank) -> np.ndarray:
    """Post-mix per-channel affine: scale * (z + bias) + shift."""
    if bank.bias is not None:
        z = z + bank.bias[:, None, None, None]
    if bank.bn_scale is not None:
        z = bank.bn_scale[:, None, None, None] * z + bank.bn_shift[:, None, None, None]
    return z


def _as_f64(x: Volume4) -> np.ndarray:
    return np.asarray(x.array, dtype=np.float64)


def _finish(arr: np.ndarray, like: Volume4) -> Volume4:
    return Volume4(arr.astype(like.dtype), copy=False)


def _want(bank: KernelBank, variant: str) -> None:
    if bank.variant != variant:
        raise KernelError(f"expected a {variant!r} bank, got {bank.variant!r}")


def _want_channels(x: Volume4, bank: KernelBank) -> None:
    if x.c != bank.c_in:
        raise KernelError(f"input has {x.c} channels, bank expects {bank.c_in}")


# ----------------------------------------------------------------------
# public operators
# ----------------------------------------------------------------------


def conv3d_full(x: Volume4, bank: KernelBank, stride: int = 1) -> Volume4:
    """Dense 3D convolution over (d, h, w) with full channel mixing."""
    s = _check_stride(stride)
    _want(bank, "full")
    _want_channels(x, bank)
    z = _conv_full_core(_as_f64(x), bank.arrays["weights"], (s, s, s))
    return _finish(_affine_core(z, bank), x)


def conv3d_fwsc(x: Volume4, bank: KernelBank, stride: int = 1) -> Volume4:
    """Per-channel cube window over (d, h, w), then a 1x1x1 channel mix."""
    s = _check_stride(stride)
    _want(bank, "fwsc")
    _want_channels(x, bank)
    mid = _depthwise_core(_as_f64(x), bank.arrays["depthwise"], (s, s, s))
    z = _pointwise_core(mid, bank.arrays["pointwise"])
    return _finish(_affine_core(z, bank), x)


def conv3d_dwsc(x: Volume4, bank: KernelBank, stride: int = 1) -> Volume4:
    """Per-disparity cube window over (c, h, w), then a 1x1x1 disparity mix.

    The channel count is preserved; stride applies to h and w only, so
    the output is (c, d_out, ceil(h/s), ceil(w/s)).
    """
    s = _check_stride(stride)
    _want(bank, "dwsc")
    _want_channels(x, bank)
    if x.d != bank.d_in:
        raise KernelError(f"input has {x.d} disparities, bank expects {bank.d_in}")
    # work per disparity slice: axis order (d, c, h, w)
    xd = np.ascontiguousarray(_as_f64(x).transpose(1, 0, 2, 3))
    mid = _depthwise_core(xd, bank.arrays["depthwise"], (1, s, s))
    zd = _pointwise_core(mid, bank.arrays["pointwise"])
    z = np.ascontiguousarray(zd.transpose(1, 0, 2, 3))
    return _finish(_affine_core(z, bank), x)


def conv3d_fdwsc(x: Volume4, bank: KernelBank, stride: int = 1) -> Volume4:
    """Per-channel k*k over (h, w), per-channel k over d, then a 1x1x1 mix.

    Stride applies to h and w in the first stage and to d in the second.
    """
    s = _check_stride(stride)
    _want(bank, "fdwsc")
    _want_channels(x, bank)
    k, ci = bank.k, bank.c_in
    sp = bank.arrays["spatial"].reshape(ci, 1, k, k)
    dp = bank.arrays["disparity"].reshape(ci, k, 1, 1)
    mid = _depthwise_core(_as_f64(x), sp, (1, s, s))
    mid = _depthwise_core(mid, dp, (s, 1, 1))
    z = _pointwise_core(mid, bank.arrays["pointwise"])
    return _finish(_affine_core(z, bank), x)


def deconv3d_full(x: Volume4, bank: KernelBank, stride: int = 1) -> Volume4:
    """Transposed dense 3D convolution; upsamples every (d, h, w) axis by
    the stride via zero insertion, then runs the dense window with the
    tap-reversed kernel.  Output extents are (d*s, h*s, w*s)."""
    s = _check_stride(stride)
    _want(bank, "full")
    _want_channels(x, bank)
    xa = _as_f64(x)
    if s > 1:
        c, d, h, w = xa.shape
        buf = np.zeros((c, d * s, h * s, w * s))
        buf[:, ::s, ::s, ::s] = xa
        xa = buf
    wflip = bank.arrays["weights"][:, :, ::-1, ::-1, ::-1]
    z = _conv_full_core(xa, wflip, (1, 1, 1))
    return _finish(_affine_core(z, bank), x)


def scale_shift(x: Volume4, bias=None, scale=None, shift=None) -> Volume4:
    """Per-channel affine: out = scale * (x + bias) + shift.

    Absent vectors default to the identity (bias 0, scale 1, shift 0).
    """
    b = _check_vec("bias", bias, x.c)
    sc = _check_vec("scale", scale, x.c)
    sh = _check_vec("shift", shift, x.c)
    if (sc is None) != (sh is None):
        raise KernelError("scale and shift must be given together")
    z = _as_f64(x)
    if b is not None:
        z = z + b[:, None, None, None]
    if sc is not None:
        z = sc[:, None, None, None] * z + sh[:, None, None, None]
    return _finish(z, x)


def depthwise_cube(x: Volume4, weights, stride: int = 1) -> Volume4:
    """Standalone per-channel k*k*k window over (d, h, w); no channel mix.

    `weights` has shape (c, k, k, k) with odd k.  Useful for composing
    the separable variants out of their stages.
    """
    s = _check_stride(stride)
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 4 or w.shape[0] != x.c:
        raise KernelError(f"weights must be (c={x.c}, k, k, k), got {w.shape}")
    if len({w.shape[1], w.shape[2], w.shape[3]}) != 1 or w.shape[1] % 2 == 0:
        raise KernelError(f"window must be cubic with odd extent, got {w.shape[1:]}")
    return _finish(_depthwise_core(_as_f64(x), w, (s, s, s)), x)


def pointwise_mix(x: Volume4, weights) -> Volume4:
    """Standalone 1x1x1 channel mix: (c_in, d, h, w) -> (c_out, d, h, w)."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2 or w.shape[1] != x.c:
        raise KernelError(f"weights must be (c_out, c_in={x.c}), got {w.shape}")
    return _finish(_pointwise_core(_as_f64(x), w), x)


_FORWARD = {
    "full": conv3d_full,
    "fwsc": conv3d_fwsc,
    "dwsc": conv3d_dwsc,
    "fdwsc": conv3d_fdwsc,
}


def forward(x: Volume4, bank: KernelBank, stride: int = 1) -> Volume4:
    """Dispatch on the bank's variant."""
    return _FORWARD[bank.variant](x, bank, stride)


def output_dims(variant: str, in_dims: Shape4, k: int, stride: int, c_out: int) -> Shape4:
    """Output extents of a conv op, without running it."""
    c, d, h, w = in_dims
    s = _check_stride(stride)
    if variant == "dwsc":
        return Shape4(c, d, out_extent(h, s), out_extent(w, s))
    return Shape4(c_out, out_extent(d, s), out_extent(h, s), out_extent(w, s))


# ----------------------------------------------------------------------
# backward (analytic gradients)
# ----------------------------------------------------------------------


def _depthwise_bwd(x: np.ndarray, w: np.ndarray, strides, gz: np.ndarray):
    """Gradients of _depthwise_core w.r.t. its input and weights."""
    n, ka, kb, kc = w.shape
    xp = _pad_same(x, (ka, kb, kc))
    na = xp.shape[1] - ka + 1
    nb = xp.shape[2] - kb + 1
    nc = xp.shape[3] - kc + 1
    sa, sb, sc = strides
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(ka):
        for b in range(kb):
            for c in range(kc):
                sl = (
                    slice(None),
                    slice(a, a + na, sa),
                    slice(b, b + nb, sb),
                    slice(c, c + nc, sc),
                )
                gw[:, a, b, c] = np.einsum("nzyx,nzyx->n", gz, xp[sl])
                gxp[sl] += w[:, a, b, c, None, None, None] * gz
    return _unpad(gxp, x.shape, (ka, kb, kc)), gw


def _conv_full_bwd(x: np.ndarray, w: np.ndarray, strides, gz: np.ndarray):
    co, ci, ka, kb, kc = w.shape
    sa, sb, sc = strides
    xp = _pad_same(x, (ka, kb, kc))
    na = xp.shape[1] - ka + 1
    nb = xp.shape[2] - kb + 1
    nc = xp.shape[3] - kc + 1
    gxp = np.zeros_like(xp)
    gw = np.zeros_like(w)
    for a in range(ka):
        for b in range(kb):
            for c in range(kc):
                sl = (
                    slice(None),
                    slice(a, a + na, sa),
                    slice(b, b + nb, sb),
                    slice(c, c + nc, sc),
                )
                gw[:, :, a, b, c] = np.tensordot(gz, xp[sl], axes=([1, 2, 3], [1, 2, 3]))
                gxp[sl] += np.tensordot(w[:, :, a, b, c], gz, axes=([0], [0]))
    return _unpad(gxp, x.shape, (ka, kb, kc)), gw


def _unpad(arr: np.ndarray, shape, ks) -> np.ndarray:
    sl = [slice(None)]
    for n, k in zip(shape[1:], ks):
        lo = (k - 1) // 2
        sl.append(slice(lo, lo + n))
    return arr[tuple(sl)].copy()


def _affine_bwd(z: np.ndarray, bank: KernelBank, g: np.ndarray):
    """Gradients through scale * (z + bias) + shift.  Returns (gz, extras)."""
    extras = {}
    axes = (1, 2, 3)
    if bank.bn_scale is not None:
        zb = z if bank.bias is None else z + bank.bias[:, None, None, None]
        extras["bn_scale"] = np.sum(g * zb, axis=axes)
        extras["bn_shift"] = np.sum(g, axis=axes)
        gz = g * bank.bn_scale[:, None, None, None]
    else:
        gz = g
    if bank.bias is not None:
        extras["bias"] = np.sum(gz, axis=axes)
    return gz, extras


def backward(x: Volume4, bank: KernelBank, grad_out: Volume4, stride: int = 1):
    """Analytic gradients of sum-style losses through `forward`.

    Returns (grad_input: Volume4 float64, grads: dict) where `grads`
    holds one float64 array per bank array, plus "bias"/"bn_scale"/
    "bn_shift" when present.
    """
    s = _check_stride(stride)
    _want_channels(x, bank)
    xa = _as_f64(x)
    g = np.asarray(grad_out.array, dtype=np.float64)
    v = bank.variant

    if v == "full":
        z = _conv_full_core(xa, bank.arrays["weights"], (s, s, s))
        _expect_grad_shape(g, z)
        gz, extras = _affine_bwd(z, bank, g)
        gx, gw = _conv_full_bwd(xa, bank.arrays["weights"], (s, s, s), gz)
        grads = {"weights": gw}

    elif v == "fwsc":
        mid = _depthwise_core(xa, bank.arrays["depthwise"], (s, s, s))
        z = _pointwise_core(mid, bank.arrays["pointwise"])
        _expect_grad_shape(g, z)
        gz, extras = _affine_bwd(z, bank, g)
        gpw = np.tensordot(gz, mid, axes=([1, 2, 3], [1, 2, 3]))
        gmid = np.tensordot(bank.arrays["pointwise"], gz, axes=([0], [0]))
        gx, gdw = _depthwise_bwd(xa, bank.arrays["depthwise"], (s, s, s), gmid)
        grads = {"depthwise": gdw, "pointwise": gpw}

    elif v == "dwsc":
        if x.d != bank.d_in:
            raise KernelError(f"input has {x.d} disparities, bank expects {bank.d_in}")
        xd = np.ascontiguousarray(xa.transpose(1, 0, 2, 3))
        mid = _depthwise_core(xd, bank.arrays["depthwise"], (1, s, s))
        zd = _pointwise_core(mid, bank.arrays["pointwise"])
        z = np.ascontiguousarray(zd.transpose(1, 0, 2, 3))
        _expect_grad_shape(g, z)
        gz, extras = _affine_bwd(z, bank, g)
        gzd = np.ascontiguousarray(gz.transpose(1, 0, 2, 3))
        gpw = np.tensordot(gzd, mid, axes=([1, 2, 3], [1, 2, 3]))
        gmid = np.tensordot(bank.arrays["pointwise"], gzd, axes=([0], [0]))
        gxd, gdw = _depthwise_bwd(xd, bank.arrays["depthwise"], (1, s, s), gmid)
        gx = np.ascontiguousarray(gxd.transpose(1, 0, 2, 3))
        grads = {"depthwise": gdw, "pointwise": gpw}

    elif v == "fdwsc":
        k, ci = bank.k, bank.c_in
        sp = bank.arrays["spatial"].reshape(ci, 1, k, k)
        dp = bank.arrays["disparity"].reshape(ci, k, 1, 1)
        mid1 = _depthwise_core(xa, sp, (1, s, s))
        mid2 = _depthwise_core(mid1, dp, (s, 1, 1))
        z = _pointwise_core(mid2, bank.arrays["pointwise"])
        _expect_grad_shape(g, z)
        gz, extras = _affine_bwd(z, bank, g)
        gpw = np.tensordot(gz, mid2, axes=([1, 2, 3], [1, 2, 3]))
        gmid2 = np.tensordot(bank.arrays["pointwise"], gz, axes=([0], [0]))
        gmid1, gdp = _depthwise_bwd(mid1, dp, (s, 1, 1), gmid2)
        gx, gsp = _depthwise_bwd(xa, sp, (1, s, s), gmid1)
        grads = {
            "spatial": gsp.reshape(ci, k, k),
            "disparity": gdp.reshape(ci, k),
            "pointwise": gpw,
        }

    else:  # pragma: no cover - guarded by KernelBank
        raise KernelError(f"unknown variant {v!r}")

    grads.update(extras)
    return Volume4(gx, copy=False), grads


def _expect_grad_shape(g: np.ndarray, z: np.ndarray) -> None:
    if g.shape != z.shape:
        raise KernelError(
            f"grad_out shape {g.shape} does not match forward output {z.shape}"
        )


# ----------------------------------------------------------------------
# bank serialization: a JSON sidecar plus one SV3D file per array
# ----------------------------------------------------------------------

# how each logical array folds into SV3D's four extents
def _to_sv3d(name: str, arr: np.ndarray, bank: KernelBank) -> np.ndarray:
    if name == "weights":
        return arr.reshape(bank.c_out * bank.c_in, bank.k, bank.k, bank.k)
    if name == "depthwise":
        return arr
    if name == "pointwise":
        return arr.reshape(arr.shape[0], arr.shape[1], 1, 1)
    if name == "spatial":
        return arr.reshape(arr.shape[0], 1, bank.k, bank.k)
    if name == "disparity":
        return arr.reshape(arr.shape[0], bank.k, 1, 1)
    raise KernelError(f"unknown array {name!r}")


def _from_sv3d(name: str, arr: np.ndarray, meta: dict) -> np.ndarray:
    k = meta["k"]
    if name == "weights":
        return arr.reshape(meta["out_channels"], meta["in_channels"], k, k, k)
    if name == "depthwise":
        return arr
    if name == "pointwise":
        return arr.reshape(arr.shape[0], arr.shape[1])
    if name == "spatial":
        return arr.reshape(arr.shape[0], k, k)
    if name == "disparity":
        return arr.reshape(arr.shape[0], k)
    raise KernelError(f"unknown array {name!r}")


def save_bank(path, bank: KernelBank) -> None:
    """Write `path` (JSON) plus one `<stem>.<array>.sv3d` per array."""
    path = os.fspath(path)
    base_dir = os.path.dirname(path) or "."
    stem = os.path.splitext(os.path.basename(path))[0]
    meta = {
        "op": bank.variant,
        "k": bank.k,
        "in_channels": bank.c_in,
        "out_channels": bank.c_out,
        "disparity_in": bank.d_in,
        "disparity_out": bank.d_out,
        "arrays": {},
        "bias": None,
        "bn_scale": None,
        "bn_shift": None,
    }

    def _dump(tag: str, arr4: np.ndarray) -> str:
        fname = f"{stem}.{tag}.sv3d"
        save_volume(os.path.join(base_dir, fname), Volume4(arr4, copy=False))
        return fname

    for name, arr in bank.arrays.items():
        meta["arrays"][name] = _dump(name, _to_sv3d(name, arr, bank))
    if bank.bias is not None:
        meta["bias"] = _dump("bias", bank.bias.reshape(-1, 1, 1, 1))
    if bank.bn_scale is not None:
        meta["bn_scale"] = _dump("bn_scale", bank.bn_scale.reshape(-1, 1, 1, 1))
        meta["bn_shift"] = _dump("bn_shift", bank.bn_shift.reshape(-1, 1, 1, 1))
    with open(path, "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2, sort_keys=True)
        f.write("\n")


def load_bank(path) -> KernelBank:
    path = os.fspath(path)
    base_dir = os.path.dirname(path) or "."
    try:
        with open(path, "r", encoding="utf-8") as f:
            meta = json.load(f)
    except json.JSONDecodeError as e:
        raise KernelError(f"malformed bank sidecar {path}: {e}") from e
    try:
        variant = meta["op"]
        names = meta["arrays"]
    except (KeyError, TypeError) as e:
        raise KernelError(f"bank sidecar {path} is missing field {e}") from e
    if variant not in VARIANTS:
        raise KernelError(f"unknown op {variant!r} in {path}")

    def _load(fname: str) -> np.ndarray:
        return load_volume(os.path.join(base_dir, fname)).to_numpy().astype(np.float64)

    arrays = {}
    for name, fname in names.items():
        arrays[name] = _from_sv3d(name, _load(fname), meta)

    def _vec(tag: str):
        fname = meta.get(tag)
        return None if fname is None else _load(fname).reshape(-1)

    return KernelBank(
        variant,
        meta["k"],
        meta["in_channels"],
        meta["out_channels"],
        arrays,
        d_in=meta.get("disparity_in"),
        d_out=meta.get("disparity_out"),
        bias=_vec("bias"),
        bn_scale=_vec("bn_scale"),
        bn_shift=_vec("bn_shift"),
    )
