"""Closed-form parameter and MAC accounting for cost-volume layers.

Counts are exact integers, derived layer by layer from the same shape
rules the runtime kernels use.  Conventions:

* One MAC is one multiply plus one accumulate.  Window counts include
  taps that fall on "same" padding (a padded implementation executes
  them), so a stride-1 conv costs exactly k^3 window MACs per output
  site.
* Strided conv layers are counted at their output extents: every MAC
  the staged execution performs is attributed to the site it feeds.
  The one subtlety is the two-axis variant ("fdwsc"): its spatial
  stage runs before the disparity axis is subsampled, so that stage's
  count uses the pre-stride disparity extent.  At stride 1 every
  formula below collapses to the familiar per-site closed forms.
* Transposed conv ("deconv3d") is counted at input extents with the
  structurally-zero taps of the upsampling skipped: one MAC per
  (input element, kernel tap) pair whose target lands inside the
  output.  That is what a scatter implementation executes; a counting
  rule based on the upsampled output extents would bill the inserted
  zeros as real work and overstate stride-2 layers by ~8x.
* Bias costs one MAC per output element; the inference-time BN affine
  costs one more.  Each adds its parameter vectors (c_out for bias,
  2*c_out for BN).
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from functools import lru_cache

from .netcfg import (
    KINDS,
    VARIANTS,
    ConfigError,
    LayerSpec,
    NetworkConfig,
    infer_shapes,
    layer_output_shape,
)
from .volume import Shape4

__all__ = [
    "CostBreakdown",
    "LayerCost",
    "NetworkCosts",
    "count_layer",
    "count_network",
    "reduction_report",
    "scatter_taps",
]


@dataclass(frozen=True)
class CostBreakdown:
    """Exact integer costs, split by stage.

    ``macs_core`` is dense-window work (full conv and transposed conv);
    ``macs_depthwise`` the per-slice window stages; ``macs_disparity``
    the per-channel disparity-axis stage of fdwsc; ``macs_pointwise``
    the 1x1x1 mixes.  Parameters split into weights / bias / BN.
    """

    params_weights: int = 0
    params_bias: int = 0
    params_bn: int = 0
    macs_core: int = 0
    macs_depthwise: int = 0
    macs_disparity: int = 0
    macs_pointwise: int = 0
    macs_bias: int = 0
    macs_bn: int = 0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, int) or v < 0:
                raise ValueError(f"{f.name} must be a non-negative integer, got {v!r}")

    @property
    def total_params(self) -> int:
        return self.params_weights + self.params_bias + self.params_bn

    @property
    def total_macs(self) -> int:
        return (
            self.macs_core
            + self.macs_depthwise
            + self.macs_disparity
            + self.macs_pointwise
            + self.macs_bias
            + self.macs_bn
        )

    def __add__(self, other: "CostBreakdown") -> "CostBreakdown":
        if not isinstance(other, CostBreakdown):
            return NotImplemented
        return CostBreakdown(
            **{f.name: getattr(self, f.name) + getattr(other, f.name) for f in fields(self)}
        )


@lru_cache(maxsize=None)
def scatter_taps(n: int, k: int, stride: int) -> int:
    """Per-axis MAC multiplier of a transposed conv along one axis.

    Counts (input position i, kernel tap a) pairs whose scatter target
    stride*i + a - (k-1)//2 lands inside the output [0, stride*n).
    Separability over axes makes the 3D count the product of the three
    per-axis values.
    """
    p = (k - 1) // 2
    total = 0
    for i in range(n):
        for a in range(k):
            if 0 <= stride * i + a - p < stride * n:
                total += 1
    return total


def count_layer(layer: LayerSpec, in_shape: Shape4) -> CostBreakdown:
    """Exact costs of one layer given its input extents."""
    if layer.kind not in KINDS:
        raise ConfigError(f"layer {layer.id!r}: unknown kind {layer.kind!r}")
    if layer.variant not in VARIANTS:
        raise ConfigError(f"layer {layer.id!r}: unknown variant {layer.variant!r}")
    if layer.kind == "deconv3d" and layer.variant != "full":
        raise ConfigError(f"layer {layer.id!r}: deconv3d layers support only the 'full' variant")
    if layer.k < 1 or layer.stride < 1 or layer.out_channels < 1:
        raise ConfigError(f"layer {layer.id!r}: k, stride and out_channels must be >= 1")
    out = layer_output_shape(layer, in_shape)
    ci = in_shape.c
    co = out.c
    k = layer.k
    out_el = out.c * out.d * out.h * out.w
    site = out.d * out.h * out.w  # strided output grid

    kw = {}
    if layer.kind == "deconv3d":
        kw["macs_core"] = (
            ci
            * co
            * scatter_taps(in_shape.d, k, layer.stride)
            * scatter_taps(in_shape.h, k, layer.stride)
            * scatter_taps(in_shape.w, k, layer.stride)
        )
        kw["params_weights"] = k ** 3 * ci * co
    elif layer.variant == "full":
        kw["macs_core"] = site * k ** 3 * ci * co
        kw["params_weights"] = k ** 3 * ci * co
    elif layer.variant == "fwsc":
        kw["macs_depthwise"] = site * k ** 3 * ci
        kw["macs_pointwise"] = site * ci * co
        kw["params_weights"] = k ** 3 * ci + ci * co
    elif layer.variant == "dwsc":
        if layer.out_channels != ci:
            raise ConfigError(
                f"layer {layer.id!r}: dwsc preserves the channel count; "
                f"out_channels must equal {ci}, got {layer.out_channels}"
            )
        di = in_shape.d
        do = out.d
        kw["macs_depthwise"] = out.h * out.w * ci * k ** 3 * di
        kw["macs_pointwise"] = out.h * out.w * ci * di * do
        kw["params_weights"] = k ** 3 * di + di * do
    elif layer.variant == "fdwsc":
        # spatial stage runs at the full input disparity extent
        kw["macs_depthwise"] = in_shape.d * out.h * out.w * k ** 2 * ci
        kw["macs_disparity"] = site * k * ci
        kw["macs_pointwise"] = site * ci * co
        kw["params_weights"] = k ** 2 * ci + k * ci + ci * co
    else:  # pragma: no cover - layer_output_shape validated the variant
        raise ConfigError(f"layer {layer.id!r}: unknown variant {layer.variant!r}")

    if layer.bias:
        kw["params_bias"] = co
        kw["macs_bias"] = out_el
    if layer.bn:
        kw["params_bn"] = 2 * co
        kw["macs_bn"] = out_el
    return CostBreakdown(**kw)


@dataclass(frozen=True)
class LayerCost:
    layer: LayerSpec
    in_shape: Shape4
    out_shape: Shape4
    cost: CostBreakdown


@dataclass(frozen=True)
class NetworkCosts:
    name: str
    layers: tuple
    total: CostBreakdown


def count_network(cfg: NetworkConfig) -> NetworkCosts:
    """Per-layer breakdowns plus exact totals for a whole config."""
    rows = []
    total = CostBreakdown()
    for layer, (sin, sout) in zip(cfg.layers, infer_shapes(cfg)):
        try:
            cost = count_layer(layer, sin)
        except (ConfigError, ValueError) as e:
            raise ConfigError(f"layer {layer.id!r}: {e}") from e
        rows.append(LayerCost(layer, sin, sout, cost))
        total = total + cost
    return NetworkCosts(name=cfg.name, layers=tuple(rows), total=total)


def reduction_report(base: CostBreakdown, variant: CostBreakdown) -> dict:
    """Reduction factors of `variant` relative to `base` (>1 is cheaper).

    Returned as exact ratios in a dict with keys "ops" and "params";
    format to one decimal for display.
    """
    if variant.total_macs == 0 or variant.total_params == 0:
        raise ValueError("variant totals must be non-zero to form reduction factors")
    return {
        "ops": base.total_macs / variant.total_macs,
        "params": base.total_params / variant.total_params,
    }
