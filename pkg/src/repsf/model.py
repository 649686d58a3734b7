"""Whole-model assembly: backbone + fusion + head.

Owns the JSON config schema, the deterministic build (one SplitMix64 stream
shared across all submodules, in declaration order), branch-to-merged
conversion, end-to-end forward, parameter/MAC accounting, and the weight
bundle round trip. Parameter names are hierarchical dotted paths
("stages.1.blocks.0.rep.large.conv.weight", ...), which keeps bundles
readable and diffable.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, replace

import numpy as np

from . import backbone as bb
from . import fusion as fu
from . import io as rio
from .density import DensityMap
from .errors import ConfigError, FormatError, GeometryError, ShapeError, StateError
from .prng import SplitMix64
from .reparam import ConvBN, RepBlockSpec
from .tensor import BatchNormSpec, ConvSpec, Tensor4, concat_channels

_DTYPE_NAMES = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    backbone: bb.BackboneConfig = bb.BackboneConfig()
    fusion: fu.FusionConfig = fu.FusionConfig()

    @property
    def seed(self) -> int:
        return self.backbone.seed


@dataclass
class ModelSpec:
    config: ModelConfig
    backbone: bb.BackboneSpec
    aspp: fu.AsppSpec
    can: fu.CanSpec
    head: fu.DensityHeadSpec
    merged: bool = False  # True once every rep block has its single-kernel form

    @property
    def dtype(self) -> np.dtype:
        return self.backbone.dtype


def config_from_dict(doc: dict) -> ModelConfig:
    """Parse the documented JSON config: {"backbone": {...}, "fusion": {...}}."""
    if not isinstance(doc, dict):
        raise ConfigError("config document must be a JSON object")
    unknown = set(doc) - {"backbone", "fusion"}
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")

    def build(section, cls):
        body = doc.get(section, {})
        if not isinstance(body, dict):
            raise ConfigError(f"{section}: must be a JSON object")
        fields = {f.name for f in cls.__dataclass_fields__.values()}
        bad = set(body) - fields
        if bad:
            raise ConfigError(f"{section}: unknown fields {sorted(bad)}")
        coerced = {
            k: tuple(v) if isinstance(v, list) else v for k, v in body.items()
        }
        return cls(**coerced)

    return ModelConfig(
        backbone=build("backbone", bb.BackboneConfig),
        fusion=build("fusion", fu.FusionConfig),
    )


def config_to_dict(cfg: ModelConfig) -> dict:
    doc = {"backbone": asdict(cfg.backbone), "fusion": asdict(cfg.fusion)}
    for section in doc.values():
        for key, value in section.items():
            if isinstance(value, tuple):
                section[key] = list(value)
    return doc


def build_model(cfg: ModelConfig, dtype=np.float32) -> ModelSpec:
    """Materialize every weight from cfg.seed, in fixed declaration order."""
    rng = SplitMix64(cfg.seed)
    backbone = bb.build_backbone(cfg.backbone, dtype=dtype, rng=rng)
    f4_ch = backbone.out_ch
    aspp = fu.build_aspp(f4_ch, cfg.fusion, rng, dtype)
    can = fu.build_can(f4_ch + cfg.fusion.aspp_out_ch, cfg.fusion, rng, dtype)
    head_in = f4_ch + cfg.fusion.aspp_out_ch + can.in_ch
    head = fu.build_head(head_in, cfg.fusion, rng, dtype)
    return ModelSpec(cfg, backbone, aspp, can, head)


def merge_model(model: ModelSpec) -> ModelSpec:
    """Populate single-kernel forms for every rep block (in place; returns model)."""
    bb.merge_backbone(model.backbone)
    model.merged = True
    return model


def repsfnet_forward(
    image: Tensor4, model: ModelSpec, merged: bool = False, method: str = "gemm"
) -> DensityMap:
    """image (1, 3, H, W) with H, W divisible by 32 -> density map at stride 32."""
    if image.n != 1:
        raise ShapeError(f"forward processes one image at a time, got batch {image.n}")
    features = bb.backbone_forward(model.backbone, image, merged=merged, method=method)
    f4 = features[-1]
    aspp_out = fu.aspp_forward(f4, model.aspp, method)
    can_out = fu.can_forward(concat_channels([f4, aspp_out]), model.can, method)
    return fu.fusion_head(f4, aspp_out, can_out, model.head, method)


def model_params(model: ModelSpec, merged: bool = False) -> int:
    total = bb.count_params(model.backbone, merged=merged)
    for cb in [*model.aspp.dilated, model.aspp.conv1x1, model.aspp.pool_conv,
               model.aspp.project, model.head.fuse]:
        total += cb.conv.param_count() + cb.bn.param_count()
    for conv in [*model.can.scale_convs, model.can.reduce, model.can.restore, model.head.out]:
        total += conv.param_count()
    return total


def model_macs(model: ModelSpec, h: int, w: int, merged: bool = False) -> int:
    total = bb.count_macs(model.backbone, h, w, merged=merged)
    fh, fw = h // 32, w // 32
    elems = fh * fw
    for cb in model.aspp.dilated:
        total += elems * _conv_macs(cb.conv)
    total += elems * _conv_macs(model.aspp.conv1x1.conv)
    total += 1 * _conv_macs(model.aspp.pool_conv.conv)  # pooled branch runs at 1x1
    total += elems * _conv_macs(model.aspp.project.conv)
    for conv in model.can.scale_convs:
        total += elems * _conv_macs(conv)
    total += _conv_macs(model.can.reduce) + _conv_macs(model.can.restore)
    total += elems * _conv_macs(model.head.fuse.conv)
    total += elems * _conv_macs(model.head.out)
    return total


def _conv_macs(conv: ConvSpec) -> int:
    return conv.out_ch * (conv.in_ch // conv.groups) * conv.kernel[0] * conv.kernel[1]


def output_map_shape(h: int, w: int) -> tuple[int, int]:
    if h % 32 or w % 32:
        raise GeometryError(f"input {h}x{w} must be divisible by 32")
    return h // 32, w // 32


# ---------------------------------------------------------------------------
# parameter naming and bundle round trip

def _conv_entries(prefix: str, conv: ConvSpec):
    yield f"{prefix}.weight", conv.weights
    if conv.bias is not None:
        yield f"{prefix}.bias", conv.bias


def _bn_entries(prefix: str, bn: BatchNormSpec):
    yield f"{prefix}.gamma", bn.gamma
    yield f"{prefix}.beta", bn.beta
    yield f"{prefix}.mean", bn.mean
    yield f"{prefix}.var", bn.var


def _conv_bn_entries(prefix: str, cb: ConvBN):
    yield from _conv_entries(f"{prefix}.conv", cb.conv)
    yield from _bn_entries(f"{prefix}.bn", cb.bn)


def named_params(model: ModelSpec, merged: bool) -> list[tuple[str, np.ndarray]]:
    """Flat (name, array) list in build order for the requested form."""
    out = []
    out.extend(_conv_bn_entries("stem", model.backbone.stem))
    for si, stage in enumerate(model.backbone.stages):
        sp = f"stages.{si}"
        out.extend(_conv_bn_entries(f"{sp}.transition", stage.transition))
        for bi, block in enumerate(stage.blocks):
            bp = f"{sp}.blocks.{bi}"
            out.extend(_conv_bn_entries(f"{bp}.pw1", block.pw1))
            if merged:
                if block.merged is None:
                    raise StateError("bundle requested in merged form but blocks are not merged")
                out.extend(_conv_entries(f"{bp}.rep.merged", block.merged))
            else:
                if block.rep is None:
                    raise StateError("bundle requested in branch form but branches are absent")
                out.extend(_conv_bn_entries(f"{bp}.rep.large", block.rep.large))
                if block.rep.small is not None:
                    out.extend(_conv_bn_entries(f"{bp}.rep.small", block.rep.small))
                if block.rep.identity is not None:
                    out.extend(_bn_entries(f"{bp}.rep.identity", block.rep.identity))
            out.extend(_conv_bn_entries(f"{bp}.pw2", block.pw2))
    for ri, cb in enumerate(model.aspp.dilated):
        out.extend(_conv_bn_entries(f"aspp.dilated.{ri}", cb))
    out.extend(_conv_bn_entries("aspp.conv1x1", model.aspp.conv1x1))
    out.extend(_conv_bn_entries("aspp.pool", model.aspp.pool_conv))
    out.extend(_conv_bn_entries("aspp.project", model.aspp.project))
    for si, conv in enumerate(model.can.scale_convs):
        out.extend(_conv_entries(f"can.scales.{si}", conv))
    out.extend(_conv_entries("can.reduce", model.can.reduce))
    out.extend(_conv_entries("can.restore", model.can.restore))
    out.extend(_conv_bn_entries("head.fuse", model.head.fuse))
    out.extend(_conv_entries("head.out", model.head.out))
    return out


def save_model(path, model: ModelSpec, merged: bool = False) -> None:
    meta = {
        "model_config": config_to_dict(model.config),
        "seed": model.config.seed,
        "dtype": str(model.dtype),
    }
    rio.save_bundle(path, meta, named_params(model, merged), merged)


class _ParamTable:
    def __init__(self, tensors: dict[str, np.ndarray], dtype):
        self._tensors = dict(tensors)
        self._dtype = dtype

    def take(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        if name not in self._tensors:
            raise FormatError(f"bundle is missing parameter {name!r}")
        arr = self._tensors.pop(name)
        if arr.shape != shape:
            raise FormatError(f"parameter {name!r} has shape {arr.shape}, expected {shape}")
        return arr.astype(self._dtype, copy=False)

    def finish(self):
        if self._tensors:
            raise FormatError(f"bundle has unused parameters: {sorted(self._tensors)[:5]}")


def _rebind_conv(conv: ConvSpec, table: _ParamTable, prefix: str) -> ConvSpec:
    weights = table.take(f"{prefix}.weight", conv.weights.shape)
    bias = None
    if conv.bias is not None:
        bias = table.take(f"{prefix}.bias", (conv.out_ch,))
    return replace(conv, weights=weights, bias=bias)


def _rebind_bn(bn: BatchNormSpec, table: _ParamTable, prefix: str) -> BatchNormSpec:
    n = (bn.num_features,)
    return BatchNormSpec(
        table.take(f"{prefix}.gamma", n),
        table.take(f"{prefix}.beta", n),
        table.take(f"{prefix}.mean", n),
        table.take(f"{prefix}.var", n),
        bn.eps,
    )


def _rebind_conv_bn(cb: ConvBN, table: _ParamTable, prefix: str) -> ConvBN:
    return ConvBN(
        _rebind_conv(cb.conv, table, f"{prefix}.conv"),
        _rebind_bn(cb.bn, table, f"{prefix}.bn"),
    )


def load_model(path) -> ModelSpec:
    """Rebuild a model from a bundle: structure from config, weights from blocks."""
    manifest, tensors = rio.load_bundle(path)
    try:
        cfg = config_from_dict(manifest["model_config"])
    except KeyError:
        raise FormatError("bundle manifest is missing model_config") from None
    dtype_name = manifest.get("dtype", "float32")
    if dtype_name not in _DTYPE_NAMES:
        raise FormatError(f"bundle has unsupported dtype {dtype_name!r}")
    dtype = _DTYPE_NAMES[dtype_name]
    merged = bool(manifest.get("merged"))
    model = build_model(cfg, dtype=dtype)
    table = _ParamTable(tensors, dtype)
    model.backbone.stem = _rebind_conv_bn(model.backbone.stem, table, "stem")
    for si, stage in enumerate(model.backbone.stages):
        sp = f"stages.{si}"
        stage.transition = _rebind_conv_bn(stage.transition, table, f"{sp}.transition")
        for bi, block in enumerate(stage.blocks):
            bp = f"{sp}.blocks.{bi}"
            block.pw1 = _rebind_conv_bn(block.pw1, table, f"{bp}.pw1")
            if merged:
                base = block.rep.large.conv
                merged_conv = ConvSpec(
                    base.in_ch, base.out_ch, base.kernel, base.stride, base.dilation,
                    base.padding, base.groups,
                    table.take(f"{bp}.rep.merged.weight", base.weights.shape),
                    table.take(f"{bp}.rep.merged.bias", (base.out_ch,)),
                )
                block.merged = merged_conv
                block.rep = None
            else:
                rep = block.rep
                block.rep = RepBlockSpec(
                    large=_rebind_conv_bn(rep.large, table, f"{bp}.rep.large"),
                    small=None if rep.small is None
                    else _rebind_conv_bn(rep.small, table, f"{bp}.rep.small"),
                    identity=None if rep.identity is None
                    else _rebind_bn(rep.identity, table, f"{bp}.rep.identity"),
                )
            block.pw2 = _rebind_conv_bn(block.pw2, table, f"{bp}.pw2")
    for ri in range(len(model.aspp.dilated)):
        model.aspp.dilated[ri] = _rebind_conv_bn(model.aspp.dilated[ri], table, f"aspp.dilated.{ri}")
    model.aspp.conv1x1 = _rebind_conv_bn(model.aspp.conv1x1, table, "aspp.conv1x1")
    model.aspp.pool_conv = _rebind_conv_bn(model.aspp.pool_conv, table, "aspp.pool")
    model.aspp.project = _rebind_conv_bn(model.aspp.project, table, "aspp.project")
    for si in range(len(model.can.scale_convs)):
        model.can.scale_convs[si] = _rebind_conv(model.can.scale_convs[si], table, f"can.scales.{si}")
    model.can.reduce = _rebind_conv(model.can.reduce, table, "can.reduce")
    model.can.restore = _rebind_conv(model.can.restore, table, "can.restore")
    model.head.fuse = _rebind_conv_bn(model.head.fuse, table, "head.fuse")
    model.head.out = _rebind_conv(model.head.out, table, "head.out")
    table.finish()
    model.merged = merged
    return model
