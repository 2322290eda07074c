"""Runtime assembly and execution of multi-stage models.

``build_model`` turns a :class:`WsmsSpec` into layer objects bound to one
ParamStore. Under shared wiring the convolution layers are created once and
referenced by every stage, so the tape accumulates their gradients across
stages; batch norm layers are created fresh per stage.
"""

from __future__ import annotations

import json
from typing import List, Optional

import numpy as np

from .autodiff import Tensor, default_dtype
from .layers import BatchNorm, Conv2dLayer, LinearLayer, ParamStore
from .ops import (add, avg_pool_half, concat_channels, global_avg_pool, pad_channels,
                  relu, reshape, scale, subsample2)
from .specs import (BackboneSpec, ConvBlock, DenseBlock, ResidualCompartment, WsmsSpec,
                    model_from_config, model_to_config, stage_plan)

CHECKPOINT_VERSION = 1


def image_pyramid(x: Tensor, stages: int) -> List[Tensor]:
    """Level s is the input average-pooled down by 2**(s-1)."""
    if x.ndim != 4:
        raise ValueError(f"image_pyramid: expected a 4-d NCHW tensor, got shape {x.shape}")
    if stages < 1:
        raise ValueError(f"image_pyramid: stages must be >= 1, got {stages}")
    h, w = x.shape[2], x.shape[3]
    divisor = 2 ** (stages - 1)
    if h % divisor or w % divisor:
        raise ValueError(
            f"image_pyramid: spatial extents {h}x{w} must divide by {divisor} "
            f"for {stages} stages")
    levels = [x]
    for _ in range(stages - 1):
        levels.append(avg_pool_half(levels[-1]))
    return levels


class ResidualUnit:
    """conv-BN-ReLU-conv-BN plus shortcut, ReLU after the addition."""

    def __init__(self, conv1: Conv2dLayer, bn1: BatchNorm, conv2: Conv2dLayer,
                 bn2: BatchNorm, in_channels: int, out_channels: int, stride: int):
        self.conv1, self.bn1 = conv1, bn1
        self.conv2, self.bn2 = conv2, bn2
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.stride = stride

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = relu(self.bn1(self.conv1(x), training))
        y = self.bn2(self.conv2(y), training)
        shortcut = x
        if self.stride == 2:
            shortcut = subsample2(shortcut)
        if self.out_channels > self.in_channels:
            shortcut = pad_channels(shortcut, self.out_channels)
        return relu(add(y, shortcut))


class DenseLayer:
    """BN-ReLU-conv3x3 producing ``growth`` channels, concatenated onto the input."""

    def __init__(self, bn: BatchNorm, conv: Conv2dLayer):
        self.bn = bn
        self.conv = conv

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        y = self.conv(relu(self.bn(x, training)))
        return concat_channels([x, y])


class TransitionUnit:
    """Channel-preserving 1x1 conv + BN + ReLU, then 2x2 average pooling."""

    def __init__(self, conv: Conv2dLayer, bn: BatchNorm):
        self.conv = conv
        self.bn = bn

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return avg_pool_half(relu(self.bn(self.conv(x), training)))


class ConvUnit:
    """conv3x3-BN-ReLU."""

    def __init__(self, conv: Conv2dLayer, bn: BatchNorm):
        self.conv = conv
        self.bn = bn

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return relu(self.bn(self.conv(x), training))


class PoolUnit:
    """Parameter-free 2x2 average pooling at a conv block entry."""

    def __call__(self, x: Tensor, training: bool) -> Tensor:
        return avg_pool_half(x)


class Stage:
    """One pathway: stem plus the leading blocks of the backbone."""

    def __init__(self, index: int, stem_conv: Conv2dLayer, stem_bn: Optional[BatchNorm],
                 blocks: List[list], tail_bn: Optional[BatchNorm]):
        self.index = index
        self.stem_conv = stem_conv
        self.stem_bn = stem_bn
        self.blocks = blocks
        self.tail_bn = tail_bn

    def __call__(self, x: Tensor, training: bool = False,
                 upto_block: Optional[int] = None) -> Tensor:
        x = self.stem_conv(x)
        if self.stem_bn is not None:
            x = relu(self.stem_bn(x, training))
        for number, units in enumerate(self.blocks, start=1):
            for unit in units:
                x = unit(x, training)
            if upto_block is not None and number == upto_block:
                return x
        if self.tail_bn is not None:
            x = relu(self.tail_bn(x, training))
        return x

    def batch_norms(self) -> List[BatchNorm]:
        found = [] if self.stem_bn is None else [self.stem_bn]
        for units in self.blocks:
            for unit in units:
                for attr in ("bn", "bn1", "bn2"):
                    bn = getattr(unit, attr, None)
                    if bn is not None:
                        found.append(bn)
        if self.tail_bn is not None:
            found.append(self.tail_bn)
        return found


class _ConvKit:
    """The convolution layers of one backbone walk; shared stages reuse one kit."""

    def __init__(self, backbone: BackboneSpec, upto: int, store: ParamStore,
                 rng: np.random.Generator, prefix: str):
        self.stem = Conv2dLayer(store, prefix + "stem", backbone.stem.in_channels,
                                backbone.stem.out_channels, kernel=3, stride=1, padding=1,
                                rng=rng)
        self.blocks = []
        for bi, block in enumerate(backbone.blocks[:upto], start=1):
            name = f"{prefix}block{bi}"
            if isinstance(block, ResidualCompartment):
                units = []
                width_in = block.in_channels
                for u in range(block.units):
                    stride = block.downsample if u == 0 else 1
                    units.append((
                        Conv2dLayer(store, f"{name}.unit{u}.conv1", width_in,
                                    block.out_channels, 3, stride, 1, rng),
                        Conv2dLayer(store, f"{name}.unit{u}.conv2", block.out_channels,
                                    block.out_channels, 3, 1, 1, rng),
                    ))
                    width_in = block.out_channels
                self.blocks.append(units)
            elif isinstance(block, DenseBlock):
                trans = None
                if block.lead_transition is not None:
                    trans = Conv2dLayer(store, f"{name}.transition.conv",
                                        block.in_channels, block.in_channels, 1, 1, 0, rng)
                layers = []
                width = block.in_channels
                for li in range(block.layers):
                    layers.append(Conv2dLayer(store, f"{name}.layer{li}.conv", width,
                                              block.growth, 3, 1, 1, rng))
                    width += block.growth
                self.blocks.append((trans, layers))
            elif isinstance(block, ConvBlock):
                units = []
                width_in = block.in_channels
                for u in range(block.convs):
                    units.append(Conv2dLayer(store, f"{name}.unit{u}.conv", width_in,
                                             block.out_channels, 3, 1, 1, rng))
                    width_in = block.out_channels
                self.blocks.append(units)
            else:
                raise TypeError(f"unknown block kind {type(block).__name__}")


def _make_stage(backbone: BackboneSpec, stage_index: int, upto: int, kit: _ConvKit,
                store: ParamStore, rng: np.random.Generator) -> Stage:
    prefix = f"stage{stage_index}"
    stem_bn = None
    if backbone.stem.batch_norm:
        stem_bn = BatchNorm(store, f"{prefix}.stem.bn", backbone.stem.out_channels)
    blocks = []
    for bi, block in enumerate(backbone.blocks[:upto], start=1):
        name = f"{prefix}.block{bi}"
        units: list = []
        if isinstance(block, ResidualCompartment):
            width_in = block.in_channels
            for u, (conv1, conv2) in enumerate(kit.blocks[bi - 1]):
                stride = block.downsample if u == 0 else 1
                units.append(ResidualUnit(
                    conv1, BatchNorm(store, f"{name}.unit{u}.bn1", block.out_channels),
                    conv2, BatchNorm(store, f"{name}.unit{u}.bn2", block.out_channels),
                    width_in, block.out_channels, stride))
                width_in = block.out_channels
        elif isinstance(block, DenseBlock):
            trans_conv, layer_convs = kit.blocks[bi - 1]
            if trans_conv is not None:
                units.append(TransitionUnit(
                    trans_conv, BatchNorm(store, f"{name}.transition.bn", block.in_channels)))
            width = block.in_channels
            for li, conv in enumerate(layer_convs):
                units.append(DenseLayer(BatchNorm(store, f"{name}.layer{li}.bn", width), conv))
                width += block.growth
        elif isinstance(block, ConvBlock):
            if block.lead_pool:
                units.append(PoolUnit())
            for u, conv in enumerate(kit.blocks[bi - 1]):
                units.append(ConvUnit(conv, BatchNorm(store, f"{name}.unit{u}.bn",
                                                      block.out_channels)))
        blocks.append(units)
    tail_bn = None
    if backbone.stage_tail == "bn-relu":
        tail_width = backbone.blocks[upto - 1].out_channels
        tail_bn = BatchNorm(store, f"{prefix}.tail.bn", tail_width)
    return Stage(stage_index, kit.stem, stem_bn, blocks, tail_bn)


class Model:
    """Executable multi-stage network bound to one ParamStore."""

    def __init__(self, spec: WsmsSpec, store: ParamStore, stages: List[Stage],
                 integration_conv: Optional[Conv2dLayer],
                 integration_bn: Optional[BatchNorm], fc: LinearLayer):
        self.spec = spec
        self.store = store
        self.stages = stages
        self.integration_conv = integration_conv
        self.integration_bn = integration_bn
        self.fc = fc
        self.plan = stage_plan(spec)

    @property
    def class_count(self) -> int:
        return self.spec.class_count

    def param_count(self) -> int:
        return self.store.num_scalars()

    def batch_norms(self) -> List[BatchNorm]:
        found = []
        for stage in self.stages:
            found.extend(stage.batch_norms())
        if self.integration_bn is not None:
            found.append(self.integration_bn)
        return found

    def stage_features(self, x: Tensor, training: bool = False) -> List[Tensor]:
        levels = image_pyramid(x, self.spec.stages)
        feats = []
        for stage, level in zip(self.stages, levels):
            try:
                feats.append(stage(level, training))
            except ValueError as err:
                raise ValueError(f"stage {stage.index}: {err}") from err
        return feats

    def integrate(self, x: Tensor, training: bool = False) -> Tensor:
        if self.integration_conv is not None:
            x = relu(self.integration_bn(self.integration_conv(x), training))
        return x

    def forward(self, x: Tensor, training: bool = False,
                stage_gains: Optional[List[float]] = None) -> Tensor:
        """Run the pyramid through every stage and classify the merged features.

        ``stage_gains`` multiplies each stage output by a constant (used to
        isolate pathways in tests); None leaves the outputs untouched.
        """
        feats = self.stage_features(x, training)
        if stage_gains is not None:
            feats = [scale(f, g) for f, g in zip(feats, stage_gains)]
        merged = feats[0] if len(feats) == 1 else concat_channels(feats)
        merged = self.integrate(merged, training)
        pooled = global_avg_pool(merged)
        flat = reshape(pooled, (pooled.shape[0], pooled.shape[1]))
        return self.fc(flat)

    def __call__(self, x: Tensor, training: bool = False) -> Tensor:
        return self.forward(x, training)


def build_model(spec: WsmsSpec, seed: int = 0) -> Model:
    """Instantiate parameters for ``spec`` deterministically from ``seed``."""
    spec.validate()
    store = ParamStore()
    rng = np.random.default_rng(seed)
    backbone = spec.backbone
    k = len(backbone.blocks)
    plan = stage_plan(spec)

    shared_kit = None
    if spec.sharing == "shared":
        shared_kit = _ConvKit(backbone, k, store, rng, prefix="")
    stages = []
    for s in range(1, spec.stages + 1):
        upto = k - s + 1
        kit = shared_kit
        if kit is None:
            kit = _ConvKit(backbone, upto, store, rng, prefix=f"stage{s}.")
        stages.append(_make_stage(backbone, s, upto, kit, store, rng))

    integration_conv = integration_bn = None
    if spec.integration != "none":
        kernel = 1 if spec.integration == "conv1x1" else 3
        integration_conv = Conv2dLayer(store, "integration.conv", plan.concat_channels,
                                       spec.integration_channels, kernel, 1, kernel // 2, rng)
        integration_bn = BatchNorm(store, "integration.bn", spec.integration_channels)
    fc = LinearLayer(store, "fc", plan.head_channels, backbone.class_count, rng)
    return Model(spec, store, stages, integration_conv, integration_bn, fc)


def save_checkpoint(model: Model, path, extras: Optional[dict] = None) -> None:
    """Write parameters, batch norm buffers, and the model config to one npz file."""
    entries = list(model.store.entries())
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "model": model_to_config(model.spec),
        "params": [{"pid": e.pid, "name": e.name, "role": e.role,
                    "shape": list(e.tensor.shape)} for e in entries],
        "bn_buffers": [bn.name for bn in model.batch_norms()],
        "extras": extras or {},
    }
    arrays = {f"param_{e.pid}": e.tensor.data for e in entries}
    for i, bn in enumerate(model.batch_norms()):
        arrays[f"bn_{i}_mean"] = bn.running_mean
        arrays[f"bn_{i}_var"] = bn.running_var
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8), **arrays)


def load_checkpoint(path):
    """Rebuild the model a checkpoint came from. Returns (model, extras)."""
    with np.load(path) as z:
        meta = json.loads(z["meta"].tobytes().decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint format version "
                             f"{meta.get('format_version')!r}")
        spec = model_from_config(meta["model"])
        model = build_model(spec, seed=0)
        entries = list(model.store.entries())
        if len(entries) != len(meta["params"]):
            raise ValueError("checkpoint parameter list does not match the rebuilt model")
        for e, rec in zip(entries, meta["params"]):
            if e.name != rec["name"] or e.role != rec["role"] or list(e.tensor.shape) != rec["shape"]:
                raise ValueError(f"checkpoint entry {rec['name']!r} does not match "
                                 f"rebuilt parameter {e.name!r}")
            e.tensor.data = np.ascontiguousarray(z[f"param_{e.pid}"])
        norms = model.batch_norms()
        if [bn.name for bn in norms] != meta["bn_buffers"]:
            raise ValueError("checkpoint batch norm buffers do not match the rebuilt model")
        for i, bn in enumerate(norms):
            bn.running_mean = np.ascontiguousarray(z[f"bn_{i}_mean"])
            bn.running_var = np.ascontiguousarray(z[f"bn_{i}_var"])
        extras = meta.get("extras", {})
    return model, extras
