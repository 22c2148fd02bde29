"""U-shaped range-image backbone built from FE/FA blocks.

A feature extractor (FE) block optionally down-samples at entry (via the
validity-aware sampler) and then runs its aggregation layers in residual
pairs; mismatched skip connections go through a 1x1 filter. A feature
aggregator (FA) block up-samples a lower-resolution source by replaying
the recorded samplings in reverse (scatter + one aggregation layer per
step), concatenates a higher-resolution skip source, and runs 4 more
layers. Channel widths scale with a depth multiplier (rounded up, min 1).

The shipped pedestrian network is 4 FE + 1 FA, the vehicle network
8 FE + 5 FA; both predict at half the input resolution.

Coordinates and masks are plain arrays carried alongside the feature
tensor; they depend only on the input sample, never on parameters, so a
per-frame "plan" (coordinate pyramid, sampling records, neighbor
contexts) is computed once and reused across forward passes.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import kernels as K
from . import tensor as T
from .kernels import ConfigError, KernelKind, NeighborContext, NeighborhoodSpec
from .rangeimage import (RangeImage, SamplingRecord, fixed_width_buckets,
                         collect_delta_r_histogram, smart_downsample)
from .tensor import Tensor

__all__ = [
    "BlockSpec", "NetworkSpec", "Network", "BackboneOutput", "HeadOutput",
    "pedestrian_spec", "vehicle_spec", "build_network",
    "count_params", "count_flops", "calibrate_rq_boundaries",
    "save_network_spec", "load_network_spec",
]

PEDESTRIAN_FE_CHANNELS = (32, 64, 128, 128)
PEDESTRIAN_FA_CHANNELS = 64


@dataclass(frozen=True)
class BlockSpec:
    """One backbone block. FE blocks take one input; FA blocks take
    (lower-resolution, higher-resolution) sources by name."""

    name: str
    kind: str                  # "FE" | "FA"
    inputs: tuple
    channels: int
    layers: int
    stride: int = 1            # FE entry stride (power of 2)
    kernel: KernelKind = KernelKind()

    def __post_init__(self):
        if self.kind not in ("FE", "FA"):
            raise ConfigError(f"block kind must be FE or FA, got {self.kind!r}")
        if self.kind == "FE" and self.layers not in (10, 4):
            raise ConfigError(f"FE blocks have 10 (full) or 4 (vehicle) layers, got {self.layers}")
        if self.kind == "FA" and self.layers != 4:
            raise ConfigError(f"FA blocks have 4 post-merge layers, got {self.layers}")
        if self.kind == "FE" and len(self.inputs) != 1:
            raise ConfigError(f"FE block {self.name} needs exactly one input")
        if self.kind == "FA" and len(self.inputs) != 2:
            raise ConfigError(f"FA block {self.name} needs (lower, higher) inputs")
        if self.stride < 1 or (self.stride & (self.stride - 1)) != 0:
            raise ConfigError(f"stride must be a power of 2, got {self.stride}")
        if self.layers % 2:
            raise ConfigError("layer counts must be even (residual pairs)")


@dataclass
class NetworkSpec:
    """Ordered block list plus the knobs that shape the whole network."""

    blocks: list
    depth_multiplier: float = 1.0
    input_channels: int = 3
    external_channels: int = 0
    num_classes: int = 1
    sampling: str = "smart"         # "smart" | "fixed"
    n_buckets: int = 4              # weight sets for rq_conv2d layers
    nbhd: NeighborhoodSpec = field(default_factory=NeighborhoodSpec)
    name: str = "custom"
    # per-channel multipliers applied to the input features (the range
    # channel arrives in meters and needs taming before the first layer)
    input_scale: tuple = (0.02, 1.0, 1.0)

    def __post_init__(self):
        if self.sampling not in ("smart", "fixed"):
            raise ConfigError(f"sampling must be smart or fixed, got {self.sampling!r}")
        if not (0 < self.depth_multiplier):
            raise ConfigError("depth multiplier must be positive")
        names = [b.name for b in self.blocks]
        if len(set(names)) != len(names):
            raise ConfigError("block names must be unique")

    def scaled(self, channels: int) -> int:
        return max(1, math.ceil(channels * self.depth_multiplier))

    def block(self, name: str) -> BlockSpec:
        for b in self.blocks:
            if b.name == name:
                return b
        raise ConfigError(f"no block named {name!r}")

    def with_kernel(self, kernel: KernelKind) -> "NetworkSpec":
        """Same architecture with every block's kernel replaced."""
        return replace(self, blocks=[replace(b, kernel=kernel) for b in self.blocks])

    def with_block_kernel(self, block_name: str, kernel: KernelKind) -> "NetworkSpec":
        self.block(block_name)
        return replace(self, blocks=[
            replace(b, kernel=kernel) if b.name == block_name else b for b in self.blocks])

    def to_json_dict(self) -> dict:
        return {
            "name": self.name,
            "depth_multiplier": self.depth_multiplier,
            "input_channels": self.input_channels,
            "external_channels": self.external_channels,
            "num_classes": self.num_classes,
            "sampling": self.sampling,
            "n_buckets": self.n_buckets,
            "kernel_size": [self.nbhd.k_h, self.nbhd.k_w],
            "input_scale": list(self.input_scale),
            "blocks": [
                {"name": b.name, "kind": b.kind, "inputs": list(b.inputs),
                 "channels": b.channels, "layers": b.layers, "stride": b.stride,
                 "kernel": b.kernel.tag, "encoding": b.kernel.encoding}
                for b in self.blocks],
        }

    @staticmethod
    def from_json_dict(d: dict) -> "NetworkSpec":
        blocks = [
            BlockSpec(name=b["name"], kind=b["kind"], inputs=tuple(b["inputs"]),
                      channels=int(b["channels"]), layers=int(b["layers"]),
                      stride=int(b.get("stride", 1)),
                      kernel=KernelKind(b.get("kernel", "conv2d"), b.get("encoding", "polar")))
            for b in d["blocks"]]
        kh, kw = d.get("kernel_size", [3, 3])
        return NetworkSpec(
            blocks=blocks, depth_multiplier=float(d.get("depth_multiplier", 1.0)),
            input_channels=int(d.get("input_channels", 3)),
            external_channels=int(d.get("external_channels", 0)),
            num_classes=int(d.get("num_classes", 1)),
            sampling=d.get("sampling", "smart"), n_buckets=int(d.get("n_buckets", 4)),
            nbhd=NeighborhoodSpec(kh, kw), name=d.get("name", "custom"),
            input_scale=tuple(d.get("input_scale", (0.02, 1.0, 1.0))))


def save_network_spec(path, spec: NetworkSpec) -> None:
    with open(path, "w") as f:
        json.dump(spec.to_json_dict(), f, indent=2)


def load_network_spec(path) -> NetworkSpec:
    with open(path) as f:
        return NetworkSpec.from_json_dict(json.load(f))


def pedestrian_spec(kernel: KernelKind = KernelKind("edgeconv"),
                    depth_multiplier: float = 1.0, num_classes: int = 1,
                    sampling: str = "smart", **kw) -> NetworkSpec:
    """4 FE + 1 FA; predictions at half the input resolution."""
    c1, c2, c3, c4 = PEDESTRIAN_FE_CHANNELS
    blocks = [
        BlockSpec("fe1", "FE", ("input",), c1, 10, stride=1, kernel=kernel),
        BlockSpec("fe2", "FE", ("fe1",), c2, 10, stride=2, kernel=kernel),
        BlockSpec("fe3", "FE", ("fe2",), c3, 10, stride=2, kernel=kernel),
        BlockSpec("fa1", "FA", ("fe3", "fe2"), PEDESTRIAN_FA_CHANNELS, 4, kernel=kernel),
        BlockSpec("fe4", "FE", ("fa1",), c4, 10, stride=1, kernel=kernel),
    ]
    return NetworkSpec(blocks=blocks, depth_multiplier=depth_multiplier,
                       num_classes=num_classes, sampling=sampling,
                       name="pedestrian", **kw)


def vehicle_spec(kernel: KernelKind = KernelKind("edgeconv"),
                 depth_multiplier: float = 1.0, num_classes: int = 1,
                 sampling: str = "smart", **kw) -> NetworkSpec:
    """8 FE + 5 FA with 4-layer extractors; wider receptive field, also
    predicting at half the input resolution."""
    blocks = [
        BlockSpec("fe1", "FE", ("input",), 32, 4, stride=1, kernel=kernel),
        BlockSpec("fe2", "FE", ("fe1",), 64, 4, stride=2, kernel=kernel),
        BlockSpec("fe3", "FE", ("fe2",), 128, 4, stride=2, kernel=kernel),
        BlockSpec("fe4", "FE", ("fe3",), 128, 4, stride=2, kernel=kernel),
        BlockSpec("fe5", "FE", ("fe4",), 128, 4, stride=2, kernel=kernel),
        BlockSpec("fa1", "FA", ("fe5", "fe4"), 128, 4, kernel=kernel),
        BlockSpec("fe6", "FE", ("fa1",), 128, 4, stride=1, kernel=kernel),
        BlockSpec("fa2", "FA", ("fe6", "fe3"), 128, 4, kernel=kernel),
        BlockSpec("fe7", "FE", ("fa2",), 128, 4, stride=1, kernel=kernel),
        BlockSpec("fa3", "FA", ("fe7", "fe2"), 64, 4, kernel=kernel),
        BlockSpec("fe8", "FE", ("fa3",), 64, 4, stride=1, kernel=kernel),
        BlockSpec("fa4", "FA", ("fe7", "fe8"), 64, 4, kernel=kernel),
        BlockSpec("fa5", "FA", ("fa2", "fa4"), 64, 4, kernel=kernel),
    ]
    return NetworkSpec(blocks=blocks, depth_multiplier=depth_multiplier,
                       num_classes=num_classes, sampling=sampling,
                       name="vehicle", **kw)


# ---------------------------------------------------------------------------
# Static wiring analysis (levels, channels) shared by build / flops / plans


def _analyze(spec: NetworkSpec) -> dict:
    """Per-block: input channels, output channels, resolution level, and
    the number of up-sampling steps for FA blocks. Level n means the
    input grid was down-sampled n times (stride 2 each)."""
    info = {}
    levels = {"input": 0}
    channels = {"input": spec.input_channels + spec.external_channels}
    for b in spec.blocks:
        for src in b.inputs:
            if src not in levels:
                raise ConfigError(f"block {b.name} consumes unknown source {src!r}")
        d_out = spec.scaled(b.channels)
        if b.kind == "FE":
            src = b.inputs[0]
            lvl = levels[src] + int(math.log2(b.stride))
            info[b.name] = dict(kind="FE", d_in=channels[src], d_out=d_out,
                                level=lvl, up_steps=0,
                                entry_records=int(math.log2(b.stride)))
        else:
            lower, higher = b.inputs
            up = levels[lower] - levels[higher]
            if up < 1:
                raise ConfigError(
                    f"FA block {b.name}: {lower!r} (level {levels[lower]}) must be "
                    f"strictly lower resolution than {higher!r} (level {levels[higher]})")
            lvl = levels[higher]
            info[b.name] = dict(kind="FA", d_in=channels[lower] + channels[higher],
                                d_low=channels[lower], d_out=d_out, level=lvl, up_steps=up)
        levels[b.name] = info[b.name]["level"]
        channels[b.name] = d_out
    info["__out__"] = spec.blocks[-1].name
    return info


def _level_dims(h: int, w: int, level: int) -> tuple:
    for _ in range(level):
        h, w = -(-h // 2), -(-w // 2)
    return h, w


# ---------------------------------------------------------------------------
# Runtime layers


class _AggLayer:
    """One aggregation layer: kernel params plus (for kernels without an
    intrinsic output bias) a bias vector."""

    def __init__(self, spec: NetworkSpec, kernel: KernelKind, d_in: int, d_out: int,
                 rng, register, prefix: str):
        self.kernel = kernel
        self.d_in, self.d_out = d_in, d_out
        self.nbhd = nbhd = spec.nbhd
        tag = kernel.tag
        if tag == "conv2d":
            self.params = K.Conv2DParams.init(rng, nbhd, d_in, d_out)
        elif tag == "rq_conv2d":
            self.params = K.RQConv2DParams.init(
                rng, nbhd, d_in, d_out, fixed_width_buckets(spec.n_buckets))
        elif tag == "self_attention":
            self.params = K.SelfAttentionParams.init(rng, d_in, d_out)
        elif tag == "pointnet":
            self.params = K.PointNetParams.init(rng, d_in, d_out)
        elif tag == "edgeconv":
            self.params = K.EdgeConvParams.init(rng, d_in, d_out)
        else:
            raise ConfigError(f"unknown kernel {tag!r}")
        self.bias = None
        if tag in ("conv2d", "rq_conv2d", "self_attention"):
            self.bias = Tensor(np.zeros(d_out), requires_grad=True)
        for pname, tensor in self.params.tensors().items():
            register(f"{prefix}/{pname}", tensor)
        if self.bias is not None:
            register(f"{prefix}/bias", tensor=self.bias)

    def __call__(self, x: Tensor, ctx: NeighborContext) -> Tensor:
        tag = self.kernel.tag
        if tag == "conv2d":
            out = K.conv2d(x, ctx, self.params.weight)
        elif tag == "rq_conv2d":
            out = K.rq_conv2d(x, ctx, self.params)
        elif tag == "self_attention":
            out = K.self_attention(x, ctx, self.params)
        elif tag == "pointnet":
            out = K.pointnet(x, ctx, self.params)
        else:
            out = K.edgeconv(x, ctx, self.params)
        if self.bias is not None:
            out = T.add(out, self.bias)
        return out

    def flops(self, h: int, w: int, n_buckets: int) -> int:
        return K.kernel_flops(self.kernel.tag, self.nbhd, self.d_in, self.d_out,
                              h, w, n_buckets=n_buckets)


class _Proj:
    """1x1 filter used when a residual skip needs a channel change."""

    def __init__(self, d_in: int, d_out: int, rng, register, prefix: str):
        self.weight = Tensor(rng.normal(0, np.sqrt(1.0 / d_in), (d_in, d_out)),
                             requires_grad=True)
        register(f"{prefix}/weight", self.weight)

    def __call__(self, x: Tensor) -> Tensor:
        return T.matmul(x, self.weight)


def _gate(x: Tensor, ctx: NeighborContext) -> Tensor:
    """Zero features at invalid pixels, keeping the mask invariant true
    at every depth."""
    return T.mul(x, ctx.center_valid[:, None].astype(np.float64))


class _ResidualStack:
    """Aggregation layers grouped in bypass pairs."""

    def __init__(self, spec, kernel, d_in, d_out, n_layers, rng, register, prefix):
        self.pairs = []
        d_prev = d_in
        for i in range(n_layers // 2):
            l1 = _AggLayer(spec, kernel, d_prev, d_out, rng, register, f"{prefix}/layer{2 * i}")
            l2 = _AggLayer(spec, kernel, d_out, d_out, rng, register, f"{prefix}/layer{2 * i + 1}")
            proj = None
            if d_prev != d_out:
                proj = _Proj(d_prev, d_out, rng, register, f"{prefix}/pair{i}/proj")
            self.pairs.append((l1, l2, proj))
            d_prev = d_out

    def __call__(self, x: Tensor, ctx: NeighborContext) -> Tensor:
        for l1, l2, proj in self.pairs:
            h = T.relu(_gate(l1(x, ctx), ctx))
            h = _gate(l2(h, ctx), ctx)
            skip = proj(x) if proj is not None else x
            # 1/sqrt(2) keeps the activation variance flat through the
            # stack (there is no normalization layer to absorb growth)
            x = _gate(T.mul(T.relu(T.add(h, skip)), 2.0 ** -0.5), ctx)
        return x


# ---------------------------------------------------------------------------
# Frame plans: the parameter-independent part of a forward pass


@dataclass
class LevelPlan:
    coords: np.ndarray
    mask: np.ndarray
    records: tuple                     # SamplingRecords from the input down to here
    contexts: dict = field(default_factory=dict)

    def ctx(self, nbhd: NeighborhoodSpec, encoding: str) -> NeighborContext:
        key = (nbhd.k_h, nbhd.k_w, encoding)
        got = self.contexts.get(key)
        if got is None:
            got = NeighborContext.build(self.coords, self.mask, nbhd, encoding)
            self.contexts[key] = got
        return got


@dataclass
class FramePlan:
    levels: dict                       # level index -> LevelPlan
    max_level: int


@dataclass
class BackboneOutput:
    features: Tensor                   # [Ho*Wo, D]
    coords: np.ndarray                 # [Ho, Wo, 3]
    mask: np.ndarray                   # [Ho, Wo]
    plan: FramePlan


@dataclass
class HeadOutput:
    """Per-pixel class logits (background first) and the 8-value
    regression, at the backbone output resolution."""

    cls_logits: Tensor                 # [Ho*Wo, C+1]
    reg: Tensor                        # [Ho*Wo, 8]
    coords: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# The network


class Network:
    def __init__(self, spec: NetworkSpec, seed: int = 0):
        self.spec = spec
        self.info = _analyze(spec)
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)

        def register(name, tensor):
            if name in self.params:
                raise ConfigError(f"duplicate parameter name {name}")
            self.params[name] = tensor

        self.blocks = {}
        for b in spec.blocks:
            inf = self.info[b.name]
            if b.kind == "FE":
                stack = _ResidualStack(spec, b.kernel, inf["d_in"], inf["d_out"],
                                       b.layers, rng, register, b.name)
                self.blocks[b.name] = ("FE", b, stack, None)
            else:
                up_layers = [
                    _AggLayer(spec, b.kernel, inf["d_low"], inf["d_low"], rng, register,
                              f"{b.name}/up{u}")
                    for u in range(inf["up_steps"])]
                stack = _ResidualStack(spec, b.kernel, inf["d_in"], inf["d_out"],
                                       b.layers, rng, register, b.name)
                self.blocks[b.name] = ("FA", b, stack, up_layers)

        d_final = self.info[self.info["__out__"]]["d_out"]
        c = spec.num_classes
        self.head_cls_w = Tensor(rng.normal(0, np.sqrt(1.0 / d_final), (d_final, c + 1)),
                                 requires_grad=True)
        self.head_cls_b = Tensor(np.full(c + 1, -2.0), requires_grad=True)
        self.head_reg_w = Tensor(rng.normal(0, np.sqrt(1.0 / d_final), (d_final, 8)),
                                 requires_grad=True)
        self.head_reg_b = Tensor(np.zeros(8), requires_grad=True)
        register("head/cls_w", self.head_cls_w)
        register("head/cls_b", self.head_cls_b)
        register("head/reg_w", self.head_reg_w)
        register("head/reg_b", self.head_reg_b)

    # -- plans ------------------------------------------------------------

    def make_plan(self, img: RangeImage) -> FramePlan:
        max_level = max(inf["level"] for name, inf in self.info.items() if name != "__out__")
        levels = {0: LevelPlan(img.coords, img.mask, ())}
        cur = RangeImage(img.coords, np.zeros(img.mask.shape + (1,)), img.mask)
        recs = []
        for lvl in range(1, max_level + 1):
            cur, rec = smart_downsample(cur, 2, 2, smart=self.spec.sampling == "smart")
            recs.append(rec)
            levels[lvl] = LevelPlan(cur.coords, cur.mask, tuple(recs))
        return FramePlan(levels=levels, max_level=max_level)

    # -- forward ----------------------------------------------------------

    def forward(self, img: RangeImage, external: np.ndarray | None = None,
                plan: FramePlan | None = None) -> BackboneOutput:
        """Run the backbone; returns features plus the coords/mask at the
        output resolution. `external` is an optional [H, W, E] per-pixel
        feature map concatenated to the input features (zeros where no
        coverage); E must match the spec's external_channels."""
        spec = self.spec
        feats = img.features
        if spec.input_scale is not None:
            if len(spec.input_scale) != spec.input_channels:
                raise ConfigError("input_scale length must match input_channels")
            feats = feats * np.asarray(spec.input_scale)
        if spec.external_channels:
            if external is None:
                external = np.zeros(img.mask.shape + (spec.external_channels,))
            if external.shape != img.mask.shape + (spec.external_channels,):
                raise ConfigError(
                    f"external features must be [H, W, {spec.external_channels}]")
            feats = np.concatenate([feats, np.where(img.mask[..., None], external, 0.0)], axis=-1)
        if feats.shape[-1] != spec.input_channels + spec.external_channels:
            raise ConfigError(
                f"input has {feats.shape[-1]} channels, spec wants "
                f"{spec.input_channels + spec.external_channels}")
        if plan is None:
            plan = self.make_plan(img)

        bundles = {"input": (Tensor(feats.reshape(-1, feats.shape[-1])), 0)}
        for b in spec.blocks:
            kind, bspec, stack, up_layers = self.blocks[b.name]
            if kind == "FE":
                x, lvl = bundles[b.inputs[0]]
                for _ in range(self.info[b.name]["entry_records"]):
                    rec = plan.levels[lvl + 1].records[lvl]
                    x = T.gather_rows(x, rec.gather_indices())
                    lvl += 1
                ctx = plan.levels[lvl].ctx(spec.nbhd, b.kernel.encoding)
                x = stack(x, ctx)
            else:
                (x, lo_lvl) = bundles[b.inputs[0]]
                (skip, hi_lvl) = bundles[b.inputs[1]]
                for step, up_layer in enumerate(up_layers):
                    rec = plan.levels[lo_lvl - step].records[lo_lvl - step - 1]
                    x = T.gather_rows(x, rec.scatter_indices())
                    ctx = plan.levels[lo_lvl - step - 1].ctx(spec.nbhd, b.kernel.encoding)
                    x = T.relu(_gate(up_layer(x, ctx), ctx))
                lvl = hi_lvl
                ctx = plan.levels[lvl].ctx(spec.nbhd, b.kernel.encoding)
                x = stack(T.concat([x, skip], axis=-1), ctx)
            bundles[b.name] = (x, lvl)

        out_name = self.info["__out__"]
        x, lvl = bundles[out_name]
        level = plan.levels[lvl]
        ho, wo = level.mask.shape
        return BackboneOutput(features=x, coords=level.coords.reshape(ho, wo, 3),
                              mask=level.mask.reshape(ho, wo), plan=plan)

    def predict(self, img: RangeImage, external: np.ndarray | None = None,
                plan: FramePlan | None = None) -> HeadOutput:
        out = self.forward(img, external, plan)
        cls = T.add(T.matmul(out.features, self.head_cls_w), self.head_cls_b)
        reg = T.add(T.matmul(out.features, self.head_reg_w), self.head_reg_b)
        return HeadOutput(cls_logits=cls, reg=reg, coords=out.coords, mask=out.mask)

    # -- persistence --------------------------------------------------------

    def load_param_values(self, values: dict) -> None:
        for name, tensor in self.params.items():
            if name not in values:
                raise KeyError(f"checkpoint missing parameter {name}")
            arr = np.asarray(values[name], dtype=np.float64)
            if arr.shape != tensor.values.shape:
                raise ValueError(
                    f"parameter {name}: checkpoint shape {arr.shape} != {tensor.values.shape}")
            tensor.values = arr.copy()

    def set_rq_boundaries(self, per_level: dict) -> None:
        """Install per-resolution bucket boundaries on every rq layer."""
        for b in self.spec.blocks:
            kind, bspec, stack, up_layers = self.blocks[b.name]
            lvl = self.info[b.name]["level"]
            layers = [l for pair in stack.pairs for l in pair[:2]] + list(up_layers or [])
            for layer in layers:
                if layer.kernel.tag == "rq_conv2d" and lvl in per_level:
                    layer.params.boundaries = K.validate_boundaries(per_level[lvl])


def build_network(spec: NetworkSpec, seed: int = 0) -> Network:
    return Network(spec, seed=seed)


def calibrate_rq_boundaries(network: Network, frames) -> dict:
    """Equal-mass range-delta buckets per resolution level, measured on
    sample frames, installed on the network's rq layers."""
    spec = network.spec
    by_level: dict[int, list] = {}
    for img in frames:
        plan = network.make_plan(img)
        for lvl, level in plan.levels.items():
            by_level.setdefault(lvl, []).append(
                RangeImage(level.coords, np.zeros(level.mask.shape + (1,)), level.mask))
    result = {}
    for lvl, imgs in by_level.items():
        result[lvl] = collect_delta_r_histogram(imgs, spec.nbhd.k_h, spec.nbhd.k_w,
                                                spec.n_buckets)
        if len(result[lvl]) != spec.n_buckets:
            result[lvl] = fixed_width_buckets(spec.n_buckets)
    network.set_rq_boundaries(result)
    return result


# ---------------------------------------------------------------------------
# Accounting


def count_params(network: Network) -> dict:
    """Per-block and total trainable scalar counts."""
    per = {}
    for name, tensor in network.params.items():
        block = name.split("/")[0]
        per[block] = per.get(block, 0) + tensor.size
    per["total"] = sum(v for k, v in per.items())
    return per


def count_flops(network: Network, h: int, w: int) -> dict:
    """Forward flops at input resolution h x w, per block and total.

    `kernel_flops` counts the aggregation layers only (the quantity the
    K-fold claim is about); `other_flops` adds 1x1 projections and the
    detection head. See kernels.FLOP_CONVENTION.
    """
    spec = network.spec
    per = {}
    for b in spec.blocks:
        inf = network.info[b.name]
        kind, bspec, stack, up_layers = network.blocks[b.name]
        hh, ww = _level_dims(h, w, inf["level"])
        kf = of = 0
        for l1, l2, proj in stack.pairs:
            kf += l1.flops(hh, ww, spec.n_buckets) + l2.flops(hh, ww, spec.n_buckets)
            if proj is not None:
                of += 2 * hh * ww * proj.weight.shape[0] * proj.weight.shape[1]
        if up_layers:
            for step, layer in enumerate(up_layers):
                uh, uw = _level_dims(h, w, inf["level"] + inf["up_steps"] - 1 - step)
                kf += layer.flops(uh, uw, spec.n_buckets)
        per[b.name] = {"kernel_flops": kf, "other_flops": of}
    oh, ow = _level_dims(h, w, network.info[network.info["__out__"]]["level"])
    d_final = network.head_cls_w.shape[0]
    per["head"] = {"kernel_flops": 0,
                   "other_flops": 2 * oh * ow * d_final * (network.head_cls_w.shape[1] + 8)}
    per["total"] = {
        "kernel_flops": sum(v["kernel_flops"] for k, v in per.items() if k != "total"),
        "other_flops": sum(v["other_flops"] for k, v in per.items() if k != "total"),
    }
    per["total"]["flops"] = per["total"]["kernel_flops"] + per["total"]["other_flops"]
    return per
