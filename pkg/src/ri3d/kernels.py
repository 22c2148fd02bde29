"""Point-set aggregation kernels over range-image neighborhoods.

Every kernel maps (features, per-pixel spherical coords, validity mask)
restricted to a k_h x k_w pixel neighborhood to one output feature per
pixel:

  conv2d          dense inner product over the patch (geometry-blind)
  rq_conv2d       conv2d with one weight set per neighbor-range-delta bucket
  self_attention  single-head attention with a pairwise positional term
  pointnet        per-neighbor MLP on [feature, encoding], max-pooled
  edgeconv        pointnet with the center feature appended to the MLP input

All but conv2d gate each neighbor term by the validity product
delta = mask[neighbor] * mask[center], so feature values at invalid
pixels can never leak into outputs. Neighbors outside the image are
treated as invalid. The pairwise encoding depends only on coordinates,
so it is computed once per resolution and shared by every layer.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import tensor as T
from .geometry import cartesian_displacement, positional_encoding
from .rangeimage import RangeImage
from .tensor import Tensor

__all__ = [
    "ConfigError", "NeighborhoodSpec", "KernelKind", "NeighborContext",
    "Conv2DParams", "RQConv2DParams", "SelfAttentionParams",
    "PointNetParams", "EdgeConvParams",
    "conv2d", "rq_conv2d", "self_attention", "pointnet", "edgeconv",
    "apply_conv2d", "apply_rq_conv2d", "apply_self_attention",
    "apply_pointnet", "apply_edgeconv",
    "neighbor_indices", "validate_boundaries",
    "kernel_flops", "kernel_param_count", "FLOP_CONVENTION",
]

KERNEL_TAGS = ("conv2d", "rq_conv2d", "self_attention", "pointnet", "edgeconv")

#: Counting rules used by every flop figure this package reports.
FLOP_CONVENTION = (
    "1 multiply-add = 2 flops; exp = 4 flops; comparisons, bias adds and "
    "bucket selection are not counted; totals are per forward pass"
)


class ConfigError(ValueError):
    """Inconsistent kernel configuration (e.g. bucket boundary gaps)."""


@dataclass(frozen=True)
class NeighborhoodSpec:
    """Odd-sized neighborhood centered on each pixel."""

    k_h: int = 3
    k_w: int = 3

    def __post_init__(self):
        if self.k_h % 2 == 0 or self.k_w % 2 == 0 or self.k_h < 1 or self.k_w < 1:
            raise ConfigError(f"kernel sizes must be odd and positive, got {self.k_h}x{self.k_w}")

    @property
    def taps(self) -> int:
        return self.k_h * self.k_w


@dataclass(frozen=True)
class KernelKind:
    """Which aggregation kernel a layer uses, plus its encoding mode.

    `encoding` selects the pairwise geometric term: "polar" for the
    sensor-frame oblique offset, "cartesian" for the world-frame
    displacement (the ablation alternative). conv2d ignores it.
    """

    tag: str = "conv2d"
    encoding: str = "polar"

    def __post_init__(self):
        if self.tag not in KERNEL_TAGS:
            raise ConfigError(f"unknown kernel tag {self.tag!r}")
        if self.encoding not in ("polar", "cartesian"):
            raise ConfigError(f"unknown encoding {self.encoding!r}")


@lru_cache(maxsize=64)
def neighbor_indices(h: int, w: int, k_h: int, k_w: int) -> np.ndarray:
    """[h*w, k_h*k_w] flat source index per (pixel, tap); -1 out of bounds.

    Tap order is row-major over (row offset, col offset), matching the
    [k_h, k_w, ...] weight layout.
    """
    half_h, half_w = k_h // 2, k_w // 2
    rows = np.arange(h)[:, None, None, None] + np.arange(-half_h, half_h + 1)[None, None, :, None]
    cols = np.arange(w)[None, :, None, None] + np.arange(-half_w, half_w + 1)[None, None, None, :]
    rows = np.broadcast_to(rows, (h, w, k_h, k_w))
    cols = np.broadcast_to(cols, (h, w, k_h, k_w))
    ok = (rows >= 0) & (rows < h) & (cols >= 0) & (cols < w)
    idx = np.where(ok, rows * w + cols, -1)
    return idx.reshape(h * w, k_h * k_w)


@dataclass
class NeighborContext:
    """Everything coordinate-derived a kernel needs at one resolution.

    Parameter-independent, so it is built once per sample/resolution and
    shared across layers.
    """

    h: int
    w: int
    nbhd: NeighborhoodSpec
    idx: np.ndarray           # [N, P] int64, -1 out of bounds
    center_valid: np.ndarray  # [N] bool
    nb_valid: np.ndarray      # [N, P] bool (in bounds and valid)
    delta: np.ndarray         # [N, P] bool = nb_valid & center_valid
    gamma: np.ndarray         # [N, P, 3], encoding-dependent
    ranges: np.ndarray        # [N]
    _buckets: dict = field(default_factory=dict, repr=False)

    @staticmethod
    def build(coords: np.ndarray, mask: np.ndarray,
              nbhd: NeighborhoodSpec = NeighborhoodSpec(),
              encoding: str = "polar") -> "NeighborContext":
        h, w = mask.shape
        idx = neighbor_indices(h, w, nbhd.k_h, nbhd.k_w)
        flat_mask = mask.reshape(-1)
        safe = np.where(idx >= 0, idx, 0)
        nb_valid = (idx >= 0) & flat_mask[safe]
        center_valid = flat_mask
        flat_coords = coords.reshape(-1, 3)
        nb_coords = flat_coords[safe]
        nb_coords[idx < 0] = 0.0
        center = flat_coords[:, None, :]
        if encoding == "polar":
            gamma = positional_encoding(center, nb_coords)
        elif encoding == "cartesian":
            gamma = cartesian_displacement(center, nb_coords)
        else:
            raise ConfigError(f"unknown encoding {encoding!r}")
        return NeighborContext(
            h=h, w=w, nbhd=nbhd, idx=idx, center_valid=center_valid,
            nb_valid=nb_valid, delta=nb_valid & center_valid[:, None],
            gamma=gamma, ranges=flat_coords[:, 2])

    def bucket_ids(self, boundaries: tuple) -> np.ndarray:
        """[N, P] bucket index of each neighbor's range delta."""
        key = tuple(boundaries)
        got = self._buckets.get(key)
        if got is None:
            edges = np.array([b for _, b in boundaries[:-1]])
            safe = np.where(self.idx >= 0, self.idx, 0)
            dr = self.ranges[safe] - self.ranges[:, None]
            got = np.searchsorted(edges, dr, side="right").astype(np.int8)
            self._buckets[key] = got
        return got

    def _tap_slices(self):
        """Per tap: (dst rows, dst cols, src rows, src cols) slice bounds."""
        got = getattr(self, "_slices", None)
        if got is None:
            h, w = self.h, self.w
            kh, kw = self.nbhd.k_h, self.nbhd.k_w
            got = []
            for di in range(-(kh // 2), kh // 2 + 1):
                for dj in range(-(kw // 2), kw // 2 + 1):
                    a0, a1 = max(0, -di), min(h, h - di)
                    b0, b1 = max(0, -dj), min(w, w - dj)
                    got.append(((a0, a1), (b0, b1), (a0 + di, a1 + di), (b0 + dj, b1 + dj)))
            self._slices = got
        return got

    def gather_patch(self, x: np.ndarray, scale: np.ndarray | None = None) -> np.ndarray:
        """x[idx] as [N, P, D] via shifted block copies (zeros out of
        bounds); equivalent to fancy indexing with self.idx but much
        cheaper on the grid-structured pattern."""
        d = x.shape[1]
        x3 = x.reshape(self.h, self.w, d)
        out = np.zeros((self.h, self.w, len(self._tap_slices()), d))
        for p, ((a0, a1), (b0, b1), (sa0, sa1), (sb0, sb1)) in enumerate(self._tap_slices()):
            out[a0:a1, b0:b1, p] = x3[sa0:sa1, sb0:sb1]
        out = out.reshape(self.h * self.w, -1, d)
        if scale is not None:
            out *= scale[:, :, None]
        return out

    def scatter_patch_add(self, g: np.ndarray) -> np.ndarray:
        """Adjoint of gather_patch: accumulate [N, P, D] back to [N, D]."""
        d = g.shape[2]
        g4 = g.reshape(self.h, self.w, -1, d)
        gx = np.zeros((self.h, self.w, d))
        for p, ((a0, a1), (b0, b1), (sa0, sa1), (sb0, sb1)) in enumerate(self._tap_slices()):
            gx[sa0:sa1, sb0:sb1] += g4[a0:a1, b0:b1, p]
        return gx.reshape(self.h * self.w, d)


def validate_boundaries(boundaries) -> tuple:
    """Boundaries must tile all of R contiguously: (-inf, b1), [b1, b2), ... [bK-1, +inf)."""
    bounds = tuple((float(a), float(b)) for a, b in boundaries)
    if not bounds:
        raise ConfigError("need at least one bucket")
    if bounds[0][0] != -np.inf or bounds[-1][1] != np.inf:
        raise ConfigError("buckets must cover all of R (first alpha -inf, last beta +inf)")
    for (a, b), (a2, _) in zip(bounds[:-1], bounds[1:]):
        if a > b or a2 != b:
            raise ConfigError(f"bucket boundaries must be contiguous, got {bounds}")
    return bounds


# ---------------------------------------------------------------------------
# Parameters


def _he(rng: np.random.Generator, shape, fan_in: int, gain: float = 1.0) -> Tensor:
    return Tensor(rng.normal(0.0, gain * np.sqrt(2.0 / max(fan_in, 1)), size=shape),
                  requires_grad=True)


#: Init gain for the max-pooled MLP output layers: the max over ~9
#: neighbor encodings inflates the output scale by roughly 1.5x per
#: layer, so shrink the last projection to compensate.
_MAXPOOL_GAIN = 1.0 / 1.5


@dataclass
class Conv2DParams:
    weight: Tensor  # [k_h, k_w, D, D']

    @staticmethod
    def init(rng, nbhd: NeighborhoodSpec, d_in: int, d_out: int) -> "Conv2DParams":
        return Conv2DParams(_he(rng, (nbhd.k_h, nbhd.k_w, d_in, d_out), nbhd.taps * d_in))

    def tensors(self) -> dict:
        return {"weight": self.weight}


@dataclass
class RQConv2DParams:
    weights: Tensor  # [K, k_h, k_w, D, D']
    boundaries: tuple

    def __post_init__(self):
        self.boundaries = validate_boundaries(self.boundaries)
        if len(self.boundaries) != self.weights.shape[0]:
            raise ConfigError(
                f"{self.weights.shape[0]} weight sets vs {len(self.boundaries)} buckets")

    @staticmethod
    def init(rng, nbhd: NeighborhoodSpec, d_in: int, d_out: int, boundaries) -> "RQConv2DParams":
        k = len(boundaries)
        w = _he(rng, (k, nbhd.k_h, nbhd.k_w, d_in, d_out), nbhd.taps * d_in)
        return RQConv2DParams(w, tuple(boundaries))

    def tensors(self) -> dict:
        return {"weights": self.weights}


@dataclass
class SelfAttentionParams:
    w_q: Tensor  # [D, A]
    w_k: Tensor  # [D, A]
    w_v: Tensor  # [D, D']
    w_r: Tensor  # [3, A]

    @staticmethod
    def init(rng, d_in: int, d_out: int, key_dim: int | None = None) -> "SelfAttentionParams":
        a = d_out if key_dim is None else key_dim
        return SelfAttentionParams(
            w_q=_he(rng, (d_in, a), d_in), w_k=_he(rng, (d_in, a), d_in),
            w_v=_he(rng, (d_in, d_out), d_in), w_r=_he(rng, (3, a), 3))

    def tensors(self) -> dict:
        return {"w_q": self.w_q, "w_k": self.w_k, "w_v": self.w_v, "w_r": self.w_r}


@dataclass
class PointNetParams:
    """Two-layer MLP over [neighbor feature, encoding] -> hidden -> D'."""

    w1: Tensor  # [D + 3, H]
    b1: Tensor  # [H]
    w2: Tensor  # [H, D']
    b2: Tensor  # [D']

    @staticmethod
    def init(rng, d_in: int, d_out: int, hidden: int | None = None) -> "PointNetParams":
        h = d_out if hidden is None else hidden
        return PointNetParams(
            w1=_he(rng, (d_in + 3, h), d_in + 3), b1=Tensor(np.zeros(h), requires_grad=True),
            w2=_he(rng, (h, d_out), h, gain=_MAXPOOL_GAIN),
            b2=Tensor(np.zeros(d_out), requires_grad=True))

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


@dataclass
class EdgeConvParams:
    """Two-layer MLP over [neighbor feature, center feature, encoding]."""

    w1: Tensor  # [2D + 3, H]
    b1: Tensor
    w2: Tensor
    b2: Tensor

    @staticmethod
    def init(rng, d_in: int, d_out: int, hidden: int | None = None) -> "EdgeConvParams":
        h = d_out if hidden is None else hidden
        return EdgeConvParams(
            w1=_he(rng, (2 * d_in + 3, h), 2 * d_in + 3), b1=Tensor(np.zeros(h), requires_grad=True),
            w2=_he(rng, (h, d_out), h, gain=_MAXPOOL_GAIN),
            b2=Tensor(np.zeros(d_out), requires_grad=True))

    def tensors(self) -> dict:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


# ---------------------------------------------------------------------------
# Fused patch ops (memory-lean forward/backward on the tape)


def _patch_linear(x: Tensor, ctx: NeighborContext, weight: Tensor,
                  pair_scale: np.ndarray | None) -> Tensor:
    """out[n] = sum_p W[p] . x[idx[n, p]] (optionally scaled per pair).

    weight is [P, D, D'] viewed flat; the gathered patch matrix is
    re-materialized in the backward pass instead of being saved.
    """
    n, d = x.values.shape
    p = ctx.idx.shape[1]
    d_out = weight.values.shape[-1]
    wf = weight.values.reshape(p * d, d_out)

    def patch():
        return ctx.gather_patch(x.values, pair_scale).reshape(n, p * d)

    out = patch() @ wf

    def vjp(g):
        gw = gx = None
        if weight.requires_grad:
            gw = (patch().T @ g).reshape(weight.values.shape)
        if x.requires_grad:
            gnb = (g @ wf.T).reshape(n, p, d)
            if pair_scale is not None:
                gnb *= pair_scale[:, :, None]
            gx = ctx.scatter_patch_add(gnb)
        return (gx, gw)

    return T.apply_op(out, (x, weight), vjp, "patch_linear")


def conv2d(x: Tensor, ctx: NeighborContext, weight: Tensor, masked: bool = False) -> Tensor:
    """Dense patch convolution, [N, D] -> [N, D'].

    The default follows the geometry-blind formulation with no validity
    product: out-of-image neighbors contribute zero (their features are
    zero), but an invalid center pixel still produces output. Pass
    masked=True to gate every term by delta like the other kernels.
    """
    if weight.values.ndim == 4:
        weight_flat = weight.reshape(
            (ctx.nbhd.taps, weight.shape[2], weight.shape[3]))
    else:
        weight_flat = weight
    scale = ctx.delta.astype(np.float64) if masked else None
    return _patch_linear(x, ctx, weight_flat, scale)


def rq_conv2d(x: Tensor, ctx: NeighborContext, params: RQConv2DParams) -> Tensor:
    """Range-quantized convolution: per neighbor, the weight set is chosen
    by the bucket containing (neighbor range - center range); every term
    is gated by the validity product."""
    buckets = ctx.bucket_ids(params.boundaries)
    k = len(params.boundaries)
    delta = ctx.delta.astype(np.float64)
    out = None
    for b in range(k):
        w_b = params.weights[b]
        scale = delta if k == 1 else delta * (buckets == b)
        term = _patch_linear(x, ctx, w_b.reshape((ctx.nbhd.taps,) + tuple(w_b.shape[2:])), scale)
        out = term if out is None else T.add(out, term)
    return out


def self_attention(x: Tensor, ctx: NeighborContext, params: SelfAttentionParams,
                   strict_softmax: bool = False) -> Tensor:
    """Single-head neighborhood attention with a pairwise positional term.

    Logits: (x_c W_q) . (x_n W_k + gamma W_r). By default the softmax
    normalizes over valid neighbors only (invalid logits are masked
    out); strict_softmax=True keeps invalid in-image neighbors in the
    normalizer and relies on the validity product alone, matching the
    literal formulation.
    """
    n, _ = x.values.shape
    p = ctx.idx.shape[1]
    q = T.matmul(x, params.w_q)                       # [N, A]
    keys = T.gather_rows(T.matmul(x, params.w_k), ctx.idx)  # [N, P, A]
    rterm = T.matmul(Tensor(ctx.gamma), params.w_r)   # [N, P, A]
    logits = T.sum_(T.mul(T.reshape(q, (n, 1, -1)), T.add(keys, rterm)), axis=-1)
    softmax_mask = ctx.idx >= 0 if strict_softmax else ctx.nb_valid
    weights = T.softmax_axis(logits, axis=1, mask=softmax_mask)
    values = T.gather_rows(T.matmul(x, params.w_v), ctx.idx)  # [N, P, D']
    gated = T.mul(weights.reshape((n, p, 1)), ctx.delta[:, :, None].astype(np.float64))
    return T.sum_(T.mul(gated, values), axis=1)


def _neighbor_mlp_max(x: Tensor, ctx: NeighborContext, w1: Tensor, b1: Tensor,
                      w2: Tensor, b2: Tensor, with_center: bool) -> Tensor:
    """Shared pointnet/edgeconv core: per-neighbor 2-layer MLP, then max
    over valid neighbors (first-index tie break; all-invalid -> 0).

    First-layer input rows are [neighbor feature, (center feature,)
    encoding]; the weight matrix is sliced accordingly so the whole
    thing runs as three GEMMs plus a gather.
    """
    n, d = x.values.shape
    p = ctx.idx.shape[1]
    w1v, b1v, w2v, b2v = w1.values, b1.values, w2.values, b2.values
    hdim = w1v.shape[1]
    w_nb = w1v[:d]
    w_gam = w1v[2 * d:] if with_center else w1v[d:]
    gamflat = ctx.gamma.reshape(n * p, 3)

    pre = ctx.gather_patch(x.values @ w_nb)
    pre += (gamflat @ w_gam).reshape(n, p, hdim)
    pre += b1v
    if with_center:
        pre += (x.values @ w1v[d:2 * d])[:, None, :]
    hid = np.maximum(pre, 0.0)
    relu_on = pre > 0
    z = hid.reshape(n * p, hdim) @ w2v
    z = z.reshape(n, p, -1) + b2v
    masked = np.where(ctx.delta[:, :, None], z, -np.inf)
    arg = np.argmax(masked, axis=1)
    any_valid = ctx.delta.any(axis=1)
    out = np.take_along_axis(masked, arg[:, None, :], axis=1)[:, 0, :]
    out = np.where(any_valid[:, None], out, 0.0)

    d_out = w2v.shape[1]

    def vjp(g):
        g = g * any_valid[:, None]
        gz = np.zeros((n, p, d_out))
        np.put_along_axis(gz, arg[:, None, :], g[:, None, :], axis=1)
        gzf = gz.reshape(n * p, -1)
        g_w2 = hid.reshape(n * p, hdim).T @ gzf if w2.requires_grad else None
        g_b2 = g.sum(axis=0) if b2.requires_grad else None
        gh = (gzf @ w2v.T).reshape(n, p, hdim)
        gpre = gh * relu_on
        gpre_flat = gpre.reshape(n * p, hdim)
        g_b1 = gpre_flat.sum(axis=0) if b1.requires_grad else None
        g_w1 = None
        if w1.requires_grad:
            xg = ctx.gather_patch(x.values).reshape(n * p, d)
            g_nb = xg.T @ gpre_flat
            g_gam = gamflat.T @ gpre_flat
            if with_center:
                g_ctr = x.values.T @ gpre.sum(axis=1)
                g_w1 = np.concatenate([g_nb, g_ctr, g_gam], axis=0)
            else:
                g_w1 = np.concatenate([g_nb, g_gam], axis=0)
        gx = None
        if x.requires_grad:
            gx = ctx.scatter_patch_add((gpre_flat @ w_nb.T).reshape(n, p, d))
            if with_center:
                gx += gpre.sum(axis=1) @ w1v[d:2 * d].T
        return (gx, g_w1, g_b1, g_w2, g_b2)

    return T.apply_op(out, (x, w1, b1, w2, b2), vjp, "neighbor_mlp_max")


def pointnet(x: Tensor, ctx: NeighborContext, params: PointNetParams) -> Tensor:
    """Max over valid neighbors of MLP([neighbor feature, encoding])."""
    return _neighbor_mlp_max(x, ctx, params.w1, params.b1, params.w2, params.b2, False)


def edgeconv(x: Tensor, ctx: NeighborContext, params: EdgeConvParams) -> Tensor:
    """Max over valid neighbors of MLP([neighbor, center, encoding])."""
    return _neighbor_mlp_max(x, ctx, params.w1, params.b1, params.w2, params.b2, True)


# ---------------------------------------------------------------------------
# RangeImage-level wrappers


def _run_on_image(img: RangeImage, fn, nbhd: NeighborhoodSpec, encoding: str) -> np.ndarray:
    ctx = NeighborContext.build(img.coords, img.mask, nbhd, encoding)
    x = Tensor(img.features.reshape(img.height * img.width, img.depth))
    out = fn(x, ctx)
    return out.values.reshape(img.height, img.width, -1)


def apply_conv2d(img: RangeImage, params: Conv2DParams,
                 nbhd: NeighborhoodSpec = NeighborhoodSpec(), masked: bool = False) -> np.ndarray:
    return _run_on_image(img, lambda x, c: conv2d(x, c, params.weight, masked), nbhd, "polar")


def apply_rq_conv2d(img: RangeImage, params: RQConv2DParams,
                    nbhd: NeighborhoodSpec = NeighborhoodSpec()) -> np.ndarray:
    return _run_on_image(img, lambda x, c: rq_conv2d(x, c, params), nbhd, "polar")


def apply_self_attention(img: RangeImage, params: SelfAttentionParams,
                         nbhd: NeighborhoodSpec = NeighborhoodSpec(),
                         encoding: str = "polar", strict_softmax: bool = False) -> np.ndarray:
    return _run_on_image(
        img, lambda x, c: self_attention(x, c, params, strict_softmax), nbhd, encoding)


def apply_pointnet(img: RangeImage, params: PointNetParams,
                   nbhd: NeighborhoodSpec = NeighborhoodSpec(),
                   encoding: str = "polar") -> np.ndarray:
    return _run_on_image(img, lambda x, c: pointnet(x, c, params), nbhd, encoding)


def apply_edgeconv(img: RangeImage, params: EdgeConvParams,
                   nbhd: NeighborhoodSpec = NeighborhoodSpec(),
                   encoding: str = "polar") -> np.ndarray:
    return _run_on_image(img, lambda x, c: edgeconv(x, c, params), nbhd, encoding)


# ---------------------------------------------------------------------------
# Complexity accounting


def kernel_flops(tag: str, nbhd: NeighborhoodSpec, d_in: int, d_out: int,
                 h: int, w: int, n_buckets: int = 1, key_dim: int | None = None) -> int:
    """Forward flops of one layer under FLOP_CONVENTION."""
    n = h * w
    p = nbhd.taps
    if tag == "conv2d":
        return 2 * n * p * d_in * d_out
    if tag == "rq_conv2d":
        return n_buckets * kernel_flops("conv2d", nbhd, d_in, d_out, h, w)
    if tag == "self_attention":
        a = d_out if key_dim is None else key_dim
        macs = n * (d_in * a + p * (d_in * a + 3 * a + a + d_in * d_out))
        return 2 * macs + 4 * n * p  # one exp per neighbor
    if tag == "pointnet":
        return 2 * n * p * ((d_in + 3) * d_out + d_out * d_out)
    if tag == "edgeconv":
        return 2 * n * p * ((2 * d_in + 3) * d_out + d_out * d_out)
    raise ConfigError(f"unknown kernel tag {tag!r}")


def kernel_param_count(tag: str, nbhd: NeighborhoodSpec, d_in: int, d_out: int,
                       n_buckets: int = 1, key_dim: int | None = None) -> int:
    """Trainable scalars in one kernel's parameter set."""
    p = nbhd.taps
    if tag == "conv2d":
        return p * d_in * d_out
    if tag == "rq_conv2d":
        return n_buckets * p * d_in * d_out
    if tag == "self_attention":
        a = d_out if key_dim is None else key_dim
        return d_in * a + d_in * a + 3 * a + d_in * d_out
    if tag == "pointnet":
        return (d_in + 3) * d_out + d_out + d_out * d_out + d_out
    if tag == "edgeconv":
        return (2 * d_in + 3) * d_out + d_out + d_out * d_out + d_out
    raise ConfigError(f"unknown kernel tag {tag!r}")
