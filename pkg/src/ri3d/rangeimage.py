"""Range-image container, validity-aware down/up-sampling, and file I/O.

A range image is an H x W grid holding per-pixel spherical coordinates,
D feature channels, and a validity mask (returns can be missing).
Invalid pixels carry zero coordinates and zero features by construction.

Down-sampling selects, per stride window, the valid pixel whose range is
closest to the mean range of the window's valid pixels; the selection is
remembered so the mirrored up-sampling can restore coordinates and mask
exactly and scatter features back to the selected positions.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .geometry import Box7DoF

__all__ = [
    "RangeImage", "SamplingRecord", "RimgFormatError",
    "make_range_image", "smart_downsample", "smart_upsample",
    "collect_delta_r_histogram", "fixed_width_buckets",
    "read_rimg", "write_rimg", "read_labels", "write_labels",
]


@dataclass
class RangeImage:
    coords: np.ndarray    # [H, W, 3] (theta, phi, r), float64
    features: np.ndarray  # [H, W, D] float64
    mask: np.ndarray      # [H, W] bool

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def depth(self) -> int:
        return self.features.shape[2]

    @property
    def ranges(self) -> np.ndarray:
        return self.coords[..., 2]

    def validate(self, max_range: float | None = None) -> None:
        h, w = self.mask.shape
        if self.coords.shape != (h, w, 3) or self.features.shape[:2] != (h, w):
            raise ValueError("coords/features/mask grid shapes disagree")
        inv = ~self.mask
        if np.any(self.coords[inv] != 0.0) or np.any(self.features[inv] != 0.0):
            raise ValueError("invalid pixels must carry zero coords and features")
        r = self.ranges[self.mask]
        if r.size and (r.min() <= 0.0 or (max_range is not None and r.max() > max_range)):
            raise ValueError("valid ranges must lie in (0, max_range]")


def make_range_image(coords, features, mask) -> RangeImage:
    """Assemble a RangeImage, zeroing out coords/features at invalid pixels."""
    mask = np.asarray(mask, dtype=bool)
    coords = np.array(coords, dtype=np.float64)
    features = np.array(features, dtype=np.float64)
    coords[~mask] = 0.0
    features[~mask] = 0.0
    return RangeImage(coords, features, mask)


# ---------------------------------------------------------------------------
# Smart down- and up-sampling


@dataclass
class SamplingRecord:
    """What a down-sampling layer needs to be mirrored later.

    `selected` holds, per output pixel, the flat index of the chosen
    source pixel in the pre-downsampling H x W grid (-1 if the window
    held no valid pixel). `coords`/`mask` are the pre-downsampling
    layer's grids, restored verbatim on up-sampling.
    """

    stride_h: int
    stride_w: int
    selected: np.ndarray  # [Ho, Wo] int64, flat into H*W, -1 for none
    coords: np.ndarray    # [H, W, 3]
    mask: np.ndarray      # [H, W]
    smart: bool = True

    @property
    def in_shape(self) -> tuple:
        return self.mask.shape

    @property
    def out_shape(self) -> tuple:
        return self.selected.shape

    def gather_indices(self) -> np.ndarray:
        """Flat source index per output pixel (-1 -> zero row)."""
        return self.selected.reshape(-1)

    def scatter_indices(self) -> np.ndarray:
        """Flat low-res index per source pixel (-1 everywhere but the
        selected positions); gathering with these implements the
        up-sampling zero-fill scatter."""
        h, w = self.in_shape
        inv = np.full(h * w, -1, dtype=np.int64)
        sel = self.selected.reshape(-1)
        ok = sel >= 0
        inv[sel[ok]] = np.nonzero(ok)[0]
        return inv


def _windowed(a: np.ndarray, sh: int, sw: int, fill=0.0) -> tuple[np.ndarray, tuple]:
    """Pad bottom/right to divisibility and reshape to [Ho, Wo, sh*sw, ...]."""
    h, w = a.shape[:2]
    ho, wo = -(-h // sh), -(-w // sw)
    ph, pw = ho * sh - h, wo * sw - w
    if ph or pw:
        pad = [(0, ph), (0, pw)] + [(0, 0)] * (a.ndim - 2)
        a = np.pad(a, pad, constant_values=fill)
    tail = a.shape[2:]
    a = a.reshape(ho, sh, wo, sw, *tail).swapaxes(1, 2)
    return a.reshape(ho, wo, sh * sw, *tail), (ho, wo)


def smart_downsample(img: RangeImage, stride_h: int, stride_w: int,
                     smart: bool = True) -> tuple[RangeImage, SamplingRecord]:
    """Stride-sample one pixel per window, preferring valid returns.

    In smart mode the selected pixel is the valid one whose range is
    closest to the mean range of the window's valid pixels (ties go to
    the lowest flat index); a window with no valid pixel produces an
    invalid output pixel with zero features. With smart=False the
    window's first pixel is taken unconditionally (the fixed-stride
    baseline used by the sampling ablation).
    """
    if stride_h < 1 or stride_w < 1:
        raise ValueError(f"strides must be >= 1, got {(stride_h, stride_w)}")
    h, w = img.mask.shape
    rwin, (ho, wo) = _windowed(img.ranges, stride_h, stride_w)
    mwin, _ = _windowed(img.mask, stride_h, stride_w, fill=False)

    if smart:
        cnt = mwin.sum(axis=-1)
        mu = np.divide(
            (rwin * mwin).sum(axis=-1), cnt,
            out=np.zeros((ho, wo)), where=cnt > 0)
        d2 = np.where(mwin, (rwin - mu[..., None]) ** 2, np.inf)
        local = np.argmin(d2, axis=-1)
        valid_out = cnt > 0
    else:
        local = np.zeros((ho, wo), dtype=np.int64)
        valid_out = mwin[..., 0]

    # window-local flat index -> source grid flat index
    wr, wc = np.meshgrid(np.arange(ho), np.arange(wo), indexing="ij")
    row = wr * stride_h + local // stride_w
    col = wc * stride_w + local % stride_w
    sel = row * w + col
    if smart:
        sel = np.where(valid_out, sel, -1)

    flat_sel = sel.reshape(-1)
    ok = flat_sel >= 0
    safe = np.where(ok, flat_sel, 0)
    out_coords = img.coords.reshape(-1, 3)[safe]
    out_feats = img.features.reshape(-1, img.depth)[safe]
    out_mask = img.mask.reshape(-1)[safe] & ok
    out_coords[~out_mask] = 0.0
    out_feats[~out_mask] = 0.0

    out = RangeImage(
        out_coords.reshape(ho, wo, 3),
        out_feats.reshape(ho, wo, img.depth),
        out_mask.reshape(ho, wo))
    rec = SamplingRecord(stride_h, stride_w, sel.astype(np.int64),
                         img.coords.copy(), img.mask.copy(), smart)
    return out, rec


def smart_upsample(img: RangeImage, rec: SamplingRecord) -> RangeImage:
    """Mirror a recorded down-sampling: restore coords/mask verbatim and
    scatter each low-res feature to its recorded position (zeros elsewhere)."""
    if img.mask.shape != rec.out_shape:
        raise ValueError(
            f"image shape {img.mask.shape} does not match record output {rec.out_shape}")
    h, w = rec.in_shape
    d = img.depth
    feats = np.zeros((h * w, d))
    sel = rec.selected.reshape(-1)
    ok = sel >= 0
    feats[sel[ok]] = img.features.reshape(-1, d)[ok]
    feats[~rec.mask.reshape(-1)] = 0.0
    return RangeImage(rec.coords.copy(), feats.reshape(h, w, d), rec.mask.copy())


# ---------------------------------------------------------------------------
# Range-difference histogram buckets (for the range-quantized kernel)


def fixed_width_buckets(n_buckets: int, width: float = 0.5) -> list[tuple[float, float]]:
    """Contiguous buckets with fixed-width interior boundaries centered on 0."""
    edges = [(j - n_buckets / 2.0) * width for j in range(1, n_buckets)]
    bounds = [-np.inf] + edges + [np.inf]
    return list(zip(bounds[:-1], bounds[1:]))


def collect_delta_r_histogram(samples, k_h: int, k_w: int,
                              n_buckets: int) -> list[tuple[float, float]]:
    """Equal-mass bucket boundaries of neighbor-minus-center range deltas.

    Collects r[m', n'] - r[m, n] over all valid pixel pairs within the
    k_h x k_w neighborhood across the sample stream and splits them into
    `n_buckets` contiguous quantile intervals ``[alpha, beta)`` covering
    all of R. Degenerate delta distributions (no pairs, or all deltas
    equal) fall back to fixed 0.5 m widths; with no pairs at all a
    single all-covering bucket is returned.
    """
    if n_buckets < 1:
        raise ValueError("n_buckets must be >= 1")
    if n_buckets == 1:
        return [(-np.inf, np.inf)]
    deltas = []
    half_h, half_w = k_h // 2, k_w // 2
    for img in samples:
        r, m = img.ranges, img.mask
        h, w = m.shape
        for di in range(-half_h, half_h + 1):
            for dj in range(-half_w, half_w + 1):
                src = (slice(max(0, -di), min(h, h - di)), slice(max(0, -dj), min(w, w - dj)))
                dst = (slice(max(0, di), min(h, h + di)), slice(max(0, dj), min(w, w + dj)))
                both = m[src] & m[dst]
                if both.any():
                    deltas.append((r[dst] - r[src])[both])
    if not deltas:
        return [(-np.inf, np.inf)]
    deltas = np.concatenate(deltas)
    qs = np.quantile(deltas, np.arange(1, n_buckets) / n_buckets)
    if qs[0] == qs[-1]:
        return fixed_width_buckets(n_buckets)
    bounds = [-np.inf] + [float(q) for q in qs] + [np.inf]
    return list(zip(bounds[:-1], bounds[1:]))


# ---------------------------------------------------------------------------
# RIMG binary format
#
#   bytes 0..7   magic "RI3DRIMG"
#   bytes 8..11  u32 version (1)
#   bytes 12..15 reserved (zero)
#   u32 H, W, D
#   mask:     H*W bytes (0/1)
#   coords:   H*W*3 float32 little-endian
#   features: H*W*D float32 little-endian

_RIMG_MAGIC = b"RI3DRIMG"
_RIMG_VERSION = 1


class RimgFormatError(IOError):
    """Bad magic/version or truncated RIMG payload."""


def write_rimg(path, img: RangeImage) -> None:
    with open(path, "wb") as f:
        f.write(_RIMG_MAGIC)
        f.write(struct.pack("<II", _RIMG_VERSION, 0))
        h, w, d = img.height, img.width, img.depth
        f.write(struct.pack("<III", h, w, d))
        f.write(img.mask.astype(np.uint8).tobytes())
        f.write(img.coords.astype("<f4").tobytes())
        f.write(img.features.astype("<f4").tobytes())


def read_rimg(path) -> RangeImage:
    with open(path, "rb") as f:
        data = f.read()
    if data[:8] != _RIMG_MAGIC:
        raise RimgFormatError(f"bad magic {data[:8]!r}")
    version, _ = struct.unpack("<II", data[8:16])
    if version != _RIMG_VERSION:
        raise RimgFormatError(f"unsupported RIMG version {version}")
    h, w, d = struct.unpack("<III", data[16:28])
    n = h * w
    need = 28 + n + n * 3 * 4 + n * d * 4
    if len(data) != need:
        raise RimgFormatError(f"payload size {len(data)} != expected {need}")
    off = 28
    mask = np.frombuffer(data, dtype=np.uint8, count=n, offset=off).astype(bool).reshape(h, w)
    off += n
    coords = np.frombuffer(data, dtype="<f4", count=n * 3, offset=off).astype(np.float64).reshape(h, w, 3)
    off += n * 3 * 4
    feats = np.frombuffer(data, dtype="<f4", count=n * d, offset=off).astype(np.float64).reshape(h, w, d)
    return make_range_image(coords, feats, mask)


# ---------------------------------------------------------------------------
# Label files: one box per line, "class cx cy cz l w h yaw"


def write_labels(path, labels) -> None:
    with open(path, "w") as f:
        for cls, box in labels:
            vals = " ".join(format(v, ".17g") for v in box.as_array())
            f.write(f"{cls} {vals}\n")


def read_labels(path) -> list:
    out = []
    with open(path) as f:
        for line in f:
            line = line.strip()
            if not line:
                continue
            parts = line.split()
            if len(parts) != 8:
                raise ValueError(f"label line needs 8 fields, got {len(parts)}: {line!r}")
            out.append((parts[0], Box7DoF.from_array([float(v) for v in parts[1:]])))
    return out
