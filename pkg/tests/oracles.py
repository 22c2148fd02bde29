"""Independent brute-force implementations used as test oracles.

Everything here is written as literal per-pixel / per-neighbor loops
straight from the kernel definitions, sharing nothing with the library's
vectorized code paths (only the positional-encoding formula, re-derived
inline). Slow on purpose.
"""

import numpy as np


def gamma_ref(center, nb):
    """Pairwise oblique-frame offset, re-derived from the definition."""
    dth = nb[0] - center[0]
    dph = nb[1] - center[1]
    rp = nb[2]
    return np.array([
        rp * np.cos(dth) * np.cos(dph) - center[2],
        rp * np.cos(dth) * np.sin(dph),
        rp * np.sin(dth),
    ])


def cartesian_ref(p):
    th, ph, r = p
    return np.array([r * np.cos(th) * np.cos(ph),
                     r * np.cos(th) * np.sin(ph),
                     r * np.sin(th)])


def _neighbors(h, w, m, n, kh, kw):
    for dm in range(-(kh // 2), kh // 2 + 1):
        for dn in range(-(kw // 2), kw // 2 + 1):
            mm, nn = m + dm, n + dn
            inb = 0 <= mm < h and 0 <= nn < w
            yield dm, dn, mm, nn, inb


def conv2d_ref(feats, mask, weight, kh=3, kw=3):
    """Triple-loop dense convolution; out-of-image neighbors contribute
    zero features, no validity product (the geometry-blind baseline)."""
    h, w, d = feats.shape
    d_out = weight.shape[-1]
    out = np.zeros((h, w, d_out))
    for m in range(h):
        for n in range(w):
            acc = np.zeros(d_out)
            for dm, dn, mm, nn, inb in _neighbors(h, w, m, n, kh, kw):
                if not inb:
                    continue
                wtap = weight[dm + kh // 2, dn + kw // 2]
                acc += feats[mm, nn] @ wtap
            out[m, n] = acc
    return out


def rq_conv2d_ref(feats, coords, mask, weights, boundaries, kh=3, kw=3):
    """Bucketed convolution with the validity product on every term."""
    h, w, d = feats.shape
    d_out = weights.shape[-1]
    ranges = coords[..., 2]
    out = np.zeros((h, w, d_out))
    for m in range(h):
        for n in range(w):
            acc = np.zeros(d_out)
            for dm, dn, mm, nn, inb in _neighbors(h, w, m, n, kh, kw):
                if not inb:
                    continue
                delta = float(mask[mm, nn]) * float(mask[m, n])
                if delta == 0.0:
                    continue
                dr = ranges[mm, nn] - ranges[m, n]
                k_sel = None
                for k, (a, b) in enumerate(boundaries):
                    if a <= dr < b:
                        k_sel = k
                        break
                wtap = weights[k_sel, dm + kh // 2, dn + kw // 2]
                acc += (feats[mm, nn] @ wtap) * delta
            out[m, n] = acc
    return out


def self_attention_ref(feats, coords, mask, w_q, w_k, w_v, w_r, kh=3, kw=3):
    """Per-pixel attention; softmax over valid in-image neighbors."""
    h, w, d = feats.shape
    d_out = w_v.shape[-1]
    out = np.zeros((h, w, d_out))
    for m in range(h):
        for n in range(w):
            q = feats[m, n] @ w_q
            logits, entries = [], []
            for dm, dn, mm, nn, inb in _neighbors(h, w, m, n, kh, kw):
                if not inb or not mask[mm, nn]:
                    continue
                gam = gamma_ref(coords[m, n], coords[mm, nn])
                logit = q @ (feats[mm, nn] @ w_k + gam @ w_r)
                logits.append(logit)
                entries.append((mm, nn))
            if not entries:
                continue
            logits = np.array(logits)
            e = np.exp(logits - logits.max())
            sm = e / e.sum()
            acc = np.zeros(d_out)
            for wgt, (mm, nn) in zip(sm, entries):
                delta = float(mask[mm, nn]) * float(mask[m, n])
                acc += wgt * (feats[mm, nn] @ w_v) * delta
            out[m, n] = acc
    return out


def _mlp_ref(x, w1, b1, w2, b2):
    return np.maximum(x @ w1 + b1, 0.0) @ w2 + b2


def pointnet_ref(feats, coords, mask, w1, b1, w2, b2, kh=3, kw=3,
                 encoding="polar"):
    """Per-neighbor MLP on [feature, encoding], elementwise max over
    valid neighbors; 0 where no term is valid."""
    h, w, d = feats.shape
    d_out = w2.shape[-1]
    out = np.zeros((h, w, d_out))
    for m in range(h):
        for n in range(w):
            best = None
            for dm, dn, mm, nn, inb in _neighbors(h, w, m, n, kh, kw):
                if not inb or not (mask[mm, nn] and mask[m, n]):
                    continue
                if encoding == "polar":
                    gam = gamma_ref(coords[m, n], coords[mm, nn])
                else:
                    gam = cartesian_ref(coords[mm, nn]) - cartesian_ref(coords[m, n])
                enc = _mlp_ref(np.concatenate([feats[mm, nn], gam]), w1, b1, w2, b2)
                best = enc if best is None else np.maximum(best, enc)
            if best is not None:
                out[m, n] = best
    return out


def edgeconv_ref(feats, coords, mask, w1, b1, w2, b2, kh=3, kw=3):
    """Pointnet with the center feature appended to the MLP input."""
    h, w, d = feats.shape
    d_out = w2.shape[-1]
    out = np.zeros((h, w, d_out))
    for m in range(h):
        for n in range(w):
            best = None
            for dm, dn, mm, nn, inb in _neighbors(h, w, m, n, kh, kw):
                if not inb or not (mask[mm, nn] and mask[m, n]):
                    continue
                gam = gamma_ref(coords[m, n], coords[mm, nn])
                x = np.concatenate([feats[mm, nn], feats[m, n], gam])
                enc = _mlp_ref(x, w1, b1, w2, b2)
                best = enc if best is None else np.maximum(best, enc)
            if best is not None:
                out[m, n] = best
    return out


# ---------------------------------------------------------------------------
# Numeric gradient and Monte-Carlo IoU oracles


def finite_diff_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function, elementwise."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    while not it.finished:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + h
        fp = f()
        x[idx] = old - h
        fm = f()
        x[idx] = old
        g[idx] = (fp - fm) / (2 * h)
        it.iternext()
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    na = np.linalg.norm(np.asarray(a).ravel())
    nb = np.linalg.norm(np.asarray(b).ravel())
    return float(np.linalg.norm((np.asarray(a) - np.asarray(b)).ravel())
                 / max(na + nb, 1e-8))


def mc_iou_bev(box_a, box_b, n: int = 10 ** 6, seed: int = 0) -> float:
    """Monte-Carlo top-down IoU by uniform point sampling."""
    rng = np.random.default_rng(seed)
    corners = np.concatenate([_corners(box_a), _corners(box_b)])
    lo, hi = corners.min(axis=0), corners.max(axis=0)
    pts = rng.uniform(lo, hi, size=(n, 2))
    ina = _in_bev(pts, box_a)
    inb = _in_bev(pts, box_b)
    union = (ina | inb).mean()
    if union == 0:
        return 0.0
    return float((ina & inb).mean() / union)


def mc_iou_3d(box_a, box_b, n: int = 10 ** 6, seed: int = 0) -> float:
    rng = np.random.default_rng(seed)
    lo_a, hi_a = _zspan(box_a)
    lo_b, hi_b = _zspan(box_b)
    corners = np.concatenate([_corners(box_a), _corners(box_b)])
    lo = np.array([*corners.min(axis=0), min(lo_a, lo_b)])
    hi = np.array([*corners.max(axis=0), max(hi_a, hi_b)])
    pts = rng.uniform(lo, hi, size=(n, 3))
    ina = _in_bev(pts[:, :2], box_a) & (lo_a <= pts[:, 2]) & (pts[:, 2] <= hi_a)
    inb = _in_bev(pts[:, :2], box_b) & (lo_b <= pts[:, 2]) & (pts[:, 2] <= hi_b)
    union = (ina | inb).mean()
    if union == 0:
        return 0.0
    return float((ina & inb).mean() / union)


def _corners(box):
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    hl, hw = box.length / 2, box.width / 2
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    return local @ np.array([[c, s], [-s, c]]) + box.center[:2]


def _in_bev(pts, box):
    d = pts - box.center[:2]
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    dx = c * d[:, 0] + s * d[:, 1]
    dy = -s * d[:, 0] + c * d[:, 1]
    return (np.abs(dx) <= box.length / 2) & (np.abs(dy) <= box.width / 2)


def _zspan(box):
    return box.center[2] - box.height / 2, box.center[2] + box.height / 2
