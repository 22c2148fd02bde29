"""Spherical/Cartesian geometry, pairwise positional encoding, 7-DoF boxes.

Angle convention used everywhere (fixed once, here): a spherical triple
(theta, phi, r) maps to Cartesian as

    x = r * cos(theta) * cos(phi)
    y = r * cos(theta) * sin(phi)
    z = r * sin(theta)

so theta is the angle out of the x-y plane (range-image rows / beams)
and phi the rotation about z (columns / scan steps).

Array functions take (..., 3) float arrays with the last axis ordered
(theta, phi, r) or (x, y, z); the small dataclasses are convenience
wrappers for scalar use.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "SphericalCoord", "CartesianVec3", "Box7DoF",
    "wrap_angle", "spherical_to_cartesian", "cartesian_to_spherical",
    "positional_encoding", "cartesian_displacement",
    "box_corners_bev", "points_in_box",
]


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - (np.pi - np.asarray(a, dtype=np.float64)) % (2.0 * np.pi)


@dataclass(frozen=True)
class SphericalCoord:
    theta: float
    phi: float
    r: float

    def as_array(self) -> np.ndarray:
        return np.array([self.theta, self.phi, self.r], dtype=np.float64)


@dataclass(frozen=True)
class CartesianVec3:
    x: float
    y: float
    z: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def _as_triplet(p) -> np.ndarray:
    if isinstance(p, (SphericalCoord, CartesianVec3)):
        return p.as_array()
    return np.asarray(p, dtype=np.float64)


def spherical_to_cartesian(p) -> np.ndarray:
    """(theta, phi, r) -> (x, y, z), vectorized over leading axes."""
    p = _as_triplet(p)
    th, ph, r = p[..., 0], p[..., 1], p[..., 2]
    ct = np.cos(th)
    return np.stack([r * ct * np.cos(ph), r * ct * np.sin(ph), r * np.sin(th)], axis=-1)


def cartesian_to_spherical(p) -> np.ndarray:
    """(x, y, z) -> (theta, phi, r); inverse of spherical_to_cartesian for r > 0."""
    p = _as_triplet(p)
    x, y, z = p[..., 0], p[..., 1], p[..., 2]
    r = np.sqrt(x * x + y * y + z * z)
    with np.errstate(invalid="ignore"):
        th = np.arcsin(np.clip(np.divide(z, r, out=np.zeros_like(r), where=r > 0), -1.0, 1.0))
    ph = np.arctan2(y, x)
    return np.stack([th, ph, r], axis=-1)


def positional_encoding(x, xp) -> np.ndarray:
    """Pairwise offset of xp relative to x in a sensor-centered oblique frame.

    With d_theta = theta' - theta and d_phi = phi' - phi:

        ( r' * cos(d_theta) * cos(d_phi) - r,
          r' * cos(d_theta) * sin(d_phi),
          r' * sin(d_theta) )

    Equals spherical_to_cartesian((d_theta, d_phi, r')) minus
    spherical_to_cartesian((0, 0, r)). Asymmetric under argument swap;
    depends only on coordinates, never on layer parameters, so it can
    be precomputed once per sample.
    """
    x = _as_triplet(x)
    xp = _as_triplet(xp)
    dth = xp[..., 0] - x[..., 0]
    dph = xp[..., 1] - x[..., 1]
    rp = xp[..., 2]
    cdt = np.cos(dth)
    return np.stack([
        rp * cdt * np.cos(dph) - x[..., 2],
        rp * cdt * np.sin(dph),
        rp * np.sin(dth),
    ], axis=-1)


def cartesian_displacement(x, xp) -> np.ndarray:
    """World-frame displacement between two spherical points (ablation mode)."""
    return spherical_to_cartesian(xp) - spherical_to_cartesian(x)


@dataclass(frozen=True)
class Box7DoF:
    """Upright 3D box: center, extents, yaw about z (wrapped to (-pi, pi])."""

    center: np.ndarray
    length: float
    width: float
    height: float
    yaw: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64).reshape(3))
        if not (self.length > 0 and self.width > 0 and self.height > 0):
            raise ValueError(
                f"box extents must be positive, got {(self.length, self.width, self.height)}")
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, self.length, self.width, self.height, self.yaw])

    @staticmethod
    def from_array(a) -> "Box7DoF":
        a = np.asarray(a, dtype=np.float64).reshape(7)
        return Box7DoF(a[:3], a[3], a[4], a[5], a[6])

    @property
    def volume(self) -> float:
        return self.length * self.width * self.height

    @property
    def bev_area(self) -> float:
        return self.length * self.width


def box_corners_bev(box: Box7DoF) -> np.ndarray:
    """(4, 2) corners of the yaw-rotated length x width footprint, CCW."""
    hl, hw = box.length / 2.0, box.width / 2.0
    local = np.array([[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]])
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    rot = np.array([[c, -s], [s, c]])
    return local @ rot.T + box.center[:2]


def points_in_box(points: np.ndarray, box: Box7DoF, atol: float = 0.0) -> np.ndarray:
    """Boolean mask of (..., 3) points inside the box (boundary inclusive)."""
    points = np.asarray(points, dtype=np.float64)
    d = points - box.center
    c, s = np.cos(box.yaw), np.sin(box.yaw)
    # rotate into the box frame (inverse yaw)
    dx = c * d[..., 0] + s * d[..., 1]
    dy = -s * d[..., 0] + c * d[..., 1]
    return (
        (np.abs(dx) <= box.length / 2.0 + atol)
        & (np.abs(dy) <= box.width / 2.0 + atol)
        & (np.abs(d[..., 2]) <= box.height / 2.0 + atol)
    )
