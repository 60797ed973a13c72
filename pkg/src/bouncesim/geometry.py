"""Depth-map geometry: unprojection, grid meshing, projection, depth rescaling.

Conventions: camera frame is x-right, y-down (image row direction), z along
the optical axis. Depth values are z-depth in meters (distance along the
optical axis, not ray length).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CameraIntrinsics:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if not (0 <= self.cx < self.width) or not (0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside image {self.width}x{self.height}"
            )

    def to_dict(self) -> dict:
        return {
            "fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
            "width": self.width, "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CameraIntrinsics":
        return cls(fx=float(d["fx"]), fy=float(d["fy"]), cx=float(d["cx"]),
                   cy=float(d["cy"]), width=int(d["width"]), height=int(d["height"]))


@dataclass
class DepthMap:
    """Grid of z-depths in meters, row-major, with camera intrinsics."""

    values: np.ndarray  # (height, width) float64
    intrinsics: CameraIntrinsics

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"depth values must be 2D, got shape {self.values.shape}")
        h, w = self.values.shape
        if (w, h) != (self.intrinsics.width, self.intrinsics.height):
            raise ValueError(
                f"depth grid {w}x{h} does not match intrinsics "
                f"{self.intrinsics.width}x{self.intrinsics.height}"
            )

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def height(self) -> int:
        return self.values.shape[0]

    def validate(self) -> None:
        """Raise if any depth is non-finite or non-positive, naming the pixel."""
        flat = self.values.ravel()
        bad = ~np.isfinite(flat) | (flat <= 0)
        if bad.any():
            idx = int(np.argmax(bad))
            raise ValueError(
                f"invalid depth {flat[idx]!r} at pixel index {idx} "
                f"(row {idx // self.width}, col {idx % self.width})"
            )


@dataclass
class TriangleMesh:
    """Triangle soup in camera-frame meters."""

    vertices: np.ndarray  # (n, 3) float64
    triangles: np.ndarray  # (m, 3) int64

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64)
        if self.triangles.size and self.triangles.max() >= len(self.vertices):
            raise ValueError("triangle index out of range")

    def triangle_areas(self) -> np.ndarray:
        v = self.vertices
        t = self.triangles
        e0 = v[t[:, 1]] - v[t[:, 0]]
        e1 = v[t[:, 2]] - v[t[:, 0]]
        return 0.5 * np.linalg.norm(np.cross(e0, e1), axis=1)


def unproject_depth(depth: DepthMap) -> np.ndarray:
    """Back-project every pixel to a camera-frame 3D point.

    Returns an (width*height, 3) array in row-major pixel order. Pixel (u, v)
    with depth d maps to ((u-cx)*d/fx, (v-cy)*d/fy, d).
    """
    depth.validate()
    intr = depth.intrinsics
    h, w = depth.values.shape
    u = np.arange(w, dtype=np.float64)
    v = np.arange(h, dtype=np.float64)
    d = depth.values
    pts = np.empty((h, w, 3), dtype=np.float64)
    pts[:, :, 0] = (u[None, :] - intr.cx) * d / intr.fx
    pts[:, :, 1] = (v[:, None] - intr.cy) * d / intr.fy
    pts[:, :, 2] = d
    return pts.reshape(-1, 3)


def triangulate_grid(
    cloud: np.ndarray,
    width: int,
    height: int,
    discontinuity_threshold: float | None = None,
) -> TriangleMesh:
    """Connect a row-major grid point cloud into a triangle mesh.

    Every 2x2 pixel quad is split along its top-left to bottom-right diagonal
    into two triangles, wound so normals face the camera (-z). If a threshold
    is given, triangles whose max pairwise vertex z-difference exceeds it are
    dropped (occlusion-edge suppression; off by default).
    """
    cloud = np.asarray(cloud, dtype=np.float64)
    if cloud.shape != (width * height, 3):
        raise ValueError(f"cloud shape {cloud.shape} does not match {width}x{height} grid")
    if width < 2 or height < 2:
        return TriangleMesh(cloud, np.empty((0, 3), dtype=np.int64))

    idx = np.arange(width * height).reshape(height, width)
    a = idx[:-1, :-1].ravel()  # top-left
    b = idx[:-1, 1:].ravel()   # top-right
    c = idx[1:, :-1].ravel()   # bottom-left
    d = idx[1:, 1:].ravel()    # bottom-right
    # diagonal a-d; windings (a, d, b) and (a, c, d) give camera-facing normals
    tris = np.empty((2 * a.size, 3), dtype=np.int64)
    tris[0::2, 0], tris[0::2, 1], tris[0::2, 2] = a, d, b
    tris[1::2, 0], tris[1::2, 1], tris[1::2, 2] = a, c, d

    if discontinuity_threshold is not None:
        z = cloud[:, 2]
        tz = z[tris]
        span = tz.max(axis=1) - tz.min(axis=1)
        tris = tris[span <= discontinuity_threshold]

    return TriangleMesh(cloud, tris)


def project_point(p: np.ndarray, intr: CameraIntrinsics) -> np.ndarray:
    """Project camera-frame point(s) to pixel coordinates (u, v).

    Accepts a single (3,) point or an (n, 3) array; z must be positive.
    """
    p = np.asarray(p, dtype=np.float64)
    single = p.ndim == 1
    pts = p.reshape(-1, 3)
    z = pts[:, 2]
    if np.any(z <= 0):
        bad = int(np.argmax(z <= 0))
        raise ValueError(f"point {pts[bad]} is behind the camera (z={z[bad]})")
    uv = np.empty((len(pts), 2), dtype=np.float64)
    uv[:, 0] = intr.fx * pts[:, 0] / z + intr.cx
    uv[:, 1] = intr.fy * pts[:, 1] / z + intr.cy
    return uv[0] if single else uv


def rescale_depth(depth: DepthMap, z_min: float, z_max: float) -> DepthMap:
    """Affinely remap depth so its current (min, max) land on (z_min, z_max)."""
    if not (0 < z_min < z_max):
        raise ValueError(f"invalid target range ({z_min}, {z_max}); need 0 < z_min < z_max")
    cur_min = float(depth.values.min())
    cur_max = float(depth.values.max())
    if cur_max <= cur_min:
        raise ValueError(f"depth map is constant at {cur_min}; cannot rescale a degenerate range")
    t = (depth.values - cur_min) / (cur_max - cur_min)
    return DepthMap(z_min + t * (z_max - z_min), depth.intrinsics)


def depth_to_mesh(depth: DepthMap, discontinuity_threshold: float | None = None) -> TriangleMesh:
    """Unproject a depth map and triangulate the resulting grid cloud."""
    cloud = unproject_depth(depth)
    return triangulate_grid(cloud, depth.width, depth.height, discontinuity_threshold)
