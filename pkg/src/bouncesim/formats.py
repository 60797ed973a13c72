"""File formats: PFM depth maps, intrinsics sidecars, trajectory JSON/CSV, PPM, OBJ.

All writers are deterministic byte-for-byte for identical inputs; tests rely
on comparing whole files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, DepthMap, TriangleMesh
from .simulator import Trajectory


def write_pfm(path: str | Path, values: np.ndarray) -> None:
    """Write a grayscale PFM (little-endian, scale -1.0, rows bottom-to-top)."""
    values = np.asarray(values)
    if values.ndim != 2:
        raise ValueError(f"PFM writer expects a 2D array, got shape {values.shape}")
    h, w = values.shape
    data = values.astype("<f4")[::-1, :]  # PFM stores the bottom row first
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(data.tobytes())


def read_pfm(path: str | Path) -> np.ndarray:
    """Read a grayscale PFM into a float64 (height, width) array."""
    with open(path, "rb") as f:
        magic = f.readline().strip()
        if magic != b"Pf":
            raise ValueError(f"{path}: not a grayscale PFM (magic {magic!r})")
        dims = f.readline().split()
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline())
        dtype = "<f4" if scale < 0 else ">f4"
        raw = f.read(4 * w * h)
        if len(raw) != 4 * w * h:
            raise ValueError(f"{path}: truncated PFM payload")
    data = np.frombuffer(raw, dtype=dtype).reshape(h, w)[::-1, :]
    return data.astype(np.float64)


def quantize_depth(values: np.ndarray) -> np.ndarray:
    """Round depth through float32 so in-memory values match a PFM round-trip."""
    return np.asarray(values, dtype=np.float64).astype(np.float32).astype(np.float64)


def write_intrinsics(path: str | Path, intr: CameraIntrinsics) -> None:
    Path(path).write_text(json.dumps(intr.to_dict(), sort_keys=True) + "\n")


def read_intrinsics(path: str | Path) -> CameraIntrinsics:
    return CameraIntrinsics.from_dict(json.loads(Path(path).read_text()))


def load_depth(pfm_path: str | Path, intrinsics_path: str | Path) -> DepthMap:
    return DepthMap(read_pfm(pfm_path), read_intrinsics(intrinsics_path))


def save_depth(pfm_path: str | Path, depth: DepthMap, intrinsics_path: str | Path | None = None) -> None:
    write_pfm(pfm_path, depth.values)
    if intrinsics_path is not None:
        write_intrinsics(intrinsics_path, depth.intrinsics)


def save_trajectory(path: str | Path, traj: Trajectory) -> None:
    obj = {
        "sample_rate": traj.sample_rate,
        "samples": [[float(x), float(y), float(z)] for x, y, z in traj.samples],
        "contact_times": [float(t) for t in traj.contact_times],
    }
    Path(path).write_text(json.dumps(obj) + "\n")


def load_trajectory(path: str | Path) -> Trajectory:
    obj = json.loads(Path(path).read_text())
    return Trajectory(
        samples=np.array(obj["samples"], dtype=np.float64).reshape(-1, 3),
        sample_rate=float(obj["sample_rate"]),
        contact_times=np.array(obj["contact_times"], dtype=np.float64),
    )


def save_trajectory_csv(path: str | Path, traj: Trajectory) -> None:
    """Plot-friendly CSV with one row (t, x, y, z) per sample."""
    lines = ["t,x,y,z"]
    for k, (x, y, z) in enumerate(traj.samples):
        t = (k + 1) / traj.sample_rate
        lines.append(f"{t!r},{x!r},{y!r},{z!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_obj(path: str | Path, mesh: TriangleMesh) -> None:
    """ASCII OBJ export for debugging meshes in external viewers."""
    lines = []
    for x, y, z in mesh.vertices:
        lines.append(f"v {x!r} {y!r} {z!r}")
    for a, b, c in mesh.triangles:
        lines.append(f"f {a + 1} {b + 1} {c + 1}")
    Path(path).write_text("\n".join(lines) + "\n")


def write_ppm(path: str | Path, rgb: np.ndarray) -> None:
    """Binary PPM (P6). `rgb` is (height, width, 3) uint8."""
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.dtype != np.uint8:
        raise ValueError(f"PPM writer expects (h, w, 3) uint8, got {rgb.shape} {rgb.dtype}")
    h, w = rgb.shape[:2]
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(rgb.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        if f.readline().strip() != b"P6":
            raise ValueError(f"{path}: not a binary PPM")
        # skip comment lines some tools insert
        line = f.readline()
        while line.startswith(b"#"):
            line = f.readline()
        w, h = map(int, line.split())
        maxval = int(f.readline())
        if maxval != 255:
            raise ValueError(f"{path}: unsupported maxval {maxval}")
        raw = f.read(3 * w * h)
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3).copy()


def write_image(path: str | Path, rgb: np.ndarray) -> None:
    """Write PPM by default; PNG when the path ends in .png (requires Pillow)."""
    path = Path(path)
    if path.suffix.lower() == ".png":
        try:
            from PIL import Image
        except ImportError as exc:  # pragma: no cover
            raise RuntimeError("PNG output requires Pillow; install the 'png' extra") from exc
        Image.fromarray(rgb, mode="RGB").save(path)
    else:
        write_ppm(path, rgb)
