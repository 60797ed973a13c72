"""Procedural scenes, depth rendering, depth corruption, and dataset builds.

Scenes are a floor plane plus yawed boxes and ramps in a world frame
(y up, floor at a fixed height). The camera sits at a sampled height, pitched
downward, and everything downstream (meshes, trajectories) lives in the
camera frame. Corruption emulates monocular depth-prediction failure modes:
global scale/offset errors, a smooth low-frequency bias field, per-pixel
noise, and blur.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .formats import quantize_depth, save_depth, save_trajectory, write_intrinsics
from .geometry import CameraIntrinsics, DepthMap, depth_to_mesh
from .simulator import InitialConditions, SimConfig, simulate


class GenerationError(RuntimeError):
    """Raised when scene placement cannot be satisfied within retry bounds."""


@dataclass
class Obstacle:
    """Axis-sized box or ramp, yawed about world Y, base resting on the floor."""

    kind: str                 # "box" or "ramp"
    x: float                  # world x of base center
    z: float                  # world z of base center
    size: tuple[float, float, float]   # (sx, sy, sz) full extents
    yaw: float                # radians

    def to_dict(self) -> dict:
        return {"kind": self.kind, "x": self.x, "z": self.z,
                "size": list(self.size), "yaw": self.yaw}


@dataclass
class Scene:
    floor: float              # world-frame floor height (y)
    obstacles: list[Obstacle]
    camera_height: float      # camera y above world origin
    camera_pitch: float       # degrees, positive = looking down

    def to_dict(self) -> dict:
        return {
            "floor": self.floor,
            "obstacles": [o.to_dict() for o in self.obstacles],
            "camera_height": self.camera_height,
            "camera_pitch": self.camera_pitch,
        }


@dataclass
class SceneParams:
    """Knobs for the procedural generator."""

    obstacle_count: tuple[int, int] = (2, 6)
    box_xz: tuple[float, float] = (0.2, 1.2)      # footprint extent range
    box_height: tuple[float, float] = (0.15, 1.0)
    ramp_fraction: float = 0.35
    min_depth: float = 0.5                         # nearest allowed obstacle face
    max_depth: float = 10.0                        # far clamp for rendering
    camera_height: tuple[float, float] = (1.1, 1.7)
    camera_pitch: tuple[float, float] = (30.0, 42.0)
    min_median_depth: float = 1.5                  # camera viewpoint filter
    ball_offset: float = 0.8                       # ball start distance on axis
    ball_radius: float = 0.1
    placement_retries: int = 60
    scene_retries: int = 40


def _rot_c2w(pitch_deg: float) -> np.ndarray:
    """Camera-to-world rotation. Camera: x-right, y-down, z-forward."""
    t = math.radians(pitch_deg)
    return np.array([
        [1.0, 0.0, 0.0],
        [0.0, -math.cos(t), -math.sin(t)],
        [0.0, -math.sin(t), math.cos(t)],
    ]).T  # columns are camera axes in world coords


def ball_start_world(scene: Scene, offset: float) -> np.ndarray:
    t = math.radians(scene.camera_pitch)
    return np.array([0.0, scene.camera_height - offset * math.sin(t), offset * math.cos(t)])


def _point_in_obstacle(p: np.ndarray, ob: Obstacle, floor: float, pad: float) -> bool:
    c, s = math.cos(ob.yaw), math.sin(ob.yaw)
    dx = p[0] - ob.x
    dz = p[2] - ob.z
    lx = c * dx + s * dz
    lz = -s * dx + c * dz
    ly = p[1] - floor
    hx, hy, hz = ob.size[0] / 2 + pad, ob.size[1] + pad, ob.size[2] / 2 + pad
    return abs(lx) <= hx and -pad <= ly <= hy and abs(lz) <= hz


def generate_scene(seed: int, params: SceneParams) -> Scene:
    """Sample a scene, deterministic in `seed`."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    pitch = rng.uniform(*params.camera_pitch)
    height = rng.uniform(*params.camera_height)
    scene = Scene(floor=0.0, obstacles=[], camera_height=height, camera_pitch=pitch)
    n_obstacles = int(rng.integers(params.obstacle_count[0], params.obstacle_count[1] + 1))
    theta = math.radians(pitch)
    ball = ball_start_world(scene, params.ball_offset)

    for _ in range(n_obstacles):
        placed = False
        for _ in range(params.placement_retries):
            kind = "ramp" if rng.uniform() < params.ramp_fraction else "box"
            sx = rng.uniform(*params.box_xz)
            sz = rng.uniform(*params.box_xz)
            sy = rng.uniform(*params.box_height)
            yaw = rng.uniform(0.0, 2.0 * math.pi)
            half_diag = 0.5 * math.hypot(sx, sz)
            zc_lo = params.min_depth + half_diag + 0.1
            zc_hi = 0.85 * params.max_depth
            if zc_lo >= zc_hi:
                continue
            z_cam = rng.uniform(zc_lo, zc_hi)
            # lateral position as a fraction of the frustum half-width at that
            # depth (default intrinsics: half-width/depth ~ 0.67)
            u_frac = rng.uniform(-0.55, 0.55)
            x_world = u_frac * z_cam
            z_world = z_cam * math.cos(theta)
            ob = Obstacle(kind=kind, x=x_world, z=z_world, size=(sx, sy, sz), yaw=yaw)
            if _point_in_obstacle(ball, ob, scene.floor, params.ball_radius + 0.05):
                continue
            scene.obstacles.append(ob)
            placed = True
            break
        if not placed:
            raise GenerationError(
                f"could not place obstacle after {params.placement_retries} retries (seed {seed})"
            )
    return scene


def render_depth(scene: Scene, intr: CameraIntrinsics, max_depth: float = 10.0) -> DepthMap:
    """Ray-cast z-depth of the nearest hit per pixel; misses clamp to max_depth."""
    w, h = intr.width, intr.height
    u = (np.arange(w) - intr.cx) / intr.fx
    v = (np.arange(h) - intr.cy) / intr.fy
    uu, vv = np.meshgrid(u, v)
    dirs_cam = np.stack([uu, vv, np.ones_like(uu)], axis=-1).reshape(-1, 3)
    rot = _rot_c2w(scene.camera_pitch)
    dirs = dirs_cam @ rot.T
    origin = np.array([0.0, scene.camera_height, 0.0])

    t_best = np.full(len(dirs), np.inf)

    dy = dirs[:, 1]
    down = dy < -1e-12
    t_floor = np.where(down, (scene.floor - origin[1]) / np.where(down, dy, 1.0), np.inf)
    t_best = np.minimum(t_best, np.where(t_floor > 1e-9, t_floor, np.inf))

    for ob in scene.obstacles:
        t_ob = _ray_obstacle(origin, dirs, ob, scene.floor)
        t_best = np.minimum(t_best, t_ob)

    # ray parameter equals camera z-depth because dirs_cam has z = 1
    depth = np.where(np.isfinite(t_best), np.minimum(t_best, max_depth), max_depth)
    return DepthMap(quantize_depth(depth.reshape(h, w)), intr)


def _ray_obstacle(origin: np.ndarray, dirs: np.ndarray, ob: Obstacle, floor: float) -> np.ndarray:
    """Entry parameter of each ray into the obstacle's convex volume (inf = miss)."""
    c, s = math.cos(ob.yaw), math.sin(ob.yaw)
    # into local frame: translate base center, rotate -yaw, shift floor to y=0
    ox = origin[0] - ob.x
    oz = origin[2] - ob.z
    o_local = np.array([c * ox + s * oz, origin[1] - floor, -s * ox + c * oz])
    d_local = np.empty_like(dirs)
    d_local[:, 0] = c * dirs[:, 0] + s * dirs[:, 2]
    d_local[:, 1] = dirs[:, 1]
    d_local[:, 2] = -s * dirs[:, 0] + c * dirs[:, 2]

    sx, sy, sz = ob.size
    planes = [
        (np.array([1.0, 0.0, 0.0]), sx / 2),
        (np.array([-1.0, 0.0, 0.0]), sx / 2),
        (np.array([0.0, -1.0, 0.0]), 0.0),
        (np.array([0.0, 1.0, 0.0]), sy),
        (np.array([0.0, 0.0, 1.0]), sz / 2),
        (np.array([0.0, 0.0, -1.0]), sz / 2),
    ]
    if ob.kind == "ramp":
        # slope from full height at z = -sz/2 down to the floor at z = +sz/2
        planes[3] = (np.array([0.0, 1.0, sy / sz]), sy / 2)

    t_enter = np.full(len(dirs), 1e-9)
    t_exit = np.full(len(dirs), np.inf)
    alive = np.ones(len(dirs), dtype=bool)
    for n, b in planes:
        denom = d_local @ n
        num = b - (o_local @ n)
        pos = denom > 1e-15
        neg = denom < -1e-15
        para = ~pos & ~neg
        with np.errstate(divide="ignore", invalid="ignore"):
            t = num / denom
        t_exit = np.where(pos, np.minimum(t_exit, t), t_exit)
        t_enter = np.where(neg, np.maximum(t_enter, t), t_enter)
        alive &= ~(para & (num < 0))
    hit = alive & (t_enter <= t_exit)
    return np.where(hit, t_enter, np.inf)


@dataclass
class NoiseModel:
    """Depth-corruption model; the default constructor is the identity.

    `scale`/`offset` are the concrete values used by corrupt_depth. The
    *_sigma / *_range fields describe per-record randomization applied by
    build_dataset (sample_record); they are zero / None for a fixed model.
    """

    scale: float = 1.0
    offset: float = 0.0
    bias_amplitude: float = 0.0
    bias_frequency: float = 2.0
    pixel_sigma: float = 0.0
    blur_radius: float = 0.0
    scale_log_sigma: float = 0.0
    scale_range: tuple[float, float] | None = None
    offset_sigma: float = 0.0

    def __post_init__(self):
        if self.scale <= 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if self.pixel_sigma < 0 or self.blur_radius < 0:
            raise ValueError("pixel_sigma and blur_radius must be >= 0")

    def sample_record(self, rng: np.random.Generator) -> "NoiseModel":
        """Draw the concrete per-record corruption."""
        if self.scale_range is not None:
            scale = float(rng.uniform(*self.scale_range))
        elif self.scale_log_sigma > 0:
            scale = float(self.scale * math.exp(rng.normal(0.0, self.scale_log_sigma)))
        else:
            scale = self.scale
        offset = self.offset
        if self.offset_sigma > 0:
            offset = float(offset + rng.normal(0.0, self.offset_sigma))
        return NoiseModel(
            scale=scale, offset=offset,
            bias_amplitude=self.bias_amplitude, bias_frequency=self.bias_frequency,
            pixel_sigma=self.pixel_sigma, blur_radius=self.blur_radius,
        )

    @classmethod
    def default_corruption(cls) -> "NoiseModel":
        """All four failure modes at visible rates."""
        return cls(scale_log_sigma=0.25, offset_sigma=0.1,
                   bias_amplitude=0.15, bias_frequency=2.0,
                   pixel_sigma=0.03, blur_radius=2.0)

    @classmethod
    def scale_dominant(cls) -> "NoiseModel":
        """Global-scale errors (uniform in [0.5, 2]) plus faint pixel noise."""
        return cls(scale_range=(0.5, 2.0), pixel_sigma=0.01)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scale_range"] = None if self.scale_range is None else list(self.scale_range)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseModel":
        d = dict(d)
        if d.get("scale_range") is not None:
            d["scale_range"] = tuple(d["scale_range"])
        return cls(**d)


def corrupt_depth(depth: DepthMap, nm: NoiseModel, seed: int) -> DepthMap:
    """Apply blur(scale*depth + offset + bias + white noise), clamped > 0.01 m."""
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed))
    h, w = depth.values.shape
    out = nm.scale * depth.values + nm.offset
    if nm.bias_amplitude != 0.0:
        alpha = rng.uniform(0.0, 2.0 * math.pi)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        uu = (np.arange(w) + 0.5) / w
        vv = (np.arange(h) + 0.5) / h
        wave = 2.0 * math.pi * nm.bias_frequency * (
            math.cos(alpha) * uu[None, :] + math.sin(alpha) * vv[:, None]
        )
        out = out + nm.bias_amplitude * np.sin(wave + phase)
    if nm.pixel_sigma > 0.0:
        out = out + rng.normal(0.0, nm.pixel_sigma, size=(h, w))
    if nm.blur_radius > 0.0:
        out = gaussian_filter(out, sigma=nm.blur_radius, mode="nearest")
    out = np.maximum(out, 0.01)
    return DepthMap(quantize_depth(out), depth.intrinsics)


def default_intrinsics(resolution: int = 64) -> CameraIntrinsics:
    """Square pinhole camera with a ~67 degree field of view."""
    f = 0.75 * resolution
    c = (resolution - 1) / 2.0
    return CameraIntrinsics(fx=f, fy=f, cx=c, cy=c, width=resolution, height=resolution)


@dataclass
class DatasetConfig:
    n: int = 3000
    seed: int = 0
    split: tuple[float, float, float] = (0.8, 0.1, 0.1)
    resolution: int = 64
    scene: SceneParams = field(default_factory=SceneParams)
    noise: NoiseModel = field(default_factory=NoiseModel)
    substeps_per_sample: int = 64
    sample_rate: float = 20.0
    duration: float = 1.5

    def intrinsics(self) -> CameraIntrinsics:
        return default_intrinsics(self.resolution)


def _scene_and_depth(record_seed: int, params: SceneParams, intr: CameraIntrinsics):
    """Scene passing the viewpoint filter (median rendered depth floor)."""
    for attempt in range(params.scene_retries):
        scene = generate_scene(record_seed + attempt * 1_000_003, params)
        gt = render_depth(scene, intr, params.max_depth)
        if float(np.median(gt.values)) >= params.min_median_depth:
            return scene, gt
    raise GenerationError(
        f"no viewpoint with median depth >= {params.min_median_depth} m "
        f"after {params.scene_retries} scenes (seed {record_seed})"
    )


def _record_seeds(master_seed: int, index: int) -> tuple[int, int, int]:
    ss = np.random.SeedSequence(entropy=master_seed, spawn_key=(index,))
    s = ss.generate_state(3)
    return int(s[0]), int(s[1]), int(s[2])


def generate_record(cfg: DatasetConfig, index: int) -> dict:
    """Build one dataset record in memory. Deterministic in (cfg.seed, index)."""
    scene_seed, nm_seed, corrupt_seed = _record_seeds(cfg.seed, index)
    intr = cfg.intrinsics()
    scene, gt_depth = _scene_and_depth(scene_seed, cfg.scene, intr)
    nm = cfg.noise.sample_record(np.random.default_rng(np.random.SeedSequence(entropy=nm_seed)))
    noisy_depth = corrupt_depth(gt_depth, nm, corrupt_seed)

    rho = InitialConditions(radius=cfg.scene.ball_radius,
                            position=np.array([0.0, 0.0, cfg.scene.ball_offset]))
    sim = SimConfig(sample_rate=cfg.sample_rate, duration=cfg.duration,
                    substeps_per_sample=cfg.substeps_per_sample,
                    camera_pitch=scene.camera_pitch)
    gt_traj = simulate(depth_to_mesh(gt_depth), rho, sim)
    init_traj = simulate(depth_to_mesh(noisy_depth), rho, sim)
    return {
        "id": f"{index:06d}",
        "scene": scene,
        "gt_depth": gt_depth,
        "noisy_depth": noisy_depth,
        "gt_trajectory": gt_traj,
        "initial_trajectory": init_traj,
        "rho": rho,
        "sim": sim,
        "noise": nm,
        "seed": scene_seed,
    }


def _write_record(out_dir: str, rec: dict) -> None:
    rdir = Path(out_dir) / "records" / rec["id"]
    rdir.mkdir(parents=True, exist_ok=True)
    save_depth(rdir / "gt.pfm", rec["gt_depth"])
    save_depth(rdir / "noisy.pfm", rec["noisy_depth"])
    write_intrinsics(rdir / "intrinsics.json", rec["gt_depth"].intrinsics)
    save_trajectory(rdir / "gt_traj.json", rec["gt_trajectory"])
    save_trajectory(rdir / "init_traj.json", rec["initial_trajectory"])
    meta = {
        "id": rec["id"],
        "seed": rec["seed"],
        "rho": rec["rho"].to_dict(),
        "sim": rec["sim"].to_dict(),
        "noise": rec["noise"].to_dict(),
        "scene": rec["scene"].to_dict(),
    }
    (rdir / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")


def _worker(args) -> str:
    cfg, index, out_dir = args
    rec = generate_record(cfg, index)
    _write_record(out_dir, rec)
    return rec["id"]


def build_dataset(cfg: DatasetConfig, out_dir: str | Path, workers: int | None = None) -> dict:
    """Generate n records plus a manifest; byte-identical across reruns."""
    if abs(sum(cfg.split) - 1.0) > 1e-9:
        raise ValueError(f"split fractions must sum to 1, got {cfg.split}")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    if workers is None:
        workers = os.cpu_count() or 1

    jobs = [(cfg, i, str(out_dir)) for i in range(cfg.n)]
    if workers <= 1 or cfg.n < 4:
        ids = [_worker(j) for j in jobs]
    else:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            ids = list(pool.map(_worker, jobs, chunksize=max(1, cfg.n // (workers * 8))))

    n_train = int(round(cfg.split[0] * cfg.n))
    n_val = int(round(cfg.split[1] * cfg.n))
    splits = {
        "train": ids[:n_train],
        "val": ids[n_train:n_train + n_val],
        "test": ids[n_train + n_val:],
    }
    manifest = {
        "n": cfg.n,
        "seed": cfg.seed,
        "split": list(cfg.split),
        "resolution": cfg.resolution,
        "max_depth": cfg.scene.max_depth,
        "noise": cfg.noise.to_dict(),
        "sample_rate": cfg.sample_rate,
        "duration": cfg.duration,
        "substeps_per_sample": cfg.substeps_per_sample,
        "splits": splits,
    }
    (out_dir / "manifest.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    return manifest
