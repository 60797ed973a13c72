"""Rigid-sphere-vs-mesh forward simulation.

Symplectic Euler substeps with impulse-based contact (restitution on the
normal, Coulomb-clamped tangential scaling) and position projection out of
penetration. Contact queries go through a hierarchical uniform grid keyed by
camera-frame XZ cells so that per-substep cost stays flat at dataset scale.

Everything is deterministic: identical inputs produce bit-identical
trajectories.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from .geometry import TriangleMesh

GRAVITY = 9.81

# broadphase tuning: triangles go to the coarsest level where their XZ span
# fits in SPAN_CAP cells. Contact queries use a tight pad; when the tight scan
# comes up empty a wider scan runs once to certify a clearance margin that
# lets the loop skip narrowphase during ballistic flight. A scan with reach R
# that finds nothing certifies that every triangle is farther than R.
LEVEL_FACTOR = 4.0
SPAN_CAP = 4
TIGHT_PAD = 0.02
QUERY_PAD = 0.25


class SimulationConfigError(RuntimeError):
    """Raised when the substep budget cannot guarantee tunnel-free contact."""


def gravity_from_pitch(pitch_deg: float, magnitude: float = GRAVITY) -> np.ndarray:
    """World gravity expressed in the camera frame.

    Positive pitch tilts the optical axis downward by `pitch_deg` (the camera
    looks at the floor). Camera frame is x-right, y-down, z-forward.
    """
    t = math.radians(pitch_deg)
    return np.array([0.0, magnitude * math.cos(t), magnitude * math.sin(t)])


@dataclass
class InitialConditions:
    """Ball start state and material parameters (camera frame)."""

    position: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.8]))
    velocity: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 0.6]))
    radius: float = 0.1
    restitution: float = 0.5
    friction: float = 0.5

    def __post_init__(self):
        self.position = np.asarray(self.position, dtype=np.float64).reshape(3)
        self.velocity = np.asarray(self.velocity, dtype=np.float64).reshape(3)
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if not (0.0 <= self.restitution <= 1.0):
            raise ValueError(f"restitution must be in [0, 1], got {self.restitution}")
        if self.friction < 0:
            raise ValueError(f"friction must be >= 0, got {self.friction}")

    def to_dict(self) -> dict:
        return {
            "position": [float(v) for v in self.position],
            "velocity": [float(v) for v in self.velocity],
            "radius": self.radius,
            "restitution": self.restitution,
            "friction": self.friction,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InitialConditions":
        return cls(
            position=np.array(d["position"], dtype=np.float64),
            velocity=np.array(d["velocity"], dtype=np.float64),
            radius=float(d["radius"]),
            restitution=float(d["restitution"]),
            friction=float(d["friction"]),
        )


@dataclass
class SimConfig:
    """Sampling and integration settings.

    `gravity` may be given explicitly (camera frame); when None it is derived
    from `camera_pitch`.
    """

    sample_rate: float = 20.0
    duration: float = 1.5
    substeps_per_sample: int = 64
    camera_pitch: float = 30.0
    gravity: tuple[float, float, float] | None = None
    gravity_magnitude: float = GRAVITY

    def __post_init__(self):
        if self.sample_rate <= 0 or self.duration <= 0:
            raise ValueError("sample_rate and duration must be positive")
        if self.substeps_per_sample < 1:
            raise ValueError("substeps_per_sample must be >= 1")

    @property
    def n_samples(self) -> int:
        return int(round(self.duration * self.sample_rate))

    def gravity_vector(self) -> np.ndarray:
        if self.gravity is not None:
            return np.asarray(self.gravity, dtype=np.float64).reshape(3)
        return gravity_from_pitch(self.camera_pitch, self.gravity_magnitude)

    def to_dict(self) -> dict:
        return {
            "sample_rate": self.sample_rate,
            "duration": self.duration,
            "substeps_per_sample": self.substeps_per_sample,
            "camera_pitch": self.camera_pitch,
            "gravity": None if self.gravity is None else [float(g) for g in self.gravity],
            "gravity_magnitude": self.gravity_magnitude,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        g = d.get("gravity")
        return cls(
            sample_rate=float(d["sample_rate"]),
            duration=float(d["duration"]),
            substeps_per_sample=int(d["substeps_per_sample"]),
            camera_pitch=float(d["camera_pitch"]),
            gravity=None if g is None else tuple(float(x) for x in g),
            gravity_magnitude=float(d.get("gravity_magnitude", GRAVITY)),
        )


@dataclass
class Trajectory:
    """Sampled center-of-mass positions plus contact impulse times."""

    samples: np.ndarray          # (T, 3) float64
    sample_rate: float
    contact_times: np.ndarray    # (k,) float64, substep times of impulses

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64).reshape(-1, 3)
        self.contact_times = np.asarray(self.contact_times, dtype=np.float64).reshape(-1)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def times(self) -> np.ndarray:
        return (np.arange(len(self.samples)) + 1) / self.sample_rate


@dataclass
class SimTrace:
    """Substep-resolution diagnostics (positions after contact resolution)."""

    times: np.ndarray            # (n,) substep end times
    positions: np.ndarray        # (n, 3)
    velocities: np.ndarray       # (n, 3)
    impulse_times: np.ndarray    # (k,)
    impulse_vn_pre: np.ndarray   # (k,) normal speed into surface (< 0)
    impulse_vn_post: np.ndarray  # (k,) normal speed after restitution


# ---------------------------------------------------------------------------
# numba kernels
# ---------------------------------------------------------------------------

@njit(cache=True)
def _closest_point_tri(ax, ay, az, bx, by, bz, cx, cy, cz, px, py, pz):
    """Nearest point of the closed triangle (a, b, c) to p (Ericson's regions)."""
    abx = bx - ax; aby = by - ay; abz = bz - az
    acx = cx - ax; acy = cy - ay; acz = cz - az
    apx = px - ax; apy = py - ay; apz = pz - az

    d1 = abx * apx + aby * apy + abz * apz
    d2 = acx * apx + acy * apy + acz * apz
    if d1 <= 0.0 and d2 <= 0.0:
        return ax, ay, az

    bpx = px - bx; bpy = py - by; bpz = pz - bz
    d3 = abx * bpx + aby * bpy + abz * bpz
    d4 = acx * bpx + acy * bpy + acz * bpz
    if d3 >= 0.0 and d4 <= d3:
        return bx, by, bz

    vc = d1 * d4 - d3 * d2
    if vc <= 0.0 and d1 >= 0.0 and d3 <= 0.0:
        denom = d1 - d3
        if denom != 0.0:
            v = d1 / denom
            return ax + v * abx, ay + v * aby, az + v * abz
        return ax, ay, az

    cpx = px - cx; cpy = py - cy; cpz = pz - cz
    d5 = abx * cpx + aby * cpy + abz * cpz
    d6 = acx * cpx + acy * cpy + acz * cpz
    if d6 >= 0.0 and d5 <= d6:
        return cx, cy, cz

    vb = d5 * d2 - d1 * d6
    if vb <= 0.0 and d2 >= 0.0 and d6 <= 0.0:
        denom = d2 - d6
        if denom != 0.0:
            w = d2 / denom
            return ax + w * acx, ay + w * acy, az + w * acz
        return ax, ay, az

    va = d3 * d6 - d5 * d4
    if va <= 0.0 and (d4 - d3) >= 0.0 and (d5 - d6) >= 0.0:
        denom = (d4 - d3) + (d5 - d6)
        if denom != 0.0:
            w = (d4 - d3) / denom
            return bx + w * (cx - bx), by + w * (cy - by), bz + w * (cz - bz)
        return bx, by, bz

    s = va + vb + vc
    if s == 0.0:
        return ax, ay, az
    inv = 1.0 / s
    v = vb * inv
    w = vc * inv
    return ax + abx * v + acx * w, ay + aby * v + acy * w, az + abz * v + acz * w


@njit(cache=True)
def _query_nearest(
    tva, tvb, tvc,
    lv_x0, lv_z0, lv_inv, lv_nx, lv_nz, lv_cell_off,
    cell_start, cell_items,
    px, py, pz, reach,
):
    """Nearest mesh point to p among triangles within XZ reach of p.

    Returns (found, dist2, qx, qy, qz, tri). When not found, every triangle
    is certified to be farther than `reach` in the XZ plane.
    """
    best_d2 = 1e30
    best_qx = 0.0; best_qy = 0.0; best_qz = 0.0
    best_tri = -1
    for lv in range(lv_nx.shape[0]):
        nx = lv_nx[lv]
        nz = lv_nz[lv]
        if nx == 0 or nz == 0:
            continue
        inv = lv_inv[lv]
        x0 = lv_x0[lv]
        z0 = lv_z0[lv]
        ix0 = int(math.floor((px - reach - x0) * inv))
        ix1 = int(math.floor((px + reach - x0) * inv))
        iz0 = int(math.floor((pz - reach - z0) * inv))
        iz1 = int(math.floor((pz + reach - z0) * inv))
        if ix1 < 0 or iz1 < 0 or ix0 >= nx or iz0 >= nz:
            continue
        if ix0 < 0:
            ix0 = 0
        if iz0 < 0:
            iz0 = 0
        if ix1 >= nx:
            ix1 = nx - 1
        if iz1 >= nz:
            iz1 = nz - 1
        base = lv_cell_off[lv]
        for ix in range(ix0, ix1 + 1):
            row = base + ix * nz
            for iz in range(iz0, iz1 + 1):
                s = cell_start[row + iz]
                e = cell_start[row + iz + 1]
                for k in range(s, e):
                    t = cell_items[k]
                    qx, qy, qz = _closest_point_tri(
                        tva[t, 0], tva[t, 1], tva[t, 2],
                        tvb[t, 0], tvb[t, 1], tvb[t, 2],
                        tvc[t, 0], tvc[t, 1], tvc[t, 2],
                        px, py, pz,
                    )
                    dx = px - qx; dy = py - qy; dz = pz - qz
                    d2 = dx * dx + dy * dy + dz * dz
                    if d2 < best_d2:
                        best_d2 = d2
                        best_qx = qx; best_qy = qy; best_qz = qz
                        best_tri = t
    return best_tri >= 0, best_d2, best_qx, best_qy, best_qz, best_tri


@njit(cache=True)
def _contact_impulse(
    px, py, pz, vx, vy, vz,
    d2, qx, qy, qz,
    nfx, nfy, nfz,
    radius, restitution, friction,
):
    """Resolve the deepest contact: impulse + position projection.

    Returns updated (p, v), whether an impulse fired, and the pre/post normal
    speeds of the impulse.
    """
    dist = math.sqrt(d2)
    if dist > 1e-12:
        inv = 1.0 / dist
        nx = (px - qx) * inv
        ny = (py - qy) * inv
        nz = (pz - qz) * inv
    else:
        # center on the surface: fall back to the face normal, oriented
        # against the incoming velocity
        nx, ny, nz = nfx, nfy, nfz
        if nx * vx + ny * vy + nz * vz > 0.0:
            nx = -nx; ny = -ny; nz = -nz

    vn = vx * nx + vy * ny + vz * nz
    impulse = vn < 0.0
    vn_post = vn
    if impulse:
        vtx = vx - vn * nx
        vty = vy - vn * ny
        vtz = vz - vn * nz
        vt = math.sqrt(vtx * vtx + vty * vty + vtz * vtz)
        if vt > 1e-12:
            scale = 1.0 - friction * (1.0 + restitution) * (-vn) / vt
            if scale < 0.0:
                scale = 0.0
        else:
            scale = 0.0
        vn_post = -restitution * vn
        vx = vtx * scale + vn_post * nx
        vy = vty * scale + vn_post * ny
        vz = vtz * scale + vn_post * nz

    pen = radius - dist
    px += pen * nx
    py += pen * ny
    pz += pen * nz
    return px, py, pz, vx, vy, vz, impulse, vn, vn_post


@njit(cache=True)
def _run_sim(
    tva, tvb, tvc, tnormal,
    lv_x0, lv_z0, lv_inv, lv_nx, lv_nz, lv_cell_off,
    cell_start, cell_items,
    p0, v0,
    radius, restitution, friction,
    gvec, dt, n_samples, substeps,
    samples, trace_p, trace_v,
    contact_times, imp_vn,
):
    """Full substep loop. Returns (n_contacts, status, bad_substep).

    status 0 = ok, 1 = tunneling guard tripped (speed*dt >= radius/2).
    """
    px, py, pz = p0[0], p0[1], p0[2]
    vx, vy, vz = v0[0], v0[1], v0[2]
    gx, gy, gz = gvec[0], gvec[1], gvec[2]
    gmag = math.sqrt(gx * gx + gy * gy + gz * gz)
    guard2 = (0.5 * radius / dt) * (0.5 * radius / dt)
    total = n_samples * substeps
    n_contacts = 0
    skip = 0
    qpad = QUERY_PAD
    for s in range(total):
        vx += gx * dt
        vy += gy * dt
        vz += gz * dt
        sp2 = vx * vx + vy * vy + vz * vz
        if sp2 >= guard2:
            return n_contacts, 1, s
        px += vx * dt
        py += vy * dt
        pz += vz * dt

        if skip > 0:
            skip -= 1
        else:
            found, d2, qx, qy, qz, tri = _query_nearest(
                tva, tvb, tvc,
                lv_x0, lv_z0, lv_inv, lv_nx, lv_nz, lv_cell_off,
                cell_start, cell_items,
                px, py, pz, radius + TIGHT_PAD,
            )
            if found and d2 < radius * radius:
                px, py, pz, vx, vy, vz, imp, vn_pre, vn_post = _contact_impulse(
                    px, py, pz, vx, vy, vz,
                    d2, qx, qy, qz,
                    tnormal[tri, 0], tnormal[tri, 1], tnormal[tri, 2],
                    radius, restitution, friction,
                )
                if imp:
                    contact_times[n_contacts] = (s + 1) * dt
                    imp_vn[n_contacts, 0] = vn_pre
                    imp_vn[n_contacts, 1] = vn_post
                    n_contacts += 1
            else:
                # clearance certified: skip narrowphase while ballistic
                # motion cannot close the gap (margins are capped by the
                # scan reach, which bounds what the scan actually proves)
                if found:
                    margin = math.sqrt(d2) - radius
                    if margin > TIGHT_PAD:
                        margin = TIGHT_PAD
                else:
                    ffound, fd2, _, _, _, _ = _query_nearest(
                        tva, tvb, tvc,
                        lv_x0, lv_z0, lv_inv, lv_nx, lv_nz, lv_cell_off,
                        cell_start, cell_items,
                        px, py, pz, radius + qpad,
                    )
                    margin = qpad
                    if ffound:
                        fm = math.sqrt(fd2) - radius
                        if fm < margin:
                            margin = fm
                if margin > 0.0:
                    sp = math.sqrt(sp2)
                    if gmag > 0.0:
                        tau = (math.sqrt(sp * sp + 2.0 * gmag * margin) - sp) / gmag
                    elif sp > 0.0:
                        tau = margin / sp
                    else:
                        tau = 1e18
                    skip = int(tau / dt) - 1
                    if skip < 0:
                        skip = 0

        trace_p[s, 0] = px; trace_p[s, 1] = py; trace_p[s, 2] = pz
        trace_v[s, 0] = vx; trace_v[s, 1] = vy; trace_v[s, 2] = vz
        if (s + 1) % substeps == 0:
            j = (s + 1) // substeps - 1
            samples[j, 0] = px
            samples[j, 1] = py
            samples[j, 2] = pz
    return n_contacts, 0, -1


@njit(cache=True)
def _fill_grid(ix0, ix1, iz0, iz1, nz, entry_cell, entry_tri):
    n = 0
    for t in range(ix0.shape[0]):
        for ix in range(ix0[t], ix1[t] + 1):
            for iz in range(iz0[t], iz1[t] + 1):
                entry_cell[n] = ix * nz + iz
                entry_tri[n] = t
                n += 1
    return n


class MeshCollider:
    """Immutable broadphase structure over a triangle mesh.

    Uniform grids keyed by camera-frame XZ cells; triangles whose XZ span
    exceeds SPAN_CAP cells are promoted to coarser levels so that occlusion-
    edge slivers never flood the fine grid.
    """

    def __init__(self, mesh: TriangleMesh, cell_size: float | None = None):
        self.mesh = mesh
        v = mesh.vertices
        t = mesh.triangles
        m = len(t)
        self.tva = np.ascontiguousarray(v[t[:, 0]]) if m else np.zeros((0, 3))
        self.tvb = np.ascontiguousarray(v[t[:, 1]]) if m else np.zeros((0, 3))
        self.tvc = np.ascontiguousarray(v[t[:, 2]]) if m else np.zeros((0, 3))
        if m:
            n = np.cross(self.tvb - self.tva, self.tvc - self.tva)
            norm = np.linalg.norm(n, axis=1, keepdims=True)
            norm[norm < 1e-30] = 1.0
            self.tnormal = np.ascontiguousarray(n / norm)
        else:
            self.tnormal = np.zeros((0, 3))

        if m == 0:
            self._empty_grid()
            return

        min_x = np.minimum(np.minimum(self.tva[:, 0], self.tvb[:, 0]), self.tvc[:, 0])
        max_x = np.maximum(np.maximum(self.tva[:, 0], self.tvb[:, 0]), self.tvc[:, 0])
        min_z = np.minimum(np.minimum(self.tva[:, 2], self.tvb[:, 2]), self.tvc[:, 2])
        max_z = np.maximum(np.maximum(self.tva[:, 2], self.tvb[:, 2]), self.tvc[:, 2])
        span = np.maximum(max_x - min_x, max_z - min_z)

        if cell_size is None:
            cell_size = float(np.clip(2.0 * np.median(span), 0.05, 1.0))
        self.cell_size = cell_size

        # level per triangle: smallest level whose cells fit SPAN_CAP spans
        n_levels = 1
        sizes = [cell_size]
        while (span > SPAN_CAP * sizes[-1]).any() and n_levels < 8:
            sizes.append(sizes[-1] * LEVEL_FACTOR)
            n_levels += 1
        level = np.zeros(m, dtype=np.int64)
        for lv in range(1, n_levels):
            level[span > SPAN_CAP * sizes[lv - 1]] = lv

        x0 = float(min_x.min()) - 1e-9
        z0 = float(min_z.min()) - 1e-9
        x1 = float(max_x.max())
        z1 = float(max_z.max())

        lv_x0, lv_z0, lv_inv, lv_nx, lv_nz = [], [], [], [], []
        cell_off = [0]
        starts, items = [], []
        for lv in range(n_levels):
            size = sizes[lv]
            sel = np.flatnonzero(level == lv)
            nx = max(1, int(math.ceil((x1 - x0) / size)))
            nzc = max(1, int(math.ceil((z1 - z0) / size)))
            lv_x0.append(x0); lv_z0.append(z0)
            lv_inv.append(1.0 / size)
            lv_nx.append(nx); lv_nz.append(nzc)
            if len(sel) == 0:
                starts.append(np.zeros(nx * nzc + 1, dtype=np.int64))
                cell_off.append(cell_off[-1] + nx * nzc + 1)
                continue
            inv = 1.0 / size
            ix0 = np.clip(np.floor((min_x[sel] - x0) * inv).astype(np.int64), 0, nx - 1)
            ix1 = np.clip(np.floor((max_x[sel] - x0) * inv).astype(np.int64), 0, nx - 1)
            iz0 = np.clip(np.floor((min_z[sel] - z0) * inv).astype(np.int64), 0, nzc - 1)
            iz1 = np.clip(np.floor((max_z[sel] - z0) * inv).astype(np.int64), 0, nzc - 1)
            count = int(((ix1 - ix0 + 1) * (iz1 - iz0 + 1)).sum())
            entry_cell = np.empty(count, dtype=np.int64)
            entry_tri = np.empty(count, dtype=np.int64)
            _fill_grid(ix0, ix1, iz0, iz1, nzc, entry_cell, entry_tri)
            order = np.argsort(entry_cell, kind="stable")
            lv_items = sel[entry_tri[order]]
            counts = np.bincount(entry_cell, minlength=nx * nzc)
            start = np.zeros(nx * nzc + 1, dtype=np.int64)
            np.cumsum(counts, out=start[1:])
            start += sum(len(i) for i in items)
            starts.append(start)
            items.append(lv_items)
            cell_off.append(cell_off[-1] + nx * nzc + 1)

        self.lv_x0 = np.array(lv_x0)
        self.lv_z0 = np.array(lv_z0)
        self.lv_inv = np.array(lv_inv)
        self.lv_nx = np.array(lv_nx, dtype=np.int64)
        self.lv_nz = np.array(lv_nz, dtype=np.int64)
        self.lv_cell_off = np.array(cell_off[:-1], dtype=np.int64)
        self.cell_start = np.concatenate(starts) if starts else np.zeros(1, dtype=np.int64)
        self.cell_items = (
            np.concatenate(items) if items else np.zeros(0, dtype=np.int64)
        ).astype(np.int64)

    def _empty_grid(self):
        self.cell_size = 1.0
        self.lv_x0 = np.zeros(1)
        self.lv_z0 = np.zeros(1)
        self.lv_inv = np.ones(1)
        self.lv_nx = np.zeros(1, dtype=np.int64)
        self.lv_nz = np.zeros(1, dtype=np.int64)
        self.lv_cell_off = np.zeros(1, dtype=np.int64)
        self.cell_start = np.zeros(2, dtype=np.int64)
        self.cell_items = np.zeros(0, dtype=np.int64)

    def nearest(self, p: np.ndarray, reach: float):
        """Nearest mesh point within XZ `reach` of p, or None."""
        p = np.asarray(p, dtype=np.float64)
        found, d2, qx, qy, qz, tri = _query_nearest(
            self.tva, self.tvb, self.tvc,
            self.lv_x0, self.lv_z0, self.lv_inv, self.lv_nx, self.lv_nz,
            self.lv_cell_off, self.cell_start, self.cell_items,
            float(p[0]), float(p[1]), float(p[2]), float(reach),
        )
        if not found:
            return None
        return math.sqrt(d2), np.array([qx, qy, qz]), int(tri)


def closest_point_on_triangle(p: np.ndarray, tri: np.ndarray) -> np.ndarray:
    """Euclidean-nearest point of a closed triangle to p."""
    p = np.asarray(p, dtype=np.float64).reshape(3)
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    area = 0.5 * np.linalg.norm(np.cross(tri[1] - tri[0], tri[2] - tri[0]))
    if area <= 1e-12:
        raise ValueError(f"degenerate triangle (area {area:.3e} m^2)")
    q = _closest_point_tri(
        tri[0, 0], tri[0, 1], tri[0, 2],
        tri[1, 0], tri[1, 1], tri[1, 2],
        tri[2, 0], tri[2, 1], tri[2, 2],
        float(p[0]), float(p[1]), float(p[2]),
    )
    return np.array(q)


def resolve_contact(
    position: np.ndarray,
    velocity: np.ndarray,
    mesh: TriangleMesh | MeshCollider,
    radius: float,
    restitution: float,
    friction: float,
    dt: float,
) -> tuple[np.ndarray, np.ndarray, bool]:
    """Resolve the deepest sphere-vs-mesh contact, if any.

    Returns (position, velocity, contacted). `contacted` reports whether a
    contact impulse was applied (an approaching contact); pure position
    projection of a separating contact does not count.
    """
    p = np.asarray(position, dtype=np.float64).reshape(3).copy()
    v = np.asarray(velocity, dtype=np.float64).reshape(3).copy()
    speed = float(np.linalg.norm(v))
    if speed * dt >= radius / 2:
        raise SimulationConfigError(
            f"speed*dt = {speed * dt:.4f} m exceeds radius/2 = {radius / 2:.4f} m; "
            "increase substeps_per_sample"
        )
    collider = mesh if isinstance(mesh, MeshCollider) else MeshCollider(mesh)
    hit = collider.nearest(p, radius + QUERY_PAD)
    if hit is None:
        return p, v, False
    dist, q, tri = hit
    if dist >= radius:
        return p, v, False
    out = _contact_impulse(
        p[0], p[1], p[2], v[0], v[1], v[2],
        dist * dist, q[0], q[1], q[2],
        collider.tnormal[tri, 0], collider.tnormal[tri, 1], collider.tnormal[tri, 2],
        radius, restitution, friction,
    )
    px, py, pz, vx, vy, vz, imp, _, _ = out
    return np.array([px, py, pz]), np.array([vx, vy, vz]), bool(imp)


def simulate(
    mesh: TriangleMesh | MeshCollider,
    rho: InitialConditions,
    cfg: SimConfig,
    return_trace: bool = False,
):
    """Forward-simulate the ball over the mesh.

    Returns a Trajectory; with return_trace=True returns (Trajectory,
    SimTrace). An empty mesh means pure free fall.
    """
    collider = mesh if isinstance(mesh, MeshCollider) else MeshCollider(mesh)
    n_samples = cfg.n_samples
    substeps = cfg.substeps_per_sample
    dt = 1.0 / (cfg.sample_rate * substeps)
    total = n_samples * substeps

    samples = np.empty((n_samples, 3), dtype=np.float64)
    trace_p = np.empty((total, 3), dtype=np.float64)
    trace_v = np.empty((total, 3), dtype=np.float64)
    contact_times = np.empty(total, dtype=np.float64)
    imp_vn = np.empty((total, 2), dtype=np.float64)

    n_contacts, status, bad = _run_sim(
        collider.tva, collider.tvb, collider.tvc, collider.tnormal,
        collider.lv_x0, collider.lv_z0, collider.lv_inv,
        collider.lv_nx, collider.lv_nz, collider.lv_cell_off,
        collider.cell_start, collider.cell_items,
        rho.position, rho.velocity,
        rho.radius, rho.restitution, rho.friction,
        cfg.gravity_vector(), dt, n_samples, substeps,
        samples, trace_p, trace_v, contact_times, imp_vn,
    )
    if status == 1:
        raise SimulationConfigError(
            f"tunneling guard tripped at substep {bad} (t={bad * dt:.4f} s): "
            f"speed*dt exceeded radius/2; increase substeps_per_sample "
            f"(currently {substeps})"
        )
    traj = Trajectory(samples, cfg.sample_rate, contact_times[:n_contacts].copy())
    if not return_trace:
        return traj
    trace = SimTrace(
        times=(np.arange(total) + 1) * dt,
        positions=trace_p,
        velocities=trace_v,
        impulse_times=contact_times[:n_contacts].copy(),
        impulse_vn_pre=imp_vn[:n_contacts, 0].copy(),
        impulse_vn_post=imp_vn[:n_contacts, 1].copy(),
    )
    return traj, trace


def first_bounce_time(traj: Trajectory) -> float | None:
    """Time of the earliest contact impulse, or None if none occurred."""
    if len(traj.contact_times) == 0:
        return None
    return float(traj.contact_times.min())
