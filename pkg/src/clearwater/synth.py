"""Analytic underwater scenes: closed-form renders and dataset generation.

The simulator evaluates the image formation model at exact ray-surface hits
(the delta-surface limit: all density concentrated on the surface), so its
output shares no quadrature machinery with the ray-marching renderer it is
used to validate. Per pixel with hit distance d:

    underwater:  L = S + exp(-2 beta d) * (E0 / d^2) * albedo * max(0, cos)
    clean:       L =                      (E0 / d^2) * albedo * max(0, cos)

Misses see pure backscatter (underwater) or black (clean).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from . import dataset as ds
from . import renderer as rd
from . import watermodel as wm

ORACLE_MODES = ("underwater", "clean")

# Checker colors, alternating bright/dark so most square edges carry a
# luminance step; index 0 is the saturated yellow patch.
PALETTE = np.array([
    [0.95, 0.90, 0.10],
    [0.10, 0.15, 0.45],
    [0.90, 0.85, 0.75],
    [0.55, 0.10, 0.10],
    [0.80, 0.80, 0.85],
    [0.10, 0.40, 0.15],
])


@dataclass(frozen=True)
class CheckerPlane:
    """Axis-aligned textured plane z = z0 with its normal facing -z.

    The checker spans [-half_extent, half_extent]^2 in x, y with squares^2
    cells colored from PALETTE; rays passing outside the extent miss.
    """

    z: float = 0.0
    half_extent: float = 1.8
    squares: int = 8

    def __post_init__(self):
        if self.half_extent <= 0 or self.squares < 1:
            raise ValueError("need positive extent and at least one square")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (self.z - origins[:, 2]) / dz
        t = np.where(dz > 1e-12, t, np.inf)
        hit = origins + np.where(np.isfinite(t), t, 0.0)[:, None] * dirs
        inside = (np.abs(hit[:, 0]) <= self.half_extent) & (np.abs(hit[:, 1]) <= self.half_extent)
        return np.where(inside & (t > 0), t, np.inf)

    def normal_at(self, pts: np.ndarray) -> np.ndarray:
        return np.tile(np.array([0.0, 0.0, -1.0]), (len(pts), 1))

    def albedo_at(self, pts: np.ndarray) -> np.ndarray:
        cell = 2.0 * self.half_extent / self.squares
        ix = np.clip(((pts[:, 0] + self.half_extent) / cell).astype(np.int64), 0, self.squares - 1)
        iy = np.clip(((pts[:, 1] + self.half_extent) / cell).astype(np.int64), 0, self.squares - 1)
        return PALETTE[(ix + iy) % len(PALETTE)]


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    albedo: tuple

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError("radius must be positive")
        if np.shape(self.center) != (3,) or np.shape(self.albedo) != (3,):
            raise ValueError("center and albedo must be 3-vectors")
        if np.any(np.asarray(self.albedo) < 0) or np.any(np.asarray(self.albedo) > 1):
            raise ValueError("albedo must lie in [0, 1]")

    def intersect(self, origins: np.ndarray, dirs: np.ndarray) -> np.ndarray:
        oc = origins - np.asarray(self.center)
        b = np.einsum("kd,kd->k", oc, dirs)
        c = np.einsum("kd,kd->k", oc, oc) - self.radius**2
        disc = b * b - c
        root = np.sqrt(np.maximum(disc, 0.0))
        t_near, t_far = -b - root, -b + root
        t = np.where(t_near > 1e-9, t_near, t_far)
        return np.where((disc > 0) & (t > 1e-9), t, np.inf)

    def normal_at(self, pts: np.ndarray) -> np.ndarray:
        return (pts - np.asarray(self.center)) / self.radius

    def albedo_at(self, pts: np.ndarray) -> np.ndarray:
        return np.tile(np.asarray(self.albedo, dtype=np.float64), (len(pts), 1))


@dataclass(frozen=True)
class AnalyticScene:
    surfaces: tuple

    def __post_init__(self):
        if not self.surfaces:
            raise ValueError("scene needs at least one surface")

    def trace(self, origins: np.ndarray, dirs: np.ndarray):
        """Closest hit across all surfaces.

        Returns (t, albedo, normal, hit) where misses carry t = inf and zero
        albedo/normal rows.
        """
        k = len(dirs)
        best_t = np.full(k, np.inf)
        albedo = np.zeros((k, 3))
        normal = np.zeros((k, 3))
        for surf in self.surfaces:
            t = surf.intersect(origins, dirs)
            closer = t < best_t
            if not np.any(closer):
                continue
            pts = origins[closer] + t[closer, None] * dirs[closer]
            albedo[closer] = surf.albedo_at(pts)
            normal[closer] = surf.normal_at(pts)
            best_t = np.where(closer, t, best_t)
        return best_t, albedo, normal, np.isfinite(best_t)


def gc_value(x):
    # WaterParams fields may arrive as recorded nodes; the oracle only needs values.
    return np.asarray(getattr(x, "value", x), dtype=np.float64)


def look_at(position, target) -> np.ndarray:
    """Camera-to-world pose with +z toward the target (x right, y down)."""
    position = np.asarray(position, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - position
    norm = np.linalg.norm(forward)
    if norm < 1e-9:
        raise ValueError("camera position coincides with the look target")
    forward = forward / norm
    # The y-down hint keeps the frame well conditioned for near-nadir views.
    right = np.cross(np.array([0.0, 1.0, 0.0]), forward)
    rn = np.linalg.norm(right)
    if rn < 1e-9:
        raise ValueError("viewing direction is parallel to the frame hint")
    right = right / rn
    down = np.cross(forward, right)
    pose = np.eye(4)
    pose[:3, 0], pose[:3, 1], pose[:3, 2], pose[:3, 3] = right, down, forward, position
    return pose


def orbit_trajectory(count: int, altitudes=(1.0, 3.0), orbit_radius: float = 0.45,
                     target=(0.0, 0.0, 0.0), plane_z: float = 0.0) -> list[np.ndarray]:
    """Poses circling above the scene while climbing from low to high altitude."""
    if count < 1:
        raise ValueError("need at least one pose")
    lo, hi = altitudes
    if not 0 < lo <= hi:
        raise ValueError(f"bad altitude range {altitudes}")
    poses = []
    for k in range(count):
        frac = k / max(count - 1, 1)
        alt = lo + (hi - lo) * frac
        theta = 2.0 * np.pi * k / count
        pos = np.array([orbit_radius * np.cos(theta),
                        orbit_radius * np.sin(theta),
                        plane_z - alt])
        poses.append(look_at(pos, target))
    return poses


def survey_trajectory(count: int, scan_alt: float = 1.0, overview_alt: float = 3.0,
                      scan_radius: float = 0.6, overview_radius: float = 0.45,
                      plane_z: float = 0.0) -> list[np.ndarray]:
    """A low nadir scanning ring plus a high overview orbit.

    The first half of the poses looks straight down while circling at
    scan_radius, the rest orbit high above the target. Every scanned patch is
    then also seen from the overview distance; observing the same surface
    point at two distances is what separates water attenuation from albedo,
    which a single climbing orbit only provides near its look-at point.
    """
    if count < 1:
        raise ValueError("need at least one pose")
    if not 0 < scan_alt or not 0 < overview_alt:
        raise ValueError(f"bad altitudes {(scan_alt, overview_alt)}")
    n_scan = (count + 1) // 2
    poses = []
    for k in range(n_scan):
        theta = 2.0 * np.pi * k / n_scan
        spot = np.array([scan_radius * np.cos(theta), scan_radius * np.sin(theta), plane_z])
        poses.append(look_at(spot - np.array([0.0, 0.0, scan_alt]), spot))
    n_over = count - n_scan
    for k in range(n_over):
        # offset azimuths so the rings interleave instead of stacking
        theta = 2.0 * np.pi * (k + 0.5) / n_over
        pos = np.array([overview_radius * np.cos(theta),
                        overview_radius * np.sin(theta),
                        plane_z - overview_alt])
        poses.append(look_at(pos, np.array([0.0, 0.0, plane_z])))
    return poses


def oracle_render(camera: rd.Camera, scene: AnalyticScene, water: wm.WaterParams,
                  light: rd.LightModel, mode: str) -> np.ndarray:
    """Closed-form per-pixel radiance at the exact ray-surface intersection."""
    if mode not in ORACLE_MODES:
        raise ValueError(f"mode must be one of {ORACLE_MODES}, got {mode!r}")
    rows, cols = np.meshgrid(np.arange(camera.height, dtype=np.float64),
                             np.arange(camera.width, dtype=np.float64), indexing="ij")
    dirs = rd.pixel_directions(camera, rows.ravel(), cols.ravel())
    origins = np.tile(camera.center, (len(dirs), 1))
    t, albedo, normal, hit = scene.trace(origins, dirs)

    out = np.zeros((len(dirs), 3))
    if np.any(hit):
        th = t[hit]
        cosp = np.maximum(0.0, np.einsum("kd,kd->k", normal[hit], -dirs[hit]))
        base = (light.intensity / th[:, None] ** 2) * albedo[hit] * cosp[:, None]
        if mode == "underwater":
            beta = gc_value(water.beta)
            out[hit] = np.exp(-2.0 * beta * th[:, None]) * base
        else:
            out[hit] = base
    if mode == "underwater":
        out += gc_value(water.backscatter)
    return out.reshape(camera.height, camera.width, 3)


def free_water_box(scene: AnalyticScene, poses) -> list | None:
    """A box strictly between the cameras and a plane-only scene, water by construction."""
    if not all(isinstance(s, CheckerPlane) for s in scene.surfaces):
        return None
    plane = scene.surfaces[0]
    min_alt = min(abs(p[2, 3] - plane.z) for p in poses)
    half = 0.4 * plane.half_extent
    return [[-half, -half, plane.z - 0.8 * min_alt],
            [half, half, plane.z - 0.2 * min_alt]]


def generate_dataset(scene: AnalyticScene, water: wm.WaterParams, light: rd.LightModel,
                     trajectory, width: int, height: int, out_dir: str, seed: int, *,
                     fov_deg: float = 50.0, near: float = 0.3, far: float = 4.5) -> str:
    """Write an oracle-rendered dataset (observations, manifest, ground truth).

    All outputs are deterministic functions of the arguments; the seed is
    echoed into the manifest so regenerated copies can be matched up.
    """
    if width < 1 or height < 1:
        raise ValueError(f"bad image size {width}x{height}")
    focal = 0.5 * width / np.tan(np.radians(fov_deg) / 2.0)
    os.makedirs(os.path.join(out_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(out_dir, "clean"), exist_ok=True)

    frames = []
    clean_files = []
    for i, pose in enumerate(trajectory):
        cam = rd.Camera(fx=focal, fy=focal, cx=(width - 1) / 2, cy=(height - 1) / 2,
                        width=width, height=height, pose=pose)
        name = f"frame_{i:03d}.png"
        ds.write_png16(os.path.join(out_dir, "images", name),
                       oracle_render(cam, scene, water, light, "underwater"))
        ds.write_png16(os.path.join(out_dir, "clean", name),
                       oracle_render(cam, scene, water, light, "clean"))
        frames.append({"file": f"images/{name}",
                       "transform": [float(v) for v in np.asarray(pose).reshape(-1)]})
        clean_files.append(f"clean/{name}")

    manifest = {
        "intrinsics": {"fx": focal, "fy": focal, "cx": (width - 1) / 2,
                       "cy": (height - 1) / 2, "width": width, "height": height},
        "near": near,
        "far": far,
        "light": {"e0": [float(v) for v in light.intensity]},
        "seed": int(seed),
        "frames": frames,
    }
    truth = {
        "beta": [float(v) for v in gc_value(water.beta)],
        "backscatter": [float(v) for v in gc_value(water.backscatter)],
        "clean_files": clean_files,
    }
    box = free_water_box(scene, list(trajectory))
    if box is not None:
        truth["free_water_box"] = box
    with open(os.path.join(out_dir, "dataset.json"), "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(out_dir, "truth.json"), "w") as fh:
        json.dump(truth, fh, indent=1)
    return out_dir
