"""Synthetic desk-scale street scenes, sampled the way a spinning LiDAR would.

A scene is a bag of primitives: one ground plane, yawed boxes (cars), and
vertical cylinders (poles, modeled as open-ended tubes — no end caps).
Sampling casts the same H x W bin-center ray grid the projector uses and
keeps the nearest hit per ray inside [r_min, r_max], so a synthetic cloud
has at most one point per bin by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .rangeimage import PointCloud, ProjectionConfig, ray_grid
from .rng import substream


@dataclass(frozen=True)
class Plane:
    z: float


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    yaw: float


@dataclass(frozen=True)
class Cylinder:
    cx: float
    cy: float
    radius: float
    z_lo: float
    z_hi: float


Primitive = Plane | Box | Cylinder


@dataclass(frozen=True)
class SceneSpec:
    ground_z: float | None = -2.0
    n_boxes: int = 5
    n_cylinders: int = 4
    distance: tuple[float, float] = (6.0, 45.0)
    box_half_extents: tuple[tuple[float, float], ...] = (
        (0.8, 2.4),
        (0.7, 1.1),
        (0.6, 0.9),
    )
    cylinder_radius: tuple[float, float] = (0.08, 0.35)
    cylinder_height: tuple[float, float] = (2.5, 6.0)


def _hit_plane(dirs: np.ndarray, plane: Plane) -> np.ndarray:
    dz = dirs[:, 2]
    with np.errstate(divide="ignore"):
        t = np.where(dz != 0.0, plane.z / dz, np.inf)
    return np.where(t > 0.0, t, np.inf)


def _hit_box(dirs: np.ndarray, box: Box) -> np.ndarray:
    c, s = math.cos(box.yaw), math.sin(box.yaw)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box frame
    o = rot @ -np.asarray(box.center)
    d = dirs @ rot.T
    half = np.asarray(box.half)
    with np.errstate(divide="ignore", invalid="ignore"):
        t_a = (-half - o) / d
        t_b = (half - o) / d
    lo = np.fmin(t_a, t_b)  # fmin/fmax drop the NaNs from 0/0 on-face cases
    hi = np.fmax(t_a, t_b)
    t_near = lo.max(axis=1)
    t_far = hi.min(axis=1)
    hit = (t_far >= t_near) & (t_near > 0.0)
    return np.where(hit, t_near, np.inf)


def _hit_cylinder(dirs: np.ndarray, cyl: Cylinder) -> np.ndarray:
    dx, dy, dz = dirs[:, 0], dirs[:, 1], dirs[:, 2]
    a = dx * dx + dy * dy
    b = -2.0 * (dx * cyl.cx + dy * cyl.cy)
    c = cyl.cx**2 + cyl.cy**2 - cyl.radius**2
    disc = b * b - 4.0 * a * c
    best = np.full(len(dirs), np.inf)
    ok = (disc >= 0.0) & (a > 0.0)
    sq = np.sqrt(np.where(ok, disc, 0.0))
    for sign in (-1.0, 1.0):
        t = np.where(ok, (-b + sign * sq) / (2.0 * a), np.inf)
        z = t * dz
        valid = ok & (t > 0.0) & (z >= cyl.z_lo) & (z <= cyl.z_hi)
        best = np.where(valid & (t < best), t, best)
    return best


def cast_rays(dirs: np.ndarray, primitives: list[Primitive]) -> np.ndarray:
    """Nearest positive hit distance per unit ray from the origin; inf = miss."""
    flat = dirs.reshape(-1, 3)
    best = np.full(flat.shape[0], np.inf)
    for prim in primitives:
        if isinstance(prim, Plane):
            t = _hit_plane(flat, prim)
        elif isinstance(prim, Box):
            t = _hit_box(flat, prim)
        elif isinstance(prim, Cylinder):
            t = _hit_cylinder(flat, prim)
        else:
            raise TypeError(f"unknown primitive {type(prim).__name__}")
        best = np.minimum(best, t)
    return best.reshape(dirs.shape[:-1])


def scene_primitives(seed: int, spec: SceneSpec) -> list[Primitive]:
    """Draw a deterministic primitive bag for the seed."""
    rng = substream(seed, "synth-scene")
    prims: list[Primitive] = []
    ground = spec.ground_z
    if ground is not None:
        prims.append(Plane(ground))
    base = ground if ground is not None else 0.0
    for _ in range(spec.n_boxes):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(*spec.distance)
        half = tuple(rng.uniform(lo, hi) for lo, hi in spec.box_half_extents)
        yaw = rng.uniform(0.0, 2.0 * math.pi)
        center = (dist * math.cos(angle), dist * math.sin(angle), base + half[2])
        prims.append(Box(center, half, yaw))
    for _ in range(spec.n_cylinders):
        angle = rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(*spec.distance)
        radius = rng.uniform(*spec.cylinder_radius)
        height = rng.uniform(*spec.cylinder_height)
        prims.append(Cylinder(dist * math.cos(angle), dist * math.sin(angle), radius, base, base + height))
    return prims


def synth_scene(
    seed: int,
    spec: SceneSpec,
    cfg: ProjectionConfig,
    height: int,
    width: int,
) -> PointCloud:
    """Cast the bin-center ray grid against a seeded scene; nearest hit per ray."""
    dirs = ray_grid(cfg, height, width).reshape(-1, 3)
    t = cast_rays(dirs, scene_primitives(seed, spec))
    keep = np.isfinite(t) & (t >= cfg.r_min) & (t <= cfg.r_max)
    return PointCloud(dirs[keep] * t[keep, None])
