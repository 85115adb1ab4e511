"""Virtual depth camera and analytic ray-cast rendering of tabletop scenes."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geometry import Pose, furthest_point_sample, rotation_z
from ..primitives import Box, ray_cast

TABLE_ID = 0
OCCLUDER_ID = -1


class RenderError(RuntimeError):
    """The camera sees too little of the scene."""


@dataclass(frozen=True)
class VirtualCamera:
    """Pinhole camera; ``pose`` maps camera coordinates (x right, y down, z forward) to world."""
    pose: Pose
    width: int = 512
    height: int = 512
    fx: float = 491.7
    fy: float = 491.7
    cx: float = 256.0
    cy: float = 256.0

    def rays(self):
        """World-frame origins and unit directions through every pixel centre."""
        u, v = np.meshgrid(np.arange(self.width) + 0.5, np.arange(self.height) + 0.5)
        d = np.stack([(u.ravel() - self.cx) / self.fx, (v.ravel() - self.cy) / self.fy,
                      np.ones(u.size)], axis=1)
        d /= np.linalg.norm(d, axis=1, keepdims=True)
        d = d @ self.pose.rotation.T
        return np.broadcast_to(self.pose.translation, d.shape), d

    def to_dict(self) -> dict:
        return {"width": self.width, "height": self.height, "fx": self.fx, "fy": self.fy,
                "cx": self.cx, "cy": self.cy,
                "pose": [float(x) for x in self.pose.rotation.ravel()] + [float(x) for x in self.pose.translation]}

    @classmethod
    def from_dict(cls, d: dict) -> "VirtualCamera":
        p = np.asarray(d["pose"], dtype=np.float64)
        return cls(Pose(p[:9].reshape(3, 3), p[9:]), int(d["width"]), int(d["height"]),
                   float(d["fx"]), float(d["fy"]), float(d["cx"]), float(d["cy"]))


def look_at(eye, target, up=(0.0, 0.0, 1.0)) -> Pose:
    eye = np.asarray(eye, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, (0.0, 1.0, 0.0))
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    return Pose(np.stack([x, y, z], axis=1), eye)


def sample_camera(rng: np.random.Generator, table, cfg) -> VirtualCamera:
    """Camera on the upper hemisphere looking at a point on the table (draw step 5)."""
    dist = float(rng.uniform(*cfg.camera_distance))
    elev = np.deg2rad(float(rng.uniform(*cfg.camera_elevation_deg)))
    azim = float(rng.uniform(0.0, 2 * np.pi))
    hx, hy = table.half_extent
    tx = float(rng.uniform(-hx, hx)) * cfg.lookat_fraction * 2
    ty = float(rng.uniform(-hy, hy)) * cfg.lookat_fraction * 2
    target = np.array([tx, ty, 0.0])
    eye = target + dist * np.array([np.cos(elev) * np.cos(azim), np.cos(elev) * np.sin(azim), np.sin(elev)])
    f = 0.5 * cfg.resolution / np.tan(0.5 * np.deg2rad(cfg.fov_deg))
    c = 0.5 * cfg.resolution
    return VirtualCamera(look_at(eye, target), cfg.resolution, cfg.resolution, f, f, c, c)


def sample_occluder(rng: np.random.Generator, camera: VirtualCamera, target) -> Box:
    """A bar between the camera and the table standing in for the robot arm (draw step 6)."""
    frac = float(rng.uniform(0.3, 0.6))
    size = (float(rng.uniform(0.04, 0.08)), float(rng.uniform(0.04, 0.08)), float(rng.uniform(0.2, 0.4)))
    yaw = float(rng.uniform(0.0, 2 * np.pi))
    eye = camera.pose.translation
    center = eye + frac * (np.asarray(target) - eye)
    return Box(size, Pose(rotation_z(yaw), center))


def _table_top_hits(origins, dirs, table):
    hx, hy = table.half_extent
    with np.errstate(divide="ignore", invalid="ignore"):
        t = -origins[:, 2] / dirs[:, 2]
    x = origins[:, 0] + t * dirs[:, 0]
    y = origins[:, 1] + t * dirs[:, 1]
    ok = (dirs[:, 2] < 0) & (t > 0) & (np.abs(x) <= hx) & (np.abs(y) <= hy)
    return np.where(ok, t, np.inf)


def cast_scene(camera: VirtualCamera, table, shapes, occluder=None):
    """Closest hit per pixel. Returns (points [H*W, 3], ids [H*W], hit mask).

    The table is rendered as its top face only, so nothing below z = 0 is seen.
    """
    o, d = camera.rays()
    o = np.ascontiguousarray(o)
    best = _table_top_hits(o, d, table)
    ids = np.full(len(d), TABLE_ID, dtype=np.int64)
    for obj_id, shape in shapes:
        t = ray_cast(shape, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, obj_id, ids)
    if occluder is not None:
        t = ray_cast(occluder, o, d)
        closer = t < best
        best = np.where(closer, t, best)
        ids = np.where(closer, OCCLUDER_ID, ids)
    hit = np.isfinite(best) & (ids != OCCLUDER_ID)
    pts = o + np.where(hit, best, 0.0)[:, None] * d
    return pts, ids, hit


def render_pointcloud(instances, table, camera: VirtualCamera, n_points: int,
                      rng: np.random.Generator | None = None, presample_factor: int = 8, occluder=None):
    """Visible scene points and per-point ids, subsampled to ``n_points``.

    Hits are first thinned to ``presample_factor * n_points`` by a random
    permutation (draw step 7), then reduced by furthest point sampling.
    """
    shapes = [(inst.id, inst.shape) for inst in instances]
    pts, ids, hit = cast_scene(camera, table, shapes, occluder)
    pts, ids = pts[hit], ids[hit]
    if not np.any(ids == TABLE_ID):
        raise RenderError("degenerate camera: the table is not visible")
    if len(pts) < n_points:
        raise RenderError(f"only {len(pts)} visible points, {n_points} requested")
    keep = min(len(pts), presample_factor * n_points)
    if rng is not None and keep < len(pts):
        sel = np.sort(rng.permutation(len(pts))[:keep])
    else:
        sel = np.linspace(0, len(pts) - 1, keep).round().astype(np.int64)
    pts, ids = pts[sel], ids[sel]
    idx = furthest_point_sample(pts, n_points)
    return pts[idx], ids[idx].astype(np.uint32)
