"""Independent reference implementations used by the tests.

Nothing here calls the code path it is checking: placements are re-checked
with shapely footprints and dense surface points, assignments by enumeration,
sampling and interpolation by naive loops.
"""
from __future__ import annotations

import itertools

import numpy as np
import shapely
from shapely.geometry import Point, Polygon, box as shapely_box

from m2t2.geometry import (DEFAULT_GRIPPER, Pose, check_antipodal_stability, check_gripper_collision,
                           rotation_z, to_gripper_frame)
from m2t2.primitives import Box, sample_surface

CIRCLE_RESOLUTION = 256


# ---- small brute-force references ----------------------------------------------------

def brute_force_fps(points, m, seed_index=0):
    pts = np.asarray(points, dtype=np.float64)
    chosen = [seed_index]
    while len(chosen) < m:
        best, best_d = None, -1.0
        for i in range(len(pts)):
            d = min(float(np.sqrt(np.sum((pts[i] - pts[j]) ** 2))) for j in chosen)
            if d > best_d:
                best, best_d = i, d
        chosen.append(best)
    return np.array(chosen)


def brute_force_interpolation(coarse, feats, fine, k=3):
    out = []
    for p in fine:
        d = [float(np.linalg.norm(p - c)) for c in coarse]
        order = sorted(range(len(coarse)), key=lambda i: (d[i], i))[:k]
        if d[order[0]] == 0.0:
            out.append(np.asarray(feats[order[0]], dtype=np.float64))
            continue
        w = np.array([1.0 / (d[i] + 1e-8) for i in order])
        w /= w.sum()
        out.append(sum(wi * np.asarray(feats[i], dtype=np.float64) for wi, i in zip(w, order)))
    return np.array(out)


def brute_force_assignment(cost):
    """Minimum total cost over injective row choices for every column."""
    cost = np.asarray(cost, dtype=np.float64)
    G, M = cost.shape
    best, best_rows = np.inf, None
    for rows in itertools.permutations(range(G), M):
        c = sum(cost[r, j] for j, r in enumerate(rows))
        if c < best:
            best, best_rows = c, rows
    return best, best_rows


# ---- footprints ------------------------------------------------------------------------

def footprint(shape) -> Polygon:
    """Planar footprint of an upright box or cylinder as a shapely polygon."""
    R, t = shape.pose.rotation, shape.pose.translation
    if shape.kind == "cylinder":
        return Point(t[0], t[1]).buffer(shape.radius, quad_segs=CIRCLE_RESOLUTION)
    hx, hy = 0.5 * shape.size[0], 0.5 * shape.size[1]
    corners = np.array([[-hx, -hy, 0], [hx, -hy, 0], [hx, hy, 0], [-hx, hy, 0]]) @ R.T + t
    return Polygon(corners[:, :2])


def table_polygon(table) -> Polygon:
    hx, hy = table.half_extent
    return shapely_box(-hx, -hy, hx, hy)


def dense_scene_points(shapes, spacing=0.002):
    return np.vstack([sample_surface(s, spacing)[0] for s in shapes])


def placement_conditions(held, ee_pose, table, instances, point, bin_index, num_bins, object_points=256,
                         clearance=0.005, scene_points=None):
    """Conditions (a) on the table, (b) clear of remaining objects, (c) gripper clear,
    for placing the held object with its bottom centre at ``point`` after turning it by bin ``bin_index``."""
    from m2t2.datagen.labels import held_object_cloud
    cloud = held_object_cloud(held, object_points)
    b = np.array([cloud[:, 0].mean(), cloud[:, 1].mean(), cloud[:, 2].min()])
    Rb = rotation_z(2 * np.pi * bin_index / num_bins)
    grip = Pose(Rb @ ee_pose.rotation, np.asarray(point, dtype=np.float64) + Rb @ (ee_pose.translation - b))
    placed = held.with_pose(grip @ ee_pose.inverse() @ held.pose).shape
    fp = footprint(placed)
    on_table = bool(table_polygon(table).contains(fp))
    clear = all(shapely.distance(fp, footprint(inst.shape)) >= clearance - 1e-9 for inst in instances)
    if scene_points is None:
        scene_points = dense_scene_points([inst.shape for inst in instances] + [table.shape])
    gripper_ok = not check_gripper_collision(grip, scene_points, DEFAULT_GRIPPER, clearance)
    return on_table, clear, gripper_ok


def bundle_placement_conditions(bundle, bin_index, point_index, scene_points=None, clearance=None):
    cfg = bundle.config
    return placement_conditions(bundle.held, bundle.ee_pose, bundle.table, bundle.instances,
                                bundle.points[point_index].astype(np.float64), bin_index,
                                bundle.placement_masks.shape[0], cfg.object_points,
                                cfg.clearance if clearance is None else clearance, scene_points)


# ---- grasps ---------------------------------------------------------------------------

def grasp_oracle(pose: Pose, shapes, clearance=0.005, friction_mu=0.5, spacing=0.002):
    """Dense-point collision and stability re-check of one grasp against analytic shapes."""
    samples = [sample_surface(s, spacing) for s in shapes]
    pts = np.vstack([s[0] for s in samples])
    if check_gripper_collision(pose, pts, DEFAULT_GRIPPER, clearance):
        return False
    held = [i for i, (p, _) in enumerate(samples)
            if DEFAULT_GRIPPER.closing_region.contains(to_gripper_frame(p, pose.rotation, pose.translation)).any()]
    if len(held) != 1:
        return False
    p, n = samples[held[0]]
    return check_antipodal_stability(pose, p, n, DEFAULT_GRIPPER, friction_mu)


def boxes_interpenetrate(a: Box, b: Box, samples=4000, rng=None) -> bool:
    """Monte-Carlo interior test used as a second opinion for box overlap."""
    rng = rng or np.random.default_rng(0)
    u = rng.uniform(-0.5, 0.5, size=(samples, 3)) * a.size
    world = u @ a.pose.rotation.T + a.pose.translation
    local = (world - b.pose.translation) @ b.pose.rotation
    return bool(np.any(np.all(np.abs(local) < 0.5 * np.asarray(b.size), axis=1)))
