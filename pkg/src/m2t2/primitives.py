"""Analytic convex primitives: boxes and upright cylinders.

Provides support mappings, GJK distance, box-box SAT, ray casting, surface
sampling with outward normals and vectorised planar footprint distances used
by the scene generator and the evaluator.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .geometry import Pose, rotation_z

_EPS = 1e-12


@dataclass(frozen=True)
class Box:
    """Box with full edge lengths ``size`` centred at ``pose``."""
    size: tuple
    pose: Pose

    kind = "box"

    @property
    def half(self) -> np.ndarray:
        return 0.5 * np.asarray(self.size, dtype=np.float64)

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def bounding_radius(self) -> float:
        return float(np.linalg.norm(self.half))

    def support(self, d) -> np.ndarray:
        R = self.pose.rotation
        local = R.T @ np.asarray(d, dtype=np.float64)
        s = np.where(local >= 0, 1.0, -1.0)
        return self.pose.translation + R @ (s * self.half)

    def corners(self) -> np.ndarray:
        signs = np.array(list(itertools.product((-1.0, 1.0), repeat=3)))
        return self.pose.apply(signs * self.half)


@dataclass(frozen=True)
class Cylinder:
    """Cylinder whose axis is the local z axis, centred at ``pose``."""
    radius: float
    height: float
    pose: Pose

    kind = "cylinder"

    @property
    def center(self) -> np.ndarray:
        return self.pose.translation

    @property
    def bounding_radius(self) -> float:
        return float(np.hypot(self.radius, 0.5 * self.height))

    def support(self, d) -> np.ndarray:
        R = self.pose.rotation
        local = R.T @ np.asarray(d, dtype=np.float64)
        radial = np.hypot(local[0], local[1])
        out = np.zeros(3)
        if radial > _EPS:
            out[:2] = self.radius * local[:2] / radial
        out[2] = 0.5 * self.height if local[2] >= 0 else -0.5 * self.height
        return self.pose.translation + R @ out


def upright_pose(x: float, y: float, z: float, yaw: float = 0.0) -> Pose:
    return Pose(rotation_z(yaw), np.array([x, y, z], dtype=np.float64))


# ---- GJK -------------------------------------------------------------------------

def _closest_on_simplex(simplex):
    """Closest point to the origin on the convex hull of up to 4 points.

    Returns (point, indices of the supporting sub-simplex, inside) where
    ``inside`` means the origin lies in a full-dimensional tetrahedron.
    """
    pts = np.asarray(simplex)
    best = None
    n = len(pts)
    for size in range(1, n + 1):
        for idx in itertools.combinations(range(n), size):
            P = pts[list(idx)]
            if size == 1:
                lam = np.array([1.0])
            else:
                # minimise |P^T lam| subject to sum(lam) = 1
                E = (P[1:] - P[0]).T
                G = E.T @ E
                try:
                    mu = np.linalg.solve(G, -E.T @ P[0])
                except np.linalg.LinAlgError:
                    continue
                lam = np.concatenate([[1.0 - mu.sum()], mu])
            if np.any(lam < -1e-12):
                continue
            x = lam @ P
            dist = float(x @ x)
            if best is None or dist < best[0] - 1e-18:
                best = (dist, x, idx)
    if best is None:
        i = int(np.argmin(np.sum(pts ** 2, axis=1)))
        return pts[i], (i,), False
    inside = len(best[2]) == 4
    return best[1], best[2], inside


def gjk_distance(A, B, max_iter: int = 64, tol: float = 1e-10) -> float:
    """Euclidean distance between two convex shapes (0 when they overlap)."""
    def sup(d):
        return A.support(d) - B.support(-d)

    d0 = A.center - B.center
    if np.linalg.norm(d0) < _EPS:
        return 0.0
    simplex = [sup(-d0)]
    v = simplex[0]
    for _ in range(max_iter):
        vv = float(v @ v)
        if vv < tol * tol:
            return 0.0
        w = sup(-v)
        if vv - float(v @ w) <= 1e-12 + 1e-9 * vv:
            return float(np.sqrt(vv))
        if any(np.allclose(w, s, atol=1e-14) for s in simplex):
            return float(np.sqrt(vv))
        simplex.append(w)
        v, idx, inside = _closest_on_simplex(simplex)
        if inside:
            return 0.0
        simplex = [simplex[i] for i in idx]
    return float(np.linalg.norm(v))


def gjk_intersect(A, B, max_iter: int = 64) -> bool:
    """Boolean GJK: True when the convex shapes share at least one point."""
    def sup(d):
        return A.support(d) - B.support(-d)

    v = A.center - B.center
    if np.linalg.norm(v) < _EPS:
        return True
    simplex = [sup(-v)]
    v = simplex[0]
    for _ in range(max_iter):
        vv = float(v @ v)
        if vv < 1e-24:
            return True
        w = sup(-v)
        if float(w @ v) > 1e-12:
            return False    # -v separates the Minkowski difference from the origin
        if vv - float(v @ w) <= 1e-12 + 1e-9 * vv:
            return vv <= 1e-18
        simplex.append(w)
        v, idx, inside = _closest_on_simplex(simplex)
        if inside:
            return True
        simplex = [simplex[i] for i in idx]
    return float(v @ v) <= 1e-18


def boxes_overlap(A: Box, B: Box, margin: float = 0.0) -> bool:
    """Separating-axis test for two oriented boxes; ``margin`` inflates both along each axis."""
    Ra, Rb = A.pose.rotation, B.pose.rotation
    ha, hb = A.half, B.half
    t = B.center - A.center
    axes = [Ra[:, i] for i in range(3)] + [Rb[:, i] for i in range(3)]
    for i in range(3):
        for j in range(3):
            c = np.cross(Ra[:, i], Rb[:, j])
            n = np.linalg.norm(c)
            if n > 1e-9:
                axes.append(c / n)
    for L in axes:
        ra = np.sum(ha * np.abs(Ra.T @ L))
        rb = np.sum(hb * np.abs(Rb.T @ L))
        if abs(t @ L) > ra + rb + margin:
            return False
    return True


def shapes_distance(A, B) -> float:
    if A.kind == "box" and B.kind == "box" and boxes_overlap(A, B):
        return 0.0
    if np.linalg.norm(A.center - B.center) > A.bounding_radius + B.bounding_radius + 1.0:
        return float(np.linalg.norm(A.center - B.center) - A.bounding_radius - B.bounding_radius)
    return gjk_distance(A, B)


def shapes_collide(A, B, clearance: float = 0.0) -> bool:
    """True when the shapes overlap or come closer than ``clearance`` (touching counts)."""
    gap = float(np.linalg.norm(A.center - B.center)) - A.bounding_radius - B.bounding_radius
    if gap > clearance + 1e-9:
        return False
    if A.kind == "box" and B.kind == "box":
        if boxes_overlap(A, B):
            return True
        if clearance <= 0:
            return gjk_distance(A, B) <= 1e-9
    return gjk_distance(A, B) < max(clearance, 1e-9)


# ---- point queries -------------------------------------------------------------------

def to_local(shape, points) -> np.ndarray:
    return (np.asarray(points, dtype=np.float64) - shape.pose.translation) @ shape.pose.rotation


def point_distance(shape, points) -> np.ndarray:
    """Unsigned distance from points to the solid shape (0 inside)."""
    q = to_local(shape, points)
    if shape.kind == "box":
        e = np.maximum(np.abs(q) - shape.half, 0.0)
        return np.linalg.norm(e, axis=-1)
    r = np.maximum(np.hypot(q[..., 0], q[..., 1]) - shape.radius, 0.0)
    z = np.maximum(np.abs(q[..., 2]) - 0.5 * shape.height, 0.0)
    return np.hypot(r, z)


def surface_distance(shape, points) -> np.ndarray:
    """Unsigned distance from points to the boundary surface of the shape."""
    q = to_local(shape, points)
    if shape.kind == "box":
        d = np.abs(q) - shape.half
        outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
        inside = np.minimum(np.max(d, axis=-1), 0.0)
        return np.abs(outside + inside)
    rad = np.hypot(q[..., 0], q[..., 1]) - shape.radius
    z = np.abs(q[..., 2]) - 0.5 * shape.height
    d = np.stack([rad, z], axis=-1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=-1)
    inside = np.minimum(np.max(d, axis=-1), 0.0)
    return np.abs(outside + inside)


# ---- ray casting ------------------------------------------------------------------------

def ray_cast(shape, origins, directions) -> np.ndarray:
    """Entry distance along each ray (inf on a miss or when the origin is inside)."""
    o = to_local(shape, origins)
    d = np.asarray(directions, dtype=np.float64) @ shape.pose.rotation
    if shape.kind == "box":
        return _ray_box(o, d, shape.half)
    return _ray_cylinder(o, d, shape.radius, 0.5 * shape.height)


def _ray_box(o, d, half):
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
        t1 = (-half - o) * inv
        t2 = (half - o) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t2), np.inf, np.maximum(t1, t2))
    # rays parallel to a slab: inside the slab or a guaranteed miss
    par = d == 0
    inslab = np.abs(o) <= half
    tmin = np.where(par, np.where(inslab, -np.inf, np.inf), tmin)
    tmax = np.where(par, np.where(inslab, np.inf, -np.inf), tmax)
    near = tmin.max(axis=-1)
    far = tmax.min(axis=-1)
    hit = (near <= far) & (near > 0)
    return np.where(hit, near, np.inf)


def _ray_cylinder(o, d, r, hz):
    t = np.full(o.shape[:-1], np.inf)
    a = d[..., 0] ** 2 + d[..., 1] ** 2
    b = 2 * (o[..., 0] * d[..., 0] + o[..., 1] * d[..., 1])
    c = o[..., 0] ** 2 + o[..., 1] ** 2 - r * r
    disc = b * b - 4 * a * c
    ok = (a > _EPS) & (disc >= 0)
    with np.errstate(divide="ignore", invalid="ignore"):
        ts = np.where(ok, (-b - np.sqrt(np.maximum(disc, 0))) / (2 * a), np.inf)
    z = o[..., 2] + ts * d[..., 2]
    side = ok & (ts > 0) & (np.abs(z) <= hz)
    t = np.where(side, ts, t)
    for zc in (hz, -hz):
        with np.errstate(divide="ignore", invalid="ignore"):
            tc = (zc - o[..., 2]) / d[..., 2]
        x = o[..., 0] + tc * d[..., 0]
        y = o[..., 1] + tc * d[..., 1]
        outside_cap = np.abs(o[..., 2]) > hz
        cap = np.isfinite(tc) & (tc > 0) & (x * x + y * y <= r * r) & outside_cap
        t = np.where(cap & (tc < t), tc, t)
    return t


# ---- surface sampling ----------------------------------------------------------------------

def _grid(lo, hi, spacing):
    n = max(1, int(np.ceil((hi - lo) / spacing)))
    return lo + (np.arange(n) + 0.5) * (hi - lo) / n


def sample_surface(shape, spacing: float = 0.003):
    """Deterministic grid sample of the surface with outward unit normals."""
    pts, nrm = [], []
    if shape.kind == "box":
        h = shape.half
        for ax in range(3):
            u, v = [i for i in range(3) if i != ax]
            gu, gv = np.meshgrid(_grid(-h[u], h[u], spacing), _grid(-h[v], h[v], spacing), indexing="ij")
            for s in (-1.0, 1.0):
                p = np.zeros((gu.size, 3))
                p[:, u] = gu.ravel()
                p[:, v] = gv.ravel()
                p[:, ax] = s * h[ax]
                n = np.zeros_like(p)
                n[:, ax] = s
                pts.append(p)
                nrm.append(n)
    else:
        r, hz = shape.radius, 0.5 * shape.height
        na = max(8, int(np.ceil(2 * np.pi * r / spacing)))
        ang = (np.arange(na) + 0.5) * 2 * np.pi / na
        gz = _grid(-hz, hz, spacing)
        A, Z = np.meshgrid(ang, gz, indexing="ij")
        p = np.stack([r * np.cos(A.ravel()), r * np.sin(A.ravel()), Z.ravel()], axis=1)
        n = np.stack([np.cos(A.ravel()), np.sin(A.ravel()), np.zeros(A.size)], axis=1)
        pts.append(p)
        nrm.append(n)
        for ring_r in _grid(0.0, r, spacing):
            m = max(6, int(np.ceil(2 * np.pi * ring_r / spacing)))
            a = (np.arange(m) + 0.5) * 2 * np.pi / m
            for s in (-1.0, 1.0):
                pts.append(np.stack([ring_r * np.cos(a), ring_r * np.sin(a), np.full(m, s * hz)], axis=1))
                nn = np.zeros((m, 3))
                nn[:, 2] = s
                nrm.append(nn)
    p = np.vstack(pts)
    n = np.vstack(nrm)
    return shape.pose.apply(p), n @ shape.pose.rotation.T


# ---- planar footprints ------------------------------------------------------------------------

def is_upright(shape, tol: float = 1e-9) -> bool:
    return abs(shape.pose.rotation[2, 2] - 1.0) <= tol


def yaw_of(shape) -> float:
    R = shape.pose.rotation
    return float(np.arctan2(R[1, 0], R[0, 0]))


def footprint_polygon(shape, segments: int = 64) -> np.ndarray:
    """Planar outline of an upright shape as a counter-clockwise vertex list."""
    c = shape.center[:2]
    if shape.kind == "box":
        hx, hy = shape.half[:2]
        local = np.array([[-hx, -hy], [hx, -hy], [hx, hy], [-hx, hy]])
        R = shape.pose.rotation[:2, :2]
        return c + local @ R.T
    ang = np.arange(segments) * 2 * np.pi / segments
    return c + shape.radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)


def z_range(shape):
    pts = [shape.support(np.array([0.0, 0.0, -1.0]))[2], shape.support(np.array([0.0, 0.0, 1.0]))[2]]
    return float(pts[0]), float(pts[1])


def _rect_vertices(centers, yaws, half):
    """[M, 4, 2] corners of rectangles with half extents ``half`` [M, 2] or [2]."""
    half = np.broadcast_to(np.asarray(half, dtype=np.float64), (len(centers), 2))
    signs = np.array([[-1, -1], [1, -1], [1, 1], [-1, 1]], dtype=np.float64)
    local = signs[None] * half[:, None, :]
    c, s = np.cos(yaws), np.sin(yaws)
    x = local[..., 0] * c[:, None] - local[..., 1] * s[:, None]
    y = local[..., 0] * s[:, None] + local[..., 1] * c[:, None]
    return np.stack([x, y], axis=-1) + centers[:, None, :]


def _point_rect_distance(points, center, yaw, half):
    """Distance from points [M, 2] to a fixed rectangle (0 inside)."""
    c, s = np.cos(yaw), np.sin(yaw)
    d = points - center
    lx = d[:, 0] * c + d[:, 1] * s
    ly = -d[:, 0] * s + d[:, 1] * c
    ex = np.maximum(np.abs(lx) - half[0], 0.0)
    ey = np.maximum(np.abs(ly) - half[1], 0.0)
    return np.hypot(ex, ey)


def _segment_point_distance(a, b, p):
    ab = b - a
    t = np.clip(np.sum((p - a) * ab, axis=-1) / np.maximum(np.sum(ab * ab, axis=-1), _EPS), 0.0, 1.0)
    q = a + t[..., None] * ab
    return np.linalg.norm(p - q, axis=-1)


def _polys_overlap(P, Q):
    """SAT overlap for convex quads P [M, 4, 2] and Q [M, 4, 2]."""
    sep = np.zeros(len(P), dtype=bool)
    for poly in (P, Q):
        edges = np.roll(poly, -1, axis=1) - poly
        normals = np.stack([-edges[..., 1], edges[..., 0]], axis=-1)
        for k in range(4):
            n = normals[:, k]
            pp = np.einsum("mvd,md->mv", P, n)
            qq = np.einsum("mvd,md->mv", Q, n)
            sep |= (pp.max(axis=1) < qq.min(axis=1)) | (qq.max(axis=1) < pp.min(axis=1))
    return ~sep


def _rect_rect_distance(P, Q):
    overlap = _polys_overlap(P, Q)
    best = np.full(len(P), np.inf)
    for A, B in ((P, Q), (Q, P)):
        for i in range(4):
            a = A[:, i]
            b = A[:, (i + 1) % 4]
            for j in range(4):
                best = np.minimum(best, _segment_point_distance(a, b, B[:, j]))
    return np.where(overlap, 0.0, best)


def footprint_distances(moving, centers, yaws, fixed) -> np.ndarray:
    """Planar distances between copies of ``moving`` placed at ``centers`` [M, 2]
    with absolute yaws ``yaws`` [M] and the upright shape ``fixed`` (0 on overlap)."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    yaws = np.broadcast_to(np.asarray(yaws, dtype=np.float64), (len(centers),))
    fc = fixed.center[:2]
    if moving.kind == "cylinder" and fixed.kind == "cylinder":
        return np.maximum(np.linalg.norm(centers - fc, axis=1) - moving.radius - fixed.radius, 0.0)
    if moving.kind == "cylinder":
        d = _point_rect_distance(centers, fc, yaw_of(fixed), fixed.half[:2])
        return np.maximum(d - moving.radius, 0.0)
    if fixed.kind == "cylinder":
        # rotate the problem into each moving rectangle's frame
        c, s = np.cos(yaws), np.sin(yaws)
        d = fc - centers
        lx = d[:, 0] * c + d[:, 1] * s
        ly = -d[:, 0] * s + d[:, 1] * c
        ex = np.maximum(np.abs(lx) - moving.half[0], 0.0)
        ey = np.maximum(np.abs(ly) - moving.half[1], 0.0)
        return np.maximum(np.hypot(ex, ey) - fixed.radius, 0.0)
    P = _rect_vertices(centers, yaws, moving.half[:2])
    Q = _rect_vertices(fc[None].repeat(len(centers), 0), np.full(len(centers), yaw_of(fixed)), fixed.half[:2])
    return _rect_rect_distance(P, Q)


def footprint_inside_rect(moving, centers, yaws, half_extent, margin: float = 0.0) -> np.ndarray:
    """Whether the footprint at each placement lies inside the axis-aligned
    rectangle |x| <= hx - margin, |y| <= hy - margin."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 2)
    yaws = np.broadcast_to(np.asarray(yaws, dtype=np.float64), (len(centers),))
    hx, hy = half_extent[0] - margin, half_extent[1] - margin
    if moving.kind == "cylinder":
        r = moving.radius
        return (np.abs(centers[:, 0]) + r <= hx) & (np.abs(centers[:, 1]) + r <= hy)
    V = _rect_vertices(centers, yaws, moving.half[:2])
    return np.all((np.abs(V[..., 0]) <= hx) & (np.abs(V[..., 1]) <= hy), axis=1)
