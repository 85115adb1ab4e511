"""Pose extraction from network outputs, success predicates and precision-coverage curves."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from .collision import grasp_is_stable, gripper_shape_collisions
from .geometry import DEFAULT_GRIPPER, GripperModel, Pose, bottom_center, reconstruct_grasp_poses, rotation_z
from .network import forward
from .primitives import footprint_distances, footprint_inside_rect, gjk_intersect

COVERAGE_RADIUS = 0.05
PLACE_HEIGHT_TOLERANCE = 0.05
OBJECTNESS_THRESHOLD = 0.5


@dataclass
class Proposal:
    pose: Pose
    confidence: float
    contact: int
    token: int          # grasp token index or placement rotation bin

    def to_dict(self) -> dict:
        return {"rotation": [float(x) for x in self.pose.rotation.ravel()],
                "translation": [float(x) for x in self.pose.translation],
                "confidence": float(self.confidence), "token_or_bin": int(self.token)}


def _proposals(R, t, conf, contacts, tokens) -> list:
    return [Proposal(Pose(R[i], t[i]), float(conf[i]), int(contacts[i]), int(tokens[i])) for i in range(len(conf))]


def predict_grasps(masks, actions, points, gripper: GripperModel = DEFAULT_GRIPPER,
                   mask_threshold: float = 0.5, objectness_threshold: float = OBJECTNESS_THRESHOLD) -> list:
    """Grasp poses at every contact point of every confident token.

    Confidence is the mask probability at the contact point.
    """
    pts = np.asarray(points, dtype=np.float64)
    obj = np.asarray(masks.objectness.data).reshape(-1)
    gm = np.asarray(masks.grasp_masks.data)
    tokens, contacts = np.nonzero((gm > mask_threshold) & (obj > objectness_threshold)[:, None])
    if len(contacts) == 0:
        return []
    R, t, valid = reconstruct_grasp_poses(pts[contacts], actions.contact_dir.data[contacts],
                                          actions.approach_dir.data[contacts],
                                          actions.width.data[contacts, 0], gripper.base_to_baseline)
    keep = np.nonzero(valid)[0]
    return _proposals(R[keep], t[keep], gm[tokens, contacts][keep], contacts[keep], tokens[keep])


def placement_poses(points, bins, num_bins: int, ee_pose: Pose, bottom):
    """Vectorised placement reconstruction for (point, bin) pairs."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bottom = np.asarray(bottom, dtype=np.float64)
    Rb = np.stack([rotation_z(2 * np.pi * int(b) / num_bins) for b in bins]) if len(bins) else np.zeros((0, 3, 3))
    R = Rb @ ee_pose.rotation
    t = pts + np.einsum("nij,j->ni", Rb, ee_pose.translation - bottom)
    return R, t


def predict_placements(masks, ee_pose: Pose, object_cloud, points, mask_threshold: float = 0.5) -> list:
    """Placement poses for every (bin, point) whose mask probability exceeds the threshold."""
    pm = np.asarray(masks.place_masks.data)
    num_bins = pm.shape[0]
    bins, contacts = np.nonzero(pm > mask_threshold)
    if len(contacts) == 0:
        return []
    b = bottom_center(object_cloud)
    R, t = placement_poses(np.asarray(points)[contacts], bins, num_bins, ee_pose, b)
    return _proposals(R, t, pm[bins, contacts], contacts, bins)


# ---- success predicates -------------------------------------------------------------

def grasp_success_batch(rotations, translations, geometry, gripper: GripperModel = DEFAULT_GRIPPER,
                        clearance: float = 0.005, friction_mu: float = 0.5) -> np.ndarray:
    """Collision-free against every analytic shape (occluded parts included) and stable."""
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    ok = ~gripper_shape_collisions(R, t, geometry.obstacles(), gripper, clearance)
    for i in np.nonzero(ok)[0]:
        ok[i] = grasp_is_stable(Pose(R[i], t[i]), geometry.dense, gripper, friction_mu)
    return ok


def grasp_success(pose: Pose, bundle, gripper: GripperModel = DEFAULT_GRIPPER, clearance: float = 0.005,
                  friction_mu: float = 0.5) -> bool:
    geom = bundle.geometry() if hasattr(bundle, "geometry") else bundle
    return bool(grasp_success_batch([pose.rotation], [pose.translation], geom, gripper, clearance, friction_mu)[0])


def placement_success_batch(rotations, translations, geometry, held, ee_pose: Pose,
                            gripper: GripperModel = DEFAULT_GRIPPER, clearance: float = 0.005,
                            object_clearance: float = 0.0) -> np.ndarray:
    """Release the held object at each gripper pose and check the outcome.

    Success needs the object more than ``object_clearance`` from every remaining
    object, the gripper clear of the scene and table, the object bottom at most
    5 cm above the table and not below it, and the footprint inside the table.
    Tilted releases only support ``object_clearance`` 0.
    """
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    rel = ee_pose.inverse() @ held.pose
    Ro = R @ rel.rotation
    to = np.einsum("nij,j->ni", R, rel.translation) + t
    shape0 = held.shape
    hx, hy = geometry.table.half_extent
    ok = np.ones(len(R), dtype=bool)
    upright = np.abs(Ro[:, 2, 2] - 1.0) <= 1e-6
    half_h = 0.5 * held.height
    # upright releases: planar footprint tests are exact for vertical prisms
    u = np.nonzero(upright)[0]
    if len(u):
        yaws = np.arctan2(Ro[u, 1, 0], Ro[u, 0, 0])
        bottom = to[u, 2] - half_h
        good = (bottom >= -1e-6) & (bottom <= PLACE_HEIGHT_TOLERANCE)
        good &= footprint_inside_rect(shape0, to[u, :2], yaws, (hx, hy))
        for inst in geometry.instances:
            lo = inst.pose.translation[2] - 0.5 * inst.height
            hi = inst.pose.translation[2] + 0.5 * inst.height
            z_overlap = (bottom < hi) & (bottom + 2 * half_h > lo)
            good &= ~(z_overlap & (footprint_distances(shape0, to[u, :2], yaws, inst.shape) <= object_clearance))
        ok[u] = good
    for i in np.nonzero(~upright)[0]:
        obj = held.with_pose(Pose(Ro[i], to[i])).shape
        ext = [float(obj.support(d) @ d) for d in np.eye(3)[:2]] + [float(-obj.support(-d) @ d) for d in np.eye(3)[:2]]
        low = float(obj.support(np.array([0.0, 0.0, -1.0]))[2])
        good = ext[0] <= hx and ext[1] <= hy and ext[2] >= -hx and ext[3] >= -hy
        good &= -1e-6 <= low <= PLACE_HEIGHT_TOLERANCE
        good &= not any(gjk_intersect(obj, inst.shape) for inst in geometry.instances)
        ok[i] = good
    idx = np.nonzero(ok)[0]
    if len(idx):
        ok[idx] = ~gripper_shape_collisions(R[idx], t[idx], geometry.obstacles(), gripper, clearance)
    return ok


def placement_success(pose: Pose, bundle, gripper: GripperModel = DEFAULT_GRIPPER, clearance: float = 0.005) -> bool:
    return bool(placement_success_batch([pose.rotation], [pose.translation], bundle.geometry(), bundle.held,
                                        bundle.ee_pose, gripper, clearance)[0])


# ---- precision-coverage -------------------------------------------------------------------

def default_thresholds(steps: int = 51) -> np.ndarray:
    return np.round(np.linspace(1.0, 0.5, steps), 10)


@dataclass
class SceneResult:
    """Scored proposals of one scene."""
    confidences: np.ndarray
    successes: np.ndarray
    translations: np.ndarray        # predicted [n, 3]
    gt_translations: np.ndarray     # [m, 3]


@dataclass
class PrecisionCoverageCurve:
    thresholds: np.ndarray
    precision: np.ndarray
    coverage: np.ndarray
    num_predictions: np.ndarray = None

    def rows(self) -> list:
        return list(zip(self.thresholds.tolist(), self.precision.tolist(), self.coverage.tolist()))

    def precision_at_coverage(self, target: float) -> float:
        """Precision at the highest threshold whose coverage reaches ``target`` (0 if never)."""
        hit = np.nonzero(self.coverage >= target - 1e-12)[0]
        return float(self.precision[hit[0]]) if len(hit) else 0.0


def covered_mask(pred_t, gt_t, radius: float = COVERAGE_RADIUS) -> np.ndarray:
    """For each ground-truth translation, whether some prediction lies within ``radius``."""
    gt_t = np.asarray(gt_t, dtype=np.float64).reshape(-1, 3)
    pred_t = np.asarray(pred_t, dtype=np.float64).reshape(-1, 3)
    if len(gt_t) == 0 or len(pred_t) == 0:
        return np.zeros(len(gt_t), dtype=bool)
    d, _ = cKDTree(pred_t).query(gt_t, distance_upper_bound=radius * (1 + 1e-12))
    return d <= radius


def precision_coverage(results, thresholds=None, radius: float = COVERAGE_RADIUS) -> PrecisionCoverageCurve:
    """Pooled precision and coverage over scenes as the confidence threshold is lowered.

    An empty prediction set has precision 1.
    """
    if isinstance(results, SceneResult):
        results = [results]
    thr = default_thresholds() if thresholds is None else np.asarray(thresholds, dtype=np.float64)
    if np.any(np.diff(thr) >= 0):
        raise ValueError("thresholds must be strictly decreasing")
    prec, cov, count = [], [], []
    total_gt = sum(len(r.gt_translations) for r in results)
    for t in thr:
        n_pred = n_ok = n_cov = 0
        for r in results:
            sel = np.asarray(r.confidences) >= t
            n_pred += int(sel.sum())
            n_ok += int(np.asarray(r.successes)[sel].sum())
            n_cov += int(covered_mask(np.asarray(r.translations)[sel], r.gt_translations, radius).sum())
        prec.append(n_ok / n_pred if n_pred else 1.0)
        cov.append(n_cov / total_gt if total_gt else 0.0)
        count.append(n_pred)
    return PrecisionCoverageCurve(thr, np.array(prec), np.array(cov), np.array(count))


def area_under_curve(curve: PrecisionCoverageCurve) -> float:
    """Trapezoidal integral of precision over coverage, on the curve's coverage range."""
    c = np.asarray(curve.coverage, dtype=np.float64)
    p = np.asarray(curve.precision, dtype=np.float64)
    order = np.argsort(c, kind="stable")
    c, p = c[order], p[order]
    return float(np.sum(0.5 * (p[1:] + p[:-1]) * np.diff(c)))


def write_curve_csv(curve: PrecisionCoverageCurve, path) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["threshold", "precision", "coverage"])
        for row in curve.rows():
            w.writerow([repr(float(x)) for x in row])


def read_curve_csv(path) -> PrecisionCoverageCurve:
    with open(path, newline="") as f:
        rows = list(csv.DictReader(f))
    return PrecisionCoverageCurve(np.array([float(r["threshold"]) for r in rows]),
                                  np.array([float(r["precision"]) for r in rows]),
                                  np.array([float(r["coverage"]) for r in rows]))


def write_proposals_json(proposals, path) -> None:
    with open(path, "w") as f:
        json.dump([p.to_dict() for p in proposals], f, indent=1)


# ---- random baselines -------------------------------------------------------------------

def random_grasp_proposals(points, n: int, rng: np.random.Generator,
                           gripper: GripperModel = DEFAULT_GRIPPER) -> list:
    """Uniform contact points with random approach (upper hemisphere), contact direction and width."""
    pts = np.asarray(points, dtype=np.float64)
    idx = rng.integers(0, len(pts), n)
    a = rng.normal(size=(n, 3))
    a[:, 2] = np.abs(a[:, 2])
    a /= np.linalg.norm(a, axis=1, keepdims=True)
    c = rng.normal(size=(n, 3))
    w = rng.uniform(0.0, gripper.max_width, n)
    conf = rng.uniform(0.5, 1.0, n)
    R, t, valid = reconstruct_grasp_poses(pts[idx], c, a, w, gripper.base_to_baseline)
    keep = np.nonzero(valid)[0]
    return _proposals(R[keep], t[keep], conf[keep], idx[keep], np.zeros(n, dtype=np.int64)[keep])


def random_placement_proposals(points, n: int, num_bins: int, ee_pose: Pose, object_cloud,
                               rng: np.random.Generator) -> list:
    pts = np.asarray(points, dtype=np.float64)
    idx = rng.integers(0, len(pts), n)
    bins = rng.integers(0, num_bins, n)
    conf = rng.uniform(0.5, 1.0, n)
    R, t = placement_poses(pts[idx], bins, num_bins, ee_pose, bottom_center(object_cloud))
    return _proposals(R, t, conf, idx, bins)


# ---- scene-level scoring ---------------------------------------------------------------------

def score_grasps(proposals, bundle, gripper: GripperModel = DEFAULT_GRIPPER, geometry=None) -> SceneResult:
    geom = geometry or bundle.geometry()
    if proposals:
        R = np.stack([p.pose.rotation for p in proposals])
        t = np.stack([p.pose.translation for p in proposals])
        ok = grasp_success_batch(R, t, geom, gripper, bundle.config.clearance, bundle.config.friction_mu)
    else:
        t = np.zeros((0, 3))
        ok = np.zeros(0, dtype=bool)
    return SceneResult(np.array([p.confidence for p in proposals]), ok, t, bundle.grasp_translations())


def placement_ground_truth(bundle) -> np.ndarray:
    """Translations of every placement-mask positive."""
    bins, contacts = np.nonzero(bundle.placement_masks)
    if len(bins) == 0:
        return np.zeros((0, 3))
    _, t = placement_poses(bundle.points.astype(np.float64)[contacts], bins, bundle.placement_masks.shape[0],
                           bundle.ee_pose, bottom_center(bundle.held_cloud()))
    return t


def score_placements(proposals, bundle, gripper: GripperModel = DEFAULT_GRIPPER, geometry=None) -> SceneResult:
    geom = geometry or bundle.geometry()
    if proposals:
        R = np.stack([p.pose.rotation for p in proposals])
        t = np.stack([p.pose.translation for p in proposals])
        ok = placement_success_batch(R, t, geom, bundle.held, bundle.ee_pose, gripper, bundle.config.clearance)
    else:
        t = np.zeros((0, 3))
        ok = np.zeros(0, dtype=bool)
    return SceneResult(np.array([p.confidence for p in proposals]), ok, t, placement_ground_truth(bundle))


def prediction_sets_nested(result: SceneResult, thresholds=None) -> bool:
    """Each lower threshold keeps every proposal kept by a higher one."""
    thr = default_thresholds() if thresholds is None else np.asarray(thresholds)
    conf = np.asarray(result.confidences)
    prev = np.zeros(len(conf), dtype=bool)
    for t in thr:
        cur = conf >= t
        if np.any(prev & ~cur):
            return False
        prev = cur
    return True


# ---- drivers ------------------------------------------------------------------------------

def model_proposals(bundle, params, model_cfg, mode: str, use_object: bool = True,
                    gripper: GripperModel = DEFAULT_GRIPPER) -> list:
    """Run the network on one scene and extract grasp or placement proposals.

    ``use_object`` feeds the held-object cloud to the placement tokens; it should
    match how the model was trained.
    """
    pts = bundle.points.astype(np.float64)
    cloud = bundle.held_cloud()
    masks, actions = forward(pts, params, model_cfg, object_cloud=cloud if use_object else None,
                             with_actions=mode == "grasp")
    if mode == "grasp":
        return predict_grasps(masks, actions, pts, gripper, model_cfg.mask_threshold)
    if mode == "place":
        return predict_placements(masks, bundle.ee_pose, cloud, pts, model_cfg.mask_threshold)
    raise ValueError(f"unknown mode {mode!r}")


def ground_truth_proposals(bundle, mode: str) -> list:
    """The scene's own labels as proposals with confidence 1."""
    if mode == "grasp":
        R, t = bundle.grasp_rotations(), bundle.grasp_translations()
        return _proposals(R, t, np.ones(len(t)), bundle.grasp_contacts, np.zeros(len(t), dtype=np.int64))
    if mode == "place":
        bins, contacts = np.nonzero(bundle.placement_masks)
        R, t = placement_poses(bundle.points.astype(np.float64)[contacts], bins, bundle.placement_masks.shape[0],
                               bundle.ee_pose, bottom_center(bundle.held_cloud()))
        return _proposals(R, t, np.ones(len(t)), contacts, bins)
    raise ValueError(f"unknown mode {mode!r}")


def score(proposals, bundle, mode: str) -> SceneResult:
    return score_grasps(proposals, bundle) if mode == "grasp" else score_placements(proposals, bundle)


def evaluate(bundles, proposal_fn, mode: str, thresholds=None):
    """Pooled precision-coverage curve of ``proposal_fn(bundle)`` over scenes.

    Returns (curve, per-scene results).
    """
    results = [score(proposal_fn(b), b, mode) for b in bundles]
    return precision_coverage(results, thresholds), results


def check_labels(bundle, negatives: int = 200, rng: np.random.Generator | None = None) -> dict:
    """Re-check a bundle's labels with the evaluator.

    Every grasp label and every placement positive must succeed. Sampled
    placement negatives are re-checked under the labelling clearance and must
    fail.
    """
    rng = rng or np.random.default_rng(bundle.seed)
    geom = bundle.geometry()
    cfg = bundle.config
    g_ok = grasp_success_batch(bundle.grasp_rotations(), bundle.grasp_translations(), geom,
                               clearance=cfg.clearance, friction_mu=cfg.friction_mu)
    P = bundle.placement_masks.shape[0]
    bottom = bottom_center(bundle.held_cloud())
    pts = bundle.points.astype(np.float64)
    bins, contacts = np.nonzero(bundle.placement_masks)
    R, t = placement_poses(pts[contacts], bins, P, bundle.ee_pose, bottom)
    p_ok = placement_success_batch(R, t, geom, bundle.held, bundle.ee_pose, clearance=cfg.clearance)
    nb, nc = np.nonzero(bundle.placement_masks == 0)
    if len(nb) > negatives:
        pick = rng.choice(len(nb), negatives, replace=False)
        nb, nc = nb[pick], nc[pick]
    R, t = placement_poses(pts[nc], nb, P, bundle.ee_pose, bottom)
    n_ok = placement_success_batch(R, t, geom, bundle.held, bundle.ee_pose, clearance=cfg.clearance,
                                   object_clearance=cfg.clearance)
    return {"grasp_labels": int(len(g_ok)), "grasp_failures": int((~g_ok).sum()),
            "placement_positives": int(len(p_ok)), "placement_failures": int((~p_ok).sum()),
            "negatives_checked": int(len(n_ok)), "negatives_passing": int(n_ok.sum())}
