"""Set-matching training objective for grasp and placement contact masks."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import DEFAULT_GRIPPER, GripperModel

PROB_CLAMP = 1e-7
DICE_EPS = 1e-6


# ---- matching ------------------------------------------------------------------

def _clamp(p):
    return np.clip(p, PROB_CLAMP, 1.0 - PROB_CLAMP)


def matching_cost(objectness, pred_masks, gt_masks) -> np.ndarray:
    """C[i, j] = 1 - o_i + BCE(pred_i, gt_j) + DICE(pred_i, gt_j)."""
    o = np.asarray(objectness, dtype=np.float64).reshape(-1)
    p = np.asarray(pred_masks, dtype=np.float64)
    g = np.asarray(gt_masks, dtype=np.float64)
    n = p.shape[1]
    pc = _clamp(p)
    bce = -(np.log(pc) @ g.T + np.log(1.0 - pc) @ (1.0 - g).T) / n
    dice = 1.0 - 2.0 * (p @ g.T) / (p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] + DICE_EPS)
    return (1.0 - o)[:, None] + bce + dice


@dataclass
class MatchResult:
    assignment: list        # (prediction index, ground-truth index), ordered by ground truth
    total_cost: float

    @property
    def pred_indices(self) -> np.ndarray:
        return np.array([i for i, _ in self.assignment], dtype=np.int64)

    @property
    def gt_indices(self) -> np.ndarray:
        return np.array([j for _, j in self.assignment], dtype=np.int64)


def _solve(cost: np.ndarray) -> np.ndarray:
    """Shortest-augmenting-path assignment for an n x m matrix with n <= m.

    Returns the column assigned to every row.
    """
    n, m = cost.shape
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)     # owner[j] = row (1-based) holding column j
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, np.inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            cur = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (cur < minv[1:])
            minv[1:][better] = cur[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], np.inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            u[owner[used]] += delta
            v[used] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    cols = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            cols[owner[j] - 1] = j - 1
    return cols


def _optimal(cost: np.ndarray):
    """Optimal assignment of the columns of a G x M matrix (G >= M) to distinct rows."""
    if cost.shape[1] == 0:
        return np.zeros(0, dtype=np.int64), 0.0
    rows = _solve(cost.T)
    return rows, float(sum(cost[rows[j], j] for j in range(cost.shape[1])))


def hungarian_match(cost) -> MatchResult:
    """Minimum-cost injective matching of ground truths (columns) to predictions (rows).

    Among optimal assignments the lexicographically smallest sequence of
    prediction indices (in ground-truth order) is returned.
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    G, M = cost.shape
    if G < M:
        raise ValueError(f"infeasible matching: {G} predictions for {M} ground truths")
    if not np.all(np.isfinite(cost)):
        raise ValueError("cost matrix has non-finite entries")
    rows, best = _optimal(cost)
    tol = 1e-12 * max(1.0, abs(best))
    fixed_rows: list = []
    fixed_cost = 0.0
    for j in range(M):
        free_rows = [i for i in range(G) if i not in fixed_rows]
        rest_cols = list(range(j + 1, M))
        chosen = int(rows[j])
        for i in free_rows:
            if i >= chosen:
                break
            sub_rows = [r for r in free_rows if r != i]
            _, sub_cost = _optimal(cost[np.ix_(sub_rows, rest_cols)])
            if fixed_cost + cost[i, j] + sub_cost <= best + tol:
                chosen = i
                break
        fixed_rows.append(chosen)
        fixed_cost += cost[chosen, j]
        if j + 1 < M:
            sub_rows = [r for r in range(G) if r not in fixed_rows]
            sub, _ = _optimal(cost[np.ix_(sub_rows, rest_cols)])
            rows = np.concatenate([np.array(fixed_rows), np.array(sub_rows)[sub]])
    pairs = [(int(fixed_rows[j]), j) for j in range(M)]
    total = float(sum(cost[i, j] for i, j in pairs))
    return MatchResult(pairs, total)


# ---- loss terms ------------------------------------------------------------------

def bce_terms(pred: Tensor, target) -> Tensor:
    """Elementwise binary cross entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    g = np.asarray(target, dtype=np.float64)
    p = ad.clip(pred, PROB_CLAMP, 1.0 - PROB_CLAMP)
    pos = ad.mul(ad.log(p), g)
    negl = ad.mul(ad.log(ad.add(ad.neg(p), 1.0)), 1.0 - g)
    return ad.neg(ad.add(pos, negl))


def dice_rows(pred: Tensor, target) -> Tensor:
    """Soft DICE loss per row: 1 - 2 sum(p g) / (sum p + sum g + eps)."""
    g = np.asarray(target, dtype=np.float64)
    num = ad.reduce_sum(ad.mul(pred, g), axis=1)
    den = ad.add(ad.reduce_sum(pred, axis=1), g.sum(axis=1) + DICE_EPS)
    return ad.add(ad.neg(ad.scale(ad.div(num, den), 2.0)), 1.0)


def objectness_loss(objectness: Tensor, matched) -> Tensor:
    labels = np.zeros(objectness.shape[0])
    labels[np.asarray(list(matched), dtype=np.int64)] = 1.0
    return ad.reduce_mean(bce_terms(objectness, labels))


def topk_indices(values: np.ndarray, k: int) -> np.ndarray:
    """Column indices of the k largest entries per row (ties by lowest index)."""
    return np.argsort(-values, axis=1, kind="stable")[:, :k]


def mask_loss_topk(pred: Tensor, gt, k: int) -> Tensor:
    """Mean over masks of (mean of the k largest per-point BCE terms) + DICE."""
    gt = np.asarray(gt, dtype=np.float64)
    m, n = pred.shape
    if gt.shape != (m, n):
        raise ValueError(f"mask shapes differ: {pred.shape} vs {gt.shape}")
    if not 1 <= k <= n:
        raise ValueError(f"k={k} outside [1, {n}]")
    if m == 0:
        return Tensor(0.0)
    bce = bce_terms(pred, gt)
    cols = topk_indices(bce.data, k)
    rows = np.repeat(np.arange(m), k)
    top = ad.reshape(ad.take(bce, rows, cols.ravel()), (m, k))
    per_mask = ad.add(ad.reduce_mean(top, axis=1), dice_rows(pred, gt))
    return ad.reduce_mean(per_mask)


def placement_loss(pred: Tensor, gt, k: int) -> Tensor:
    """Placement masks pair with ground truth by rotation bin; same machinery as the mask loss."""
    return mask_loss_topk(pred, gt, k)


def _keypoint_maps(gripper: GripperModel):
    v = gripper.key_points
    rot = np.zeros((9, 15))
    trans = np.zeros((3, 15))
    for k in range(5):
        for r in range(3):
            trans[r, 3 * k + r] = 1.0
            for c in range(3):
                rot[3 * r + c, 3 * k + r] = v[k, c]
    group = np.zeros((15, 5))
    for k in range(5):
        group[3 * k:3 * k + 3, k] = 1.0
    return rot, trans, group


def grasp_pose_tensors(points, contact_dir: Tensor, approach_dir: Tensor, width: Tensor, depth: float):
    """Differentiable grasp reconstruction; returns (R row-major [n, 9], t [n, 3])."""
    a = ad.normalize_rows(approach_dir)
    c = ad.normalize_rows(ad.sub(contact_dir, ad.mul_rows(a, ad.row_dot(contact_dir, a))))
    b = ad.cross_rows(a, c)
    cols = []
    for r in range(3):
        cols += [ad.slice_cols(c, r, r + 1), ad.slice_cols(b, r, r + 1), ad.slice_cols(a, r, r + 1)]
    R9 = ad.concat(cols, axis=1)
    half_w = ad.scale(ad.reshape(width, (width.shape[0],)), 0.5)
    t = ad.add(ad.add(ad.mul_rows(c, half_w), ad.scale(a, depth)), np.asarray(points, dtype=np.float64))
    return R9, t


def pose_keypoints(R9: Tensor, t: Tensor, gripper: GripperModel = DEFAULT_GRIPPER) -> Tensor:
    rot, trans, _ = _keypoint_maps(gripper)
    return ad.add(ad.matmul(R9, rot), ad.matmul(t, trans))


def keypoints_numpy(rotations, translations, gripper: GripperModel = DEFAULT_GRIPPER) -> np.ndarray:
    R = np.asarray(rotations, dtype=np.float64).reshape(-1, 3, 3)
    t = np.asarray(translations, dtype=np.float64).reshape(-1, 3)
    return (np.einsum("nij,kj->nki", R, gripper.key_points) + t[:, None, :]).reshape(len(R), 15)


def nearest_gt(pred_kp: np.ndarray, gt_kp: np.ndarray, chunk: int = 2048) -> np.ndarray:
    """Index of the ground-truth pose with the smallest summed key-point distance."""
    out = np.empty(len(pred_kp), dtype=np.int64)
    P = pred_kp.reshape(len(pred_kp), 5, 3)
    Gk = gt_kp.reshape(len(gt_kp), 5, 3)
    for s in range(0, len(P), chunk):
        blk = P[s:s + chunk]
        d = np.zeros((len(blk), len(Gk)))
        for k in range(5):
            sq = (np.sum(blk[:, k] ** 2, axis=1)[:, None] + np.sum(Gk[:, k] ** 2, axis=1)[None, :]
                  - 2.0 * blk[:, k] @ Gk[:, k].T)
            d += np.sqrt(np.maximum(sq, 0.0))
        out[s:s + chunk] = np.argmin(d, axis=1)
    return out


def adds_loss(scores: Tensor, pred_R9: Tensor, pred_t: Tensor, gt_rotations, gt_translations,
              gripper: GripperModel = DEFAULT_GRIPPER) -> Tensor:
    """Confidence-weighted distance from each predicted grasp to its nearest ground truth."""
    gt_kp = keypoints_numpy(gt_rotations, gt_translations, gripper)
    if len(gt_kp) == 0:
        raise ValueError("adds_loss needs at least one ground-truth grasp")
    n = scores.shape[0]
    if n == 0:
        return Tensor(0.0)
    kp = pose_keypoints(pred_R9, pred_t, gripper)
    nearest = nearest_gt(kp.data, gt_kp)
    _, _, group = _keypoint_maps(gripper)
    diff = ad.sub(kp, gt_kp[nearest])
    dist = ad.reduce_sum(ad.sqrt(ad.matmul(ad.mul(diff, diff), group)), axis=1)
    return ad.scale(ad.reduce_sum(ad.mul(scores, dist)), 1.0 / n)


# ---- total objective ---------------------------------------------------------------

@dataclass
class LossConfig:
    w_obj: float = 1.0
    w_mask: float = 1.0
    w_adds: float = 10.0
    w_place: float = 1.0
    k_grasp: int = 32
    k_place: int = 64
    mask_threshold: float = 0.5
    deep_supervision: bool = True

    def __post_init__(self):
        for name in ("w_obj", "w_mask", "w_adds", "w_place"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


PAPER_LOSS_CONFIG = dict(k_grasp=512, k_place=1024)


@dataclass
class GroundTruthScene:
    grasp_masks: np.ndarray           # [M, N] binary, one row per graspable object
    grasp_rotations: np.ndarray       # [K, 3, 3]
    grasp_translations: np.ndarray    # [K, 3]
    grasp_object: np.ndarray          # [K] row of grasp_masks each grasp belongs to
    grasp_contacts: np.ndarray        # [K] contact point index
    placement_masks: np.ndarray | None = None   # [P, N] binary


@dataclass
class LossBreakdown:
    total: Tensor
    objectness: float = 0.0
    mask: float = 0.0
    adds: float = 0.0
    placing: float = 0.0
    mask_per_set: list = field(default_factory=list)
    placing_per_set: list = field(default_factory=list)
    match: MatchResult | None = None

    def as_dict(self) -> dict:
        return {"total": float(self.total.data), "objectness": self.objectness, "mask": self.mask,
                "adds": self.adds, "placing": self.placing,
                "mask_per_set": list(self.mask_per_set), "placing_per_set": list(self.placing_per_set)}


def total_loss(masks, actions, gt: GroundTruthScene, points, cfg: LossConfig = LossConfig(),
               mode: str = "joint", gripper: GripperModel = DEFAULT_GRIPPER) -> LossBreakdown:
    """Weighted sum of objectness, deep-supervised mask, ADD-S and placement losses.

    The assignment is computed once on the final masks and reused for every
    interim mask set.
    """
    if mode not in ("joint", "grasp", "place"):
        raise ValueError(f"unknown mode {mode!r}")
    terms = []
    out = LossBreakdown(total=Tensor(0.0))
    sets = masks.interim if cfg.deep_supervision else masks.interim[-1:]
    if mode in ("joint", "grasp"):
        M = len(gt.grasp_masks)
        if M:
            cost = matching_cost(masks.objectness.data, masks.grasp_masks.data, gt.grasp_masks)
            match = hungarian_match(cost)
        else:
            match = MatchResult([], 0.0)
        out.match = match
        rows, cols = match.pred_indices, match.gt_indices
        l_obj = objectness_loss(masks.objectness, rows)
        out.objectness = float(l_obj.data)
        terms.append(ad.scale(l_obj, cfg.w_obj))
        if M:
            per_set = [mask_loss_topk(ad.gather_rows(g, rows), gt.grasp_masks[cols], cfg.k_grasp)
                       for g, _ in sets]
            l_mask = per_set[0]
            for t in per_set[1:]:
                l_mask = ad.add(l_mask, t)
            out.mask_per_set = [float(t.data) for t in per_set]
            out.mask = float(l_mask.data)
            terms.append(ad.scale(l_mask, cfg.w_mask))
            l_adds = _adds_from_outputs(masks, actions, gt, points, rows, cfg, gripper)
            out.adds = float(l_adds.data)
            if cfg.w_adds > 0:
                terms.append(ad.scale(l_adds, cfg.w_adds))
    if mode in ("joint", "place") and gt.placement_masks is not None and cfg.w_place > 0:
        per_set = [placement_loss(p, gt.placement_masks, cfg.k_place) for _, p in sets]
        l_place = per_set[0]
        for t in per_set[1:]:
            l_place = ad.add(l_place, t)
        out.placing_per_set = [float(t.data) for t in per_set]
        out.placing = float(l_place.data)
        terms.append(ad.scale(l_place, cfg.w_place))
    total = terms[0] if terms else Tensor(0.0)
    for t in terms[1:]:
        total = ad.add(total, t)
    out.total = total
    return out


def _adds_from_outputs(masks, actions, gt, points, rows, cfg, gripper) -> Tensor:
    final = masks.grasp_masks
    sel = final.data[rows] > cfg.mask_threshold
    r_local, cols = np.nonzero(sel)
    if len(cols) == 0 or len(gt.grasp_rotations) == 0:
        return Tensor(0.0)
    uniq, inv = np.unique(cols, return_inverse=True)
    R9, t = grasp_pose_tensors(np.asarray(points)[uniq], ad.gather_rows(actions.contact_dir, uniq),
                               ad.gather_rows(actions.approach_dir, uniq),
                               ad.gather_rows(actions.width, uniq), gripper.base_to_baseline)
    scores = ad.take(final, rows[r_local], cols)
    R9 = ad.gather_rows(R9, inv)
    t = ad.gather_rows(t, inv)
    return adds_loss(scores, R9, t, gt.grasp_rotations, gt.grasp_translations, gripper)
