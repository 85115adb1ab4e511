"""Finite-difference gradient checks for every differentiable operation and a small model."""
from __future__ import annotations

from collections import OrderedDict

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, grad_check
from .losses import (GroundTruthScene, LossConfig, adds_loss, bce_terms, dice_rows, grasp_pose_tensors,
                     mask_loss_topk, total_loss)
from .network import ModelConfig, forward, initialize_params

TOLERANCE = 1e-4
DESK_MODEL = dict(num_points=128, width=8, num_grasp_tokens=4, num_place_tokens=4, num_blocks=3,
                  max_neighbors=16, num_frequencies=2, object_points=32)


def _leaf(rng, *shape, lo=-1.0, hi=1.0):
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _op_cases(rng) -> "OrderedDict[str, tuple]":
    """name -> (function of the leaves returning a Tensor, leaves)."""
    cases = OrderedDict()

    def case(name, fn, *leaves):
        cases[name] = (fn, list(leaves))

    a, b = _leaf(rng, 4, 3), _leaf(rng, 4, 3)
    case("add", lambda: ad.add(a, b), a, b)
    case("sub", lambda: ad.sub(a, b), a, b)
    case("neg", lambda: ad.neg(a), a)
    case("scale", lambda: ad.scale(a, 1.7), a)
    case("mul", lambda: ad.mul(a, b), a, b)
    pos = _leaf(rng, 4, 3, lo=0.5, hi=2.0)
    case("div", lambda: ad.div(a, pos), a, pos)
    s = _leaf(rng, 4)
    case("mul_rows", lambda: ad.mul_rows(a, s), a, s)
    # keep kinks away from zero so central differences stay on one side
    r = Tensor(np.sign(rng.normal(size=(4, 3))) * rng.uniform(0.1, 1.0, size=(4, 3)), requires_grad=True)
    case("relu", lambda: ad.relu(r), r)
    case("sigmoid", lambda: ad.sigmoid(a), a)
    case("exp", lambda: ad.exp(a), a)
    case("log", lambda: ad.log(pos), pos)
    case("sqrt", lambda: ad.sqrt(pos), pos)
    cl = Tensor(rng.choice([-1.0, 1.0], size=(4, 3)) * rng.uniform(0.0, 0.4, size=(4, 3))
                + rng.choice([0.0, 1.5], size=(4, 3)), requires_grad=True)
    case("clip", lambda: ad.clip(cl, -0.5, 1.0), cl)
    m = _leaf(rng, 3, 5)
    case("matmul", lambda: ad.matmul(a, m), a, m)
    case("transpose", lambda: ad.transpose(a), a)
    bias = _leaf(rng, 3)
    case("add_bias", lambda: ad.add_bias(a, bias), a, bias)
    case("linear", lambda: ad.linear(a, m, _b5), a, m, _b5 := _leaf(rng, 5))
    case("reduce_sum", lambda: ad.reduce_sum(a, axis=0), a)
    case("reduce_mean", lambda: ad.reduce_mean(a, axis=1), a)
    case("softmax", lambda: ad.softmax(a), a)
    gain = _leaf(rng, 3, lo=0.5, hi=1.5)
    case("layernorm", lambda: ad.layernorm(a, gain, bias), a, gain, bias)
    case("normalize_rows", lambda: ad.normalize_rows(a), a)
    case("cross_rows", lambda: ad.cross_rows(a, b), a, b)
    case("row_dot", lambda: ad.row_dot(a, b), a, b)
    q, k, v = _leaf(rng, 3, 4), _leaf(rng, 5, 4), _leaf(rng, 5, 4)
    amask = np.array([[1, 0, 1, 1, 0], [0, 0, 0, 0, 0], [1, 1, 1, 1, 1]], dtype=bool)
    case("masked_attention", lambda: ad.masked_attention(q, k, v, amask), q, k, v)
    case("concat", lambda: ad.concat([a, b], axis=1), a, b)
    case("slice_cols", lambda: ad.slice_cols(a, 1, 3), a)
    case("slice_rows", lambda: ad.slice_rows(a, 1, 3), a)
    case("gather_rows", lambda: ad.gather_rows(a, [0, 2, 2, 3]), a)
    case("take", lambda: ad.take(a, [0, 1, 1, 3], [2, 0, 0, 1]), a)
    case("reshape", lambda: ad.reshape(a, (3, 4)), a)
    g = Tensor(rng.permutation(24).reshape(6, 4) * 0.1, requires_grad=True)
    case("group_max", lambda: ad.group_max(g, 3), g)
    case("segment_max", lambda: ad.segment_max(g, [1, 3, 2]), g)
    return cases


def _loss_cases(rng) -> "OrderedDict[str, tuple]":
    cases = OrderedDict()
    p = Tensor(rng.uniform(0.05, 0.95, size=(3, 12)), requires_grad=True)
    gt = (rng.random((3, 12)) < 0.4).astype(float)
    cases["bce_terms"] = (lambda: bce_terms(p, gt), [p])
    cases["dice_rows"] = (lambda: dice_rows(p, gt), [p])
    cases["mask_loss_topk"] = (lambda: mask_loss_topk(p, gt, 5), [p])
    pts = rng.normal(size=(6, 3)) * 0.05
    c, a = _leaf(rng, 6, 3), _leaf(rng, 6, 3)
    w = _leaf(rng, 6, 1, lo=0.01, hi=0.07)
    cases["grasp_pose"] = (lambda: ad.concat(list(grasp_pose_tensors(pts, c, a, w, 0.1)), axis=1), [c, a, w])
    sc = _leaf(rng, 6, lo=0.1, hi=1.0)
    gR = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(4)])
    gR *= np.sign(np.linalg.det(gR))[:, None, None]
    gt_t = rng.normal(size=(4, 3)) * 0.05

    def adds():
        R9, t = grasp_pose_tensors(pts, c, a, w, 0.1)
        return adds_loss(sc, R9, t, gR, gt_t)
    cases["adds_loss"] = (adds, [sc, c, a, w])
    return cases


def desk_model_fixture(seed: int = 0):
    """Small synthetic scene, ground truth and parameters for the full-model check."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(**DESK_MODEL)
    n = cfg.num_points
    table = np.column_stack([rng.uniform(-0.2, 0.2, n // 2), rng.uniform(-0.2, 0.2, n // 2), rng.uniform(-0.002, 0.002, n // 2)])
    obj = rng.uniform([-0.03, -0.03, 0.0], [0.03, 0.03, 0.08], size=(n - n // 2, 3)) + [0.05, 0.02, 0.0]
    points = np.vstack([table, obj])
    masks = np.zeros((2, n))
    masks[0, n // 2:n // 2 + 20] = 1
    masks[1, n // 2 + 30:n // 2 + 50] = 1
    k = 6
    gR = np.stack([np.linalg.qr(rng.normal(size=(3, 3)))[0] for _ in range(k)])
    gR *= np.sign(np.linalg.det(gR))[:, None, None]
    contacts = np.array([n // 2 + i for i in (0, 3, 7, 31, 35, 40)])
    gt = GroundTruthScene(masks, gR, points[contacts] + rng.normal(size=(k, 3)) * 0.02,
                          np.array([0, 0, 0, 1, 1, 1]), contacts,
                          (rng.random((cfg.num_place_tokens, n)) < 0.5).astype(float))
    obj_cloud = rng.uniform([-0.02, -0.02, 0.3], [0.02, 0.02, 0.36], size=(cfg.object_points, 3))
    params = initialize_params(cfg, seed)
    # zero biases put every all-zero row exactly on a ReLU kink; check at a generic point instead
    for name, t in params.items():
        if name.endswith(".bias"):
            t.data[...] = rng.uniform(-0.1, 0.1, size=t.shape)
    return cfg, params, points, obj_cloud, gt


def check_model(seed: int = 0, entries_per_tensor: int = 5, mode: str = "joint") -> float:
    """Max relative error of the full objective's gradient over a random subset of every parameter.

    Relative errors use a denominator floor of 1e-4, so gradients below that are
    held to 1e-8 absolute error: at a loss of order 10 one ulp over a 2e-6 step
    is about 1e-9, and some entries (key biases, which softmax ignores) are
    exactly zero.
    """
    cfg, params, points, obj_cloud, gt = desk_model_fixture(seed)
    lcfg = LossConfig(k_grasp=16, k_place=16)

    def f():
        masks, actions = forward(points, params, cfg, object_cloud=obj_cloud)
        return total_loss(masks, actions, gt, points, lcfg, mode=mode).total
    return grad_check(f, params.tensors(), eps=1e-6, max_entries=entries_per_tensor,
                      rng=np.random.default_rng(seed), floor=1e-4)


MODULES = ("autodiff", "losses", "network")


def run_checks(module: str | None = None, seed: int = 0) -> "OrderedDict[str, float]":
    """name -> max relative error for the requested module (all when None)."""
    if module is not None and module not in MODULES:
        raise ValueError(f"unknown module {module!r}; choose from {MODULES}")
    out = OrderedDict()
    rng = np.random.default_rng(seed)
    groups = []
    if module in (None, "autodiff"):
        groups.append(("autodiff", _op_cases(rng)))
    if module in (None, "losses"):
        groups.append(("losses", _loss_cases(rng)))
    for prefix, cases in groups:
        for name, (fn, leaves) in cases.items():
            probe_rng = np.random.default_rng([seed, len(out)])
            r = None

            def scalar(fn=fn):
                nonlocal r
                y = fn()
                if r is None:
                    r = probe_rng.normal(size=y.shape)
                return ad.reduce_sum(ad.mul(y, r)) if y.data.ndim else y
            out[f"{prefix}.{name}"] = grad_check(scalar, leaves, eps=1e-6)
            r = None
    if module in (None, "network"):
        out["network.desk_model"] = check_model(seed)
    return out
