"""AdamW training loop, training state checkpoints and dataset loading."""
from __future__ import annotations

import json
import logging
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .datagen import GenConfig, SceneBundle, deserialize, list_bundles
from .losses import GroundTruthScene, LossConfig, total_loss
from .network import (CheckpointError, ModelConfig, ModelParams, SceneStructure, forward, initialize_params,
                      prepare_scene, read_tensors, write_tensors)

log = logging.getLogger(__name__)

MODES = ("joint", "grasp", "place")


@dataclass
class TrainConfig:
    lr: float = 0.0008
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    batch_size: int = 4
    epochs: int = 30
    seed: int = 0
    mode: str = "joint"
    w_obj: float = 1.0
    w_mask: float = 1.0
    w_adds: float = 10.0
    w_place: float = 1.0
    k_grasp: int = 32
    k_place: int = 64
    deep_supervision: bool = True
    mask_radius: float = 0.02      # about one point spacing at 1024 points
    max_scenes: int | None = None
    running_decay: float = 0.9

    def __post_init__(self):
        if self.lr <= 0:
            raise ValueError("learning rate must be positive")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be >= 1 and epochs >= 0")
        for name in ("w_obj", "w_mask", "w_adds", "w_place", "weight_decay"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")

    def loss_config(self, model_cfg: ModelConfig) -> LossConfig:
        return LossConfig(self.w_obj, self.w_mask, self.w_adds, self.w_place,
                          min(self.k_grasp, model_cfg.num_points), min(self.k_place, model_cfg.num_points),
                          model_cfg.mask_threshold, self.deep_supervision)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class RunConfig:
    """The three sections of a config file."""
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: GenConfig = field(default_factory=GenConfig)

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "train": asdict(self.train), "data": self.data.to_dict()}

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - {"model", "train", "data"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        cfg = cls(ModelConfig.from_dict(d.get("model", {})), TrainConfig.from_dict(d.get("train", {})),
                  GenConfig.from_dict(d.get("data", {})))
        if cfg.data.num_points != cfg.model.num_points:
            raise ValueError("data.num_points and model.num_points differ")
        return cfg


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(path) as f:
        return RunConfig.from_dict(json.load(f))


# ---- data ---------------------------------------------------------------------------

@dataclass
class TrainingSample:
    points: np.ndarray
    structure: SceneStructure
    object_cloud: np.ndarray
    gt: GroundTruthScene
    bundle: SceneBundle


def build_ground_truth(bundle: SceneBundle, mask_radius: float = 0.02, max_objects: int | None = None,
                       num_bins: int | None = None) -> GroundTruthScene:
    """Per-object grasp masks: points of the object within ``mask_radius`` of one of its labelled contacts."""
    pts = bundle.points.astype(np.float64)
    rows, owner = [], {}
    for inst in bundle.instances:
        sel = bundle.grasp_object_ids == inst.id
        if not sel.any():
            continue
        if max_objects is not None and len(rows) >= max_objects:
            break
        contacts = pts[bundle.grasp_contacts[sel]]
        mine = bundle.point_ids == inst.id
        d = np.min(np.linalg.norm(pts[:, None, :] - contacts[None, :, :], axis=2), axis=1)
        owner[inst.id] = len(rows)
        rows.append((mine & (d <= mask_radius)).astype(np.float64))
    keep = np.array([int(o) in owner for o in bundle.grasp_object_ids], dtype=bool)
    masks = np.array(rows) if rows else np.zeros((0, len(pts)))
    place = bundle.placement_masks.astype(np.float64)
    if num_bins is not None and place.shape[0] != num_bins:
        raise ValueError(f"scene has {place.shape[0]} rotation bins, model expects {num_bins}")
    return GroundTruthScene(
        grasp_masks=masks,
        grasp_rotations=bundle.grasp_rotations()[keep],
        grasp_translations=bundle.grasp_translations()[keep],
        grasp_object=np.array([owner[int(o)] for o in bundle.grasp_object_ids[keep]], dtype=np.int64),
        grasp_contacts=bundle.grasp_contacts[keep].astype(np.int64),
        placement_masks=place)


def load_dataset(data_dir, model_cfg: ModelConfig, train_cfg: TrainConfig | None = None) -> list:
    train_cfg = train_cfg or TrainConfig()
    dirs = list_bundles(data_dir)
    if not dirs:
        raise FileNotFoundError(f"no scene bundles under {data_dir}")
    if train_cfg.max_scenes is not None:
        dirs = dirs[:train_cfg.max_scenes]
    out = []
    for d in dirs:
        b = deserialize(d)
        if b.num_points != model_cfg.num_points:
            raise ValueError(f"{d}: {b.num_points} points, model expects {model_cfg.num_points}")
        pts = b.points.astype(np.float64)
        gt = build_ground_truth(b, train_cfg.mask_radius, model_cfg.num_grasp_tokens, model_cfg.num_place_tokens)
        out.append(TrainingSample(pts, prepare_scene(pts, model_cfg), b.held_cloud(), gt, b))
    return out


# ---- optimizer state ------------------------------------------------------------------

@dataclass
class TrainState:
    params: ModelParams
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"
    step: int = 0
    running_loss: float = float("nan")
    best_eval: float = float("nan")

    @classmethod
    def fresh(cls, params: ModelParams) -> "TrainState":
        zeros = OrderedDict((k, np.zeros_like(t.data)) for k, t in params.items())
        return cls(params, zeros, OrderedDict((k, z.copy()) for k, z in zeros.items()))

    def records(self) -> "OrderedDict[str, np.ndarray]":
        rec = OrderedDict((k, t.data) for k, t in self.params.items())
        rec["train.step"] = np.array(float(self.step))
        rec["train.running_loss"] = np.array(self.running_loss)
        rec["train.best_eval"] = np.array(self.best_eval)
        for k in self.params:
            rec[f"train.m.{k}"] = self.m[k]
            rec[f"train.v.{k}"] = self.v[k]
        return rec

    def save(self, path) -> None:
        write_tensors(path, self.records())

    @classmethod
    def load(cls, path) -> "TrainState":
        raw = read_tensors(path)
        params = ModelParams((k, ad.Tensor(v, requires_grad=True, name=k)) for k, v in raw.items()
                             if not k.startswith("train."))
        try:
            m = OrderedDict((k, raw[f"train.m.{k}"]) for k in params)
            v = OrderedDict((k, raw[f"train.v.{k}"]) for k in params)
            step = int(raw["train.step"])
        except KeyError as exc:
            raise CheckpointError(f"checkpoint has no training state ({exc})") from None
        for k in params:
            if m[k].shape != params[k].shape or v[k].shape != params[k].shape:
                raise CheckpointError(f"optimizer moments of {k} do not match the parameter shape")
        return cls(params, m, v, step, float(raw["train.running_loss"]), float(raw["train.best_eval"]))


def optimizer_step(state: TrainState, grads, cfg: TrainConfig) -> TrainState:
    """One AdamW update with bias correction and decoupled weight decay (in place)."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient in parameter {name!r}")
    t = state.step + 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    for name, p in state.params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.m[name] = b1 * state.m[name] + (1.0 - b1) * g
        v = state.v[name] = b2 * state.v[name] + (1.0 - b2) * g * g
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps) + cfg.weight_decay * p.data
        p.data = p.data - cfg.lr * update
    state.step = t
    return state


# ---- loop ---------------------------------------------------------------------------------

def sample_loss(sample: TrainingSample, params: ModelParams, model_cfg: ModelConfig, loss_cfg: LossConfig,
                mode: str):
    obj = sample.object_cloud if mode in ("joint", "place") else None
    masks, actions = forward(sample.points, params, model_cfg, object_cloud=obj, structure=sample.structure,
                             with_actions=mode != "place")
    return total_loss(masks, actions, sample.gt, sample.points, loss_cfg, mode=mode)


def batch_gradients(samples, params: ModelParams, model_cfg: ModelConfig, loss_cfg: LossConfig, mode: str):
    """Mean loss breakdown and mean gradients over a batch, accumulated in batch order."""
    params.zero_grad()
    parts = []
    for s in samples:
        br = sample_loss(s, params, model_cfg, loss_cfg, mode)
        ad.backward(br.total)
        parts.append(br.as_dict())
    n = len(samples)
    grads = OrderedDict((k, (t.grad / n) if t.grad is not None else np.zeros_like(t.data))
                        for k, t in params.items())
    mean = {k: float(np.mean([p[k] for p in parts])) for k in ("total", "objectness", "mask", "adds", "placing")}
    return mean, grads


def train(run: RunConfig, data_dir, out_ckpt=None, log_path=None, samples=None, callback=None):
    """Train from scratch. Returns (final TrainState, list of per-step metric records)."""
    cfg, model_cfg = run.train, run.model
    if samples is None:
        samples = load_dataset(data_dir, model_cfg, cfg)
    loss_cfg = cfg.loss_config(model_cfg)
    state = TrainState.fresh(initialize_params(model_cfg, cfg.seed))
    metrics = []
    logf = open(log_path, "w") if log_path else None
    t0 = time.time()
    try:
        for epoch in range(cfg.epochs):
            order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
            for start in range(0, len(order), cfg.batch_size):
                batch = [samples[i] for i in order[start:start + cfg.batch_size]]
                losses, grads = batch_gradients(batch, state.params, model_cfg, loss_cfg, cfg.mode)
                optimizer_step(state, grads, cfg)
                r = cfg.running_decay
                state.running_loss = (losses["total"] if np.isnan(state.running_loss)
                                      else r * state.running_loss + (1 - r) * losses["total"])
                rec = {"step": state.step, "epoch": epoch, "losses": losses, "wall_time": time.time() - t0}
                metrics.append(rec)
                if logf:
                    logf.write(json.dumps(rec) + "\n")
                    logf.flush()
                if callback:
                    callback(rec)
            log.info("epoch %d step %d running loss %.4f", epoch, state.step, state.running_loss)
            if out_ckpt:
                save_checkpoint(state, run, out_ckpt)
    finally:
        if logf:
            logf.close()
    return state, metrics


def save_checkpoint(state: TrainState, run: RunConfig, path) -> None:
    """Write the checkpoint and a JSON sidecar holding the run configuration."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state.save(path)
    Path(str(path) + ".json").write_text(json.dumps(run.to_dict(), indent=1, sort_keys=True) + "\n")


def load_run_config_for(ckpt, override=None) -> RunConfig:
    if override is not None:
        return load_config(override)
    side = Path(str(ckpt) + ".json")
    if not side.exists():
        raise FileNotFoundError(f"{side} not found; pass --config")
    return RunConfig.from_dict(json.loads(side.read_text()))
