"""Contact-mask transformer: scene encoder, object encoder, contact decoder and heads."""
from __future__ import annotations

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, fields

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .geometry import (ball_query, bottom_center, fourier_features, furthest_point_sample,
                       interpolation_weights)


@dataclass
class ModelConfig:
    num_points: int = 1024
    width: int = 64
    num_grasp_tokens: int = 8
    num_place_tokens: int = 8
    num_blocks: int = 3
    level_radii: tuple = (0.05, 0.1, 0.2, 0.4)
    max_neighbors: int = 32
    num_frequencies: int = 6
    ffn_multiplier: int = 2
    max_grasp_width: float = 0.08
    object_points: int = 256
    mask_threshold: float = 0.5

    def __post_init__(self):
        self.level_radii = tuple(float(r) for r in self.level_radii)
        if len(self.level_radii) != 4:
            raise ValueError("four level radii are required")
        if self.num_points % 64:
            raise ValueError(f"num_points={self.num_points} is not divisible by 64")
        if self.width < 2 or self.num_blocks < 1:
            raise ValueError("invalid width / number of blocks")

    @property
    def level_sizes(self) -> tuple:
        return tuple(self.num_points // 4 ** i for i in range(4))

    @property
    def sa_widths(self) -> tuple:
        return (max(1, self.width // 2), self.width, self.width, self.width)

    def cross_attention_level(self, block: int) -> int:
        """Coarse-to-fine schedule over levels 3, 2, 1, cycling if more blocks."""
        return 3 - block % 3

    def to_dict(self) -> dict:
        d = asdict(self)
        d["level_radii"] = list(self.level_radii)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


PAPER_MODEL_CONFIG = dict(num_points=16384, width=256, num_grasp_tokens=100, num_place_tokens=64)


# ---- parameters ----------------------------------------------------------------

class ModelParams(OrderedDict):
    """Ordered name -> Tensor map of every trainable weight."""

    def tensors(self) -> list:
        return list(self.values())

    def zero_grad(self):
        for t in self.values():
            t.grad = None

    def copy(self) -> "ModelParams":
        return ModelParams((k, Tensor(v.data.copy(), requires_grad=True, name=k)) for k, v in self.items())

    def num_parameters(self) -> int:
        return int(sum(t.data.size for t in self.values()))


def _param_shapes(cfg: ModelConfig) -> list:
    w = cfg.width
    sa = cfg.sa_widths
    pe = 6 * cfg.num_frequencies
    ffn = cfg.ffn_multiplier * w
    shapes = []

    def lin(name, fan_in, fan_out, bias=True, relu=False):
        shapes.append((f"{name}.weight", (fan_in, fan_out), "relu" if relu else "fan_in"))
        if bias:
            shapes.append((f"{name}.bias", (fan_out,), "zeros"))

    def ln(name, dim):
        shapes.append((f"{name}.gain", (dim,), "ones"))
        shapes.append((f"{name}.bias", (dim,), "zeros"))

    # set abstraction: relative xyz (3) + features of the previous level (height for level 0)
    in_dims = [1, sa[0], sa[1], sa[2]]
    for i in range(4):
        lin(f"encoder.sa{i}.fc1", 3 + in_dims[i], sa[i], relu=True)
        lin(f"encoder.sa{i}.fc2", sa[i], sa[i], relu=True)
    # feature propagation, coarse to fine
    lin("encoder.fp3.fc1", sa[3], w, relu=True)
    lin("encoder.fp3.fc2", w, w)
    for i in (2, 1, 0):
        lin(f"encoder.fp{i}.fc1", w + sa[i], w, relu=True)
        lin(f"encoder.fp{i}.fc2", w, w)
    lin("decoder.pos_proj", pe, w)
    lin("object_encoder.fc1", 3, sa[0], relu=True)
    lin("object_encoder.fc2", sa[0], w, relu=True)
    lin("object_encoder.out", w, w)
    shapes.append(("decoder.grasp_tokens", (cfg.num_grasp_tokens, w), "tokens"))
    shapes.append(("decoder.place_tokens", (cfg.num_place_tokens, w), "tokens"))
    for b in range(cfg.num_blocks):
        p = f"decoder.block{b}"
        for att in ("cross", "self"):
            for m in ("q", "k", "v", "o"):
                lin(f"{p}.{att}.{m}", w, w)
            ln(f"{p}.{att}.norm", w)
        lin(f"{p}.ffn.fc1", w, ffn, relu=True)
        lin(f"{p}.ffn.fc2", ffn, w)
        ln(f"{p}.ffn.norm", w)
    ln("decoder.mask_norm", w)
    lin("decoder.mask_embed", w, w)
    lin("objectness.fc1", w, w, relu=True)
    lin("objectness.fc2", w, 1)
    lin("action.fc1", w, w, relu=True)
    lin("action.fc2", w, w, relu=True)
    lin("action.fc3", w, 7)
    return shapes


GRASP_HEAD_PREFIXES = ("objectness.", "action.")


def initialize_params(cfg: ModelConfig, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, He-uniform bound sqrt(6/fan_in) for layers
    feeding a ReLU, zero biases, N(0, 0.02) query tokens."""
    rng = np.random.default_rng(seed)
    params = ModelParams()
    for name, shape, kind in _param_shapes(cfg):
        if kind in ("fan_in", "relu"):
            bound = (np.sqrt(6.0) if kind == "relu" else 1.0) / np.sqrt(shape[0])
            data = rng.uniform(-bound, bound, size=shape)
        elif kind == "tokens":
            data = rng.normal(0.0, 0.02, size=shape)
        elif kind == "ones":
            data = np.ones(shape)
        else:
            data = np.zeros(shape)
        params[name] = Tensor(data, requires_grad=True, name=name)
    return params


# ---- scene structure (parameter-free, cacheable) ---------------------------------

@dataclass
class SceneStructure:
    """Everything about the encoder graph that depends only on point coordinates."""
    points: list            # per level [n_i, 3]
    level_index: list       # per level: indices into level 0
    neighbors: list         # per SA layer: [n_i, K] padded indices into level i-1 (level 0 for i = 0)
    group_index: list       # per SA layer: flat indices of the distinct neighbors
    group_counts: list      # per SA layer: distinct neighbors per center
    rel_xyz: list           # per SA layer: [sum(counts), 3] neighbor offsets / radius
    interp: list            # per FP layer i in (0, 1, 2): dense [n_i, n_{i+1}] weights
    pos_enc: list           # per level: Fourier features [n_i, 6F]
    heights: np.ndarray     # [N, 1] input point heights


def prepare_scene(points, cfg: ModelConfig, seed_index: int = 0) -> SceneStructure:
    pts = np.asarray(points, dtype=np.float64)
    if len(pts) != cfg.num_points:
        raise ValueError(f"expected {cfg.num_points} points, got {len(pts)}")
    level_pts = [pts]
    level_idx = [np.arange(len(pts))]
    neighbors, gidx, gcnt, rel = [], [], [], []
    prev = pts
    for i, radius in enumerate(cfg.level_radii):
        if i == 0:
            seeds = np.arange(len(pts))
        else:
            seeds = furthest_point_sample(prev, cfg.level_sizes[i], seed_index if i == 1 else 0)
            level_pts.append(prev[seeds])
            level_idx.append(level_idx[-1][seeds])
        centers = level_pts[i]
        nb = ball_query(prev, centers, radius, cfg.max_neighbors)
        neighbors.append(nb)
        # padding repeats the first neighbor, which never changes a max-pool
        distinct = np.ones(nb.shape, dtype=bool)
        distinct[:, 1:] = nb[:, 1:] != nb[:, :1]
        flat = nb[distinct]
        gidx.append(flat)
        gcnt.append(distinct.sum(axis=1))
        rel.append((prev[flat] - np.repeat(centers, gcnt[-1], axis=0)) / radius)
        prev = level_pts[i]
    interp = []
    for i in range(3):
        idx, w = interpolation_weights(level_pts[i + 1], level_pts[i], k=min(3, len(level_pts[i + 1])))
        dense = np.zeros((len(level_pts[i]), len(level_pts[i + 1])))
        np.add.at(dense, (np.repeat(np.arange(len(idx)), idx.shape[1]), idx.ravel()), w.ravel())
        interp.append(dense)
    pos = [fourier_features(p, cfg.num_frequencies) for p in level_pts]
    # height above the table, in units of the first grouping radius like the relative offsets
    heights = pts[:, 2:3] / cfg.level_radii[0]
    return SceneStructure(level_pts, level_idx, neighbors, gidx, gcnt, rel, interp, pos, heights)


# ---- building blocks -------------------------------------------------------------

def _lin(x, params, name):
    return ad.linear(x, params[f"{name}.weight"], params.get(f"{name}.bias"))


def _mlp2(x, params, name, final_relu=True):
    h = ad.relu(_lin(x, params, f"{name}.fc1"))
    h = _lin(h, params, f"{name}.fc2")
    return ad.relu(h) if final_relu else h


def _ln(x, params, name):
    return ad.layernorm(x, params[f"{name}.gain"], params[f"{name}.bias"])


@dataclass
class SceneFeatures:
    points: list        # per level [n_i, 3]
    features: list      # per level Tensor [n_i, width]
    structure: SceneStructure


def encode_scene(cloud, params: ModelParams, cfg: ModelConfig, structure: SceneStructure | None = None,
                 seed_index: int = 0) -> SceneFeatures:
    st = structure if structure is not None else prepare_scene(cloud, cfg, seed_index)
    feats = Tensor(st.heights)
    sa = []
    for i in range(4):
        grouped = ad.concat([Tensor(st.rel_xyz[i]), ad.gather_rows(feats, st.group_index[i])], axis=1)
        h = _mlp2(grouped, params, f"encoder.sa{i}")
        feats = ad.segment_max(h, st.group_counts[i])
        sa.append(feats)
    dec = [None] * 4
    dec[3] = _mlp2(sa[3], params, "encoder.fp3", final_relu=False)
    for i in (2, 1, 0):
        up = ad.matmul(Tensor(st.interp[i]), dec[i + 1])
        dec[i] = _mlp2(ad.concat([up, sa[i]], axis=1), params, f"encoder.fp{i}", final_relu=False)
    return SceneFeatures(st.points, dec, st)


def encode_object(object_cloud, params: ModelParams, cfg: ModelConfig | None = None) -> Tensor:
    pts = np.asarray(object_cloud, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("cannot encode an empty object cloud")
    centered = pts - bottom_center(pts)
    h = _mlp2(Tensor(centered), params, "object_encoder")
    pooled = ad.group_max(h, len(pts))
    return ad.reshape(_lin(pooled, params, "object_encoder.out"), (-1,))


@dataclass
class ContactMaskSet:
    grasp_masks: Tensor          # [G, N]
    place_masks: Tensor          # [P, N]
    objectness: Tensor           # [G]
    interim: list                # per stage: (grasp [G, N], place [P, N]); last entry is the final set
    attention_masks: list = field(default_factory=list)


@dataclass
class ActionParams:
    contact_dir: Tensor      # [N, 3] unit rows
    approach_dir: Tensor     # [N, 3] unit rows
    width: Tensor            # [N, 1] in [0, max width]


def _predict_masks(tokens, f0T, params):
    emb = _lin(_ln(tokens, params, "decoder.mask_norm"), params, "decoder.mask_embed")
    return ad.sigmoid(ad.matmul(emb, f0T))


def _attention(x_q, x_kv, key_pos, params, name, mask):
    q = _lin(x_q, params, f"{name}.q")
    kin = x_kv if key_pos is None else ad.add(x_kv, key_pos)
    k = _lin(kin, params, f"{name}.k")
    v = _lin(x_kv, params, f"{name}.v")
    return _lin(ad.masked_attention(q, k, v, mask), params, f"{name}.o")


def decode_contacts(scene: SceneFeatures, params: ModelParams, cfg: ModelConfig,
                    object_feat: Tensor | None = None, force_full_attention: bool = False) -> ContactMaskSet:
    G, P = cfg.num_grasp_tokens, cfg.num_place_tokens
    place = params["decoder.place_tokens"]
    if object_feat is not None:
        place = ad.add_bias(place, object_feat)
    tokens = ad.concat([params["decoder.grasp_tokens"], place], axis=0)
    f0T = ad.transpose(scene.features[0])
    st = scene.structure
    interim, att_masks = [], []
    for b in range(cfg.num_blocks):
        masks = _predict_masks(tokens, f0T, params)
        interim.append((ad.slice_rows(masks, 0, G), ad.slice_rows(masks, G, G + P)))
        level = cfg.cross_attention_level(b)
        if force_full_attention:
            amask = np.ones((G + P, len(st.points[level])), dtype=bool)
        else:
            # level points are a subset of level 0, so the nearest seed is the point itself
            amask = masks.data[:, st.level_index[level]] > cfg.mask_threshold
        att_masks.append(amask)
        pos = _lin(Tensor(st.pos_enc[level]), params, "decoder.pos_proj")
        p = f"decoder.block{b}"
        kv = scene.features[level]
        tokens = _ln(ad.add(tokens, _attention(tokens, kv, pos, params, f"{p}.cross", amask)),
                     params, f"{p}.cross.norm")
        tokens = _ln(ad.add(tokens, _attention(tokens, tokens, None, params, f"{p}.self", None)),
                     params, f"{p}.self.norm")
        tokens = _ln(ad.add(tokens, _mlp2(tokens, params, f"{p}.ffn", final_relu=False)),
                     params, f"{p}.ffn.norm")
    masks = _predict_masks(tokens, f0T, params)
    grasp, place_m = ad.slice_rows(masks, 0, G), ad.slice_rows(masks, G, G + P)
    interim.append((grasp, place_m))
    obj = ad.sigmoid(_mlp2(ad.slice_rows(tokens, 0, G), params, "objectness", final_relu=False))
    return ContactMaskSet(grasp, place_m, ad.reshape(obj, (G,)), interim, att_masks)


def predict_action_params(scene: SceneFeatures, params: ModelParams, cfg: ModelConfig) -> ActionParams:
    h = ad.relu(_lin(scene.features[0], params, "action.fc1"))
    h = ad.relu(_lin(h, params, "action.fc2"))
    out = _lin(h, params, "action.fc3")
    c = ad.normalize_rows(ad.slice_cols(out, 0, 3))
    a = ad.normalize_rows(ad.slice_cols(out, 3, 6))
    w = ad.scale(ad.sigmoid(ad.slice_cols(out, 6, 7)), cfg.max_grasp_width)
    return ActionParams(c, a, w)


def forward(scene_cloud, params: ModelParams, cfg: ModelConfig, object_cloud=None,
            structure: SceneStructure | None = None, with_actions: bool = True):
    scene = encode_scene(scene_cloud, params, cfg, structure)
    obj = encode_object(object_cloud, params, cfg) if object_cloud is not None else None
    masks = decode_contacts(scene, params, cfg, obj)
    actions = predict_action_params(scene, params, cfg) if with_actions else None
    return masks, actions


# ---- checkpoint file ---------------------------------------------------------------

CKPT_MAGIC = b"M2T2CKPT"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def write_tensors(path, tensors: "OrderedDict[str, np.ndarray]") -> None:
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<I", CKPT_VERSION))
        for name, arr in tensors.items():
            arr = np.asarray(arr, dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def read_tensors(path) -> "OrderedDict[str, np.ndarray]":
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = 8

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError("truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    (version,) = struct.unpack("<I", take(4))
    if version != CKPT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    out = OrderedDict()
    while pos < len(blob):
        (ln,) = struct.unpack("<H", take(2))
        name = take(ln).decode("utf-8")
        (rank,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims)) if rank else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").astype(np.float64).reshape(dims)
        if name in out:
            raise CheckpointError(f"duplicate record {name!r}")
        out[name] = data
    return out


def save_params(params: ModelParams, path) -> None:
    write_tensors(path, OrderedDict((k, v.data) for k, v in params.items()))


def load_params(path, cfg: ModelConfig | None = None) -> ModelParams:
    raw = read_tensors(path)
    params = ModelParams((k, Tensor(v, requires_grad=True, name=k)) for k, v in raw.items()
                         if not k.startswith("train."))
    if cfg is not None:
        expected = {n: s for n, s, _ in _param_shapes(cfg)}
        if set(expected) != set(params):
            raise CheckpointError("checkpoint parameters do not match the model config")
        for n, s in expected.items():
            if params[n].shape != tuple(s):
                raise CheckpointError(f"{n}: shape {params[n].shape} != {s}")
    return params
