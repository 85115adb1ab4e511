import json

import numpy as np
import pytest

from m2t2 import autodiff as ad
from m2t2.network import ModelConfig, ModelParams, encode_object, initialize_params
from m2t2.train import (RunConfig, TrainConfig, TrainState, batch_gradients, load_config, load_dataset,
                        load_run_config_for, optimizer_step, save_checkpoint, train)

SMALL = ModelConfig(width=8, num_grasp_tokens=2, num_place_tokens=8, num_blocks=1, max_neighbors=16)


def _scalar_state(value):
    params = ModelParams([("w", ad.Tensor(np.array([value]), requires_grad=True, name="w"))])
    return TrainState.fresh(params)


# ---- optimizer -------------------------------------------------------------------------

def test_adamw_matches_hand_recurrence():
    cfg = TrainConfig(lr=0.01, weight_decay=0.1)
    state = _scalar_state(1.5)
    g = 0.3
    theta, m, v = 1.5, 0.0, 0.0
    for t in range(1, 21):
        optimizer_step(state, {"w": np.array([g])}, cfg)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        mhat, vhat = m / (1 - 0.9 ** t), v / (1 - 0.999 ** t)
        theta = theta - 0.01 * (mhat / (np.sqrt(vhat) + 1e-8) + 0.1 * theta)
        assert state.params["w"].data[0] == pytest.approx(theta, rel=1e-14, abs=1e-15)
    assert state.step == 20


def test_zero_gradient_without_decay_is_a_no_op():
    state = _scalar_state(0.7)
    for _ in range(5):
        optimizer_step(state, {"w": np.zeros(1)}, TrainConfig(weight_decay=0.0))
    assert state.params["w"].data[0] == 0.7


def test_decay_alone_shrinks_geometrically():
    cfg = TrainConfig(lr=0.01, weight_decay=0.05)
    state = _scalar_state(2.0)
    for _ in range(10):
        optimizer_step(state, {"w": np.zeros(1)}, cfg)
    assert state.params["w"].data[0] == pytest.approx(2.0 * (1 - 0.01 * 0.05) ** 10, rel=1e-14)


def test_non_finite_gradient_names_parameter():
    state = _scalar_state(1.0)
    with pytest.raises(FloatingPointError, match="'w'"):
        optimizer_step(state, {"w": np.array([np.nan])}, TrainConfig())
    assert state.step == 0 and state.params["w"].data[0] == 1.0


def test_config_validation(tmp_path):
    for bad in ({"lr": 0}, {"batch_size": 0}, {"w_adds": -1}, {"mode": "both"}):
        with pytest.raises(ValueError):
            TrainConfig(**bad)
    with pytest.raises(ValueError):
        RunConfig.from_dict({"train": {"learning_rate": 1.0}})
    with pytest.raises(ValueError):
        RunConfig.from_dict({"model": {"num_points": 512}})
    path = tmp_path / "c.json"
    path.write_text(json.dumps(RunConfig(SMALL).to_dict()))
    assert load_config(path).to_dict() == RunConfig(SMALL).to_dict()


# ---- training runs ---------------------------------------------------------------------

def _run(scene_dir, tmp_path, tag, **overrides):
    run = RunConfig(SMALL, TrainConfig(**{"epochs": 1, "batch_size": 2, **overrides}))
    ckpt = tmp_path / f"{tag}.ckpt"
    state, metrics = train(run, scene_dir, ckpt, tmp_path / f"{tag}.jsonl")
    return run, state, metrics, ckpt


def test_training_is_bit_identical(scene_dir, tmp_path):
    _, _, m1, c1 = _run(scene_dir, tmp_path, "a", epochs=2)
    _, _, m2, c2 = _run(scene_dir, tmp_path, "b", epochs=2)
    assert c1.read_bytes() == c2.read_bytes()
    assert [r["losses"] for r in m1] == [r["losses"] for r in m2]
    lines = (tmp_path / "a.jsonl").read_text().splitlines()
    assert len(lines) == 2 and {"step", "losses", "wall_time"} <= set(json.loads(lines[0]))


def test_checkpoint_roundtrip(scene_dir, tmp_path):
    run, state, _, ckpt = _run(scene_dir, tmp_path, "a")
    back = TrainState.load(ckpt)
    assert back.step == state.step
    assert all(np.array_equal(back.params[k].data, state.params[k].data) for k in state.params)
    save_checkpoint(back, run, tmp_path / "again.ckpt")
    assert (tmp_path / "again.ckpt").read_bytes() == ckpt.read_bytes()
    assert load_run_config_for(ckpt).to_dict() == run.to_dict()


def test_place_only_leaves_grasp_heads_untouched(scene_dir):
    samples = load_dataset(scene_dir, SMALL)
    params = initialize_params(SMALL, 0)
    cfg = TrainConfig(mode="place")
    _, grads = batch_gradients(samples, params, SMALL, cfg.loss_config(SMALL), "place")
    heads = [k for k in grads if k.startswith(("objectness.", "action."))]
    assert heads and all(not grads[k].any() for k in heads)
    assert any(grads[k].any() for k in grads if k.startswith("decoder."))
    _, grads = batch_gradients(samples, params, SMALL, cfg.loss_config(SMALL), "grasp")
    assert all(grads[k].any() for k in heads if k.endswith("weight"))


@pytest.fixture(scope="module")
def overfit(scene_dir):
    run = RunConfig(ModelConfig(), TrainConfig(epochs=50, batch_size=1, max_scenes=1))
    state, metrics = train(run, scene_dir)
    return run, state, metrics


def test_overfit_one_scene(overfit):
    _, _, metrics = overfit
    loss = np.array([r["losses"]["total"] for r in metrics])
    assert len(loss) == 50
    assert loss[-5:].mean() <= 0.5 * loss[0]
    windows = loss.reshape(5, 10).mean(axis=1)
    assert np.all(np.diff(windows) <= 0)


def test_object_encoder_separates_objects_after_training(overfit, rng):
    run, state, _ = overfit
    small = rng.uniform(-0.02, 0.02, (256, 3))
    tall = rng.uniform([-0.015, -0.015, -0.05], [0.015, 0.015, 0.05], (256, 3))
    a = encode_object(small, state.params).data
    b = encode_object(tall, state.params).data
    assert np.linalg.norm(a - b) > 1e-3 * np.linalg.norm(a)
