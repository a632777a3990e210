import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tacit.autodiff import AdamState, Tensor
from tacit.dataset import generate_dataset, heldout_pairs
from tacit.flow import (
    CheckpointError,
    ConfigMismatchError,
    LossLog,
    TrainConfig,
    TrainingDivergedError,
    batch_arrays,
    compute_grads,
    flow_loss,
    interpolate,
    load_checkpoint,
    load_model,
    save_checkpoint,
    train,
    train_step,
    velocity_target,
)
from tacit.maze import generate_pair
from tacit.model import DiT, ModelConfig, init_params

TINY = ModelConfig(resolution=8, patch_size=4, hidden=8, depth=2, heads=2, freq_dim=16)


def _pairs(n=4, res=8, size=5):
    return batch_arrays([generate_pair(size, s, res) for s in range(n)])


def _trained_tiny(steps=3):
    model = DiT(TINY, seed=0)
    x0, x1 = _pairs()
    state = AdamState(lr=1e-2)
    rng = np.random.default_rng(0)
    for _ in range(steps):
        train_step(model, state, x0, x1, rng)
    return model, state


def test_interpolate_endpoints_and_midpoint():
    x0, x1 = _pairs()
    assert np.array_equal(interpolate(x0, x1, 0.0), x0)
    assert np.array_equal(interpolate(x0, x1, 1.0), x1)
    np.testing.assert_allclose(interpolate(x0, x1, 0.5), (x0 + x1) / 2)
    with pytest.raises(ValueError):
        interpolate(x0, x1[:2], 0.5)
    with pytest.raises(ValueError):
        velocity_target(x0, x1[:2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=4, max_size=4))
def test_interpolate_linearity(ts):
    x0, x1 = _pairs()
    t = np.array(ts)
    lhs = interpolate(x0, x1, t) - x0
    np.testing.assert_allclose(lhs, t[:, None, None, None] * velocity_target(x0, x1), atol=1e-6)


def test_velocity_only_on_path_pixels():
    p = generate_pair(11, 3, 64)
    x0, x1 = batch_arrays([p])
    v = velocity_target(x0, x1)[0]
    moving = np.any(v != 0, axis=0)
    assert np.array_equal(moving, np.all(p.target == (255, 0, 0), axis=-1))
    assert np.all(velocity_target(x0, x0) == 0)


def test_zero_model_loss_is_mean_square_velocity():
    model = DiT(TINY, seed=0)
    x0, x1 = _pairs()
    t = np.array([0.1, 0.4, 0.6, 0.9])
    params = {k: Tensor(v) for k, v in model.params.items()}
    loss = float(flow_loss(model, params, x0, x1, t).data)
    assert abs(loss - float(np.mean(velocity_target(x0, x1).astype(np.float64) ** 2))) < 1e-5


def test_identical_pairs_give_zero_loss_and_no_update():
    model = DiT(TINY, seed=0)
    x0, _ = _pairs()
    before = {k: v.copy() for k, v in model.params.items()}
    loss = train_step(model, AdamState(), x0, x0, np.random.default_rng(0))
    assert loss == 0.0
    assert all(np.array_equal(before[k], model.params[k]) for k in before)


def test_loss_is_nonnegative_and_decreases():
    model = DiT(TINY, seed=0)
    x0, x1 = _pairs()
    state = AdamState(lr=3e-3)
    rng = np.random.default_rng(1)
    losses = [train_step(model, state, x0, x1, rng) for _ in range(60)]
    assert min(losses) >= 0
    assert np.mean(losses[-10:]) < np.mean(losses[:10])


def test_nan_loss_aborts_with_diagnostics():
    model = DiT(TINY, seed=0)
    x0, x1 = _pairs()
    x1 = x1.copy()
    x1[0, 0, 0, 0] = np.nan
    with pytest.raises(TrainingDivergedError, match="step"):
        train_step(model, AdamState(), x0, x1, np.random.default_rng(0))


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig("d", "o", lr=0)
    with pytest.raises(ValueError):
        TrainConfig("d", "o", batch_size=0)


# --- checkpoints -----------------------------------------------------------------


def test_checkpoint_round_trip_is_exact(tmp_path):
    model, state = _trained_tiny()
    a, b = tmp_path / "a.tckp", tmp_path / "b.tckp"
    save_checkpoint(a, TINY, model.params, state, epoch=3, running_loss=0.125)
    ck = load_checkpoint(a)
    assert ck.epoch == 3 and ck.running_loss == 0.125 and ck.config == TINY
    assert all(np.array_equal(ck.params[k], model.params[k]) for k in model.params)
    assert ck.adam.step == state.step
    assert all(np.array_equal(ck.adam.m[k], state.m[k]) for k in state.m)
    save_checkpoint(b, ck.config, ck.params, ck.adam, ck.epoch, ck.running_loss)
    assert a.read_bytes() == b.read_bytes()


def test_forward_bit_identical_after_reload(tmp_path):
    model, _ = _trained_tiny()
    x = np.random.default_rng(9).random((2, 3, 8, 8)).astype(np.float32)
    before = model(x, 0.37)
    save_checkpoint(tmp_path / "c.tckp", TINY, model.params)
    after = load_model(tmp_path / "c.tckp")(x, 0.37)
    assert before.tobytes() == after.tobytes()


def test_checkpoint_errors(tmp_path):
    path = tmp_path / "c.tckp"
    save_checkpoint(path, TINY, init_params(TINY, 0))
    other = ModelConfig(resolution=8, patch_size=4, hidden=8, depth=1, heads=2, freq_dim=16)
    with pytest.raises(ConfigMismatchError):
        load_checkpoint(path, other)
    raw = path.read_bytes()
    (tmp_path / "bad.tckp").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.tckp")
    (tmp_path / "short.tckp").write_bytes(raw[:-7])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "short.tckp")


# --- loss log and loop -------------------------------------------------------------


def test_loss_log(tmp_path):
    log = LossLog()
    log.append(1, 0.5)
    log.append(2, 0.25, 0.01)
    with pytest.raises(ValueError):
        log.append(2, 0.1)
    log.write_csv(tmp_path / "l.csv")
    assert (tmp_path / "l.csv").read_text().splitlines()[0] == "epoch,loss,heldout_l2"
    back = LossLog.read_csv(tmp_path / "l.csv")
    assert back.losses == [0.5, 0.25] and back.heldout == [(2, 0.01)]
    back.truncate(1)
    assert back.losses == [0.5]


def _tiny_run(tmp_path, epochs, resume=None):
    cfg = TrainConfig(
        data_dir=str(tmp_path / "data"),
        out_dir=str(tmp_path / "out"),
        model=TINY,
        lr=3e-3,
        batch_size=4,
        epochs=epochs,
        checkpoint_interval=1,
        seed=2,
        heldout_count=4,
        heldout_sizes=(5,),
    )
    return train(cfg, resume=resume, heldout=heldout_pairs(4, (5,), 8))


def test_train_writes_checkpoints_and_resumes_identically(tmp_path):
    generate_dataset(tmp_path / "data", 12, [5], seed=1, resolution=8, shard_size=5)
    full = _tiny_run(tmp_path, 3)
    assert [r[0] for r in full.rows] == [1, 2, 3]
    assert all(r[2] is not None for r in full.rows)
    final = (tmp_path / "out" / "ckpt_epoch_003.tckp").read_bytes()

    # interrupt after epoch 2 and resume from that checkpoint
    for f in (tmp_path / "out").iterdir():
        if f.name in ("ckpt_epoch_003.tckp", "latest.tckp"):
            f.unlink()
    resumed = _tiny_run(tmp_path, 3, resume=tmp_path / "out" / "ckpt_epoch_002.tckp")
    assert [r[0] for r in resumed.rows] == [1, 2, 3]
    assert resumed.rows == full.rows
    assert (tmp_path / "out" / "ckpt_epoch_003.tckp").read_bytes() == final
    assert LossLog.read_csv(tmp_path / "out" / "loss_log.csv").losses == full.losses


def test_compute_grads_names_every_parameter():
    model = DiT(TINY, seed=0)
    x0, x1 = _pairs(2)
    loss, grads = compute_grads(model, x0, x1, np.array([0.2, 0.8]))
    assert loss > 0 and set(grads) == set(model.params)
    assert all(grads[k].shape == model.params[k].shape for k in grads)
