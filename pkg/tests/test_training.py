import warnings

import numpy as np
import pytest

from fmocc.checkpoint import checkpoint_bytes, load_checkpoint, read_config_hash, save_checkpoint
from fmocc.config import RunConfig
from fmocc.errors import CheckpointError, ConfigError, ContractError, DimensionError
from fmocc.scene import generate_scene
from fmocc.training import (
    FlowConfig,
    FmoccModel,
    TrainState,
    adamw_state,
    epoch_batches,
    fit,
    infer,
    train_step,
)


def tiny_config(**over) -> RunConfig:
    base = {
        "scene.dims": [12, 12, 4],
        "scene.ego": [6, 6, 2],
        "scene.num_boxes": 3,
        "model.depth": 1,
        "model.state_size": 4,
        "model.scan_chunk": 16,
        "train.epochs": 2,
        "train.batch_size": 2,
        "optim.warmup_steps": 0,
    }
    base.update(over)
    return RunConfig().replace(**base)


def scenes(cfg, n, first=0):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return [(s, generate_scene(cfg.scene.spec(), s)) for s in range(first, first + n)]


def snapshot(model):
    return {k: p.data.copy() for k, p in model.named_parameters().items()}


# --- FlowConfig ------------------------------------------------------------------------


@pytest.mark.parametrize("kw", [dict(n_euler_steps=0), dict(flow_weight=-1.0),
                                dict(ce_weight=-0.5), dict(head_on="nope"),
                                dict(t_sampling="logit")])
def test_flow_config_invariants(kw):
    with pytest.raises(ContractError):
        FlowConfig(**kw)


# --- train_step ------------------------------------------------------------------------


def test_zero_loss_weights_leave_parameters_unchanged():
    cfg = tiny_config(**{"optim.weight_decay": 0.0})
    model = FmoccModel.from_config(cfg)
    before = snapshot(model)
    state = TrainState(E=1, steps_per_epoch=1)
    train_step(scenes(cfg, 2), model, state, FlowConfig(flow_weight=0.0, ce_weight=0.0))
    for k, v in snapshot(model).items():
        assert np.array_equal(v, before[k]), k


def test_train_step_is_deterministic():
    cfg = tiny_config()
    batch = scenes(cfg, 2)
    outs = []
    for _ in range(2):
        model = FmoccModel.from_config(cfg)
        state = TrainState(E=2, steps_per_epoch=2, seed=3)
        losses = [train_step(batch, model, state, FlowConfig(), cfg.mask_schedule())
                  for _ in range(3)]
        outs.append((losses, snapshot(model)))
    assert outs[0][0] == outs[1][0]
    for k in outs[0][1]:
        assert np.array_equal(outs[0][1][k], outs[1][1][k])


def test_logged_p_drop_endpoints():
    cfg = tiny_config(**{"train.epochs": 3})
    model = FmoccModel.from_config(cfg)
    state = fit(model, scenes(cfg, 4), cfg)
    p = [h[4] for h in state.history]
    assert p[0] == 0.0 and p[-1] == 0.25
    assert all(a <= b for a, b in zip(p, p[1:]))


def test_baseline_reports_zero_flow_loss():
    cfg = tiny_config(**{"model.use_fmssm": False})
    model = FmoccModel.from_config(cfg)
    fl, ce, _ = train_step(scenes(cfg, 2), model, TrainState(E=1, steps_per_epoch=1),
                           FlowConfig())
    assert fl == 0.0 and ce > 0
    assert model.velocity is None and model.emb is None


def test_overfit_single_scene_reduces_flow_loss():
    cfg = tiny_config(**{"optim.lr": 3e-3})
    batch = scenes(cfg, 1)
    model = FmoccModel.from_config(cfg)
    state = TrainState(E=1, steps_per_epoch=200, optimizer=adamw_state(cfg))
    fl = [train_step(batch, model, state, FlowConfig())[0] for _ in range(200)]
    assert np.mean(fl[-10:]) <= 0.5 * fl[10]


@pytest.mark.parametrize("head_on", ["masked_input", "full_integration"])
def test_head_modes_train(head_on):
    cfg = tiny_config()
    model = FmoccModel.from_config(cfg)
    fl, ce, _ = train_step(scenes(cfg, 1), model, TrainState(E=1, steps_per_epoch=1),
                           FlowConfig(head_on=head_on, n_euler_steps=2))
    assert np.isfinite(fl) and np.isfinite(ce)


def test_infer_shapes_and_channel_check():
    cfg = tiny_config()
    model = FmoccModel.from_config(cfg)
    sc = scenes(cfg, 1)[0][1]
    pred = infer(sc.features, model, 2)
    assert pred.shape == sc.labels.shape
    assert pred.min() >= 0 and pred.max() < cfg.scene.num_classes
    assert infer(np.zeros_like(sc.features), model, 1).shape == sc.labels.shape
    with pytest.raises(DimensionError):
        infer(sc.features[..., :3], model)


def test_epoch_batches_cover_every_scene_once():
    b = epoch_batches(10, 4, seed=1, epoch=2)
    assert [len(x) for x in b] == [4, 4, 2]
    assert sorted(np.concatenate(b)) == list(range(10))


# --- config ----------------------------------------------------------------------------


def test_config_yaml_round_trip(tmp_path):
    cfg = tiny_config()
    cfg.save(tmp_path / "c.yaml")
    back = RunConfig.load(tmp_path / "c.yaml")
    assert back == cfg and back.hash() == cfg.hash()


def test_unknown_config_key_is_error(tmp_path):
    (tmp_path / "c.yaml").write_text("model:\n  widht: 3\n")
    with pytest.raises(ConfigError, match="model.widht"):
        RunConfig.load(tmp_path / "c.yaml")
    with pytest.raises(ConfigError):
        RunConfig().replace(**{"train.nope": 1})


def test_config_type_errors():
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"train": {"epochs": "many"}})
    with pytest.raises(ConfigError):
        RunConfig.from_dict({"mask": {"enabled": 1}})


@pytest.mark.parametrize("key,value", [("scene.num_boxes", 4), ("scene.noise_sigma", 0.3),
                                       ("scene.dims", [16, 12, 4]), ("scene.prototype_seed", 1)])
def test_scene_hash_sensitive_to_every_spec_field(key, value):
    cfg = RunConfig()
    other = cfg.replace(**{key: value})
    assert other.scene_hash() != cfg.scene_hash()
    assert other.hash() != cfg.hash()


def test_eval_settings_do_not_change_training_hash():
    cfg = RunConfig()
    assert cfg.replace(**{"eval.mask_seed": 99}).hash() == cfg.hash()
    assert cfg.replace(**{"optim.lr": 1e-4}).scene_hash() == cfg.scene_hash()


# --- checkpoints -----------------------------------------------------------------------


def test_checkpoint_round_trip_is_bit_identical(tmp_path):
    cfg = tiny_config()
    model = FmoccModel.from_config(cfg)
    state = fit(model, scenes(cfg, 2), cfg)
    save_checkpoint(tmp_path / "a.fmck", model, state, cfg.hash())
    fresh = FmoccModel.from_config(cfg.replace(seed=9))
    loaded = load_checkpoint(tmp_path / "a.fmck", fresh, cfg.hash())
    assert checkpoint_bytes(fresh, loaded, cfg.hash()) == (tmp_path / "a.fmck").read_bytes()
    assert read_config_hash(tmp_path / "a.fmck") == cfg.hash()


def test_checkpoint_hash_mismatch_refused(tmp_path):
    cfg = tiny_config()
    model = FmoccModel.from_config(cfg)
    save_checkpoint(tmp_path / "a.fmck", model, TrainState(E=1, steps_per_epoch=1), cfg.hash())
    with pytest.raises(CheckpointError, match="config"):
        load_checkpoint(tmp_path / "a.fmck", model, "0" * 64)


def test_checkpoint_corruption_detected(tmp_path):
    cfg = tiny_config()
    model = FmoccModel.from_config(cfg)
    buf = checkpoint_bytes(model, TrainState(E=1, steps_per_epoch=1), cfg.hash())
    (tmp_path / "bad.fmck").write_bytes(b"XXXX" + buf[4:])
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "bad.fmck", model)
    (tmp_path / "short.fmck").write_bytes(buf[:-16])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(tmp_path / "short.fmck", model)
    with pytest.raises(CheckpointError, match="mismatch"):
        (tmp_path / "ok.fmck").write_bytes(buf)
        load_checkpoint(tmp_path / "ok.fmck", FmoccModel.from_config(
            cfg.replace(**{"model.use_fmssm": False})))


def test_resume_reproduces_uninterrupted_run(tmp_path):
    cfg = tiny_config(**{"train.epochs": 3})
    data = scenes(cfg, 4)
    full_model = FmoccModel.from_config(cfg)
    full = fit(full_model, data, cfg)

    part_model = FmoccModel.from_config(cfg)

    class Stop(Exception):
        pass

    def stop_at_5(state, _):
        if state.step == 5:
            save_checkpoint(tmp_path / "mid.fmck", part_model, state, cfg.hash())
            raise Stop

    with pytest.raises(Stop):
        fit(part_model, data, cfg, on_step=stop_at_5)
    resumed_model = FmoccModel.from_config(cfg)
    state = load_checkpoint(tmp_path / "mid.fmck", resumed_model, cfg.hash())
    resumed = fit(resumed_model, data, cfg, state=state)
    assert resumed.history == full.history
    assert checkpoint_bytes(resumed_model, resumed, cfg.hash()) == \
        checkpoint_bytes(full_model, full, cfg.hash())
