import json
import math

import numpy as np
import pytest
import torch

from helpers import tiny_bundle, tiny_config

from smcl import augment as aug
from smcl.losses import NonFiniteLossError
from smcl.model import load_checkpoint
from smcl.trainer import (
    ConfigError,
    TrainConfig,
    assemble_five_views,
    assemble_two_views,
    config_fingerprint,
    config_from_dict,
    config_to_dict,
    epoch_batches,
    learning_rate,
    load_config,
    make_model,
    masking_gate,
    parse_lr_schedule,
    rng_streams,
    train,
)


def read_rows(path):
    return [json.loads(line) for line in path.read_text().splitlines()]


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------


def test_default_config_is_the_long_tail_recipe():
    cfg = TrainConfig()
    assert cfg.epochs == 200
    assert cfg.batch_size == 256
    assert cfg.lr_initial == 0.1
    assert cfg.lr_schedule == "step:160,180:0.1"
    assert cfg.momentum == 0.9
    assert cfg.weight_decay == 2e-4
    assert cfg.drw_start_epoch == 160
    assert cfg.drw_beta == 0.9999
    assert cfg.mask_start_epoch == 160
    assert cfg.mask_probability == 0.2
    assert cfg.alpha == 1.0
    assert cfg.tau == 0.1
    assert cfg.lambda_ == 1.0
    assert cfg.mu == 0.3
    assert cfg.mask_mode == "saliency"
    assert cfg.backbone == "resnet32"
    cfg.validate()


@pytest.mark.parametrize(
    "overrides",
    [
        {"drw_start_epoch": 300},
        {"mask_start_epoch": 300},
        {"mask_probability": -0.1},
        {"mask_probability": 1.5},
        {"alpha": 0.0},
        {"tau": 0.0},
        {"mu": -1.0},
        {"fill": "median"},
        {"mask_mode": "edges"},
        {"backbone": "vgg"},
        {"augmentation": "trivial"},
        {"lr_schedule": "linear"},
        {"area_cap": 0.0},
        {"momentum": 1.0},
        {"checkpoint_interval": 0},
    ],
)
def test_config_validation_rejects(overrides):
    cfg = TrainConfig(**overrides)
    with pytest.raises(ConfigError):
        cfg.validate()


def test_lambda_key_aliasing_roundtrip():
    cfg = config_from_dict({"lambda": 2.5, "mu": 0.1})
    assert cfg.lambda_ == 2.5
    d = config_to_dict(cfg)
    assert d["lambda"] == 2.5
    assert "lambda_" not in d
    again = config_from_dict(d)
    assert again == cfg


def test_unknown_keys_are_listed():
    with pytest.raises(ConfigError, match="unknown config keys: learning_rate, taus"):
        config_from_dict({"learning_rate": 0.1, "taus": 0.2})


def test_config_value_coercion():
    cfg = config_from_dict({"epochs": "50", "lr_initial": "0.3", "strict_mixed_ce": "false",
                            "drw_start_epoch": 10, "mask_start_epoch": 10})
    assert cfg.epochs == 50
    assert cfg.lr_initial == 0.3
    assert cfg.strict_mixed_ce is False
    cfg2 = config_from_dict({"strict_mixed_ce": "yes"})
    assert cfg2.strict_mixed_ce is True
    with pytest.raises(ConfigError, match="bad value"):
        config_from_dict({"epochs": "soon"})
    with pytest.raises(ConfigError, match="bad value"):
        config_from_dict({"strict_mixed_ce": "maybe"})


def test_load_config_yaml(tmp_path):
    p = tmp_path / "c.yaml"
    p.write_text("epochs: 4\nlambda: 0.7\nbackbone: tiny4\n"
                 "drw_start_epoch: 2\nmask_start_epoch: 2\n")
    cfg = load_config(p)
    assert cfg.epochs == 4
    assert cfg.lambda_ == 0.7
    assert cfg.backbone == "tiny4"
    bad = tmp_path / "bad.yaml"
    bad.write_text("- just\n- a\n- list\n")
    with pytest.raises(ConfigError):
        load_config(bad)


def test_config_fingerprint_stability():
    a = config_fingerprint(TrainConfig())
    b = config_fingerprint(TrainConfig())
    assert a == b
    assert len(a) == 12
    assert int(a, 16) >= 0
    c = config_fingerprint(TrainConfig(seed=1))
    assert c != a


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_parse_lr_schedule_forms():
    assert parse_lr_schedule("step:160,180:0.1") == ("step", (160, 180), 0.1)
    assert parse_lr_schedule("step:5:0.5") == ("step", (5,), 0.5)
    assert parse_lr_schedule("cosine") == ("cosine", (), 1.0)
    for bad in ("step:180,160:0.1", "step:10:0", "step:10:2", "step:10", "warmup", "step:a:0.1"):
        with pytest.raises(ConfigError):
            parse_lr_schedule(bad)


def test_learning_rate_step_exact():
    cfg = TrainConfig()  # 0.1, drops at 160 and 180 by 0.1
    assert learning_rate(cfg, 0) == 0.1
    assert learning_rate(cfg, 159) == 0.1
    assert learning_rate(cfg, 160) == pytest.approx(0.01, rel=1e-12)
    assert learning_rate(cfg, 179) == pytest.approx(0.01, rel=1e-12)
    assert learning_rate(cfg, 180) == pytest.approx(0.001, rel=1e-12)
    assert learning_rate(cfg, 199) == pytest.approx(0.001, rel=1e-12)


def test_learning_rate_cosine():
    cfg = tiny_config(epochs=100, lr_schedule="cosine", lr_initial=0.2)
    assert learning_rate(cfg, 0) == pytest.approx(0.2)
    assert learning_rate(cfg, 50) == pytest.approx(0.1)
    assert learning_rate(cfg, 100) == pytest.approx(0.0, abs=1e-12)
    xs = [learning_rate(cfg, e) for e in range(101)]
    assert all(a >= b for a, b in zip(xs, xs[1:]))  # monotone decay


# ---------------------------------------------------------------------------
# gate and rng streams
# ---------------------------------------------------------------------------


def test_masking_gate_before_start_draws_nothing():
    cfg = tiny_config(epochs=10, mask_start_epoch=5, mask_probability=1.0)
    a = np.random.default_rng(0)
    b = np.random.default_rng(0)
    assert masking_gate(2, cfg, a) is False
    # the pre-phase call must not consume the stream
    assert a.random() == b.random()


def test_masking_gate_rate():
    cfg = tiny_config(epochs=10, mask_start_epoch=0, mask_probability=0.2)
    rng = np.random.default_rng(123)
    hits = sum(masking_gate(5, cfg, rng) for _ in range(5000))
    assert abs(hits / 5000 - 0.2) < 0.02


def test_rng_streams_deterministic_and_distinct():
    s1 = rng_streams(42)
    s2 = rng_streams(42)
    assert s1.init_seed == s2.init_seed
    assert s1.data.random() == s2.data.random()
    assert s1.masking.random() == s2.masking.random()
    s3 = rng_streams(43)
    assert s3.init_seed != s1.init_seed
    # streams must be mutually independent draws
    fresh = rng_streams(42)
    draws = {float(fresh.data.random()), float(fresh.masking.random()),
             float(fresh.gate.random())}
    assert len(draws) == 3


def test_make_model_deterministic():
    cfg = tiny_config()
    a = make_model(cfg, num_classes=4)
    b = make_model(cfg, num_classes=4)
    for (ka, va), (_, vb) in zip(a.state_dict().items(), b.state_dict().items()):
        assert torch.equal(va, vb), ka


def test_epoch_batches_partition():
    rng = np.random.default_rng(0)
    batches = epoch_batches(53, 16, rng)
    assert [len(b) for b in batches] == [16, 16, 16, 5]
    flat = np.concatenate(batches)
    assert sorted(flat.tolist()) == list(range(53))


# ---------------------------------------------------------------------------
# view assembly
# ---------------------------------------------------------------------------


def test_assemble_two_views_shapes_and_labels(bundle):
    cfg = tiny_config()
    idx = np.arange(6)
    vb = assemble_two_views(bundle.train, idx, cfg, bundle.channel_mean,
                            bundle.channel_std, np.random.default_rng(0))
    assert vb.views.shape == (2, 6, 3, 12, 12)
    assert torch.equal(vb.source_labels, torch.from_numpy(bundle.train.labels[idx]))
    assert vb.target_labels is None
    # two independent augmentations of the same source almost surely differ
    assert not torch.equal(vb.views[0], vb.views[1])


def test_assemble_two_views_identity_policy_is_normalized_source(bundle):
    cfg = tiny_config(augmentation="none")
    idx = np.array([0, 3])
    vb = assemble_two_views(bundle.train, idx, cfg, bundle.channel_mean,
                            bundle.channel_std, np.random.default_rng(0))
    ref = aug.normalize(aug.to_float(bundle.train.images[0]),
                        bundle.channel_mean, bundle.channel_std)
    got = vb.views[0, 0].numpy().transpose(1, 2, 0)
    np.testing.assert_allclose(got, ref, rtol=1e-5, atol=1e-6)
    torch.testing.assert_close(vb.views[0], vb.views[1])


def five_view_setup(bundle, cfg):
    from smcl.data import TargetSampler, effective_numbers

    sampler = TargetSampler(effective_numbers(bundle.histogram),
                            bundle.train.class_indices())
    return sampler


def test_assemble_five_views_gate_off(bundle):
    cfg = tiny_config(augmentation="none")
    sampler = five_view_setup(bundle, cfg)
    idx = np.arange(5)
    vb = assemble_five_views(bundle.train, idx, sampler, cfg, bundle,
                             np.random.default_rng(1), np.random.default_rng(2),
                             gate_on=False)
    assert vb.views.shape[0] == 5
    torch.testing.assert_close(vb.area, torch.zeros(5, dtype=torch.float64))
    # with the identity policy the unmasked third view equals the source views
    torch.testing.assert_close(vb.views[4], vb.views[0])
    # target views really show the drawn targets
    assert vb.target_labels.shape == (5,)
    assert all(0 <= int(t) < bundle.
               histogram.num_classes for t in vb.target_labels)


def test_assemble_five_views_gate_on_masks_with_mean_fill(bundle):
    cfg = tiny_config(augmentation="none", fill="mean", alpha=5.0, mask_mode="center")
    sampler = five_view_setup(bundle, cfg)
    idx = np.arange(8)
    vb = assemble_five_views(bundle.train, idx, sampler, cfg, bundle,
                             np.random.default_rng(1), np.random.default_rng(2),
                             gate_on=True)
    areas = vb.area.numpy()
    assert np.all((0 <= areas) & (areas <= 0.9))
    assert areas.max() > 0
    # mean fill normalizes to exactly zero inside the box
    row = int(np.argmax(areas))
    masked = vb.views[4, row].numpy()
    h = w = masked.shape[1]
    side = int(np.floor(h * np.sqrt(areas[row]) + 0.5))
    r0 = h // 2 - side // 2
    c0 = w // 2 - side // 2
    np.testing.assert_allclose(masked[:, r0 : r0 + side, c0 : c0 + side], 0.0, atol=1e-5)


def test_assemble_five_views_deterministic(bundle):
    cfg = tiny_config()
    sampler = five_view_setup(bundle, cfg)
    idx = np.arange(4)
    a = assemble_five_views(bundle.train, idx, sampler, cfg, bundle,
                            np.random.default_rng(3), np.random.default_rng(4), True)
    b = assemble_five_views(bundle.train, idx, sampler, cfg, bundle,
                            np.random.default_rng(3), np.random.default_rng(4), True)
    torch.testing.assert_close(a.views, b.views)
    assert torch.equal(a.target_labels, b.target_labels)
    torch.testing.assert_close(a.area, b.area)


# ---------------------------------------------------------------------------
# the loop
# ---------------------------------------------------------------------------


def test_train_writes_metrics_and_checkpoint(tmp_path, bundle):
    cfg = tiny_config(epochs=2, mask_start_epoch=1, mask_probability=1.0,
                      drw_start_epoch=1)
    result = train(cfg, bundle, tmp_path / "run")
    assert result.completed_epochs == 2
    rows = read_rows(result.metrics_path)
    step_rows = [r for r in rows if r["kind"] == "step"]
    epoch_rows = [r for r in rows if r["kind"] == "epoch"]
    assert len(epoch_rows) == 2
    batches = math.ceil(len(bundle.train) / cfg.batch_size)
    assert len(step_rows) == 2 * batches
    for r in step_rows:
        assert set(r) == {"kind", "epoch", "step", "mce", "msc", "total", "mean_area"}
        assert math.isfinite(r["total"])
    for r in epoch_rows:
        assert {"lr", "drw_active", "masking_phase", "test_accuracy",
                "group_accuracy"} <= set(r)
    # phase flags flip exactly at the configured epochs
    assert epoch_rows[0]["masking_phase"] is False
    assert epoch_rows[0]["drw_active"] is False
    assert epoch_rows[1]["masking_phase"] is True
    assert epoch_rows[1]["drw_active"] is True
    # masked epochs actually mask
    masked_steps = [r for r in step_rows if r["epoch"] == 1]
    assert any(r["mean_area"] > 0 for r in masked_steps)
    assert all(r["mean_area"] == 0 for r in step_rows if r["epoch"] == 0)
    ck = load_checkpoint(result.checkpoint_path)
    assert ck["epoch"] == 2
    assert ck["arch"] == "tiny4"
    assert result.final_eval is not None
    assert epoch_rows[-1]["test_accuracy"] == pytest.approx(result.final_eval.overall_acc)


def test_train_reruns_are_byte_identical(tmp_path, bundle):
    cfg = tiny_config(epochs=2, mask_start_epoch=1, mask_probability=0.5)
    a = train(cfg, bundle, tmp_path / "a")
    b = train(cfg, bundle, tmp_path / "b")
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()
    for (k, va), (_, vb) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(va, vb), k


def test_zero_mask_probability_never_enters_mask_phase(tmp_path, bundle):
    cfg = tiny_config(epochs=1, mask_start_epoch=0, mask_probability=0.0)
    result = train(cfg, bundle, tmp_path / "r")
    rows = read_rows(result.metrics_path)
    assert all(r["mean_area"] == 0 for r in rows if r["kind"] == "step")
    assert all(r["masking_phase"] is False for r in rows if r["kind"] == "epoch")


def test_train_stop_and_resume_matches_straight_run(tmp_path, bundle):
    cfg = tiny_config(epochs=3, mask_start_epoch=1, mask_probability=0.5,
                      drw_start_epoch=2, checkpoint_interval=10)
    full = train(cfg, bundle, tmp_path / "full")
    part = train(cfg, bundle, tmp_path / "part", stop_after=1)
    assert part.completed_epochs == 1
    cont = train(cfg, bundle, tmp_path / "part", resume=True)
    assert cont.completed_epochs == 3
    assert (tmp_path / "full/metrics.jsonl").read_bytes() == \
        (tmp_path / "part/metrics.jsonl").read_bytes()
    for (k, va), (_, vb) in zip(full.model.state_dict().items(),
                                cont.model.state_dict().items()):
        assert torch.equal(va, vb), k


def test_resume_rejects_other_config(tmp_path, bundle):
    cfg = tiny_config(epochs=2)
    train(cfg, bundle, tmp_path / "r", stop_after=1)
    other = tiny_config(epochs=2, seed=99)
    with pytest.raises(ConfigError, match="fingerprint"):
        train(other, bundle, tmp_path / "r", resume=True)


def test_zero_epochs_short_circuits(tmp_path, bundle):
    cfg = tiny_config(epochs=0)
    result = train(cfg, bundle, tmp_path / "r")
    assert result.completed_epochs == 0
    assert result.metrics_path.read_text() == ""
    assert result.checkpoint_path.exists()


def test_divergence_aborts_with_logged_row(tmp_path, bundle):
    # lr * weight_decay overflows float32 on the first update, so every
    # parameter goes non-finite and the post-step check must fire
    cfg = tiny_config(epochs=1, lr_initial=1e38, weight_decay=1e6)
    with pytest.raises(NonFiniteLossError):
        train(cfg, bundle, tmp_path / "r")
    rows = read_rows(tmp_path / "r/metrics.jsonl")
    assert rows[-1]["kind"] == "abort"
    assert rows[-1]["epoch"] == 0
    assert "error" in rows[-1]
    assert (tmp_path / "r/checkpoint.pt").exists()  # last good state kept
