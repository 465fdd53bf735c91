import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import count_confusion
from rgbd_sfda import losses, pipeline, toydata
from rgbd_sfda.encoder import EncoderConfig, ModelParams, checkpoint_bytes, init_params
from rgbd_sfda.numerics import InvalidInputError
from rgbd_sfda.pipeline import (
    AdamW,
    AdaptConfig,
    ConfigKeyError,
    TrainingError,
    adapt_target,
    build_profiles,
    confusion_matrix,
    ema_update,
    evaluate,
    expand_grid,
    iou_from_confusion,
    parse_config,
    pretrain_source,
    run_ablation_matrix,
    stylize_batch,
    summarize,
)

TINY = EncoderConfig(stage_dims=(8, 8), heads_per_stage=(2, 2), decoder_dim=8)
FAST = AdaptConfig(pretrain_epochs=2, pretrain_lr=2e-3, epochs=1, lr=5e-4, ema_period=2, log_every=1)


@pytest.fixture(scope="module")
def toy():
    spec = toydata.ToySceneSpec(image_size=16)
    return toydata.generate_split(spec, "source", 6), toydata.generate_split(spec, "target", 6)


def scalar_params(value, cfg=TINY):
    return ModelParams(cfg, {"w": np.array(value, dtype=float)})


# ---------------------------------------------------------------------------
# EMA


def test_ema_examples():
    t, s = scalar_params(1.0), scalar_params(0.0)
    assert ema_update(t, s, 0.99).tensors["w"] == pytest.approx(0.99, abs=1e-15)
    assert ema_update(t, s, 1.0).tensors["w"] == 1.0
    assert ema_update(t, s, 0.0).tensors["w"] == 0.0


def test_ema_exact_copies(rng):
    a, b = init_params(TINY, 0), init_params(TINY, 1)
    for k, v in ema_update(a, b, 0.0).tensors.items():
        np.testing.assert_array_equal(v, b.tensors[k])
    for k, v in ema_update(a, b, 1.0).tensors.items():
        np.testing.assert_array_equal(v, a.tensors[k])


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(-1e3, 1e3), st.floats(-1e3, 1e3))
def test_ema_convexity(m, t, s):
    out = float(ema_update(scalar_params(t), scalar_params(s), m).tensors["w"])
    assert min(t, s) - 1e-9 <= out <= max(t, s) + 1e-9


def test_ema_shape_mismatch():
    with pytest.raises(InvalidInputError):
        ema_update(scalar_params(1.0), ModelParams(TINY, {"w": np.zeros(2)}), 0.5)
    with pytest.raises(InvalidInputError):
        ema_update(scalar_params(1.0), ModelParams(TINY, {"v": np.zeros(())}), 0.5)


# ---------------------------------------------------------------------------
# evaluation


def test_confusion_hand_counted():
    # class 1: two GT pixels, one hit plus one false positive
    labels = np.array([[1, 1, 0, 0]])
    pred = np.array([[1, 0, 1, 0]])
    conf = confusion_matrix(pred, labels, 2)
    np.testing.assert_array_equal(conf, count_confusion(pred, labels, 2))
    ious, _ = iou_from_confusion(conf)
    assert ious[1] == pytest.approx(1 / 3)


def test_iou_perfect_and_disjoint():
    lab = np.array([[0, 1], [2, 2]])
    ious, miou = iou_from_confusion(confusion_matrix(lab, lab, 4))
    assert ious[:3] == [1.0, 1.0, 1.0] and ious[3] is None and miou == 1.0
    pred = np.where(lab == 2, 0, lab)
    ious, _ = iou_from_confusion(confusion_matrix(pred, lab, 3))
    assert ious[2] == 0.0


def test_confusion_conservation(rng):
    labels = rng.integers(0, 5, size=(3, 9, 9))
    labels[rng.random(labels.shape) < 0.2] = 255
    pred = rng.integers(0, 5, size=labels.shape)
    conf = confusion_matrix(pred, labels, 5)
    np.testing.assert_array_equal(conf, count_confusion(pred, labels, 5))
    assert conf.sum() == np.count_nonzero(labels != 255)
    ious, miou = iou_from_confusion(conf)
    assert all(0 <= v <= 1 for v in ious)


def test_evaluate_errors(toy):
    _, tgt = toy
    params = init_params(TINY, 0)
    with pytest.raises(InvalidInputError):
        evaluate(params, tgt.unlabeled(), FAST)
    blank = toydata.Dataset(tgt.rgb, tgt.disparity, tgt.valid, np.full_like(tgt.labels, 255))
    with pytest.raises(InvalidInputError):
        evaluate(params, blank, FAST)


# ---------------------------------------------------------------------------
# optimizer


def test_adamw_first_step_is_signed_lr():
    params = ModelParams(TINY, {"W": np.array([[1.0, -2.0]]), "b": np.array([0.5])})
    grads = {"W": np.array([[3.0, -0.1]]), "b": np.array([-7.0])}
    opt = AdamW(params, lr=0.1, weight_decay=0.5, total_steps=10)
    opt.step(params, grads)
    # bias-corrected m/sqrt(v) is sign(g) on step one; only matrices decay
    np.testing.assert_allclose(params.tensors["W"], [[1.0 * 0.95 - 0.1, -2.0 * 0.95 + 0.1]], atol=1e-7)
    np.testing.assert_allclose(params.tensors["b"], [0.6], atol=1e-7)
    assert opt.current_lr() == pytest.approx(0.09)


def test_adamw_rate_reaches_zero():
    params = ModelParams(TINY, {"b": np.zeros(1)})
    opt = AdamW(params, 1.0, 0.0, total_steps=4)
    for _ in range(4):
        opt.step(params, {"b": np.ones(1)})
    assert opt.current_lr() == 0.0


# ---------------------------------------------------------------------------
# pretraining


def test_overfit_single_sample():
    # full toy resolution: at 16 px the patch grid alone keeps CE above the bar
    one = toydata.generate_split(toydata.ToySceneSpec(), "source", 1)
    cfg = AdaptConfig(pretrain_epochs=200, pretrain_batch_size=1, pretrain_lr=3e-3,
                      style=False, flip=False, weight_decay=0.0)
    curve = []
    pretrain_source(one, None, cfg, EncoderConfig(), curve=curve)
    assert len(curve) == 200
    assert curve[-1] < 0.1 * curve[0]


def test_beta_zero_inputs_are_raw(toy):
    src, tgt = toy
    cfg = AdaptConfig(beta_rgb=0.0, beta_d=0.0)
    rgb, disp = stylize_batch(src.rgb, src.disparity, build_profiles(tgt, 4), cfg)
    assert rgb.tobytes() == src.rgb.tobytes()
    assert disp.tobytes() == src.disparity.tobytes()
    # and training with a zero window equals training without style
    base = FAST.replace(beta_rgb=0.0, beta_d=0.0)
    a = pretrain_source(src, build_profiles(tgt, 4), base, TINY)
    b = pretrain_source(src, None, base.replace(style=False), TINY)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)


def test_pretrain_deterministic(toy):
    src, tgt = toy
    prof = build_profiles(tgt, 4)
    m1, m2 = [], []
    a = pretrain_source(src, prof, FAST, TINY, metrics=m1)
    b = pretrain_source(src, prof, FAST, TINY, metrics=m2)
    assert checkpoint_bytes(a) == checkpoint_bytes(b)
    assert [r.to_json() for r in m1] == [r.to_json() for r in m2]
    assert checkpoint_bytes(pretrain_source(src, prof, FAST.replace(seed=1), TINY)) != checkpoint_bytes(a)


def test_pretrain_preconditions(toy):
    src, tgt = toy
    with pytest.raises(InvalidInputError):
        pretrain_source(src.unlabeled(), None, FAST.replace(style=False), TINY)
    with pytest.raises(InvalidInputError):
        pretrain_source(src, None, FAST, TINY)


def test_pretrain_divergence_reports_step(toy, monkeypatch):
    src, _ = toy

    def nan_loss(logits, labels, *a, **k):
        return float("nan"), np.zeros_like(logits)

    monkeypatch.setattr(losses, "supervised_ce_grad", nan_loss)
    with pytest.raises(TrainingError, match="step 0"):
        pretrain_source(src, None, FAST.replace(style=False), TINY)


# ---------------------------------------------------------------------------
# adaptation


def test_published_defaults():
    cfg = AdaptConfig()
    assert (cfg.ema_period, cfg.ema_momentum) == (100, 0.99)
    assert (cfg.lr, cfg.weight_decay) == (6e-5, 0.01)
    assert (cfg.beta_rgb, cfg.beta_d, cfg.tau, cfg.top_fraction) == (0.01, 0.09, 0.9, 0.66)
    assert (cfg.batch_size, cfg.pretrain_batch_size) == (2, 4)


def test_config_validation():
    with pytest.raises(InvalidInputError):
        AdaptConfig(ema_momentum=1.5)
    with pytest.raises(InvalidInputError):
        AdaptConfig(ema_period=0)
    with pytest.raises(InvalidInputError):
        AdaptConfig(lr=0.0)


def test_momentum_one_freezes_teacher(toy):
    _, tgt = toy
    pre = init_params(TINY, 0)
    log = []
    adapt_target(tgt.unlabeled(), pre, FAST.replace(ema_period=1, ema_momentum=1.0), teacher_log=log)
    assert len(log) == 3
    for teacher in log:
        assert checkpoint_bytes(teacher) == checkpoint_bytes(pre)


def test_adapt_moves_student_not_pretrained(toy):
    _, tgt = toy
    pre = init_params(TINY, 0)
    before = checkpoint_bytes(pre)
    student = adapt_target(tgt.unlabeled(), pre, FAST)
    assert checkpoint_bytes(pre) == before
    assert checkpoint_bytes(student) != before


def test_adapt_empty_target():
    empty = toydata.Dataset(np.zeros((0, 16, 16, 3)), np.zeros((0, 16, 16)), np.zeros((0, 16, 16), bool))
    with pytest.raises(InvalidInputError):
        adapt_target(empty, init_params(TINY, 0), FAST)


class _Poison:
    """Stands in for source storage; any use raises."""

    def __getattr__(self, name):
        raise AssertionError("source data touched during adaptation")

    def __getitem__(self, idx):
        raise AssertionError("source data touched during adaptation")

    def __array__(self, *a, **k):
        raise AssertionError("source data touched during adaptation")


def test_source_free_with_poisoned_store(toy, monkeypatch):
    src, tgt = (toydata.Dataset(d.rgb, d.disparity, d.valid, d.labels, d.name) for d in toy)
    pre = pretrain_source(src, None, FAST.replace(style=False), TINY)
    for attr in ("rgb", "disparity", "valid", "labels"):
        setattr(src, attr, _Poison())
    for fn in ("generate_split", "load_split", "render_scene"):
        monkeypatch.setattr(toydata, fn, _Poison())
    target = tgt.unlabeled()
    target.labels = _Poison()
    adapt_target(target, pre, FAST)


def test_kept_fraction_telemetry(toy):
    _, tgt = toy
    records = []
    adapt_target(tgt.unlabeled(), init_params(TINY, 0), FAST.replace(epochs=2), metrics=records)
    assert len(records) == 6
    h, w = tgt.rgb.shape[1:3]
    for r in records:
        assert 0.0 <= r.kept_fraction <= 1.0
        kept = r.kept_fraction * h * w * FAST.batch_size
        assert kept == pytest.approx(round(kept), abs=1e-9)
        assert set(r.losses) == {"pseudo", "entropy"}
        json.loads(r.to_json())


def test_toggles_select_losses(toy):
    _, tgt = toy
    recs = []
    adapt_target(tgt.unlabeled(), init_params(TINY, 0), FAST.replace(entropy=False), metrics=recs)
    assert all(set(r.losses) == {"pseudo"} for r in recs)
    recs = []
    adapt_target(tgt.unlabeled(), init_params(TINY, 0), FAST.replace(self_training=False), metrics=recs)
    assert all(set(r.losses) == {"entropy"} and r.kept_fraction is None for r in recs)


# ---------------------------------------------------------------------------
# config and ablation


def test_parse_config_sections():
    adapt, enc, abl, scene = parse_config({"lr": 1e-3, "encoder": {"fusion_mode": "rgb_only"},
                                           "ablation": {"entropy": [False, True]}, "scene": {"image_size": 32}})
    assert adapt.lr == 1e-3 and enc.fusion_mode == "rgb_only"
    assert abl == {"entropy": [False, True]} and scene == {"image_size": 32}


@pytest.mark.parametrize("doc", [
    {"learning_rate": 1e-3},
    {"encoder": {"depth": 3}},
    {"ablation": {"dropout": [0, 1]}},
    {"ablation": {"cells": [{"fusion_mode": "key_swap", "warmup": True}]}},
])
def test_unknown_keys_rejected(doc):
    with pytest.raises(ConfigKeyError):
        parse_config(doc)


def test_expand_grid_product_and_cells():
    cells = expand_grid({"self_training": [False, True], "entropy": [False, True], "style": False}, AdaptConfig())
    assert len(cells) == 4
    assert {c.fusion_mode for c in cells} == {"key_swap"}
    explicit = expand_grid({"cells": [{"fusion_mode": "rgb_only"}, {"style": True}]}, AdaptConfig(), "cross_d_to_rgb")
    assert explicit[0].fusion_mode == "rgb_only" and not explicit[0].style
    assert explicit[1].fusion_mode == "cross_d_to_rgb" and explicit[1].style


def test_ablation_grid_cardinality_and_all_off(toy):
    src, tgt = toy
    cells = expand_grid({"self_training": [False, True], "entropy": [False, True], "style": False}, FAST)
    records = run_ablation_matrix(cells, [0, 1], src, tgt, FAST, TINY)
    assert len(records) == 8
    all_off = [r for r in records if not r.extra["self_training"] and not r.extra["entropy"]]
    for r in all_off:
        cfg = FAST.replace(seed=r.extra["seed"], style=False)
        ref = evaluate(pretrain_source(src, None, cfg, TINY), tgt, cfg)
        assert r.miou == ref.miou
    med = summarize(records)
    assert len(med) == 4 and all(0 <= v <= 1 for v in med.values())
