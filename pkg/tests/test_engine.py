"""Optimizer, schedules, training loops, and the adaptation freeze audit."""

import json
import math
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from warpadapt import data as D
from warpadapt import engine as E
from warpadapt import geometry as G
from warpadapt import model as Mo
from warpadapt import tensor as T
from warpadapt.tensor import Tensor


# ---------------------------------------------------------------------------
# schedule
# ---------------------------------------------------------------------------


def test_poly_lr_endpoints_and_midpoint():
    assert E.poly_lr(0.05, 0, 100) == 0.05
    assert E.poly_lr(0.05, 100, 100) == 0.0
    assert E.poly_lr(0.04, 50, 100, power=1.0) == 0.02


def test_poly_lr_validation():
    with pytest.raises(ValueError):
        E.poly_lr(0.1, 0, 0)
    with pytest.raises(ValueError):
        E.poly_lr(0.1, 5, 4)
    with pytest.raises(ValueError):
        E.poly_lr(0.1, -1, 4)


@settings(max_examples=30, deadline=None)
@given(total=st.integers(1, 500), power=st.floats(0.1, 3.0))
def test_poly_lr_non_increasing(total, power):
    values = [E.poly_lr(1.0, s, total, power) for s in range(total + 1)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_schedule_scale_without_warmup_is_poly():
    for step in (0, 3, 9):
        assert E.schedule_scale(step, 10, 0, power=0.9) == \
            E.poly_lr(1.0, step, 10, power=0.9)


def test_schedule_scale_ramps_then_decays():
    # quarter-strength first step, full strength once the ramp is over
    assert E.schedule_scale(0, 100, 4, power=1.0) == pytest.approx(0.25)
    assert E.schedule_scale(3, 100, 4, power=1.0) == pytest.approx(0.97)
    assert E.schedule_scale(50, 100, 4, power=1.0) == pytest.approx(0.50)


@settings(max_examples=30, deadline=None)
@given(total=st.integers(2, 300), warmup=st.integers(0, 40))
def test_schedule_scale_bounded_by_poly(total, warmup):
    for step in range(total):
        scale = E.schedule_scale(step, total, warmup)
        assert 0.0 <= scale <= E.poly_lr(1.0, step, total) + 1e-15


# ---------------------------------------------------------------------------
# class weights
# ---------------------------------------------------------------------------


def test_balanced_counts_give_unit_weights():
    assert np.array_equal(E.inverse_frequency_weights([10, 10, 10]),
                          np.ones(3))


def test_rare_classes_upweighted_common_downweighted_with_clip():
    w = E.inverse_frequency_weights([980, 10, 10])
    assert w[0] == 0.5  # clipped up from 1000/2940
    assert w[1] == w[2] == 2.5  # clipped down from 1000/30
    wide = E.inverse_frequency_weights([980, 10, 10], clip=(0.2, 5.0))
    assert wide[0] == pytest.approx(1000 / (3 * 980))
    assert wide[1] == wide[2] == 5.0
    tight = E.inverse_frequency_weights([999999, 1], clip=(0.2, 5.0))
    assert tight[0] == pytest.approx(0.5000005)
    assert tight[1] == 5.0


def test_absent_class_weight_is_inert_one():
    w = E.inverse_frequency_weights([5, 5, 0])
    assert w[2] == 1.0


def test_zero_total_counts_raise():
    with pytest.raises(ValueError):
        E.inverse_frequency_weights([0, 0])


def test_matched_step_epochs_scales_inversely_with_subset_size():
    assert E.matched_step_epochs(35, 120, 100) == 42
    assert E.matched_step_epochs(35, 120, 50) == 84
    assert E.matched_step_epochs(10, 100, 60) == 17  # ceil(16.7)


def test_matched_step_epochs_full_set_and_cap():
    assert E.matched_step_epochs(35, 120, None) == 35
    assert E.matched_step_epochs(35, 120, 120) == 35
    assert E.matched_step_epochs(35, 120, 200) == 35
    # cap: a 1-scene subset would otherwise ask for 4200 epochs
    assert E.matched_step_epochs(35, 120, 1) == int(2.4 * 35)
    assert E.matched_step_epochs(35, 120, 1, cap_factor=10.0) == 350


def test_matched_step_epochs_rejects_nonpositive_subset():
    with pytest.raises(ValueError):
        E.matched_step_epochs(35, 120, 0)


# ---------------------------------------------------------------------------
# loss hand oracle (direct-formula recount)
# ---------------------------------------------------------------------------


def test_weighted_loss_two_pixel_hand_case():
    logits = np.zeros((1, 2, 1, 2))
    logits[0, :, 0, 0] = (0.3, -0.2)  # label 0, weight 1
    logits[0, :, 0, 1] = (0.1, 0.4)   # label 1, weight 2
    labels = np.array([[[0, 1]]])
    weights = np.array([1.0, 2.0])
    loss = T.weighted_cross_entropy(Tensor(logits), labels, weights, 255)
    lse1 = math.log(math.exp(0.3) + math.exp(-0.2))
    lse2 = math.log(math.exp(0.1) + math.exp(0.4))
    want = (1.0 * (lse1 - 0.3) + 2.0 * (lse2 - 0.4)) / 2
    assert abs(loss.item() - want) <= 1e-12


# ---------------------------------------------------------------------------
# optimizer
# ---------------------------------------------------------------------------


def test_adam_zero_gradient_step_moves_nothing():
    p = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
    before = p.data.copy()
    opt = E.Adam([([p], 0.1)])
    p.grad = np.zeros(3)
    for _ in range(5):
        opt.step()
    assert np.max(np.abs(p.data - before)) <= 1e-12


def test_adam_first_step_is_signed_lr():
    p = Tensor(np.array([1.0]), requires_grad=True)
    opt = E.Adam([([p], 0.1)])
    p.grad = np.array([2.0])
    opt.step()
    # bias-corrected first step is lr * g / (|g| + eps)
    assert p.data[0] == pytest.approx(0.9, abs=1e-8)


def test_adam_respects_per_group_learning_rates():
    a = Tensor(np.array([0.0]), requires_grad=True)
    b = Tensor(np.array([0.0]), requires_grad=True)
    opt = E.Adam([([a], 0.001), ([b], 0.01)])
    a.grad = np.array([1.0])
    b.grad = np.array([1.0])
    opt.step()
    assert abs(b.data[0]) == pytest.approx(10 * abs(a.data[0]), rel=1e-6)


def test_adam_schedule_scale_multiplies_step():
    a = Tensor(np.array([0.0]), requires_grad=True)
    b = Tensor(np.array([0.0]), requires_grad=True)
    full = E.Adam([([a], 0.1)])
    half = E.Adam([([b], 0.1)])
    a.grad = np.array([3.0])
    b.grad = np.array([3.0])
    full.step(scale=1.0)
    half.step(scale=0.5)
    assert b.data[0] == pytest.approx(a.data[0] / 2, rel=1e-9)


def test_adam_missing_gradient_treated_as_zero():
    p = Tensor(np.array([4.0]), requires_grad=True)
    opt = E.Adam([([p], 0.1)])
    opt.step()
    assert p.data[0] == 4.0


# ---------------------------------------------------------------------------
# configs and reports
# ---------------------------------------------------------------------------


def test_adaptation_config_validation():
    good = E.AdaptationConfig(mode="DCN_BN", placement="BOTH")
    assert good.lr_decoder == pytest.approx(10 * good.lr_encoder)
    with pytest.raises(ValueError):
        E.AdaptationConfig(mode="DCN", placement="BOTH")
    with pytest.raises(ValueError):
        E.AdaptationConfig(mode="DCN_BN", placement="ALL")
    with pytest.raises(ValueError):
        E.AdaptationConfig(mode="DCN_BN", placement="BOTH", subset_n=0)
    with pytest.raises(ValueError):
        E.AdaptationConfig(mode="DCN_BN", placement="BOTH", lr_encoder=0.0)
    with pytest.raises(ValueError):
        E.BaselineConfig(epochs=0)


def test_train_report_validation_and_writers(tmp_path):
    history = [{"epoch": 0, "train_loss": 1.5, "val_miou": 0.2},
               {"epoch": 1, "train_loss": 1.2, "val_miou": 0.3}]
    report = E.TrainReport(config={"seed": 17}, history=history,
                           final_test_miou=0.31, wall_time_s=4.2,
                           selected_epoch=1)
    csv_path = tmp_path / "history.csv"
    json_path = tmp_path / "summary.json"
    report.write_history_csv(csv_path)
    report.write_summary_json(json_path)
    assert csv_path.read_text() == ("epoch,train_loss,val_miou\n"
                                    "0,1.500000,0.200000\n"
                                    "1,1.200000,0.300000\n")
    payload = json.loads(json_path.read_text())
    assert payload["final_test_miou"] == 0.31
    assert payload["selected_epoch"] == 1
    assert payload["selected_val_miou"] == 0.3
    assert "wall_time_s" not in payload  # artifacts stay byte-reproducible
    with pytest.raises(ValueError):
        E.TrainReport(config={}, history=[{"epoch": 1, "train_loss": 1.0,
                                           "val_miou": 0.1}],
                      final_test_miou=0.2, wall_time_s=0.0)
    with pytest.raises(ValueError):
        E.TrainReport(config={}, history=history,
                      final_test_miou=float("nan"), wall_time_s=0.0)
    with pytest.raises(ValueError):
        E.TrainReport(config={}, history=history, final_test_miou=0.3,
                      wall_time_s=0.0, selected_epoch=2)


def test_substreams_are_deterministic_and_distinct():
    a = E.substream(17, "order").integers(0, 1 << 30, 8)
    b = E.substream(17, "order").integers(0, 1 << 30, 8)
    c = E.substream(17, "augment").integers(0, 1 << 30, 8)
    d = E.substream(18, "order").integers(0, 1 << 30, 8)
    assert np.array_equal(a, b)
    assert not np.array_equal(a, c)
    assert not np.array_equal(a, d)


# ---------------------------------------------------------------------------
# training on a micro dataset
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def micro(tmp_path_factory):
    root = tmp_path_factory.mktemp("micro")
    spec = D.DatasetSpec(seed=3, n_train=6, n_val=2, n_test=2,
                         height=32, width=64)
    rect = D.generate_dataset(spec, str(root / "rect"))
    fish = D.derive_fisheye_dataset(rect, G.fisheye_params(125),
                                    str(root / "f125"))
    cfg = E.BaselineConfig(epochs=3, batch_size=4, seed=17)
    model, report = E.train_baseline(rect, cfg)
    ckpt = str(root / "baseline.ckpt")
    Mo.save_checkpoint(model, ckpt)
    return {"rect": rect, "fish": fish, "ckpt": ckpt, "report": report,
            "root": root}


def test_baseline_loss_decreases_and_report_is_complete(micro):
    history = micro["report"].history
    assert len(history) == 3
    assert history[-1]["train_loss"] < history[0]["train_loss"]
    assert 0.0 <= micro["report"].final_test_miou <= 1.0


def test_baseline_training_is_bitwise_deterministic(micro):
    cfg = E.BaselineConfig(epochs=2, batch_size=4, seed=99)
    m1, r1 = E.train_baseline(micro["rect"], cfg)
    m2, r2 = E.train_baseline(micro["rect"], cfg)
    for (n1, a1, f1), (n2, a2, f2) in zip(m1.named_tensors(),
                                          m2.named_tensors()):
        assert n1 == n2 and np.array_equal(a1, a2)
    assert r1.history == r2.history
    assert r1.final_test_miou == r2.final_test_miou


def test_divergent_run_raises_with_location(micro):
    cfg = E.BaselineConfig(epochs=1, batch_size=4,
                           lr_decoder=float("inf"))
    with np.errstate(invalid="ignore", over="ignore"):
        with pytest.raises(E.DivergenceError):
            E.train_baseline(micro["rect"], cfg)


def _adapt(micro, mode, placement, **kw):
    cfg = E.AdaptationConfig(mode=mode, placement=placement, epochs=1,
                             batch_size=4, seed=17, **kw)
    return E.adapt(micro["ckpt"], micro["fish"], cfg)


def _checkpoint_diff(micro, model, tag):
    after = str(micro["root"] / f"{tag}.ckpt")
    Mo.save_checkpoint(model, after)
    return Mo.diff_checkpoints(micro["ckpt"], after)


def _offsets_trained(model):
    return any(np.any(p.data != 0.0)
               for name, p in model.named_parameters() if ".offset." in name)


def test_dcn_only_touches_only_offsets(micro):
    model, _ = _adapt(micro, "DCN_ONLY", "DECODER")
    diff = _checkpoint_diff(micro, model, "dcn_only")
    assert diff["changed"] == []  # every pre-existing tensor is bit-frozen
    added = diff["only_second"]
    assert added and all(".offset." in name for name in added)
    decoder = set(Mo.DECODER_BLOCKS)
    assert all(name.split(".")[0] in decoder for name in added)
    assert _offsets_trained(model)


def test_bn_only_touches_only_bn_of_placement(micro):
    model, _ = _adapt(micro, "BN_ONLY", "ENCODER")
    diff = _checkpoint_diff(micro, model, "bn_only")
    assert diff["only_second"] == []  # no layers were wrapped
    assert diff["changed"]
    encoder = set(Mo.ENCODER_BLOCKS)
    for name in diff["changed"]:
        assert name.split(".")[0] in encoder
        assert ".bn." in name


def test_dcn_bn_touches_offsets_and_bn_nothing_else(micro):
    model, _ = _adapt(micro, "DCN_BN", "BOTH")
    diff = _checkpoint_diff(micro, model, "dcn_bn")
    families = Mo.partition_parameters(model)
    allowed = set(families["bn_affine"]) | set(families["bn_running"])
    assert set(diff["changed"]) <= allowed
    assert set(diff["changed"]) & set(families["bn_affine"])
    assert set(diff["only_second"]) == set(families["offset"])
    assert _offsets_trained(model)


def test_dcn_only_keeps_running_stats_bitwise(micro):
    model, _ = _adapt(micro, "DCN_ONLY", "BOTH")
    diff = _checkpoint_diff(micro, model, "dcn_only_both")
    assert diff["changed"] == []
    assert _offsets_trained(model)


def test_adaptation_is_deterministic(micro):
    m1, _ = _adapt(micro, "DCN_BN", "BOTH", subset_n=2)
    m2, _ = _adapt(micro, "DCN_BN", "BOTH", subset_n=2)
    for (n1, a1, _), (n2, a2, _) in zip(m1.named_tensors(),
                                        m2.named_tensors()):
        assert n1 == n2 and np.array_equal(a1, a2)


def test_returned_model_is_best_validation_epoch(micro):
    from warpadapt import metrics as M
    cfg = E.AdaptationConfig(mode="DCN_BN", placement="BOTH", epochs=3,
                             batch_size=4, seed=17)
    model, report = E.adapt(micro["ckpt"], micro["fish"], cfg)
    best = max(row["val_miou"] for row in report.history)
    assert report.history[report.selected_epoch]["val_miou"] == best
    pairs = E.split_pairs(micro["fish"], "val", D.VARIANT_FISHEYE)
    assert M.evaluate_model(model, pairs).mean_iou() == best


def test_subset_larger_than_train_split_raises(micro):
    with pytest.raises(ValueError):
        _adapt(micro, "DCN_BN", "BOTH", subset_n=7)


def test_single_sample_adaptation_completes(micro):
    _, report = _adapt(micro, "BN_ONLY", "BOTH", subset_n=1)
    assert len(report.history) == 1


def test_evaluate_split_empty_variant_raises(micro):
    model = Mo.load_checkpoint(micro["ckpt"])
    with pytest.raises(ValueError):
        E.evaluate_split(model, micro["rect"], "test", D.VARIANT_FISHEYE)


# ---------------------------------------------------------------------------
# ablation suite plumbing
# ---------------------------------------------------------------------------


def test_write_score_rows_schema(tmp_path):
    rows = [{"mode": "DCN_BN", "placement": "BOTH", "n": "full",
             "seed": 17, "miou": 0.512345678},
            {"mode": "BN_ONLY", "placement": "ENCODER", "n": 50,
             "seed": 42, "miou": 0.25}]
    path = tmp_path / "scores.csv"
    E.write_score_rows(path, rows)
    assert path.read_text() == ("mode,placement,n,seed,miou\n"
                                "DCN_BN,BOTH,full,17,0.512346\n"
                                "BN_ONLY,ENCODER,50,42,0.250000\n")


def test_run_ablation_suite_covers_grid_and_fewshot(micro, tmp_path):
    result = E.run_ablation_suite(
        micro["ckpt"], micro["fish"], str(tmp_path / "suite"),
        seeds=(17,), epochs=1, batch_size=4, fewshot_sizes=(1, None))
    combos = {(r["mode"], r["placement"]) for r in result["sweep"]}
    assert combos == {(m, p) for m in E.MODES
                      for p in ("ENCODER", "DECODER", "BOTH")}
    assert all(r["n"] == "full" for r in result["sweep"])
    sizes = [r["n"] for r in result["fewshot"]]
    assert sizes == [1, "full"]
    full_row = result["fewshot"][1]
    sweep_match = next(r for r in result["sweep"]
                       if r["mode"] == "DCN_BN" and r["placement"] == "BOTH")
    assert full_row["miou"] == sweep_match["miou"]
    for name in ("sweep.csv", "fewshot.csv"):
        text = open(os.path.join(tmp_path, "suite", name)).read()
        assert text.startswith("mode,placement,n,seed,miou\n")
    assert len(result["sweep"]) == 9
