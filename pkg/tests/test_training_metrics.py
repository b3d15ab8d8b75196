import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bce_loop, confusion_loop, wilcoxon_auc
from verifuse.fusion import DEFAULT_SWEEP_WEIGHTS, build_model, late_fuse
from verifuse.metrics import (
    bce_loss,
    compute_metrics,
    evaluate_probabilities,
    roc_curve,
    sweep_csv,
    weight_sweep,
)
from verifuse.training import FeatureSet, TrainConfig, steps_per_epoch, train

# --- loss -------------------------------------------------------------------------------


def test_uniform_prediction_costs_ln2():
    assert bce_loss([[0.5, 0.5]] * 7, [1, 0, 1, 0, 0, 1, 1]) == pytest.approx(math.log(2), abs=1e-12)


def test_confident_correct_predictions_are_nearly_free():
    assert bce_loss([[1.0, 0.0], [0.0, 1.0]], [1, 0]) <= -math.log(1 - 1e-7) + 1e-12


def test_confident_wrong_prediction_is_bounded():
    assert bce_loss([[0.0, 1.0]], [1]) == pytest.approx(-math.log(1e-7), rel=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 40), st.integers(0, 2**31))
def test_loss_matches_loop_oracle(n, seed):
    rng = np.random.default_rng(seed)
    p_fake = rng.random(n)
    p_fake[rng.random(n) < 0.1] = rng.choice([0.0, 1.0])
    pairs = np.c_[p_fake, 1 - p_fake]
    y = rng.integers(0, 2, n)
    assert abs(bce_loss(pairs, y) - bce_loop(pairs.tolist(), y.tolist())) < 1e-9


def test_loss_rejects_mismatched_lengths():
    with pytest.raises(ValueError):
        bce_loss([[0.5, 0.5]], [1, 0])
    with pytest.raises(ValueError):
        bce_loss(np.zeros((0, 2)), [])


# --- metrics ------------------------------------------------------------------------------


def test_hand_counted_metrics():
    # 6 tp, 2 fp, 4 fn, 8 tn
    pred = [1] * 6 + [1] * 2 + [0] * 4 + [0] * 8
    true = [1] * 6 + [0] * 2 + [1] * 4 + [0] * 8
    m = compute_metrics(pred, true)
    assert (m.tp, m.fp, m.fn, m.tn) == (6, 2, 4, 8)
    assert m.accuracy == pytest.approx(0.7, abs=1e-12)
    assert m.precision == pytest.approx(0.75, abs=1e-12)
    assert m.recall == pytest.approx(0.6, abs=1e-12)
    assert m.f1 == pytest.approx(2 / 3, abs=1e-4)


def test_degenerate_denominators_are_zero():
    m = compute_metrics([0, 0, 0], [0, 0, 0])
    assert (m.precision, m.recall, m.f1, m.accuracy) == (0.0, 0.0, 0.0, 1.0)


def test_confusion_counts_match_oracle_on_random_cases():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        n = int(rng.integers(1, 30))
        pred, true = rng.integers(0, 2, n), rng.integers(0, 2, n)
        m = compute_metrics(pred, true)
        assert (m.tp, m.fp, m.fn, m.tn) == confusion_loop(pred.tolist(), true.tolist())
        assert m.n == n


def test_perfect_ranking_has_unit_auc():
    points, auc = roc_curve([0.9, 0.8, 0.3, 0.1], [1, 1, 0, 0])
    assert auc == 1.0
    assert points[0] == (0.0, 0.0, math.inf)
    assert points[-1][:2] == (1.0, 1.0)


def test_constant_scores_have_half_auc():
    points, auc = roc_curve([0.4] * 6, [1, 0, 1, 0, 0, 1])
    assert auc == 0.5
    assert [p[:2] for p in points] == [(0.0, 0.0), (1.0, 1.0)]


def test_roc_needs_both_classes():
    with pytest.raises(ValueError):
        roc_curve([0.1, 0.2], [1, 1])


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 60), st.integers(0, 2**31), st.booleans())
def test_auc_matches_pairwise_ranking(n, seed, coarse):
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, n)
    y[0], y[1] = 0, 1
    s = rng.random(n)
    if coarse:
        s = np.round(s, 1)  # plenty of ties
    points, auc = roc_curve(s, y)
    assert abs(auc - wilcoxon_auc(s.tolist(), y.tolist())) < 1e-9
    fpr = [p[0] for p in points]
    tpr = [p[1] for p in points]
    assert fpr == sorted(fpr) and tpr == sorted(tpr)


def test_evaluate_probabilities_adds_roc():
    m = evaluate_probabilities([[0.8, 0.2], [0.3, 0.7], [0.6, 0.4]], [1, 0, 0])
    assert m.auc == 1.0
    assert m.to_dict()["roc_points"][0] == [0.0, 0.0, "inf"]
    single = evaluate_probabilities([[0.8, 0.2]], [1])
    assert single.auc is None


# --- training -------------------------------------------------------------------------------


def blobs(n, text_dim=8, image_dim=12, seed=0, sep=2.0):
    rng = np.random.default_rng(seed)
    y = rng.permutation(np.arange(n) % 2)
    text = rng.normal(size=(n, text_dim)) + sep * (2 * y[:, None] - 1) / np.sqrt(text_dim)
    image = rng.normal(size=(n, image_dim)) + sep * (2 * y[:, None] - 1) / np.sqrt(image_dim)
    return FeatureSet(text, image, y, [f"r{i}" for i in range(n)])


def test_steps_per_epoch():
    assert steps_per_epoch(300, 128) == 3
    assert steps_per_epoch(256, 128) == 2
    assert steps_per_epoch(1, 128) == 1


def test_history_lengths_and_step_counts():
    data = blobs(300)
    cfg = TrainConfig(epochs=3, batch_size=128)
    _, hist = train(build_model("late", 8, 12), data, blobs(40, seed=1), cfg)
    assert set(hist) == {"text", "image", "late"}
    for h in hist.values():
        assert h.epochs == 3
        assert h.steps == [3, 3, 3]
        assert len(h.val_acc) == 3


def test_partial_batch_of_one_is_trained():
    _, hist = train(build_model("early", 8, 12), blobs(129), blobs(10, seed=1), TrainConfig(epochs=1))
    assert hist["early"].steps == [2]


def test_training_is_deterministic_and_isolated_from_global_rng():
    data, val = blobs(100), blobs(30, seed=1)
    cfg = TrainConfig(epochs=4, batch_size=16, seed=7)
    m1, h1 = train(build_model("early", 8, 12, seed=7), data, val, cfg)
    torch.manual_seed(12345)
    np.random.seed(999)
    m2, h2 = train(build_model("early", 8, 12, seed=7), data, val, cfg)
    assert h1["early"].to_dict() == h2["early"].to_dict()
    for a, b in zip(m1.state_dict().values(), m2.state_dict().values()):
        assert torch.equal(a, b)


def test_zero_learning_rate_leaves_parameters_and_loss_fixed():
    data = blobs(64)
    model = build_model("early", 8, 12, dropout=0.0)
    before = {k: v.clone() for k, v in model.named_parameters()}
    cfg = TrainConfig(learning_rate=0.0, epochs=5, batch_size=64, dropout=0.0)
    _, hist = train(model, data, blobs(20, seed=1), cfg)
    for k, v in model.named_parameters():
        assert torch.equal(v, before[k])
    losses = hist["early"].train_loss
    assert max(losses) - min(losses) < 1e-6


def test_learns_separable_features():
    from sklearn.linear_model import LogisticRegression

    data, val = blobs(400, sep=4.0), blobs(100, seed=1, sep=4.0)
    # a plain linear model separates the set, so the target is attainable
    clf = LogisticRegression(max_iter=1000).fit(np.hstack([data.text, data.image]), data.y)
    assert clf.score(np.hstack([val.text, val.image]), val.y) == 1.0
    for fusion in ("early", "late"):
        model, hist = train(build_model(fusion, 8, 12), data, val, TrainConfig(epochs=30, batch_size=32))
        key = "early" if fusion == "early" else "late"
        assert hist[key].val_acc[-1] >= 0.95
        assert hist[key].train_loss[-1] < hist[key].train_loss[0]


def test_rejects_empty_and_non_finite_training_data():
    with pytest.raises(ValueError):
        train(build_model("early", 8, 12), blobs(0), blobs(4), TrainConfig(epochs=1))
    bad = blobs(10)
    bad.text[3, 2] = np.nan
    with pytest.raises(ValueError):
        train(build_model("early", 8, 12), bad, blobs(4), TrainConfig(epochs=1))


@pytest.mark.parametrize(
    "kwargs", [{"learning_rate": -1.0}, {"epochs": 0}, {"batch_size": 0}, {"beta2": 1.0}, {"loss": "mse"}]
)
def test_config_validation(kwargs):
    with pytest.raises(ValueError):
        TrainConfig(**kwargs)


def test_default_hyperparameters():
    cfg = TrainConfig()
    assert (cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.epochs, cfg.batch_size, cfg.dropout) == (
        1e-4, 0.9, 0.98, 30, 128, 0.4
    )
    assert cfg.loss == "binary_crossentropy"


# --- sweep --------------------------------------------------------------------------------


@pytest.fixture(scope="module")
def trained_late():
    data, test = blobs(200), blobs(60, seed=2)
    model, _ = train(build_model("late", 8, 12), data, blobs(20, seed=1), TrainConfig(epochs=5, batch_size=32))
    return model, test


def test_sweep_rows_follow_weight_grid(trained_late):
    model, test = trained_late
    rows = weight_sweep(model, test.text, test.image, test.y)
    assert [(r.w1, r.w2) for r in rows] == list(DEFAULT_SWEEP_WEIGHTS)
    p1, p2 = model.stream_proba(test.text, test.image)
    for r in rows:
        expected = evaluate_probabilities(late_fuse(p1, p2, r.w1, r.w2), test.y)
        assert r.metrics == expected


def test_sweep_with_text_only_weight_matches_text_head(trained_late):
    model, test = trained_late
    (row,) = weight_sweep(model, test.text, test.image, test.y, [(1.0, 0.0)])
    p_text, _ = model.stream_proba(test.text, test.image)
    assert row.metrics == evaluate_probabilities(p_text, test.y)


def test_sweep_is_deterministic(trained_late):
    model, test = trained_late
    a = sweep_csv(weight_sweep(model, test.text, test.image, test.y))
    b = sweep_csv(weight_sweep(model, test.text, test.image, test.y))
    assert a == b
    assert a.splitlines()[0] == "fusion,w1,w2,accuracy,precision,recall,f1"
    assert len(a.splitlines()) == 5


def test_sweep_rejects_empty_grid(trained_late):
    model, test = trained_late
    with pytest.raises(ValueError):
        weight_sweep(model, test.text, test.image, test.y, [])
