import numpy as np
import pytest

from droploss.categories import from_counts
from droploss.losses import BACKGROUND
from droploss.metrics import evaluate, evaluate_predictions, predict, predict_softmax
from droploss.model import init_params


def test_predict_all_below_threshold():
    assert list(predict(np.array([[0.1, 0.4], [0.49, 0.2]]), 0.5)) == [BACKGROUND, BACKGROUND]


def test_predict_single_confident_score():
    assert list(predict(np.array([[0.1, 0.9, 0.3]]), 0.5)) == [1]


def test_predict_tie_goes_to_lower_index():
    assert list(predict(np.array([[0.2, 0.7, 0.7], [0.8, 0.8, 0.1]]), 0.5)) == [1, 0]


def test_predict_threshold_range():
    with pytest.raises(ValueError):
        predict(np.array([[0.5]]), 1.0)


def test_predict_softmax_background_column():
    assert list(predict_softmax(np.array([[0.0, 1.0, 5.0], [3.0, 1.0, 0.0]]))) == [BACKGROUND, 0]


TABLE = from_counts([500, 40, 5])  # frequent, common, rare


def test_perfect_classifier():
    labels = np.array([0, 1, 2, -1, -1])
    r = evaluate_predictions(labels, labels, labels, TABLE)
    assert (r.recall == 1).all() and (r.cls_recall == 1).all() and (r.precision == 1).all()
    assert r.bg_as_fg == 0 and r.fg_as_bg == 0


def test_all_background_predictor():
    labels = np.array([0, 1, 2, -1])
    r = evaluate_predictions(np.full(4, -1), np.zeros(4, int), labels, TABLE)
    assert (r.recall == 0).all()
    assert r.fg_as_bg == 1.0 and r.bg_as_fg == 0.0


def test_hand_built_six_samples():
    labels = np.array([0, 0, 1, 2, -1, -1])
    pred = np.array([0, 1, 1, -1, 0, -1])
    cls = np.array([0, 1, 1, 1, 0, 0])
    r = evaluate_predictions(pred, cls, labels, TABLE)
    np.testing.assert_allclose(r.recall, [0.5, 1.0, 0.0])
    np.testing.assert_allclose(r.precision, [0.5, 0.5, 0.0])
    np.testing.assert_allclose(r.cls_recall, [0.5, 1.0, 0.0])
    assert r.bg_as_fg == 0.5
    assert r.fg_as_bg == 0.25
    assert r.bin_means("recall") == {"rare": 0.0, "common": 1.0, "frequent": 0.5}
    assert r.tail_metric("recall") == 0.5
    assert r.head_metric("recall") == 0.5


def test_absent_category_excluded():
    table = from_counts([500, 40, 5, 3])
    labels = np.array([0, 1, 2, -1])
    r = evaluate_predictions(labels, labels, labels, table)
    assert list(r.missing) == [3]
    assert r.bin_means()["rare"] == 1.0
    assert r.macro() == 1.0


def test_macro_equals_mean_of_bin_means_for_equal_bins():
    rng = np.random.default_rng(0)
    table = from_counts([500, 400, 50, 30, 4, 2])
    labels = rng.integers(-1, 6, size=600)
    pred = rng.integers(-1, 6, size=600)
    r = evaluate_predictions(pred, np.abs(pred), labels, table)
    m = r.bin_means("recall")
    assert r.macro("recall") == pytest.approx(np.mean(list(m.values())), abs=1e-15)


def test_rates_in_unit_interval():
    rng = np.random.default_rng(1)
    labels = rng.integers(-1, 3, size=200)
    r = evaluate_predictions(rng.integers(-1, 3, size=200), rng.integers(0, 3, size=200), labels, TABLE)
    for v in (r.recall, r.precision, r.cls_recall):
        assert ((v >= 0) & (v <= 1)).all()


def test_evaluate_deterministic_and_pure():
    p = init_params(4, 3, 2, np.random.default_rng(0))
    x = np.random.default_rng(1).normal(size=(50, 4))
    y = np.random.default_rng(2).integers(-1, 3, size=50)
    before = p.flat().copy()
    a = evaluate(p, x, y, TABLE)
    b = evaluate(p, x, y, TABLE)
    np.testing.assert_array_equal(a.recall, b.recall)
    np.testing.assert_array_equal(p.flat(), before)


def test_eval_csv(tmp_path):
    labels = np.array([0, 1, 2, -1])
    r = evaluate_predictions(labels, labels, labels, TABLE)
    r.to_csv(tmp_path / "eval.csv")
    lines = (tmp_path / "eval.csv").read_text().splitlines()
    assert lines[0] == "row,bin,support,recall,precision,cls_recall"
    assert len(lines) == 1 + 3 + 3 + 3
    assert lines[-3].startswith("macro,")
