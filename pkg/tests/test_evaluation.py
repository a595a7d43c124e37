import json

import numpy as np
import pytest

from refractnet import stats as S
from refractnet.evaluation import SLICES, EvaluationError, PredictionSet, evaluate_predictions
from refractnet.fundus.records import ImageRecord, RefractionLabel

FAST = dict(n_resamples=200, seed=1)


def _records(actual, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for i, a in enumerate(actual):
        areds = i % 2 == 0
        out.append(ImageRecord(
            f"images/img_{i:05d}.ppm", f"P{i // 2}", "LR"[i % 2], 0, "areds-like" if areds else "biobank-like",
            "validation", RefractionLabel(float(a)),
            has_amd=bool(rng.uniform() < 0.3) if areds else None,
            had_cataract_surgery=bool(rng.uniform() < 0.25) if areds else False,
        ))
    return out


def _set(pred, actual):
    return PredictionSet(pred, actual, _records(actual))


@pytest.fixture
def actual():
    return np.random.default_rng(0).uniform(-8, 6, 80)


def test_perfect_predictions(actual):
    rep = evaluate_predictions(_set(actual, actual), **FAST)
    assert rep.mae.as_tuple() == (0.0, 0.0, 0.0)
    assert rep.r2.point == 1.0
    assert [m.model_acc for m in rep.margins] == [1.0, 1.0, 1.0]
    for m in rep.margins:
        k = len(actual)
        assert m.p_value == S.binomial_test_one_tailed(k, k, m.baseline_acc)


def test_mean_predictor(actual):
    rep = evaluate_predictions(_set(np.full_like(actual, actual.mean()), actual), **FAST)
    assert rep.mae.point == pytest.approx(rep.baseline_mae.point, abs=1e-12)
    assert rep.r2.point == pytest.approx(0.0, abs=1e-12)


def test_margin_records(actual):
    pred = actual + np.random.default_rng(2).normal(0, 1, actual.size)
    rep = evaluate_predictions(_set(pred, actual), margins=(0.5, 1.0, 2.0), **FAST)
    for m in rep.margins:
        k = int(np.sum(np.abs(pred - actual) <= m.margin))
        assert m.model_acc == k / actual.size
        assert m.baseline_acc == S.sliding_window_baseline(actual, m.margin)
        assert m.p_value == S.binomial_test_one_tailed(k, actual.size, m.baseline_acc)
        assert 0.0 <= m.model_acc <= 1.0 and 0.0 <= m.baseline_acc <= 1.0
    assert rep.mae.lower <= rep.mae.point <= rep.mae.upper
    assert rep.r2.lower <= rep.r2.point <= rep.r2.upper


def test_slices(actual):
    pred = actual + 0.3
    ps = _set(pred, actual)
    rep = evaluate_predictions(ps, slices=SLICES, **FAST)
    plain = evaluate_predictions(ps, **FAST)
    assert rep.slices["all"].to_dict() == plain.to_dict()
    no_amd = [r for r in ps.records if r.has_amd is False]
    assert rep.slices["no_amd"].n == len(no_amd)
    assert rep.slices["cohort=biobank-like"].n == 40
    assert rep.slices["no_cataract_surgery"].n == sum(r.had_cataract_surgery is False for r in ps.records)


def test_empty_slice_is_absent(actual):
    rep = evaluate_predictions(_set(actual, actual), slices={"none": lambda r: False}, **FAST)
    assert rep.slices == {"none": None}
    assert rep.to_dict()["slices"] == {"none": None}


def test_json_layout_and_determinism(actual):
    ps = _set(actual + 0.2, actual)
    text = evaluate_predictions(ps, slices={"all": SLICES["all"]}, **FAST).to_json()
    assert text == evaluate_predictions(ps, slices={"all": SLICES["all"]}, **FAST).to_json()
    doc = json.loads(text)
    assert list(doc) == ["n", "mae", "r2", "baseline_mae", "margins", "slices"]
    assert list(doc["mae"]) == ["point", "ci"]
    assert list(doc["margins"][0]) == ["margin", "model_acc", "baseline_acc", "p_value"]
    assert [m["margin"] for m in doc["margins"]] == [0.5, 1.0, 2.0]


def test_prediction_csv():
    ps = _set([0.5, -1.25], [0.25, -1.0])
    assert ps.to_csv() == ("image_path,actual_d,predicted_d\n"
                           "images/img_00000.ppm,0.25,0.5\nimages/img_00001.ppm,-1.0,-1.25\n")


def test_errors():
    with pytest.raises(EvaluationError):
        evaluate_predictions(PredictionSet([], []))
    with pytest.raises(EvaluationError):
        PredictionSet([1.0], [np.nan])
    with pytest.raises(EvaluationError):
        PredictionSet([1.0, 2.0], [1.0])


def test_constant_labels_have_no_r2():
    rep = evaluate_predictions(_set([0.0, 1.0, 2.0], [1.0, 1.0, 1.0]), **FAST)
    assert rep.r2 is None and rep.to_dict()["r2"] is None
    assert [m.baseline_acc for m in rep.margins] == [1.0, 1.0, 1.0]
    assert [m.p_value for m in rep.margins] == [1.0, 1.0, 1.0]
