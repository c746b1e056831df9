import csv
import json
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from dproto import saliency_eval
from dproto.errors import ShapeMismatchError
from dproto.mdm import select_detection_node
from dproto.saliency_eval import (
    METHODS,
    METRIC_KEYS,
    average_drop_increase,
    binarize_cam,
    deletion_insertion,
    evaluate_methods,
    localization_metrics,
    occlusion_baseline,
    random_cam,
    threshold_sweep,
)


def constant_model(p=0.5):
    def predict(images):
        images = np.asarray(images)
        return np.tile([p, 1.0 - p], (len(images), 1))
    return predict


def mean_model(images):
    """Confiance de la classe 0 égale à la luminosité moyenne de l'image."""
    m = np.asarray(images).mean(axis=(1, 2, 3))
    return np.stack([m, 1.0 - m], axis=1)


def scripted_model(*outputs):
    """Renvoie successivement les confiances fournies (classe 0)."""
    queue = iter(outputs)

    def predict(images):
        p = np.asarray(next(queue), dtype=np.float64)
        return np.stack([p, 1.0 - p], axis=1)
    return predict


# ----------------------------------------------------------------------
#  LOCALISATION
# ----------------------------------------------------------------------
def test_metrics_from_single_counts():
    m = localization_metrics(np.array([1, 1, 0, 0]), np.array([1, 0, 1, 0]))
    assert (m.counts.tp, m.counts.fp, m.counts.fn, m.counts.tn) == (1, 1, 1, 1)
    assert m.dice == pytest.approx(0.5)
    assert m.iou == pytest.approx(1 / 3)
    assert m.ppv == pytest.approx(0.5)
    assert m.sensitivity == pytest.approx(0.5)


def test_perfect_and_disjoint_overlaps():
    truth = np.array([[1, 1], [0, 0]])
    assert localization_metrics(truth, truth).as_dict() == {"dice": 1.0, "iou": 1.0, "ppv": 1.0, "sensitivity": 1.0}
    disjoint = localization_metrics(1 - truth, truth)
    assert disjoint.as_dict() == {"dice": 0.0, "iou": 0.0, "ppv": 0.0, "sensitivity": 0.0}
    assert not disjoint.degenerate


def test_empty_masks_are_flagged():
    m = localization_metrics(np.zeros((2, 2)), np.zeros((2, 2)))
    assert m.degenerate and m.dice == 0.0


def test_shape_mismatch_is_rejected():
    with pytest.raises(ShapeMismatchError):
        localization_metrics(np.zeros((2, 2)), np.zeros((2, 3)))


@settings(max_examples=100, deadline=None)
@given(pred=arrays(np.bool_, (5, 5)), truth=arrays(np.bool_, (5, 5)))
def test_dice_iou_identity(pred, truth):
    m = localization_metrics(pred, truth)
    assert abs(m.dice - 2 * m.iou / (1 + m.iou)) <= 1e-12


def test_binarize_examples():
    cam = np.array([[0.9, 0.5], [0.1, 0.7]])
    np.testing.assert_array_equal(binarize_cam(cam, 25), [[True, False], [False, False]])
    assert binarize_cam(cam, 100).all()
    np.testing.assert_array_equal(binarize_cam(np.ones((2, 2)), 50), [[True, True], [False, False]])
    with pytest.raises(ValueError):
        binarize_cam(cam, 0)


@settings(max_examples=100, deadline=None)
@given(cam=arrays(np.float64, (4, 6), elements=st.floats(0, 1)), top=st.floats(0.5, 100))
def test_binarize_sets_the_exact_pixel_count(cam, top):
    assert binarize_cam(cam, top).sum() == math.ceil(top * 24 / 100 - 1e-9)


def test_sweep_rows_and_monotone_sensitivity():
    truth = np.zeros((4, 4), dtype=bool)
    truth[:2, :2] = True
    cam = np.where(truth, 1.0, 0.0) + np.linspace(0, 0.1, 16).reshape(4, 4)
    rows = threshold_sweep([cam], [truth])
    assert len(rows) == 99 and rows[0]["threshold"] == 1.0
    sens = [r["sensitivity"] for r in rows]
    assert all(b >= a for a, b in zip(sens, sens[1:]))
    exact = rows[24]
    assert exact["threshold"] == 25.0
    assert (exact["dice"], exact["iou"], exact["ppv"], exact["sensitivity"]) == (1.0, 1.0, 1.0, 1.0)


def test_random_cams_have_ppv_near_truth_area():
    truth = np.zeros((20, 20), dtype=bool)
    truth[5:15, 5:15] = True
    cams = [random_cam((20, 20), seed) for seed in range(100)]
    row = threshold_sweep(cams, [truth] * 100, thresholds=[99])[0]
    assert row["ppv"] == pytest.approx(0.25, abs=0.05)


# ----------------------------------------------------------------------
#  RECONNAISSANCE
# ----------------------------------------------------------------------
def test_drop_and_increase_single_image():
    image = np.full((2, 2, 1), 0.8)
    cam = np.array([[1.0, 0.9], [0.1, 0.0]])
    result = average_drop_increase(mean_model, [image], [cam], [0], top_percent=50)
    assert result.AD == pytest.approx(50.0)
    assert result.AI == 0.0


def test_drop_and_increase_two_images():
    images = [np.zeros((2, 2, 1))] * 2
    cams = [np.zeros((2, 2))] * 2
    predict = scripted_model([0.5, 0.5], [0.6, 0.5])
    result = average_drop_increase(predict, images, cams, [0, 0], top_percent=50)
    assert result.AD == 0.0
    assert result.AI == pytest.approx(50.0)


def test_no_change_and_zero_confidence():
    images = [np.zeros((2, 2, 1))] * 2
    cams = [np.zeros((2, 2))] * 2
    same = average_drop_increase(scripted_model([0.3, 0.7], [0.3, 0.7]), images, cams, [0, 0], 50)
    assert (same.AD, same.AI) == (0.0, 0.0)
    zero = average_drop_increase(scripted_model([0.0, 0.5], [0.0, 0.25]), images, cams, [0, 0], 50)
    assert zero.degenerate == 1
    assert zero.AD == pytest.approx(25.0)


def test_constant_model_curves():
    image = np.random.default_rng(0).uniform(size=(5, 5, 3))
    cam = np.random.default_rng(1).uniform(size=(5, 5))
    deletion, insertion = deletion_insertion(constant_model(0.5), image, cam, 0)
    assert len(deletion.fractions) == 51
    assert deletion.auc == pytest.approx(0.5) and insertion.auc == pytest.approx(0.5)


def test_curve_endpoints_meet_on_the_original_image():
    image = np.random.default_rng(0).uniform(size=(5, 5, 3))
    cam = np.random.default_rng(1).uniform(size=(5, 5))
    deletion, insertion = deletion_insertion(mean_model, image, cam, 0, step_percent=10)
    assert deletion.probabilities[0] == insertion.probabilities[-1]
    assert deletion.probabilities[-1] == 0.0
    assert all(b <= a + 1e-12 for a, b in zip(deletion.probabilities, deletion.probabilities[1:]))


def test_faithful_cam_favours_insertion():
    image = np.zeros((6, 6, 1))
    image[1:3, 1:4] = 1.0
    deletion, insertion = deletion_insertion(mean_model, image, image[:, :, 0], 0)
    assert insertion.auc > deletion.auc


def test_curve_step_must_divide_100():
    with pytest.raises(ValueError):
        deletion_insertion(constant_model(), np.zeros((4, 4, 1)), np.zeros((4, 4)), 0, step_percent=3)


# ----------------------------------------------------------------------
#  RÉFÉRENCES
# ----------------------------------------------------------------------
def test_occlusion_of_a_constant_model_is_empty():
    image = np.random.default_rng(0).uniform(size=(10, 10, 3))
    cam = occlusion_baseline(constant_model(), image, 0, patch=4, stride=3)
    assert cam.values.shape == (10, 10)
    assert not cam.values.any()


def test_occlusion_highlights_the_bright_region():
    image = np.zeros((8, 8, 1))
    image[:4, :4] = 1.0
    first = occlusion_baseline(mean_model, image, 0, patch=4, stride=4)
    second = occlusion_baseline(mean_model, image, 0, patch=4, stride=4)
    np.testing.assert_array_equal(first.values, second.values)
    assert first.values[:4, :4].min() == 1.0
    assert first.values[4:, 4:].max() == 0.0
    with pytest.raises(ValueError):
        occlusion_baseline(mean_model, image, 0, patch=9, stride=1)


def test_random_cam_depends_only_on_seed():
    np.testing.assert_array_equal(random_cam((3, 4), 7).values, random_cam((3, 4), 7).values)
    assert not np.array_equal(random_cam((3, 4), 7).values, random_cam((3, 4), 8).values)


# ----------------------------------------------------------------------
#  ÉVALUATION COMPLÈTE
# ----------------------------------------------------------------------
def test_evaluation_report_schema(model, data, config, tmp_path):
    model.epochs_trained = 1
    truths = [np.zeros((16, 16), dtype=bool) for _ in range(2)]
    truths[0][:, :8] = True
    truths[1][:, :8] = True
    report = evaluate_methods(model, data.images[:2], data.labels[:2], truths, config)
    assert set(report.metrics) == set(METHODS)
    for metrics in report.metrics.values():
        assert set(metrics) == set(METRIC_KEYS)
        assert 0.0 <= metrics["AD"] <= 100.0 and 0.0 <= metrics["AI"] <= 100.0
    report.save(tmp_path)
    saved = json.loads((tmp_path / "metrics.json").read_text(encoding="utf-8"))
    assert saved == report.metrics
    with open(tmp_path / "curves.csv", newline="", encoding="utf-8") as handle:
        rows = list(csv.reader(handle))
    assert rows[0] == ["method", "fraction", "deletion_prob", "insertion_prob"]
    assert len(rows) == 1 + 51 * len(METHODS)
    with open(tmp_path / "sweep.csv", newline="", encoding="utf-8") as handle:
        assert len(list(csv.reader(handle))) == 1 + 99 * len(METHODS)


def test_evaluation_needs_images(model, config):
    with pytest.raises(ValueError):
        evaluate_methods(model, np.zeros((0, 16, 16, 3)), np.zeros(0), [], config)


def test_mdm_explains_the_true_class_of_a_misclassified_image(model, data, config, monkeypatch):
    model.epochs_trained = 1
    images = data.images[[0, 3]]
    labels = 1 - model.predict(images)
    explained = []
    real = saliency_eval.image_cam

    def recording(m, x, cfg=None, class_id=None):
        explained.append(select_detection_node(m, x, class_id).class_id)
        return real(m, x, cfg, class_id=class_id)

    monkeypatch.setattr(saliency_eval, "image_cam", recording)
    truths = [np.ones((16, 16), dtype=bool)] * 2
    report = evaluate_methods(model, images, labels, truths, config)
    assert explained == labels.tolist()
    assert report.metrics["mdm"]["accuracy"] == 0.0
    assert len(report.image_aucs["mdm"]) == 2


def test_insertion_win_rate_counts_images():
    report = saliency_eval.EvaluationReport({}, {}, {}, image_aucs={"mdm": [(0.2, 0.6), (0.5, 0.4), (0.1, 0.3)]})
    assert report.insertion_win_rate("mdm") == pytest.approx(2 / 3)
    assert report.insertion_win_rate("random") == 0.0


@pytest.mark.slow
def test_mdm_localizes_the_shapes(default_run):
    test = default_run.manifest.split("test")
    chosen = [i for i, e in enumerate(test) if e.mask is not None][:100]
    assert len(chosen) == 100
    truths = [default_run.manifest.load_mask(test[i]) for i in chosen]
    start = time.perf_counter()
    report = evaluate_methods(default_run.result.model, default_run.test.images[chosen],
                              default_run.test.labels[chosen], truths, default_run.cfg, threads=4)
    assert time.perf_counter() - start < 1200
    mdm, occlusion, rand = (report.metrics[m] for m in METHODS)
    assert mdm["iou"] >= 0.3
    assert mdm["iou"] >= 3 * rand["iou"]
    assert mdm["iou"] >= occlusion["iou"] - 0.05
    assert report.insertion_win_rate("mdm") >= 0.9
