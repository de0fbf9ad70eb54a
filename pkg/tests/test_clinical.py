"""Tests for TLVR computation, the linear clinical model and feature selection."""

import numpy as np
import pytest

from weakseg.clinical import (
    compute_tlvr,
    cross_val_predict,
    fit_linear,
    fold_indices,
    load_model,
    pearson,
    predict_raw,
    predict_tlvr,
    regression_summary,
    save_model,
    select_features,
    tlvr_labels,
    write_coefficients_csv,
    write_selection_csv,
)
from weakseg.errors import DegenerateDesignWarning, ShapeMismatch, TooFewSamples
from weakseg.volio import LABEL_LIVER, LABEL_TUMOR, ClinicalRecord, Mask


def _records(design, names=None):
    names = names or [f"x{j:02d}" for j in range(design.shape[1])]
    return [ClinicalRecord(f"p{i}", dict(zip(names, row))) for i, row in enumerate(design)]


def _synthetic(seed, n=200, n_informative=15, n_noise=10, target_r=0.82):
    """Labels from a sparse linear model with noise tuned to a target correlation."""
    rng = np.random.default_rng(seed)
    n_features = n_informative + n_noise
    design = rng.normal(size=(n, n_features))
    coefficients = np.zeros(n_features)
    magnitude = rng.uniform(0.75, 1.5, n_informative)
    coefficients[:n_informative] = magnitude * rng.choice([-1.0, 1.0], n_informative)
    signal = design @ coefficients
    noise_var = signal.var() * (1.0 / target_r ** 2 - 1.0)
    labels = signal + rng.normal(0.0, np.sqrt(noise_var), n)
    names = [f"x{j:02d}" for j in range(n_features)]
    return _records(design, names), labels, set(names[:n_informative])


class TestTlvr:

    def _masks(self, n_liver, n_tumor, dims=(10, 10, 1)):
        liver = np.zeros(dims, dtype=np.uint8)
        tumor = np.zeros(dims, dtype=np.uint8)
        liver.reshape(-1)[:n_liver] = LABEL_LIVER
        tumor.reshape(-1)[n_liver:n_liver + n_tumor] = LABEL_TUMOR
        return Mask(liver), Mask(tumor)

    @pytest.mark.parametrize("n_liver, n_tumor, expected", [
        (90, 10, 0.1), (50, 0, 0.0), (0, 5, 1.0), (0, 0, 0.0)])
    def test_ratio(self, n_liver, n_tumor, expected):
        assert compute_tlvr(*self._masks(n_liver, n_tumor)) == pytest.approx(expected)

    def test_misaligned(self):
        liver, _ = self._masks(5, 0)
        with pytest.raises(ShapeMismatch):
            compute_tlvr(liver, Mask(np.zeros((10, 10, 2), dtype=np.uint8)))

    def test_bounded(self):
        rng = np.random.default_rng(0)
        for _ in range(20):
            liver = Mask(rng.integers(0, 2, (4, 4, 4)).astype(np.uint8))
            tumor = Mask(rng.choice([0, LABEL_TUMOR], (4, 4, 4)).astype(np.uint8))
            assert 0.0 <= compute_tlvr(liver, tumor) <= 1.0


class TestFitLinear:

    def _noise_free(self, n=40, seed=0):
        rng = np.random.default_rng(seed)
        design = rng.normal(size=(n, 2)) * [3.0, 0.5] + [10.0, -2.0]
        labels = 2.0 * design[:, 0] - 1.0 * design[:, 1] + 0.5
        return _records(design, ["f1", "f2"]), labels

    def test_recovers_coefficients(self):
        records, labels = self._noise_free()
        model = fit_linear(records, labels)
        np.testing.assert_allclose(model.raw_coefficients, [2.0, -1.0], atol=1e-6)
        assert model.raw_intercept == pytest.approx(0.5, abs=1e-6)

    def test_noise_free_predictions(self):
        records, labels = self._noise_free()
        model = fit_linear(records, labels)
        np.testing.assert_allclose(predict_raw(model, records), labels, atol=1e-6)
        assert pearson(labels, predict_raw(model, records)) == pytest.approx(1.0, abs=1e-9)

    def test_residuals_orthogonal(self):
        rng = np.random.default_rng(1)
        design = rng.normal(size=(50, 4))
        labels = rng.normal(size=50)
        records = _records(design)
        model = fit_linear(records, labels)
        residual = labels - predict_raw(model, records)
        z = (design - model.means) / model.stds
        np.testing.assert_allclose(z.T @ residual, 0.0, atol=1e-6)
        assert abs(residual.sum()) < 1e-6

    def test_local_minimum(self):
        rng = np.random.default_rng(2)
        design = rng.normal(size=(60, 3))
        labels = design @ [0.3, -0.2, 0.1] + rng.normal(0, 0.1, 60)
        records = _records(design)
        model = fit_linear(records, labels)
        base = np.mean((predict_raw(model, records) - labels) ** 2)
        for j in range(3):
            for step in (-1e-3, 1e-3):
                coefficients = model.coefficients.copy()
                coefficients[j] += step
                perturbed = type(model)(model.selected_features, coefficients, model.intercept,
                                        model.means, model.stds)
                assert np.mean((predict_raw(perturbed, records) - labels) ** 2) >= base

    def test_constant_target(self):
        records = _records(np.random.default_rng(3).normal(size=(10, 3)))
        model = fit_linear(records, np.full(10, 0.25))
        np.testing.assert_allclose(model.coefficients, 0.0, atol=1e-12)
        assert model.intercept == pytest.approx(0.25)

    def test_duplicate_columns_match_pseudo_inverse(self):
        rng = np.random.default_rng(4)
        base = rng.normal(size=(30, 2))
        design = np.column_stack([base[:, 0], base[:, 0], base[:, 1]])
        labels = base @ [1.0, -0.5] + rng.normal(0, 0.05, 30)
        records = _records(design)
        model = fit_linear(records, labels)
        assert np.all(np.isfinite(model.coefficients))
        augmented = np.column_stack([np.ones(30), design])
        oracle = augmented @ (np.linalg.pinv(augmented) @ labels)
        np.testing.assert_allclose(predict_raw(model, records), oracle, atol=1e-4)

    def test_constant_feature_dropped_with_warning(self):
        rng = np.random.default_rng(5)
        design = np.column_stack([rng.normal(size=12), np.full(12, 3.0)])
        records = _records(design, ["useful", "constant"])
        with pytest.warns(DegenerateDesignWarning):
            model = fit_linear(records, design[:, 0] * 2.0)
        assert model.selected_features == ("useful",)
        assert model.dropped == ("constant",)

    def test_missing_values_mean_imputed(self):
        records = [
            ClinicalRecord("a", {"f": 1.0, "g": 0.0}),
            ClinicalRecord("b", {"f": 3.0, "g": 1.0}),
            ClinicalRecord("c", {"f": float("nan"), "g": 2.0}),
            ClinicalRecord("d", {"f": 5.0, "g": 2.0}),
        ]
        model = fit_linear(records, [0.1, 0.2, 0.3, 0.4])
        assert model.means[0] == pytest.approx(3.0)
        missing = ClinicalRecord("e", {"f": float("nan"), "g": 1.0})
        filled = ClinicalRecord("e", {"f": 3.0, "g": 1.0})
        assert predict_raw(model, [missing])[0] == pytest.approx(predict_raw(model, [filled])[0])

    def test_too_few_records(self):
        with pytest.raises(TooFewSamples):
            fit_linear(_records(np.ones((1, 2))), [0.5])
        with pytest.raises(TooFewSamples):
            fit_linear(_records(np.ones((3, 2))), [0.5, 0.1])


class TestPredict:

    def test_mean_record_predicts_intercept(self):
        rng = np.random.default_rng(6)
        design = rng.normal(size=(20, 3))
        records = _records(design)
        model = fit_linear(records, rng.uniform(0.1, 0.3, 20))
        mean_record = _records(design.mean(axis=0, keepdims=True))[0]
        assert predict_tlvr(model, mean_record) == pytest.approx(model.intercept)

    def test_clamped_to_unit_interval(self):
        records = _records(np.array([[0.0], [1.0], [2.0]]))
        model = fit_linear(records, [0.05, 0.0, -0.05])
        far = _records(np.array([[10.0]]))[0]
        assert predict_raw(model, [far])[0] < 0.0
        assert predict_tlvr(model, far) == 0.0

    def test_save_and_load(self, tmp_path):
        records, labels, _ = _synthetic(0, n=40)
        model = fit_linear(records, labels)
        save_model(model, tmp_path / "model.json")
        loaded = load_model(tmp_path / "model.json")
        assert loaded.selected_features == model.selected_features
        np.testing.assert_allclose(predict_raw(loaded, records), predict_raw(model, records))

    def test_regression_summary(self):
        summary = regression_summary([0.1, 0.2, 0.3], [0.1, 0.25, 0.3])
        assert summary["mse"] == pytest.approx(0.05 ** 2 / 3)
        assert summary["mae"] == pytest.approx(0.05 / 3)
        assert 0.9 < summary["pearson"] <= 1.0

    def test_tlvr_labels(self):
        liver = Mask(np.full((2, 2, 2), LABEL_LIVER, dtype=np.uint8))
        tumor = Mask(np.zeros((2, 2, 2), dtype=np.uint8))
        records = _records(np.array([[0.0], [1.0]]))
        model = fit_linear(records, [0.2, 0.4])
        labels = tlvr_labels(records, [liver, liver], [tumor, tumor], model)
        assert [label.r_true for label in labels] == [0.0, 0.0]
        assert labels[1].r_hat == pytest.approx(0.4)


class TestFeatureSelection:

    def test_folds_are_seed_deterministic(self):
        first = fold_indices(23, 5, seed=3)
        second = fold_indices(23, 5, seed=3)
        assert all(np.array_equal(a[1], b[1]) for a, b in zip(first, second))
        tested = np.sort(np.concatenate([test for _, test in first]))
        np.testing.assert_array_equal(tested, np.arange(23))

    def test_cross_val_uses_training_fold_only(self):
        records, labels, _ = _synthetic(1, n=30, n_informative=3, n_noise=1)
        features = records[0].feature_names
        predictions = cross_val_predict(records, labels, features, 5, seed=2)
        for train, test in fold_indices(30, 5, seed=2):
            model = fit_linear([records[i] for i in train], labels[train], features)
            np.testing.assert_allclose(predictions[test],
                                       predict_raw(model, [records[i] for i in test]))

    @pytest.mark.parametrize("seed", range(5))
    def test_recovers_informative_features(self, seed):
        records, labels, informative = _synthetic(seed)
        model, report = select_features(records, labels, k_folds=5, seed=seed)
        assert len(informative & set(report.selected)) >= 12
        assert model.selected_features == report.selected
        assert report.informative
        assert abs(report.best_pearson - 0.82) <= 0.05
        assert len(report.curve) == 25

    def test_single_predictive_feature_ranks_first(self):
        rng = np.random.default_rng(7)
        design = rng.normal(size=(60, 6))
        records = _records(design)
        _, report = select_features(records, design[:, 0])
        assert report.ranking[0] == "x00"
        assert report.curve[0] == (1, pytest.approx(1.0, abs=1e-9))

    def test_null_case_is_flagged(self):
        rng = np.random.default_rng(8)
        records = _records(rng.normal(size=(200, 10)))
        _, report = select_features(records, rng.normal(size=200))
        assert abs(report.best_pearson) < 0.3
        assert not report.informative

    def test_ties_prefer_fewer_features(self):
        rng = np.random.default_rng(9)
        design = rng.normal(size=(40, 3))
        _, report = select_features(_records(design), design[:, 0] * 0.0 + 1.0)
        assert report.best_n == 1

    def test_too_few_records(self):
        records, labels, _ = _synthetic(0, n=4, n_informative=2, n_noise=0)
        with pytest.raises(TooFewSamples):
            select_features(records, labels, k_folds=5)

    def test_tables(self, tmp_path):
        records, labels, _ = _synthetic(2, n=60, n_informative=4, n_noise=2)
        model, report = select_features(records, labels)
        write_selection_csv(report, tmp_path / "selection.csv")
        write_coefficients_csv(model, tmp_path / "coefficients.csv")
        header = (tmp_path / "selection.csv").read_text().splitlines()[0]
        assert header == "n,cv_pearson"
        header = (tmp_path / "coefficients.csv").read_text().splitlines()[0]
        assert header.startswith("feature,coefficient")
