import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bodvw.errors import DimensionError, FileFormatError, TrainingError
from bodvw.svm import (
    DEFAULT_C_GRID,
    DEFAULT_GAMMA,
    GridSearchSpec,
    KernelRows,
    apply_standardizer,
    fit_standardizer,
    grid_search_C,
    kkt_residual,
    load_model,
    model_from_dict,
    model_to_dict,
    predict,
    rbf_kernel,
    rbf_kernel_matrix,
    save_model,
    smo,
    stratified_folds,
    train_binary,
    train_multiclass,
)
from oracles import dual_value, rbf_gram, svm_dual_oracle


def blobs(n_per, centers, spread=0.3, seed=0):
    rng = np.random.default_rng(seed)
    X = np.concatenate([rng.normal(c, spread, size=(n_per, len(c))) for c in centers])
    y = np.repeat(np.arange(len(centers)), n_per)
    return X, y


class TestStandardizer:
    def test_hand_example(self):
        s = fit_standardizer([[0, 0], [2, 2]])
        assert s.means.tolist() == [1, 1] and s.stds.tolist() == [1, 1]
        assert apply_standardizer(s, [2, 0]).tolist() == [1, -1]
        assert np.all(apply_standardizer(s, s.means) == 0)

    def test_constant_column(self):
        s = fit_standardizer([[5.0, 1], [5.0, 2], [5.0, 3]])
        assert s.stds[0] == 1e-12
        assert np.all(apply_standardizer(s, [[5.0, 1], [5.0, 3]])[:, 0] == 0)

    def test_errors(self):
        with pytest.raises(TrainingError):
            fit_standardizer([[1.0, 2.0]])
        with pytest.raises(DimensionError):
            apply_standardizer(fit_standardizer([[0, 0], [1, 1]]), [1, 2, 3])


class TestKernel:
    def test_values(self):
        assert DEFAULT_GAMMA == 1e-5
        assert rbf_kernel([1.5, -2], [1.5, -2]) == 1.0
        assert rbf_kernel([0, 0], [3, 4], 0.01) == pytest.approx(math.exp(-0.25), abs=1e-15)
        assert round(rbf_kernel([0, 0], [3, 4], 0.01), 4) == 0.7788

    def test_matrix_matches_loops(self):
        rng = np.random.default_rng(0)
        A, B = rng.normal(size=(7, 3)), rng.normal(size=(5, 3))
        np.testing.assert_allclose(rbf_kernel_matrix(A, B, 0.7), rbf_gram(A, B, 0.7), atol=1e-14)

    def test_lru_rows_match_full(self):
        X = np.random.default_rng(1).normal(size=(40, 3))
        small = KernelRows(X, 0.5, budget=40 * 8 * 3)
        assert small.full is None
        full = rbf_kernel_matrix(X, X, 0.5)
        for i in [0, 5, 0, 9, 13, 5, 39]:
            np.testing.assert_allclose(small.row(i), full[i], atol=1e-14)
        assert len(small._rows) <= 3


class TestBinary:
    def test_two_points(self):
        X = np.array([[0.0, 0.0], [2.0, 0.0]])
        m = train_binary(X, [1, -1], C=1.0, gamma=0.5)
        assert m.support.tolist() == [0, 1]
        f = m.decision_function(np.vstack([X, [[1.0, 0.0]]]))
        assert f[0] > 0 > f[1]
        assert f[2] == pytest.approx(0.0, abs=1e-12)

    def test_xor(self):
        X = np.array([[0.0, 0], [1, 1], [0, 1], [1, 0]])
        y = np.array([1.0, 1, -1, -1])
        m = train_binary(X, y, C=10.0, gamma=1.0)
        assert m.predict(X).tolist() == y.tolist()
        K = rbf_gram(X, X, 1.0)
        _, _, obj = svm_dual_oracle(K, y, 10.0)
        assert dual_value(m.alpha, y, K) == pytest.approx(obj, abs=1e-3)

    def test_separable_blobs_vs_oracle(self):
        X, yi = blobs(10, [(0, 0), (3, 3)], seed=4)
        y = np.where(yi == 0, 1.0, -1.0)
        m = train_binary(X, y, C=1.0, gamma=0.5)
        K = rbf_gram(X, X, 0.5)
        alpha, b, obj = svm_dual_oracle(K, y, 1.0)
        assert abs(dual_value(m.alpha, y, K) - obj) <= 1e-3
        probe = np.random.default_rng(5).uniform(-1, 4, size=(200, 2))
        oracle_pred = np.where(rbf_gram(probe, X, 0.5) @ (alpha * y) + b >= 0, 1, -1)
        assert np.mean(m.predict(probe) == oracle_pred) >= 0.99

    @settings(max_examples=25, deadline=None)
    @given(st.integers(0, 2**31), st.sampled_from([0.1, 1.0, 10.0]))
    def test_feasibility_and_kkt(self, seed, C):
        rng = np.random.default_rng(seed)
        n = int(rng.integers(4, 25))
        X = rng.normal(size=(n, 3))
        y = np.where(rng.random(n) < 0.5, 1.0, -1.0)
        y[:2] = [1, -1]
        m = train_binary(X, y, C=C, gamma=0.5)
        assert np.all(m.alpha >= 0) and np.all(m.alpha <= C)
        assert abs(float(m.alpha @ y)) <= 1e-6
        assert kkt_residual(m.alpha, y, rbf_kernel_matrix(X, X, 0.5), C) <= 1e-3

    def test_deterministic(self):
        X, yi = blobs(8, [(0, 0), (1, 1)], spread=0.8, seed=2)
        y = np.where(yi == 0, 1.0, -1.0)
        a, b = train_binary(X, y, 5.0, 0.3), train_binary(X, y, 5.0, 0.3)
        assert a.alpha.tobytes() == b.alpha.tobytes() and a.bias == b.bias

    @pytest.mark.parametrize("y,exc", [([1, 1, 1], TrainingError), ([1, 0, -1], TrainingError),
                                       ([1, -1], DimensionError)])
    def test_label_errors(self, y, exc):
        with pytest.raises(exc):
            train_binary(np.zeros((3, 2)), y)

    def test_nonfinite_and_bad_c(self):
        X = np.array([[0.0], [np.nan]])
        with pytest.raises(TrainingError):
            train_binary(X, [1, -1])
        with pytest.raises(TrainingError):
            train_binary(np.array([[0.0], [1.0]]), [1, -1], C=0.0)

    def test_lru_path_matches_full_kernel(self):
        X, yi = blobs(15, [(0, 0), (1.5, 1.5)], spread=0.7, seed=9)
        y = np.where(yi == 0, 1.0, -1.0)
        full = train_binary(X, y, 3.0, 0.4)
        lru = train_binary(X, y, 3.0, 0.4, cache_bytes=30 * 8 * 4)
        K = rbf_gram(X, X, 0.4)
        # matvec vs GEMM rounding can change the SMO path, not the optimum
        assert dual_value(lru.alpha, y, K) == pytest.approx(dual_value(full.alpha, y, K), abs=1e-4)
        assert kkt_residual(lru.alpha, y, K, 3.0) <= 1e-3
        probe = np.random.default_rng(3).uniform(-1, 3, size=(100, 2))
        np.testing.assert_allclose(lru.decision_function(probe), full.decision_function(probe), atol=1e-2)

    def test_smo_returns_gap(self):
        X, yi = blobs(5, [(0, 0), (2, 2)], seed=1)
        y = np.where(yi == 0, 1.0, -1.0)
        alpha, rho, it, gap = smo(KernelRows(X, 0.5), y, 1.0)
        assert gap < 1e-3 and it > 0


class TestMulticlass:
    def test_two_class_reduces_to_binary(self):
        X, y = blobs(10, [(0, 0), (2, 1)], spread=0.9, seed=3)
        model = train_multiclass(X, y, C=2.0, gamma=0.5)
        assert len(model.pairs) == 1
        Xs = apply_standardizer(model.standardizer, X)
        binary = train_binary(Xs, np.where(y == 0, 1.0, -1.0), C=2.0, gamma=0.5)
        probe = np.random.default_rng(0).uniform(-2, 4, size=(100, 2))
        expect = np.where(binary.decision_function(apply_standardizer(model.standardizer, probe)) >= 0, 0, 1)
        assert model.predict_indices(probe).tolist() == expect.tolist()

    def test_four_classes_six_pairs(self):
        X, y = blobs(5, [(0, 0), (4, 0), (0, 4), (4, 4)], seed=1)
        model = train_multiclass(X, y, C=1.0, gamma=0.5)
        assert [p for p, _ in model.pairs] == [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]

    def test_three_blobs_training_accuracy(self):
        X, y = blobs(10, [(0, 0), (5, 0), (0, 5)], seed=2)
        model = train_multiclass(X, y, C=1.0, gamma=0.5)
        assert model.predict(X) == y.tolist()
        for (a, b), svm in model.pairs:
            idx = np.flatnonzero((y == a) | (y == b))
            Xs = apply_standardizer(model.standardizer, X[idx])
            assert all(any(np.array_equal(sv, row) for row in Xs) for sv in svm.support_vectors)
        assert predict(model, X[0]) == 0
        with pytest.raises(DimensionError):
            predict(model, np.zeros(3))

    def test_string_labels_and_permutation(self):
        X, y = blobs(8, [(0, 0), (3, 0), (0, 3)], spread=0.6, seed=6)
        names = np.array(["Normal", "Covid", "Pneumonia"])
        model = train_multiclass(X, names[y], C=1.0, gamma=0.5)
        assert model.classes == ["Covid", "Normal", "Pneumonia"]
        probe = np.random.default_rng(1).uniform(-1, 4, size=(60, 2))
        perm_names = np.array(["B", "C", "A"])
        relabeled = train_multiclass(X, perm_names[y], C=1.0, gamma=0.5)
        to_perm = dict(zip(names, perm_names))
        assert [to_perm[p] for p in model.predict(probe)] == relabeled.predict(probe)

    def test_vote_tie_uses_margin(self):
        X, y = blobs(6, [(0, 0), (4, 0), (2, 3.5)], spread=0.2, seed=7)
        model = train_multiclass(X, y, C=1.0, gamma=0.3)
        votes, margin = model.decision_votes(np.array([[2.0, 1.2]]))
        pred = model.predict_indices(np.array([[2.0, 1.2]]))[0]
        tied = np.flatnonzero(votes[0] == votes[0].max())
        assert pred == tied[np.argmax(margin[0, tied])]


class TestGridSearch:
    def test_default_grid(self):
        assert DEFAULT_C_GRID == (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 100)

    def test_separable_all_candidates_perfect(self):
        X, y = blobs(10, [(0, 0), (6, 0), (0, 6)], spread=0.3, seed=8)
        best_C, table, model = grid_search_C(X, y, GridSearchSpec(), gamma=0.1)
        assert len(table) == 11
        assert all(row["mean_accuracy"] == 1.0 for row in table)
        assert best_C == 1 and model.C == 1
        assert model.predict(X) == y.tolist()

    def test_best_is_argmax_smallest_on_ties(self):
        X, y = blobs(12, [(0, 0), (1, 0)], spread=0.8, seed=3)
        best_C, table, _ = grid_search_C(X, y, GridSearchSpec(C_grid=(100, 1, 10, 0.01), folds=3), gamma=0.5)
        means = [r["mean_accuracy"] for r in table]
        assert [r["C"] for r in table] == [0.01, 1, 10, 100]
        assert best_C == table[int(np.argmax(means))]["C"]

    def test_stratified_folds(self):
        y = np.array([0] * 7 + [1] * 5 + [2] * 10)
        f = stratified_folds(y, 5, seed=0)
        for c in range(3):
            counts = np.bincount(f[y == c], minlength=5)
            assert counts.max() - counts.min() <= 1
        assert np.bincount(f).max() - np.bincount(f).min() <= 1
        assert np.array_equal(f, stratified_folds(y, 5, seed=0))
        with pytest.raises(TrainingError):
            stratified_folds(np.array([0] * 4 + [1] * 9), 5, 0)

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            GridSearchSpec(folds=1)
        with pytest.raises(ValueError):
            GridSearchSpec(C_grid=())


class TestPersistence:
    def test_round_trip_predictions(self, tmp_path):
        X, y = blobs(10, [(0, 0), (4, 0), (0, 4)], spread=0.5, seed=11)
        model = train_multiclass(X, np.array(["a", "b", "c"])[y], C=3.0, gamma=0.4)
        model.meta = {"codebook_hash": "abc"}
        save_model(model, tmp_path / "m.json")
        back = load_model(tmp_path / "m.json")
        probe = np.random.default_rng(2).uniform(-1, 5, size=(100, 2))
        assert back.predict(probe) == model.predict(probe)
        assert (back.classes, back.C, back.gamma, back.meta) == (["a", "b", "c"], 3.0, 0.4, {"codebook_hash": "abc"})
        d = model_to_dict(model)
        assert d["format"] == "bodvw-svm" and d["version"] == 1

    def test_bad_files(self, tmp_path):
        X, y = blobs(4, [(0, 0), (3, 3)], seed=0)
        d = model_to_dict(train_multiclass(X, y, gamma=0.5))
        with pytest.raises(FileFormatError):
            model_from_dict({**d, "version": 2})
        with pytest.raises(FileFormatError):
            model_from_dict({k: v for k, v in d.items() if k != "version"})
        with pytest.raises(FileFormatError):
            model_from_dict({**d, "dim": 3})
        (tmp_path / "junk.json").write_text("{not json")
        with pytest.raises(FileFormatError):
            load_model(tmp_path / "junk.json")
