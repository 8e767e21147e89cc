import csv
import math

import numpy as np
import pytest

from plcfe.errors import DegenerateDataError, ParameterError
from plcfe.metrics import (
    LabeledEmbeddings,
    clustering_accuracy,
    inter_similarity,
    intra_similarity,
    pca_project_2d,
    similarity_ratio,
    write_projection_csv,
    write_similarity_csv,
)
from plcfe.numcore import l2_normalize, make_rng

E5 = math.exp(5.0)


class TestIntraSimilarity:
    def test_identical_unit_rows(self):
        u = np.array([0.6, 0.8])
        value = intra_similarity(np.tile(u, (4, 1)), tau=0.2)
        assert value == pytest.approx(E5, rel=1e-12)

    def test_antipodal_rows_cancel(self):
        u = np.array([1.0, 0.0])
        assert intra_similarity(np.stack([u, -u]), tau=0.2) == pytest.approx(1.0)

    def test_matches_direct_sum_oracle(self):
        rng = make_rng(0)
        z = l2_normalize(rng.normal(size=(4, 6)))
        mu = z.mean(axis=0)
        oracle = math.exp(sum(float(mu @ z[j]) for j in range(4)) / (0.2 * 4))
        assert abs(intra_similarity(z, 0.2) - oracle) < 1e-12

    def test_tau_validation(self):
        with pytest.raises(ParameterError):
            intra_similarity(np.ones((2, 2)), tau=0.0)


class TestInterSimilarity:
    def test_orthogonal(self):
        assert inter_similarity(np.array([1.0, 0.0]), np.array([0.0, 1.0]), 0.2) == 1.0

    def test_identical(self):
        u = np.array([1.0, 0.0])
        assert inter_similarity(u, u, 0.2) == pytest.approx(E5, rel=1e-12)

    def test_random_pair_oracle(self):
        rng = make_rng(1)
        a, b = rng.normal(size=4), rng.normal(size=4)
        assert abs(inter_similarity(a, b, 0.3) - math.exp(float(a @ b) / 0.3)) < 1e-12


def make_labeled(embeddings, labels):
    labels = np.asarray(labels)
    return LabeledEmbeddings(embeddings, labels, int(labels.max()) + 1)


class TestSimilarityRatio:
    def test_three_orthogonal_classes(self):
        e = np.eye(3)
        emb = np.repeat(e, 2, axis=0)
        report = similarity_ratio(make_labeled(emb, [0, 0, 1, 1, 2, 2]), 0.2)
        assert report.ratio == pytest.approx(math.exp(-5.0), rel=1e-12)

    def test_two_identical_classes(self):
        u = np.array([[1.0, 0.0]])
        emb = np.vstack([u, u])
        report = similarity_ratio(make_labeled(emb, [0, 1]), 0.2)
        assert report.ratio == pytest.approx(1.0, rel=1e-12)

    def test_nested_loop_oracle(self):
        rng = make_rng(2)
        emb = l2_normalize(rng.normal(size=(15, 8)))
        labels = np.repeat([0, 1, 2], 5)
        tau = 0.2
        report = similarity_ratio(make_labeled(emb, labels), tau)

        total = 0.0
        for i in range(3):
            rows_i = emb[labels == i]
            mu_i = rows_i.mean(axis=0)
            intra = math.exp(sum(float(mu_i @ r) for r in rows_i) / (tau * len(rows_i)))
            inter = 0.0
            for j in range(3):
                if j == i:
                    continue
                mu_j = emb[labels == j].mean(axis=0)
                inter += math.exp(float(mu_i @ mu_j) / tau)
            total += inter / (2 * intra)
        assert abs(report.ratio - total / 3) < 1e-10

    def test_rotation_invariance(self):
        rng = make_rng(3)
        emb = l2_normalize(rng.normal(size=(12, 6)))
        labels = np.repeat([0, 1, 2], 4)
        q, _ = np.linalg.qr(rng.normal(size=(6, 6)))
        base = similarity_ratio(make_labeled(emb, labels), 0.2)
        rotated = similarity_ratio(make_labeled(emb @ q, labels), 0.2)
        assert rotated.ratio == pytest.approx(base.ratio, rel=1e-10)
        assert rotated.intra_mean == pytest.approx(base.intra_mean, rel=1e-10)
        assert rotated.inter_mean == pytest.approx(base.inter_mean, rel=1e-10)

    def test_within_class_permutation_invariance(self):
        rng = make_rng(4)
        emb = l2_normalize(rng.normal(size=(10, 5)))
        labels = np.repeat([0, 1], 5)
        base = similarity_ratio(make_labeled(emb, labels), 0.2)
        shuffled = emb.copy()
        shuffled[0:5] = emb[[3, 1, 4, 0, 2]]
        report = similarity_ratio(make_labeled(shuffled, labels), 0.2)
        assert report.ratio == pytest.approx(base.ratio, rel=1e-12)
        assert np.allclose(report.per_class_intra, base.per_class_intra)

    def test_needs_two_classes(self):
        with pytest.raises(ParameterError):
            similarity_ratio(make_labeled(np.ones((3, 2)), [0, 0, 0]), 0.2)


class TestPca:
    def test_collinear_data_second_axis_zero(self):
        t = np.linspace(-2, 2, 7)[:, None]
        points, _ = pca_project_2d(t * np.array([1.0, 1.0, 0.0]))
        assert np.max(np.abs(points[:, 1])) < 1e-10

    def test_axis_aligned_2d(self):
        # exactly diagonal sample covariance with var(x) > var(y)
        x = np.array([[3.0, 0.0], [-3.0, 0.0], [0.0, 1.0], [0.0, -1.0]])
        points, _ = pca_project_2d(x)
        # projection is the centered input up to per-axis sign
        for k in range(2):
            assert np.allclose(points[:, k], x[:, k], atol=1e-12) or np.allclose(
                points[:, k], -x[:, k], atol=1e-12
            )

    def test_projected_variance_matches_top_eigenvalues(self):
        rng = make_rng(6)
        x = rng.normal(size=(5, 4))
        points, _ = pca_project_2d(x)
        centered = x - x.mean(axis=0)
        eigvals = np.linalg.eigvalsh(centered.T @ centered / 4)
        top2 = np.sort(eigvals)[::-1][:2].sum()
        projected = np.sum(points.var(axis=0, ddof=1))
        assert abs(projected - top2) < 1e-10

    def test_centers_projected(self):
        rng = make_rng(7)
        x = rng.normal(size=(8, 3))
        labels = np.array([0, 0, 0, 0, 1, 1, 1, 1])
        points, centers = pca_project_2d(x, labels)
        assert centers.shape == (2, 2)
        assert np.allclose(centers[0], points[:4].mean(axis=0))

    def test_rank_zero_degenerate(self):
        with pytest.raises(DegenerateDataError):
            pca_project_2d(np.ones((4, 3)))

    def test_too_small(self):
        with pytest.raises(ParameterError):
            pca_project_2d(np.ones((1, 3)))


class TestClusteringAccuracy:
    def test_relabeling_is_perfect(self):
        assert clustering_accuracy([0, 0, 1, 1], [1, 1, 0, 0]) == 1.0

    def test_identity(self):
        assert clustering_accuracy([0, 1, 2, 0], [0, 1, 2, 0]) == 1.0

    def test_half_match(self):
        # both possible 2-permutations match exactly 2 of 4
        assert clustering_accuracy([0, 1, 0, 1], [0, 0, 1, 1]) == 0.5

    def test_permutation_invariance(self):
        rng = make_rng(8)
        pseudo = rng.integers(0, 4, size=40)
        true = rng.integers(0, 3, size=40)
        base = clustering_accuracy(pseudo, true)
        perm = np.array([2, 0, 3, 1])
        assert clustering_accuracy(perm[pseudo], true) == base

    def test_more_clusters_than_classes(self):
        acc = clustering_accuracy([0, 1, 2, 3], [0, 0, 1, 1])
        assert acc == 0.5

    def test_empty_is_error(self):
        with pytest.raises(ParameterError):
            clustering_accuracy([], [])


class TestCsvExports:
    def test_similarity_csv(self, tmp_path):
        emb = np.repeat(np.eye(3), 2, axis=0)
        report = similarity_ratio(make_labeled(emb, [0, 0, 1, 1, 2, 2]), 0.2)
        path = tmp_path / "sim.csv"
        write_similarity_csv(report, path)
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["field", "value"]
        as_dict = {r[0]: r[1] for r in rows[1:]}
        assert float(as_dict["ratio"]) == pytest.approx(report.ratio, rel=1e-5)
        assert "intra_class_2" in as_dict

    def test_projection_csv(self, tmp_path):
        pts = np.array([[1.234567, -2.0], [0.0, 3.5]])
        path = tmp_path / "pca.csv"
        write_projection_csv(pts, path, labels=np.array([0, 1]))
        rows = list(csv.reader(open(path)))
        assert rows[0] == ["x", "y", "label"]
        assert rows[1] == ["1.23457", "-2", "0"]
