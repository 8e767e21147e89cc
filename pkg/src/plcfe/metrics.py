"""Embedding-quality analysis.

Measures how clustering-friendly an embedding space is: classes whose
samples sit close to their own center (high intra-similarity) and whose
centers sit far from other centers (low inter-similarity) get a low
inter/intra ratio, and a simple clustering algorithm will recover them.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import DegenerateDataError, ParameterError, ShapeError

MAX_ACCURACY_CLASSES = 64


@dataclass
class LabeledEmbeddings:
    """Embedding rows plus integer class ids in [0, num_classes)."""

    embeddings: np.ndarray
    labels: np.ndarray
    num_classes: int

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        if self.embeddings.ndim != 2 or self.labels.shape != (self.embeddings.shape[0],):
            raise ShapeError("embeddings must be (n, d) with one label per row")
        if self.num_classes < 1:
            raise ParameterError("num_classes must be positive")
        present = np.unique(self.labels)
        if present.min() < 0 or present.max() >= self.num_classes:
            raise ParameterError("labels outside [0, num_classes)")
        if present.size != self.num_classes:
            raise ParameterError("every class id must appear at least once")

    def class_rows(self, class_id: int) -> np.ndarray:
        return self.embeddings[self.labels == class_id]


@dataclass
class SimilarityReport:
    """Dataset-level similarity summary.

    inter_mean averages over ordered center pairs, i.e. inter_sum divided
    by C*(C-1); inter_mean_per_sample divides the same sum by C times the
    mean class size instead. Both are reported because either normalization
    is defensible; the ratio is what drives conclusions.
    """

    intra_mean: float
    inter_mean: float
    ratio: float
    per_class_intra: np.ndarray
    temperature: float
    num_classes: int
    intra_sum: float
    inter_sum: float
    inter_mean_per_sample: float


def intra_similarity(class_embeddings: np.ndarray, tau: float) -> float:
    """Compactness of one class: exp of the mean dot product between the
    class center and its members, scaled by 1/tau."""
    if tau <= 0:
        raise ParameterError("tau must be positive")
    z = np.asarray(class_embeddings, dtype=np.float64)
    if z.ndim != 2 or z.shape[0] < 1:
        raise ShapeError("class_embeddings must be a non-empty (n, d) matrix")
    center = z.mean(axis=0)
    return float(np.exp(np.sum(z @ center) / (tau * z.shape[0])))


def inter_similarity(center_i: np.ndarray, center_j: np.ndarray, tau: float) -> float:
    """Closeness of two class centers: exp(center_i . center_j / tau)."""
    if tau <= 0:
        raise ParameterError("tau must be positive")
    center_i = np.asarray(center_i, dtype=np.float64)
    center_j = np.asarray(center_j, dtype=np.float64)
    if center_i.shape != center_j.shape or center_i.ndim != 1:
        raise ShapeError("centers must be vectors of equal dimension")
    return float(np.exp(center_i @ center_j / tau))


def similarity_ratio(data: LabeledEmbeddings, tau: float) -> SimilarityReport:
    """Average inter- to intra-class similarity ratio over all classes.

    For each class i the inter similarities to every other center are
    summed and divided by (C-1) times that class's intra similarity; the
    ratio is the mean of those per-class values. Lower means the embedding
    is friendlier to clustering.
    """
    if data.num_classes < 2:
        raise ParameterError("need at least 2 classes")
    c = data.num_classes
    per_class = np.array([intra_similarity(data.class_rows(i), tau) for i in range(c)])
    centers = np.stack([data.class_rows(i).mean(axis=0) for i in range(c)])
    inter = np.exp(centers @ centers.T / tau)
    np.fill_diagonal(inter, 0.0)
    inter_sum = float(inter.sum())
    ratio = float(np.mean(inter.sum(axis=1) / ((c - 1) * per_class)))
    mean_class_size = data.embeddings.shape[0] / c
    return SimilarityReport(
        intra_mean=float(per_class.mean()),
        inter_mean=inter_sum / (c * (c - 1)),
        ratio=ratio,
        per_class_intra=per_class,
        temperature=tau,
        num_classes=c,
        intra_sum=float(per_class.sum()),
        inter_sum=inter_sum,
        inter_mean_per_sample=inter_sum / (mean_class_size * c),
    )


def pca_project_2d(
    embeddings: np.ndarray, labels: np.ndarray | None = None
) -> tuple[np.ndarray, np.ndarray | None]:
    """Project rows onto the top-2 principal directions for plotting.

    Directions are eigenvectors of the covariance matrix sorted by
    descending eigenvalue, each sign-fixed so its largest-magnitude
    component is positive. If labels are given, per-class centers are
    projected too.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2 or x.shape[1] < 2:
        raise ParameterError("need at least 2 rows and 2 columns")
    centered = x - x.mean(axis=0)
    cov = centered.T @ centered / (x.shape[0] - 1)
    eigvals, eigvecs = np.linalg.eigh(cov)
    order = np.argsort(eigvals)[::-1]
    if eigvals[order[0]] <= 1e-24:
        raise DegenerateDataError("data has no variance to project")
    basis = eigvecs[:, order[:2]]
    for k in range(2):
        lead = np.argmax(np.abs(basis[:, k]))
        if basis[lead, k] < 0:
            basis[:, k] = -basis[:, k]
    points = centered @ basis
    centers = None
    if labels is not None:
        labels = np.asarray(labels)
        ids = np.unique(labels)
        centers = np.stack([points[labels == c].mean(axis=0) for c in ids])
    return points, centers


def clustering_accuracy(pseudo_labels, true_labels) -> float:
    """Best one-to-one matching accuracy between cluster ids and class ids,
    via optimal assignment on the contingency table."""
    pseudo = np.asarray(pseudo_labels, dtype=np.int64)
    true = np.asarray(true_labels, dtype=np.int64)
    if pseudo.size == 0:
        raise ParameterError("empty label lists")
    if pseudo.shape != true.shape:
        raise ShapeError("label lists must have equal length")
    n_pseudo = int(pseudo.max()) + 1
    n_true = int(true.max()) + 1
    if n_pseudo > MAX_ACCURACY_CLASSES or n_true > MAX_ACCURACY_CLASSES:
        raise ParameterError(f"more than {MAX_ACCURACY_CLASSES} clusters or classes")
    side = max(n_pseudo, n_true)
    table = np.zeros((side, side), dtype=np.int64)
    for p, t in zip(pseudo, true):
        table[p, t] += 1
    rows, cols = linear_sum_assignment(-table)
    return float(table[rows, cols].sum()) / pseudo.size


def write_similarity_csv(report: SimilarityReport, path) -> None:
    """Long-format CSV of the report, 6 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["field", "value"])
        writer.writerow(["intra_mean", f"{report.intra_mean:.6g}"])
        writer.writerow(["inter_mean", f"{report.inter_mean:.6g}"])
        writer.writerow(["inter_mean_per_sample", f"{report.inter_mean_per_sample:.6g}"])
        writer.writerow(["ratio", f"{report.ratio:.6g}"])
        writer.writerow(["intra_sum", f"{report.intra_sum:.6g}"])
        writer.writerow(["inter_sum", f"{report.inter_sum:.6g}"])
        writer.writerow(["temperature", f"{report.temperature:.6g}"])
        writer.writerow(["num_classes", str(report.num_classes)])
        for i, value in enumerate(report.per_class_intra):
            writer.writerow([f"intra_class_{i}", f"{value:.6g}"])


def write_projection_csv(points: np.ndarray, path, labels: np.ndarray | None = None) -> None:
    """2-D projection as CSV (x, y and optional label), 6 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        if labels is None:
            writer.writerow(["x", "y"])
            for row in points:
                writer.writerow([f"{row[0]:.6g}", f"{row[1]:.6g}"])
        else:
            writer.writerow(["x", "y", "label"])
            for row, lab in zip(points, labels):
                writer.writerow([f"{row[0]:.6g}", f"{row[1]:.6g}", str(int(lab))])
