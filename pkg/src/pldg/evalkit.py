"""Metrics, Frechet domain distance, prompt-weight analysis and report files."""

from __future__ import annotations

import csv
from collections.abc import Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

from pldg.errors import ConfigError, DataError

FRECHET_RIDGE = 1e-6


class UndefinedMetricError(ValueError):
    pass


@dataclass(frozen=True)
class MetricReport:
    dataset: str
    metric: str
    value: float
    n: int
    seed: int

    def __post_init__(self):
        if not 0.0 <= self.value <= 1.0:
            raise ConfigError(f"metric value {self.value} outside [0, 1]")


@dataclass(frozen=True)
class DomainDistanceReport:
    domains: tuple[int, ...]
    frechet: tuple[float, ...]
    mean_weight: tuple[float, ...]
    spearman: float | None  # None when fewer than 3 domains

    @property
    def argmax_weight(self) -> int:
        return self.domains[int(np.argmax(self.mean_weight))]

    @property
    def argmin_distance(self) -> int:
        return self.domains[int(np.argmin(self.frechet))]


def _binary_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    pos = labels == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("ROC-AUC needs both positive and negative labels")
    ranks = stats.rankdata(scores)  # average ranks give ties half credit
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_auc(scores, labels) -> float:
    """Mann-Whitney ROC-AUC; ties count 1/2.

    With an n x C score matrix and C > 2, returns the one-vs-rest macro mean
    over classes present in ``labels``.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim == 2 and scores.shape[1] == 2:
        scores = scores[:, 1]
    if scores.ndim == 1:
        if len(scores) != len(labels):
            raise ConfigError("scores and labels differ in length")
        uniq = np.unique(labels)
        if not set(uniq.tolist()) <= {0, 1}:
            raise ConfigError("binary ROC-AUC expects labels in {0, 1}")
        return _binary_auc(scores, labels.astype(np.int64))
    if len(scores) != len(labels):
        raise ConfigError("scores and labels differ in length")
    present = np.unique(labels)
    if len(present) < 2:
        raise UndefinedMetricError("ROC-AUC needs at least two classes")
    return float(np.mean([_binary_auc(scores[:, c], (labels == c).astype(np.int64)) for c in present]))


def accuracy(predictions, labels) -> float:
    predictions = np.asarray(predictions)
    labels = np.asarray(labels)
    if predictions.shape != labels.shape:
        raise ConfigError(f"length mismatch: {predictions.shape} vs {labels.shape}")
    if len(labels) == 0:
        raise ConfigError("accuracy of an empty set is undefined")
    return float((predictions == labels).mean())


def _psd_sqrt(a: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((a + a.T) / 2.0)
    return (vecs * np.sqrt(np.clip(vals, 0.0, None))) @ vecs.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    """``|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})``.

    The trace of ``(S_a S_b)^{1/2}`` is taken from the symmetric form
    ``S_a^{1/2} S_b S_a^{1/2}``, which has the same eigenvalues.
    """
    mu_a, mu_b = np.atleast_1d(mu_a), np.atleast_1d(mu_b)
    cov_a, cov_b = np.atleast_2d(cov_a), np.atleast_2d(cov_b)
    root_a = _psd_sqrt(cov_a)
    middle = root_a @ cov_b @ root_a
    eig = np.linalg.eigvalsh((middle + middle.T) / 2.0)
    tr_cross = np.sqrt(np.clip(eig, 0.0, None)).sum()
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * tr_cross)
    return max(value, 0.0)


def frechet_distance(features_a, features_b, ridge: float = FRECHET_RIDGE) -> float:
    """Gaussian Frechet distance between two feature sets (rows are samples)."""
    a = np.asarray(features_a, dtype=np.float64)
    b = np.asarray(features_b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[1]:
        raise ConfigError(f"feature sets must be n x d with equal d, got {a.shape} and {b.shape}")
    if len(a) < 2 or len(b) < 2:
        raise ConfigError("each feature set needs at least 2 rows")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise DataError("features contain non-finite values")
    eye = ridge * np.eye(a.shape[1])
    cov_a = np.cov(a, rowvar=False).reshape(a.shape[1], a.shape[1]) + eye
    cov_b = np.cov(b, rowvar=False).reshape(b.shape[1], b.shape[1]) + eye
    return frechet_from_moments(a.mean(0), cov_a, b.mean(0), cov_b)


def spearman(x, y) -> float:
    return float(stats.spearmanr(x, y).statistic)


def domain_distance_report(
    source_features: np.ndarray,
    source_domains: np.ndarray,
    target_features: np.ndarray,
    target_weights: np.ndarray,
) -> DomainDistanceReport:
    """Per-domain Frechet distance to the target and mean adapter weight on it."""
    source_domains = np.asarray(source_domains)
    target_weights = np.asarray(target_weights, dtype=np.float64)
    M = target_weights.shape[1]
    domains = tuple(range(M))
    dist = tuple(frechet_distance(source_features[source_domains == m], target_features) for m in domains)
    mean_w = tuple(float(v) for v in target_weights.mean(0))
    rho = spearman(dist, mean_w) if M >= 3 else None
    return DomainDistanceReport(domains, dist, mean_w, rho)


def analyze_prompt_weights(model, source, assignment, target, batch_size: int = 256) -> DomainDistanceReport:
    """Distance/weight report for a trained model with prompts and adapter.

    Source features are the prompt-free final class tokens of the training
    samples grouped by their frozen pseudo-domain; weights are the adapter's
    mean output over ``target``.
    """
    import torch

    from pldg.trainer import predict_dataset

    if getattr(model, "adapter", None) is None or getattr(model, "generator", None) is None:
        raise ConfigError("adapter not present: analysis needs a checkpoint trained with prompts and adapter")
    if assignment is None:
        raise ConfigError("checkpoint carries no pseudo-domain assignment")
    enc = model.encoder
    dtype = next(enc.parameters()).dtype

    def feats(ds):
        x = ds.chw()
        return np.concatenate([
            enc.extract_cls(torch.from_numpy(x[i : i + batch_size]).to(dtype), enc.config.depth).double().numpy()
            for i in range(0, len(ds), batch_size)
        ])

    _, weights = predict_dataset(model, target, batch_size)
    return domain_distance_report(feats(source), assignment.labels_for(source.sample_ids), feats(target), weights)


# --------------------------------------------------------------------------
# report files


def write_metrics_csv(reports: Sequence[MetricReport], path: str | Path, append: bool = False):
    path = Path(path)
    new = not (append and path.exists())
    with open(path, "a" if append else "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        if new:
            w.writerow(["dataset", "metric", "value", "n", "seed"])
        for r in reports:
            w.writerow([r.dataset, r.metric, f"{r.value:.6f}", r.n, r.seed])


def write_distance_csv(report: DomainDistanceReport, path: str | Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["domain", "frechet", "mean_weight"])
        for m, d, mw in zip(report.domains, report.frechet, report.mean_weight):
            w.writerow([m, f"{d:.6f}", f"{mw:.6f}"])


def plot_bias_sweep(table: dict[str, dict[float, Sequence[float]]], path: str | Path):
    """Line chart of mean OOD AUC (+- std over seeds) against bias level, one line per method."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 3.5))
    for method, by_rho in table.items():
        rhos = sorted(by_rho)
        means = [np.mean(by_rho[r]) for r in rhos]
        stds = [np.std(by_rho[r]) for r in rhos]
        ax.errorbar(rhos, means, yerr=stds, marker="o", capsize=3, label=method)
    ax.set_xlabel("bias level")
    ax.set_ylabel("OOD ROC-AUC")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_distance_weights(report: DomainDistanceReport, path: str | Path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (a1, a2) = plt.subplots(1, 2, figsize=(7, 3))
    labels = [str(m) for m in report.domains]
    a1.bar(labels, report.frechet, color="tab:gray")
    a1.set_title("Frechet distance to target")
    a2.bar(labels, report.mean_weight, color="tab:blue")
    a2.set_title("mean prompt weight")
    for a in (a1, a2):
        a.set_xlabel("pseudo-domain")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
