"""Pseudo-domain discovery by one-time k-means on shallow class tokens.

Also hosts the NMI diagnostics used to check what a clustering captured
(style vs class) and how stable it is across epochs.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType

import numpy as np
import torch

from pldg.backbone import ViTEncoder
from pldg.data import ImageDataset
from pldg.errors import ConfigError, ConsistencyError, DataError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class StyleFeatureMatrix:
    features: np.ndarray  # n x d
    sample_ids: tuple[str, ...]
    layer: int
    epoch: int


@dataclass(frozen=True)
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    sse: float
    n_iter: int
    sse_trace: tuple[float, ...] = ()
    sample_ids: tuple[str, ...] | None = None
    layer: int | None = None
    epoch: int | None = None


@dataclass(frozen=True)
class PseudoDomainAssignment:
    assignment: Mapping[str, int]
    centroids: np.ndarray
    M: int
    layer: int | None
    epoch: int | None

    def labels_for(self, sample_ids: Sequence[str]) -> np.ndarray:
        try:
            return np.array([self.assignment[s] for s in sample_ids], dtype=np.int64)
        except KeyError as e:
            raise ConsistencyError(f"sample {e.args[0]!r} has no pseudo-domain") from None

    def sizes(self) -> dict[int, int]:
        ids, counts = np.unique(list(self.assignment.values()), return_counts=True)
        return {int(i): int(c) for i, c in zip(ids, counts)}

    def to_csv(self, path: str | Path):
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["sample_id", "pseudo_domain"])
            for sid, m in self.assignment.items():
                w.writerow([sid, m])

    @classmethod
    def from_csv(cls, path: str | Path, M: int | None = None) -> "PseudoDomainAssignment":
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        assignment = {r["sample_id"]: int(r["pseudo_domain"]) for r in rows}
        M = (max(assignment.values()) + 1) if M is None else M
        return cls(MappingProxyType(assignment), np.zeros((M, 0)), M, None, None)


# --------------------------------------------------------------------------
# k-means


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    d = (x * x).sum(1)[:, None] - 2.0 * x @ c.T + (c * c).sum(1)[None, :]
    return np.maximum(d, 0.0)


def _kmeanspp(x: np.ndarray, M: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    closest = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, M):
        total = closest.sum()
        if total <= 0:
            idx = rng.integers(n)
        else:
            idx = rng.choice(n, p=closest / total)
        centers.append(x[idx])
        closest = np.minimum(closest, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def _repair_empty(x: np.ndarray, labels: np.ndarray, centroids: np.ndarray) -> bool:
    """Move each empty centroid onto the point farthest from its own centroid."""
    repaired = False
    for m in range(len(centroids)):
        if not (labels == m).any():
            d = ((x - centroids[labels]) ** 2).sum(1)
            # never strip a cluster of its last member
            counts = np.bincount(labels, minlength=len(centroids))
            d[counts[labels] <= 1] = -1.0
            far = int(np.argmax(d))
            centroids[m] = x[far]
            labels[far] = m
            repaired = True
    return repaired


def _lloyd(x, centroids, max_iter, tol):
    trace = []
    labels = np.argmin(_sq_dists(x, centroids), axis=1)
    _repair_empty(x, labels, centroids)
    it = 0
    for it in range(1, max_iter + 1):
        new = np.array([x[labels == m].mean(0) for m in range(len(centroids))])
        shift = np.sqrt(((new - centroids) ** 2).sum(1)).max()
        centroids = new
        labels = np.argmin(_sq_dists(x, centroids), axis=1)
        if _repair_empty(x, labels, centroids):
            centroids = np.array([x[labels == m].mean(0) for m in range(len(centroids))])
        trace.append(float(((x - centroids[labels]) ** 2).sum()))
        if shift < tol:
            break
    return labels, centroids, trace, it


def kmeans(
    features: np.ndarray,
    M: int,
    seed: int = 0,
    max_iter: int = 300,
    tol: float = 1e-6,
    n_init: int = 10,
) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding, best of ``n_init`` restarts by SSE."""
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2:
        raise ConfigError(f"features must be n x d, got shape {x.shape}")
    n = len(x)
    if M < 1:
        raise ConfigError("M must be >= 1")
    if M > n:
        raise ConfigError(f"cannot form {M} clusters from {n} samples")
    if not np.isfinite(x).all():
        raise DataError("features contain non-finite values")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(max(1, n_init)):
        init = _kmeanspp(x, M, rng)
        labels, centroids, trace, it = _lloyd(x, init.copy(), max_iter, tol)
        sse = float(((x - centroids[labels]) ** 2).sum())
        if best is None or sse < best.sse:
            best = KMeansResult(labels.astype(np.int64), centroids, sse, it, tuple(trace))
    return best


def l2_normalize(x: np.ndarray) -> np.ndarray:
    norm = np.linalg.norm(x, axis=1, keepdims=True)
    return x / np.maximum(norm, 1e-12)


def cluster_style_features(
    style: StyleFeatureMatrix,
    M: int,
    seed: int = 0,
    normalize: bool = True,
    per_class: np.ndarray | None = None,
    **kmeans_kw,
) -> KMeansResult:
    """Cluster a feature matrix into M pseudo-domains.

    ``per_class`` (class labels aligned with ``style``) switches to clustering
    within each class; domain ids are then the within-class cluster indices.
    """
    x = l2_normalize(style.features) if normalize else np.asarray(style.features, dtype=np.float64)
    if per_class is None:
        res = kmeans(x, M, seed, **kmeans_kw)
        labels, centroids, n_iter = res.labels, res.centroids, res.n_iter
    else:
        per_class = np.asarray(per_class)
        labels = np.empty(len(x), dtype=np.int64)
        for c in np.unique(per_class):
            idx = np.flatnonzero(per_class == c)
            labels[idx] = kmeans(x[idx], M, seed, **kmeans_kw).labels
        centroids = np.array([x[labels == m].mean(0) for m in range(M)])
        n_iter = 0
    sse = float(((x - centroids[labels]) ** 2).sum())
    return KMeansResult(
        labels, centroids, sse, n_iter,
        sample_ids=style.sample_ids, layer=style.layer, epoch=style.epoch,
    )


def assign_pseudo_domains(
    dataset: ImageDataset,
    result: KMeansResult,
    existing: PseudoDomainAssignment | None = None,
) -> PseudoDomainAssignment:
    """Freeze a clustering result into a sample_id -> pseudo-domain map."""
    if existing is not None:
        raise ConsistencyError("assignment already frozen")
    if result.sample_ids is not None and tuple(result.sample_ids) != tuple(dataset.sample_ids):
        raise ConsistencyError("clustering features are misaligned with the dataset sample_ids")
    if len(result.labels) != len(dataset):
        raise ConsistencyError(f"{len(result.labels)} cluster labels for {len(dataset)} samples")
    M = len(result.centroids)
    mapping = {sid: int(m) for sid, m in zip(dataset.sample_ids, result.labels)}
    out = PseudoDomainAssignment(MappingProxyType(mapping), result.centroids.copy(), M, result.layer, result.epoch)
    empty = set(range(M)) - set(out.sizes())
    if empty:
        raise ConsistencyError(f"pseudo-domains {sorted(empty)} are empty")
    return out


# --------------------------------------------------------------------------
# feature collection


@torch.no_grad()
def collect_style_features(
    model: ViTEncoder,
    dataset: ImageDataset,
    layer: int = 1,
    batch_size: int = 256,
    epoch: int = 0,
) -> StyleFeatureMatrix:
    """Class tokens after block ``layer`` for every sample, in eval mode."""
    return collect_layers(model, dataset, [layer], batch_size, epoch)[layer]


@torch.no_grad()
def collect_layers(
    model: ViTEncoder,
    dataset: ImageDataset,
    layers: Sequence[int],
    batch_size: int = 256,
    epoch: int = 0,
) -> dict[int, StyleFeatureMatrix]:
    if len(dataset) == 0:
        raise ConfigError("cannot collect features from an empty dataset")
    images = dataset.chw()
    dtype = next(model.parameters()).dtype
    chunks: dict[int, list[np.ndarray]] = {layer: [] for layer in layers}
    for start in range(0, len(dataset), batch_size):
        x = torch.from_numpy(images[start : start + batch_size]).to(dtype)
        out = model.extract_layers(x, layers)
        for layer in layers:
            chunks[layer].append(out[layer].double().numpy())
    ids = tuple(dataset.sample_ids)
    return {layer: StyleFeatureMatrix(np.concatenate(chunks[layer]), ids, layer, epoch) for layer in layers}


# --------------------------------------------------------------------------
# NMI


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def nmi(labels_a, labels_b) -> float:
    """I(A;B) / sqrt(H(A) H(B)) with natural logs.

    0 when exactly one labeling is constant, 1 when both are.
    """
    a = np.asarray(labels_a)
    b = np.asarray(labels_b)
    if a.shape != b.shape or a.ndim != 1:
        raise ConfigError(f"labelings must be 1-D of equal length, got {a.shape} and {b.shape}")
    if len(a) == 0:
        raise ConfigError("labelings must be non-empty")
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    table = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(table, (ai, bi), 1)
    ha, hb = _entropy(table.sum(1)), _entropy(table.sum(0))
    if ha == 0 and hb == 0:
        return 1.0
    if ha == 0 or hb == 0:
        return 0.0
    n = len(a)
    pab = table / n
    pa = table.sum(1, keepdims=True) / n
    pb = table.sum(0, keepdims=True) / n
    nz = pab > 0
    mi = float((pab[nz] * np.log(pab[nz] / (pa @ pb)[nz])).sum())
    return float(np.clip(mi / np.sqrt(ha * hb), 0.0, 1.0))


# --------------------------------------------------------------------------
# diagnostics


DIAGNOSTIC_COLUMNS = ("epoch", "layer", "nmi_class", "nmi_given_domain", "nmi_prev")


@dataclass
class ClusteringDiagnostics:
    """NMI curves per layer per epoch; caches the previous assignment per layer."""

    layers: Sequence[int]
    M: int
    seed: int = 0
    normalize: bool = True
    rows: list[dict] = field(default_factory=list)
    previous: dict[int, np.ndarray] = field(default_factory=dict)
    n_init: int = 10

    def update(self, model: ViTEncoder, dataset: ImageDataset, epoch: int) -> list[dict]:
        feats = collect_layers(model, dataset, list(self.layers), epoch=epoch)
        out = []
        for layer in self.layers:
            res = cluster_style_features(feats[layer], self.M, self.seed, self.normalize, n_init=self.n_init)
            prev = self.previous.get(layer)
            row = {
                "epoch": epoch,
                "layer": layer,
                "nmi_class": nmi(res.labels, dataset.labels),
                "nmi_given_domain": None if dataset.given_domain is None else nmi(res.labels, dataset.given_domain),
                "nmi_prev": None if prev is None else nmi(res.labels, prev),
            }
            if dataset.artifact is not None:
                row["nmi_artifact"] = nmi(res.labels, dataset.artifact)
            self.previous[layer] = res.labels
            out.append(row)
        self.rows.extend(out)
        return out

    def to_csv(self, path: str | Path):
        write_diagnostics_csv(self.rows, path)


def clustering_diagnostics(
    model: ViTEncoder,
    dataset: ImageDataset,
    layers: Sequence[int],
    epochs_log: ClusteringDiagnostics | None = None,
    epoch: int = 0,
    M: int = 4,
    seed: int = 0,
) -> ClusteringDiagnostics:
    """Append one epoch of NMI rows to ``epochs_log`` (created if missing)."""
    log = epochs_log if epochs_log is not None else ClusteringDiagnostics(layers, M, seed)
    log.update(model, dataset, epoch)
    return log


def write_diagnostics_csv(rows: Sequence[Mapping], path: str | Path):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(DIAGNOSTIC_COLUMNS)
        for r in rows:
            w.writerow(["" if r.get(k) is None else (f"{r[k]:.6f}" if isinstance(r[k], float) else r[k]) for k in DIAGNOSTIC_COLUMNS])


def export_features(
    path: str | Path,
    features: np.ndarray,
    sample_ids: Sequence[str],
    pseudo_domain: Sequence[int],
    classes: Sequence[int],
):
    """CSV ``sample_id,f_0..f_{d-1},pseudo_domain,class`` for external projection plots."""
    features = np.asarray(features)
    d = features.shape[1]
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", *[f"f_{j}" for j in range(d)], "pseudo_domain", "class"])
        for sid, row, m, c in zip(sample_ids, features, pseudo_domain, classes):
            w.writerow([sid, *[f"{v:.7g}" for v in row], int(m), int(c)])
