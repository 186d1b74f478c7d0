"""Datasets, an image-folder loader, and the synthetic trap-set generator.

A trap set plants simple artifacts (dark corners, ruler stripes, colour tints,
hair strokes) on top of a shape-defined class signal (filled blob vs ring).
In the train/val/test_id splits artifact presence co-occurs with the class at
a controllable strength ``rho``; in test_ood the co-occurrence is reversed.
"""

from __future__ import annotations

import csv
import logging
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from pldg.errors import ConfigError, ConsistencyError, DataError

logger = logging.getLogger(__name__)

ARTIFACTS = ("corner_patch", "stripe_ruler", "color_tint", "curve_hair")
SPLITS = ("train", "val", "test_id", "test_ood")


@dataclass(frozen=True)
class LabeledImage:
    pixels: np.ndarray  # H x W x 3 in [0, 1]
    class_label: int
    sample_id: str
    given_domain: int | None = None
    artifact_label: int | None = None


@dataclass
class ImageDataset:
    """Column-oriented image dataset; images are N x H x W x 3 float32."""

    images: np.ndarray
    labels: np.ndarray
    sample_ids: list[str]
    given_domain: np.ndarray | None = None
    artifact: np.ndarray | None = None
    name: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        n = len(self.labels)
        if self.images.ndim != 4 or self.images.shape[0] != n or self.images.shape[-1] != 3:
            raise DataError(f"images must be N x H x W x 3 with N={n}, got {self.images.shape}")
        if len(self.sample_ids) != n:
            raise DataError("sample_ids length does not match labels")
        if len(set(self.sample_ids)) != n:
            raise DataError("duplicate sample_ids")
        for attr in ("given_domain", "artifact"):
            col = getattr(self, attr)
            if col is not None:
                col = np.asarray(col, dtype=np.int64)
                if len(col) != n:
                    raise DataError(f"{attr} length does not match labels")
                setattr(self, attr, col)

    def __len__(self) -> int:
        return len(self.labels)

    def __getitem__(self, i: int) -> LabeledImage:
        return LabeledImage(
            pixels=self.images[i],
            class_label=int(self.labels[i]),
            sample_id=self.sample_ids[i],
            given_domain=None if self.given_domain is None else int(self.given_domain[i]),
            artifact_label=None if self.artifact is None else int(self.artifact[i]),
        )

    @property
    def image_size(self) -> int:
        return self.images.shape[1]

    def subset(self, idx, name: str | None = None) -> "ImageDataset":
        idx = np.asarray(idx, dtype=np.int64)
        return ImageDataset(
            images=self.images[idx],
            labels=self.labels[idx],
            sample_ids=[self.sample_ids[i] for i in idx],
            given_domain=None if self.given_domain is None else self.given_domain[idx],
            artifact=None if self.artifact is None else self.artifact[idx],
            name=self.name if name is None else name,
        )

    def chw(self) -> np.ndarray:
        """Images as N x 3 x H x W, the layout the encoder consumes."""
        return np.ascontiguousarray(self.images.transpose(0, 3, 1, 2))


# --------------------------------------------------------------------------
# trap-set generation


@dataclass(frozen=True)
class TrapSpec:
    rho: float = 1.0
    num_classes: int = 2
    artifacts: tuple[str, ...] = ("corner_patch",)
    image_size: int = 32
    n_train: int = 800
    n_val: int = 200
    n_test_id: int = 400
    n_test_ood: int = 400
    seed: int = 0
    # artifact pool for the OOD split; empty reuses `artifacts`
    ood_artifacts: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "artifacts", tuple(self.artifacts))
        object.__setattr__(self, "ood_artifacts", tuple(self.ood_artifacts))
        if not 0.0 <= float(self.rho) <= 1.0:
            raise ConfigError(f"rho must lie in [0, 1], got {self.rho}")
        if self.num_classes < 2:
            raise ConfigError("num_classes must be >= 2")
        if not self.artifacts:
            raise ConfigError("at least one artifact is required")
        for a in self.artifacts + self.ood_artifacts:
            if a not in ARTIFACTS:
                raise ConfigError(f"unknown artifact {a!r}; choose from {ARTIFACTS}")
        for name in ("n_train", "n_val", "n_test_id", "n_test_ood"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.image_size < 16:
            raise ConfigError("image_size must be >= 16")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["artifacts"] = list(self.artifacts)
        d["ood_artifacts"] = list(self.ood_artifacts)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrapSpec":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown TrapSpec keys: {sorted(unknown)}")
        return cls(**dict(d))


def artifact_probability(y: int, num_classes: int, rho: float, reversed_: bool = False) -> float:
    """P(artifact present | class y).

    Linear in the class index, centred on 1/2: class 0 gets (1-rho)/2 and the
    last class (1+rho)/2. ``reversed_`` swaps the class ordering.
    """
    pos = y / (num_classes - 1)
    if reversed_:
        pos = 1.0 - pos
    return (1.0 - rho) / 2.0 + rho * pos


def _cell_counts(n: int, spec: TrapSpec, reversed_: bool, split: str) -> list[tuple[int, int]]:
    """(n_clean, n_artifact) per class, by largest-remainder-free rounding."""
    per_class = [n // spec.num_classes + (1 if c < n % spec.num_classes else 0) for c in range(spec.num_classes)]
    cells = []
    for c, n_c in enumerate(per_class):
        if n_c == 0:
            raise ConfigError(f"split {split!r}: class {c} receives no samples (n={n})")
        p = artifact_probability(c, spec.num_classes, spec.rho, reversed_)
        n_art = int(np.floor(n_c * p + 0.5))
        if (p > 0 and n_art == 0) or (p < 1 and n_art == n_c):
            raise ConfigError(
                f"split {split!r}: rounding empties a cell (class {c}, n_c={n_c}, p={p:.3f}); "
                "increase the split size or change rho"
            )
        cells.append((n_c - n_art, n_art))
    return cells


def _smooth_noise(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    coarse = rng.normal(0.0, scale, size=(4, 4, 1))
    rep = -(-size // 4)
    return np.kron(coarse, np.ones((rep, rep, 1)))[:size, :size]


def _render_lesion(rng: np.random.Generator, size: int, cls: int, num_classes: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    base = np.array([0.86, 0.70, 0.60], dtype=np.float32)
    base = base + rng.normal(0.0, 0.02, size=3).astype(np.float32)
    img = np.broadcast_to(base, (size, size, 3)).copy()
    img += _smooth_noise(rng, size, 0.015).astype(np.float32)

    cy = size / 2 + rng.uniform(-size / 10, size / 10)
    cx = size / 2 + rng.uniform(-size / 10, size / 10)
    r = size * rng.uniform(0.24, 0.32)
    dist = np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2)
    outer = np.clip(r - dist + 0.5, 0.0, 1.0)
    # class c carves a hole of relative radius c / num_classes: class 0 is a
    # filled blob, the last class the thinnest ring
    hole_frac = 0.6 * cls / max(num_classes - 1, 1)
    inner = np.clip(hole_frac * r - dist + 0.5, 0.0, 1.0) if cls > 0 else 0.0
    mask = (outer - inner)[..., None]
    lesion_col = np.array([0.42, 0.26, 0.20], dtype=np.float32) + rng.normal(0, 0.03, 3).astype(np.float32)
    img = img * (1 - 0.85 * mask) + 0.85 * mask * lesion_col
    return img


def _bezier(p0, p1, p2, n=64):
    t = np.linspace(0.0, 1.0, n)[:, None]
    return (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t**2 * p2


def _apply_artifact(img: np.ndarray, kind: str, rng: np.random.Generator) -> np.ndarray:
    size = img.shape[0]
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    if kind == "corner_patch":
        corner = rng.integers(4)
        cy = 0.0 if corner in (0, 1) else size - 1.0
        cx = 0.0 if corner in (0, 2) else size - 1.0
        r = size * rng.uniform(0.42, 0.5)
        m = np.clip(r - np.sqrt((yy - cy) ** 2 + (xx - cx) ** 2), 0.0, 1.0)[..., None]
        img = img * (1 - m) + m * 0.04
    elif kind == "stripe_ruler":
        band = max(size // 6, 3)
        top = rng.integers(2) == 0
        rows = slice(0, band) if top else slice(size - band, size)
        period = 3
        offset = rng.integers(period)
        cols = (np.arange(size) + offset) % period == 0
        img[rows, :, :] = img[rows, :, :] * 0.5 + 0.5 * np.array([0.95, 0.95, 0.9], dtype=np.float32)
        sub = img[rows]
        sub[:, cols, :] = 0.08
        img[rows] = sub
    elif kind == "color_tint":
        shift = np.array([-0.18, 0.02, 0.22], dtype=np.float32) * rng.uniform(0.85, 1.15)
        img = img + shift
    elif kind == "curve_hair":
        # enough strokes that a linear probe on raw pixels still finds them
        for _ in range(rng.integers(5, 9)):
            pts = rng.uniform(0, size - 1, size=(3, 2))
            curve = _bezier(pts[0], pts[1], pts[2], n=4 * size)
            ij = np.clip(np.round(curve).astype(int), 0, size - 1)
            img[ij[:, 0], ij[:, 1], :] = 0.1
    else:  # pragma: no cover - validated by TrapSpec
        raise ConfigError(f"unknown artifact {kind!r}")
    return img


def _make_split(spec: TrapSpec, split: str, n: int, rng: np.random.Generator) -> ImageDataset:
    reversed_ = split == "test_ood"
    pool = spec.ood_artifacts if (reversed_ and spec.ood_artifacts) else spec.artifacts
    labels, arts = [], []
    for c, (n_clean, n_art) in enumerate(_cell_counts(n, spec, reversed_, split)):
        kinds = np.arange(n_art) % len(pool)
        rng.shuffle(kinds)
        labels += [c] * (n_clean + n_art)
        arts += [0] * n_clean + [ARTIFACTS.index(pool[k]) + 1 for k in kinds]
    order = rng.permutation(len(labels))
    labels = np.asarray(labels, dtype=np.int64)[order]
    arts = np.asarray(arts, dtype=np.int64)[order]

    images = np.empty((n, spec.image_size, spec.image_size, 3), dtype=np.float32)
    for i in range(n):
        img = _render_lesion(rng, spec.image_size, int(labels[i]), spec.num_classes)
        if arts[i] > 0:
            img = _apply_artifact(img, ARTIFACTS[arts[i] - 1], rng)
        img += rng.normal(0.0, 0.02, size=img.shape).astype(np.float32)
        images[i] = np.clip(img, 0.0, 1.0)
    ids = [f"{split}-{i:06d}" for i in range(n)]
    return ImageDataset(images, labels, ids, given_domain=arts.copy(), artifact=arts, name=split)


def generate_trap(spec: TrapSpec) -> dict[str, ImageDataset]:
    """Build train/val/test_id/test_ood splits; a pure function of ``spec``.

    ``artifact`` holds 0 for clean images and ``1 + ARTIFACTS.index(kind)``
    otherwise. ``given_domain`` mirrors it for runs that use real domain labels.
    """
    sizes = {"train": spec.n_train, "val": spec.n_val, "test_id": spec.n_test_id, "test_ood": spec.n_test_ood}
    # validate all splits before rendering anything
    for split, n in sizes.items():
        _cell_counts(n, spec, split == "test_ood", split)
    seeds = np.random.SeedSequence(spec.seed).spawn(len(SPLITS))
    return {
        split: _make_split(spec, split, sizes[split], np.random.default_rng(ss))
        for split, ss in zip(SPLITS, seeds)
    }


# --------------------------------------------------------------------------
# on-disk format


def save_trap(datasets: Mapping[str, ImageDataset], spec: TrapSpec, outdir: str | Path) -> Path:
    """Write PNGs, ``manifest.csv`` and ``trap_spec.yaml`` under ``outdir``."""
    from PIL import Image

    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    for split in SPLITS:
        ds = datasets[split]
        (outdir / split).mkdir(exist_ok=True)
        for i in range(len(ds)):
            rel = f"{split}/{ds.sample_ids[i]}.png"
            arr = np.round(ds.images[i] * 255).astype(np.uint8)
            Image.fromarray(arr, mode="RGB").save(outdir / rel, format="PNG", optimize=False)
            art = "" if ds.artifact is None else int(ds.artifact[i])
            rows.append((ds.sample_ids[i], rel, int(ds.labels[i]), art, split))
    with open(outdir / "manifest.csv", "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["sample_id", "path", "class", "artifact", "split"])
        w.writerows(rows)
    with open(outdir / "trap_spec.yaml", "w") as f:
        yaml.safe_dump(spec.to_dict(), f, sort_keys=True)
    return outdir


def load_image_folder(
    root: str | Path,
    split_manifest: str | Path | None = None,
    image_size: int | None = None,
    split: str | None = None,
    num_classes: int | None = None,
) -> ImageDataset:
    """Load images listed in a manifest CSV.

    Required columns are ``path`` and ``class``; ``given_domain``,
    ``sample_id``, ``artifact`` and ``split`` are used when present. Paths
    are relative to ``root``.
    """
    from PIL import Image, UnidentifiedImageError

    root = Path(root)
    manifest = Path(split_manifest) if split_manifest is not None else root / "manifest.csv"
    if not manifest.exists():
        raise DataError(f"manifest not found: {manifest}")
    with open(manifest, newline="") as f:
        reader = csv.DictReader(f)
        cols = reader.fieldnames or []
        if "path" not in cols or "class" not in cols:
            raise DataError(f"{manifest}: manifest needs 'path' and 'class' columns, got {cols}")
        rows = [r for r in reader if split is None or r.get("split") == split]

    images, labels, ids, domains, arts = [], [], [], [], []
    for r in rows:
        path = root / r["path"]
        if not path.exists():
            raise DataError(f"missing image file: {path}")
        try:
            with Image.open(path) as im:
                im = im.convert("RGB")
                if image_size is not None and im.size != (image_size, image_size):
                    im = im.resize((image_size, image_size), Image.BILINEAR)
                arr = np.asarray(im, dtype=np.float32) / 255.0
        except (UnidentifiedImageError, OSError) as e:
            raise DataError(f"cannot decode image file: {path} ({e})") from e
        try:
            y = int(r["class"])
        except ValueError as e:
            raise DataError(f"{path}: class {r['class']!r} is not an integer id") from e
        if y < 0 or (num_classes is not None and y >= num_classes):
            raise DataError(f"{path}: unknown class id {y}")
        images.append(arr)
        labels.append(y)
        ids.append(r.get("sample_id") or r["path"])
        if "given_domain" in cols and r.get("given_domain", "") != "":
            domains.append(int(r["given_domain"]))
        if "artifact" in cols and r.get("artifact", "") != "":
            arts.append(int(r["artifact"]))

    if not images:
        raise DataError(f"{manifest}: no rows" + (f" for split {split!r}" if split else ""))
    sizes = {a.shape for a in images}
    if len(sizes) > 1:
        raise DataError(f"images have mixed sizes {sorted(sizes)}; pass image_size to resize")
    return ImageDataset(
        images=np.stack(images),
        labels=np.asarray(labels),
        sample_ids=ids,
        given_domain=np.asarray(domains) if len(domains) == len(images) else None,
        artifact=np.asarray(arts) if len(arts) == len(images) else None,
        name=split or root.name,
    )


def load_trap(root: str | Path) -> dict[str, ImageDataset]:
    """Read a directory written by :func:`save_trap` back into splits."""
    root = Path(root)
    out = {}
    for split in SPLITS:
        ds = load_image_folder(root, root / "manifest.csv", split=split)
        if ds.artifact is not None:
            ds.given_domain = ds.artifact.copy()
        out[split] = ds
    return out


def split_by_domain(
    dataset: ImageDataset, domains: Mapping[str, int] | Sequence[int] | np.ndarray | None = None
) -> dict[int, ImageDataset]:
    """Partition ``dataset`` by domain id.

    ``domains`` is either a sample_id -> id mapping (a pseudo-domain
    assignment) or a per-row sequence; when omitted, ``given_domain`` is used.
    """
    if domains is None:
        if dataset.given_domain is None:
            raise ConsistencyError("dataset has no given_domain and no assignment was supplied")
        ids = dataset.given_domain
    elif isinstance(domains, Mapping):
        missing = [s for s in dataset.sample_ids if s not in domains]
        if missing:
            raise ConsistencyError(f"{len(missing)} samples unassigned, e.g. {missing[0]!r}")
        ids = np.array([domains[s] for s in dataset.sample_ids], dtype=np.int64)
    else:
        ids = np.asarray(domains, dtype=np.int64)
        if len(ids) != len(dataset):
            raise ConsistencyError("domain id sequence does not align with dataset")
    return {int(d): dataset.subset(np.flatnonzero(ids == d)) for d in np.unique(ids)}


@dataclass
class DatasetBundle:
    """Named splits handed to the trainer."""

    train: ImageDataset
    val: ImageDataset
    tests: dict[str, ImageDataset] = field(default_factory=dict)

    @classmethod
    def from_trap(cls, splits: Mapping[str, ImageDataset]) -> "DatasetBundle":
        return cls(splits["train"], splits["val"], {k: splits[k] for k in ("test_id", "test_ood") if k in splits})
