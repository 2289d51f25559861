"""Deterministic synthetic benchmark: imbalanced Gaussian-mixture inliers,
corruption-style and semantic OOD variants, and unseen-class splits."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass, field

import numpy as np

OOD_KINDS = ("mask-patch", "mask-patch-heavy", "far", "near", "shift")

OOD_DEFAULTS = {
    "mask-patch": {"fraction": 0.3},
    "mask-patch-heavy": {"fraction": 0.7},
    "far": {"distance": 0.0, "noise": 1.0},
    "near": {"inflation": 0.5},
    "shift": {"magnitude": 5.0},
}


@dataclass
class LabeledSet:
    x: np.ndarray
    labels: np.ndarray | None
    class_names: list[str] = field(default_factory=list)
    tag: str = ""

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2 or self.x.shape[0] < 1:
            raise ValueError(f"{self.tag or 'dataset'}: x must be a nonempty 2-d array, got {self.x.shape}")
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.int64)
            if self.labels.shape != (self.x.shape[0],):
                raise ValueError(f"{self.tag}: {len(self.labels)} labels for {self.x.shape[0]} rows")
            if self.class_names and self.labels.max() >= len(self.class_names):
                raise ValueError(f"{self.tag}: label exceeds class count {len(self.class_names)}")

    def __len__(self):
        return self.x.shape[0]

    @property
    def num_classes(self):
        return len(self.class_names)

    def subset(self, idx, tag=None):
        idx = np.asarray(idx, dtype=np.int64)
        labels = None if self.labels is None else self.labels[idx]
        return LabeledSet(self.x[idx], labels, list(self.class_names), tag or self.tag)

    def checksum(self):
        h = hashlib.sha256(np.ascontiguousarray(self.x).tobytes())
        if self.labels is not None:
            h.update(self.labels.tobytes())
        return h.hexdigest()


@dataclass
class OodSpec:
    kind: str
    params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in OOD_KINDS:
            raise ValueError(f"unknown OOD kind {self.kind!r}; expected one of {OOD_KINDS}")
        self.params = {**OOD_DEFAULTS[self.kind], **self.params}
        if "fraction" in self.params and not 0.0 < self.params["fraction"] <= 1.0:
            raise ValueError("mask fraction must lie in (0, 1]")


def class_sizes(k, n, imbalance_ratio):
    """Geometric class-size profile, largest first, summing to ``n``."""
    if n < k:
        raise ValueError(f"need at least one sample per class: n={n} < K={k}")
    if imbalance_ratio < 1:
        raise ValueError("imbalance ratio must be >= 1")
    profile = imbalance_ratio ** (-np.arange(k) / max(k - 1, 1))
    raw = profile / profile.sum() * n
    sizes = np.maximum(np.floor(raw).astype(int), 1)
    # hand leftovers to the largest fractional parts
    leftover = n - sizes.sum()
    order = np.argsort(-(raw - np.floor(raw)), kind="stable")
    for i in range(abs(leftover)):
        sizes[order[i % k]] += 1 if leftover > 0 else -1
    return sizes


def _mixture(k, d, rng, separation, spread_range):
    if d < 2:
        raise ValueError("feature dimension must be at least 2")
    # simplex vertices: scaled orthonormal directions in a random rotation
    q, _ = np.linalg.qr(rng.normal(size=(d, d)))
    basis = q[:, :k] if k <= d else rng.normal(size=(d, k)) / np.sqrt(d)
    means = separation * basis.T
    scales = np.linspace(spread_range[0], spread_range[1], k)
    rng.shuffle(scales)
    axes = []
    for _ in range(k):
        rot, _ = np.linalg.qr(rng.normal(size=(d, d)))
        axes.append(rot * rng.uniform(0.5, 1.5, size=d))
    return means, scales, axes


def gen_inliers(k=8, d=16, n=8000, imbalance_ratio=20.0, seed=0, separation=3.0,
                spread_range=(0.5, 1.5)):
    """Anisotropic Gaussian clusters at scaled simplex vertices.

    Per-class spread factors span a 3x range (``spread_range``); class sizes
    decay geometrically so the largest/smallest ratio is ``imbalance_ratio``.
    Rows are shuffled.
    """
    if k < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    sizes = class_sizes(k, n, imbalance_ratio)
    means, scales, axes = _mixture(k, d, rng, separation, spread_range)
    xs, ys = [], []
    for c in range(k):
        z = rng.normal(size=(sizes[c], d))
        xs.append(means[c] + scales[c] * z @ axes[c].T)
        ys.append(np.full(sizes[c], c))
    x, y = np.concatenate(xs), np.concatenate(ys)
    perm = rng.permutation(n)
    return LabeledSet(x[perm], y[perm], [f"class{c}" for c in range(k)], "inliers")


def make_ood(base: LabeledSet, spec: OodSpec, tag=None):
    """Derive an unlabeled OOD set from ``base`` according to ``spec``."""
    rng = np.random.default_rng(spec.seed)
    x = base.x.copy()
    n, d = x.shape
    p = spec.params
    if spec.kind in ("mask-patch", "mask-patch-heavy"):
        width = int(round(p["fraction"] * d))
        width = min(max(width, 1), d)
        starts = rng.integers(0, d - width + 1, size=n)
        cols = starts[:, None] + np.arange(width)
        x[np.arange(n)[:, None], cols] = 0.0
    elif spec.kind == "far":
        # structureless isotropic Gaussian; `distance` offsets its mean by that
        # many overall spreads, `noise` scales the inlier per-coordinate std
        centroid = base.x.mean(axis=0)
        spread = np.sqrt(base.x.var(axis=0).sum())
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        center = centroid + p["distance"] * spread * direction
        std = np.sqrt(base.x.var(axis=0).mean())
        x = center + p["noise"] * std * rng.normal(size=(n, d))
    elif spec.kind == "near":
        if base.labels is None:
            raise ValueError("near OOD needs a labeled base set to locate clusters")
        for c in np.unique(base.labels):
            rows = base.labels == c
            mu = base.x[rows].mean(axis=0)
            x[rows] = mu + (1.0 + p["inflation"]) * (base.x[rows] - mu)
    elif spec.kind == "shift":
        direction = rng.normal(size=d)
        direction /= np.linalg.norm(direction)
        x = x + p["magnitude"] * direction
    return LabeledSet(x, None, list(base.class_names), tag or spec.kind)


def split_unseen_classes(data: LabeledSet, held_out, seed=0):
    """Drop ``held_out`` classes from training data and relabel the rest compactly.

    Returns ``(train, novel)``; ``novel`` keeps its original labels.
    """
    held = sorted(set(int(c) for c in held_out))
    k = data.num_classes
    if not held:
        raise ValueError("held-out class set is empty")
    if any(not 0 <= c < k for c in held):
        raise ValueError(f"held-out classes {held} not in [0, {k})")
    if len(held) >= k:
        raise ValueError("cannot hold out every class")
    keep = [c for c in range(k) if c not in held]
    remap = np.full(k, -1)
    remap[keep] = np.arange(len(keep))
    mask = np.isin(data.labels, held)
    train = LabeledSet(data.x[~mask], remap[data.labels[~mask]],
                       [data.class_names[c] for c in keep], data.tag + "-seen")
    novel = LabeledSet(data.x[mask], data.labels[mask], list(data.class_names), data.tag + "-novel")
    return train, novel


def stratified_split(data: LabeledSet, val_fraction=0.1, seed=0):
    """Per-class proportional train/validation split.

    Validation count per class is ``round-half-up(fraction * size)``, at least
    one, and never the whole class.
    """
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in np.unique(data.labels):
        rows = np.flatnonzero(data.labels == c)
        if rows.size < 2:
            raise ValueError(f"class {c} has {rows.size} sample(s); stratified split needs at least 2")
        n_val = int(np.floor(val_fraction * rows.size + 0.5))
        n_val = min(max(n_val, 1), rows.size - 1)
        rows = rng.permutation(rows)
        val_idx.append(rows[:n_val])
        train_idx.append(rows[n_val:])
    tr, va = np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(val_idx))
    return data.subset(tr, data.tag + "-train"), data.subset(va, data.tag + "-val")


def augment(x, noise_scale=0.0, seed=0, flip_prob=0.0):
    """Feature-space augmentation: random coordinate sign flips, then Gaussian jitter."""
    if noise_scale < 0:
        raise ValueError("noise_scale must be nonnegative")
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng(seed)
    out = x.copy()
    if flip_prob > 0:
        out = np.where(rng.random(x.shape) < flip_prob, -out, out)
    if noise_scale > 0:
        out = out + noise_scale * rng.normal(size=x.shape)
    return out


def save_csv(data: LabeledSet, path):
    d = data.x.shape[1]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        header = [f"f{i}" for i in range(d)] + (["label"] if data.labels is not None else [])
        writer.writerow(header)
        for i, row in enumerate(data.x):
            cells = [repr(float(v)) for v in row]
            if data.labels is not None:
                cells.append(str(int(data.labels[i])))
            writer.writerow(cells)


def load_csv(path, tag=None, class_names=None):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise ValueError(f"{path}: empty CSV")
    header, body = rows[0], rows[1:]
    has_label = header[-1] == "label"
    arr = np.array([[float(v) for v in r[: len(header) - has_label]] for r in body])
    labels = np.array([int(r[-1]) for r in body]) if has_label else None
    if class_names is None and labels is not None:
        class_names = [f"class{c}" for c in range(int(labels.max()) + 1)]
    return LabeledSet(arr, labels, class_names or [], tag or str(path))


def nearest_mean_predict(train: LabeledSet, x):
    """Nearest class-centroid classifier; used as a learnability check."""
    classes = np.unique(train.labels)
    cents = np.stack([train.x[train.labels == c].mean(axis=0) for c in classes])
    dist = ((x[:, None, :] - cents[None]) ** 2).sum(-1)
    return classes[dist.argmin(axis=1)]
