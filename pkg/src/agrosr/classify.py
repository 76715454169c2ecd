"""Patch-feature classifiers (multinomial logistic, k-NN) and their evaluation."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import _kernels
from .errors import (
    DegenerateLabelsError,
    DivergenceError,
    EmptyDatasetError,
    InvalidArgumentError,
    MissingBandError,
)
from .indices import INDEX_BANDS, index_grid
from .labels import UNLABELED, LabelRaster
from .raster import BandStack

CLASSIFIER_KINDS = ("logistic_multinomial", "knn")


@dataclass(frozen=True)
class PatchFeatureSpec:
    patch_size: int = 3
    bands: tuple[str, ...] = ("blue", "green", "red", "nir")
    derived_indices: tuple[str, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "bands", tuple(self.bands))
        object.__setattr__(self, "derived_indices", tuple(i.upper() for i in self.derived_indices))
        if self.patch_size < 1 or self.patch_size % 2 == 0:
            raise InvalidArgumentError(f"patch_size must be odd and positive, got {self.patch_size}")
        bad = [i for i in self.derived_indices if i not in INDEX_BANDS]
        if bad:
            raise InvalidArgumentError(f"unknown indices {bad}")
        if self.dim == 0:
            raise InvalidArgumentError("feature spec selects no channels")

    @property
    def n_channels(self) -> int:
        return len(self.bands) + len(self.derived_indices)

    @property
    def dim(self) -> int:
        return self.patch_size ** 2 * self.n_channels

    def required_bands(self) -> list[str]:
        need = list(self.bands)
        for idx in self.derived_indices:
            need += [b for b in INDEX_BANDS[idx] if b not in need]
        return need

    def channel_grid(self, stack: BandStack) -> np.ndarray:
        """(channels, h, w) float64: listed bands, then derived indices."""
        for name in self.required_bands():
            if name not in stack.band_names:
                raise MissingBandError(name)
        chans = [stack.band(b).astype(np.float64) for b in self.bands]
        chans += [index_grid(stack, idx) for idx in self.derived_indices]
        return np.stack(chans)

    def to_dict(self) -> dict:
        return {"patch_size": self.patch_size, "bands": list(self.bands),
                "derived_indices": list(self.derived_indices)}

    @classmethod
    def from_dict(cls, d: dict) -> "PatchFeatureSpec":
        return cls(d["patch_size"], tuple(d["bands"]), tuple(d.get("derived_indices", ())))


@dataclass
class LabeledDataset:
    spec: PatchFeatureSpec
    x: np.ndarray  # (n, D)
    y: np.ndarray  # (n,) class ids
    centers: np.ndarray  # (n, 2) row, col
    classes: tuple[tuple[int, str], ...]

    def __len__(self):
        return self.x.shape[0]

    def subset(self, idx) -> "LabeledDataset":
        return LabeledDataset(self.spec, self.x[idx], self.y[idx], self.centers[idx], self.classes)


@dataclass(frozen=True)
class SpatialSplit:
    """Block holdout in fractional field coordinates.

    A cell belongs to the test block when its center (x+0.5)/w, (y+0.5)/h
    falls inside ``test_block`` = (x0, y0, x1, y1). Because the block is
    fractional, the same split applies at every resolution.
    """

    test_block: tuple[float, float, float, float] = (0.5, 0.5, 1.0, 1.0)

    def __post_init__(self):
        x0, y0, x1, y1 = (float(v) for v in self.test_block)
        object.__setattr__(self, "test_block", (x0, y0, x1, y1))
        if not (0 <= x0 < x1 <= 1 and 0 <= y0 < y1 <= 1):
            raise InvalidArgumentError(f"test_block must lie in [0,1] with x0<x1, y0<y1, got {self.test_block}")

    @classmethod
    def quadrant(cls, q: int) -> "SpatialSplit":
        """Quadrants numbered 0 top-left, 1 top-right, 2 bottom-left, 3 bottom-right."""
        if q not in (0, 1, 2, 3):
            raise InvalidArgumentError("quadrant must be 0..3")
        x0 = 0.5 * (q % 2)
        y0 = 0.5 * (q // 2)
        return cls((x0, y0, x0 + 0.5, y0 + 0.5))

    def test_mask(self, height: int, width: int) -> np.ndarray:
        x0, y0, x1, y1 = self.test_block
        fy = (np.arange(height) + 0.5) / height
        fx = (np.arange(width) + 0.5) / width
        my = (fy >= y0) & (fy < y1)
        mx = (fx >= x0) & (fx < x1)
        return my[:, None] & mx[None, :]

    def train_mask(self, height: int, width: int) -> np.ndarray:
        return ~self.test_mask(height, width)

    def to_dict(self) -> dict:
        return {"test_block": list(self.test_block)}

    @classmethod
    def from_dict(cls, d: dict) -> "SpatialSplit":
        if "quadrant" in d:
            return cls.quadrant(int(d["quadrant"]))
        return cls(tuple(d["test_block"]))


def grid_centers(height: int, width: int, patch_size: int, stride: int = 1) -> np.ndarray:
    """Patch centers (row, col) from ``half`` to ``n - 1 - half`` in steps of ``stride``."""
    half = patch_size // 2
    ys = np.arange(half, height - half, stride)
    xs = np.arange(half, width - half, stride)
    yy, xx = np.meshgrid(ys, xs, indexing="ij")
    return np.stack([yy.ravel(), xx.ravel()], axis=1)


def patch_features(stack: BandStack, spec: PatchFeatureSpec, centers: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Features at the given centers and a mask of which ones are usable.

    A center is usable when its whole patch lies inside the raster and is
    NaN-free. Rows for unusable centers are NaN.
    """
    grid = spec.channel_grid(stack)
    p = spec.patch_size
    half = p // 2
    h, w = grid.shape[1:]
    centers = np.asarray(centers, dtype=np.int64).reshape(-1, 2)
    cy, cx = centers[:, 0], centers[:, 1]
    inside = (cy >= half) & (cy < h - half) & (cx >= half) & (cx < w - half)
    feats = np.full((centers.shape[0], spec.dim), np.nan)
    if inside.any() and p <= h and p <= w:
        win = _kernels.patch_windows(grid, p)[cy[inside] - half, cx[inside] - half]
        feats[inside] = win.reshape(win.shape[0], -1)
    valid = inside & ~np.isnan(feats).any(axis=1)
    return feats, valid


def extract_labeled_patches(
    stack: BandStack,
    labels: LabelRaster,
    spec: PatchFeatureSpec,
    stride: int = 1,
    mask: np.ndarray | None = None,
) -> LabeledDataset:
    """One feature vector per labeled, NaN-free patch on the stride grid.

    Centers run from ``half`` to ``h - 1 - half`` in steps of ``stride``.
    ``mask`` (same dims) further restricts which centers are used.
    Features are flattened channel-major, then row-major.
    """
    if stride < 1:
        raise InvalidArgumentError("stride must be positive")
    if labels.data.shape != (stack.height_px, stack.width_px):
        raise InvalidArgumentError(
            f"label dims {labels.data.shape} do not match stack {(stack.height_px, stack.width_px)}"
        )
    h, w = labels.data.shape
    if spec.patch_size > h or spec.patch_size > w:
        raise EmptyDatasetError(f"patch size {spec.patch_size} exceeds raster {w}x{h}")
    centers = grid_centers(h, w, spec.patch_size, stride)
    ok = labels.data[centers[:, 0], centers[:, 1]] != UNLABELED
    if mask is not None:
        ok &= np.asarray(mask, dtype=bool)[centers[:, 0], centers[:, 1]]
    centers = centers[ok]
    feats, valid = patch_features(stack, spec, centers)
    if not valid.any():
        raise EmptyDatasetError("no labeled NaN-free patches")
    centers = centers[valid]
    return LabeledDataset(
        spec,
        np.ascontiguousarray(feats[valid]),
        labels.data[centers[:, 0], centers[:, 1]].astype(np.int32),
        centers,
        labels.classes,
    )


@dataclass
class Classifier:
    kind: str
    classes: tuple[int, ...]  # ascending class ids; index k <-> classes[k]
    spec: PatchFeatureSpec
    mean: np.ndarray
    scale: np.ndarray
    weights: np.ndarray | None = None  # logistic (D, K)
    bias: np.ndarray | None = None
    train_x: np.ndarray | None = None  # knn, standardized
    train_y: np.ndarray | None = None  # knn, class indices
    k: int = 1
    meta: dict = field(default_factory=dict)

    def standardize(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.scale

    def predict_index(self, x: np.ndarray) -> np.ndarray:
        z = self.standardize(x)
        if self.kind == "logistic_multinomial":
            # argmax returns the first maximum, i.e. the lowest class id
            return np.argmax(z @ self.weights + self.bias, axis=1).astype(np.int32)
        return _kernels.knn_predict(self.train_x, self.train_y, z, self.k, len(self.classes))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(self.classes, dtype=np.int32)[self.predict_index(x)]

    def predict_cells(self, stack: BandStack, centers: np.ndarray) -> np.ndarray:
        """Class id per center, ``UNLABELED`` where no usable patch exists."""
        feats, valid = patch_features(stack, self.spec, centers)
        out = np.full(feats.shape[0], UNLABELED, dtype=np.int32)
        if valid.any():
            out[valid] = self.predict(feats[valid])
        return out


def _class_index(y: np.ndarray, classes: tuple[int, ...]) -> np.ndarray:
    lut = {c: i for i, c in enumerate(classes)}
    return np.array([lut[int(v)] for v in y], dtype=np.int32)


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def train_classifier(dataset: LabeledDataset, kind: str = "logistic_multinomial", hyperparams: dict | None = None,
                     seed: int = 0) -> Classifier:
    """Fit a classifier on a (training) dataset.

    logistic_multinomial hyperparams: epochs, learning_rate, l2, batch_size.
    knn hyperparams: k.
    """
    hp = dict(hyperparams or {})
    if kind not in CLASSIFIER_KINDS:
        raise InvalidArgumentError(f"unknown classifier kind {kind!r}; choose from {CLASSIFIER_KINDS}")
    if len(dataset) == 0:
        raise EmptyDatasetError("empty training set")
    present = tuple(sorted(set(int(v) for v in dataset.y)))
    if len(present) < 2:
        raise DegenerateLabelsError(f"training data has a single class {present}")
    classes = tuple(sorted(c for c, _ in dataset.classes)) or present
    x = dataset.x.astype(np.float64)
    mean = x.mean(axis=0)
    scale = x.std(axis=0)
    scale = np.where(scale > 0, scale, 1.0)
    yi = _class_index(dataset.y, classes)
    clf = Classifier(kind, classes, dataset.spec, mean, scale)
    z = clf.standardize(x)

    if kind == "knn":
        k = int(hp.get("k", 5))
        cap = int(hp.get("max_exemplars", 0))
        if k < 1:
            raise InvalidArgumentError("k must be positive")
        keep = np.arange(len(yi))
        if 0 < cap < keep.size:
            keep = np.sort(np.random.default_rng(seed).choice(keep.size, cap, replace=False))
        # stable sort by class so equal-distance neighbours resolve to the lowest id
        order = keep[np.argsort(yi[keep], kind="stable")]
        clf.train_x, clf.train_y, clf.k = z[order], yi[order], k
        clf.meta = {"seed": seed, "k": k, "n_exemplars": int(order.size)}
    else:
        epochs = int(hp.get("epochs", 30))
        lr = float(hp.get("learning_rate", 0.1))
        l2 = float(hp.get("l2", 1e-4))
        bs = int(hp.get("batch_size", 64))
        rng = np.random.default_rng(seed)
        n, d = z.shape
        kk = len(classes)
        w = np.zeros((d, kk))
        b = np.zeros(kk)
        onehot = np.eye(kk)[yi]
        for epoch in range(1, epochs + 1):
            perm = rng.permutation(n)
            total = 0.0
            for start in range(0, n, bs):
                bi = perm[start: start + bs]
                prob = _softmax(z[bi] @ w + b)
                loss = -np.mean(np.log(np.clip(prob[np.arange(bi.size), yi[bi]], 1e-300, None)))
                if not np.isfinite(loss):
                    raise DivergenceError(f"non-finite classifier loss at epoch {epoch}", epoch)
                total += loss * bi.size
                g = (prob - onehot[bi]) / bi.size
                w -= lr * (z[bi].T @ g + l2 * w)
                b -= lr * g.sum(axis=0)
            if not (np.isfinite(total) and np.all(np.isfinite(w))):
                raise DivergenceError(f"non-finite classifier loss at epoch {epoch}", epoch)
        clf.weights, clf.bias = w, b
        clf.meta = {"seed": seed, "epochs": epochs, "learning_rate": lr, "l2": l2, "batch_size": bs,
                    "final_loss": total / n}
    clf.meta["train_accuracy"] = float(np.mean(clf.predict_index(x) == yi))
    return clf


@dataclass
class EvalResult:
    error_rate: float
    accuracy: float
    classes: tuple[int, ...]
    confusion: np.ndarray  # rows true, columns predicted
    precision: dict
    recall: dict
    f1: dict
    n_samples: int

    def to_dict(self) -> dict:
        return {
            "error_rate": self.error_rate,
            "accuracy": self.accuracy,
            "n_samples": self.n_samples,
            "classes": list(self.classes),
            "confusion": self.confusion.tolist(),
            "precision": {str(k): v for k, v in self.precision.items()},
            "recall": {str(k): v for k, v in self.recall.items()},
            "f1": {str(k): v for k, v in self.f1.items()},
        }

    def write_confusion_csv(self, path) -> None:
        with open(Path(path), "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["true\\pred"] + [str(c) for c in self.classes])
            for c, row in zip(self.classes, self.confusion):
                wr.writerow([str(c)] + [int(v) for v in row])


def evaluate_predictions(y_true, y_pred, classes) -> EvalResult:
    classes = tuple(int(c) for c in classes)
    yt = _class_index(np.asarray(y_true), classes)
    yp = _class_index(np.asarray(y_pred), classes)
    k = len(classes)
    n = yt.size
    if n == 0:
        raise EmptyDatasetError("no samples to evaluate")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (yt, yp), 1)
    correct = int(np.trace(cm))
    precision, recall, f1 = {}, {}, {}
    for i, c in enumerate(classes):
        tp = cm[i, i]
        col, row = cm[:, i].sum(), cm[i, :].sum()
        p = tp / col if col else 0.0
        r = tp / row if row else 0.0
        precision[c] = float(p)
        recall[c] = float(r)
        f1[c] = float(2 * p * r / (p + r)) if p + r else 0.0
    accuracy = correct / n
    return EvalResult(1.0 - accuracy, accuracy, classes, cm, precision, recall, f1, n)


def evaluate(classifier: Classifier, dataset: LabeledDataset) -> EvalResult:
    if dataset.spec != classifier.spec:
        raise InvalidArgumentError("dataset feature spec does not match the classifier's")
    return evaluate_predictions(dataset.y, classifier.predict(dataset.x), classifier.classes)
