"""LIBSVM ingestion, standardization, splitting and the Gaussian-mixture toy."""

from __future__ import annotations

import io
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    """Malformed or unusable dataset."""


@dataclass(frozen=True)
class LabeledDataset:
    """Dense features with 0-based labels.

    ``classes[k]`` is the original label of class index ``k``.
    """

    X: np.ndarray
    y: np.ndarray
    classes: tuple
    stats: dict | None = None

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def one_hot(self) -> np.ndarray:
        out = np.zeros((self.n, self.n_classes))
        out[np.arange(self.n), self.y] = 1.0
        return out

    def subset(self, idx) -> "LabeledDataset":
        return replace(self, X=self.X[idx], y=self.y[idx])


def _label_value(tok: str):
    v = float(tok)
    return int(v) if v.is_integer() else v


def parse_libsvm(stream, n_features: int | None = None, classes=None) -> LabeledDataset:
    """Parse ``label idx:val ...`` lines (1-based, strictly increasing indices).

    Absent indices are 0. Labels are mapped to ``0..C-1`` in sorted order of
    the original values unless an explicit ``classes`` table is supplied.
    """
    if isinstance(stream, (str, Path)):
        with open(stream) as fh:
            return parse_libsvm(fh, n_features, classes)
    labels, rows = [], []
    max_idx = 0
    for lineno, raw in enumerate(stream, start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        toks = line.split()
        try:
            lab = _label_value(toks[0])
        except ValueError:
            raise DataError(f"line {lineno}: bad label {toks[0]!r}") from None
        feats = {}
        last = 0
        for tok in toks[1:]:
            k, sep, v = tok.partition(":")
            try:
                if not sep:
                    raise ValueError
                k = int(k)
                v = float(v)
            except ValueError:
                raise DataError(f"line {lineno}: malformed token {tok!r}") from None
            if k <= last:
                raise DataError(f"line {lineno}: feature indices must be strictly increasing and >= 1")
            last = k
            feats[k] = v
        max_idx = max(max_idx, last)
        labels.append(lab)
        rows.append(feats)
    if not rows:
        raise DataError("empty dataset")
    D = max_idx if n_features is None else n_features
    if max_idx > D:
        raise DataError(f"feature index {max_idx} exceeds declared dimension {D}")
    X = np.zeros((len(rows), D))
    for i, feats in enumerate(rows):
        for k, v in feats.items():
            X[i, k - 1] = v
    if classes is None:
        classes = tuple(sorted(set(labels)))
    lookup = {c: k for k, c in enumerate(classes)}
    try:
        y = np.array([lookup[lab] for lab in labels], dtype=int)
    except KeyError as exc:
        raise DataError(f"label {exc.args[0]!r} not in the class table") from None
    return LabeledDataset(X, y, tuple(classes))


def load_libsvm(path, n_features=None, classes=None) -> LabeledDataset:
    return parse_libsvm(Path(path), n_features, classes)


def format_libsvm(ds: LabeledDataset) -> str:
    buf = io.StringIO()
    for x, k in zip(ds.X, ds.y):
        parts = [str(ds.classes[k])]
        parts += [f"{j + 1}:{v!r}" for j, v in enumerate(x.tolist()) if v != 0.0]
        buf.write(" ".join(parts) + "\n")
    return buf.getvalue()


def write_libsvm(path, ds: LabeledDataset) -> None:
    Path(path).write_text(format_libsvm(ds))


# -- normalization ---------------------------------------------------------------

def normalize(ds: LabeledDataset, stats: dict | None = None) -> LabeledDataset:
    """Standardize features; computes training statistics unless ``stats`` is given.

    Constant features (spread at roundoff level) get a unit divisor.
    """
    if stats is None:
        mean = ds.X.mean(axis=0)
        std = ds.X.std(axis=0)
        std = np.where(std > 1e-12 * np.maximum(1.0, np.abs(mean)), std, 1.0)
        stats = {"mean": mean.tolist(), "std": std.tolist()}
    mean = np.asarray(stats["mean"])
    std = np.asarray(stats["std"])
    if mean.size != ds.dim:
        raise DataError(f"normalization statistics have dimension {mean.size}, data has {ds.dim}")
    return replace(ds, X=(ds.X - mean) / std, stats=stats)


def denormalize(ds: LabeledDataset) -> LabeledDataset:
    if ds.stats is None:
        return ds
    X = ds.X * np.asarray(ds.stats["std"]) + np.asarray(ds.stats["mean"])
    return replace(ds, X=X, stats=None)


def train_test_split(ds: LabeledDataset, test_fraction: float = 1 / 3, seed=None):
    """Stratified shuffle split; each class contributes ``round(n_c * fraction)`` test points."""
    if not 0 <= test_fraction < 1:
        raise ValueError("test_fraction must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    test = []
    for k in range(ds.n_classes):
        members = np.flatnonzero(ds.y == k)
        n_test = int(round(members.size * test_fraction))
        test.extend(rng.permutation(members)[:n_test].tolist())
    test = np.sort(np.array(test, dtype=int))
    train = np.setdiff1d(np.arange(ds.n), test)
    return ds.subset(train), ds.subset(test)


# -- toy data ------------------------------------------------------------------------

TOY_SWEEP = tuple(k / 6 for k in range(7))


def toy_centers(n_classes: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(1, n_classes + 1) / n_classes
    return np.column_stack([np.cos(angles), np.sin(angles)])


def gen_toy(n_points: int = 500, n_classes: int = 3, sigma2: float = 0.5, seed=None) -> LabeledDataset:
    """Isotropic Gaussian mixture with class centers equally spaced on the unit circle.

    Class ``c`` (1-based) sits at angle ``2 pi c / C``. Labels are balanced;
    the remainder of ``n_points / C`` goes round-robin to the first classes.
    """
    if sigma2 < 0:
        raise ValueError("sigma2 must be nonnegative")
    rng = np.random.default_rng(seed)
    y = np.arange(n_points) % n_classes
    centers = toy_centers(n_classes)
    X = centers[y] + np.sqrt(sigma2) * rng.standard_normal((n_points, 2))
    return LabeledDataset(X, y, tuple(range(1, n_classes + 1)))


def toy_bayes_proba(X: np.ndarray, n_classes: int, sigma2: float) -> np.ndarray:
    """Exact class posterior of the toy mixture (equal class weights)."""
    X = np.atleast_2d(X)
    d2 = ((X[:, None, :] - toy_centers(n_classes)[None]) ** 2).sum(-1)
    if sigma2 == 0:
        out = (d2 == d2.min(axis=1, keepdims=True)).astype(float)
        return out / out.sum(axis=1, keepdims=True)
    logits = -d2 / (2.0 * sigma2)
    logits -= logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    return p / p.sum(axis=1, keepdims=True)
