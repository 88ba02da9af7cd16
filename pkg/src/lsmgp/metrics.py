"""Test error, NLL, expected calibration error and reliability-diagram data."""

from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field

import numpy as np

NLL_FLOOR = 1e-12


@dataclass
class CalibrationReport:
    n_bins: int
    bin_lower: list
    bin_upper: list
    bin_confidence: list
    bin_accuracy: list
    bin_count: list
    ece: float
    test_error: float
    mean_nll: float
    n: int = field(default=0)

    def to_dict(self) -> dict:
        return asdict(self)

    def bin_rows(self):
        """Rows of the reliability diagram / confidence histogram table."""
        for b in range(self.n_bins):
            yield {
                "bin": b,
                "lower": self.bin_lower[b],
                "upper": self.bin_upper[b],
                "count": self.bin_count[b],
                "mean_confidence": self.bin_confidence[b],
                "accuracy": self.bin_accuracy[b],
            }


def evaluate(probs: np.ndarray, labels: np.ndarray, n_bins: int = 10, atol: float = 1e-6) -> CalibrationReport:
    """Confidence is the max predicted probability; bins are ``((b-1)/B, b/B]``.

    Empty bins report ``nan`` confidence and accuracy and carry zero weight.
    """
    probs = np.atleast_2d(np.asarray(probs, dtype=float))
    labels = np.asarray(labels, dtype=int)
    N = probs.shape[0]
    if labels.shape != (N,):
        raise ValueError("labels must have one entry per row of probs")
    if N == 0:
        raise ValueError("no test points")
    if np.any(probs < -atol) or np.any(np.abs(probs.sum(axis=1) - 1.0) > atol):
        raise ValueError("probability rows must be nonnegative and sum to 1")
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(N), pred]
    correct = (pred == labels).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    which = np.clip(np.ceil(conf * n_bins).astype(int) - 1, 0, n_bins - 1)
    counts = np.bincount(which, minlength=n_bins)
    conf_sum = np.bincount(which, weights=conf, minlength=n_bins)
    acc_sum = np.bincount(which, weights=correct, minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        mean_conf = np.where(counts > 0, conf_sum / counts, np.nan)
        acc = np.where(counts > 0, acc_sum / counts, np.nan)
    ece = float(np.abs(acc_sum - conf_sum).sum() / N)
    p_true = np.maximum(probs[np.arange(N), labels], NLL_FLOOR)
    return CalibrationReport(
        n_bins=n_bins,
        bin_lower=edges[:-1].tolist(),
        bin_upper=edges[1:].tolist(),
        bin_confidence=mean_conf.tolist(),
        bin_accuracy=acc.tolist(),
        bin_count=counts.astype(int).tolist(),
        ece=min(max(ece, 0.0), 1.0),
        test_error=float(1.0 - correct.mean()),
        mean_nll=float(-np.mean(np.log(p_true))),
        n=N,
    )


def write_report(report: CalibrationReport, json_path=None, csv_path=None) -> None:
    if json_path is not None:
        with open(json_path, "w") as fh:
            json.dump(report.to_dict(), fh, indent=1)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["bin", "lower", "upper", "count", "mean_confidence", "accuracy"])
            w.writeheader()
            w.writerows(report.bin_rows())


def grid_points(bounds, resolution: int):
    """Regular ``resolution x resolution`` grid; a single cell sits at the center."""
    x0, x1, y0, y1 = map(float, bounds)
    if resolution < 1:
        raise ValueError("resolution must be >= 1")
    if resolution == 1:
        xs, ys = np.array([(x0 + x1) / 2]), np.array([(y0 + y1) / 2])
    else:
        xs, ys = np.linspace(x0, x1, resolution), np.linspace(y0, y1, resolution)
    gx, gy = np.meshgrid(xs, ys)
    return np.column_stack([gx.ravel(), gy.ravel()])


def prediction_grid(state, bounds, resolution: int = 50, n_samples: int = 1000,
                    sampler: str = "monte-carlo", rng=None, transform=None):
    """Predictive class probabilities on a 2-D grid.

    ``transform`` maps raw grid coordinates into model input space (e.g. the
    stored normalization). Returns ``(points, probs)``.
    """
    from .sparse import predict_proba

    if state.Z.shape[1] != 2:
        raise ValueError("prediction grid needs a model over a 2-D feature space")
    pts = grid_points(bounds, resolution)
    inputs = pts if transform is None else transform(pts)
    return pts, predict_proba(state, inputs, n_samples=n_samples, sampler=sampler, rng=rng)


def write_grid_csv(path, points, probs, resolution: int, bounds) -> None:
    C = probs.shape[1]
    with open(path, "w", newline="") as fh:
        fh.write(f"# resolution={resolution} bounds={','.join(repr(float(b)) for b in bounds)}\n")
        w = csv.writer(fh)
        w.writerow(["x", "y"] + [f"p{k + 1}" for k in range(C)])
        for (x, y), p in zip(points, probs):
            w.writerow([repr(float(x)), repr(float(y))] + [repr(float(v)) for v in p])
