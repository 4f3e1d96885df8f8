"""Model-agnostic PDP and ALE curves over one feature.

A predictor is any callable mapping a feature matrix to scores in [0,1].
PDP clamps the feature to each grid value for every row and averages the
predictions. ALE accumulates local prediction differences estimated from the
rows nearest each grid interval, then shifts the curve to zero mean.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .features import zscore_transform


@dataclass
class ExplainCurve:
    feature_index: int
    kind: str                   # "pdp" | "ale"
    grid: np.ndarray
    values: np.ndarray
    k_neighbors: int | None = None

    def __post_init__(self):
        if np.any(np.diff(self.grid) <= 0):
            raise ValueError("grid must be strictly ascending")


def forest_predictor(forest, stats):
    """Scorer over raw features: z-score with the model's stats, then score."""
    from .forest import predict_forest

    def score(X):
        return predict_forest(forest, zscore_transform(stats, X))[0]
    return score


def mlp_predictor(mlp, stats):
    from .mlp import predict_mlp

    def score(X):
        return predict_mlp(mlp, zscore_transform(stats, X))[0]
    return score


def make_grid(ds, feature_index, n_points, value_range=None):
    """Quantile grid over observed values, or linear spacing over a range.

    Duplicate quantiles collapse, so the grid is strictly ascending but may
    hold fewer than n_points values.
    """
    if n_points < 2:
        raise ValueError("n_points must be >= 2")
    if value_range is not None:
        lo, hi = value_range
        if not hi > lo:
            raise ValueError(f"empty range {value_range}")
        return np.linspace(lo, hi, n_points)
    col = np.asarray(ds.X[:, feature_index], dtype=float)
    if len(col) == 0:
        raise ValueError("empty feature column")
    qs = np.quantile(col, np.linspace(0.0, 1.0, n_points))
    return np.unique(qs)


def pdp(predictor, ds, feature_index, grid) -> ExplainCurve:
    """Mean prediction with feature_index clamped to each grid value."""
    if len(ds) == 0:
        raise ValueError("empty dataset")
    X = np.array(ds.X, dtype=float, copy=True)
    values = np.empty(len(grid))
    for j, w in enumerate(grid):
        X[:, feature_index] = w
        values[j] = float(np.mean(predictor(X)))
    return ExplainCurve(feature_index=feature_index, kind="pdp",
                        grid=np.asarray(grid, dtype=float), values=values)


def ale(predictor, ds, feature_index, grid, k=10) -> ExplainCurve:
    """Accumulated local effects with k-nearest-sample interval estimates.

    For each grid interval the local effect is the mean prediction difference
    between the upper and lower edge over the k rows whose feature value is
    closest to the interval midpoint (ties broken by row index). The
    cumulative curve is shifted to zero mean over the grid.
    """
    grid = np.asarray(grid, dtype=float)
    n = len(ds)
    if k > n:
        raise ValueError(f"k={k} exceeds {n} rows")
    if len(grid) < 2:
        raise ValueError("ALE needs at least two grid points")
    col = ds.X[:, feature_index]
    order_tiebreak = np.arange(n)
    deltas = np.empty(len(grid) - 1)
    for j in range(1, len(grid)):
        mid = (grid[j - 1] + grid[j]) / 2.0
        nearest = np.lexsort((order_tiebreak, np.abs(col - mid)))[:k]
        rows = np.array(ds.X[nearest], dtype=float, copy=True)
        rows[:, feature_index] = grid[j]
        hi = predictor(rows)
        rows[:, feature_index] = grid[j - 1]
        lo = predictor(rows)
        deltas[j - 1] = float(np.mean(hi - lo))
    values = np.concatenate([[0.0], np.cumsum(deltas)])
    values -= values.mean()
    return ExplainCurve(feature_index=feature_index, kind="ale",
                        grid=grid, values=values, k_neighbors=k)


def write_curve_csv(curve: ExplainCurve, feature_name, path):
    with open(path, "w") as fh:
        fh.write("feature_name,kind,w,value\n")
        for w, v in zip(curve.grid, curve.values):
            fh.write(f"{feature_name},{curve.kind},{w!r},{v!r}\n")


def write_curve_dat(curve: ExplainCurve, feature_name, path):
    """Two-column gnuplot-friendly layout."""
    with open(path, "w") as fh:
        fh.write(f"# {feature_name} {curve.kind}\n# w value\n")
        for w, v in zip(curve.grid, curve.values):
            fh.write(f"{w!r} {v!r}\n")


def notch_depth(curve: ExplainCurve, sub_lo, sub_hi, baseline_at=0.0):
    """Curve value at the baseline grid point minus the minimum over (sub_lo, sub_hi]."""
    base_idx = int(np.argmin(np.abs(curve.grid - baseline_at)))
    window = (curve.grid > sub_lo) & (curve.grid <= sub_hi)
    if not window.any():
        raise ValueError("no grid points in the requested sub-range")
    return float(curve.values[base_idx] - curve.values[window].min())
