"""Mass-dimension measurement, linear-window selection and age profiles.

The enclosed-mass curve M(r) is sampled on geometric radii around the seed
and the dimension is the least-squares slope of ln M against ln r over the
longest window that is straight enough: R^2 above a threshold and no point
further than ``max_residual`` (in ln M) from the fitted line.  The residual
cap is what keeps the window off a gentle bend such as the saturation of M(r)
at the cluster edge, which R^2 alone tolerates.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import stats

DEFAULT_RADII = 64
DEFAULT_MIN_POINTS = 10
DEFAULT_R2 = 0.995
DEFAULT_MAX_RESIDUAL = 0.02
MIN_CLUSTER_CELLS = 100


class EmptyCluster(ValueError):
    pass


class NoLinearRegion(ValueError):
    pass


class TooFewRuns(ValueError):
    pass


@dataclass
class RadialMassCurve:
    center: tuple[int, int]
    r: np.ndarray
    m: np.ndarray

    @property
    def log_r(self) -> np.ndarray:
        return np.log(self.r)

    @property
    def log_m(self) -> np.ndarray:
        return np.log(self.m)

    @property
    def samples(self) -> list[tuple[float, int]]:
        return list(zip(self.r.tolist(), self.m.tolist()))

    @property
    def log_samples(self) -> list[tuple[float, float]]:
        return list(zip(self.log_r.tolist(), self.log_m.tolist()))

    def __len__(self):
        return len(self.r)


@dataclass
class DimensionFit:
    d: float
    k_log: float
    window: tuple[int, int]  # half-open [start, stop) into the curve samples
    r_squared: float
    r_min: float
    r_max: float

    @property
    def n_points(self) -> int:
        return self.window[1] - self.window[0]

    def to_dict(self) -> dict:
        return {"d": self.d, "k_log": self.k_log, "window_r_min": self.r_min,
                "window_r_max": self.r_max, "r_squared": self.r_squared,
                "n_points": self.n_points, "window": list(self.window)}


def _offsets(cluster) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = cluster.coords()
    if len(xs) == 0:
        raise EmptyCluster("cluster has no occupied cells")
    sx, sy = cluster.seed_cell
    return np.asarray(xs, dtype=float) - sx, np.asarray(ys, dtype=float) - sy


def _distances(cluster) -> np.ndarray:
    dx, dy = _offsets(cluster)
    return np.sqrt(dx * dx + dy * dy)


def radial_mass(cluster, radii) -> RadialMassCurve:
    """Occupied cells within Euclidean distance r of the seed, for each r."""
    radii = np.asarray(radii, dtype=float)
    if radii.ndim != 1 or len(radii) == 0 or np.any(radii <= 0):
        raise ValueError("radii must be a non-empty list of positive values")
    if np.any(np.diff(radii) <= 0):
        raise ValueError("radii must be strictly increasing")
    dx, dy = _offsets(cluster)
    d2 = np.sort(dx * dx + dy * dy)
    m = np.searchsorted(d2, radii * radii, side="right")
    return RadialMassCurve(tuple(cluster.seed_cell), radii, m.astype(np.int64))


def default_radii(cluster, count: int = DEFAULT_RADII, r_min: float = 2.0) -> np.ndarray:
    """``count`` geometric radii from 2 to the farthest occupied cell."""
    dmax = float(_distances(cluster).max())
    if dmax <= r_min:
        return np.array([r_min])
    return np.geomspace(r_min, dmax, count)


def _window_stats(x: np.ndarray, y: np.ndarray):
    """Prefix sums so that any window's OLS fit costs O(1)."""
    z = np.zeros(1)
    return (np.concatenate([z, np.cumsum(x)]), np.concatenate([z, np.cumsum(y)]),
            np.concatenate([z, np.cumsum(x * x)]), np.concatenate([z, np.cumsum(y * y)]),
            np.concatenate([z, np.cumsum(x * y)]))


def ols(x: np.ndarray, y: np.ndarray) -> tuple[float, float, float]:
    """Slope, intercept and R^2 of an ordinary least-squares line.

    A window with no spread in y carries no scaling information and gets R^2 = 0.
    """
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    xm, ym = x.mean(), y.mean()
    sxx = np.sum((x - xm) ** 2)
    sxy = np.sum((x - xm) * (y - ym))
    syy = np.sum((y - ym) ** 2)
    slope = sxy / sxx
    intercept = ym - slope * xm
    r2 = 0.0 if syy == 0 else min(1.0, (sxy * sxy) / (sxx * syy))
    return float(slope), float(intercept), float(r2)


def find_linear_region(curve: RadialMassCurve, min_points: int = DEFAULT_MIN_POINTS,
                       r2_threshold: float = DEFAULT_R2,
                       max_residual: float | None = DEFAULT_MAX_RESIDUAL) -> tuple[int, int]:
    """Longest contiguous window with R^2 >= threshold and all residuals within the cap.

    Ties go to the higher R^2, then the earlier start.  ``max_residual=None``
    drops the cap.  Returns a half-open index window ``(start, stop)``.
    """
    x, y = curve.log_r, curve.log_m
    n = len(x)
    if n < min_points:
        raise NoLinearRegion(f"only {n} samples, need at least {min_points}")
    sx, sy, sxx, syy, sxy = _window_stats(x, y)
    best = None
    for length in range(n, min_points - 1, -1):
        for start in range(0, n - length + 1):
            stop = start + length
            k = float(length)
            cxx = (sxx[stop] - sxx[start]) - (sx[stop] - sx[start]) ** 2 / k
            cyy = (syy[stop] - syy[start]) - (sy[stop] - sy[start]) ** 2 / k
            cxy = (sxy[stop] - sxy[start]) - (sx[stop] - sx[start]) * (sy[stop] - sy[start]) / k
            if cxx <= 0 or cyy <= 1e-300:
                continue
            if cxy * cxy / (cxx * cyy) < r2_threshold - 1e-9:
                continue
            # prefix sums lose digits on long windows; confirm directly
            xs, ys = x[start:stop], y[start:stop]
            slope, intercept, r2 = ols(xs, ys)
            if r2 < r2_threshold:
                continue
            if max_residual is not None and np.max(np.abs(ys - (slope * xs + intercept))) > max_residual:
                continue
            if best is None or r2 > best[0]:
                best = (r2, start, stop)
        if best is not None:
            return best[1], best[2]
    raise NoLinearRegion(f"no window of >= {min_points} points reaches R^2 >= {r2_threshold}"
                         + ("" if max_residual is None else f" with residuals <= {max_residual}"))


def fit_window(curve: RadialMassCurve, window: tuple[int, int]) -> DimensionFit:
    a, b = window
    slope, intercept, r2 = ols(curve.log_r[a:b], curve.log_m[a:b])
    return DimensionFit(slope, intercept, (a, b), r2, float(curve.r[a]), float(curve.r[b - 1]))


def mass_dimension(cluster, min_points: int = DEFAULT_MIN_POINTS,
                   r2_threshold: float = DEFAULT_R2,
                   radii=None,
                   max_residual: float | None = DEFAULT_MAX_RESIDUAL) -> tuple[DimensionFit, RadialMassCurve]:
    """Fit d in M(r) = k r^d over the automatically chosen scaling window."""
    n = len(cluster)
    if n < MIN_CLUSTER_CELLS:
        raise EmptyCluster(f"cluster has {n} cells; at least {MIN_CLUSTER_CELLS} are needed")
    curve = radial_mass(cluster, default_radii(cluster) if radii is None else radii)
    window = find_linear_region(curve, min_points, r2_threshold, max_residual)
    return fit_window(curve, window), curve


def ensemble_stats(fits) -> tuple[float, float]:
    """Mean and sample standard deviation (n-1) of the fitted dimensions."""
    ds = np.array([f.d if isinstance(f, DimensionFit) else float(f) for f in fits])
    if len(ds) < 2:
        raise TooFewRuns(f"need at least 2 fits, got {len(ds)}")
    return float(ds.mean()), float(ds.std(ddof=1))


def format_estimate(mean: float, std: float, digits: int = 2) -> str:
    return f"{mean:.{digits}f} ± {std:.{digits}f}"


def age_profile(cluster, bins: int) -> list[tuple[float, float]]:
    """Mean particle index per equal-width radial bin (bin centres, non-empty bins only)."""
    if bins < 2:
        raise ValueError("bins must be at least 2")
    d = _distances(cluster)
    idx = np.arange(len(d), dtype=float)
    dmax = float(d.max())
    if dmax == 0:
        return [(0.0, float(idx.mean()))]
    edges = np.linspace(0.0, dmax, bins + 1)
    which = np.minimum(np.searchsorted(edges, d, side="right") - 1, bins - 1)
    out = []
    for b in range(bins):
        sel = which == b
        if sel.any():
            out.append((float(0.5 * (edges[b] + edges[b + 1])), float(idx[sel].mean())))
    return out


def age_correlation(profile) -> float:
    """Spearman rank correlation between bin radius and mean age."""
    r = [p[0] for p in profile]
    a = [p[1] for p in profile]
    if len(r) < 3:
        return float("nan")
    return float(stats.spearmanr(r, a).statistic)


# -- report files ------------------------------------------------------------

def write_curve_csv(curve: RadialMassCurve, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["r", "m", "ln_r", "ln_m"])
        for r, m, lr, lm in zip(curve.r, curve.m, curve.log_r, curve.log_m):
            w.writerow([repr(float(r)), int(m), repr(float(lr)), repr(float(lm))])
    return path


def write_fit_json(fit: DimensionFit, path, **extra) -> Path:
    path = Path(path)
    path.write_text(json.dumps({**fit.to_dict(), **extra}, indent=1) + "\n")
    return path


def write_age_csv(profile, path) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["radius", "mean_particle_index"])
        for r, a in profile:
            w.writerow([repr(r), repr(a)])
    return path


def spearman_ok(profile, threshold: float = 0.9) -> bool:
    rho = age_correlation(profile)
    return not math.isnan(rho) and rho > threshold
