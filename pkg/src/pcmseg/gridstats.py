"""Gridding of point patterns and per-region intensity / pair-correlation summaries.

Regions are indexed row-major, ``l = row * cols + col``, with row 0 at the
bottom of the frame (smallest y).  Missing statistics are stored as NaN.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Sequence

import numpy as np
from scipy import linalg

from .ingest import MarkedPointPattern, Rectangle

DEFAULT_N_R = 512
STOYAN_CONSTANT = 0.15


@dataclass(frozen=True)
class GridSpec:
    rows: int
    cols: int
    cell_width: float
    cell_height: float
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.rows < 1 or self.cols < 1:
            raise ValueError("grid needs at least one row and one column")
        if not (self.cell_width > 0 and self.cell_height > 0):
            raise ValueError("grid cells must have positive size")

    @property
    def n_regions(self) -> int:
        return self.rows * self.cols

    @property
    def cell_area(self) -> float:
        return self.cell_width * self.cell_height

    @property
    def max_distance(self) -> float:
        """R: half the shortest side of a region."""
        return min(self.cell_width, self.cell_height) / 2.0

    @property
    def frame(self) -> Rectangle:
        x0, y0 = self.origin
        return Rectangle(x0, x0 + self.cols * self.cell_width, y0, y0 + self.rows * self.cell_height)

    def r_grid(self, n_r: int = DEFAULT_N_R) -> np.ndarray:
        """Equispaced distances R/n_r, 2R/n_r, ..., R."""
        return self.max_distance * np.arange(1, n_r + 1) / n_r

    def region_rc(self, region: int) -> tuple[int, int]:
        return divmod(int(region), self.cols)

    def region_rect(self, region: int) -> Rectangle:
        row, col = self.region_rc(region)
        x0, y0 = self.origin
        return Rectangle(
            x0 + col * self.cell_width,
            x0 + (col + 1) * self.cell_width,
            y0 + row * self.cell_height,
            y0 + (row + 1) * self.cell_height,
        )

    def centers(self) -> np.ndarray:
        x0, y0 = self.origin
        rr, cc = np.divmod(np.arange(self.n_regions), self.cols)
        return np.column_stack(
            [x0 + (cc + 0.5) * self.cell_width, y0 + (rr + 0.5) * self.cell_height]
        )

    def nearest_region(self, xy: np.ndarray) -> np.ndarray:
        """Index of the nearest region center; ties go to the lowest index.

        On a regular lattice the nearest center separates into nearest
        column and nearest row, and ``ceil(u) - 1`` sends a point on a cell
        boundary to the lower cell.
        """
        xy = np.atleast_2d(np.asarray(xy, dtype=float))
        x0, y0 = self.origin
        col = np.ceil((xy[:, 0] - x0) / self.cell_width).astype(np.int64) - 1
        row = np.ceil((xy[:, 1] - y0) / self.cell_height).astype(np.int64) - 1
        col = np.clip(col, 0, self.cols - 1)
        row = np.clip(row, 0, self.rows - 1)
        return row * self.cols + col


def _largest_window(windows: Sequence[Rectangle]) -> Rectangle:
    if not windows:
        raise ValueError("no windows")
    return max(windows, key=lambda r: r.area)


def explicit_grid(frame: Rectangle, rows: int, cols: int) -> GridSpec:
    return GridSpec(rows, cols, frame.width / cols, frame.height / rows, (frame.xmin, frame.ymin))


def make_grid(
    patterns: Sequence[MarkedPointPattern],
    target_mean_count: float = 20,
    rows: int | None = None,
    cols: int | None = None,
) -> GridSpec:
    """Equal-cell grid over the largest window.

    With ``rows``/``cols`` given the grid is fixed.  Otherwise near-square
    cells are tried at increasing resolution and the grid whose mean count
    per retained region is closest to ``target_mean_count`` wins (ties go
    to the coarser grid).
    """
    frame = _largest_window([p.window for p in patterns])
    if (rows is None) != (cols is None):
        raise ValueError("rows and cols must be given together")
    if rows is not None:
        return explicit_grid(frame, int(rows), int(cols))
    if target_mean_count < 1:
        raise ValueError("target_mean_count must be >= 1")

    total = sum(p.n_points for p in patterns)
    best, best_gap = None, math.inf
    seen = set()
    aspect = frame.width / frame.height
    for r in range(1, max(2, int(math.sqrt(total)) + 2)):
        c = max(1, int(round(r * aspect)))
        if (r, c) in seen:
            continue
        seen.add((r, c))
        grid = explicit_grid(frame, r, c)
        n_pts, n_reg = 0, 0
        for p in patterns:
            a = assign_regions(p, grid)
            n_pts += int(a.counts[a.retained].sum())
            n_reg += int(a.retained.sum())
        if n_reg == 0:
            continue
        gap = abs(n_pts / n_reg - target_mean_count)
        if gap < best_gap - 1e-12:
            best, best_gap = grid, gap
        if n_reg > total:
            break
    if best is None:
        raise ValueError("could not construct a grid with any retained region")
    return best


@dataclass
class RegionAssignment:
    region: np.ndarray  # per point
    counts: np.ndarray  # per region
    retained: np.ndarray  # per region


def assign_regions(pattern: MarkedPointPattern, grid: GridSpec) -> RegionAssignment:
    """Nearest-center assignment of points and the retained-region flags.

    A region is retained when its rectangle lies inside the subject's window
    and it holds at least one point.
    """
    if not grid.frame.contains_rect(pattern.window):
        raise ValueError(f"grid does not cover the window of subject {pattern.subject_id}")
    region = grid.nearest_region(pattern.xy) if pattern.n_points else np.zeros(0, np.int64)
    counts = np.bincount(region, minlength=grid.n_regions)
    inside = np.array(
        [pattern.window.contains_rect(grid.region_rect(l)) for l in range(grid.n_regions)]
    )
    return RegionAssignment(region, counts, inside & (counts > 0))


def local_intensity(marks: np.ndarray, area: float, n_types: int) -> np.ndarray:
    """Per-type counts divided by region area; marks are 1-based."""
    if not area > 0:
        raise ValueError("region area must be positive")
    return np.bincount(np.asarray(marks, dtype=np.int64) - 1, minlength=n_types)[:n_types] / area


def epanechnikov(t, w: float):
    """Epanechnikov kernel with half-width ``w``, normalised to integrate to 1."""
    t = np.asarray(t, dtype=float)
    u = t / w
    return np.where(np.abs(u) <= 1.0, 0.75 / w * (1.0 - u * u), 0.0)


def stoyan_bandwidth(n_points: int, area: float) -> float:
    return STOYAN_CONSTANT / math.sqrt(n_points / area)


def translation_weight(v, width: float, height: float):
    """|W| / |W ∩ (W - v)| for a width x height rectangle and shifts ``v`` (..., 2)."""
    v = np.asarray(v, dtype=float)
    overlap = np.clip(width - np.abs(v[..., 0]), 0, None) * np.clip(
        height - np.abs(v[..., 1]), 0, None
    )
    with np.errstate(divide="ignore"):
        return np.where(overlap > 0, width * height / np.where(overlap > 0, overlap, 1.0), np.inf)


def local_pcf(xy: np.ndarray, rect: Rectangle, r_grid: np.ndarray) -> np.ndarray:
    """Kernel PCF estimate with translation edge correction on an equispaced grid.

    ``r_grid`` must be ``R/n, 2R/n, ..., R`` (as produced by
    :meth:`GridSpec.r_grid`); only the band of grid values within one kernel
    half-width of each pair distance is touched.
    """
    xy = np.asarray(xy, dtype=float)
    m = len(xy)
    if m < 2:
        raise ValueError("need at least two points")
    n_r = len(r_grid)
    step = r_grid[0]
    area = rect.area
    w = stoyan_bandwidth(m, area)

    i, j = np.triu_indices(m, 1)
    v = xy[j] - xy[i]
    d = np.hypot(v[:, 0], v[:, 1])
    keep = d < r_grid[-1] + w
    d, v = d[keep], v[keep]
    out = np.zeros(n_r)
    if d.size:
        t = translation_weight(v, rect.width, rect.height)
        k_lo = np.maximum(np.ceil((d - w) / step).astype(np.int64), 1)
        k_hi = np.minimum(np.floor((d + w) / step).astype(np.int64), n_r)
        band = max(int((k_hi - k_lo).max()) + 1, 1)
        idx = k_lo[:, None] + np.arange(band)[None, :]
        valid = idx <= k_hi[:, None]
        r = idx * step
        vals = epanechnikov(r - d[:, None], w) * t[:, None]
        out = np.bincount(idx[valid] - 1, weights=vals[valid], minlength=n_r)[:n_r]
    # sum over ordered pairs i != j is twice the unordered sum
    return area * 2.0 * out / (2.0 * np.pi * r_grid * m * (m - 1))


def local_pcf_direct(xy: np.ndarray, rect: Rectangle, r_grid: np.ndarray) -> np.ndarray:
    """Unbanded double sum over ordered pairs; reference for :func:`local_pcf`."""
    xy = np.asarray(xy, dtype=float)
    m = len(xy)
    w = stoyan_bandwidth(m, rect.area)
    total = np.zeros(len(r_grid))
    for a in range(m):
        for b in range(m):
            if a == b:
                continue
            v = xy[b] - xy[a]
            total += epanechnikov(r_grid - np.hypot(*v), w) * translation_weight(
                v, rect.width, rect.height
            )
    return rect.area * total / (2 * np.pi * r_grid * m * (m - 1))


class SplineSmoother:
    """Cubic smoothing spline on a fixed set of knots, batched over curves.

    Minimises ``sum (y_i - f(x_i))^2 + lam * int f''^2`` with the natural
    cubic spline penalty ``K = Q R^{-1} Q^T`` and diagonalises it once, so a
    whole stack of curves can be fitted and GCV-tuned with matrix products.
    """

    def __init__(self, x: np.ndarray, n_lambda: int = 81):
        x = np.asarray(x, dtype=float)
        n = len(x)
        if n < 4:
            raise ValueError("need at least 4 knots")
        h = np.diff(x)
        Q = np.zeros((n, n - 2))
        cols = np.arange(n - 2)
        Q[cols, cols] = 1 / h[:-1]
        Q[cols + 1, cols] = -1 / h[:-1] - 1 / h[1:]
        Q[cols + 2, cols] = 1 / h[1:]
        Rm = np.diag((h[:-1] + h[1:]) / 3)
        off = h[1:-1] / 6
        Rm += np.diag(off, 1) + np.diag(off, -1)
        K = Q @ linalg.solve(Rm, Q.T, assume_a="pos")
        K = (K + K.T) / 2
        d, U = linalg.eigh(K)
        d = np.clip(d, 0, None)
        d[:2] = 0.0  # linear functions are unpenalised
        self.x, self.penalty, self.eigvals, self.basis = x, K, d, U
        d_pos = d[2:]
        # from near-interpolation down to ~3 effective degrees of freedom
        self.lambdas = np.logspace(
            np.log10(1e-2 / d_pos.max()), np.log10(1e3 / d_pos.min()), n_lambda
        )

    def fit(self, y: np.ndarray, lam: float) -> np.ndarray:
        c = np.atleast_2d(y) @ self.basis
        return (c / (1 + lam * self.eigvals)) @ self.basis.T

    def gcv(self, y: np.ndarray) -> np.ndarray:
        """GCV score, shape (n_curves, n_lambda)."""
        n = len(self.x)
        c2 = (np.atleast_2d(y) @ self.basis) ** 2
        shrink = 1.0 / (1.0 + self.lambdas[:, None] * self.eigvals[None, :])
        rss = c2 @ ((1.0 - shrink) ** 2).T
        df = shrink.sum(axis=1)
        return n * rss / (n - df)[None, :] ** 2

    def smooth(self, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Fit each row of ``y`` at its GCV-optimal lambda. Returns (fits, lambdas)."""
        y = np.atleast_2d(np.asarray(y, dtype=float))
        best = np.argmin(self.gcv(y), axis=1)
        lam = self.lambdas[best]
        c = y @ self.basis
        fits = (c / (1 + lam[:, None] * self.eigvals[None, :])) @ self.basis.T
        return fits, lam


@lru_cache(maxsize=8)
def _smoother(r_key: tuple) -> SplineSmoother:
    return SplineSmoother(np.array(r_key))


def process_curves(raw: np.ndarray, r_grid: np.ndarray) -> np.ndarray:
    """Square root, GCV smoothing spline, clamp at zero.  Rows are curves."""
    raw = np.atleast_2d(np.asarray(raw, dtype=float))
    smoother = _smoother(tuple(np.asarray(r_grid, dtype=float).tolist()))
    fits, _ = smoother.smooth(np.sqrt(np.clip(raw, 0, None)))
    return np.clip(fits, 0, None)


def process_curve(raw: np.ndarray, r_grid: np.ndarray) -> np.ndarray:
    return process_curves(raw, r_grid)[0]


@dataclass
class GridSummary:
    subject_id: str
    group: int | None
    retained: np.ndarray  # (L,) bool
    n_points: np.ndarray  # (L,) int
    intensity: np.ndarray  # (L, H); NaN where not retained
    curve: np.ndarray  # (L, n_r); NaN where missing

    @property
    def curve_available(self) -> np.ndarray:
        return ~np.isnan(self.curve).any(axis=1)


def summarize_pattern(
    pattern: MarkedPointPattern, grid: GridSpec, n_types: int, r_grid: np.ndarray
) -> tuple[GridSummary, np.ndarray]:
    """Intensities and raw PCFs for one subject; curves are left unprocessed."""
    L = grid.n_regions
    a = assign_regions(pattern, grid)
    intensity = np.full((L, n_types), np.nan)
    raw = np.full((L, len(r_grid)), np.nan)
    order = np.argsort(a.region, kind="stable")
    bounds = np.searchsorted(a.region[order], np.arange(L + 1))
    for l in np.flatnonzero(a.retained):
        idx = order[bounds[l] : bounds[l + 1]]
        rect = grid.region_rect(l)
        intensity[l] = local_intensity(pattern.marks[idx], rect.area, n_types)
        if len(idx) >= 2:
            raw[l] = local_pcf(pattern.xy[idx], rect, r_grid)
    summary = GridSummary(pattern.subject_id, pattern.group, a.retained, a.counts, intensity, raw)
    return summary, raw


def grid_stats(
    patterns: Sequence[MarkedPointPattern],
    grid: GridSpec,
    n_types: int,
    n_r: int = DEFAULT_N_R,
) -> list[GridSummary]:
    """Full first-stage summaries (intensities and processed curves) per subject."""
    r_grid = grid.r_grid(n_r)
    out = []
    for p in patterns:
        summary, raw = summarize_pattern(p, grid, n_types, r_grid)
        ok = ~np.isnan(raw).any(axis=1)
        if ok.any():
            summary.curve[ok] = process_curves(raw[ok], r_grid)
        out.append(summary)
    return out


def _fmt(v: float) -> str:
    return "" if np.isnan(v) else repr(float(v))


def write_grid_stats(path, summaries: Sequence[GridSummary], grid: GridSpec, r_grid) -> None:
    H = summaries[0].intensity.shape[1]
    header = ["subject_id", "group", "region_row", "region_col", "retained", "n_points"]
    header += [f"intensity_{h + 1}" for h in range(H)]
    header += [f"x_r={float(r)!r}" for r in r_grid]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["# grid", grid.rows, grid.cols, repr(grid.cell_width),
                    repr(grid.cell_height), repr(grid.origin[0]), repr(grid.origin[1])])
        w.writerow(header)
        for s in summaries:
            g = "" if s.group is None else str(s.group)
            for l in range(grid.n_regions):
                row, col = grid.region_rc(l)
                w.writerow(
                    [s.subject_id, g, row, col, int(bool(s.retained[l])), int(s.n_points[l])]
                    + [_fmt(v) for v in s.intensity[l]]
                    + [_fmt(v) for v in s.curve[l]]
                )


def _parse(v: str) -> float:
    return float("nan") if v == "" else float(v)


def read_grid_stats(path) -> tuple[list[GridSummary], GridSpec, np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        meta = next(reader)
        if not meta or meta[0] != "# grid":
            raise ValueError(f"{path}: missing grid metadata line")
        grid = GridSpec(int(meta[1]), int(meta[2]), float(meta[3]), float(meta[4]),
                        (float(meta[5]), float(meta[6])))
        header = next(reader)
        H = sum(1 for c in header if c.startswith("intensity_"))
        r_cols = [c for c in header if c.startswith("x_r=")]
        r_grid = np.array([float(c[4:]) for c in r_cols])
        by_subject: dict[str, dict] = {}
        L = grid.n_regions
        for row in reader:
            sid = row[0]
            s = by_subject.get(sid)
            if s is None:
                s = by_subject[sid] = {
                    "group": None if row[1] == "" else int(row[1]),
                    "retained": np.zeros(L, bool),
                    "n_points": np.zeros(L, np.int64),
                    "intensity": np.full((L, H), np.nan),
                    "curve": np.full((L, len(r_grid)), np.nan),
                }
            l = int(row[2]) * grid.cols + int(row[3])
            s["retained"][l] = row[4] == "1"
            s["n_points"][l] = int(row[5])
            s["intensity"][l] = [_parse(v) for v in row[6 : 6 + H]]
            s["curve"][l] = [_parse(v) for v in row[6 + H :]]
    summaries = [GridSummary(sid, **d) for sid, d in by_subject.items()]
    return summaries, grid, r_grid
