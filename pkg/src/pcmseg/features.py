"""PCA scores of processed curves plus intensities, standardised for clustering."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .gridstats import GridSpec, GridSummary

BASIS_VERSION = 1


class DegenerateFeatureError(ValueError):
    pass


@dataclass
class PcaBasis:
    r_grid: np.ndarray
    mean_curve: np.ndarray  # (n_r,)
    eigenvectors: np.ndarray  # (n_r, K), columns orthonormal
    eigenvalues: np.ndarray  # (K,), nonincreasing
    total_variance: float
    variance_threshold: float

    @property
    def n_components(self) -> int:
        return self.eigenvectors.shape[1]

    @property
    def explained_fraction(self) -> float:
        return float(self.eigenvalues.sum() / self.total_variance)


def fit_pca(curves: np.ndarray, variance_threshold: float = 0.8, r_grid=None) -> PcaBasis:
    """Eigendecomposition of the sample covariance (divisor n - 1) of the curves.

    K is the smallest number of leading components whose eigenvalues reach
    ``variance_threshold`` of the total.  Each eigenvector is signed so its
    largest-magnitude entry is positive.
    """
    curves = np.asarray(curves, dtype=float)
    curves = curves[~np.isnan(curves).any(axis=1)]
    if not 0 < variance_threshold < 1:
        raise ValueError("variance_threshold must lie in (0, 1)")
    if len(curves) < 2:
        raise DegenerateFeatureError("need at least two available curves")
    mean = curves.mean(axis=0)
    centered = curves - mean
    cov = centered.T @ centered / (len(curves) - 1)
    vals, vecs = np.linalg.eigh(cov)
    vals, vecs = np.clip(vals[::-1], 0, None), vecs[:, ::-1]
    total = float(vals.sum())
    if not total > 1e-14 * max(1.0, float(np.abs(mean).max())) ** 2:
        raise DegenerateFeatureError("degenerate covariance: all curves identical")
    frac = np.cumsum(vals) / total
    K = int(np.searchsorted(frac, variance_threshold - 1e-12) + 1)
    K = min(K, len(vals))
    vecs = vecs[:, :K].copy()
    pivot = np.abs(vecs).argmax(axis=0)
    vecs *= np.sign(vecs[pivot, np.arange(K)])
    if r_grid is None:
        r_grid = np.arange(1, curves.shape[1] + 1) / curves.shape[1]
    return PcaBasis(np.asarray(r_grid, float), mean, vecs, vals[:K].copy(), total, variance_threshold)


def project_scores(curves: np.ndarray, basis: PcaBasis) -> np.ndarray:
    """Scores (X - mean) @ phi; NaN rows stay NaN."""
    return (np.asarray(curves, dtype=float) - basis.mean_curve) @ basis.eigenvectors


def reconstruct(scores: np.ndarray, basis: PcaBasis) -> np.ndarray:
    return basis.mean_curve + np.asarray(scores) @ basis.eigenvectors.T


@dataclass
class FeatureMatrix:
    """Standardised features, shape (N, L, Q) with Q = K + H.

    ``mask`` is True where an entry is available.  Unavailable entries of
    ``values`` are zero so arithmetic stays finite; always multiply by the
    mask.
    """

    values: np.ndarray
    mask: np.ndarray
    centers: np.ndarray
    scales: np.ndarray
    n_scores: int
    subject_ids: list
    groups: list
    grid: GridSpec

    @property
    def n_subjects(self) -> int:
        return self.values.shape[0]

    @property
    def n_regions(self) -> int:
        return self.values.shape[1]

    @property
    def n_features(self) -> int:
        return self.values.shape[2]

    @property
    def n_types(self) -> int:
        return self.n_features - self.n_scores

    def raw_values(self) -> np.ndarray:
        """Back on the original scale, NaN where masked."""
        out = self.values * self.scales + self.centers
        return np.where(self.mask, out, np.nan)


def assemble_features(
    scores: np.ndarray,
    intensities: np.ndarray,
    grid: GridSpec,
    subject_ids: Sequence[str] | None = None,
    groups: Sequence | None = None,
) -> FeatureMatrix:
    """Concatenate scores (N, L, K) and intensities (N, L, H); NaN marks missing.

    Columns are standardised over available entries with the sample SD.
    """
    raw = np.concatenate([np.asarray(scores, float), np.asarray(intensities, float)], axis=2)
    mask = ~np.isnan(raw)
    N, L, Q = raw.shape
    centers = np.zeros(Q)
    scales = np.ones(Q)
    for q in range(Q):
        col = raw[..., q][mask[..., q]]
        if col.size < 2:
            raise DegenerateFeatureError(f"feature column {q + 1} has fewer than two values")
        sd = col.std(ddof=1)
        if not sd > 0:
            raise DegenerateFeatureError(f"feature column {q + 1} has zero variance")
        centers[q], scales[q] = col.mean(), sd
    values = np.where(mask, (np.nan_to_num(raw) - centers) / scales, 0.0)
    K = np.asarray(scores).shape[2]
    if subject_ids is None:
        subject_ids = [str(n) for n in range(N)]
    if groups is None:
        groups = [None] * N
    return FeatureMatrix(values, mask, centers, scales, K, list(subject_ids), list(groups), grid)


def build_features(
    summaries: Sequence[GridSummary],
    grid: GridSpec,
    r_grid: np.ndarray,
    variance_threshold: float = 0.8,
) -> tuple[FeatureMatrix, PcaBasis]:
    curves = np.stack([s.curve for s in summaries])
    intens = np.stack([s.intensity for s in summaries])
    basis = fit_pca(curves.reshape(-1, curves.shape[-1]), variance_threshold, r_grid)
    scores = project_scores(curves, basis)
    fm = assemble_features(
        scores, intens, grid, [s.subject_id for s in summaries], [s.group for s in summaries]
    )
    return fm, basis


def invert_features(mu: np.ndarray, basis: PcaBasis, centers, scales):
    """Map standardised cluster means back to intensities and PCF curves.

    ``mu`` has shape (Q,) or (..., Q).  Returns ``(intensities, g)`` with g
    the squared reconstructed curve on ``basis.r_grid``; both clamped at 0.
    """
    mu = np.asarray(mu, dtype=float)
    raw = mu * scales + centers
    K = basis.n_components
    curve = reconstruct(raw[..., :K], basis)
    intens = np.clip(raw[..., K:], 0, None)
    return intens, np.clip(curve, 0, None) ** 2


def truncated_curve(mu: np.ndarray, basis: PcaBasis, centers, scales) -> np.ndarray:
    """Reconstructed sqrt-curve before squaring (may dip below zero)."""
    raw = np.asarray(mu, float) * scales + centers
    return reconstruct(raw[..., : basis.n_components], basis)


# --- files -----------------------------------------------------------------


def write_features(path, fm: FeatureMatrix) -> None:
    Q = fm.n_features
    names = [f"score_{k + 1}" for k in range(fm.n_scores)] + [
        f"intensity_{h + 1}" for h in range(fm.n_types)
    ]
    g = fm.grid
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["# grid", g.rows, g.cols, repr(g.cell_width), repr(g.cell_height),
                    repr(g.origin[0]), repr(g.origin[1])])
        w.writerow(["subject_id", "group", "region_row", "region_col"] + names
                   + [f"mask_{c}" for c in names])
        for n in range(fm.n_subjects):
            grp = "" if fm.groups[n] is None else str(fm.groups[n])
            for l in range(fm.n_regions):
                row, col = g.region_rc(l)
                vals = [repr(float(fm.values[n, l, q])) if fm.mask[n, l, q] else ""
                        for q in range(Q)]
                w.writerow([fm.subject_ids[n], grp, row, col] + vals
                           + [int(m) for m in fm.mask[n, l]])


def read_features(path, basis: "PcaBasis | None" = None,
                  centers=None, scales=None) -> FeatureMatrix:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        meta = next(reader)
        grid = GridSpec(int(meta[1]), int(meta[2]), float(meta[3]), float(meta[4]),
                        (float(meta[5]), float(meta[6])))
        header = next(reader)
        names = [c for c in header[4:] if not c.startswith("mask_")]
        Q = len(names)
        K = sum(1 for c in names if c.startswith("score_"))
        rows: dict[str, dict] = {}
        for row in reader:
            sid = row[0]
            d = rows.setdefault(sid, {"group": None if row[1] == "" else int(row[1]),
                                      "values": np.zeros((grid.n_regions, Q)),
                                      "mask": np.zeros((grid.n_regions, Q), bool)})
            l = int(row[2]) * grid.cols + int(row[3])
            d["mask"][l] = [v == "1" for v in row[4 + Q : 4 + 2 * Q]]
            d["values"][l] = [float(v) if v != "" else 0.0 for v in row[4 : 4 + Q]]
    sids = list(rows)
    values = np.stack([rows[s]["values"] for s in sids])
    mask = np.stack([rows[s]["mask"] for s in sids])
    if centers is None:
        centers, scales = np.zeros(Q), np.ones(Q)
    return FeatureMatrix(values, mask, np.asarray(centers), np.asarray(scales), K, sids,
                         [rows[s]["group"] for s in sids], grid)


def _write_vec(fh, name, vec):
    fh.write(f"{name} {len(vec)}\n")
    fh.write(" ".join(repr(float(v)) for v in vec) + "\n")


def write_basis(path, basis: PcaBasis, centers, scales) -> None:
    """Plain-text basis file.

    Layout: a ``pcmseg-basis <version>`` line, ``key value`` scalar lines,
    then blocks each made of a ``name length`` line and one line of
    whitespace-separated values.  ``eigenvector_k`` blocks are columns of the
    eigenvector matrix.  Floats use repr so the round trip is exact.
    """
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(f"pcmseg-basis {BASIS_VERSION}\n")
        fh.write(f"n_r {len(basis.r_grid)}\n")
        fh.write(f"n_components {basis.n_components}\n")
        fh.write(f"total_variance {basis.total_variance!r}\n")
        fh.write(f"variance_threshold {basis.variance_threshold!r}\n")
        _write_vec(fh, "r_grid", basis.r_grid)
        _write_vec(fh, "mean_curve", basis.mean_curve)
        _write_vec(fh, "eigenvalues", basis.eigenvalues)
        for k in range(basis.n_components):
            _write_vec(fh, f"eigenvector_{k + 1}", basis.eigenvectors[:, k])
        _write_vec(fh, "centers", centers)
        _write_vec(fh, "scales", scales)


def read_basis(path) -> tuple[PcaBasis, np.ndarray, np.ndarray]:
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    tag, version = lines[0].split()
    if tag != "pcmseg-basis" or int(version) != BASIS_VERSION:
        raise ValueError(f"{path}: not a version-{BASIS_VERSION} basis file")
    scalars, blocks = {}, {}
    i = 1
    while i < len(lines):
        key, val = lines[i].split()
        if i + 1 < len(lines) and key not in ("n_r", "n_components", "total_variance",
                                              "variance_threshold"):
            blocks[key] = np.array([float(v) for v in lines[i + 1].split()])
            i += 2
        else:
            scalars[key] = val
            i += 1
    K = int(scalars["n_components"])
    vecs = np.column_stack([blocks[f"eigenvector_{k + 1}"] for k in range(K)])
    basis = PcaBasis(blocks["r_grid"], blocks["mean_curve"], vecs, blocks["eigenvalues"],
                     float(scalars["total_variance"]), float(scalars["variance_threshold"]))
    return basis, blocks["centers"], blocks["scales"]
