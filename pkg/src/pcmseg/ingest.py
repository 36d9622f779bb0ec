"""Loading and validating marked point patterns.

Points arrive as a CSV with header ``subject_id,x,y,type[,group]``. Windows
come either as a mapping ``subject_id -> Rectangle`` or as a CSV with header
``subject_id,xmin,xmax,ymin,ymax``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from os import PathLike
from typing import Mapping

import numpy as np

GROUP_CODES = {"0": 0, "1": 1, "control": 0, "cancer": 1}


class IngestError(ValueError):
    """Raised for malformed or inconsistent point/window input."""


@dataclass(frozen=True)
class Rectangle:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def __post_init__(self):
        if not (self.xmax > self.xmin and self.ymax > self.ymin):
            raise IngestError(f"non-positive window {self}")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def contains(self, xy: np.ndarray, tol: float = 0.0) -> np.ndarray:
        """Closed-rectangle membership for an (n, 2) array of points."""
        xy = np.atleast_2d(xy)
        return (
            (xy[:, 0] >= self.xmin - tol)
            & (xy[:, 0] <= self.xmax + tol)
            & (xy[:, 1] >= self.ymin - tol)
            & (xy[:, 1] <= self.ymax + tol)
        )

    def contains_rect(self, other: "Rectangle", tol: float = 1e-9) -> bool:
        return (
            other.xmin >= self.xmin - tol
            and other.xmax <= self.xmax + tol
            and other.ymin >= self.ymin - tol
            and other.ymax <= self.ymax + tol
        )


@dataclass
class MarkedPointPattern:
    """Cell locations with integer type marks (1..H) inside a window."""

    subject_id: str
    xy: np.ndarray
    marks: np.ndarray
    window: Rectangle
    group: int | None = None
    n_types: int | None = field(default=None, compare=False)

    def __post_init__(self):
        self.xy = np.asarray(self.xy, dtype=float).reshape(-1, 2)
        self.marks = np.asarray(self.marks, dtype=np.int64).reshape(-1)
        if len(self.xy) != len(self.marks):
            raise IngestError("xy and marks differ in length")

    @property
    def n_points(self) -> int:
        return len(self.marks)

    def validate(self, n_types: int) -> None:
        inside = self.window.contains(self.xy)
        if not inside.all():
            i = int(np.flatnonzero(~inside)[0])
            raise IngestError(f"subject {self.subject_id}: point {i} lies outside window")
        bad = (self.marks < 1) | (self.marks > n_types)
        if bad.any():
            i = int(np.flatnonzero(bad)[0])
            raise IngestError(
                f"subject {self.subject_id}: mark {self.marks[i]} at point {i} outside 1..{n_types}"
            )

    def __eq__(self, other):
        if not isinstance(other, MarkedPointPattern):
            return NotImplemented
        return (
            self.subject_id == other.subject_id
            and self.window == other.window
            and self.group == other.group
            and np.array_equal(self.xy, other.xy)
            and np.array_equal(self.marks, other.marks)
        )


def read_windows(path: str | PathLike) -> dict[str, Rectangle]:
    windows: dict[str, Rectangle] = {}
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        required = {"subject_id", "xmin", "xmax", "ymin", "ymax"}
        if reader.fieldnames is None or not required <= set(reader.fieldnames):
            raise IngestError(f"{path}: windows header must contain {sorted(required)}")
        for row_no, row in enumerate(reader, start=2):
            try:
                rect = Rectangle(
                    float(row["xmin"]), float(row["xmax"]), float(row["ymin"]), float(row["ymax"])
                )
            except (TypeError, ValueError) as exc:
                raise IngestError(f"{path}: row {row_no}: {exc}") from None
            windows[row["subject_id"]] = rect
    return windows


def load_patterns(
    points_file: str | PathLike,
    n_types: int,
    windows: Mapping[str, Rectangle] | None = None,
    windows_file: str | PathLike | None = None,
) -> list[MarkedPointPattern]:
    """Read a points CSV into one pattern per subject (order of first appearance).

    Every failure names the 1-based file row (the header is row 1).
    """
    if windows is None:
        if windows_file is None:
            raise IngestError("no windows given")
        windows = read_windows(windows_file)

    rows: dict[str, dict] = {}
    with open(points_file, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        fields = reader.fieldnames or []
        missing = {"subject_id", "x", "y", "type"} - set(fields)
        if missing:
            raise IngestError(f"{points_file}: header lacks {sorted(missing)}")
        has_group = "group" in fields
        for row_no, row in enumerate(reader, start=2):
            sid = row["subject_id"]
            if sid not in windows:
                raise IngestError(f"row {row_no}: no window for subject {sid!r}")
            win = windows[sid]
            try:
                x, y = float(row["x"]), float(row["y"])
                mark = int(row["type"])
            except (TypeError, ValueError) as exc:
                raise IngestError(f"row {row_no}: {exc}") from None
            if not (1 <= mark <= n_types):
                raise IngestError(f"row {row_no}: mark {mark} outside 1..{n_types}")
            if not win.contains(np.array([[x, y]]))[0]:
                raise IngestError(f"row {row_no}: point ({x}, {y}) outside window of {sid!r}")
            entry = rows.setdefault(sid, {"xy": [], "marks": [], "group": None})
            if has_group and row["group"] not in (None, ""):
                code = GROUP_CODES.get(row["group"].strip().lower())
                if code is None:
                    raise IngestError(f"row {row_no}: unrecognised group {row['group']!r}")
                if entry["group"] is not None and entry["group"] != code:
                    raise IngestError(f"row {row_no}: subject {sid!r} has conflicting groups")
                entry["group"] = code
            entry["xy"].append((x, y))
            entry["marks"].append(mark)

    return [
        MarkedPointPattern(
            sid,
            np.array(e["xy"], dtype=float).reshape(-1, 2),
            np.array(e["marks"], dtype=np.int64),
            windows[sid],
            e["group"],
            n_types,
        )
        for sid, e in rows.items()
    ]


def write_patterns(patterns, points_file, windows_file=None) -> None:
    """Write patterns back to the points CSV (and optionally the windows CSV)."""
    with_group = any(p.group is not None for p in patterns)
    with open(points_file, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "x", "y", "type"] + (["group"] if with_group else []))
        for p in patterns:
            g = [] if not with_group else ["" if p.group is None else str(p.group)]
            for (x, y), m in zip(p.xy, p.marks):
                w.writerow([p.subject_id, repr(float(x)), repr(float(y)), int(m)] + g)
    if windows_file is not None:
        with open(windows_file, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["subject_id", "xmin", "xmax", "ymin", "ymax"])
            for p in patterns:
                r = p.window
                w.writerow([p.subject_id, repr(r.xmin), repr(r.xmax), repr(r.ymin), repr(r.ymax)])
