"""Geometric pole detector.

Points are binned on an (x, y) grid in the sensor frame, each cell
recording which vertical slabs it occupies. Occupied cells are grouped
into 4-connected clusters; a cluster is reported as a pole when its
points cover at least ``min_slabs`` consecutive slabs, its horizontal
footprint is small and no foreign points lie within ``isolation_radius``
of its centre.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import List, Sequence

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.spatial.distance import pdist

from .scan_model import LidarFrame, Pose


@dataclass(frozen=True)
class DetectorConfig:
    xy_cell: float = 0.2
    z_slab: float = 0.5
    min_slabs: int = 3
    max_footprint: float = 0.6
    min_points: int = 3
    isolation_radius: float = 1.0

    def __post_init__(self):
        for name in ("xy_cell", "z_slab", "min_slabs", "max_footprint", "min_points", "isolation_radius"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.max_footprint < self.xy_cell:
            raise ValueError("max_footprint must be >= xy_cell")


@dataclass(frozen=True, eq=False)
class PoleDetection:
    frame_id: int
    centroid_world: tuple
    range: float
    pole_points: np.ndarray = field(repr=False)

    @property
    def point_count(self) -> int:
        return len(self.pole_points)


def range_of(detection: PoleDetection, sensor_pose: Pose) -> float:
    """Horizontal distance from the sensor to the detection centroid."""
    cx, cy = detection.centroid_world
    return math.hypot(cx - sensor_pose.x, cy - sensor_pose.y)


def _max_consecutive_run(cell_ids: np.ndarray, slabs: np.ndarray, n_cells: int) -> np.ndarray:
    """Longest run of consecutive slab indices per cell.

    ``cell_ids`` and ``slabs`` describe unique (cell, slab) pairs sorted
    by cell then slab.
    """
    starts = np.ones(len(slabs), dtype=bool)
    starts[1:] = (cell_ids[1:] != cell_ids[:-1]) | (slabs[1:] != slabs[:-1] + 1)
    run_id = np.cumsum(starts) - 1
    run_len = np.bincount(run_id)
    best = np.zeros(n_cells, dtype=np.int64)
    np.maximum.at(best, cell_ids[starts], run_len)
    return best


def _footprint_ok(xy: np.ndarray, max_footprint: float) -> bool:
    span = xy.max(axis=0) - xy.min(axis=0)
    if span.max() > max_footprint:
        return False
    if math.hypot(*span) <= max_footprint:
        return True
    return pdist(xy).max() <= max_footprint


def detect_poles(frame: LidarFrame, cfg: DetectorConfig = DetectorConfig()) -> List[PoleDetection]:
    """Detect vertical pole-like clusters in one frame.

    Returns detections sorted by ascending horizontal range. Each point
    belongs to at most one detection.
    """
    pts = frame.points
    if len(pts) == 0:
        return []
    ij = np.floor(pts[:, :2] / cfg.xy_cell).astype(np.int64)
    slab = np.floor(pts[:, 2] / cfg.z_slab).astype(np.int64)
    ij0 = ij.min(axis=0)
    ij -= ij0
    shape = tuple(ij.max(axis=0) + 1)
    flat_cell = np.ravel_multi_index((ij[:, 0], ij[:, 1]), shape)

    cells = np.unique(flat_cell)
    grid = np.zeros(shape, dtype=bool)
    grid.flat[cells] = True
    labels, n_lab = ndimage.label(grid)  # default structure is 4-connected
    point_label = labels.flat[flat_cell]

    # verticality is judged on the whole cluster: a thin pole seen from
    # afar scatters its few returns over neighbouring cells
    pairs = np.unique(np.column_stack([point_label, slab - slab.min()]), axis=0)
    runs = _max_consecutive_run(pairs[:, 0], pairs[:, 1], n_lab + 1)
    has_cand = runs >= cfg.min_slabs
    if not has_cand.any():
        return []
    tree = cKDTree(pts[:, :2])

    world = frame.sensor_pose.to_world(pts)
    pose = frame.sensor_pose
    found = []
    order = np.argsort(point_label, kind="stable")
    bounds = np.searchsorted(point_label[order], np.arange(1, n_lab + 2))
    for lab in range(n_lab):
        if not has_cand[lab + 1]:
            continue
        members = order[bounds[lab] : bounds[lab + 1]]
        if len(members) < cfg.min_points:
            continue
        wp = world[members]
        if not _footprint_ok(wp[:, :2], cfg.max_footprint):
            continue
        near = tree.query_ball_point(pts[members, :2].mean(axis=0), cfg.isolation_radius)
        if len(near) != len(members):
            continue
        cx, cy = wp[:, 0].mean(), wp[:, 1].mean()
        rng = math.hypot(cx - pose.x, cy - pose.y)
        found.append(PoleDetection(frame.frame_id, (float(cx), float(cy)), rng, wp))
    found.sort(key=lambda d: d.range)
    return found


def write_detections_csv(detections: Sequence[PoleDetection], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["frame_id", "centroid_x", "centroid_y", "range", "point_count"])
        for d in detections:
            w.writerow([d.frame_id, repr(d.centroid_world[0]), repr(d.centroid_world[1]), repr(d.range), d.point_count])
