"""Pole-centric cylindrical projection ("Pole-Image").

The neighbourhood of a pole is expressed in cylindrical coordinates
around the pole axis and binned into a ``num_rows x num_cols`` image:
rows bin the radial distance over [0, r_max], columns bin the azimuth
over [0, 2 pi), and z acts only as a band-pass filter. A rotation of the
scene about the pole axis by a whole number of columns therefore shifts
the image circularly along the column axis.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .pole_detect import PoleDetection
from .scan_model import LidarFrame

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class ProjectionConfig:
    num_rows: int = 80
    num_cols: int = 360
    r_max: float = 10.0
    z_min: float = -1.0
    z_max: float = 7.0
    value_mode: str = "occupancy-count"

    def __post_init__(self):
        if self.num_rows < 1 or self.num_cols < 1:
            raise ValueError("image dimensions must be >= 1")
        if self.r_max <= 0:
            raise ValueError("r_max must be > 0")
        if self.z_max <= self.z_min:
            raise ValueError("z_max must exceed z_min")
        if self.value_mode != "occupancy-count":
            raise ValueError(f"unsupported value_mode {self.value_mode!r}")


@dataclass(frozen=True, eq=False)
class PoleImage:
    pixels: np.ndarray = field(repr=False)
    track_id: Optional[int] = None
    range: float = 0.0
    pole_point_count: int = 0

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float64)
        if px.ndim != 2:
            raise ValueError("pixels must be a 2D array")
        if px.size and (px.min() < 0.0 or px.max() > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def shape(self):
        return self.pixels.shape


def to_cylindrical(points: np.ndarray, centroid) -> np.ndarray:
    """World points (N, 3) -> (N, 3) array of (r, theta, z) about ``centroid``.

    theta is in [0, 2 pi), counterclockwise from world +x; a point on
    the axis gets r = 0 and theta = 0.
    """
    cx, cy = float(centroid[0]), float(centroid[1])
    if not (math.isfinite(cx) and math.isfinite(cy)):
        raise ValueError("centroid must be finite")
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    dx = pts[:, 0] - cx
    dy = pts[:, 1] - cy
    r = np.hypot(dx, dy)
    theta = np.mod(np.arctan2(dy, dx), TWO_PI)
    # mod can round a tiny negative angle up to exactly 2 pi
    theta[theta >= TWO_PI] = 0.0
    return np.column_stack([r, theta, pts[:, 2]])


def rasterize(cyl_points: np.ndarray, cfg: ProjectionConfig = ProjectionConfig(), **meta) -> PoleImage:
    """Bin cylindrical points into a normalised occupancy image."""
    cyl = np.asarray(cyl_points, dtype=np.float64).reshape(-1, 3)
    r, th, z = cyl[:, 0], cyl[:, 1], cyl[:, 2]
    keep = (r <= cfg.r_max) & (z >= cfg.z_min) & (z <= cfg.z_max)
    r, th = r[keep], th[keep]
    counts = np.zeros((cfg.num_rows, cfg.num_cols))
    if len(r):
        row = np.minimum(np.floor(cfg.num_rows * r / cfg.r_max).astype(np.int64), cfg.num_rows - 1)
        col = np.minimum(np.floor(cfg.num_cols * th / TWO_PI).astype(np.int64), cfg.num_cols - 1)
        np.add.at(counts, (row, col), 1.0)
        counts /= counts.max()
    return PoleImage(counts, **meta)


def neighborhood_of(detection: PoleDetection, frame: LidarFrame, cfg: ProjectionConfig = ProjectionConfig()) -> np.ndarray:
    """All frame points within ``r_max`` (horizontally) of the pole, world frame."""
    world = frame.world_points
    cx, cy = detection.centroid_world
    d = np.hypot(world[:, 0] - cx, world[:, 1] - cy)
    return world[d <= cfg.r_max]


def pole_image(detection: PoleDetection, frame: LidarFrame, cfg: ProjectionConfig = ProjectionConfig(),
               track_id: Optional[int] = None) -> PoleImage:
    pts = neighborhood_of(detection, frame, cfg)
    cyl = to_cylindrical(pts, detection.centroid_world)
    return rasterize(cyl, cfg, track_id=track_id, range=detection.range, pole_point_count=detection.point_count)


# --- PGM (P5) dump --------------------------------------------------------

def to_gray8(pixels: np.ndarray) -> np.ndarray:
    # round half away from zero; values are non-negative so floor(x + 0.5)
    return np.floor(255.0 * np.asarray(pixels) + 0.5).astype(np.uint8)


def write_pgm(image, path) -> None:
    pixels = image.pixels if isinstance(image, PoleImage) else np.asarray(image)
    data = to_gray8(pixels)
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_pgm(path) -> np.ndarray:
    """Read a binary PGM written by ``write_pgm``; returns uint8 (H, W)."""
    with open(path, "rb") as fh:
        data = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{os.fspath(path)}: not a binary PGM")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{os.fspath(path)}: unsupported maxval {maxval}")
    pos += 1
    arr = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos)
    return arr.reshape(h, w)


def pgm_name(session_id: str, track_id: int, frame_id: int) -> str:
    return f"{session_id}_{track_id}_{frame_id}.pgm"
