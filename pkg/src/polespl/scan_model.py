"""Geometric types and the SPLS session file format.

Points are carried as ``(N, 3)`` float64 arrays rather than per-point
objects. A frame stores its points in the sensor frame; ``Pose`` maps
them into the z-up world frame by a yaw rotation followed by a
translation.
"""

from __future__ import annotations

import math
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional, Sequence, Tuple

import numpy as np


class FormatError(ValueError):
    """Raised for malformed session files or invalid session contents.

    ``location`` is a 1-based line number for text files and a byte
    offset for binary files.
    """

    def __init__(self, message: str, location: Optional[int] = None, unit: str = "line"):
        self.location = location
        self.unit = unit
        if location is not None:
            message = f"{message} ({unit} {location})"
        super().__init__(message)


def normalize_yaw(yaw: float) -> float:
    """Wrap an angle into (-pi, pi]."""
    wrapped = math.remainder(float(yaw), 2.0 * math.pi)
    if wrapped <= -math.pi:
        wrapped += 2.0 * math.pi
    return wrapped


@dataclass(frozen=True)
class Pose:
    """Sensor pose: world position and heading about +z."""

    x: float
    y: float
    z: float
    yaw: float

    def __post_init__(self):
        vals = tuple(float(v) for v in (self.x, self.y, self.z, self.yaw))
        for name, v in zip(("x", "y", "z"), vals):
            object.__setattr__(self, name, v)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError(f"pose must be finite, got {vals}")
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def position(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z])

    def rotation(self) -> np.ndarray:
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])

    def to_world(self, points: np.ndarray) -> np.ndarray:
        """Map sensor-frame points to the world frame."""
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return points @ self.rotation().T + self.position

    def to_sensor(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=float).reshape(-1, 3)
        return (points - self.position) @ self.rotation()

    def translated(self, dx: float, dy: float, dz: float = 0.0) -> "Pose":
        return Pose(self.x + dx, self.y + dy, self.z + dz, self.yaw)


@dataclass(frozen=True, eq=False)
class LidarFrame:
    frame_id: int
    timestamp: float
    sensor_pose: Pose
    points: np.ndarray = field(repr=False)

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if not np.all(np.isfinite(pts)):
            raise ValueError(f"frame {self.frame_id}: non-finite point coordinates")
        pts.setflags(write=False)
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "frame_id", int(self.frame_id))
        object.__setattr__(self, "timestamp", float(self.timestamp))

    @property
    def world_points(self) -> np.ndarray:
        return self.sensor_pose.to_world(self.points)

    def __eq__(self, other):
        if not isinstance(other, LidarFrame):
            return NotImplemented
        return (
            self.frame_id == other.frame_id
            and self.timestamp == other.timestamp
            and self.sensor_pose == other.sensor_pose
            and np.array_equal(self.points, other.points)
        )


@dataclass(frozen=True, eq=False)
class Session:
    """A sequence of frames from one traversal.

    ``ground_truth`` maps pole id to world (x, y) and is only present for
    synthetic sessions.
    """

    session_id: str
    frames: Tuple[LidarFrame, ...]
    ground_truth: Optional[Dict[int, Tuple[float, float]]] = None

    def __post_init__(self):
        frames = tuple(self.frames)
        if not frames:
            raise FormatError(f"session {self.session_id!r} has no frames")
        if any(ch.isspace() for ch in self.session_id) or not self.session_id:
            raise ValueError(f"session_id must be a non-empty token, got {self.session_id!r}")
        check_frame_order([f.frame_id for f in frames])
        object.__setattr__(self, "frames", frames)
        if self.ground_truth is not None:
            gt = {int(k): (float(v[0]), float(v[1])) for k, v in self.ground_truth.items()}
            xy = np.array(list(gt.values())).reshape(-1, 2)
            if len(xy) > 1:
                d = np.hypot(xy[:, None, 0] - xy[None, :, 0], xy[:, None, 1] - xy[None, :, 1])
                np.fill_diagonal(d, np.inf)
                if d.min() < 1.0:
                    raise ValueError("ground-truth poles must be at least 1 m apart")
            object.__setattr__(self, "ground_truth", gt)

    def frame(self, frame_id: int) -> LidarFrame:
        for f in self.frames:
            if f.frame_id == frame_id:
                return f
        raise KeyError(frame_id)

    def __eq__(self, other):
        if not isinstance(other, Session):
            return NotImplemented
        return (
            self.session_id == other.session_id
            and self.frames == other.frames
            and self.ground_truth == other.ground_truth
        )


def check_frame_order(frame_ids: Sequence[int], locations: Optional[Sequence[int]] = None, unit="line"):
    """Raise FormatError naming the first frame id that breaks strict increase."""
    for i in range(1, len(frame_ids)):
        if frame_ids[i] <= frame_ids[i - 1]:
            loc = locations[i] if locations is not None else None
            raise FormatError(
                f"frame_id {frame_ids[i]} does not increase after frame_id {frame_ids[i - 1]}",
                loc,
                unit,
            )


@dataclass(frozen=True)
class SynthConfig:
    """Synthetic world and sensor parameters.

    ``clutter_density`` counts clutter objects (walls and foliage blobs)
    per 100 m^2. ``angular_resolution`` is the azimuthal step in degrees;
    the elevation rings are fixed by ``num_rings`` and ``elevation_range``.
    """

    num_poles: int = 50
    area: Tuple[float, float] = (200.0, 200.0)
    pole_height: Tuple[float, float] = (2.5, 6.0)
    pole_radius: Tuple[float, float] = (0.05, 0.15)
    clutter_density: float = 0.5
    angular_resolution: float = 0.4
    max_range: float = 30.0
    noise_sigma: float = 0.02
    rng_seed: int = 0
    num_rings: int = 16
    elevation_range: Tuple[float, float] = (-15.0, 15.0)
    sensor_height: float = 1.8
    wall_fraction: float = 0.5

    def __post_init__(self):
        if self.num_poles < 1:
            raise ValueError("num_poles must be >= 1")
        if self.angular_resolution <= 0:
            raise ValueError("angular_resolution must be > 0")
        if self.max_range <= 0:
            raise ValueError("max_range must be > 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if self.clutter_density < 0:
            raise ValueError("clutter_density must be >= 0")
        if self.area[0] <= 0 or self.area[1] <= 0:
            raise ValueError("area sides must be positive")
        if not (0 < self.pole_radius[0] <= self.pole_radius[1]):
            raise ValueError("pole_radius range must be positive and ordered")
        if not (0 < self.pole_height[0] <= self.pole_height[1]):
            raise ValueError("pole_height range must be positive and ordered")
        if self.num_rings < 1:
            raise ValueError("num_rings must be >= 1")


# --- SPLS v1 file format --------------------------------------------------

_TEXT_MAGIC = "SPLS"
_BINARY_MAGIC = "SPLSB"
_VERSION = "1"


def write_session(session: Session, path, binary: Optional[bool] = None) -> None:
    """Write a session as SPLS v1 text, or the SPLSB binary variant.

    When ``binary`` is None the variant follows the file extension
    (``.splsb`` selects binary).
    """
    path = os.fspath(path)
    if binary is None:
        binary = path.endswith(".splsb")
    if binary:
        _write_binary(session, path)
    else:
        _write_text(session, path)


def _write_text(session: Session, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(f"{_TEXT_MAGIC} {_VERSION} {session.session_id} {len(session.frames)}\n")
        for fr in session.frames:
            p = fr.sensor_pose
            fh.write(
                f"F {fr.frame_id} {fr.timestamp!r} {p.x!r} {p.y!r} {p.z!r} {p.yaw!r} {len(fr.points)}\n"
            )
            if len(fr.points):
                # %.17g round-trips IEEE doubles exactly
                np.savetxt(fh, fr.points, fmt="%.17g")


def _write_binary(session: Session, path: str) -> None:
    with open(path, "wb") as fh:
        fh.write(f"{_BINARY_MAGIC} {_VERSION} {session.session_id} {len(session.frames)}\n".encode())
        for fr in session.frames:
            p = fr.sensor_pose
            rec = np.array(
                [fr.frame_id, fr.timestamp, p.x, p.y, p.z, p.yaw, len(fr.points)], dtype="<f8"
            )
            fh.write(rec.tobytes())
            fh.write(np.ascontiguousarray(fr.points, dtype="<f8").tobytes())


def read_session(path) -> Session:
    """Read an SPLS v1 session (text or binary, detected from the header)."""
    path = os.fspath(path)
    with open(path, "rb") as fh:
        data = fh.read()
    nl = data.find(b"\n")
    header = data[: nl if nl >= 0 else len(data)]
    try:
        tokens = header.decode("utf-8").split()
    except UnicodeDecodeError:
        raise FormatError("header is not valid UTF-8", 1) from None
    if len(tokens) != 4 or tokens[0] not in (_TEXT_MAGIC, _BINARY_MAGIC):
        raise FormatError(f"malformed header {header[:60]!r}", 1)
    magic, version, session_id, n_frames = tokens
    if version != _VERSION:
        raise FormatError(f"unsupported version {version!r}", 1)
    try:
        n_frames = int(n_frames)
    except ValueError:
        raise FormatError(f"frame count {n_frames!r} is not an integer", 1) from None
    if n_frames < 1:
        raise FormatError("session must contain at least one frame", 1)
    if magic == _BINARY_MAGIC:
        frames = _read_binary_frames(data, nl + 1, n_frames)
    else:
        frames = _read_text_frames(data.decode("utf-8"), n_frames)
    return Session(session_id, frames)


def _parse_float(tok: str, line_no: int) -> float:
    try:
        v = float(tok)
    except ValueError:
        raise FormatError(f"cannot parse number {tok!r}", line_no) from None
    if not math.isfinite(v):
        raise FormatError(f"non-finite value {tok!r}", line_no)
    return v


def _read_text_frames(text: str, n_frames: int):
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    frames, ids, locs = [], [], []
    i = 1
    for _ in range(n_frames):
        if i >= len(lines):
            raise FormatError(f"expected {n_frames} frames, file ended after {len(frames)}", i)
        tok = lines[i].split()
        line_no = i + 1
        if len(tok) != 8 or tok[0] != "F":
            raise FormatError(f"malformed frame record {lines[i][:60]!r}", line_no)
        try:
            frame_id = int(tok[1])
            n_pts = int(tok[7])
        except ValueError:
            raise FormatError("frame_id and num_points must be integers", line_no) from None
        if n_pts < 0:
            raise FormatError("negative point count", line_no)
        ts, px, py, pz, yaw = (_parse_float(t, line_no) for t in tok[2:7])
        block = lines[i + 1 : i + 1 + n_pts]
        if len(block) != n_pts:
            raise FormatError(f"frame {frame_id}: expected {n_pts} points", line_no)
        if n_pts:
            try:
                pts = np.array(" ".join(block).split(), dtype=np.float64)
            except ValueError:
                pts = None
            if pts is None or pts.size != 3 * n_pts:
                for k, ln in enumerate(block):
                    parts = ln.split()
                    if len(parts) != 3:
                        raise FormatError("point line must have 3 values", i + 2 + k)
                    for p in parts:
                        _parse_float(p, i + 2 + k)
                raise FormatError("malformed point block", line_no)
            pts = pts.reshape(n_pts, 3)
            bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
            if bad.size:
                raise FormatError("non-finite point coordinate", i + 2 + int(bad[0]))
        else:
            pts = np.zeros((0, 3))
        ids.append(frame_id)
        locs.append(line_no)
        frames.append(LidarFrame(frame_id, ts, Pose(px, py, pz, yaw), pts))
        i += 1 + n_pts
    if i != len(lines):
        raise FormatError("trailing data after last frame", i + 1)
    check_frame_order(ids, locs)
    return frames


_REC = struct.Struct("<7d")


def _read_binary_frames(data: bytes, offset: int, n_frames: int):
    frames, ids, locs = [], [], []
    for _ in range(n_frames):
        if offset + _REC.size > len(data):
            raise FormatError("truncated frame record", offset, "offset")
        rec = _REC.unpack_from(data, offset)
        if not all(math.isfinite(v) for v in rec):
            raise FormatError("non-finite value in frame record", offset, "offset")
        frame_id, ts, px, py, pz, yaw, n_pts = rec
        if frame_id != int(frame_id) or n_pts != int(n_pts) or n_pts < 0:
            raise FormatError("frame_id and num_points must be integral", offset, "offset")
        start = offset + _REC.size
        end = start + 24 * int(n_pts)
        if end > len(data):
            raise FormatError(f"frame {int(frame_id)}: truncated point block", start, "offset")
        pts = np.frombuffer(data, dtype="<f8", count=3 * int(n_pts), offset=start).reshape(-1, 3)
        bad = np.flatnonzero(~np.isfinite(pts).all(axis=1))
        if bad.size:
            raise FormatError("non-finite point coordinate", start + 24 * int(bad[0]), "offset")
        ids.append(int(frame_id))
        locs.append(offset)
        frames.append(LidarFrame(int(frame_id), ts, Pose(px, py, pz, yaw), pts.astype(np.float64)))
        offset = end
    if offset != len(data):
        raise FormatError("trailing data after last frame", offset, "offset")
    check_frame_order(ids, locs, "offset")
    return frames
