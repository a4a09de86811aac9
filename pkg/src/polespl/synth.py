"""Synthetic pole world and a ray-cast spinning LiDAR.

The world holds vertical cylinders (poles) standing on z = 0, thick
vertical wall segments (rectangular footprint), and axis-aligned
ellipsoidal foliage blobs. The sensor is
a single 360 degree sweep of ``num_rings`` elevation rings sampled every
``angular_resolution`` degrees in azimuth, so the number of returns from
a pole falls off with range the way it does on a real spinning scanner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .scan_model import LidarFrame, Pose, Session, SynthConfig

POLE_CLEARANCE = 1.2  # min gap between clutter and any pole surface [m]
_EPS = 1e-9


class PlacementError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class World:
    """Static scene geometry.

    poles:  (P, 4) columns x, y, radius, height
    walls:  (W, 6) columns x0, y0, x1, y1, height, thickness
    blobs:  (B, 6) columns cx, cy, cz, ax, ay, az
    """

    poles: np.ndarray
    walls: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))
    blobs: np.ndarray = field(default_factory=lambda: np.zeros((0, 6)))

    @property
    def ground_truth(self) -> Dict[int, Tuple[float, float]]:
        return {i: (float(x), float(y)) for i, (x, y) in enumerate(self.poles[:, :2])}

    def __eq__(self, other):
        if not isinstance(other, World):
            return NotImplemented
        return (
            np.array_equal(self.poles, other.poles)
            and np.array_equal(self.walls, other.walls)
            and np.array_equal(self.blobs, other.blobs)
        )


def _seg_point_dist(seg: np.ndarray, pts: np.ndarray) -> np.ndarray:
    """Distance from each point (N, 2) to the segment (x0, y0, x1, y1)."""
    a, b = seg[:2], seg[2:4]
    ab = b - a
    t = np.clip(((pts - a) @ ab) / max(ab @ ab, _EPS), 0.0, 1.0)
    proj = a + t[:, None] * ab
    return np.hypot(*(pts - proj).T)


def generate_world(cfg: SynthConfig, min_separation: float = 3.0) -> World:
    """Place poles and clutter; a pure function of ``cfg``.

    Raises PlacementError when the area cannot hold ``num_poles`` poles
    with ``min_separation`` metres between centres.
    """
    rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0x5EED, 1]))
    w, h = cfg.area
    margin = cfg.pole_radius[1]
    poles: List[Tuple[float, float, float, float]] = []
    xy = np.zeros((0, 2))
    attempts = 0
    max_attempts = 2000 * cfg.num_poles
    while len(poles) < cfg.num_poles:
        attempts += 1
        if attempts > max_attempts:
            raise PlacementError(
                f"could not place {cfg.num_poles} poles in a {w} x {h} m area with "
                f"pairwise separation >= {min_separation} m (placed {len(poles)})"
            )
        p = rng.uniform([margin, margin], [w - margin, h - margin])
        if len(xy) and np.min(np.hypot(*(xy - p).T)) < min_separation:
            continue
        r = rng.uniform(*cfg.pole_radius)
        ht = rng.uniform(*cfg.pole_height)
        poles.append((p[0], p[1], r, ht))
        xy = np.vstack([xy, p])
    poles_arr = np.array(poles)

    n_clutter = int(round(cfg.clutter_density * w * h / 100.0))
    walls, blobs = [], []
    for _ in range(n_clutter):
        is_wall = rng.uniform() < cfg.wall_fraction
        for _try in range(50):
            if is_wall:
                a = rng.uniform([0, 0], [w, h])
                length = rng.uniform(2.0, 10.0)
                ang = rng.uniform(0, math.pi)
                b = a + length * np.array([math.cos(ang), math.sin(ang)])
                seg = np.array([a[0], a[1], b[0], b[1]])
                thick = rng.uniform(0.8, 1.2)
                d = _seg_point_dist(seg, poles_arr[:, :2]) - poles_arr[:, 2] - 0.5 * thick
                if np.all(d >= POLE_CLEARANCE):
                    walls.append((*seg, rng.uniform(1.5, 3.5), thick))
                    break
            else:
                c = rng.uniform([0, 0], [w, h])
                axes = rng.uniform(0.4, 1.5, size=3)
                cz = rng.uniform(axes[2] + 0.2, axes[2] + 3.5)
                reach = np.hypot(*(poles_arr[:, :2] - c).T) - poles_arr[:, 2] - max(axes[0], axes[1])
                if np.all(reach >= POLE_CLEARANCE):
                    blobs.append((c[0], c[1], cz, *axes))
                    break
    return World(
        poles_arr,
        np.array(walls).reshape(-1, 6),
        np.array(blobs).reshape(-1, 6),
    )


@dataclass(frozen=True)
class Beams:
    """Beam directions of the sensor in its own frame."""

    azimuth: np.ndarray  # (A,) radians
    elevation: np.ndarray  # (E,) radians


def sensor_beams(cfg: SynthConfig) -> Beams:
    n_az = int(round(360.0 / cfg.angular_resolution))
    az = np.arange(n_az) * math.radians(cfg.angular_resolution)
    lo, hi = cfg.elevation_range
    el = np.radians(np.linspace(lo, hi, cfg.num_rings)) if cfg.num_rings > 1 else np.radians([0.5 * (lo + hi)])
    return Beams(az, el)


def _cast_poles(o, dx, dy, tan_e, cos_e, poles):
    cx = poles[:, 0] - o[0]
    cy = poles[:, 1] - o[1]
    b = dx[:, None] * cx + dy[:, None] * cy
    perp2 = cx * cx + cy * cy - b * b
    disc = poles[:, 2] ** 2 - perp2
    sq = np.sqrt(np.maximum(disc, 0.0))
    t_in, t_out = b - sq, b + sq
    th = np.where(t_in > _EPS, t_in, np.where(t_out > _EPS, t_out, np.inf))
    th[disc < 0] = np.inf
    return _vertical_hits(o, th, tan_e, cos_e, poles[:, 3])


def wall_faces(walls: np.ndarray) -> np.ndarray:
    """Split thick walls into their four vertical faces, (4W, 5)."""
    a, b = walls[:, 0:2], walls[:, 2:4]
    along = b - a
    along /= np.maximum(np.linalg.norm(along, axis=1, keepdims=True), _EPS)
    off = 0.5 * walls[:, 5:6] * np.column_stack([-along[:, 1], along[:, 0]])
    c = [a + off, b + off, b - off, a - off]
    h = walls[:, 4:5]
    faces = [np.hstack([c[k], c[(k + 1) % 4], h]) for k in range(4)]
    return np.concatenate(faces, axis=0)


def _cast_walls(o, dx, dy, tan_e, cos_e, walls):
    """Cast against wall faces given as (x0, y0, x1, y1, height) rows."""
    px = walls[:, 0] - o[0]
    py = walls[:, 1] - o[1]
    ex = walls[:, 2] - walls[:, 0]
    ey = walls[:, 3] - walls[:, 1]
    denom = dx[:, None] * ey - dy[:, None] * ex
    with np.errstate(divide="ignore", invalid="ignore"):
        t = (px * ey - py * ex) / denom
        s = (px * dy[:, None] - py * dx[:, None]) / denom
    ok = (np.abs(denom) > 1e-12) & (t > _EPS) & (s >= 0.0) & (s <= 1.0)
    th = np.where(ok, t, np.inf)
    return _vertical_hits(o, th, tan_e, cos_e, walls[:, 4])


def _vertical_hits(o, th, tan_e, cos_e, heights):
    """Turn horizontal hit distances (A, K) into 3D ranges (A, E)."""
    with np.errstate(invalid="ignore"):  # inf * 0 on a level ring; masked below
        z = o[2] + th[:, :, None] * tan_e[None, None, :]
    hit = np.isfinite(th)[:, :, None] & (z >= 0.0) & (z <= heights[None, :, None])
    rng3 = np.where(hit, th[:, :, None] / cos_e[None, None, :], np.inf)
    return rng3.min(axis=1)


def _cast_blobs(o, dirs, blobs):
    axes = blobs[:, 3:6]
    os_ = (o[None, :] - blobs[:, :3]) / axes  # (K, 3)
    us = dirs[:, :, None, :] / axes[None, None, :, :]  # (A, E, K, 3)
    a = np.einsum("aekc,aekc->aek", us, us)
    b = 2.0 * np.einsum("aekc,kc->aek", us, os_)
    c = np.einsum("kc,kc->k", os_, os_) - 1.0
    disc = b * b - 4.0 * a * c[None, None, :]
    sq = np.sqrt(np.maximum(disc, 0.0))
    t0 = (-b - sq) / (2.0 * a)
    t1 = (-b + sq) / (2.0 * a)
    t = np.where(t0 > _EPS, t0, np.where(t1 > _EPS, t1, np.inf))
    t[disc < 0] = np.inf
    return t.min(axis=2)


def cast_frame(world: World, pose: Pose, cfg: SynthConfig, rng: np.random.Generator) -> np.ndarray:
    """Ray-cast one sweep and return noisy sensor-frame points (N, 3)."""
    beams = sensor_beams(cfg)
    o = pose.position
    phi = beams.azimuth + pose.yaw
    dx, dy = np.cos(phi), np.sin(phi)
    tan_e, cos_e, sin_e = np.tan(beams.elevation), np.cos(beams.elevation), np.sin(beams.elevation)
    best = np.full((len(phi), len(tan_e)), np.inf)

    poles = world.poles
    if len(poles):
        near = np.hypot(poles[:, 0] - o[0], poles[:, 1] - o[1]) <= cfg.max_range + poles[:, 2]
        if near.any():
            best = np.minimum(best, _cast_poles(o, dx, dy, tan_e, cos_e, poles[near]))
    walls = world.walls
    if len(walls):
        reach = np.array([_seg_point_dist(wl[:4], o[None, :2])[0] for wl in walls]) - walls[:, 5]
        near = reach <= cfg.max_range
        if near.any():
            best = np.minimum(best, _cast_walls(o, dx, dy, tan_e, cos_e, wall_faces(walls[near])))
    blobs = world.blobs
    if len(blobs):
        reach = np.linalg.norm(blobs[:, :3] - o, axis=1) - blobs[:, 3:6].max(axis=1)
        near = reach <= cfg.max_range
        if near.any():
            dirs = np.stack(
                [cos_e[None, :] * dx[:, None], cos_e[None, :] * dy[:, None], np.broadcast_to(sin_e, best.shape)],
                axis=-1,
            )
            best = np.minimum(best, _cast_blobs(o, dirs, blobs[near]))

    # one normal draw per beam keeps the stream independent of the scene
    noisy = best + cfg.noise_sigma * rng.standard_normal(best.shape)
    keep = (best <= cfg.max_range) & (noisy <= cfg.max_range) & (noisy > 0.0)
    ai, ei = np.nonzero(keep)
    r = noisy[ai, ei]
    az = beams.azimuth[ai]
    el = beams.elevation[ei]
    return np.column_stack([r * np.cos(el) * np.cos(az), r * np.cos(el) * np.sin(az), r * np.sin(el)])


def simulate_traverse(
    world: World,
    trajectory: Sequence[Pose],
    cfg: SynthConfig,
    session_id: str = "traverse",
    first_frame_id: int = 0,
    frame_period: float = 0.1,
) -> Session:
    """Scan ``world`` from every pose of ``trajectory``.

    Frame ids are consecutive from ``first_frame_id``. Each frame's noise
    stream is seeded from ``(cfg.rng_seed, frame_id)`` only.
    """
    if len(trajectory) == 0:
        raise ValueError("trajectory must contain at least one pose")
    frames = []
    for k, pose in enumerate(trajectory):
        fid = first_frame_id + k
        rng = np.random.default_rng(np.random.SeedSequence([cfg.rng_seed, 0x5CA7, fid]))
        pts = cast_frame(world, pose, cfg, rng)
        frames.append(LidarFrame(fid, fid * frame_period, pose, pts))
    return Session(session_id, frames, ground_truth=world.ground_truth)


def lawnmower(
    area: Tuple[float, float],
    lane_spacing: float,
    step: float,
    sensor_height: float,
    along: str = "x",
    offset: float = 0.0,
) -> List[Pose]:
    """Boustrophedon trajectory covering ``area``.

    ``along`` picks the long-lane axis; lanes sit at
    ``offset + lane_spacing * (k + 1/2)`` on the other axis.
    """
    w, h = area
    long_len, cross_len = (w, h) if along == "x" else (h, w)
    lanes = np.arange(offset + 0.5 * lane_spacing, cross_len, lane_spacing)
    n = int(math.floor(long_len / step)) + 1
    ts = np.arange(n) * step
    poses: List[Pose] = []
    for k, c in enumerate(lanes):
        forward = k % 2 == 0
        seq = ts if forward else ts[::-1]
        heading = 0.0 if forward else math.pi
        for t in seq:
            if along == "x":
                poses.append(Pose(float(t), float(c), sensor_height, heading))
            else:
                poses.append(Pose(float(c), float(t), sensor_height, heading + math.pi / 2))
    return poses
