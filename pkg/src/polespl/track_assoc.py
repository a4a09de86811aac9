"""Multi-frame association of pole detections into tracks.

Poles are static, so a track is summarised by the running mean of its
member centroids (the anchor). Each frame, detections are matched to
active tracks greedily in ascending anchor distance, subject to a gate
that widens linearly with the detection's range.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np

from .pole_detect import PoleDetection, range_of
from .scan_model import LidarFrame, Pose


class OrderingError(ValueError):
    pass


@dataclass(frozen=True)
class GatingConfig:
    base_gate: float = 0.5
    range_gain: float = 0.02
    max_missed_frames: int = 10

    def __post_init__(self):
        if self.base_gate <= 0:
            raise ValueError("base_gate must be > 0")
        if self.range_gain < 0:
            raise ValueError("range_gain must be >= 0")
        if self.max_missed_frames < 0:
            raise ValueError("max_missed_frames must be >= 0")


def gate_radius(range_m: float, cfg: GatingConfig = GatingConfig()) -> float:
    """Association gate for a detection observed at ``range_m`` metres."""
    if range_m < 0:
        raise ValueError("range must be >= 0")
    return cfg.base_gate + cfg.range_gain * range_m


@dataclass(eq=False)
class Track:
    track_id: int
    detections: List[PoleDetection] = field(default_factory=list)
    missed: int = 0
    state: str = "active"
    _sum: np.ndarray = field(default_factory=lambda: np.zeros(2), repr=False)

    @property
    def anchor(self) -> tuple:
        n = len(self.detections)
        return (float(self._sum[0] / n), float(self._sum[1] / n))

    def add(self, det: PoleDetection) -> None:
        self.detections.append(det)
        self._sum = self._sum + np.asarray(det.centroid_world, dtype=float)
        self.missed = 0

    def __len__(self):
        return len(self.detections)


class Tracker:
    """Owns the track table for one session; feed it frames in order."""

    def __init__(self, cfg: GatingConfig = GatingConfig()):
        self.cfg = cfg
        self.tracks: List[Track] = []
        self.last_frame_id: Optional[int] = None
        self._next_id = 0

    @property
    def active(self) -> List[Track]:
        return [t for t in self.tracks if t.state == "active"]

    def update(self, frame_id: int, detections: Sequence[PoleDetection], sensor_pose: Optional[Pose] = None) -> None:
        """Associate one frame's detections.

        Gate ranges come from ``sensor_pose`` when given, otherwise from
        each detection's stored range.
        """
        if self.last_frame_id is not None and frame_id <= self.last_frame_id:
            raise OrderingError(f"frame {frame_id} is not later than frame {self.last_frame_id}")
        for d in detections:
            if d.frame_id != frame_id:
                raise OrderingError(f"detection from frame {d.frame_id} passed with frame {frame_id}")
        self.last_frame_id = frame_id

        active = self.active
        matched_tracks, matched_dets = set(), set()
        if active and detections:
            anchors = np.array([t.anchor for t in active])
            cents = np.array([d.centroid_world for d in detections])
            dist = np.hypot(anchors[:, None, 0] - cents[None, :, 0], anchors[:, None, 1] - cents[None, :, 1])
            ranges = [d.range if sensor_pose is None else range_of(d, sensor_pose) for d in detections]
            gates = np.array([gate_radius(r, self.cfg) for r in ranges])
            ti, di = np.nonzero(dist <= gates[None, :])
            # ascending distance; ties go to the lower detection index, then lower track
            order = np.lexsort((ti, di, dist[ti, di]))
            for k in order:
                t, d = int(ti[k]), int(di[k])
                if t in matched_tracks or d in matched_dets:
                    continue
                active[t].add(detections[d])
                matched_tracks.add(t)
                matched_dets.add(d)
        for t, trk in enumerate(active):
            if t not in matched_tracks:
                trk.missed += 1
                if trk.missed > self.cfg.max_missed_frames:
                    trk.state = "closed"
        for d, det in enumerate(detections):
            if d not in matched_dets:
                trk = Track(self._next_id)
                trk.add(det)
                self._next_id += 1
                self.tracks.append(trk)

    def close_all(self) -> None:
        for t in self.tracks:
            t.state = "closed"


def update_tracks(
    tracker: Tracker,
    detections: Sequence[PoleDetection],
    sensor_pose: Pose,
    frame_id: Optional[int] = None,
) -> Tracker:
    """Advance ``tracker`` by one frame and return it.

    The frame id defaults to that of the detections and must be given
    for a frame without any.
    """
    if frame_id is None:
        if not detections:
            raise ValueError("frame_id is required when there are no detections")
        frame_id = detections[0].frame_id
    tracker.update(frame_id, detections, sensor_pose)
    return tracker


@dataclass(frozen=True, eq=False)
class LabeledObservation:
    track_id: int
    frame_id: int
    detection: PoleDetection
    range: float
    pole_point_count: int
    frame: Optional[LidarFrame] = None


def export_labels(
    tracks: Sequence[Track],
    min_track_len: int = 3,
    frames: Optional[Dict[int, LidarFrame]] = None,
) -> List[LabeledObservation]:
    """One labelled observation per (track, frame) membership.

    Tracks shorter than ``min_track_len`` are dropped. ``frames`` maps
    frame id to frame so each observation keeps its scan context.
    """
    out = []
    for trk in tracks:
        if len(trk.detections) < min_track_len:
            continue
        for d in trk.detections:
            out.append(
                LabeledObservation(
                    trk.track_id,
                    d.frame_id,
                    d,
                    d.range,
                    d.point_count,
                    None if frames is None else frames[d.frame_id],
                )
            )
    return out


def write_tracks_csv(tracks: Sequence[Track], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["track_id", "frame_id", "centroid_x", "centroid_y", "range", "point_count"])
        for trk in tracks:
            for d in trk.detections:
                w.writerow(
                    [trk.track_id, d.frame_id, repr(d.centroid_world[0]), repr(d.centroid_world[1]), repr(d.range), d.point_count]
                )


# --- ground-truth audit (synthetic sessions) ------------------------------

def nearest_pole(xy, ground_truth: Dict[int, tuple], max_dist: float = 1.0) -> Optional[int]:
    best, best_d = None, max_dist
    for pid, (gx, gy) in ground_truth.items():
        d = math.hypot(xy[0] - gx, xy[1] - gy)
        if d <= best_d:
            best, best_d = pid, d
    return best


def label_audit(tracks: Sequence[Track], ground_truth: Dict[int, tuple], min_track_len: int = 3,
                max_dist: float = 1.0, min_pole_separation: float = 0.0) -> dict:
    """Compare exported track labels with ground-truth pole identities.

    A track is attributed to the pole holding the majority of its
    detections (None for detections farther than ``max_dist`` from every
    pole). An observation is pure when its own pole matches its track's
    pole and that pole is not None. An identity switch is a consecutive
    pair of detections in one track attributed to different poles; only
    tracks whose pole has no neighbour closer than ``min_pole_separation``
    are counted.
    """
    gt_xy = np.array(list(ground_truth.values()))
    ids = list(ground_truth.keys())
    if len(gt_xy) > 1:
        dd = np.hypot(gt_xy[:, None, 0] - gt_xy[None, :, 0], gt_xy[:, None, 1] - gt_xy[None, :, 1])
        np.fill_diagonal(dd, np.inf)
        nn = dict(zip(ids, dd.min(axis=1)))
    else:
        nn = {i: np.inf for i in ids}
    n_obs = n_pure = switches = 0
    false_tracks = 0
    for trk in tracks:
        if len(trk.detections) < min_track_len:
            continue
        labels = [nearest_pole(d.centroid_world, ground_truth, max_dist) for d in trk.detections]
        counts: Dict[Optional[int], int] = {}
        for lab in labels:
            counts[lab] = counts.get(lab, 0) + 1
        major = max(counts, key=lambda k: (counts[k], k is not None))
        if major is None:
            false_tracks += 1
        n_obs += len(labels)
        n_pure += sum(1 for lab in labels if lab is not None and lab == major)
        if major is not None and nn[major] >= min_pole_separation:
            switches += sum(1 for a, b in zip(labels, labels[1:]) if a != b)
    return {
        "observations": n_obs,
        "purity": n_pure / n_obs if n_obs else float("nan"),
        "id_switches": switches,
        "false_tracks": false_tracks,
    }
