"""End-to-end stages: synthesise, label, rasterise, train, evaluate.

Each stage reads and writes plain files so it can be rerun on its own.
Stage seeds are derived from one global seed by hashing the stage name.
"""

from __future__ import annotations

import configparser
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import encoder as enc
from .pole_detect import DetectorConfig, detect_poles, write_detections_csv
from .pole_image import ProjectionConfig, pgm_name, pole_image, read_pgm, write_pgm
from .retrieval import (
    DEFAULT_BINS,
    Query,
    RetrievalReport,
    build_database,
    match_landmarks,
    parse_bins,
    recall_report,
    select_queries,
    write_report_csv,
    write_report_json,
)
from .scan_model import Pose, Session, SynthConfig, read_session, write_session
from .synth import generate_world, lawnmower, simulate_traverse
from .track_assoc import GatingConfig, Tracker, export_labels, write_tracks_csv


def derive_seed(seed: int, stage: str) -> int:
    """64-bit stage seed from the global seed and a stage name."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass(frozen=True)
class TrajectoryConfig:
    lane_spacing: float = 25.0
    step: float = 2.0


@dataclass(frozen=True)
class RetrievalConfig:
    max_pole_points: int = 10
    min_track_len: int = 3
    match_radius: float = 1.0
    bins: str = "[0,5],(5,10],(10,inf)"


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    world_seed: Optional[int] = None  # pins the pole layout across seeds
    synth: SynthConfig = field(default_factory=SynthConfig)
    trajectory: TrajectoryConfig = field(default_factory=TrajectoryConfig)
    detector: DetectorConfig = field(default_factory=DetectorConfig)
    gating: GatingConfig = field(default_factory=GatingConfig)
    projection: ProjectionConfig = field(default_factory=ProjectionConfig)
    train: enc.TrainConfig = field(default_factory=enc.TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)


_SECTIONS = {
    "synth": "synth",
    "trajectory": "trajectory",
    "detector": "detector",
    "gating": "gating",
    "projection": "projection",
    "train": "train",
    "retrieval": "retrieval",
}


class ConfigError(ValueError):
    pass


def _coerce(text: str, current):
    if isinstance(current, bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"not a boolean: {text!r}")
    if isinstance(current, tuple):
        parts = [p for p in text.replace(",", " ").split() if p]
        return tuple(float(p) for p in parts)
    if isinstance(current, int):
        return int(text)
    if isinstance(current, float):
        return float(text)
    if current is None:
        low = text.strip().lower()
        if low in ("", "none"):
            return None
        return int(text)
    return text.strip()


def _override(obj, values: Dict[str, str], where: str):
    known = {f.name: f for f in dataclasses.fields(obj)}
    changes = {}
    for key, raw in values.items():
        if key not in known:
            raise ConfigError(f"unknown key {where}.{key}")
        try:
            changes[key] = _coerce(raw, getattr(obj, key))
        except ValueError as exc:
            raise ConfigError(f"{where}.{key}: {exc}") from None
    try:
        return dataclasses.replace(obj, **changes)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"{where}: {exc}") from None


def load_config(path: Optional[str] = None, overrides: Optional[Dict[str, str]] = None) -> PipelineConfig:
    """Read a sectioned key = value config; ``overrides`` use dotted keys.

    Top-level keys (``seed``, ``world_seed``) live in a ``[pipeline]``
    section. The synthetic-world seed defaults to a value derived from
    ``seed`` unless ``world_seed`` is set.
    """
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                parser.read_file(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
        except configparser.Error as exc:
            raise ConfigError(f"{path}: {exc}") from None
    sections: Dict[str, Dict[str, str]] = {s: dict(parser[s]) for s in parser.sections()}
    for dotted, value in (overrides or {}).items():
        sec, _, key = dotted.rpartition(".")
        sections.setdefault(sec or "pipeline", {})[key] = value
    for sec in sections:
        if sec != "pipeline" and sec not in _SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
    cfg = _override(PipelineConfig(), sections.get("pipeline", {}), "pipeline")
    subs = {}
    for sec, attr in _SECTIONS.items():
        if sec in sections:
            subs[attr] = _override(getattr(cfg, attr), sections[sec], sec)
    cfg = dataclasses.replace(cfg, **subs)
    return finalize_config(cfg)


def finalize_config(cfg: PipelineConfig) -> PipelineConfig:
    """Fan the global seed out to stage seeds that were not pinned."""
    world_seed = cfg.world_seed if cfg.world_seed is not None else derive_seed(cfg.seed, "world")
    synth = dataclasses.replace(cfg.synth, rng_seed=world_seed)
    train = dataclasses.replace(cfg.train, rng_seed=derive_seed(cfg.seed, "train"))
    return dataclasses.replace(cfg, synth=synth, train=train)


def _json_dump(obj, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(obj, fh, indent=1, sort_keys=False)
        fh.write("\n")


# --- synth ----------------------------------------------------------------

def trajectories(cfg: PipelineConfig) -> Tuple[List[Pose], List[Pose]]:
    """Two distinct lawnmower traversals over the same area.

    The training traversal runs lanes along x, the test traversal along
    y; lane offsets are drawn from the trajectory seed.
    """
    rng = np.random.default_rng(derive_seed(cfg.seed, "trajectory"))
    sp = cfg.trajectory.lane_spacing
    off_a, off_b = rng.uniform(-0.5 * sp, 0.5 * sp, size=2)
    a = lawnmower(cfg.synth.area, sp, cfg.trajectory.step, cfg.synth.sensor_height, "x", float(off_a))
    b = lawnmower(cfg.synth.area, sp, cfg.trajectory.step, cfg.synth.sensor_height, "y", float(off_b))
    return a, b


def run_synth(cfg: PipelineConfig, out_dir: str, binary: bool = True) -> Dict[str, str]:
    os.makedirs(out_dir, exist_ok=True)
    world = generate_world(cfg.synth)
    traj_a, traj_b = trajectories(cfg)
    ext = "splsb" if binary else "spls"
    paths = {}
    for sid, traj in (("train", traj_a), ("test", traj_b)):
        sess = simulate_traverse(world, traj, cfg.synth, session_id=sid)
        paths[sid] = os.path.join(out_dir, f"{sid}.{ext}")
        write_session(sess, paths[sid], binary=binary)
    paths["world"] = os.path.join(out_dir, "world.json")
    _json_dump(
        {
            "world_seed": cfg.synth.rng_seed,
            "poles": [{"pole_id": i, "x": p[0], "y": p[1], "radius": p[2], "height": p[3]} for i, p in enumerate(world.poles.tolist())],
            "walls": world.walls.tolist(),
            "blobs": world.blobs.tolist(),
        },
        paths["world"],
    )
    return paths


def load_ground_truth(path: str) -> Dict[int, Tuple[float, float]]:
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return {int(p["pole_id"]): (p["x"], p["y"]) for p in data["poles"]}


# --- detect / track -------------------------------------------------------

def detect_session(session: Session, cfg: DetectorConfig):
    return [(f, detect_poles(f, cfg)) for f in session.frames]


def track_session(session: Session, cfg: PipelineConfig) -> Tracker:
    tracker = Tracker(cfg.gating)
    for frame, dets in detect_session(session, cfg.detector):
        tracker.update(frame.frame_id, dets, frame.sensor_pose)
    tracker.close_all()
    return tracker


def run_detect(session_path: str, cfg: PipelineConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    session = read_session(session_path)
    dets = [d for _, ds in detect_session(session, cfg.detector) for d in ds]
    path = os.path.join(out_dir, f"{session.session_id}_detections.csv")
    write_detections_csv(dets, path)
    return path


def run_track(session_path: str, cfg: PipelineConfig, out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    session = read_session(session_path)
    tracker = track_session(session, cfg)
    path = os.path.join(out_dir, f"{session.session_id}_tracks.csv")
    write_tracks_csv(tracker.tracks, path)
    return path


# --- dataset --------------------------------------------------------------

def build_session_dataset(session: Session, cfg: PipelineConfig, out_dir: str) -> dict:
    """Detect, track and rasterise one session; returns the manifest dict."""
    tracker = track_session(session, cfg)
    frames = {f.frame_id: f for f in session.frames}
    labels = export_labels(tracker.tracks, cfg.retrieval.min_track_len, frames)
    img_dir = os.path.join(out_dir, "images")
    os.makedirs(img_dir, exist_ok=True)
    kept = {o.track_id for o in labels}
    tracks = [
        {"track_id": t.track_id, "anchor": list(t.anchor), "length": len(t)}
        for t in tracker.tracks
        if t.track_id in kept
    ]
    observations = []
    for o in labels:
        img = pole_image(o.detection, o.frame, cfg.projection, track_id=o.track_id)
        name = pgm_name(session.session_id, o.track_id, o.frame_id)
        write_pgm(img, os.path.join(img_dir, name))
        observations.append(
            {
                "track_id": o.track_id,
                "frame_id": o.frame_id,
                "range": o.range,
                "point_count": o.pole_point_count,
                "centroid": list(o.detection.centroid_world),
                "image": f"images/{name}",
            }
        )
    return {
        "format": "spl-manifest/1",
        "session_id": session.session_id,
        "image_shape": [cfg.projection.num_rows, cfg.projection.num_cols],
        "tracks": tracks,
        "observations": observations,
    }


def run_build_dataset(session_paths: Sequence[str], cfg: PipelineConfig, out_dir: str) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    out = []
    for sp in session_paths:
        session = read_session(sp)
        manifest = build_session_dataset(session, cfg, out_dir)
        if not manifest["tracks"]:
            raise enc.DatasetError(f"empty dataset: no tracks found in session {session.session_id!r} ({sp})")
        path = os.path.join(out_dir, f"{session.session_id}_manifest.json")
        _json_dump(manifest, path)
        out.append(path)
    return out


@dataclass
class Manifest:
    path: str
    session_id: str
    tracks: Dict[int, Tuple[float, float]]
    observations: List[dict]

    @classmethod
    def load(cls, path: str) -> "Manifest":
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        tracks = {int(t["track_id"]): tuple(t["anchor"]) for t in data["tracks"]}
        return cls(path, data["session_id"], tracks, data["observations"])

    def images(self, observations: Optional[Sequence[dict]] = None) -> np.ndarray:
        base = os.path.dirname(os.path.abspath(self.path))
        obs = self.observations if observations is None else observations
        return np.stack([read_pgm(os.path.join(base, o["image"])) for o in obs])

    def labels(self) -> np.ndarray:
        return np.array([o["track_id"] for o in self.observations])


# --- train / eval ---------------------------------------------------------

def run_train(manifest_path: str, cfg: PipelineConfig, out_dir: str, objective: Optional[str] = None,
              log=None) -> Tuple[str, str, enc.TrainResult]:
    os.makedirs(out_dir, exist_ok=True)
    tcfg = cfg.train if objective is None else dataclasses.replace(cfg.train, objective=objective)
    man = Manifest.load(manifest_path)
    if not man.observations:
        raise enc.DatasetError(f"manifest {manifest_path} has no observations")
    result = enc.train(man.images(), man.labels(), tcfg, log=log)
    ckpt = os.path.join(out_dir, f"{tcfg.objective}_encoder.sple")
    loss_csv = os.path.join(out_dir, f"{tcfg.objective}_loss.csv")
    enc.save_checkpoint(result.params, ckpt)
    enc.write_loss_csv(result.loss_history, loss_csv)
    return ckpt, loss_csv, result


def run_untrained(manifest_path: str, cfg: PipelineConfig, out_dir: str) -> str:
    """Checkpoint of the freshly initialised encoder both objectives start from."""
    os.makedirs(out_dir, exist_ok=True)
    with open(manifest_path, encoding="utf-8") as fh:
        shape = tuple(json.load(fh)["image_shape"])
    params = enc.init_params(cfg.train.rng_seed, input_shape=shape)
    ckpt = os.path.join(out_dir, "untrained_encoder.sple")
    enc.save_checkpoint(params, ckpt)
    return ckpt


@dataclass
class _Obs:
    record: dict

    @property
    def frame_id(self):
        return self.record["frame_id"]

    @property
    def range(self):
        return self.record["range"]

    @property
    def pole_point_count(self):
        return self.record["point_count"]


def evaluate(params: enc.EncoderParams, reference: Manifest, query: Manifest, cfg: PipelineConfig,
             bins=DEFAULT_BINS, method: str = "") -> RetrievalReport:
    """Database from ``reference``, sparse queries from ``query``."""
    landmarks, q_to_lm = match_landmarks(reference.tracks, query.tracks, cfg.retrieval.match_radius)
    if not landmarks:
        raise enc.DatasetError("no landmark is common to both sessions")
    by_track: Dict[int, List[_Obs]] = {}
    for rec in reference.observations:
        by_track.setdefault(rec["track_id"], []).append(_Obs(rec))
    tracks = {lm: [o for t in members for o in by_track.get(t, [])] for lm, members in landmarks.items()}

    def embed(obs):
        return enc.embed_batch(params, reference.images([o.record for o in obs]))

    database = build_database(tracks, embed, derive_seed(cfg.seed, "database"))
    candidates = [_Obs(r) for r in query.observations if r["track_id"] in q_to_lm]
    chosen = select_queries(candidates, cfg.retrieval.max_pole_points)
    if chosen:
        q_emb = enc.embed_batch(params, query.images([o.record for o in chosen]))
    queries = [
        Query(q_to_lm[o.record["track_id"]], q_emb[i], o.range, o.pole_point_count) for i, o in enumerate(chosen)
    ]
    return recall_report(queries, database, bins, method=method)


def run_eval(checkpoint: str, reference_manifest: str, query_manifest: str, cfg: PipelineConfig, out_dir: str,
             bins: Optional[str] = None, method: Optional[str] = None) -> Tuple[str, str, RetrievalReport]:
    os.makedirs(out_dir, exist_ok=True)
    if not os.path.exists(checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {checkpoint}")
    params = enc.load_checkpoint(checkpoint)
    bin_spec = parse_bins(bins or cfg.retrieval.bins)
    if method is None:
        method = os.path.basename(checkpoint).split("_")[0].split(".")[0]
    report = evaluate(params, Manifest.load(reference_manifest), Manifest.load(query_manifest), cfg, bin_spec, method)
    js = os.path.join(out_dir, f"{method}_report.json")
    cs = os.path.join(out_dir, f"{method}_report.csv")
    write_report_json(report, js)
    write_report_csv([report], cs)
    return js, cs, report
