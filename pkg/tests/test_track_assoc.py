import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from polespl.pole_detect import PoleDetection
from polespl.scan_model import Pose
from polespl.track_assoc import (
    GatingConfig,
    OrderingError,
    Tracker,
    export_labels,
    gate_radius,
    label_audit,
    update_tracks,
    write_tracks_csv,
)


def det(fid, x, y, rng=5.0, n=4):
    return PoleDetection(fid, (float(x), float(y)), rng, np.zeros((n, 3)))


def test_gate_examples():
    assert gate_radius(0.0) == 0.5
    assert gate_radius(25.0) == pytest.approx(1.0)
    cfg = GatingConfig(range_gain=0.0)
    assert {gate_radius(r, cfg) for r in (0, 3, 30)} == {0.5}
    with pytest.raises(ValueError):
        gate_radius(-1.0)


@given(st.floats(0.01, 5), st.floats(0, 1), st.floats(0, 100), st.floats(0, 100))
def test_gate_monotone(base, gain, r1, r2):
    cfg = GatingConfig(base, gain)
    lo, hi = sorted((r1, r2))
    assert gate_radius(lo, cfg) <= gate_radius(hi, cfg)


def test_stationary_pole_single_track():
    rng = np.random.default_rng(0)
    tr = Tracker()
    for f in range(20):
        tr.update(f, [det(f, *(np.array([3.0, 4.0]) + rng.normal(scale=0.02, size=2)))])
    assert len(tr.tracks) == 1 and len(tr.tracks[0]) == 20


def test_two_poles_no_switches():
    rng = np.random.default_rng(1)
    poles = {0: (0.0, 0.0), 1: (10.0, 0.0)}
    tr = Tracker()
    for f in range(50):
        dets = [det(f, *(np.array(p) + rng.normal(scale=0.05, size=2))) for p in poles.values()]
        tr.update(f, dets)
    audit = label_audit(tr.tracks, poles)
    assert len(tr.tracks) == 2 and audit["id_switches"] == 0 and audit["purity"] == 1.0


def test_timeout_closes_and_reopens():
    cfg = GatingConfig(max_missed_frames=3)
    tr = Tracker(cfg)
    tr.update(0, [det(0, 1, 1)])
    for f in range(1, 5):  # max_missed + 1 empty frames
        tr.update(f, [])
    assert tr.tracks[0].state == "closed"
    tr.update(5, [det(5, 1, 1)])
    assert len(tr.tracks) == 2 and tr.tracks[1].state == "active"


def test_survives_exactly_max_missed():
    tr = Tracker(GatingConfig(max_missed_frames=3))
    tr.update(0, [det(0, 1, 1)])
    for f in range(1, 4):
        tr.update(f, [])
    tr.update(4, [det(4, 1, 1)])
    assert len(tr.tracks) == 1 and len(tr.tracks[0]) == 2


def test_greedy_closest_first_and_tie_to_lower_detection():
    tr = Tracker(GatingConfig(base_gate=2.0, range_gain=0.0))
    tr.update(0, [det(0, 0, 0)])
    tr.update(1, [det(1, 1.0, 0), det(1, -0.5, 0)])
    assert tr.tracks[0].detections[-1].centroid_world == (-0.5, 0.0)
    tr2 = Tracker(GatingConfig(base_gate=2.0, range_gain=0.0))
    tr2.update(0, [det(0, 0, 0)])
    tr2.update(1, [det(1, 1.0, 0), det(1, -1.0, 0)])
    assert tr2.tracks[0].detections[-1].centroid_world == (1.0, 0.0)


def test_gate_uses_pose_range():
    tr = Tracker()
    tr.update(0, [det(0, 0, 0)])
    # 0.8 m jump: outside the 0.5 m gate at range 0, inside it at 25 m
    tr.update(1, [det(1, 0.8, 0)], sensor_pose=Pose(0.8, 0, 0, 0))
    assert len(tr.tracks) == 2
    tr = Tracker()
    tr.update(0, [det(0, 0, 0)])
    tr.update(1, [det(1, 0.8, 0)], sensor_pose=Pose(25.8, 0, 0, 0))
    assert len(tr.tracks) == 1


def test_ordering_errors():
    tr = Tracker()
    tr.update(3, [])
    with pytest.raises(OrderingError):
        tr.update(3, [])
    with pytest.raises(OrderingError):
        tr.update(4, [det(5, 0, 0)])
    with pytest.raises(ValueError):
        update_tracks(Tracker(), [], Pose(0, 0, 0, 0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_injective_and_anchor_mean(seed):
    rng = np.random.default_rng(seed)
    poles = rng.uniform(0, 30, size=(6, 2))
    tr = Tracker()
    for f in range(30):
        vis = poles[rng.random(len(poles)) < 0.7]
        dets = [det(f, *(p + rng.normal(scale=0.3, size=2))) for p in vis]
        tr.update(f, dets)
        per_frame = [t.track_id for t in tr.tracks for d in t.detections if d.frame_id == f]
        assert len(per_frame) == len(set(per_frame)) == len(dets)
        for t in tr.tracks:
            mean = np.mean([d.centroid_world for d in t.detections], axis=0)
            assert np.allclose(t.anchor, mean, atol=1e-9, rtol=0)


def test_export_labels():
    tr = Tracker()
    for f in range(5):
        tr.update(f, [det(f, 0, 0)] + ([det(f, 20, 20)] if f < 2 else []))
    obs = export_labels(tr.tracks, 3)
    assert len(obs) == 5 and {o.track_id for o in obs} == {0}
    assert [o.frame_id for o in obs] == list(range(5))
    assert export_labels([tr.tracks[1]], 3) == []


def test_tracks_csv(tmp_path):
    tr = Tracker()
    tr.update(0, [det(0, 1, 2)])
    write_tracks_csv(tr.tracks, tmp_path / "t.csv")
    assert (tmp_path / "t.csv").read_text().splitlines()[1].startswith("0,0,1.0,2.0")
