"""Acceptance criteria, one check per criterion.

Each check prints a single ``[PASS]`` or ``[FAIL]`` line. Run directly
(``python3 tests/test_acceptance.py``) or through pytest, where the
lines are repeated in the terminal summary.

Pinned tolerances
-----------------
C1  exact two-decimal string match
C2  pixel-exact, 100/100 neighbourhoods
C3  max elementwise relative error < 1e-4, |a - n| / max(|a|, |n|, 1e-8)
C4  exact equality of rank lists and recall values, 20/20 instances
C5  purity >= 0.95 on both traversals; 0 identity switches
C6  R@1 >= 5 / num_landmarks (as a percentage) and > untrained R@1
C7  byte equality of every manifest, checkpoint and report
Runtime limits are those stated per criterion.
"""

import filecmp
import json
import math
import os
import sys
import tempfile
import time

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(__file__))

import oracles  # noqa: E402
from polespl import pipeline as P  # noqa: E402
from polespl.cli import main as cli  # noqa: E402
from polespl.pole_image import ProjectionConfig, rasterize, to_cylindrical  # noqa: E402
from polespl.retrieval import DatabaseEntry, Query, rank, recall_report  # noqa: E402
from polespl.scan_model import read_session  # noqa: E402
from polespl.track_assoc import label_audit  # noqa: E402

RESULTS = []
SEED = 0


def record(cid, title, passed, detail, seconds, limit):
    ok = passed and seconds < limit
    line = f"[{'PASS' if ok else 'FAIL'}] C{cid} {title}: {detail} ({seconds:.1f} s, limit {limit:g} s)"
    RESULTS.append(line)
    print(line, flush=True)
    return ok


# --- C1 -------------------------------------------------------------------

def _rank_fixture(hits, total):
    d = 12
    db = [DatabaseEntry(i, np.eye(d)[i]) for i in range(d)]
    wanted = [1] * hits[0] + [5] * (hits[1] - hits[0]) + [10] * (hits[2] - hits[1]) + [11] * (total - hits[2])
    queries = []
    for r in wanted:
        sims = np.zeros(d)
        sims[: r - 1] = 1.0  # r - 1 lower ids outrank the true landmark
        sims[11] = 0.5
        queries.append(Query(11, sims, range=2.0))
    return recall_report(queries, db)


def check_c1():
    t = time.perf_counter()
    rows = {
        "overall CL row": ((79, 172, 219), 359, ["22.01", "47.91", "61.00"]),
        "<=5m CL row": ((15, 30, 34), 40, ["37.50", "75.00", "85.00"]),
    }
    ok, parts = True, []
    for name, (hits, total, want) in rows.items():
        rep = _rank_fixture(hits, total)
        got = [f"{rep.recall_at[k]:.2f}" for k in (1, 5, 10)]
        ok &= got == want and got == [f"{rep.bins[0].recall_at[k]:.2f}" for k in (1, 5, 10)]
        parts.append(f"{name} {'/'.join(got)}")
    return record(1, "table arithmetic", ok, "; ".join(parts), time.perf_counter() - t, 1)


# --- C2 -------------------------------------------------------------------

def check_c2():
    t = time.perf_counter()
    cfg = ProjectionConfig()
    rng = np.random.default_rng(SEED)
    step = 2 * math.pi / cfg.num_cols
    passed = 0
    for _ in range(100):
        n = int(rng.integers(3, 3000))
        centroid = rng.uniform(-100, 100, 2)
        # world points whose azimuth sits mid-column, well clear of bin edges
        col = rng.integers(0, cfg.num_cols, n)
        theta = (col + rng.uniform(0.25, 0.75, n)) * step
        r = rng.uniform(0.0, cfg.r_max * 1.2, n)
        r = np.where(np.abs(r * cfg.num_rows / cfg.r_max - np.round(r * cfg.num_rows / cfg.r_max)) < 1e-6, r + 1e-3, r)
        z = rng.uniform(cfg.z_min - 1, cfg.z_max + 1, n)
        pts = np.column_stack([centroid[0] + r * np.cos(theta), centroid[1] + r * np.sin(theta), z])
        k = int(rng.integers(1, cfg.num_cols))
        ang = k * step
        c, s = math.cos(ang), math.sin(ang)
        rel = pts[:, :2] - centroid
        rot = np.column_stack([centroid[0] + c * rel[:, 0] - s * rel[:, 1], centroid[1] + s * rel[:, 0] + c * rel[:, 1], z])
        base = rasterize(to_cylindrical(pts, centroid), cfg).pixels
        turned = rasterize(to_cylindrical(rot, centroid), cfg).pixels
        passed += np.array_equal(turned, np.roll(base, k, axis=1))
    return record(2, "rotational invariance", passed == 100, f"{passed}/100 pixel-exact", time.perf_counter() - t, 10)


# --- C3 -------------------------------------------------------------------

def check_c3():
    t = time.perf_counter()
    emb = oracles.embedding_gradient_errors(SEED)
    cl, n_cl = oracles.network_gradient_errors("cl", SEED)
    sl, n_sl = oracles.network_gradient_errors("sl", SEED)
    worst = max(list(emb.values()) + list(cl.values()) + list(sl.values()))
    detail = (
        f"max rel err {worst:.2e} (embeddings {max(emb.values()):.1e}, "
        f"InfoNCE net {max(cl.values()):.1e}, CE net {max(sl.values()):.1e}; "
        f"{len(cl)} tensors; {n_cl + n_sl} kink-shrunk steps)"
    )
    return record(3, "gradient oracle", worst < 1e-4, detail, time.perf_counter() - t, 60)


# --- C4 -------------------------------------------------------------------

def check_c4():
    t = time.perf_counter()
    rng = np.random.default_rng(SEED + 4)
    agree = 0
    for _ in range(20):
        n_db, n_q, d = int(rng.integers(1, 201)), int(rng.integers(1, 51)), int(rng.integers(4, 9))
        ids = rng.permutation(10_000)[:n_db]

        def units(n):
            out = np.zeros((n, d))
            for row in out:
                row[rng.choice(d, 4, replace=False)] = rng.choice([-0.5, 0.5], 4)
            return out

        emb, q_emb = units(n_db), units(n_q)
        q_ids = rng.choice(ids, n_q)
        db = [DatabaseEntry(int(i), e) for i, e in zip(ids, emb)]
        qs = [Query(int(i), e, float(r)) for i, e, r in zip(q_ids, q_emb, rng.uniform(0, 20, n_q))]
        rep = recall_report(qs, db)
        ref_ranks, ref_recall = oracles.brute_recall(list(zip(q_ids, q_emb)), list(ids), list(emb))
        orders = all(rank(q, db) == oracles.brute_rank(q.embedding, list(ids), list(emb)) for q in qs)
        agree += orders and list(rep.ranks) == ref_ranks and rep.recall_at == ref_recall
    return record(4, "retrieval oracle", agree == 20, f"{agree}/20 instances identical", time.perf_counter() - t, 10)


# --- C5, C6, C7 -----------------------------------------------------------

def run_pipeline(root, seed=SEED, with_sl=True):
    """The full product path through the CLI; returns timings and paths."""
    s, d, m, r = (os.path.join(root, x) for x in ("sessions", "dataset", "models", "reports"))
    times = {}
    t = time.perf_counter()
    assert cli(["synth", "--seed", str(seed), "--out", s]) == 0
    times["synth"] = time.perf_counter() - t
    t = time.perf_counter()
    assert cli(["build-dataset", os.path.join(s, "train.splsb"), os.path.join(s, "test.splsb"),
                "--seed", str(seed), "--out", d]) == 0
    times["dataset"] = time.perf_counter() - t
    ref, qry = os.path.join(d, "train_manifest.json"), os.path.join(d, "test_manifest.json")
    t = time.perf_counter()
    assert cli(["train", ref, "--objective", "cl", "--seed", str(seed), "--out", m, "--quiet"]) == 0
    times["train_cl"] = time.perf_counter() - t
    t = time.perf_counter()
    P.run_untrained(ref, P.load_config(None, {"pipeline.seed": str(seed)}), m)
    for method in ("cl", "untrained"):
        assert cli(["eval", os.path.join(m, f"{method}_encoder.sple"), "--reference", ref, "--query", qry,
                    "--seed", str(seed), "--out", r]) == 0
    times["eval"] = time.perf_counter() - t
    if with_sl:
        t = time.perf_counter()
        assert cli(["train", ref, "--objective", "sl", "--seed", str(seed), "--out", m, "--quiet"]) == 0
        assert cli(["eval", os.path.join(m, "sl_encoder.sple"), "--reference", ref, "--query", qry,
                    "--seed", str(seed), "--out", r]) == 0
        times["sl"] = time.perf_counter() - t
    return times


def audit(root):
    cfg = P.load_config(None, {"pipeline.seed": str(SEED)})
    gt = P.load_ground_truth(os.path.join(root, "sessions", "world.json"))
    out = {}
    for sid in ("train", "test"):
        tracker = P.track_session(read_session(os.path.join(root, "sessions", f"{sid}.splsb")), cfg)
        out[sid] = label_audit(tracker.tracks, gt, cfg.retrieval.min_track_len, 1.0, min_pole_separation=3.0)
    return out


def check_c5(root, times):
    t = time.perf_counter()
    res = audit(root)
    seconds = times["synth"] + time.perf_counter() - t
    ok = all(a["purity"] >= 0.95 and a["id_switches"] == 0 for a in res.values())
    detail = "; ".join(
        f"{sid} purity {a['purity']:.4f} over {a['observations']} obs, {a['id_switches']} switches" for sid, a in res.items()
    )
    return record(5, "label purity", ok, detail, seconds, 60), res


def _report(root, method):
    with open(os.path.join(root, "reports", f"{method}_report.json"), encoding="utf-8") as fh:
        return json.load(fh)


def check_c6(root, times):
    cl, un = _report(root, "cl"), _report(root, "untrained")
    with open(os.path.join(root, "dataset", "train_manifest.json"), encoding="utf-8") as fh:
        ref = json.load(fh)
    with open(os.path.join(root, "dataset", "test_manifest.json"), encoding="utf-8") as fh:
        qry = json.load(fh)
    lms, _ = P.match_landmarks(
        {t["track_id"]: tuple(t["anchor"]) for t in ref["tracks"]},
        {t["track_id"]: tuple(t["anchor"]) for t in qry["tracks"]},
    )
    chance = 100.0 / len(lms)
    r1, u1 = cl["recall"]["1"], un["recall"]["1"]
    seconds = sum(v for k, v in times.items() if k != "sl")
    with open(os.path.join(root, "models", "cl_loss.csv"), encoding="utf-8") as fh:
        epochs = len(fh.read().splitlines()) - 1
    detail = (
        f"R@1 {r1:.2f}% vs 5x chance {5 * chance:.2f}% ({len(lms)} landmarks) and untrained {u1:.2f}%; "
        f"{cl['total_queries']} queries, {epochs} epochs"
    )
    ok = r1 >= 5 * chance and r1 > u1 and epochs == 30
    passed = record(6, "end-to-end learning signal", ok, detail, seconds, 600)
    if "sl" in times:
        sl = _report(root, "sl")
        line = (
            f"[INFO] C6 CL vs SL (not gated): CL R@1/5/10 {cl['recall']['1']:.2f}/{cl['recall']['5']:.2f}/"
            f"{cl['recall']['10']:.2f}, SL {sl['recall']['1']:.2f}/{sl['recall']['5']:.2f}/{sl['recall']['10']:.2f}"
        )
        RESULTS.append(line)
        print(line, flush=True)
    return passed


def check_c7(root_a, audit_a):
    t = time.perf_counter()
    with tempfile.TemporaryDirectory() as root_b:
        run_pipeline(root_b, with_sl=False)
        audit_b = audit(root_b)
        files = []
        for sub in ("sessions", "dataset", "models", "reports"):
            for name in sorted(os.listdir(os.path.join(root_b, sub))):
                if name.endswith((".json", ".splsb", ".sple", ".csv")):
                    files.append(os.path.join(sub, name))
        diff = [f for f in files if not filecmp.cmp(os.path.join(root_a, f), os.path.join(root_b, f), shallow=False)]
        imgs = sorted(os.listdir(os.path.join(root_b, "dataset", "images")))
        _, mism, errs = filecmp.cmpfiles(os.path.join(root_a, "dataset", "images"),
                                         os.path.join(root_b, "dataset", "images"), imgs, shallow=False)
    ok = not diff and not mism and not errs and audit_a == audit_b
    detail = f"{len(files) - len(diff)}/{len(files)} artifacts and {len(imgs) - len(mism) - len(errs)}/{len(imgs)} images identical"
    if diff:
        detail += f"; differing: {', '.join(diff)}"
    return record(7, "determinism", ok, detail, time.perf_counter() - t, 1200)


# --- pytest entry points --------------------------------------------------

@pytest.fixture(scope="module")
def full_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp("acceptance"))
    return root, run_pipeline(root)


def test_c1_table_arithmetic():
    assert check_c1()


def test_c2_rotational_invariance():
    assert check_c2()


def test_c3_gradient_oracle():
    assert check_c3()


def test_c4_retrieval_oracle():
    assert check_c4()


def test_c5_label_purity(full_run):
    ok, _ = check_c5(*full_run)
    assert ok


def test_c6_learning_signal(full_run):
    assert check_c6(*full_run)


def test_c7_determinism(full_run):
    root, _ = full_run
    assert check_c7(root, audit(root))


if __name__ == "__main__":
    ok = [check_c1(), check_c2(), check_c3(), check_c4()]
    with tempfile.TemporaryDirectory() as root:
        times = run_pipeline(root)
        c5, res = check_c5(root, times)
        ok += [c5, check_c6(root, times), check_c7(root, res)]
    sys.exit(0 if all(ok) else 1)
