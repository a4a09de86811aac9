"""Cross-session landmark retrieval and Recall@K reporting.

The reference session contributes one randomly chosen embedding per
landmark; sparse query-session observations are ranked against that
database by cosine similarity. Percentages are rounded to two decimals,
half away from zero.
"""

from __future__ import annotations

import csv
import json
import math
import re
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from typing import Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

KS = (1, 5, 10)


class IntegrityError(ValueError):
    pass


class EmptyDatabaseError(ValueError):
    pass


@dataclass(frozen=True)
class Interval:
    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def contains(self, x: float) -> bool:
        above = x >= self.lo if self.lo_closed else x > self.lo
        below = x <= self.hi if self.hi_closed else x < self.hi
        return above and below

    @property
    def label(self) -> str:
        def fmt(v):
            if math.isinf(v):
                return "inf" if v > 0 else "-inf"
            return f"{v:g}"

        return f"{'[' if self.lo_closed else '('}{fmt(self.lo)},{fmt(self.hi)}{']' if self.hi_closed else ')'}"


DEFAULT_BINS = (
    Interval(0.0, 5.0, True, True),
    Interval(5.0, 10.0, False, True),
    Interval(10.0, math.inf, False, False),
)

_BIN_RE = re.compile(r"\s*([\[(])\s*([^,\s]+)\s*,\s*([^\])\s]+)\s*([\])])\s*")


def parse_bins(spec: str) -> Tuple[Interval, ...]:
    """Parse e.g. ``"[0,5],(5,10],(10,inf)"`` into intervals."""
    bins, pos = [], 0
    spec = spec.strip()
    while pos < len(spec):
        m = _BIN_RE.match(spec, pos)
        if not m:
            raise ValueError(f"cannot parse range bins at {spec[pos:]!r}")
        lo, hi = float(m.group(2)), float(m.group(3))
        if hi < lo:
            raise ValueError(f"empty interval {m.group(0).strip()}")
        bins.append(Interval(lo, hi, m.group(1) == "[", m.group(4) == "]"))
        pos = m.end()
        if pos < len(spec):
            if spec[pos] != ",":
                raise ValueError(f"expected ',' between bins at {spec[pos:]!r}")
            pos += 1
    if not bins:
        raise ValueError("no bins given")
    return tuple(bins)


@dataclass(frozen=True, eq=False)
class DatabaseEntry:
    landmark_id: int
    embedding: np.ndarray = field(repr=False)
    frame_id: int = -1
    range: float = 0.0


@dataclass(frozen=True, eq=False)
class Query:
    landmark_id: int
    embedding: np.ndarray = field(repr=False)
    range: float = 0.0
    pole_point_count: int = 1

    def __post_init__(self):
        if self.pole_point_count < 1:
            raise ValueError("pole_point_count must be >= 1")


@dataclass(frozen=True)
class BinReport:
    interval: Interval
    count: int
    recall_at: Optional[Dict[int, float]]


@dataclass(frozen=True)
class RetrievalReport:
    method: str
    ranks: Tuple[int, ...]
    recall_at: Dict[int, float]
    bins: Tuple[BinReport, ...]

    @property
    def total_queries(self) -> int:
        return len(self.ranks)


# --- database and queries -------------------------------------------------

def build_database(tracks: Mapping[int, Sequence], embed: Callable[[List], np.ndarray], rng_seed: int) -> List[DatabaseEntry]:
    """Pick one observation uniformly at random per landmark and embed it.

    ``tracks`` maps landmark id to its observations (objects with
    ``frame_id`` and ``range``); ``embed`` maps a list of observations to
    an (n, d) array. Landmarks are visited in ascending id order.
    """
    if not tracks:
        raise EmptyDatabaseError("cannot build a database from an empty track set")
    rng = np.random.default_rng(np.random.SeedSequence([rng_seed, 0xDA7A]))
    ids = sorted(tracks)
    chosen = []
    for lid in ids:
        obs = tracks[lid]
        if len(obs) == 0:
            raise EmptyDatabaseError(f"landmark {lid} has no observations")
        chosen.append(obs[int(rng.integers(len(obs)))])
    emb = np.asarray(embed(chosen))
    return [
        DatabaseEntry(lid, emb[i], getattr(o, "frame_id", -1), float(getattr(o, "range", 0.0)))
        for i, (lid, o) in enumerate(zip(ids, chosen))
    ]


def select_queries(observations: Sequence, max_pole_points: int = 10) -> List:
    """Keep observations whose pole cluster has fewer than ``max_pole_points`` points."""
    return [o for o in observations if o.pole_point_count < max_pole_points]


# --- ranking and recall ---------------------------------------------------

def _db_arrays(database: Sequence[DatabaseEntry]):
    ids = np.array([e.landmark_id for e in database])
    emb = np.stack([np.asarray(e.embedding, dtype=np.float64) for e in database])
    return ids, emb


def rank(query, database: Sequence[DatabaseEntry]) -> List[int]:
    """Landmark ids by descending cosine similarity, ties by ascending id."""
    if not database:
        raise EmptyDatabaseError("database is empty")
    ids, emb = _db_arrays(database)
    q = np.asarray(getattr(query, "embedding", query), dtype=np.float64)
    sims = emb @ q
    return [int(v) for v in ids[np.lexsort((ids, -sims))]]


def rank_matrix(query_emb: np.ndarray, db_ids: np.ndarray, db_emb: np.ndarray) -> np.ndarray:
    """Row i holds the database ids ordered for query i."""
    sims = np.asarray(query_emb, dtype=np.float64) @ db_emb.T
    out = np.empty(sims.shape, dtype=db_ids.dtype)
    for i, row in enumerate(sims):
        out[i] = db_ids[np.lexsort((db_ids, -row))]
    return out


def percent(hits: int, total: int) -> Decimal:
    """100 * hits / total rounded to 2 decimals, half away from zero."""
    return (Decimal(100 * hits) / Decimal(total)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def _recall(ranks: np.ndarray, ks) -> Dict[int, float]:
    return {k: float(percent(int(np.sum(ranks <= k)), len(ranks))) for k in ks}


def recall_report(queries: Sequence[Query], database: Sequence[DatabaseEntry], bins=DEFAULT_BINS,
                  ks=KS, method: str = "") -> RetrievalReport:
    if not database:
        raise EmptyDatabaseError("database is empty")
    ids, emb = _db_arrays(database)
    if len(set(ids.tolist())) != len(ids):
        raise IntegrityError("database holds more than one entry for a landmark")
    known = set(ids.tolist())
    for q in queries:
        if q.landmark_id not in known:
            raise IntegrityError(f"query landmark {q.landmark_id} is not in the database")
    if queries:
        qe = np.stack([np.asarray(q.embedding, dtype=np.float64) for q in queries])
        ordered = rank_matrix(qe, ids, emb)
        truth = np.array([q.landmark_id for q in queries])
        ranks = np.argmax(ordered == truth[:, None], axis=1) + 1
    else:
        ranks = np.zeros(0, dtype=np.int64)
    overall = _recall(ranks, ks) if len(ranks) else {}
    ranges = np.array([q.range for q in queries])
    bin_reports = []
    for iv in bins:
        m = np.array([iv.contains(r) for r in ranges], dtype=bool)
        cnt = int(m.sum())
        bin_reports.append(BinReport(iv, cnt, _recall(ranks[m], ks) if cnt else None))
    return RetrievalReport(method, tuple(int(r) for r in ranks), overall, tuple(bin_reports))


# --- cross-session correspondence -----------------------------------------

def match_landmarks(reference: Mapping[int, Tuple[float, float]], query: Mapping[int, Tuple[float, float]],
                    max_dist: float = 1.0) -> Tuple[Dict[int, List[int]], Dict[int, int]]:
    """Associate track anchors of two sessions by world-frame proximity.

    Reference tracks whose anchors are chained within ``max_dist`` form one
    landmark (id = smallest member track id). Each query track maps to the
    landmark of its nearest reference anchor within ``max_dist``.

    Returns ``(landmark -> reference track ids, query track -> landmark)``,
    restricted to landmarks seen by at least one query track.
    """
    ref_ids = sorted(reference)
    parent = {t: t for t in ref_ids}

    def find(t):
        while parent[t] != t:
            parent[t] = parent[parent[t]]
            t = parent[t]
        return t

    xy = np.array([reference[t] for t in ref_ids], dtype=np.float64).reshape(-1, 2)
    for i in range(len(ref_ids)):
        d = np.hypot(xy[i + 1 :, 0] - xy[i, 0], xy[i + 1 :, 1] - xy[i, 1])
        for j in np.flatnonzero(d < max_dist) + i + 1:
            a, b = find(ref_ids[i]), find(ref_ids[j])
            if a != b:
                parent[max(a, b)] = min(a, b)
    groups: Dict[int, List[int]] = {}
    for t in ref_ids:
        groups.setdefault(find(t), []).append(t)

    q_to_lm: Dict[int, int] = {}
    if len(ref_ids):
        for qt in sorted(query):
            qx, qy = query[qt]
            d = np.hypot(xy[:, 0] - qx, xy[:, 1] - qy)
            j = int(np.argmin(d))
            if d[j] < max_dist:
                q_to_lm[qt] = find(ref_ids[j])
    used = set(q_to_lm.values())
    return {lm: groups[lm] for lm in sorted(used)}, q_to_lm


# --- report files ---------------------------------------------------------

def _pct_str(v: Optional[float]) -> str:
    return "" if v is None else f"{v:.2f}"


def report_to_dict(report: RetrievalReport) -> dict:
    def finite(v):
        return None if math.isinf(v) else v

    bins = []
    for b in report.bins:
        entry = {"label": b.interval.label, "lo": finite(b.interval.lo), "hi": finite(b.interval.hi), "count": b.count}
        if b.recall_at is not None:
            entry["recall"] = {str(k): v for k, v in b.recall_at.items()}
        bins.append(entry)
    return {
        "method": report.method,
        "total_queries": report.total_queries,
        "recall": {str(k): v for k, v in report.recall_at.items()},
        "bins": bins,
    }


def write_report_json(report: RetrievalReport, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report_to_dict(report), fh, indent=2)
        fh.write("\n")


def report_rows(report: RetrievalReport, ks=KS) -> List[List[str]]:
    rows = [[report.method, "all", str(report.total_queries)] + [_pct_str(report.recall_at.get(k)) for k in ks]]
    for b in report.bins:
        rec = b.recall_at or {}
        rows.append([report.method, b.interval.label, str(b.count)] + [_pct_str(rec.get(k)) for k in ks])
    return rows


def write_report_csv(reports: Sequence[RetrievalReport], path, ks=KS) -> None:
    """Table-style CSV: ``method,range,n_query,r1,r5,r10``."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["method", "range", "n_query"] + [f"r{k}" for k in ks])
        for rep in reports:
            w.writerows(report_rows(rep, ks))
