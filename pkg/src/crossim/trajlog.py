"""Time-indexed vehicle state logs and their JSONL / CSV serialization.

A log is a sequence of frames at constant spacing ``dt``; each frame holds
columnar arrays over the vehicles present at that instant. Positions are
front bumpers, world frame.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Iterator, Optional

import numpy as np


class LogFormatError(ValueError):
    """A serialized log violates the expected structure."""


@dataclass
class Frame:
    t: float
    ids: np.ndarray      # int64
    x: np.ndarray        # float64
    y: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    length: np.ndarray
    lane: np.ndarray     # int32 index into TrajectoryLog.lane_names, -1 = none

    def __len__(self) -> int:
        return len(self.ids)


@dataclass
class FlatLog:
    """Whole-log columnar view: one row per (frame, vehicle)."""

    offsets: np.ndarray   # (n_frames + 1,) row ranges per frame
    frame_t: np.ndarray   # (n_frames,)
    frame_idx: np.ndarray  # per row
    ids: np.ndarray
    x: np.ndarray
    y: np.ndarray
    speed: np.ndarray
    heading: np.ndarray
    length: np.ndarray
    lane: np.ndarray


@dataclass
class TrajectoryLog:
    dt: float
    map_id: str = ""
    seed: int = 0
    duration: float = 0.0
    frames: list = field(default_factory=list)
    lane_names: list = field(default_factory=list)
    id_names: Optional[dict] = None  # int id -> external string id
    _flat: Optional[FlatLog] = field(default=None, repr=False, compare=False)

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    def lane_index(self, token: Optional[str]) -> int:
        if token is None or token == "":
            return -1
        try:
            return self.lane_names.index(token)
        except ValueError:
            self.lane_names.append(token)
            return len(self.lane_names) - 1

    def lane_token(self, idx: int) -> Optional[str]:
        return None if idx < 0 else self.lane_names[idx]

    def id_token(self, vid: int) -> str:
        if self.id_names is not None and vid in self.id_names:
            return self.id_names[vid]
        return str(int(vid))

    def flat(self) -> FlatLog:
        if self._flat is None:
            counts = np.array([len(f) for f in self.frames], dtype=np.int64)
            offsets = np.concatenate([[0], np.cumsum(counts)])
            cat = lambda name, dtype: (
                np.concatenate([getattr(f, name) for f in self.frames])
                if self.frames else np.empty(0, dtype=dtype)
            ).astype(dtype, copy=False)
            self._flat = FlatLog(
                offsets=offsets,
                frame_t=np.array([f.t for f in self.frames]),
                frame_idx=np.repeat(np.arange(len(self.frames)), counts)
                if self.frames else np.empty(0, dtype=np.int64),
                ids=cat("ids", np.int64),
                x=cat("x", np.float64),
                y=cat("y", np.float64),
                speed=cat("speed", np.float64),
                heading=cat("heading", np.float64),
                length=cat("length", np.float64),
                lane=cat("lane", np.int32),
            )
        return self._flat

    def presence(self) -> dict:
        """vehicle id -> (first frame index, last frame index), inclusive."""
        out: dict = {}
        for fi, f in enumerate(self.frames):
            for vid in f.ids:
                vid = int(vid)
                if vid in out:
                    out[vid] = (out[vid][0], fi)
                else:
                    out[vid] = (fi, fi)
        return out

    def validate(self) -> None:
        """Check the structural log invariants; raises LogFormatError."""
        prev_t = None
        for f in self.frames:
            if prev_t is not None:
                if f.t <= prev_t or abs((f.t - prev_t) - self.dt) > 1e-6:
                    raise LogFormatError(f"frame spacing broken at t={f.t}")
            prev_t = f.t
            if np.any(f.speed < 0):
                raise LogFormatError(f"negative speed at t={f.t}")
        seen_gone: set = set()
        present_prev: set = set()
        for f in self.frames:
            here = set(int(i) for i in f.ids)
            if len(here) != len(f.ids):
                raise LogFormatError(f"duplicate vehicle id at t={f.t}")
            returned = here & seen_gone
            if returned:
                raise LogFormatError(f"vehicle {returned} reappeared at t={f.t}")
            seen_gone |= present_prev - here
            present_prev = here


class LogBuilder:
    """Append-only construction of a TrajectoryLog."""

    def __init__(self, dt: float, map_id: str = "", seed: int = 0,
                 lane_names: Optional[list] = None):
        self.log = TrajectoryLog(dt=dt, map_id=map_id, seed=seed,
                                 lane_names=list(lane_names or []))

    def add_frame(self, t, ids, x, y, speed, heading, length, lane) -> None:
        self.log.frames.append(Frame(
            t=float(t),
            ids=np.asarray(ids, dtype=np.int64),
            x=np.asarray(x, dtype=np.float64),
            y=np.asarray(y, dtype=np.float64),
            speed=np.asarray(speed, dtype=np.float64),
            heading=np.asarray(heading, dtype=np.float64),
            length=np.asarray(length, dtype=np.float64),
            lane=np.asarray(lane, dtype=np.int32),
        ))

    def finalize(self, duration: Optional[float] = None) -> TrajectoryLog:
        if duration is None:
            duration = self.log.n_frames * self.log.dt
        self.log.duration = float(duration)
        return self.log


# --- JSONL --------------------------------------------------------------------


def write_jsonl(log: TrajectoryLog, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        _dump_jsonl(log, f)


def _dump_jsonl(log: TrajectoryLog, f) -> None:
    header = {"dt": log.dt, "map_id": log.map_id, "seed": log.seed,
              "duration": log.duration}
    f.write(json.dumps(header) + "\n")
    for fr in log.frames:
        vehicles = []
        for i in range(len(fr)):
            vehicles.append({
                "id": log.id_token(fr.ids[i]),
                "x": float(fr.x[i]),
                "y": float(fr.y[i]),
                "speed": float(fr.speed[i]),
                "heading": float(fr.heading[i]),
                "length": float(fr.length[i]),
                "lane": log.lane_token(int(fr.lane[i])),
            })
        f.write(json.dumps({"t": fr.t, "vehicles": vehicles}) + "\n")


def jsonl_to_string(log: TrajectoryLog) -> str:
    buf = io.StringIO()
    _dump_jsonl(log, buf)
    return buf.getvalue()


def read_jsonl(path) -> TrajectoryLog:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise LogFormatError("empty log file")
    header = json.loads(lines[0])
    for key in ("dt", "map_id", "seed", "duration"):
        if key not in header:
            raise LogFormatError(f"header missing {key!r}")
    builder = LogBuilder(dt=float(header["dt"]), map_id=str(header["map_id"]),
                         seed=int(header["seed"]))
    log = builder.log
    id_map: dict = {}
    id_names: dict = {}
    for ln in lines[1:]:
        if not ln.strip():
            continue
        rec = json.loads(ln)
        vs = rec["vehicles"]
        ids = [_intern_id(v["id"], id_map, id_names) for v in vs]
        builder.add_frame(
            rec["t"], ids,
            [v["x"] for v in vs], [v["y"] for v in vs],
            [v["speed"] for v in vs], [v["heading"] for v in vs],
            [v["length"] for v in vs],
            [log.lane_index(v.get("lane")) for v in vs],
        )
    out = builder.finalize(float(header["duration"]))
    if id_names:
        out.id_names = id_names
    return out


_STRING_ID_BASE = 1_000_000_000  # non-numeric ids intern above this offset


def _intern_id(raw, id_map: dict, id_names: dict) -> int:
    key = str(raw)
    if key in id_map:
        return id_map[key]
    try:
        vid = int(key)
    except ValueError:
        vid = _STRING_ID_BASE + len(id_names)
        id_names[vid] = key
    id_map[key] = vid
    return vid


# --- CSV ----------------------------------------------------------------------

CSV_COLUMNS = ["t", "id", "x", "y", "speed", "heading", "length", "lane"]


def write_csv(log: TrajectoryLog, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_COLUMNS)
        for fr in log.frames:
            for i in range(len(fr)):
                w.writerow([
                    repr(fr.t), log.id_token(fr.ids[i]),
                    repr(float(fr.x[i])), repr(float(fr.y[i])),
                    repr(float(fr.speed[i])), repr(float(fr.heading[i])),
                    repr(float(fr.length[i])),
                    log.lane_token(int(fr.lane[i])) or "",
                ])


def read_csv(path, dt: Optional[float] = None) -> TrajectoryLog:
    """Read the CSV export. ``dt`` is inferred from the time column when not
    given (the CSV carries no header metadata)."""
    rows = []
    with open(path, "r", encoding="utf-8", newline="") as f:
        r = csv.reader(f)
        header = next(r, None)
        if header != CSV_COLUMNS:
            raise LogFormatError(f"unexpected CSV header {header}")
        for row in r:
            rows.append(row)
    times = sorted({float(row[0]) for row in rows})
    if dt is None:
        if len(times) < 2:
            dt = 0.1
        else:
            dt = times[1] - times[0]
    builder = LogBuilder(dt=float(dt))
    log = builder.log
    id_map: dict = {}
    id_names: dict = {}
    by_t: dict = {t: [] for t in times}
    for row in rows:
        by_t[float(row[0])].append(row)
    for t in times:
        group = by_t[t]
        builder.add_frame(
            t,
            [_intern_id(row[1], id_map, id_names) for row in group],
            [float(row[2]) for row in group],
            [float(row[3]) for row in group],
            [float(row[4]) for row in group],
            [float(row[5]) for row in group],
            [float(row[6]) for row in group],
            [log.lane_index(row[7] or None) for row in group],
        )
    out = builder.finalize(len(times) * dt if times else 0.0)
    if id_names:
        out.id_names = id_names
    return out
