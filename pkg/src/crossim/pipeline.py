"""From logs to training exemplars: windowing, neighbor and map context
selection, polar encoding, and the versioned binary dataset format.

All features live in the intersection-centered polar frame, so a neighbor's
encoding does not depend on which actor observes it; only the selection does.
Extraction exploits that by encoding each frame once and assembling exemplars
by index gathering.
"""

from __future__ import annotations

import hashlib
import json
import math
import struct
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field, replace
from typing import Iterator, Optional

import numpy as np

from . import FEATURE_LAYOUT_VERSION
from .geometry import (ActorState, IntersectionMap, SIGNAL_INDEX,
                       encode_polyline, normalize_angle, normalize_angles,
                       polar_arrays, signal_state_at)
from .trajlog import Frame, LogBuilder, TrajectoryLog

MAGIC = b"ENAC"
FORMAT_VERSION = 1


class MalformedXml(ValueError):
    pass


class InconsistentDt(ValueError):
    pass


class NonMonotoneTime(ValueError):
    pass


class ActorAbsent(KeyError):
    pass


class WindowTooShort(ValueError):
    pass


class VersionMismatch(ValueError):
    pass


class ChecksumMismatch(ValueError):
    pass


# --- SUMO floating-car-data import ---------------------------------------------


def parse_fcd(source, default_length: float = 5.0) -> TrajectoryLog:
    """Stream-parse SUMO FCD XML into a TrajectoryLog.

    SUMO reports headings in degrees clockwise from north; they are converted
    to radians counterclockwise from +x. The frame spacing must be constant.
    """
    builder: Optional[LogBuilder] = None
    frames: list = []
    prev_t: Optional[float] = None
    dt: Optional[float] = None
    try:
        for event, elem in ET.iterparse(source, events=("end",)):
            tag = elem.tag
            if tag == "timestep":
                t = float(elem.get("time"))
                if prev_t is not None:
                    if t <= prev_t:
                        raise NonMonotoneTime(f"time {t} after {prev_t}")
                    gap = t - prev_t
                    if dt is None:
                        dt = gap
                    elif abs(gap - dt) > 1e-6:
                        raise InconsistentDt(f"step {gap} != {dt} at t={t}")
                prev_t = t
                vehicles = []
                for v in elem:
                    if v.tag != "vehicle":
                        continue
                    try:
                        vid = v.get("id")
                        x = float(v.get("x"))
                        y = float(v.get("y"))
                        speed = float(v.get("speed"))
                        angle_deg = float(v.get("angle"))
                    except (TypeError, ValueError) as e:
                        raise MalformedXml(f"bad vehicle element at t={t}: {e}")
                    heading = normalize_angle(math.pi / 2 - math.radians(angle_deg))
                    length = float(v.get("length", default_length))
                    lane = v.get("lane")
                    vehicles.append((vid, x, y, speed, heading, length, lane))
                frames.append((t, vehicles))
                elem.clear()
    except ET.ParseError as e:
        raise MalformedXml(f"XML parse failure at {e.position}: {e}") from e

    if dt is None:
        dt = 0.1
    builder = LogBuilder(dt=dt)
    log = builder.log
    id_map: dict = {}
    id_names: dict = {}
    from .trajlog import _intern_id

    for t, vehicles in frames:
        builder.add_frame(
            t,
            [_intern_id(v[0], id_map, id_names) for v in vehicles],
            [v[1] for v in vehicles], [v[2] for v in vehicles],
            [v[3] for v in vehicles], [v[4] for v in vehicles],
            [v[5] for v in vehicles],
            [log.lane_index(v[6]) for v in vehicles],
        )
    out = builder.finalize(len(frames) * dt)
    if id_names:
        out.id_names = id_names
    return out


# --- selection operations -------------------------------------------------------


def select_neighbors(frame: Frame, actor_id: int, K_n: int, R_n: float,
                     id_names: Optional[dict] = None) -> list[ActorState]:
    """Other vehicles within ``R_n`` of the actor, nearest first, at most
    ``K_n``; distance ties break on the lexicographic vehicle id token."""
    idx = np.nonzero(frame.ids == actor_id)[0]
    if len(idx) == 0:
        raise ActorAbsent(actor_id)
    i = int(idx[0])
    dx = frame.x - frame.x[i]
    dy = frame.y - frame.y[i]
    dist = np.hypot(dx, dy)

    def token(j: int) -> str:
        vid = int(frame.ids[j])
        if id_names and vid in id_names:
            return id_names[vid]
        return str(vid)

    order = sorted(
        (j for j in range(len(frame.ids)) if j != i and dist[j] <= R_n),
        key=lambda j: (dist[j], token(j)),
    )
    out = []
    for j in order[:K_n]:
        out.append(ActorState(
            vehicle_id=token(j), t=frame.t, pos=(frame.x[j], frame.y[j]),
            speed=frame.speed[j], heading=frame.heading[j],
            length=frame.length[j],
        ))
    return out


def lane_distances(imap: IntersectionMap, points: np.ndarray) -> np.ndarray:
    """(n_points, n_lanes) minimum point-to-centerline distances."""
    points = np.atleast_2d(np.asarray(points, dtype=np.float64))
    segs = []
    lane_of_seg = []
    for li, lane in enumerate(imap.approaches):
        pts = lane.centerline
        for k in range(len(pts) - 1):
            segs.append((pts[k], pts[k + 1]))
            lane_of_seg.append(li)
    a = np.array([s[0] for s in segs])
    b = np.array([s[1] for s in segs])
    ab = b - a
    len2 = np.maximum(np.sum(ab * ab, axis=1), 1e-300)
    rel = points[:, None, :] - a[None, :, :]
    t = np.clip(np.sum(rel * ab[None, :, :], axis=2) / len2[None, :], 0.0, 1.0)
    diff = rel - t[:, :, None] * ab[None, :, :]
    d = np.sqrt(np.sum(diff * diff, axis=2))
    lane_of_seg = np.asarray(lane_of_seg)
    out = np.full((len(points), len(imap.approaches)), np.inf)
    for li in range(len(imap.approaches)):
        cols = d[:, lane_of_seg == li]
        if cols.shape[1]:
            out[:, li] = cols.min(axis=1)
    return out


def select_map_context(imap: IntersectionMap, actor_pos, P: int) -> tuple[np.ndarray, np.ndarray]:
    """Indices of the ``P`` nearest lane centerlines (-1 padded) and a
    validity mask."""
    d = lane_distances(imap, np.asarray(actor_pos, dtype=np.float64)[None, :])[0]
    order = np.argsort(d, kind="stable")
    n = min(P, len(order))
    idx = np.full(P, -1, dtype=np.int64)
    idx[:n] = order[:n]
    mask = np.zeros(P, dtype=bool)
    mask[:n] = True
    return idx, mask


# --- window configuration and manifest ------------------------------------------


@dataclass(frozen=True)
class WindowConfig:
    H: int = 10
    F: int = 10
    K_n: int = 8
    R_n: float = 50.0
    P: int = 16
    L: int = 10
    S: Optional[int] = None  # default: number of signalized lanes in the map
    seg_len: float = 2.0
    rear_bumper: bool = False

    @property
    def nbr_dim(self) -> int:
        return 9 if self.rear_bumper else 6

    def resolve_s(self, imap: IntersectionMap) -> int:
        if self.S is not None:
            return self.S
        return len(imap.inbound_signalized())


@dataclass
class DatasetManifest:
    count: int
    H: int
    F: int
    K_n: int
    P: int
    L: int
    S: int
    nbr_dim: int
    R_n: float
    seg_len: float
    rear_bumper: bool
    dt: float
    map_id: str
    layout_version: int = FEATURE_LAYOUT_VERSION
    source_logs: list = field(default_factory=list)
    splits: dict = field(default_factory=dict)  # split name -> list of episode indices

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetManifest":
        return cls(**d)

    def layout_key(self) -> tuple:
        return (self.layout_version, self.H, self.F, self.K_n, self.P,
                self.L, self.S, self.nbr_dim)


class RecordLayout:
    """Field offsets inside one flat float32 exemplar record."""

    def __init__(self, m: DatasetManifest):
        H, F, K, P, L, S, nd = m.H, m.F, m.K_n, m.P, m.L, m.S, m.nbr_dim
        self.fields = {}
        off = 0
        for name, size in [
            ("actor_hist", H * 6),
            ("neighbor_hist", H * K * nd),
            ("neighbor_mask", H * K),
            ("future_neighbors", F * K * nd),
            ("future_neighbor_mask", F * K),
            ("map_ctx", P * L * 6),
            ("map_mask", P * L),
            ("signal_static", S * 6),
            ("signal_onehot", (H + F) * S * 4),
            ("signal_mask", (H + F) * S),
            ("target", F * 3),
            ("meta", 3),  # vehicle id, anchor frame, episode index
        ]:
            self.fields[name] = (off, off + size)
            off += size
        self.stride = off
        self.shapes = {
            "actor_hist": (H, 6),
            "neighbor_hist": (H, K, nd),
            "neighbor_mask": (H, K),
            "future_neighbors": (F, K, nd),
            "future_neighbor_mask": (F, K),
            "map_ctx": (P, L, 6),
            "map_mask": (P, L),
            "signal_static": (S, 6),
            "signal_onehot": (H + F, S, 4),
            "signal_mask": (H + F, S),
            "target": (F, 3),
            "meta": (3,),
        }

    def view(self, records: np.ndarray, name: str) -> np.ndarray:
        lo, hi = self.fields[name]
        return records[..., lo:hi].reshape(records.shape[:-1] + self.shapes[name])


@dataclass
class Exemplar:
    """One training sample, fully materialized."""

    actor_hist: np.ndarray
    neighbor_hist: np.ndarray
    neighbor_mask: np.ndarray
    future_neighbors: np.ndarray
    future_neighbor_mask: np.ndarray
    map_ctx: np.ndarray
    map_mask: np.ndarray
    signal_ctx: np.ndarray   # (H+F, S, 10): lane-end vector + one-hot state
    signal_mask: np.ndarray
    target: np.ndarray       # (F, 3): speed, sin/cos heading
    dt: float
    vehicle_id: int = -1
    anchor_frame: int = -1
    episode: int = 0


def _exemplar_from_record(rec: np.ndarray, layout: RecordLayout, dt: float) -> Exemplar:
    static = layout.view(rec, "signal_static")          # (S, 6)
    onehot = layout.view(rec, "signal_onehot")          # (H+F, S, 4)
    sig = np.concatenate(
        [np.broadcast_to(static[None], onehot.shape[:2] + (6,)), onehot], axis=-1
    ).astype(np.float32)
    meta = layout.view(rec, "meta")
    return Exemplar(
        actor_hist=layout.view(rec, "actor_hist").copy(),
        neighbor_hist=layout.view(rec, "neighbor_hist").copy(),
        neighbor_mask=layout.view(rec, "neighbor_mask") > 0.5,
        future_neighbors=layout.view(rec, "future_neighbors").copy(),
        future_neighbor_mask=layout.view(rec, "future_neighbor_mask") > 0.5,
        map_ctx=layout.view(rec, "map_ctx").copy(),
        map_mask=layout.view(rec, "map_mask") > 0.5,
        signal_ctx=sig,
        signal_mask=layout.view(rec, "signal_mask") > 0.5,
        target=layout.view(rec, "target").copy(),
        dt=dt,
        vehicle_id=int(meta[0]),
        anchor_frame=int(meta[1]),
        episode=int(meta[2]),
    )


# --- frame-level encoders (shared with the rollout engine) -----------------------


def encode_actor_arrays(x, y, speed, heading, length, center,
                        rear_bumper: bool) -> np.ndarray:
    """(n, 6) polar features, or (n, 9) with the rear-bumper polar triplet."""
    r, st, ct = polar_arrays(x, y, center)
    sin_a = np.sin(heading)
    cos_a = np.cos(heading)
    cols = [r, st, ct, np.asarray(speed, dtype=np.float64), sin_a, cos_a]
    if rear_bumper:
        rx = np.asarray(x) - np.asarray(length) * cos_a
        ry = np.asarray(y) - np.asarray(length) * sin_a
        rr, rst, rct = polar_arrays(rx, ry, center)
        cols += [rr, rst, rct]
    return np.stack(cols, axis=1).astype(np.float32)


class MapEncoding:
    """Static per-map tensors: polyline encodings and signal lane geometry."""

    def __init__(self, imap: IntersectionMap, cfg: WindowConfig):
        self.imap = imap
        self.cfg = cfg
        self.S = cfg.resolve_s(imap)
        n_lanes = len(imap.approaches)
        self.lane_vectors = np.zeros((n_lanes, cfg.L, 6), dtype=np.float32)
        self.lane_valid = np.zeros((n_lanes, cfg.L), dtype=bool)
        for li, lane in enumerate(imap.approaches):
            vecs, valid = encode_polyline(lane.centerline, imap.center,
                                          cfg.L, cfg.seg_len)
            for k, v in enumerate(vecs):
                self.lane_vectors[li, k] = v.as_array()
            self.lane_valid[li] = valid
        self.signal_lanes = imap.inbound_signalized()[: self.S]
        self.signal_lane_idx = {ln.id: k for k, ln in enumerate(self.signal_lanes)}
        self.signal_static = np.zeros((self.S, 6), dtype=np.float32)
        for k, lane in enumerate(self.signal_lanes):
            p0, p1 = lane.centerline[-2], lane.centerline[-1]
            mid = 0.5 * (p0 + p1)
            r, st, ct = polar_arrays(np.array([mid[0]]), np.array([mid[1]]), imap.center)
            alpha = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
            ell = math.hypot(p1[0] - p0[0], p1[1] - p0[1])
            self.signal_static[k] = [r[0], st[0], ct[0], ell,
                                     math.sin(alpha), math.cos(alpha)]
        # lane index (into map.approaches) of each signalized lane
        ids = [ln.id for ln in imap.approaches]
        self.signal_lane_positions = np.array(
            [ids.index(ln.id) for ln in self.signal_lanes], dtype=np.int64)

    def signal_onehot_at(self, t: float) -> np.ndarray:
        out = np.zeros((self.S, 4), dtype=np.float32)
        for k, lane in enumerate(self.signal_lanes):
            state = signal_state_at(self.imap.signal_plan, lane.signal_group, t)
            out[k, SIGNAL_INDEX[state]] = 1.0
        return out


# --- exemplar extraction ---------------------------------------------------------


class _LogIndex:
    """Per-log precomputation for fast window assembly."""

    def __init__(self, log: TrajectoryLog, imap: IntersectionMap, cfg: WindowConfig,
                 enc: MapEncoding):
        self.log = log
        self.cfg = cfg
        self.enc = enc
        self.features = []      # per frame: (n, nbr_dim) float32
        self.neighbors = []     # per frame: (n, K_n) int32 row index, -1 pad
        self.row_of = []        # per frame: dict vid -> row
        self.positions = []     # per frame: (n, 2)
        self.signal_onehot = np.stack(
            [enc.signal_onehot_at(f.t) for f in log.frames]
        ) if log.frames else np.zeros((0, enc.S, 4), dtype=np.float32)

        # lexicographic rank of each vehicle id token for tie-breaks
        all_ids = sorted({int(i) for f in log.frames for i in f.ids})
        tokens = {vid: (log.id_names.get(vid, str(vid)) if log.id_names else str(vid))
                  for vid in all_ids}
        by_token = sorted(all_ids, key=lambda v: tokens[v])
        self.lex_rank = {vid: k for k, vid in enumerate(by_token)}

        for f in log.frames:
            n = len(f.ids)
            feats = encode_actor_arrays(f.x, f.y, f.speed, f.heading, f.length,
                                        imap.center, cfg.rear_bumper)
            self.features.append(feats)
            self.positions.append(np.stack([f.x, f.y], axis=1))
            self.row_of.append({int(v): k for k, v in enumerate(f.ids)})
            nbr = np.full((n, cfg.K_n), -1, dtype=np.int32)
            if n > 1:
                dx = f.x[:, None] - f.x[None, :]
                dy = f.y[:, None] - f.y[None, :]
                dist = np.hypot(dx, dy)
                ranks = np.array([self.lex_rank[int(v)] for v in f.ids], dtype=np.int64)
                for i in range(n):
                    cand = [(dist[i, j], ranks[j], j) for j in range(n)
                            if j != i and dist[i, j] <= cfg.R_n]
                    cand.sort()
                    for k, (_, _, j) in enumerate(cand[: cfg.K_n]):
                        nbr[i, k] = j
            self.neighbors.append(nbr)


def iter_exemplar_records(log: TrajectoryLog, imap: IntersectionMap,
                          cfg: WindowConfig, episode: int = 0,
                          enc: Optional[MapEncoding] = None,
                          layout: Optional[RecordLayout] = None) -> Iterator[np.ndarray]:
    """Yield flat float32 records, one per (vehicle, anchor) window.

    A window anchored at frame j requires the vehicle present over frames
    [j-H, j+F]; history features cover frames j-H+1..j and targets frames
    j+1..j+F.
    """
    cfg_s = cfg.resolve_s(imap)
    if enc is None:
        enc = MapEncoding(imap, cfg)
    if layout is None:
        layout = RecordLayout(_manifest_stub(cfg, cfg_s, log, imap))
    H, F, K = cfg.H, cfg.F, cfg.K_n
    if log.n_frames < H + F + 1:
        raise WindowTooShort(
            f"log has {log.n_frames} frames; windows need {H + F + 1}")
    idx = _LogIndex(log, imap, cfg, enc)
    presence = log.presence()
    nd = cfg.nbr_dim

    for vid in sorted(presence):
        first, last = presence[vid]
        # anchors j with [j-H, j+F] inside the presence interval
        for j in range(first + H, last - F + 1):
            rec = np.zeros(layout.stride, dtype=np.float32)
            hist_frames = range(j - H + 1, j + 1)
            fut_frames = range(j + 1, j + F + 1)

            ah = layout.view(rec, "actor_hist")
            nh = layout.view(rec, "neighbor_hist")
            nm = layout.view(rec, "neighbor_mask")
            for k, fi in enumerate(hist_frames):
                row = idx.row_of[fi][vid]
                ah[k] = idx.features[fi][row][:6]
                nbr = idx.neighbors[fi][row]
                valid = nbr >= 0
                nm[k] = valid
                if valid.any():
                    nh[k][valid] = idx.features[fi][nbr[valid]][:, :nd]

            fn = layout.view(rec, "future_neighbors")
            fm = layout.view(rec, "future_neighbor_mask")
            tg = layout.view(rec, "target")
            for k, fi in enumerate(fut_frames):
                row = idx.row_of[fi][vid]
                nbr = idx.neighbors[fi][row]
                valid = nbr >= 0
                fm[k] = valid
                if valid.any():
                    fn[k][valid] = idx.features[fi][nbr[valid]][:, :nd]
                f = log.frames[fi]
                tg[k] = (f.speed[row], math.sin(f.heading[row]),
                         math.cos(f.heading[row]))

            row_j = idx.row_of[j][vid]
            pos = idx.positions[j][row_j]
            lane_idx, lane_mask = select_map_context(imap, pos, cfg.P)
            mc = layout.view(rec, "map_ctx")
            mm = layout.view(rec, "map_mask")
            sel = lane_idx[lane_mask]
            mc[lane_mask] = enc.lane_vectors[sel]
            mm[lane_mask] = enc.lane_valid[sel]

            layout.view(rec, "signal_static")[:] = enc.signal_static
            so = layout.view(rec, "signal_onehot")
            sm = layout.view(rec, "signal_mask")
            # signals of lanes among the selected polylines
            sig_sel = np.isin(enc.signal_lane_positions, sel)
            frames_window = list(hist_frames) + list(fut_frames)
            for k, fi in enumerate(frames_window):
                so[k] = idx.signal_onehot[fi]
                sm[k] = sig_sel

            layout.view(rec, "meta")[:] = (float(vid), float(j), float(episode))
            yield rec


def _manifest_stub(cfg: WindowConfig, S: int, log: TrajectoryLog,
                   imap: IntersectionMap) -> DatasetManifest:
    return DatasetManifest(
        count=0, H=cfg.H, F=cfg.F, K_n=cfg.K_n, P=cfg.P, L=cfg.L, S=S,
        nbr_dim=cfg.nbr_dim, R_n=cfg.R_n, seg_len=cfg.seg_len,
        rear_bumper=cfg.rear_bumper, dt=log.dt, map_id=imap.map_id,
    )


def extract_exemplars(log: TrajectoryLog, imap: IntersectionMap,
                      cfg: WindowConfig) -> Iterator[Exemplar]:
    """Materialized-exemplar view of :func:`iter_exemplar_records`."""
    S = cfg.resolve_s(imap)
    layout = RecordLayout(_manifest_stub(cfg, S, log, imap))
    for rec in iter_exemplar_records(log, imap, cfg, layout=layout):
        yield _exemplar_from_record(rec, layout, log.dt)


def expected_exemplar_count(log: TrajectoryLog, cfg: WindowConfig) -> int:
    """Window-combinatorics count: sum over vehicles of
    max(0, presence - (H + F))."""
    total = 0
    for first, last in log.presence().values():
        total += max(0, (last - first + 1) - (cfg.H + cfg.F))
    return total


# --- dataset file ----------------------------------------------------------------


class Dataset:
    """Read view over a dataset file: manifest plus memory-mapped records."""

    def __init__(self, manifest: DatasetManifest, records: np.ndarray):
        self.manifest = manifest
        self.records = records
        self.layout = RecordLayout(manifest)

    def __len__(self) -> int:
        return self.manifest.count

    def exemplar(self, i: int) -> Exemplar:
        return _exemplar_from_record(np.asarray(self.records[i]), self.layout,
                                     self.manifest.dt)

    def field(self, name: str, indices=None) -> np.ndarray:
        rows = self.records if indices is None else self.records[indices]
        return self.layout.view(np.asarray(rows, dtype=np.float32), name)

    def episodes(self) -> np.ndarray:
        return self.field("meta")[:, 2].astype(np.int64)

    def split_indices(self, name: str) -> np.ndarray:
        eps = set(self.manifest.splits.get(name, []))
        episode_of = self.episodes()
        return np.nonzero([int(e) in eps for e in episode_of])[0]


def write_dataset(path, manifest: DatasetManifest, record_iter) -> DatasetManifest:
    """Stream records to ``path``; returns the manifest with the final count."""
    layout = RecordLayout(manifest)
    count = 0
    h = hashlib.sha256()
    with open(path, "wb") as f:
        def emit(b: bytes):
            h.update(b)
            f.write(b)

        emit(MAGIC)
        emit(struct.pack("<H", FORMAT_VERSION))
        manifest_bytes = json.dumps(manifest.to_dict()).encode("utf-8")
        emit(struct.pack("<I", len(manifest_bytes)))
        emit(manifest_bytes)
        for rec in record_iter:
            rec = np.ascontiguousarray(rec, dtype="<f4")
            if rec.size != layout.stride:
                raise ValueError(f"record size {rec.size} != stride {layout.stride}")
            emit(rec.tobytes())
            count += 1
        emit(struct.pack("<q", count))
        f.write(h.digest()[:8])
    manifest = replace(manifest, count=count)
    # rewrite the manifest in place with the true count, keeping the checksum valid
    return _rewrite_manifest(path, manifest)


def _rewrite_manifest(path, manifest: DatasetManifest) -> DatasetManifest:
    with open(path, "rb") as f:
        data = bytearray(f.read())
    old_len = struct.unpack("<I", data[6:10])[0]
    new_manifest = json.dumps(manifest.to_dict()).encode("utf-8")
    new = bytearray()
    new += data[:6]
    new += struct.pack("<I", len(new_manifest))
    new += new_manifest
    new += data[10 + old_len:-8]
    h = hashlib.sha256(bytes(new)).digest()[:8]
    new += h
    with open(path, "wb") as f:
        f.write(bytes(new))
    return manifest


def read_dataset(path, verify: bool = True) -> Dataset:
    with open(path, "rb") as f:
        head = f.read(6)
        if head[:4] != MAGIC:
            raise VersionMismatch(f"bad magic {head[:4]!r}")
        version = struct.unpack("<H", head[4:6])[0]
        if version != FORMAT_VERSION:
            raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
        mlen = struct.unpack("<I", f.read(4))[0]
        manifest = DatasetManifest.from_dict(json.loads(f.read(mlen).decode("utf-8")))
        data_start = 10 + mlen
    if verify:
        h = hashlib.sha256()
        with open(path, "rb") as f:
            data = f.read()
        if len(data) < data_start + 16:
            raise ChecksumMismatch("file truncated")
        h.update(data[:-8])
        if h.digest()[:8] != data[-8:]:
            raise ChecksumMismatch("checksum does not match contents")
    layout = RecordLayout(manifest)
    import os

    total = os.path.getsize(path)
    payload = total - data_start - 8 - 8  # trailing count + checksum
    if payload != manifest.count * layout.stride * 4:
        raise ChecksumMismatch(
            f"payload holds {payload // (layout.stride * 4)} records, "
            f"manifest says {manifest.count}")
    records = np.memmap(path, dtype="<f4", mode="r", offset=data_start,
                        shape=(manifest.count, layout.stride))
    return Dataset(manifest, records)


def build_dataset(path, logs: list, imap: IntersectionMap, cfg: WindowConfig,
                  splits: Optional[dict] = None,
                  source_names: Optional[list] = None) -> DatasetManifest:
    """Extract exemplars from one or more logs (episodes) into a dataset file.

    Episodes are the split unit; by default the last episode is validation
    when there are at least two, otherwise everything is training.
    """
    S = cfg.resolve_s(imap)
    manifest = DatasetManifest(
        count=0, H=cfg.H, F=cfg.F, K_n=cfg.K_n, P=cfg.P, L=cfg.L, S=S,
        nbr_dim=cfg.nbr_dim, R_n=cfg.R_n, seg_len=cfg.seg_len,
        rear_bumper=cfg.rear_bumper, dt=logs[0].dt, map_id=imap.map_id,
        source_logs=source_names or [f"episode{i}" for i in range(len(logs))],
    )
    if splits is None:
        if len(logs) >= 2:
            splits = {"train": list(range(len(logs) - 1)), "val": [len(logs) - 1]}
        else:
            splits = {"train": [0], "val": []}
    manifest.splits = splits
    enc = MapEncoding(imap, cfg)
    layout = RecordLayout(manifest)

    def all_records():
        for ep, log in enumerate(logs):
            if abs(log.dt - manifest.dt) > 1e-9:
                raise InconsistentDt("episodes disagree on dt")
            try:
                yield from iter_exemplar_records(log, imap, cfg, episode=ep,
                                                 enc=enc, layout=layout)
            except WindowTooShort:
                continue

    return write_dataset(path, manifest, all_records())
