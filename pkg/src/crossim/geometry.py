"""Intersection geometry: lanes, signal plans, and polar feature encoding.

All world positions are Cartesian meters. Angles are radians, measured
counterclockwise from the world +x axis and normalized to (-pi, pi].
A vehicle's ``pos`` always denotes its front bumper; the rear bumper is
derived from heading and length.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_PI = 2.0 * math.pi

# one-hot ordering for signal states
SIGNAL_STATES = ("red", "yellow", "flashing-yellow", "green")
SIGNAL_INDEX = {s: i for i, s in enumerate(SIGNAL_STATES)}


class MapValidationError(ValueError):
    """An intersection map violates a structural invariant."""


class DegeneratePolyline(ValueError):
    """A polyline has zero total length."""


class UnknownGroup(KeyError):
    """Signal group not present in the plan."""


class NotSignalized(ValueError):
    """Lane has no stop line / signal group."""


def normalize_angle(a: float) -> float:
    """Wrap an angle to (-pi, pi]."""
    a = a % TWO_PI
    if a > math.pi:
        a -= TWO_PI
    return a


def normalize_angles(a: np.ndarray) -> np.ndarray:
    """Vectorized wrap to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64) % TWO_PI
    return np.where(a > math.pi, a - TWO_PI, a)


def to_polar(p, center) -> tuple[float, float, float]:
    """Polar encoding of a point about ``center``: (r, sin_theta, cos_theta).

    At r == 0 the angle is undefined; the convention (cos, sin) = (1, 0)
    keeps this a total function.
    """
    dx = float(p[0]) - float(center[0])
    dy = float(p[1]) - float(center[1])
    r = math.hypot(dx, dy)
    if r == 0.0:
        return 0.0, 0.0, 1.0
    return r, dy / r, dx / r


def polar_arrays(xs: np.ndarray, ys: np.ndarray, center) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Vectorized :func:`to_polar` over coordinate arrays."""
    dx = np.asarray(xs, dtype=np.float64) - float(center[0])
    dy = np.asarray(ys, dtype=np.float64) - float(center[1])
    r = np.hypot(dx, dy)
    safe = np.where(r > 0.0, r, 1.0)
    sin_t = np.where(r > 0.0, dy / safe, 0.0)
    cos_t = np.where(r > 0.0, dx / safe, 1.0)
    return r, sin_t, cos_t


@dataclass(frozen=True)
class PolarFeature:
    """Actor state in the intersection-centered polar frame."""

    r: float
    sin_theta: float
    cos_theta: float
    s: float
    sin_alpha: float
    cos_alpha: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.r, self.sin_theta, self.cos_theta, self.s, self.sin_alpha, self.cos_alpha],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class MapVector:
    """One resampled lane-centerline segment: midpoint polar position,
    segment length, and orientation."""

    r: float
    sin_theta: float
    cos_theta: float
    ell: float
    sin_alpha: float
    cos_alpha: float

    def as_array(self) -> np.ndarray:
        return np.array(
            [self.r, self.sin_theta, self.cos_theta, self.ell, self.sin_alpha, self.cos_alpha],
            dtype=np.float32,
        )


@dataclass(frozen=True)
class SignalVector:
    """Lane-end map vector with the one-hot signal state appended."""

    map_vector: MapVector
    e_sig: tuple[int, int, int, int]

    def as_array(self) -> np.ndarray:
        return np.concatenate(
            [self.map_vector.as_array(), np.asarray(self.e_sig, dtype=np.float32)]
        )


@dataclass(frozen=True)
class ActorState:
    """World-frame kinematic record of one vehicle at one timestep."""

    vehicle_id: str
    t: float
    pos: tuple[float, float]
    speed: float
    heading: float
    length: float = 5.0
    accel: Optional[float] = None

    def __post_init__(self):
        object.__setattr__(self, "heading", normalize_angle(self.heading))
        if self.speed < 0:
            raise ValueError(f"negative speed {self.speed}")
        if self.length <= 0:
            raise ValueError(f"non-positive length {self.length}")

    def rear_bumper(self) -> tuple[float, float]:
        return (
            self.pos[0] - self.length * math.cos(self.heading),
            self.pos[1] - self.length * math.sin(self.heading),
        )


@dataclass(frozen=True)
class Lane:
    id: str
    centerline: np.ndarray  # (N, 2) float64
    width: float
    direction: str  # inbound | outbound | internal
    stop_line: Optional[np.ndarray] = None  # (2, 2), inbound lanes only
    signal_group: Optional[str] = None
    successor_ids: tuple[str, ...] = ()

    def __post_init__(self):
        pts = np.asarray(self.centerline, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[0] < 2 or pts.shape[1] != 2:
            raise MapValidationError(f"lane {self.id}: centerline needs >= 2 2D points")
        if np.any(np.all(np.diff(pts, axis=0) == 0.0, axis=1)):
            raise MapValidationError(f"lane {self.id}: consecutive duplicate points")
        pts.setflags(write=False)
        object.__setattr__(self, "centerline", pts)
        if self.stop_line is not None:
            sl = np.asarray(self.stop_line, dtype=np.float64)
            if sl.shape != (2, 2):
                raise MapValidationError(f"lane {self.id}: stop_line must be a 2-point segment")
            sl.setflags(write=False)
            object.__setattr__(self, "stop_line", sl)

    @property
    def length(self) -> float:
        return float(np.sum(np.hypot(*np.diff(self.centerline, axis=0).T)))

    def cumlen(self) -> np.ndarray:
        seg = np.hypot(*np.diff(self.centerline, axis=0).T)
        return np.concatenate([[0.0], np.cumsum(seg)])

    def point_at(self, s: float) -> tuple[float, float, float]:
        """Point and tangent heading at arclength ``s`` (clamped to the lane)."""
        cum = self.cumlen()
        s = min(max(s, 0.0), cum[-1])
        i = int(np.searchsorted(cum, s, side="right") - 1)
        i = min(i, len(cum) - 2)
        p0, p1 = self.centerline[i], self.centerline[i + 1]
        seg = cum[i + 1] - cum[i]
        f = 0.0 if seg == 0 else (s - cum[i]) / seg
        x = p0[0] + f * (p1[0] - p0[0])
        y = p0[1] + f * (p1[1] - p0[1])
        heading = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
        return x, y, heading


@dataclass(frozen=True)
class SignalPlan:
    cycle_length: float
    groups: dict  # group -> tuple of (state, duration)

    def __post_init__(self):
        groups = {}
        for name, phases in self.groups.items():
            phases = tuple((str(st), float(d)) for st, d in phases)
            for st, d in phases:
                if st not in SIGNAL_INDEX:
                    raise MapValidationError(f"group {name}: unknown state {st!r}")
                if d < 0:
                    raise MapValidationError(f"group {name}: negative duration")
            total = math.fsum(d for _, d in phases)
            if abs(total - self.cycle_length) > 1e-9:
                raise MapValidationError(
                    f"group {name}: durations sum to {total}, cycle is {self.cycle_length}"
                )
            groups[str(name)] = phases
        object.__setattr__(self, "groups", groups)


def signal_state_at(plan: SignalPlan, group: str, t: float) -> str:
    """Phase state of ``group`` at time ``t``.

    A phase-boundary instant belongs to the later phase, so lookups are
    right-continuous and periodic with the cycle length.
    """
    if group not in plan.groups:
        raise UnknownGroup(group)
    tm = t % plan.cycle_length
    cum = 0.0
    phases = plan.groups[group]
    for state, dur in phases:
        cum += dur
        if tm < cum:
            return state
    return phases[-1][0]


@dataclass(frozen=True)
class IntersectionMap:
    map_id: str
    center: tuple[float, float]
    approaches: tuple[Lane, ...]
    intersection_polygon: np.ndarray  # (N, 2), closed implicitly
    signal_plan: SignalPlan
    exit_radius: float
    _by_id: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        poly = np.asarray(self.intersection_polygon, dtype=np.float64)
        if poly.ndim != 2 or poly.shape[0] < 3:
            raise MapValidationError("intersection_polygon needs >= 3 points")
        poly.setflags(write=False)
        object.__setattr__(self, "intersection_polygon", poly)
        object.__setattr__(self, "_by_id", {ln.id: ln for ln in self.approaches})
        if len(self._by_id) != len(self.approaches):
            raise MapValidationError("duplicate lane ids")
        self._validate()

    def _validate(self):
        poly = self.intersection_polygon
        if not _polygon_is_simple(poly):
            raise MapValidationError("intersection_polygon self-intersects")
        if not point_in_polygon(self.center, poly):
            raise MapValidationError("center lies outside intersection_polygon")
        for ln in self.approaches:
            if (ln.direction == "inbound") != (ln.stop_line is not None):
                raise MapValidationError(f"lane {ln.id}: stop_line present iff inbound")
            if ln.direction == "inbound" and ln.signal_group is None:
                raise MapValidationError(f"lane {ln.id}: inbound lane needs a signal_group")
            if ln.signal_group is not None and ln.signal_group not in self.signal_plan.groups:
                raise MapValidationError(f"lane {ln.id}: unknown signal group {ln.signal_group}")
            if ln.stop_line is not None:
                if _stopline_centerline_crossings(ln) != 1:
                    raise MapValidationError(
                        f"lane {ln.id}: stop line must cross the centerline exactly once"
                    )
                for end in ln.stop_line:
                    if _dist_to_polygon_boundary(end, poly) > 1.0:
                        raise MapValidationError(
                            f"lane {ln.id}: stop line endpoint too far from the box boundary"
                        )
            for sid in ln.successor_ids:
                if sid not in self._by_id:
                    raise MapValidationError(f"lane {ln.id}: unknown successor {sid}")
            for p in ln.centerline:
                if math.hypot(p[0] - self.center[0], p[1] - self.center[1]) >= self.exit_radius:
                    raise MapValidationError(
                        f"lane {ln.id}: endpoint beyond exit_radius {self.exit_radius}"
                    )

    def lane(self, lane_id: str) -> Lane:
        return self._by_id[lane_id]

    @property
    def lane_ids(self) -> list[str]:
        return [ln.id for ln in self.approaches]

    def inbound_signalized(self) -> list[Lane]:
        return [ln for ln in self.approaches if ln.direction == "inbound"]


def encode_actor(a: ActorState, center) -> PolarFeature:
    """Polar feature of an actor state: (r, sin/cos theta, speed, sin/cos heading)."""
    r, st, ct = to_polar(a.pos, center)
    return PolarFeature(r, st, ct, a.speed, math.sin(a.heading), math.cos(a.heading))


def _polyline_point_at(pts: np.ndarray, cum: np.ndarray, s: float) -> np.ndarray:
    i = int(np.searchsorted(cum, s, side="right") - 1)
    i = max(0, min(i, len(cum) - 2))
    seg = cum[i + 1] - cum[i]
    f = 0.0 if seg == 0 else (s - cum[i]) / seg
    return pts[i] + f * (pts[i + 1] - pts[i])


def encode_polyline(
    centerline: np.ndarray, center, L: int, seg_len: float
) -> tuple[list[MapVector], np.ndarray]:
    """Resample a centerline into exactly ``L`` map vectors of nominal length
    ``seg_len``, measured from the start of the polyline.

    Only the first ``L * seg_len`` meters are covered; the final vector may be
    shorter, and if the polyline runs out, trailing vectors are zero-filled and
    marked invalid in the returned mask.
    """
    pts = np.asarray(centerline, dtype=np.float64)
    if pts.shape[0] < 2:
        raise DegeneratePolyline("centerline needs at least 2 points")
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = float(cum[-1])
    if total == 0.0:
        raise DegeneratePolyline("zero-length centerline")

    vectors: list[MapVector] = []
    valid = np.zeros(L, dtype=bool)
    for k in range(L):
        s0 = k * seg_len
        s1 = min((k + 1) * seg_len, total)
        if s0 >= total:
            vectors.append(MapVector(0.0, 0.0, 0.0, 0.0, 0.0, 0.0))
            continue
        p0 = _polyline_point_at(pts, cum, s0)
        p1 = _polyline_point_at(pts, cum, s1)
        mid = _polyline_point_at(pts, cum, 0.5 * (s0 + s1))
        r, st, ct = to_polar(mid, center)
        chord = p1 - p0
        alpha = math.atan2(chord[1], chord[0])
        vectors.append(MapVector(r, st, ct, s1 - s0, math.sin(alpha), math.cos(alpha)))
        valid[k] = True
    return vectors, valid


def encode_signal(lane: Lane, plan: SignalPlan, t: float, center) -> SignalVector:
    """Signal vector for an inbound lane: the final centerline segment (ending
    at the stop line) plus the one-hot phase state at time ``t``."""
    if lane.stop_line is None or lane.signal_group is None:
        raise NotSignalized(f"lane {lane.id} has no signal group")
    p0, p1 = lane.centerline[-2], lane.centerline[-1]
    mid = 0.5 * (p0 + p1)
    r, st, ct = to_polar(mid, center)
    alpha = math.atan2(p1[1] - p0[1], p1[0] - p0[0])
    ell = float(math.hypot(p1[0] - p0[0], p1[1] - p0[1]))
    mv = MapVector(r, st, ct, ell, math.sin(alpha), math.cos(alpha))
    state = signal_state_at(plan, lane.signal_group, t)
    onehot = [0, 0, 0, 0]
    onehot[SIGNAL_INDEX[state]] = 1
    return SignalVector(mv, tuple(onehot))


def segments_intersect(p1, p2, q1, q2) -> bool:
    """Inclusive 2D segment intersection (touching endpoints count)."""
    d1 = _cross(q2 - q1, p1 - q1)
    d2 = _cross(q2 - q1, p2 - q1)
    d3 = _cross(p2 - p1, q1 - p1)
    d4 = _cross(p2 - p1, q2 - p1)
    if ((d1 > 0 and d2 < 0) or (d1 < 0 and d2 > 0)) and (
        (d3 > 0 and d4 < 0) or (d3 < 0 and d4 > 0)
    ):
        return True
    if d1 == 0 and _on_segment(q1, q2, p1):
        return True
    if d2 == 0 and _on_segment(q1, q2, p2):
        return True
    if d3 == 0 and _on_segment(p1, p2, q1):
        return True
    if d4 == 0 and _on_segment(p1, p2, q2):
        return True
    return False


def _cross(u, v) -> float:
    return float(u[0] * v[1] - u[1] * v[0])


def _on_segment(a, b, p) -> bool:
    return (
        min(a[0], b[0]) <= p[0] <= max(a[0], b[0])
        and min(a[1], b[1]) <= p[1] <= max(a[1], b[1])
    )


def crosses_stop_line(prev: ActorState, curr: ActorState, lane: Lane) -> bool:
    """True iff the front-bumper path from ``prev`` to ``curr`` intersects the
    lane's stop line. A zero-displacement step never crosses."""
    if lane.stop_line is None:
        return False
    p1 = np.asarray(prev.pos, dtype=np.float64)
    p2 = np.asarray(curr.pos, dtype=np.float64)
    if p1[0] == p2[0] and p1[1] == p2[1]:
        return False
    q1, q2 = lane.stop_line[0], lane.stop_line[1]
    return segments_intersect(p1, p2, q1, q2)


def point_in_polygon(p, poly: np.ndarray) -> bool:
    """Ray-casting point-in-polygon test. Boundary points count as inside."""
    x, y = float(p[0]), float(p[1])
    n = len(poly)
    inside = False
    for i in range(n):
        x1, y1 = poly[i]
        x2, y2 = poly[(i + 1) % n]
        if _point_on_segment(x, y, x1, y1, x2, y2):
            return True
        if (y1 > y) != (y2 > y):
            xint = x1 + (y - y1) * (x2 - x1) / (y2 - y1)
            if x < xint:
                inside = not inside
    return inside


def _point_on_segment(x, y, x1, y1, x2, y2, eps=1e-12) -> bool:
    cross = (x2 - x1) * (y - y1) - (y2 - y1) * (x - x1)
    if abs(cross) > eps * max(1.0, abs(x2 - x1) + abs(y2 - y1)):
        return False
    return min(x1, x2) - eps <= x <= max(x1, x2) + eps and min(y1, y2) - eps <= y <= max(y1, y2) + eps


def _polygon_is_simple(poly: np.ndarray) -> bool:
    n = len(poly)
    for i in range(n):
        a1, a2 = poly[i], poly[(i + 1) % n]
        for j in range(i + 1, n):
            if j == i or (j + 1) % n == i or (i + 1) % n == j:
                continue
            b1, b2 = poly[j], poly[(j + 1) % n]
            if segments_intersect(a1, a2, b1, b2):
                return False
    return True


def _dist_to_polygon_boundary(p, poly: np.ndarray) -> float:
    n = len(poly)
    best = math.inf
    for i in range(n):
        a, b = poly[i], poly[(i + 1) % n]
        best = min(best, _point_segment_dist(p, a, b))
    return best


def _point_segment_dist(p, a, b) -> float:
    ab = b - a
    denom = float(ab[0] ** 2 + ab[1] ** 2)
    if denom == 0.0:
        return float(math.hypot(p[0] - a[0], p[1] - a[1]))
    t = ((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / denom
    t = min(max(t, 0.0), 1.0)
    return float(math.hypot(p[0] - a[0] - t * ab[0], p[1] - a[1] - t * ab[1]))


def _stopline_centerline_crossings(lane: Lane) -> int:
    count = 0
    q1, q2 = lane.stop_line[0], lane.stop_line[1]
    pts = lane.centerline
    for i in range(len(pts) - 1):
        if segments_intersect(pts[i], pts[i + 1], q1, q2):
            count += 1
    return count


# --- map JSON schema ---------------------------------------------------------


def map_to_dict(m: IntersectionMap) -> dict:
    lanes = []
    for ln in m.approaches:
        entry = {
            "id": ln.id,
            "points": [[float(x), float(y)] for x, y in ln.centerline],
            "width": ln.width,
            "direction": ln.direction,
            "successors": list(ln.successor_ids),
        }
        if ln.stop_line is not None:
            entry["stop_line"] = [[float(x), float(y)] for x, y in ln.stop_line]
        if ln.signal_group is not None:
            entry["signal_group"] = ln.signal_group
        lanes.append(entry)
    return {
        "map_id": m.map_id,
        "center": [float(m.center[0]), float(m.center[1])],
        "exit_radius": m.exit_radius,
        "intersection_polygon": [[float(x), float(y)] for x, y in m.intersection_polygon],
        "lanes": lanes,
        "signal_plan": {
            "cycle_length": m.signal_plan.cycle_length,
            "groups": {g: [[st, d] for st, d in ph] for g, ph in m.signal_plan.groups.items()},
        },
    }


def map_from_dict(d: dict) -> IntersectionMap:
    lanes = tuple(
        Lane(
            id=str(e["id"]),
            centerline=np.asarray(e["points"], dtype=np.float64),
            width=float(e["width"]),
            direction=str(e["direction"]),
            stop_line=np.asarray(e["stop_line"], dtype=np.float64) if "stop_line" in e else None,
            signal_group=e.get("signal_group"),
            successor_ids=tuple(e.get("successors", ())),
        )
        for e in d["lanes"]
    )
    plan = SignalPlan(
        cycle_length=float(d["signal_plan"]["cycle_length"]),
        groups={g: [(st, dur) for st, dur in ph] for g, ph in d["signal_plan"]["groups"].items()},
    )
    return IntersectionMap(
        map_id=str(d.get("map_id", "unnamed")),
        center=(float(d["center"][0]), float(d["center"][1])),
        approaches=lanes,
        intersection_polygon=np.asarray(d["intersection_polygon"], dtype=np.float64),
        signal_plan=plan,
        exit_radius=float(d["exit_radius"]),
    )


def save_map(m: IntersectionMap, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        json.dump(map_to_dict(m), f, indent=1)


def load_map(path) -> IntersectionMap:
    with open(path, "r", encoding="utf-8") as f:
        return map_from_dict(json.load(f))
