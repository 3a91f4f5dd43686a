"""Built-in intersection map builders.

``build_cross_map`` produces a four-arm signalized intersection with
configurable inbound lane counts on the east-west and north-south arms;
``build_strip_map`` produces a plain straight road for car-following
fixtures. Turn paths inside the box are quarter ellipses with axis-aligned
tangents, so lane joins are smooth for any lane offsets.
"""

from __future__ import annotations

import math

import numpy as np

from .geometry import IntersectionMap, Lane, SignalPlan

ARMS = ("E", "N", "W", "S")  # counterclockwise, arm k rotated k*90deg from east


def _rot(k: int, x: float, y: float) -> tuple[float, float]:
    for _ in range(k % 4):
        x, y = -y, x
    return x, y


def _rot_pts(k: int, pts) -> np.ndarray:
    return np.array([_rot(k, x, y) for x, y in pts], dtype=np.float64)


def _quarter_turn(entry, entry_heading, exit_, exit_heading, n_pts=11) -> np.ndarray:
    """Quarter ellipse from ``entry`` to ``exit_`` with the given tangents."""
    ex, ey = entry
    xx, xy = exit_
    # corner = intersection of the two tangent lines (axis-aligned per arm math)
    hx, hy = entry_heading
    gx, gy = exit_heading
    denom = hx * gy - hy * gx
    t = ((xx - ex) * gy - (xy - ey) * gx) / denom
    corner = (ex + t * hx, ey + t * hy)
    cc = (ex + xx - corner[0], ey + xy - corner[1])
    u = np.linspace(0.0, 0.5 * math.pi, n_pts)
    px = cc[0] + np.cos(u) * (ex - cc[0]) + np.sin(u) * (xx - cc[0])
    py = cc[1] + np.cos(u) * (ey - cc[1]) + np.sin(u) * (xy - cc[1])
    return np.stack([px, py], axis=1)


DEFAULT_PLAN = {
    "EW_T": [("green", 23), ("yellow", 4), ("red", 53)],
    "EW_L": [("red", 28), ("green", 8), ("yellow", 4), ("red", 40)],
    "NS_T": [("red", 41), ("green", 20), ("yellow", 4), ("red", 15)],
    "NS_L": [("red", 66), ("green", 9), ("yellow", 4), ("red", 1)],
}


def build_cross_map(
    ew_lanes: int = 3,
    ns_lanes: int = 2,
    lane_width: float = 3.5,
    approach_len: float = 45.0,
    box_half: float = 12.0,
    map_id: str | None = None,
) -> IntersectionMap:
    """Four-arm signalized intersection.

    Per arm, inbound lane 0 is the innermost (left-turn) lane; the outermost
    lane also serves right turns; all other lanes run through. Outbound lane
    counts mirror inbound ones. ``ew_lanes`` applies to the east and west
    arms, ``ns_lanes`` to north and south.
    """
    if map_id is None:
        map_id = f"cross{ew_lanes}x{ns_lanes}"
    w = lane_width
    n_in = {"E": ew_lanes, "W": ew_lanes, "N": ns_lanes, "S": ns_lanes}
    lanes: list[Lane] = []

    def offset(k_lane: int) -> float:
        return (k_lane + 0.5) * w

    # approach + exit lanes, built on the east arm then rotated into place
    for ai, arm in enumerate(ARMS):
        n = n_in[arm]
        for k in range(n):
            y = offset(k)
            inbound_pts = _rot_pts(ai, [(box_half + approach_len, y), (box_half, y)])
            stop = _rot_pts(ai, [(box_half, y - 0.5 * w), (box_half, y + 0.5 * w)])
            group = ("EW" if arm in ("E", "W") else "NS") + ("_L" if k == 0 else "_T")
            lanes.append(Lane(
                id=f"{arm}_in{k}", centerline=inbound_pts, width=w,
                direction="inbound", stop_line=stop, signal_group=group,
                successor_ids=(),
            ))
            outbound_pts = _rot_pts(ai, [(box_half, -y), (box_half + approach_len, -y)])
            lanes.append(Lane(
                id=f"{arm}_out{k}", centerline=outbound_pts, width=w,
                direction="outbound",
            ))

    # internal movement lanes
    internal: list[Lane] = []
    successors: dict = {ln.id: [] for ln in lanes}
    for ai, arm in enumerate(ARMS):
        n = n_in[arm]
        heading_in = _rot(ai, -1.0, 0.0)
        for k in range(n):
            y = offset(k)
            entry = _rot(ai, box_half, y)
            movements = []
            if k == 0:
                movements.append("L")
            else:
                movements.append("T")
            if k == n - 1 and k != 0:
                movements.append("R")
            for mv in movements:
                if mv == "T":
                    target_arm = (ai + 2) % 4
                    kk = min(k, n_in[ARMS[target_arm]] - 1)
                    exit_pt = _rot(ai, -box_half, y)
                    pts = np.array([entry, exit_pt])
                    out_id = f"{ARMS[target_arm]}_out{kk}"
                elif mv == "L":
                    target_arm = (ai + 3) % 4
                    kk = 0
                    exit_local = (-offset(kk), -box_half)
                    exit_pt = _rot(ai, *exit_local)
                    exit_heading = _rot(ai, 0.0, -1.0)
                    pts = _quarter_turn(entry, heading_in, exit_pt, exit_heading)
                    out_id = f"{ARMS[target_arm]}_out{kk}"
                else:  # R
                    target_arm = (ai + 1) % 4
                    kk = n_in[ARMS[target_arm]] - 1
                    exit_local = (offset(kk), box_half)
                    exit_pt = _rot(ai, *exit_local)
                    exit_heading = _rot(ai, 0.0, 1.0)
                    pts = _quarter_turn(entry, heading_in, exit_pt, exit_heading)
                    out_id = f"{ARMS[target_arm]}_out{kk}"
                lane_id = f"{arm}_{mv}{k}"
                internal.append(Lane(
                    id=lane_id, centerline=pts, width=w, direction="internal",
                    successor_ids=(out_id,),
                ))
                successors[f"{arm}_in{k}"].append(lane_id)

    lanes = [
        Lane(
            id=ln.id, centerline=ln.centerline, width=ln.width,
            direction=ln.direction, stop_line=ln.stop_line,
            signal_group=ln.signal_group,
            successor_ids=tuple(successors.get(ln.id, ())),
        )
        for ln in lanes
    ] + internal

    far = box_half + approach_len
    max_lane_off = (max(ew_lanes, ns_lanes) - 0.5) * w
    exit_radius = math.hypot(far, max_lane_off) + 3.0
    poly = np.array([
        (box_half, box_half), (-box_half, box_half),
        (-box_half, -box_half), (box_half, -box_half),
    ])
    plan = SignalPlan(cycle_length=80.0, groups={g: list(p) for g, p in DEFAULT_PLAN.items()})
    return IntersectionMap(
        map_id=map_id, center=(0.0, 0.0), approaches=tuple(lanes),
        intersection_polygon=poly, signal_plan=plan, exit_radius=exit_radius,
    )


def build_strip_map(length: float = 150.0, map_id: str = "strip") -> IntersectionMap:
    """Single straight unsignalized lane, for car-following fixtures.

    The nominal intersection box is a small square off to the side of the
    road so that box-based metrics stay quiet.
    """
    half = 0.5 * length
    lane = Lane(
        id="main",
        centerline=np.array([(-half, 0.0), (half, 0.0)]),
        width=3.5,
        direction="outbound",
    )
    center = (0.0, -12.0)
    poly = np.array([
        (center[0] + 1.5, center[1] + 1.5), (center[0] - 1.5, center[1] + 1.5),
        (center[0] - 1.5, center[1] - 1.5), (center[0] + 1.5, center[1] - 1.5),
    ])
    plan = SignalPlan(cycle_length=60.0, groups={})
    exit_radius = math.hypot(half, 12.0) + 3.0
    return IntersectionMap(
        map_id=map_id, center=center, approaches=(lane,),
        intersection_polygon=poly, signal_plan=plan, exit_radius=exit_radius,
    )


BUILTIN_MAPS = {
    "cross3x2": lambda: build_cross_map(3, 2),
    "cross2x2": lambda: build_cross_map(2, 2, map_id="cross2x2"),
    "strip": build_strip_map,
}


def get_builtin_map(name: str) -> IntersectionMap:
    try:
        return BUILTIN_MAPS[name]()
    except KeyError:
        raise KeyError(f"unknown builtin map {name!r}; have {sorted(BUILTIN_MAPS)}")
