"""Ground-truth traffic generator: stochastic arrivals, route following, and
safe-speed car following with signal obedience.

Vehicles track an arclength position along a fixed route (an inbound lane,
an internal movement lane, and an outbound lane). Each step every vehicle's
next speed is bounded by its leader's rear bumper, by its stop line when the
signal demands it, and by curve speed limits, then degraded by the driver
imperfection noise. All updates within a step read the frozen previous-step
snapshot, so episodes are deterministic given a seed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .geometry import ActorState, IntersectionMap, Lane, signal_state_at
from .trajlog import LogBuilder, TrajectoryLog

LOOKAHEAD = 120.0  # m, leader search horizon along the route
SPAWN_CLEARANCE = 1.0  # m beyond min_gap required to insert a new vehicle
CURVE_TURN_THRESHOLD = 0.2  # rad of total heading change marking a curved lane


@dataclass(frozen=True)
class DriverParams:
    v_max: float = 13.89
    accel_max: float = 2.6
    decel_b: float = 4.5
    tau: float = 1.0
    sigma_driver: float = 0.5
    min_gap: float = 2.5
    length: float = 5.0
    curve_speed: float = 8.0
    # planned braking rate for anticipating stops; keeps oracle traffic well
    # below the hard-braking threshold even with full driver noise
    comfort_decel: float = 1.5

    def __post_init__(self):
        if min(self.v_max, self.accel_max, self.decel_b, self.tau,
               self.min_gap, self.length, self.comfort_decel) <= 0:
            raise ValueError("driver parameters must be positive")
        if not 0.0 <= self.sigma_driver <= 1.0:
            raise ValueError("sigma_driver must lie in [0, 1]")


@dataclass(frozen=True)
class ArrivalConfig:
    departure_period: float = 3.0
    binomial_n: int = 2
    fringe_factor: float = 10.0
    route_weights: Optional[dict] = None  # (entry lane, exit lane) -> weight
    seed: int = 0

    def __post_init__(self):
        if self.departure_period <= 0:
            raise ValueError("departure_period must be positive")
        if self.route_weights is not None:
            ws = list(self.route_weights.values())
            if any(w < 0 for w in ws) or (ws and sum(ws) == 0):
                raise ValueError("route weights must be >= 0 and not all zero")


def krauss_safe_speed(v_leader: float, gap: float, p: DriverParams,
                      v_self: Optional[float] = None) -> float:
    """Safe following speed given the leader's speed and the available gap.

    ``v_self`` enters through the mean-speed term; it defaults to the
    leader's speed.
    """
    if v_self is None:
        v_self = v_leader
    mean_v = 0.5 * (v_self + v_leader)
    v_safe = v_leader + (gap - v_leader * p.tau) / (mean_v / p.decel_b + p.tau)
    return max(v_safe, 0.0)


def step_vehicle(state: ActorState, leader: Optional[ActorState],
                 signal_gap: Optional[float], p: DriverParams, dt: float,
                 rng: np.random.Generator) -> ActorState:
    """Advance a single vehicle one step along its heading.

    The full episode engine advances vehicles along route polylines; this
    standalone form moves in a straight line and is what fixtures and the
    car-following tests drive directly.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    hx, hy = math.cos(state.heading), math.sin(state.heading)
    if leader is not None:
        rear = leader.rear_bumper()
        along = (rear[0] - state.pos[0]) * hx + (rear[1] - state.pos[1]) * hy
        gap_lead = along - p.min_gap
        v_lead = leader.speed
        has_lead = True
    else:
        gap_lead, v_lead, has_lead = 0.0, 0.0, False
    has_sig = signal_gap is not None
    noise = rng.uniform(0.0, 1.0) if p.sigma_driver > 0 else 0.0
    v_next = _kernels.krauss_speeds(
        np.array([state.speed]), np.array([v_lead]), np.array([gap_lead]),
        np.array([has_lead]), np.array([signal_gap if has_sig else 0.0]),
        np.array([has_sig]), np.array([p.v_max]), np.array([noise]),
        p.accel_max, p.decel_b, p.tau, p.sigma_driver, dt, p.comfort_decel,
    )[0]
    dist = v_next * dt
    new_pos = (state.pos[0] + dist * hx, state.pos[1] + dist * hy)
    return ActorState(
        vehicle_id=state.vehicle_id, t=state.t + dt, pos=new_pos,
        speed=float(v_next), heading=state.heading, length=state.length,
        accel=(float(v_next) - state.speed) / dt,
    )


# --- routes -------------------------------------------------------------------


@dataclass
class Route:
    key: tuple  # (entry lane id, exit lane id)
    lane_ids: tuple
    pts: np.ndarray          # concatenated centerline
    cum: np.ndarray          # cumulative arclength per point
    lane_start_s: np.ndarray  # arclength where each lane begins
    vmax_seg: np.ndarray     # speed cap per segment (curve limits)
    stop_s: Optional[float]  # arclength of the stop line, if signalized
    signal_group: Optional[str]

    @property
    def length(self) -> float:
        return float(self.cum[-1])

    def lane_at(self, s: float) -> int:
        """Index into lane_ids of the lane containing arclength ``s``."""
        i = int(np.searchsorted(self.lane_start_s, s, side="right") - 1)
        return max(0, min(i, len(self.lane_ids) - 1))

    def state_at(self, s: float) -> tuple[float, float, float]:
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = max(0, min(i, len(self.cum) - 2))
        seg = self.cum[i + 1] - self.cum[i]
        f = 0.0 if seg == 0 else (s - self.cum[i]) / seg
        x = self.pts[i, 0] + f * (self.pts[i + 1, 0] - self.pts[i, 0])
        y = self.pts[i, 1] + f * (self.pts[i + 1, 1] - self.pts[i, 1])
        heading = math.atan2(self.pts[i + 1, 1] - self.pts[i, 1],
                             self.pts[i + 1, 0] - self.pts[i, 0])
        return x, y, heading

    def vmax_at(self, s: float, upper: float) -> float:
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = max(0, min(i, len(self.vmax_seg) - 1))
        return min(upper, float(self.vmax_seg[i]))

    def next_cap_ahead(self, s: float, upper: float) -> tuple[float, float]:
        """Distance to and value of the next tighter speed cap ahead."""
        i = int(np.searchsorted(self.cum, s, side="right") - 1)
        i = max(0, min(i, len(self.vmax_seg) - 1))
        here = min(upper, float(self.vmax_seg[i]))
        for j in range(i + 1, len(self.vmax_seg)):
            cap = min(upper, float(self.vmax_seg[j]))
            if cap < here:
                return float(self.cum[j] - s), cap
            if self.cum[j] - s > LOOKAHEAD:
                break
        return math.inf, here


def _lane_is_curved(lane: Lane) -> bool:
    seg = np.diff(lane.centerline, axis=0)
    angles = np.arctan2(seg[:, 1], seg[:, 0])
    turn = np.abs(np.diff(angles))
    turn = np.minimum(turn, 2 * math.pi - turn)
    return bool(np.sum(turn) > CURVE_TURN_THRESHOLD)


def build_route(imap: IntersectionMap, lane_ids: list, params: DriverParams) -> Route:
    pts_list: list = []
    lane_start = []
    s_acc = 0.0
    stop_s = None
    group = None
    caps = []
    for lane_id in lane_ids:
        lane = imap.lane(lane_id)
        pts = lane.centerline
        if pts_list and np.allclose(pts_list[-1], pts[0], atol=1e-6):
            pts = pts[1:]
        lane_start.append(s_acc)
        caps.append(
            params.curve_speed
            if (lane.direction == "internal" and _lane_is_curved(lane))
            else params.v_max
        )
        pts_list.extend(pts)
        s_acc += lane.length
        if lane.stop_line is not None and stop_s is None:
            stop_s = s_acc
            group = lane.signal_group
    pts = np.asarray(pts_list, dtype=np.float64)
    seg = np.hypot(*np.diff(pts, axis=0).T)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    lane_start = np.asarray(lane_start)
    # per-segment speed cap, assigned by which lane the segment midpoint is in
    mids = 0.5 * (cum[:-1] + cum[1:])
    lane_of_mid = np.clip(np.searchsorted(lane_start, mids, side="right") - 1,
                          0, len(lane_ids) - 1)
    vmax_seg = np.asarray(caps)[lane_of_mid]
    return Route(
        key=(lane_ids[0], lane_ids[-1]), lane_ids=tuple(lane_ids),
        pts=pts, cum=cum, lane_start_s=lane_start,
        vmax_seg=vmax_seg, stop_s=stop_s, signal_group=group,
    )


def enumerate_routes(imap: IntersectionMap) -> list[list]:
    """All source-to-terminal lane paths through the successor graph."""
    has_pred = set()
    for ln in imap.approaches:
        has_pred.update(ln.successor_ids)
    sources = [ln.id for ln in imap.approaches if ln.id not in has_pred]
    paths = []

    def walk(path):
        lane = imap.lane(path[-1])
        if not lane.successor_ids:
            paths.append(list(path))
            return
        for nxt in lane.successor_ids:
            walk(path + [nxt])

    for src in sorted(sources):
        walk([src])
    return paths


def _route_is_through(imap: IntersectionMap, lane_ids: list) -> bool:
    first = imap.lane(lane_ids[0])
    last = imap.lane(lane_ids[-1])
    h0 = math.atan2(*(first.centerline[1] - first.centerline[0])[::-1])
    h1 = math.atan2(*(last.centerline[-1] - last.centerline[-2])[::-1])
    turn = abs((h1 - h0 + math.pi) % (2 * math.pi) - math.pi)
    return turn < 0.2


def default_route_weights(imap: IntersectionMap, fringe_factor: float) -> dict:
    weights = {}
    for path in enumerate_routes(imap):
        key = (path[0], path[-1])
        weights[key] = fringe_factor if _route_is_through(imap, path) else 1.0
    return weights


def spawn_arrivals(cfg: ArrivalConfig, t: float, rng: np.random.Generator,
                   dt: float = 0.1) -> list[tuple]:
    """Arrivals for one step: list of (entry lane, (entry, exit) route key).

    Per entry lane the arrival count is binomially thinned so that the mean
    network-wide inter-arrival time equals ``departure_period``, shared among
    entries proportionally to their route weights.
    """
    weights = cfg.route_weights
    if not weights:
        return []
    total = sum(weights.values())
    if total == 0:
        return []
    by_entry: dict = {}
    for (entry, exit_), w in weights.items():
        by_entry.setdefault(entry, []).append((exit_, w))
    out = []
    for entry in sorted(by_entry):
        routes = sorted(by_entry[entry])
        wsum = sum(w for _, w in routes)
        if wsum == 0:
            continue
        rate = (dt / cfg.departure_period) * (wsum / total)
        p = min(rate / cfg.binomial_n, 1.0)
        k = int(rng.binomial(cfg.binomial_n, p))
        for _ in range(k):
            pick = rng.uniform(0.0, wsum)
            acc = 0.0
            chosen = routes[-1][0]
            for exit_, w in routes:
                acc += w
                if pick < acc:
                    chosen = exit_
                    break
            out.append((entry, (entry, chosen)))
    return out


# --- episode engine -----------------------------------------------------------


@dataclass
class _Veh:
    vid: int
    route: Route
    u: float
    v: float
    length: float
    stop_latch: bool = False  # committed to stopping for the current signal


class Episode:
    """Stepwise microsimulation over one map. ``run_episode`` drives this to
    completion; the rollout engine drives it interleaved with the model."""

    def __init__(self, imap: IntersectionMap, cfg: ArrivalConfig,
                 params: DriverParams, dt: float,
                 arrival_rng: Optional[np.random.Generator] = None,
                 driver_rng: Optional[np.random.Generator] = None):
        self.imap = imap
        self.params = params
        self.dt = dt
        if cfg.route_weights is None:
            cfg = ArrivalConfig(
                departure_period=cfg.departure_period,
                binomial_n=cfg.binomial_n, fringe_factor=cfg.fringe_factor,
                route_weights=default_route_weights(imap, cfg.fringe_factor),
                seed=cfg.seed,
            )
        self.cfg = cfg
        if arrival_rng is None or driver_rng is None:
            ss = np.random.SeedSequence(cfg.seed)
            kids = ss.spawn(2)
            arrival_rng = np.random.Generator(np.random.Philox(kids[0]))
            driver_rng = np.random.Generator(np.random.Philox(kids[1]))
        self.arrival_rng = arrival_rng
        self.driver_rng = driver_rng
        self.routes: dict = {}
        lane_paths = {(p[0], p[-1]): p for p in enumerate_routes(imap)}
        for key in sorted(self.cfg.route_weights):
            if key not in lane_paths:
                raise KeyError(f"no lane path for route {key}")
            self.routes[key] = build_route(imap, lane_paths[key], params)
        self.vehicles: list = []   # ordered by spawn
        self.backlog: dict = {e: [] for e in sorted({k[0] for k in self.cfg.route_weights})}
        self.next_id = 0
        self.step_count = 0
        self.spawned = 0
        self.exited = 0

    # -- per-step pieces --

    def _lane_occupancy(self) -> dict:
        occ: dict = {}
        for i, veh in enumerate(self.vehicles):
            li = veh.route.lane_at(veh.u)
            lane_id = veh.route.lane_ids[li]
            s_lane = veh.u - veh.route.lane_start_s[li]
            occ.setdefault(lane_id, []).append((s_lane, i))
        for lane_id in occ:
            occ[lane_id].sort()
        return occ

    def _leader_of(self, veh: _Veh, occ: dict) -> tuple[float, float, bool]:
        """Raw front-to-rear-bumper gap, leader speed, and presence flag for
        the nearest vehicle ahead along this vehicle's remaining route."""
        li = veh.route.lane_at(veh.u)
        s_lane = veh.u - veh.route.lane_start_s[li]
        acc = 0.0
        for j in range(li, len(veh.route.lane_ids)):
            lane_id = veh.route.lane_ids[j]
            lane_len = (veh.route.lane_start_s[j + 1] - veh.route.lane_start_s[j]
                        if j + 1 < len(veh.route.lane_ids)
                        else veh.route.length - veh.route.lane_start_s[j])
            floor = s_lane if j == li else -math.inf
            for s_cand, idx in occ.get(lane_id, ()):
                other = self.vehicles[idx]
                if other is veh or s_cand < floor:
                    continue
                dist_front = acc + (s_cand - (s_lane if j == li else 0.0))
                gap = dist_front - other.length
                return gap, other.v, True
            acc += lane_len - (s_lane if j == li else 0.0)
            if acc > LOOKAHEAD:
                break
        return 0.0, 0.0, False

    def _signal_gap(self, veh: _Veh, t: float) -> tuple[float, bool]:
        """Distance to a mandatory stop point, if the signal demands one.

        At yellow onset a vehicle commits: stop if it can brake at the
        planned comfortable rate, else proceed. The stop decision is latched
        so that riding the braking envelope cannot flip it back to proceed
        late in the phase.
        """
        route = veh.route
        if route.stop_s is None or veh.u >= route.stop_s:
            veh.stop_latch = False
            return 0.0, False
        state = signal_state_at(self.imap.signal_plan, route.signal_group, t)
        if state in ("green", "flashing-yellow"):
            veh.stop_latch = False
            return 0.0, False
        dist = route.stop_s - veh.u
        if state == "yellow":
            if veh.stop_latch:
                return dist, True
            if veh.v * veh.v / (2.0 * self.params.comfort_decel) <= dist:
                veh.stop_latch = True
                return dist, True
            return 0.0, False
        veh.stop_latch = True  # red
        return dist, True

    def _signal_gap_for(self, route: Route, u: float, v: float, t: float,
                        spawning: bool) -> tuple[float, bool]:
        """Spawn-time variant: any non-green state means the newcomer must be
        able to stop, so it never spawns into a dilemma."""
        if route.stop_s is None or u >= route.stop_s:
            return 0.0, False
        state = signal_state_at(self.imap.signal_plan, route.signal_group, t)
        if state in ("green", "flashing-yellow"):
            return 0.0, False
        return route.stop_s - u, True

    def _effective_vmax(self, veh: _Veh) -> float:
        p = self.params
        here = veh.route.vmax_at(veh.u, p.v_max)
        d_cap, cap = veh.route.next_cap_ahead(veh.u, p.v_max)
        if math.isfinite(d_cap):
            # approach speed that still allows easing down to the cap in time
            approach = math.sqrt(cap * cap + 2.0 * p.comfort_decel * d_cap)
            here = min(here, approach)
        return here

    def advance(self, t: float) -> None:
        """One synchronous step: car-following update of all vehicles from the
        step-t snapshot, then spawns, then exit removal."""
        p = self.params
        n = len(self.vehicles)
        if n:
            occ = self._lane_occupancy()
            v = np.array([veh.v for veh in self.vehicles])
            gap_lead = np.zeros(n)
            v_lead = np.zeros(n)
            has_lead = np.zeros(n, dtype=bool)
            sig_gap = np.zeros(n)
            has_sig = np.zeros(n, dtype=bool)
            vmax_eff = np.zeros(n)
            for i, veh in enumerate(self.vehicles):
                raw_gap, v_lead[i], has_lead[i] = self._leader_of(veh, occ)
                gap_lead[i] = raw_gap - p.min_gap
                sig_gap[i], has_sig[i] = self._signal_gap(veh, t)
                vmax_eff[i] = self._effective_vmax(veh)
            noise = self.driver_rng.uniform(0.0, 1.0, size=n) if p.sigma_driver > 0 else np.zeros(n)
            v_next = _kernels.krauss_speeds(
                v, v_lead, gap_lead, has_lead, sig_gap, has_sig, vmax_eff,
                noise, p.accel_max, p.decel_b, p.tau, p.sigma_driver, self.dt,
                p.comfort_decel,
            )
            for i, veh in enumerate(self.vehicles):
                veh.v = float(v_next[i])
                veh.u += veh.v * self.dt
        self._spawn(t)
        self._remove_exited()
        self.step_count += 1

    def _spawn(self, t: float) -> None:
        p = self.params
        arrivals = spawn_arrivals(self.cfg, t, self.arrival_rng, self.dt)
        for entry, key in arrivals:
            self.backlog[entry].append(key)
        occ = self._lane_occupancy()
        for entry in sorted(self.backlog):
            queue = self.backlog[entry]
            while queue:
                key = queue[0]
                route = self.routes[key]
                probe = _Veh(vid=-1, route=route, u=0.0, v=0.0, length=p.length)
                gap, v_lead, has_lead = self._leader_of(probe, occ)
                if has_lead and gap < p.min_gap + SPAWN_CLEARANCE:
                    break
                v0 = route.vmax_at(0.0, p.v_max)
                if has_lead:
                    eff = max(gap - p.min_gap, 0.0)
                    # fixed-point-ish evaluation so the first regular step
                    # does not demand a large correction
                    v1 = krauss_safe_speed(v_lead, eff, p)
                    v2 = krauss_safe_speed(v_lead, eff, p, v_self=v1)
                    env = math.sqrt(max(v_lead, 0.0) ** 2 + 2.0 * p.comfort_decel * eff)
                    v0 = min(v0, v1, v2, env)
                sig_gap, has_sig = self._signal_gap_for(route, 0.0, p.v_max, t, spawning=True)
                if has_sig:
                    v0 = min(v0, math.sqrt(2.0 * p.comfort_decel * sig_gap))
                v0 = max(0.0, v0)
                veh = _Veh(vid=self.next_id, route=route, u=0.0, v=v0,
                           length=p.length, stop_latch=has_sig)
                self.next_id += 1
                self.spawned += 1
                self.vehicles.append(veh)
                li = route.lane_at(0.0)
                occ.setdefault(route.lane_ids[li], []).insert(
                    0, (0.0, len(self.vehicles) - 1))
                queue.pop(0)

    def _remove_exited(self) -> None:
        cx, cy = self.imap.center
        kept = []
        for veh in self.vehicles:
            x, y, _ = veh.route.state_at(veh.u)
            if veh.u >= veh.route.length or math.hypot(x - cx, y - cy) > self.imap.exit_radius:
                self.exited += 1
            else:
                kept.append(veh)
        self.vehicles = kept

    def frame_arrays(self, lane_indexer) -> tuple:
        n = len(self.vehicles)
        ids = np.empty(n, dtype=np.int64)
        x = np.empty(n)
        y = np.empty(n)
        speed = np.empty(n)
        heading = np.empty(n)
        length = np.empty(n)
        lane = np.empty(n, dtype=np.int32)
        for i, veh in enumerate(self.vehicles):
            xx, yy, hh = veh.route.state_at(veh.u)
            ids[i] = veh.vid
            x[i], y[i] = xx, yy
            speed[i] = veh.v
            heading[i] = hh
            length[i] = veh.length
            li = veh.route.lane_at(veh.u)
            lane[i] = lane_indexer(veh.route.lane_ids[li])
        return ids, x, y, speed, heading, length, lane


def run_episode(imap: IntersectionMap, cfg: ArrivalConfig, params: DriverParams,
                duration: float, dt: float = 0.1) -> TrajectoryLog:
    """Simulate ``duration`` seconds and return the full log.

    Frames are logged at t = 0, dt, ..., duration - dt, after each step's
    spawns and removals, so every vehicle state appears in the log.
    """
    if dt <= 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(duration / dt))
    if abs(n_steps * dt - duration) > 1e-9:
        raise ValueError("duration must be a multiple of dt")
    ep = Episode(imap, cfg, params, dt)
    builder = LogBuilder(dt=dt, map_id=imap.map_id, seed=cfg.seed,
                         lane_names=imap.lane_ids)
    log = builder.log
    for k in range(n_steps):
        t = k * dt
        ep.advance(t)
        builder.add_frame(t, *ep.frame_arrays(log.lane_index))
    return builder.finalize(duration)
