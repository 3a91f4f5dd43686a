"""Hot numeric kernels with two interchangeable backends.

The numba-compiled path is used by default; setting the environment variable
``CROSSIM_NUMBA=0`` (or uninstalling numba) selects the pure-numpy fallback.
Both paths evaluate the same per-element expressions so results agree to the
last bit in practice. ``benchmarks/bench_kernels.py`` times the two backends
against each other.
"""

from __future__ import annotations

import os

import numpy as np

EMERGENCY_DECEL = 9.0  # m/s^2, hard cap on per-step deceleration


def _env_wants_numba() -> bool:
    flag = os.environ.get("CROSSIM_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


# --- pure-numpy reference implementations ------------------------------------


def krauss_speeds_numpy(
    v, v_lead, gap_lead, has_lead, sig_gap, has_sig, vmax_eff, noise,
    accel_max, decel_b, tau, sigma_driver, dt, comfort_decel,
):
    """Next speed for each vehicle under safe-speed car following.

    ``gap_lead`` is the front-bumper-to-rear-bumper gap minus the desired
    standstill gap; ``sig_gap`` the distance to a mandatory stop point, which
    is treated as a stationary leader. A comfortable-braking envelope
    anticipates slow leaders and stop points early so that steady approaches
    never require hard braking; the safe-speed bound still rules close range.
    Deceleration is capped at ``EMERGENCY_DECEL``; speed never goes negative.
    """
    v = np.asarray(v, dtype=np.float64)
    v_des = np.minimum(vmax_eff, v + accel_max * dt)

    g = np.maximum(gap_lead, 0.0)
    mean_v = 0.5 * (v + v_lead)
    v_safe = v_lead + (g - v_lead * tau) / (mean_v / decel_b + tau)
    env_lead = np.sqrt(np.maximum(v_lead, 0.0) ** 2 + 2.0 * comfort_decel * g)
    bound_lead = np.minimum(np.maximum(v_safe, 0.0), env_lead)
    v_des = np.where(has_lead, np.minimum(v_des, bound_lead), v_des)

    gs = np.maximum(sig_gap, 0.0)
    v_safe_sig = (gs - 0.0) / (0.5 * v / decel_b + tau)
    env_sig = np.sqrt(2.0 * comfort_decel * gs)
    bound_sig = np.minimum(np.maximum(v_safe_sig, 0.0), env_sig)
    v_des = np.where(has_sig, np.minimum(v_des, bound_sig), v_des)

    v_next = v_des - sigma_driver * accel_max * dt * noise
    v_next = np.maximum(v_next, v - EMERGENCY_DECEL * dt)
    return np.maximum(v_next, 0.0)


def nearest_polyline_numpy(px, py, seg_x0, seg_y0, seg_dx, seg_dy, seg_len2,
                           seg_cum, seg_lane, n_lanes):
    """Project points onto a set of polylines given as flattened segments.

    Returns per point: index of the nearest polyline, distance to it, and the
    arclength of the projected point along that polyline.
    """
    px = np.asarray(px, dtype=np.float64)[:, None]
    py = np.asarray(py, dtype=np.float64)[:, None]
    rx = px - seg_x0[None, :]
    ry = py - seg_y0[None, :]
    t = (rx * seg_dx[None, :] + ry * seg_dy[None, :]) / seg_len2[None, :]
    t = np.clip(t, 0.0, 1.0)
    dx = rx - t * seg_dx[None, :]
    dy = ry - t * seg_dy[None, :]
    d2 = dx * dx + dy * dy
    n = px.shape[0]
    best_lane = np.empty(n, dtype=np.int64)
    best_dist = np.empty(n, dtype=np.float64)
    best_s = np.empty(n, dtype=np.float64)
    # regroup per lane: nearest segment within each lane, then nearest lane
    lane_best = np.full((n, n_lanes), np.inf)
    lane_s = np.zeros((n, n_lanes))
    for seg in range(len(seg_x0)):
        li = seg_lane[seg]
        better = d2[:, seg] < lane_best[:, li]
        lane_best[better, li] = d2[better, seg]
        s_here = seg_cum[seg] + t[:, seg] * np.sqrt(seg_len2[seg])
        lane_s[better, li] = s_here[better]
    best_lane[:] = np.argmin(lane_best, axis=1)
    idx = np.arange(n)
    best_dist[:] = np.sqrt(lane_best[idx, best_lane])
    best_s[:] = lane_s[idx, best_lane]
    return best_lane, best_dist, best_s


# --- numba-compiled variants --------------------------------------------------

_HAVE_NUMBA = False
if _env_wants_numba():
    try:
        from numba import njit

        _HAVE_NUMBA = True
    except ImportError:  # pragma: no cover - exercised via env flag instead
        _HAVE_NUMBA = False

if _HAVE_NUMBA:

    @njit(cache=True)
    def _krauss_speeds_nb(v, v_lead, gap_lead, has_lead, sig_gap, has_sig,
                          vmax_eff, noise, accel_max, decel_b, tau,
                          sigma_driver, dt, comfort_decel):
        n = v.shape[0]
        out = np.empty(n, dtype=np.float64)
        for i in range(n):
            v_des = min(vmax_eff[i], v[i] + accel_max * dt)
            if has_lead[i]:
                g = max(gap_lead[i], 0.0)
                mean_v = 0.5 * (v[i] + v_lead[i])
                v_safe = v_lead[i] + (g - v_lead[i] * tau) / (mean_v / decel_b + tau)
                env_lead = np.sqrt(max(v_lead[i], 0.0) ** 2 + 2.0 * comfort_decel * g)
                v_des = min(v_des, min(max(v_safe, 0.0), env_lead))
            if has_sig[i]:
                gs = max(sig_gap[i], 0.0)
                v_safe_sig = (gs - 0.0) / (0.5 * v[i] / decel_b + tau)
                env_sig = np.sqrt(2.0 * comfort_decel * gs)
                v_des = min(v_des, min(max(v_safe_sig, 0.0), env_sig))
            v_next = v_des - sigma_driver * accel_max * dt * noise[i]
            v_next = max(v_next, v[i] - EMERGENCY_DECEL * dt)
            out[i] = max(v_next, 0.0)
        return out

    @njit(cache=True)
    def _nearest_polyline_nb(px, py, seg_x0, seg_y0, seg_dx, seg_dy, seg_len2,
                             seg_cum, seg_lane, n_lanes):
        n = px.shape[0]
        m = seg_x0.shape[0]
        best_lane = np.empty(n, dtype=np.int64)
        best_dist = np.empty(n, dtype=np.float64)
        best_s = np.empty(n, dtype=np.float64)
        lane_best = np.empty(n_lanes, dtype=np.float64)
        lane_s = np.empty(n_lanes, dtype=np.float64)
        for i in range(n):
            for li in range(n_lanes):
                lane_best[li] = np.inf
                lane_s[li] = 0.0
            for seg in range(m):
                rx = px[i] - seg_x0[seg]
                ry = py[i] - seg_y0[seg]
                t = (rx * seg_dx[seg] + ry * seg_dy[seg]) / seg_len2[seg]
                t = min(max(t, 0.0), 1.0)
                dx = rx - t * seg_dx[seg]
                dy = ry - t * seg_dy[seg]
                d2 = dx * dx + dy * dy
                li = seg_lane[seg]
                if d2 < lane_best[li]:
                    lane_best[li] = d2
                    lane_s[li] = seg_cum[seg] + t * np.sqrt(seg_len2[seg])
            bi = 0
            for li in range(1, n_lanes):
                if lane_best[li] < lane_best[bi]:
                    bi = li
            best_lane[i] = bi
            best_dist[i] = np.sqrt(lane_best[bi])
            best_s[i] = lane_s[bi]
        return best_lane, best_dist, best_s

    def krauss_speeds(v, v_lead, gap_lead, has_lead, sig_gap, has_sig,
                      vmax_eff, noise, accel_max, decel_b, tau, sigma_driver,
                      dt, comfort_decel):
        return _krauss_speeds_nb(
            np.ascontiguousarray(v, dtype=np.float64),
            np.ascontiguousarray(v_lead, dtype=np.float64),
            np.ascontiguousarray(gap_lead, dtype=np.float64),
            np.ascontiguousarray(has_lead, dtype=np.bool_),
            np.ascontiguousarray(sig_gap, dtype=np.float64),
            np.ascontiguousarray(has_sig, dtype=np.bool_),
            np.ascontiguousarray(vmax_eff, dtype=np.float64),
            np.ascontiguousarray(noise, dtype=np.float64),
            float(accel_max), float(decel_b), float(tau),
            float(sigma_driver), float(dt), float(comfort_decel),
        )

    def nearest_polyline(px, py, seg_x0, seg_y0, seg_dx, seg_dy, seg_len2,
                         seg_cum, seg_lane, n_lanes):
        return _nearest_polyline_nb(
            np.ascontiguousarray(px, dtype=np.float64),
            np.ascontiguousarray(py, dtype=np.float64),
            seg_x0, seg_y0, seg_dx, seg_dy, seg_len2, seg_cum, seg_lane,
            int(n_lanes),
        )

    BACKEND = "numba"
else:
    krauss_speeds = krauss_speeds_numpy
    nearest_polyline = nearest_polyline_numpy
    BACKEND = "numpy"


class LaneProjector:
    """Precomputed flattened segment arrays for nearest-lane queries."""

    def __init__(self, polylines: list[np.ndarray]):
        x0, y0, dx, dy, len2, cum, lane = [], [], [], [], [], [], []
        for li, pts in enumerate(polylines):
            pts = np.asarray(pts, dtype=np.float64)
            seg = np.diff(pts, axis=0)
            seglen = np.hypot(seg[:, 0], seg[:, 1])
            c = np.concatenate([[0.0], np.cumsum(seglen)[:-1]])
            for k in range(len(seg)):
                if seglen[k] == 0.0:
                    continue
                x0.append(pts[k, 0])
                y0.append(pts[k, 1])
                dx.append(seg[k, 0])
                dy.append(seg[k, 1])
                len2.append(seglen[k] ** 2)
                cum.append(c[k])
                lane.append(li)
        self.n_lanes = len(polylines)
        self.seg_x0 = np.asarray(x0)
        self.seg_y0 = np.asarray(y0)
        self.seg_dx = np.asarray(dx)
        self.seg_dy = np.asarray(dy)
        self.seg_len2 = np.asarray(len2)
        self.seg_cum = np.asarray(cum)
        self.seg_lane = np.asarray(lane, dtype=np.int64)

    def nearest(self, px, py):
        """(lane index, distance, arclength along lane) per query point."""
        px = np.atleast_1d(np.asarray(px, dtype=np.float64))
        py = np.atleast_1d(np.asarray(py, dtype=np.float64))
        if len(px) == 0:
            empty = np.empty(0)
            return empty.astype(np.int64), empty, empty
        return nearest_polyline(
            px, py, self.seg_x0, self.seg_y0, self.seg_dx, self.seg_dy,
            self.seg_len2, self.seg_cum, self.seg_lane, self.n_lanes,
        )
