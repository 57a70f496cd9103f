"""Reference paths (line and arc segments) and the drivable-area boundary.

Paths are arc-length parametrized and support analytic closest-point
projection, so tracking errors and their gradients with respect to the ego
pose are exact within a segment's projection region.  Lateral error is signed
positive to the left of travel.  Projections are batch-first; scalar calls
wrap a batch of one.
"""

from __future__ import annotations

import numpy as np

from ..dynamics import wrap_angle


class LineSegment:
    def __init__(self, p0, p1):
        self.p0 = np.asarray(p0, dtype=np.float64)
        self.p1 = np.asarray(p1, dtype=np.float64)
        d = self.p1 - self.p0
        self.length = float(np.linalg.norm(d))
        if self.length <= 0.0:
            raise ValueError("degenerate line segment")
        self.tangent = d / self.length
        self.heading = float(np.arctan2(self.tangent[1], self.tangent[0]))

    def point_at(self, s: float) -> tuple[np.ndarray, float]:
        return self.p0 + np.clip(s, 0.0, self.length) * self.tangent, self.heading

    def project_batch(self, p: np.ndarray) -> dict:
        rel = p - self.p0
        s = np.clip(rel @ self.tangent, 0.0, self.length)
        nearest = self.p0 + s[:, None] * self.tangent
        lateral = self.tangent[0] * rel[:, 1] - self.tangent[1] * rel[:, 0]
        m = p.shape[0]
        return {
            "s": s,
            "nearest": nearest,
            "heading": np.full(m, self.heading),
            "dist2": ((p - nearest) ** 2).sum(axis=1),
            "lateral": lateral,
            "d_lat": np.tile([-self.tangent[1], self.tangent[0]], (m, 1)),
            "d_head": np.zeros((m, 2)),
        }


class ArcSegment:
    """Circular arc from angle theta0 sweeping dtheta (sign = travel direction)."""

    def __init__(self, center, radius: float, theta0: float, dtheta: float):
        if radius <= 0.0 or dtheta == 0.0:
            raise ValueError("arc needs positive radius and nonzero sweep")
        self.center = np.asarray(center, dtype=np.float64)
        self.radius = float(radius)
        self.theta0 = float(theta0)
        self.dtheta = float(dtheta)
        self.direction = 1.0 if dtheta > 0.0 else -1.0
        self.length = self.radius * abs(self.dtheta)

    def point_at(self, s: float) -> tuple[np.ndarray, float]:
        th = self.theta0 + self.direction * np.clip(s, 0.0, self.length) / self.radius
        point = self.center + self.radius * np.array([np.cos(th), np.sin(th)])
        return point, float(wrap_angle(th + self.direction * np.pi / 2.0))

    def project_batch(self, p: np.ndarray) -> dict:
        rel = p - self.center
        rho = np.maximum(np.linalg.norm(rel, axis=1), 1e-9)
        th = np.arctan2(rel[:, 1], rel[:, 0])
        # Angle travelled from theta0 folded into [0, 2 pi); beyond the sweep,
        # snap to the nearer endpoint.
        along = (self.direction * (th - self.theta0)) % (2.0 * np.pi)
        inside = along <= abs(self.dtheta)
        gap_end = along - abs(self.dtheta)
        gap_start = 2.0 * np.pi - along
        s = np.where(inside, along * self.radius,
                     np.where(gap_end <= gap_start, self.length, 0.0))
        th_n = self.theta0 + self.direction * s / self.radius
        nearest = self.center + self.radius * np.stack([np.cos(th_n), np.sin(th_n)], axis=1)
        heading = wrap_angle(th_n + self.direction * np.pi / 2.0)
        u = rel / rho[:, None]
        lateral = self.direction * (self.radius - rho)
        d_lat = -self.direction * u
        d_head = np.stack([-rel[:, 1], rel[:, 0]], axis=1) / (rho ** 2)[:, None]
        return {
            "s": s,
            "nearest": nearest,
            "heading": heading,
            "dist2": ((p - nearest) ** 2).sum(axis=1),
            "lateral": lateral,
            "d_lat": d_lat,
            "d_head": d_head,
        }


class Path:
    """A chain of tangent-continuous segments."""

    def __init__(self, segments):
        if not segments:
            raise ValueError("empty path")
        self.segments = list(segments)
        self.cum = np.concatenate([[0.0], np.cumsum([seg.length for seg in self.segments])])
        self.length = float(self.cum[-1])

    def point_at(self, s: float) -> tuple[np.ndarray, float]:
        s = float(np.clip(s, 0.0, self.length))
        i = int(np.searchsorted(self.cum[1:], s, side="left"))
        i = min(i, len(self.segments) - 1)
        return self.segments[i].point_at(s - self.cum[i])

    def segment_index_at(self, s: float) -> int:
        i = int(np.searchsorted(self.cum[1:], float(s), side="left"))
        return min(i, len(self.segments) - 1)

    def project_batch(self, p: np.ndarray) -> dict:
        p = np.asarray(p, dtype=np.float64)
        projs = [seg.project_batch(p) for seg in self.segments]
        dist2 = np.stack([pr["dist2"] for pr in projs], axis=1)
        pick = dist2.argmin(axis=1)
        out = {}
        for key in ("s", "nearest", "heading", "dist2", "lateral", "d_lat", "d_head"):
            stacked = np.stack([pr[key] for pr in projs], axis=1)
            out[key] = np.take_along_axis(
                stacked, pick.reshape((-1, 1) + (1,) * (stacked.ndim - 2)), axis=1
            ).squeeze(axis=1)
        out["s"] = out["s"] + self.cum[pick]
        out["segment"] = pick
        return out

    def tracking_errors_batch(self, x, y, psi):
        """(s, e_y, e_psi) and gradients of (e_y, e_psi) w.r.t. (x, y, psi).

        Longitudinal error is identically zero under closest-point tracking of
        a static path, so only the lateral and heading errors carry signal.
        """
        p = np.stack([np.atleast_1d(x), np.atleast_1d(y)], axis=1).astype(np.float64)
        proj = self.project_batch(p)
        e_psi = wrap_angle(np.atleast_1d(psi) - proj["heading"])
        d_ey = np.concatenate([proj["d_lat"], np.zeros((p.shape[0], 1))], axis=1)
        d_epsi = np.concatenate([-proj["d_head"], np.ones((p.shape[0], 1))], axis=1)
        return proj["s"], proj["lateral"], e_psi, d_ey, d_epsi


def turn_path(entry_point, entry_heading, turn_start: float, radius: float,
              sweep: float, exit_length: float) -> Path:
    """Straight run, a tangent arc of given signed sweep, then a straight exit."""
    entry_point = np.asarray(entry_point, dtype=np.float64)
    t_hat = np.array([np.cos(entry_heading), np.sin(entry_heading)])
    arc_start = entry_point + turn_start * t_hat
    direction = 1.0 if sweep > 0.0 else -1.0
    normal = direction * np.array([-t_hat[1], t_hat[0]])
    center = arc_start + radius * normal
    theta0 = np.arctan2(arc_start[1] - center[1], arc_start[0] - center[0])
    arc = ArcSegment(center, radius, theta0, sweep)
    segs = []
    if turn_start > 0.0:
        segs.append(LineSegment(entry_point, arc_start))
    segs.append(arc)
    exit_point, exit_heading = arc.point_at(arc.length)
    exit_t = np.array([np.cos(exit_heading), np.sin(exit_heading)])
    segs.append(LineSegment(exit_point, exit_point + exit_length * exit_t))
    return Path(segs)


def straight_path(entry_point, heading, length: float) -> Path:
    entry_point = np.asarray(entry_point, dtype=np.float64)
    t_hat = np.array([np.cos(heading), np.sin(heading)])
    return Path([LineSegment(entry_point, entry_point + length * t_hat)])


class CrossRoadBoundary:
    """Free-space boundary of two orthogonal corridors plus a central junction box.

    The drivable area is {|y| <= w} union {|x| <= w} union the box
    {|x|, |y| <= box_half}, clipped to the map extent; the box is what lets
    wide turn arcs cut the corners the way a real junction apron does.
    """

    def __init__(self, half_width: float, box_half: float, extent: float):
        if not 0.0 < half_width <= box_half < extent:
            raise ValueError("need 0 < half_width <= box_half < extent")
        self.half_width = float(half_width)
        self.box_half = float(box_half)
        self.extent = float(extent)
        w, b, e = self.half_width, self.box_half, self.extent
        segs = []
        for sy in (-1.0, 1.0):
            for sx in (-1.0, 1.0):
                segs.append(LineSegment([sx * b, sy * w], [sx * e, sy * w]))
                segs.append(LineSegment([sx * w, sy * b], [sx * w, sy * e]))
                if b > w:
                    segs.append(LineSegment([sx * w, sy * b], [sx * b, sy * b]))
                    segs.append(LineSegment([sx * b, sy * w], [sx * b, sy * b]))
        self.segments = segs
        self._p0 = np.stack([seg.p0 for seg in segs])
        self._tan = np.stack([seg.tangent for seg in segs])
        self._len = np.array([seg.length for seg in segs])

    def inside(self, p) -> bool:
        x, y = float(p[0]), float(p[1])
        if max(abs(x), abs(y)) > self.extent:
            return False
        return (abs(y) <= self.half_width or abs(x) <= self.half_width
                or (abs(x) <= self.box_half and abs(y) <= self.box_half))

    def nearest_points(self, p: np.ndarray) -> np.ndarray:
        """Closest boundary point for each query point (M, 2)."""
        p = np.atleast_2d(np.asarray(p, dtype=np.float64))
        rel = p[:, None, :] - self._p0[None, :, :]
        s = np.clip(np.einsum("mki,ki->mk", rel, self._tan), 0.0, self._len)
        cand = self._p0[None] + s[:, :, None] * self._tan[None]
        d2 = ((p[:, None, :] - cand) ** 2).sum(axis=2)
        pick = d2.argmin(axis=1)
        return cand[np.arange(p.shape[0]), pick]

    def nearest_point(self, p) -> np.ndarray:
        return self.nearest_points(np.asarray(p, dtype=np.float64)[None, :])[0]
