"""Scripted surrounding traffic: Poisson arrivals on entry lanes, constant speed
along fixed route polylines, deletion on exit.

This replaces an external traffic simulator.  It is not a model of any real
traffic distribution; it only preserves the decision structure (crossing,
merging and turning conflicts at a junction).  Route labels follow right-hand
traffic: right turns use the tighter radius.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .geometry import ArcSegment, Path, straight_path, turn_path

ENTRY_HEADINGS = [np.pi / 2, np.pi, -np.pi / 2, 0.0]  # south, east, north, west entries
DESTINATIONS = ("straight", "left", "right")


def build_route(entry: int, destination: str, lane_width: float, extent: float,
                radius_right: float = 20.0, radius_left: float = 30.0) -> Path:
    """Canonical lane assignment: right turns from the outer lane, left turns
    from the inner lane, straight from the middle lane."""
    heading = ENTRY_HEADINGS[entry]
    h = np.array([np.cos(heading), np.sin(heading)])
    right_n = np.array([h[1], -h[0]])
    if destination == "straight":
        offset = 1.5 * lane_width
        p0 = -extent * h + offset * right_n
        return straight_path(p0, heading, 2.0 * extent)
    if destination == "right":
        offset = 2.5 * lane_width
        p0 = -extent * h + offset * right_n
        turn_start = extent - (offset + radius_right)
        exit_len = extent - (offset + radius_right)
        return turn_path(p0, heading, turn_start, radius_right, -np.pi / 2, exit_len)
    if destination == "left":
        offset = 0.5 * lane_width
        p0 = -extent * h + offset * right_n
        turn_start = extent - (radius_left - offset)
        exit_len = extent - (radius_left - offset)
        return turn_path(p0, heading, turn_start, radius_left, np.pi / 2, exit_len)
    raise ValueError(f"unknown destination {destination!r}")


@dataclass
class TrafficVehicle:
    vid: int
    entry: int
    destination: str
    path: Path
    s: float
    speed: float

    def pose(self) -> tuple[float, float, float]:
        point, heading = self.path.point_at(self.s)
        return float(point[0]), float(point[1]), float(heading)

    def yaw_rate_per_speed(self) -> float:
        """turn_sign / R while the vehicle is on its arc, else 0 (the intent
        signal the prediction model consumes)."""
        seg = self.path.segments[self.path.segment_index_at(self.s)]
        if isinstance(seg, ArcSegment):
            return seg.direction / seg.radius
        return 0.0

    def done(self) -> bool:
        return self.s >= self.path.length


class TrafficGenerator:
    """Owns the surrounding-vehicle population of one environment instance."""

    def __init__(self, lane_width: float, extent: float, radius_right: float,
                 radius_left: float, arrival_rate: float, speed_range=(6.0, 12.0),
                 max_vehicles: int = 8, min_spawn_gap: float = 12.0):
        self.routes = {
            (entry, dest): build_route(entry, dest, lane_width, extent,
                                       radius_right, radius_left)
            for entry in range(4) for dest in DESTINATIONS
        }
        self.arrival_rate = float(arrival_rate)
        self.speed_range = tuple(speed_range)
        self.max_vehicles = int(max_vehicles)
        self.min_spawn_gap = float(min_spawn_gap)
        self.vehicles: list[TrafficVehicle] = []
        self._next_id = 0

    def _spawn(self, rng: np.random.Generator, entry: int, s: float = 0.0) -> TrafficVehicle | None:
        dest = DESTINATIONS[rng.integers(len(DESTINATIONS))]
        path = self.routes[(entry, dest)]
        speed = rng.uniform(*self.speed_range)
        point, _ = path.point_at(s)
        for v in self.vehicles:
            vx, vy, _ = v.pose()
            if (vx - point[0]) ** 2 + (vy - point[1]) ** 2 < self.min_spawn_gap ** 2:
                return None
        veh = TrafficVehicle(self._next_id, entry, dest, path, s, speed)
        self._next_id += 1
        self.vehicles.append(veh)
        return veh

    def populate(self, rng: np.random.Generator, mean_initial: float):
        """Scatter an initial population along the routes (reset-time only)."""
        self.vehicles = []
        n = int(rng.poisson(mean_initial))
        for _ in range(n):
            if len(self.vehicles) >= self.max_vehicles:
                break
            entry = int(rng.integers(4))
            dest = DESTINATIONS[rng.integers(len(DESTINATIONS))]
            path = self.routes[(entry, dest)]
            s = rng.uniform(0.0, 0.7 * path.length)
            point, _ = path.point_at(s)
            clear = all(
                (v.pose()[0] - point[0]) ** 2 + (v.pose()[1] - point[1]) ** 2
                >= self.min_spawn_gap ** 2
                for v in self.vehicles
            )
            if clear:
                veh = TrafficVehicle(self._next_id, entry, dest, path, float(s),
                                     rng.uniform(*self.speed_range))
                self._next_id += 1
                self.vehicles.append(veh)

    def step(self, rng: np.random.Generator, dt: float):
        for v in self.vehicles:
            v.s += v.speed * dt
        self.vehicles = [v for v in self.vehicles if not v.done()]
        for entry in range(4):
            if len(self.vehicles) >= self.max_vehicles:
                break
            if rng.uniform() < self.arrival_rate * dt:
                self._spawn(rng, entry)
