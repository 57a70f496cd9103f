"""Two-way intersection driving environment with a differentiable prediction model.

The ego vehicle tracks a randomly selected reference path (straight, left or
right through the junction) under the quadratic tracking/effort penalty, while
scripted traffic crosses the junction.  Safety is encoded by two-circle
distance constraints against every surrounding vehicle plus road-margin
circles, all with the h <= 0 safe convention.

Observation layout (41 numbers, position-stable):

    0:6    ego        v_x, v_y, r_y, x, y, psi
    6:9    tracking   dx (identically 0 under closest-point tracking), dy, dpsi
    9:41   8 blocks   x_j, y_j, v_j, psi_j  (placeholders 1 km ahead, v = 0)

Actuation passes through a one-step hold: the command issued at t drives the
chassis during step t+1.  The hold is part of the prediction model's state
(two extra dimensions beyond the observation), which is exactly what gives the
distance constraints their relative degree of 3 with respect to the commands.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..constraints import CircleGeometry, StateConstraint, circle_centers, two_circle_h
from ..dynamics import BicycleModel, BicycleParams, surrounding_block_jacobian, surrounding_block_step
from ..errors import ContractViolation
from ..rollout import RolloutModel
from .base import SafeModelEnv
from .geometry import CrossRoadBoundary, Path
from .traffic import DESTINATIONS, TrafficGenerator, build_route

OBS_DIM = 41
MODEL_DIM = 43
N_SLOTS = 8
EGO = slice(0, 6)
TRACK = slice(6, 9)
REG = slice(41, 43)
PLACEHOLDER_DISTANCE = 1000.0


def sv_slice(k: int) -> slice:
    return slice(9 + 4 * k, 13 + 4 * k)


@dataclass
class ScenarioConfig:
    """Map, traffic and episode parameters; defaults are the desk-scale setup."""

    intersection_size: float = 50.0      # junction box edge length
    lane_width: float = 3.75
    lanes_per_direction: int = 3
    extent: float = 60.0                 # map half-extent
    radius_right: float = 20.0
    radius_left: float = 30.0
    arrival_rate: float = 0.1            # vehicles / s / entry
    initial_vehicles_mean: float = 3.0
    max_vehicles: int = 8
    speed_range: tuple = (6.0, 12.0)
    episode_steps: int = 200
    v_target: float = 8.0
    dt: float = 0.1
    spawn_s_range: tuple = (5.0, 25.0)
    spawn_speed_range: tuple = (5.0, 9.0)
    spawn_h_margin: float = 2.0          # require h < -margin at reset
    lse_temperature: float = 0.5

    def __post_init__(self):
        self.half_width = self.lane_width * self.lanes_per_direction
        self.box_half = self.intersection_size / 2.0
        if not self.half_width <= self.box_half < self.extent:
            raise ContractViolation("junction box must cover the roads and fit the map")
        outer = 2.5 * self.lane_width
        if self.extent <= outer + self.radius_right:
            raise ContractViolation("map extent too small for the right-turn radius")
        if self.extent <= self.radius_left - 0.5 * self.lane_width:
            raise ContractViolation("map extent too small for the left-turn radius")


class IntersectionConstraint(StateConstraint):
    """Smooth maximum of all pairwise two-circle and road-margin values.

    34 raw values per state (8 vehicles x 4 circle pairs + 2 road circles) are
    reduced with log-sum-exp so the trainer sees a single differentiable
    constraint; placeholder vehicles sit so far away they carry no weight.
    """

    def __init__(self, geom: CircleGeometry, boundary: CrossRoadBoundary,
                 temperature: float = 0.5):
        self.geom = geom
        self.boundary = boundary
        self.temperature = float(temperature)
        self._offs = np.array([geom.front_offset, geom.rear_offset])

    def raw_values(self, s: np.ndarray) -> np.ndarray:
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        ego_pose = s[:, [3, 4, 5]]
        sv = s[:, 9:41].reshape(-1, N_SLOTS, 4)
        sv_pose = sv[:, :, [0, 1, 3]]
        h_pairs = two_circle_h(ego_pose[:, None, :], sv_pose, self.geom)  # (B, 8, 4)
        ego_c = circle_centers(ego_pose, self.geom)                       # (B, 2, 2)
        flat = ego_c.reshape(-1, 2)
        nearest = self.boundary.nearest_points(flat).reshape(ego_c.shape)
        d2 = ((ego_c - nearest) ** 2).sum(axis=-1)
        h_road = self.geom.d_r_safe ** 2 - d2                              # (B, 2)
        return np.concatenate([h_pairs.reshape(s.shape[0], -1), h_road], axis=1)

    def value(self, s):
        vals = self.raw_values(s)
        top = vals.max(axis=1, keepdims=True)
        out = top[:, 0] + self.temperature * np.log(
            np.exp((vals - top) / self.temperature).sum(axis=1))
        return out

    def grad(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        nb = s.shape[0]
        vals = self.raw_values(s)
        top = vals.max(axis=1, keepdims=True)
        w = np.exp((vals - top) / self.temperature)
        w /= w.sum(axis=1, keepdims=True)
        w_pairs = w[:, :32].reshape(nb, N_SLOTS, 2, 2)   # (B, veh, ego circle, sv circle)
        w_road = w[:, 32:]

        ego_pose = s[:, [3, 4, 5]]
        psi = ego_pose[:, 2]
        ego_c = circle_centers(ego_pose, self.geom)                     # (B, 2, 2)
        d_ego_dpsi = self._offs[None, :, None] * np.stack(
            [-np.sin(psi), np.cos(psi)], axis=-1)[:, None, :]           # (B, 2, 2)

        sv = s[:, 9:41].reshape(nb, N_SLOTS, 4)
        sv_pose = sv[:, :, [0, 1, 3]]
        sv_psi = sv_pose[:, :, 2]
        sv_c = circle_centers(sv_pose, self.geom)                       # (B, 8, 2, 2)
        d_sv_dpsi = self._offs[None, None, :, None] * np.stack(
            [-np.sin(sv_psi), np.cos(sv_psi)], axis=-1)[:, :, None, :]  # (B, 8, 2, 2)

        diff = ego_c[:, None, :, None, :] - sv_c[:, :, None, :, :]     # (B, 8, 2e, 2s, 2)
        grad = np.zeros((nb, MODEL_DIM if s.shape[1] == MODEL_DIM else s.shape[1]))

        wd = w_pairs[..., None] * diff                                  # weighted differences
        grad[:, 3] += -2.0 * wd[..., 0].sum(axis=(1, 2, 3))
        grad[:, 4] += -2.0 * wd[..., 1].sum(axis=(1, 2, 3))
        grad[:, 5] += -2.0 * np.einsum("bkijc,bic->b", wd, d_ego_dpsi)
        for k in range(N_SLOTS):
            base = 9 + 4 * k
            grad[:, base + 0] += 2.0 * wd[:, k, :, :, 0].sum(axis=(1, 2))
            grad[:, base + 1] += 2.0 * wd[:, k, :, :, 1].sum(axis=(1, 2))
            grad[:, base + 3] += 2.0 * np.einsum("bijc,bjc->b", wd[:, k], d_sv_dpsi[:, k])

        flat = ego_c.reshape(-1, 2)
        nearest = self.boundary.nearest_points(flat).reshape(ego_c.shape)
        rdiff = ego_c - nearest                                         # (B, 2, 2)
        wrd = w_road[..., None] * rdiff
        grad[:, 3] += -2.0 * wrd[..., 0].sum(axis=1)
        grad[:, 4] += -2.0 * wrd[..., 1].sum(axis=1)
        grad[:, 5] += -2.0 * np.einsum("bic,bic->b", wrd, d_ego_dpsi)
        return grad


class IntersectionModel(RolloutModel):
    """Joint prediction model: ego chassis + actuation hold + kinematic traffic.

    Model state = observation (41) + pending command (2).  Surrounding blocks
    follow the constant-speed recurrence with per-start yaw rates taken from
    the traffic generator's route intents; tracking errors are recomputed
    against the per-start reference path after every ego step.
    """

    state_dim = MODEL_DIM
    action_dim = 2
    obs_slice = slice(0, OBS_DIM)

    def __init__(self, paths: list[Path], path_ids: np.ndarray, yaw_rps: np.ndarray,
                 bicycle: BicycleModel, v_target: float, dt: float):
        self.paths = paths
        self.path_ids = np.asarray(path_ids, dtype=np.int64)
        self.yaw_rps = np.asarray(yaw_rps, dtype=np.float64)
        self.bike = bicycle
        self.v_target = float(v_target)
        self.dt = float(dt)

    def _expect_batch(self, s):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        if s.shape[0] != self.path_ids.shape[0]:
            raise ContractViolation(
                f"model was built for {self.path_ids.shape[0]} start states, got {s.shape[0]}")
        return s

    def _tracking(self, ego: np.ndarray):
        """Errors and pose-gradients grouped by reference path."""
        nb = ego.shape[0]
        e_y = np.empty(nb)
        e_psi = np.empty(nb)
        d_ey = np.empty((nb, 3))
        d_epsi = np.empty((nb, 3))
        for pid in np.unique(self.path_ids):
            m = self.path_ids == pid
            _, ey, ep, dey, dep = self.paths[pid].tracking_errors_batch(
                ego[m, 3], ego[m, 4], ego[m, 5])
            e_y[m], e_psi[m], d_ey[m], d_epsi[m] = ey, ep, dey, dep
        return e_y, e_psi, d_ey, d_epsi

    def step(self, s, a):
        single = np.asarray(s).ndim == 1
        s = self._expect_batch(s)
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        ego_new = self.bike.step(s[:, EGO], s[:, REG])
        e_y, e_psi, _, _ = self._tracking(ego_new)
        sv = surrounding_block_step(s[:, 9:41].reshape(-1, N_SLOTS, 4), self.yaw_rps, self.dt)
        out = np.empty_like(s)
        out[:, EGO] = ego_new
        out[:, 6] = 0.0
        out[:, 7] = e_y
        out[:, 8] = e_psi
        out[:, 9:41] = sv.reshape(s.shape[0], 32)
        out[:, REG] = a
        return out[0] if single else out

    def jacobians(self, s, a):
        single = np.asarray(s).ndim == 1
        s = self._expect_batch(s)
        nb = s.shape[0]
        A_b, B_b = self.bike.jacobians(s[:, EGO], s[:, REG])
        ego_new = self.bike.step(s[:, EGO], s[:, REG])
        _, _, d_ey, d_epsi = self._tracking(ego_new)

        A = np.zeros((nb, MODEL_DIM, MODEL_DIM))
        B = np.zeros((nb, MODEL_DIM, 2))
        A[:, 0:6, 0:6] = A_b
        A[:, 0:6, 41:43] = B_b
        # Tracking errors are functions of the new ego pose (rows 3:6 of the
        # chassis update); dx is identically zero.
        pose_A = A_b[:, 3:6, :]
        pose_B = B_b[:, 3:6, :]
        A[:, 7, 0:6] = np.einsum("bi,bij->bj", d_ey, pose_A)
        A[:, 7, 41:43] = np.einsum("bi,bij->bj", d_ey, pose_B)
        A[:, 8, 0:6] = np.einsum("bi,bij->bj", d_epsi, pose_A)
        A[:, 8, 41:43] = np.einsum("bi,bij->bj", d_epsi, pose_B)
        J_sv = surrounding_block_jacobian(s[:, 9:41].reshape(-1, N_SLOTS, 4),
                                          self.yaw_rps, self.dt)
        for k in range(N_SLOTS):
            A[:, sv_slice(k), sv_slice(k)] = J_sv[:, k]
        B[:, 41, 0] = 1.0
        B[:, 42, 1] = 1.0
        return (A[0], B[0]) if single else (A, B)

    def reward(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        return (0.05 * (s[:, 0] - self.v_target) ** 2 + 0.8 * s[:, 7] ** 2
                + 30.0 * s[:, 8] ** 2 + 0.02 * s[:, 2] ** 2
                + 5.0 * a[:, 0] ** 2 + 0.05 * a[:, 1] ** 2)

    def reward_grads(self, s, a):
        s = np.atleast_2d(np.asarray(s, dtype=np.float64))
        a = np.atleast_2d(np.asarray(a, dtype=np.float64))
        dr_ds = np.zeros_like(s)
        dr_ds[:, 0] = 0.1 * (s[:, 0] - self.v_target)
        dr_ds[:, 7] = 1.6 * s[:, 7]
        dr_ds[:, 8] = 60.0 * s[:, 8]
        dr_ds[:, 2] = 0.04 * s[:, 2]
        dr_da = np.stack([10.0 * a[:, 0], 0.1 * a[:, 1]], axis=1)
        return dr_ds, dr_da


@dataclass
class SlotMeta:
    """Per-observation prediction metadata recorded at sampling time."""

    path_id: int
    pending: np.ndarray
    yaw_rps: np.ndarray


class IntersectionEnv(SafeModelEnv):
    """See module docstring.  One instance is single-owner mutable."""

    obs_dim = OBS_DIM
    action_dim = 2

    def __init__(self, scenario: ScenarioConfig | None = None,
                 bicycle_params: BicycleParams | None = None,
                 geometry: CircleGeometry | None = None):
        self.scenario = scenario or ScenarioConfig()
        sc = self.scenario
        self.dt = sc.dt
        self.bike_params = bicycle_params or BicycleParams()
        self.bike = BicycleModel(self.bike_params, sc.dt)
        self.geom = geometry or CircleGeometry()
        self.action_scale = np.array([self.bike_params.steer_max, self.bike_params.accel_max])
        self.boundary = CrossRoadBoundary(sc.half_width, sc.box_half, sc.extent)
        self.ego_paths = [build_route(0, dest, sc.lane_width, sc.extent,
                                      sc.radius_right, sc.radius_left)
                          for dest in DESTINATIONS]
        self.traffic = TrafficGenerator(sc.lane_width, sc.extent, sc.radius_right,
                                        sc.radius_left, sc.arrival_rate, sc.speed_range,
                                        sc.max_vehicles)
        self._constraint = IntersectionConstraint(self.geom, self.boundary,
                                                  sc.lse_temperature)
        self._rng = None
        self._ego = None
        self._pending = np.zeros(2)
        self._path_id = 0
        self._t = 0
        self._last_obs = None
        self._last_meta = None

    # -- episode control ----------------------------------------------------

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self._rng = rng
        sc = self.scenario
        for _ in range(100):
            self._path_id = int(rng.integers(len(self.ego_paths)))
            path = self.ego_paths[self._path_id]
            s0 = rng.uniform(*sc.spawn_s_range)
            point, heading = path.point_at(s0)
            speed = rng.uniform(*sc.spawn_speed_range)
            self._ego = np.array([speed, 0.0, 0.0, point[0], point[1], heading])
            self.traffic.populate(rng, sc.initial_vehicles_mean)
            self._pending = np.zeros(2)
            self._t = 0
            if self._all_h().max(initial=-np.inf) < -sc.spawn_h_margin:
                obs, meta = self._observe()
                self._last_obs, self._last_meta = obs, meta
                return obs
        raise RuntimeError("could not find a safe spawn in 100 attempts")

    def step(self, action: np.ndarray):
        if self._ego is None:
            raise ContractViolation("call reset before step")
        sc = self.scenario
        cmd = np.clip(np.asarray(action, dtype=np.float64).reshape(-1),
                      -self.action_scale, self.action_scale)
        penalty = float(self._penalty(self._last_obs, cmd))

        self._ego = self.bike.step(self._ego, self._pending)
        self._pending = cmd
        self.traffic.step(self._rng, sc.dt)
        self._t += 1

        obs, meta = self._observe()
        self._last_obs, self._last_meta = obs, meta
        h_pairs, h_road = self._split_h()
        violation = float(np.maximum(h_pairs, 0.0).sum())
        h_max = float(max(h_pairs.max(initial=-np.inf), h_road.max(initial=-np.inf)))
        s_proj, *_ = self.ego_paths[self._path_id].tracking_errors_batch(
            self._ego[3:4], self._ego[4:5], self._ego[5:6])
        collided = bool((h_pairs > 0.0).any())
        off_road = not self.boundary.inside(self._ego[3:5])
        completed = float(s_proj[0]) >= self.ego_paths[self._path_id].length - 2.0
        done = collided or off_road or completed or self._t >= sc.episode_steps
        info = {
            "violation": violation,
            "h_max": h_max,
            "collision": collided,
            "off_road": off_road,
            "completed": completed,
            "ego_pose": self._ego[[3, 4, 5]].copy(),
            "sv_poses": np.array([v.pose() for v in self.traffic.vehicles], dtype=np.float64),
            "h_pairs": h_pairs,
            "h_road": h_road,
            "penalty": penalty,
        }
        return obs, penalty, done, info

    # -- observation / constraint helpers ------------------------------------

    def _penalty(self, obs: np.ndarray, cmd: np.ndarray) -> float:
        sc = self.scenario
        return (0.05 * (obs[0] - sc.v_target) ** 2 + 0.8 * obs[7] ** 2
                + 30.0 * obs[8] ** 2 + 0.02 * obs[2] ** 2
                + 5.0 * cmd[0] ** 2 + 0.05 * cmd[1] ** 2)

    def _select_vehicles(self):
        ex, ey = self._ego[3], self._ego[4]
        box = self.scenario.box_half
        keyed = []
        for v in self.traffic.vehicles:
            x, y, psi = v.pose()
            dist = np.hypot(x - ex, y - ey)
            in_junction = abs(x) <= box and abs(y) <= box
            keyed.append((dist, 0 if in_junction else 1, v.vid, v))
        keyed.sort(key=lambda t: t[:3])
        return [t[3] for t in keyed[:N_SLOTS]]

    def _observe(self):
        selected = self._select_vehicles()
        obs = np.zeros(OBS_DIM)
        obs[0:6] = self._ego
        _, e_y, e_psi, _, _ = self.ego_paths[self._path_id].tracking_errors_batch(
            self._ego[3:4], self._ego[4:5], self._ego[5:6])
        obs[6] = 0.0
        obs[7] = float(e_y[0])
        obs[8] = float(e_psi[0])
        yaw_rps = np.zeros(N_SLOTS)
        heading = np.array([np.cos(self._ego[5]), np.sin(self._ego[5])])
        for k in range(N_SLOTS):
            blk = sv_slice(k)
            if k < len(selected):
                v = selected[k]
                x, y, psi = v.pose()
                obs[blk] = (x, y, v.speed, psi)
                yaw_rps[k] = v.yaw_rate_per_speed()
            else:
                px, py = self._ego[3:5] + PLACEHOLDER_DISTANCE * heading
                obs[blk] = (px, py, 0.0, 0.0)
        meta = SlotMeta(self._path_id, self._pending.copy(), yaw_rps)
        return obs, meta

    def _all_h(self) -> np.ndarray:
        h_pairs, h_road = self._split_h()
        return np.concatenate([h_pairs.reshape(-1), h_road])

    def _split_h(self):
        """Physical constraint values against the actual traffic (not the
        filtered observation): all present vehicles count."""
        ego_pose = self._ego[[3, 4, 5]]
        if self.traffic.vehicles:
            sv = np.array([v.pose() for v in self.traffic.vehicles], dtype=np.float64)
            h_pairs = two_circle_h(ego_pose[None, :], sv, self.geom)
        else:
            h_pairs = np.zeros((0, 4))
        ego_c = circle_centers(ego_pose[None, :], self.geom)[0]
        nearest = self.boundary.nearest_points(ego_c)
        h_road = self.geom.d_r_safe ** 2 - ((ego_c - nearest) ** 2).sum(axis=1)
        return h_pairs, h_road

    # -- model-side interface -------------------------------------------------

    def current_meta(self) -> SlotMeta:
        return self._last_meta

    def build_model(self, metas: list) -> IntersectionModel:
        path_ids = np.array([m.path_id for m in metas], dtype=np.int64)
        yaw = np.stack([m.yaw_rps for m in metas])
        return IntersectionModel(self.ego_paths, path_ids, yaw, self.bike,
                                 self.scenario.v_target, self.scenario.dt)

    def model_start_states(self, obs: np.ndarray, metas: list) -> np.ndarray:
        obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
        pend = np.stack([m.pending for m in metas])
        return np.concatenate([obs, pend], axis=1)

    def state_constraint(self) -> IntersectionConstraint:
        return self._constraint
