"""Planar flip task with penalty-spring finger contacts.

The object is a compliant slab lying on the table.  One of its short edges is
a hinge; the task is to rotate the slab about that hinge until it stands
upright (flip angle >= 90 degrees).  A gripper with two fingers moves in the
table plane; each finger has one vertical joint and one 3x5 taxel pad on its
tip.  Pressing on the slab's top surface and dragging toward the hinge drags
the surface by friction, which lifts the free edge once the lift force beats a
threshold.  Past ``tip_angle`` the slab falls upright on its own; without
contact below that angle it sags back flat.

Conventions: the camera frame equals the world frame (z up, table at z=0).
Object-local x points from the free edge to the hinge; ``u`` is the
horizontal distance from the hinge measured toward the free edge.
"""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from ..sensing import (
    Action,
    Observation,
    PointCloud,
    TactileFrame,
    matrix_to_rot6d,
    rot6d_to_matrix,
    rot_x,
    rot_z,
)

PHASES = ("REACH", "PRESS", "FLIP", "RETREAT")


@dataclass(frozen=True)
class SimConfig:
    workspace: float = 0.35
    object_margin: float = 0.06
    dt: float = 0.2
    substeps: int = 10
    max_steps: int = 300
    n_joints: int = 2
    grid: tuple[int, int] = (3, 5)
    taxel_pitch: float = 0.004
    footprint_sigma: float = 0.005
    finger_spread: float = 0.0125
    base_height: float = 0.08
    finger_length: float = 0.08
    q_max: float = 1.5
    max_step_xy: float = 0.02
    max_step_yaw: float = 0.15
    max_step_q: float = 0.12
    mu: float = 0.6
    k_tangential: float = 600.0
    stiffness_range: tuple[float, float] = (200.0, 500.0)
    thickness_range: tuple[float, float] = (0.02, 0.03)
    length_range: tuple[float, float] = (0.07, 0.09)
    width: float = 0.06
    yaw_range: float = 0.3
    lift_threshold: float = 1.0
    flip_gain: float = 0.7
    fall_rate: float = 0.5
    tip_angle: float = 0.9
    tip_rate: float = 1.5
    crush_force: float = 10.0
    side_tolerance: float = 0.003
    home: tuple[float, float] = (0.175, 0.175)
    n_points: int = 256
    n_object_points: int = 120
    n_gripper_points: int = 32
    occlusion_radius: float = 0.03
    pc_noise: float = 0.002

    @property
    def n_sensors(self) -> int:
        return 2


@dataclass
class WorldState:
    obj_xy: np.ndarray
    obj_yaw: float
    length: float
    thickness: float
    stiffness: float
    flip: float
    grip_xy: np.ndarray
    grip_yaw: float
    q: np.ndarray
    anchors: list = field(default_factory=lambda: [None, None])
    normal: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tangential: np.ndarray = field(default_factory=lambda: np.zeros((2, 2)))
    contact_force: np.ndarray = field(default_factory=lambda: np.zeros((2, 3)))
    lift_force: float = 0.0
    crushed: bool = False
    success: bool = False
    steps: int = 0

    def copy(self) -> "WorldState":
        return copy.deepcopy(self)


# ---------------------------------------------------------------- geometry helpers

def finger_z(q, cfg: SimConfig):
    return cfg.base_height - cfg.finger_length * np.sin(q)


def finger_q_for_height(z, cfg: SimConfig):
    s = np.clip((cfg.base_height - z) / cfg.finger_length, 0.0, np.sin(cfg.q_max))
    return np.arcsin(s)


def finger_xy(grip_xy, grip_yaw, cfg: SimConfig) -> np.ndarray:
    """World xy of the two fingertips, shape ``(2, 2)``."""
    lateral = rot_z(grip_yaw)[:2, 1]
    return np.stack([grip_xy + cfg.finger_spread * lateral, grip_xy - cfg.finger_spread * lateral])


def to_object_local(xy, s: WorldState) -> np.ndarray:
    return (rot_z(-s.obj_yaw)[:2, :2] @ (np.asarray(xy) - s.obj_xy).T).T


def surface_height(u: float, ly: float, s: WorldState, cfg: SimConfig) -> float | None:
    """Height of the slab's top surface above horizontal hinge-distance ``u``, or None if off the slab."""
    if abs(ly) > cfg.width / 2:
        return None
    if s.flip >= cfg.tip_angle:
        # past the tipping angle the slab snaps upright, away from the fingers
        return None
    c, sn = math.cos(s.flip), math.sin(s.flip)
    a = (u + s.thickness * sn) / c
    if a < 0.0 or a > s.length:
        return None
    return a * sn + s.thickness * c


def pad_rotation(grip_yaw: float) -> np.ndarray:
    """Pad frame: local z is the pad's outward normal (facing down onto the table)."""
    return rot_z(grip_yaw) @ rot_x(math.pi)


# ---------------------------------------------------------------- environment

class FlipEnv:
    def __init__(self, config: SimConfig | None = None):
        self.cfg = config or SimConfig()
        self.state: WorldState | None = None
        self.rng: np.random.Generator | None = None
        self._taxel_local = self._make_taxel_grid()

    def _make_taxel_grid(self) -> np.ndarray:
        R, C = self.cfg.grid
        p = self.cfg.taxel_pitch
        ys = (np.arange(R) - (R - 1) / 2) * p
        xs = (np.arange(C) - (C - 1) / 2) * p
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        return np.stack([gx, gy, np.zeros_like(gx)], axis=-1)  # (R, C, 3)

    # ------------------------------------------------------------ api
    def reset(self, seed: int) -> Observation:
        cfg = self.cfg
        self.rng = np.random.default_rng(seed)
        r = self.rng
        lo, hi = cfg.object_margin, cfg.workspace - cfg.object_margin
        self.state = WorldState(
            obj_xy=r.uniform(lo, hi, size=2),
            obj_yaw=float(r.uniform(-cfg.yaw_range, cfg.yaw_range)),
            length=float(r.uniform(*cfg.length_range)),
            thickness=float(r.uniform(*cfg.thickness_range)),
            stiffness=float(r.uniform(*cfg.stiffness_range)),
            flip=0.0,
            grip_xy=np.array(cfg.home, dtype=np.float64),
            grip_yaw=0.0,
            q=np.zeros(cfg.n_joints),
        )
        return self.render()

    def step(self, action: Action):
        if self.state is None:
            raise RuntimeError("step() before reset()")
        s, cfg = self.state, self.cfg
        if s.success or s.crushed or s.steps >= cfg.max_steps:
            raise RuntimeError("episode already finished")
        vec = action.to_vector()
        if not np.all(np.isfinite(vec)):
            raise ValueError("action contains non-finite values")
        if action.joints.shape[0] != cfg.n_joints:
            raise ValueError(f"expected {cfg.n_joints} joint targets, got {action.joints.shape[0]}")
        rot = rot6d_to_matrix(action.rotation)
        dyaw = float(np.clip(math.atan2(rot[1, 0], rot[0, 0]), -cfg.max_step_yaw, cfg.max_step_yaw))
        dxy = np.asarray(action.translation[:2], dtype=np.float64)
        norm = float(np.linalg.norm(dxy))
        if norm > cfg.max_step_xy:
            dxy = dxy * (cfg.max_step_xy / norm)
        # joints move toward their targets at a bounded rate
        q_goal = np.clip(action.joints, 0.0, cfg.q_max)
        dq = np.clip(q_goal - s.q, -cfg.max_step_q, cfg.max_step_q)

        xy0, yaw0, q0 = s.grip_xy.copy(), s.grip_yaw, s.q.copy()
        h = cfg.dt / cfg.substeps
        blocked = False
        for k in range(1, cfg.substeps + 1):
            frac = k / cfg.substeps
            s.q = q0 + frac * dq
            if not blocked:
                xy, yaw = xy0 + frac * dxy, yaw0 + frac * dyaw
                blocked = self._hits_side(xy, yaw)
                if not blocked:
                    s.grip_xy, s.grip_yaw = xy, yaw
            # the flip integrates last substep's lift, so contacts always match the final geometry
            self._update_flip(h)
            self._resolve_contacts()
            if s.crushed:
                break
        s.steps += 1
        done = s.success or s.crushed or s.steps >= cfg.max_steps
        return self.render(), done, s.success

    # ------------------------------------------------------------ physics
    def _penetration(self, xy, yaw) -> np.ndarray:
        """Depth of each fingertip below the top surface at gripper pose (xy, yaw); -inf off the slab."""
        s, cfg = self.state, self.cfg
        local = to_object_local(finger_xy(xy, yaw, cfg), s)
        zf = finger_z(s.q, cfg)
        out = np.full(2, -np.inf)
        for i in range(2):
            zs = surface_height(s.length / 2 - local[i, 0], local[i, 1], s, cfg)
            if zs is not None:
                out[i] = zs - zf[i]
        return out

    def _hits_side(self, xy, yaw) -> bool:
        """True if moving to (xy, yaw) would push a fingertip into the slab through its side."""
        tol = self.cfg.side_tolerance
        after = self._penetration(xy, yaw)
        if not np.any(after > tol):
            return False
        before = self._penetration(self.state.grip_xy, self.state.grip_yaw)
        return bool(np.any((after > tol) & (before <= tol)))

    def _resolve_contacts(self) -> None:
        s, cfg = self.state, self.cfg
        tips = finger_xy(s.grip_xy, s.grip_yaw, cfg)
        local = to_object_local(tips, s)
        zf = finger_z(s.q, cfg)
        rot = rot_z(s.obj_yaw)[:2, :2]
        lift = 0.0
        for i in range(2):
            lx, ly = local[i]
            zs = surface_height(s.length / 2 - lx, ly, s, cfg)
            depth = (zs - zf[i]) if zs is not None else 0.0
            if depth <= 0.0:
                s.anchors[i] = None
                s.normal[i] = 0.0
                s.tangential[i] = 0.0
                s.contact_force[i] = 0.0
                continue
            n = s.stiffness * depth
            if s.anchors[i] is None:
                s.anchors[i] = local[i].copy()
            delta = s.anchors[i] - local[i]
            f = cfg.k_tangential * delta
            fmag = float(np.linalg.norm(f))
            cap = cfg.mu * n
            if fmag > cap:
                # slip: drag the anchor so the spring sits on the friction cone
                f = f * (cap / fmag)
                s.anchors[i] = local[i] + f / cfg.k_tangential
            s.normal[i] = n
            s.tangential[i] = f
            s.contact_force[i] = np.concatenate([rot @ f, [n]])
            lift += max(0.0, -f[0])
            if n > cfg.crush_force:
                s.crushed = True
        s.lift_force = lift

    def _update_flip(self, h: float) -> None:
        s, cfg = self.state, self.cfg
        in_contact = bool(np.any(s.normal > 0.0))
        before = s.flip
        if s.flip >= cfg.tip_angle:
            s.flip += cfg.tip_rate * h
        elif in_contact and s.lift_force > cfg.lift_threshold:
            s.flip += cfg.flip_gain * (s.lift_force - cfg.lift_threshold) * h
        elif not in_contact:
            s.flip = max(0.0, s.flip - cfg.fall_rate * h)
        s.flip = min(s.flip, math.pi)
        self._carry_anchors(s.flip - before)
        if s.flip >= math.pi / 2:
            s.success = True

    def _carry_anchors(self, dphi: float) -> None:
        """Move stuck contact points with the rotating top surface (toward the hinge)."""
        if dphi == 0.0:
            return
        s = self.state
        c, sn = math.cos(s.flip), math.sin(s.flip)
        for i, anchor in enumerate(s.anchors):
            if anchor is None:
                continue
            u = s.length / 2 - anchor[0]
            a = (u + s.thickness * sn) / max(c, 0.05)
            anchor[0] += (a * sn + s.thickness * c) * dphi

    # ------------------------------------------------------------ rendering
    def render(self) -> Observation:
        return Observation(self.render_pointcloud(), self.render_tactile(), self.state.steps)

    def render_tactile(self) -> TactileFrame:
        s, cfg = self.state, self.cfg
        R, C = cfg.grid
        rpad = pad_rotation(s.grip_yaw)
        r6 = matrix_to_rot6d(rpad)
        tips = finger_xy(s.grip_xy, s.grip_yaw, cfg)
        zf = finger_z(s.q, cfg)
        forces = np.zeros((2, R, C, 3))
        pos = np.zeros((2, R, C, 3))
        for i in range(2):
            origin = np.array([tips[i, 0], tips[i, 1], zf[i]])
            pos[i] = origin + self._taxel_local @ rpad.T
            f_world = s.contact_force[i]
            if not np.any(f_world):
                continue
            f_pad = rpad.T @ f_world
            # shear shifts the pressure centroid on the pad
            centre = np.clip(0.002 * f_pad[:2], -0.006, 0.006)
            d2 = np.sum((self._taxel_local[..., :2] - centre) ** 2, axis=-1)
            w = np.exp(-d2 / (2 * cfg.footprint_sigma ** 2))
            w /= w.sum()
            forces[i] = w[..., None] * f_pad
        rot6 = np.broadcast_to(r6, (2, R, C, 6)).copy()
        return TactileFrame(forces, rot6, pos)

    def object_points(self, count: int) -> np.ndarray:
        """Surface samples of the slab (top face and the four sides), world frame."""
        s, r = self.state, self.rng
        n_top = int(round(count * 0.7))
        a = r.uniform(0, s.length, count)
        y = r.uniform(-self.cfg.width / 2, self.cfg.width / 2, count)
        b = np.full(count, s.thickness)
        side = np.arange(count) >= n_top
        b[side] = r.uniform(0, s.thickness, side.sum())
        which = r.integers(0, 4, side.sum())
        a_side, y_side = a[side], y[side]
        a_side[which == 0] = 0.0
        a_side[which == 1] = s.length
        y_side[which == 2] = -self.cfg.width / 2
        y_side[which == 3] = self.cfg.width / 2
        a[side], y[side] = a_side, y_side
        c, sn = math.cos(s.flip), math.sin(s.flip)
        u = a * c - b * sn
        z = a * sn + b * c
        lx = s.length / 2 - u
        xy = (rot_z(s.obj_yaw)[:2, :2] @ np.stack([lx, y])).T + s.obj_xy
        return np.column_stack([xy, z])

    def gripper_points(self) -> np.ndarray:
        s, cfg = self.state, self.cfg
        n_plate = cfg.n_gripper_points // 2
        ang = np.linspace(0, 2 * np.pi, n_plate, endpoint=False)
        rad = np.where(np.arange(n_plate) % 2 == 0, cfg.occlusion_radius, cfg.occlusion_radius / 2)
        plate = np.column_stack([
            s.grip_xy[0] + rad * np.cos(ang + s.grip_yaw),
            s.grip_xy[1] + rad * np.sin(ang + s.grip_yaw),
            np.full(n_plate, cfg.base_height),
        ])
        tips = finger_xy(s.grip_xy, s.grip_yaw, cfg)
        zf = finger_z(s.q, cfg)
        per = (cfg.n_gripper_points - n_plate) // 2
        fingers = [
            np.column_stack([np.full(per, tips[i, 0]), np.full(per, tips[i, 1]),
                             np.linspace(cfg.base_height, zf[i], per)])
            for i in range(2)
        ]
        return np.concatenate([plate] + fingers)

    def _occluded(self, pts: np.ndarray) -> np.ndarray:
        s, cfg = self.state, self.cfg
        d = np.linalg.norm(pts[:, :2] - s.grip_xy, axis=1)
        return (d < cfg.occlusion_radius) & (pts[:, 2] < cfg.base_height)

    def render_pointcloud(self) -> PointCloud:
        cfg, r = self.cfg, self.rng
        grip = self.gripper_points()
        obj = self.object_points(cfg.n_object_points)
        obj = obj[~self._occluded(obj)]
        n_table = cfg.n_points - len(grip) - len(obj)
        table = np.zeros((0, 3))
        while len(table) < n_table:
            cand = np.column_stack([r.uniform(0, cfg.workspace, (2 * n_table, 2)), np.zeros(2 * n_table)])
            table = np.concatenate([table, cand[~self._occluded(cand)]])
        table = table[:n_table]
        pts = np.concatenate([table, obj, grip])
        inten = np.concatenate([np.zeros(len(table)), np.ones(len(obj)), np.full(len(grip), 0.5)])
        pts = pts + r.normal(0.0, cfg.pc_noise, pts.shape)
        return PointCloud(pts, inten)
