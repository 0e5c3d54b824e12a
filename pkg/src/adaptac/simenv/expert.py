"""Privileged scripted expert for the flip task.

The expert is a pure function of :class:`WorldState`; its phase is inferred
from the state on every call, so demonstrations can be regenerated from any
intermediate state.
"""
from __future__ import annotations

import math

import numpy as np

from ..sensing import Action, IDENTITY_6D, matrix_to_rot6d, rot_z
from .world import (
    SimConfig,
    WorldState,
    finger_q_for_height,
    finger_xy,
    finger_z,
    surface_height,
    to_object_local,
)

FORCE_TARGET = 2.0
LIFT_TARGET = 2.0
FLIP_FORCE = 2.5
FORCE_BAND = (1.0, 3.0)
CONTACT_OFFSET = 0.015
HOVER_CLEARANCE = 0.012
MIN_DRAG = 0.003
ALIGN_TOL = 0.008
YAW_TOL = 0.08
DESCEND_RADIUS = 0.06


def _wrap(a: float) -> float:
    return (a + math.pi) % (2 * math.pi) - math.pi


def approach_target(s: WorldState) -> np.ndarray:
    """Gripper base position that puts both fingertips just inside the free edge."""
    local = np.array([-s.length / 2 + CONTACT_OFFSET, 0.0])
    return s.obj_xy + rot_z(s.obj_yaw)[:2, :2] @ local


def hover_height(s: WorldState) -> float:
    return s.thickness + HOVER_CLEARANCE


def _aligned(s: WorldState) -> bool:
    return (np.linalg.norm(approach_target(s) - s.grip_xy) < ALIGN_TOL
            and abs(_wrap(s.obj_yaw - s.grip_yaw)) < YAW_TOL)


def expert_phase(s: WorldState, cfg: SimConfig) -> str:
    if s.flip >= cfg.tip_angle:
        return "RETREAT"
    if np.any(s.normal > 0.0):
        in_band = np.all((s.normal >= FORCE_BAND[0]) & (s.normal <= FORCE_BAND[1]))
        dragging = np.max(np.linalg.norm(s.tangential, axis=1)) > 0.1
        return "FLIP" if (s.flip > 0.02 or dragging or in_band) else "PRESS"
    zf = finger_z(s.q, cfg)
    if _aligned(s) and np.all(zf <= hover_height(s) + 1e-3):
        return "PRESS"
    if not _aligned(s) and np.any(zf < hover_height(s) - 0.002):
        return "RETREAT"
    return "REACH"


def _yaw_delta(s: WorldState, cfg: SimConfig) -> float:
    return float(np.clip(_wrap(s.obj_yaw - s.grip_yaw), -cfg.max_step_yaw, cfg.max_step_yaw))


def _rotation(dyaw: float) -> np.ndarray:
    return matrix_to_rot6d(rot_z(dyaw)) if dyaw else IDENTITY_6D.copy()


def _clamp_xy(d: np.ndarray, cfg: SimConfig) -> np.ndarray:
    n = float(np.linalg.norm(d))
    return d * (cfg.max_step_xy / n) if n > cfg.max_step_xy else d


def _joint_target(q_des, cfg: SimConfig) -> np.ndarray:
    return np.clip(np.broadcast_to(q_des, (cfg.n_joints,)), 0.0, cfg.q_max).astype(np.float64)


def _press_heights(s: WorldState, cfg: SimConfig, shift: float, flip: float,
                   force: float = FORCE_TARGET) -> np.ndarray:
    """Fingertip heights giving ``force`` of normal load after moving ``shift`` toward the hinge."""
    local = to_object_local(finger_xy(s.grip_xy, s.grip_yaw, cfg), s)
    probe = s.copy()
    probe.flip = flip
    zf = finger_z(s.q, cfg)
    out = zf.copy()
    for i in range(2):
        u = s.length / 2 - local[i, 0] - shift
        zs = surface_height(u, local[i, 1], probe, cfg)
        if zs is not None:
            out[i] = zs - force / s.stiffness
    return out


def scripted_expert(s: WorldState, cfg: SimConfig | None = None) -> Action:
    cfg = cfg or SimConfig()
    phase = expert_phase(s, cfg)
    J = cfg.n_joints
    if phase == "REACH":
        offset = approach_target(s) - s.grip_xy
        dxy = _clamp_xy(offset, cfg)
        dyaw = _yaw_delta(s, cfg)
        # fingers stay raised until the gripper is close to the object
        near = np.linalg.norm(offset) < DESCEND_RADIUS
        q_des = np.full(J, finger_q_for_height(hover_height(s), cfg) if near else 0.0)
        return Action(np.array([dxy[0], dxy[1], 0.0]), _rotation(dyaw), _joint_target(q_des, cfg))
    if phase == "RETREAT":
        if s.flip >= cfg.tip_angle:
            return Action(np.zeros(3), IDENTITY_6D.copy(), np.zeros(J))
        q_des = np.full(J, finger_q_for_height(hover_height(s) + 0.005, cfg))
        return Action(np.zeros(3), IDENTITY_6D.copy(), _joint_target(q_des, cfg))
    if phase == "PRESS":
        dxy = _clamp_xy(approach_target(s) - s.grip_xy, cfg)
        z_des = _press_heights(s, cfg, 0.0, s.flip)
        return Action(np.array([dxy[0], dxy[1], 0.0]), _rotation(_yaw_delta(s, cfg)),
                      _joint_target(finger_q_for_height(z_des, cfg), cfg))
    # FLIP: drag toward the hinge at the pace that keeps the fingers at a fixed
    # spot on the rising slab, while holding the normal force on target.
    omega = cfg.flip_gain * (LIFT_TARGET - cfg.lift_threshold)
    flip_pred = min(s.flip + omega * cfg.dt, cfg.tip_angle)
    local = to_object_local(finger_xy(s.grip_xy, s.grip_yaw, cfg), s)
    u_now = float(np.mean(s.length / 2 - local[:, 0]))
    c, sn = math.cos(s.flip), math.sin(s.flip)
    a_now = (u_now + s.thickness * sn) / c
    u_des = a_now * math.cos(flip_pred) - s.thickness * math.sin(flip_pred)
    # geometric pace plus the stretch still missing on the friction springs
    stretch = (LIFT_TARGET - s.lift_force) / (J * cfg.k_tangential)
    drag = float(np.clip(u_now - u_des + stretch, MIN_DRAG, cfg.max_step_xy))
    axes = rot_z(s.obj_yaw)[:2, :2]
    # keep the fingers centred across the slab while dragging
    lateral = float(np.clip(-np.mean(local[:, 1]), -cfg.max_step_xy / 2, cfg.max_step_xy / 2))
    dxy = axes[:, 0] * drag + axes[:, 1] * lateral
    # on the first drag step the slab only starts rising once friction has built up
    flip_h = flip_pred if s.flip > 0.01 else s.flip + 0.5 * (flip_pred - s.flip)
    # correct the steady-state model error with the measured load
    force = FLIP_FORCE + float(np.clip(0.5 * (FLIP_FORCE - np.mean(s.normal)), -1.0, 1.0))
    z_des = _press_heights(s, cfg, drag, flip_h, force)
    return Action(np.array([dxy[0], dxy[1], 0.0]), _rotation(_yaw_delta(s, cfg)),
                  _joint_target(finger_q_for_height(z_des, cfg), cfg))
