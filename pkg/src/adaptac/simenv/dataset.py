"""Demonstration datasets recorded from the scripted expert.

File layout (little-endian)::

    b"ADPD" | u32 version
    u32 h | u32 n | u32 J | u32 sensors | u32 rows | u32 cols | f64 workspace
    u32 trajectory count
    per trajectory:
        u64 episode seed | u32 steps (observations, one more than actions)
        per step:
            u32 points | f64 points*4 (xyz, intensity)
            f64 sensors*rows*cols*12 (force, 6D rotation, position)
            u8 has_action | f64 action (9 + J; zeros when absent)
            f64 net force (3) | u8 phase code

Phase labels describe what the expert was doing at each step.  They are kept
for analysing attention traces and are never fed to training.
"""
from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..rng import stream, stream_seed
from ..sensing import Action, Observation, PointCloud, TactileFrame, net_force
from .expert import expert_phase, scripted_expert
from .world import PHASES, FlipEnv, SimConfig

MAGIC = b"ADPD"
VERSION = 1


class DatasetError(ValueError):
    pass


class SchemaVersionError(DatasetError):
    pass


@dataclass
class Trajectory:
    seed: int
    points: list[np.ndarray]          # per step (N_k, 4)
    tactile: np.ndarray               # (steps, sensors, taxels, 12)
    actions: np.ndarray               # (steps - 1, 9 + J)
    net_force: np.ndarray             # (steps, 3)
    phases: list[str]

    def __len__(self) -> int:
        return len(self.points)

    def observation(self, k: int, grid: tuple[int, int]) -> Observation:
        pts = self.points[k]
        return Observation(PointCloud(pts[:, :3], pts[:, 3]),
                           TactileFrame.from_array(self.tactile[k], grid), k)


@dataclass
class DemoDataset:
    h: int
    n: int
    n_joints: int
    n_sensors: int
    grid: tuple[int, int]
    workspace: float
    trajectories: list[Trajectory] = field(default_factory=list)

    @property
    def action_dim(self) -> int:
        return 9 + self.n_joints

    def n_steps(self) -> int:
        return sum(len(t.actions) for t in self.trajectories)


# executed-command noise for demonstrations: (translation std m, joint std rad)
DEMO_NOISE = (0.003, 0.05)


def _record_trajectory(env: FlipEnv, seed: int, policy: Callable | None = None,
                       noise: tuple[float, float] = (0.0, 0.0),
                       rng: np.random.Generator | None = None) -> tuple[Trajectory, bool]:
    """Roll ``policy`` from ``seed``.

    With nonzero ``noise = (xy_std, joint_std)`` the executed command is the
    policy's action plus Gaussian noise (drawn from ``rng``) on translation and
    joint targets while the recorded label stays clean, so the data covers
    small recoveries from off-demonstration states.
    """
    obs = env.reset(seed)
    cfg = env.cfg
    policy = policy or (lambda s: scripted_expert(s, cfg))
    points, tac, acts, forces, phases = [], [], [], [], []
    done = False
    success = False
    while True:
        points.append(obs.pc.with_intensity())
        tac.append(obs.tac.as_array())
        forces.append(net_force(obs.tac))
        phases.append(expert_phase(env.state, cfg))
        if done:
            break
        action = policy(env.state)
        acts.append(action.to_vector())
        if rng is not None and (noise[0] or noise[1]):
            action = Action(action.translation + np.r_[noise[0] * rng.standard_normal(2), 0.0],
                            action.rotation, action.joints + noise[1] * rng.standard_normal(len(action.joints)))
        obs, done, success = env.step(action)
    traj = Trajectory(seed, points, np.stack(tac), np.stack(acts), np.stack(forces), phases)
    return traj, bool(success)


def generate_demos(count: int, seed: int, sim: SimConfig | None = None, h: int = 2, n: int = 8,
                   max_attempts: int | None = None,
                   noise: tuple[float, float] = DEMO_NOISE) -> tuple[DemoDataset, dict]:
    """Roll the expert until ``count`` successful episodes are collected.

    ``noise`` perturbs the executed commands (translation std in metres, joint
    target std in radians) while the recorded actions stay the expert's; pass
    ``(0, 0)`` for clean rollouts.  Failed episodes are discarded and replaced
    by the next seed in the stream.  Returns the dataset and a stats dict
    (attempts, expert success rate, ...).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    sim = sim or SimConfig()
    env = FlipEnv(sim)
    ds = DemoDataset(h, n, sim.n_joints, sim.n_sensors, sim.grid, sim.workspace)
    max_attempts = max_attempts or 10 * count
    attempts = 0
    while len(ds.trajectories) < count:
        if attempts >= max_attempts:
            raise RuntimeError(f"expert succeeded on only {len(ds.trajectories)} of {attempts} episodes")
        ep_seed = stream_seed(seed, f"demo/episode/{attempts}")
        attempts += 1
        traj, ok = _record_trajectory(env, ep_seed, noise=noise,
                                      rng=stream(seed, f"demo/noise/{attempts - 1}"))
        if ok:
            ds.trajectories.append(traj)
    lengths = [len(t.actions) for t in ds.trajectories]
    stats = {
        "trajectories": count,
        "attempts": attempts,
        "expert_success_rate": count / attempts,
        "steps": int(sum(lengths)),
        "mean_length": float(np.mean(lengths)),
        "min_length": int(min(lengths)),
        "max_length": int(max(lengths)),
        "noise_xy": float(noise[0]),
        "noise_joint": float(noise[1]),
    }
    return ds, stats


# ---------------------------------------------------------------- serialization

def _f64(arr) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def write_dataset(path, ds: DemoDataset) -> None:
    S, (R, C) = ds.n_sensors, ds.grid
    chunks = [MAGIC, struct.pack("<I", VERSION),
              struct.pack("<6Id", ds.h, ds.n, ds.n_joints, S, R, C, ds.workspace),
              struct.pack("<I", len(ds.trajectories))]
    A = ds.action_dim
    zeros = np.zeros(A)
    for traj in ds.trajectories:
        if traj.tactile.shape[1:] != (S, R * C, 12):
            raise DatasetError(f"trajectory {traj.seed}: tactile shape {traj.tactile.shape} does not match header")
        chunks.append(struct.pack("<QI", traj.seed, len(traj)))
        for k in range(len(traj)):
            pts = traj.points[k]
            chunks.append(struct.pack("<I", pts.shape[0]))
            chunks.append(_f64(pts))
            chunks.append(_f64(traj.tactile[k]))
            has = k < len(traj.actions)
            chunks.append(struct.pack("<B", int(has)))
            chunks.append(_f64(traj.actions[k] if has else zeros))
            chunks.append(_f64(traj.net_force[k]))
            chunks.append(struct.pack("<B", PHASES.index(traj.phases[k])))
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(b"".join(chunks))
    os.replace(tmp, path)


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def unpack(self, fmt: str):
        try:
            vals = struct.unpack_from(fmt, self.buf, self.pos)
        except struct.error as exc:
            raise DatasetError(f"{self.path}: truncated file") from exc
        self.pos += struct.calcsize(fmt)
        return vals

    def floats(self, count: int) -> np.ndarray:
        end = self.pos + 8 * count
        if end > len(self.buf):
            raise DatasetError(f"{self.path}: truncated file")
        arr = np.frombuffer(self.buf, dtype="<f8", count=count, offset=self.pos).astype(np.float64)
        self.pos = end
        return arr


def read_dataset(path) -> DemoDataset:
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != MAGIC:
        raise DatasetError(f"{path}: not a demo dataset (magic {buf[:4]!r})")
    rd = _Reader(buf, path)
    rd.pos = 4
    (version,) = rd.unpack("<I")
    if version != VERSION:
        raise SchemaVersionError(f"{path}: dataset version {version}, this build reads version {VERSION}")
    h, n, J, S, R, C, workspace = rd.unpack("<6Id")
    (count,) = rd.unpack("<I")
    ds = DemoDataset(h, n, J, S, (R, C), workspace)
    A = 9 + J
    for _ in range(count):
        seed, steps = rd.unpack("<QI")
        points, tac, acts, forces, phases = [], [], [], [], []
        for _ in range(steps):
            (npts,) = rd.unpack("<I")
            points.append(rd.floats(4 * npts).reshape(npts, 4))
            tac.append(rd.floats(S * R * C * 12).reshape(S, R * C, 12))
            (has,) = rd.unpack("<B")
            act = rd.floats(A)
            if has:
                acts.append(act)
            forces.append(rd.floats(3))
            (code,) = rd.unpack("<B")
            if code >= len(PHASES):
                raise DatasetError(f"{path}: bad phase code {code}")
            phases.append(PHASES[code])
        if len(acts) != steps - 1:
            raise DatasetError(f"{path}: trajectory {seed} has {len(acts)} actions for {steps} steps")
        ds.trajectories.append(Trajectory(seed, points, np.stack(tac), np.stack(acts).reshape(-1, A),
                                          np.stack(forces), phases))
    if rd.pos != len(buf):
        raise DatasetError(f"{path}: {len(buf) - rd.pos} trailing bytes")
    return ds
