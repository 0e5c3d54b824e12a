"""Observation types, taxel frame transforms and net-force computation.

Camera frame is the common frame for point clouds, taxel poses and net
forces.  Rotations in actions and taxel poses use the continuous 6D
representation: the first two columns of the rotation matrix, recovered by
Gram-Schmidt.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

DEGENERATE_TOL = 1e-9
TAXEL_FIELDS = 12  # force(3) + rot6d(6) + position(3)


class DegenerateRotationError(ValueError):
    pass


# ---------------------------------------------------------------- rotations

def rot6d_to_matrix(r) -> np.ndarray:
    """Gram-Schmidt a 6-vector (or ``(..., 6)`` array) into rotation matrices."""
    r = np.asarray(r, dtype=np.float64)
    if r.shape[-1] != 6:
        raise ValueError(f"expected trailing dimension 6, got shape {r.shape}")
    a, b = r[..., :3], r[..., 3:]
    na = np.linalg.norm(a, axis=-1, keepdims=True)
    if np.any(na <= DEGENERATE_TOL):
        raise DegenerateRotationError("first 6D column has (near) zero norm")
    x = a / na
    y = b - np.sum(x * b, axis=-1, keepdims=True) * x
    ny = np.linalg.norm(y, axis=-1, keepdims=True)
    if np.any(ny <= DEGENERATE_TOL):
        raise DegenerateRotationError("6D columns are collinear")
    y = y / ny
    z = np.cross(x, y)
    return np.stack([x, y, z], axis=-1)


def matrix_to_rot6d(m, tol: float = 1e-6) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape[-2:] != (3, 3):
        raise ValueError(f"expected (..., 3, 3) matrices, got shape {m.shape}")
    eye = np.eye(3)
    orth = np.abs(np.swapaxes(m, -1, -2) @ m - eye).max()
    if orth > tol or np.any(np.abs(np.linalg.det(m) - 1.0) > tol):
        raise ValueError("matrix is not a proper rotation")
    return np.concatenate([m[..., :, 0], m[..., :, 1]], axis=-1)


def rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


IDENTITY_6D = np.array([1.0, 0.0, 0.0, 0.0, 1.0, 0.0])


# ---------------------------------------------------------------- data types

@dataclass(frozen=True)
class TaxelReading:
    force: np.ndarray
    pose_rot6d: np.ndarray
    pose_pos: np.ndarray


@dataclass
class TactileFrame:
    """Per-sensor taxel grids. Arrays are shaped ``(sensors, rows, cols, k)``."""

    forces: np.ndarray
    rot6d: np.ndarray
    pos: np.ndarray

    def __post_init__(self):
        self.forces = np.asarray(self.forces, dtype=np.float64)
        self.rot6d = np.asarray(self.rot6d, dtype=np.float64)
        self.pos = np.asarray(self.pos, dtype=np.float64)
        grid = self.forces.shape[:3]
        if (self.forces.ndim != 4 or self.forces.shape[3] != 3
                or self.rot6d.shape != grid + (6,) or self.pos.shape != grid + (3,)):
            raise ValueError(
                f"inconsistent tactile arrays: forces {self.forces.shape}, "
                f"rot6d {self.rot6d.shape}, pos {self.pos.shape}"
            )

    @property
    def n_sensors(self) -> int:
        return self.forces.shape[0]

    @property
    def grid(self) -> tuple[int, int]:
        return self.forces.shape[1], self.forces.shape[2]

    def reading(self, s: int, r: int, c: int) -> TaxelReading:
        return TaxelReading(self.forces[s, r, c], self.rot6d[s, r, c], self.pos[s, r, c])

    def readings(self) -> Iterator[TaxelReading]:
        S, R, C = self.forces.shape[:3]
        for s in range(S):
            for r in range(R):
                for c in range(C):
                    yield self.reading(s, r, c)

    def as_array(self) -> np.ndarray:
        """``(sensors, rows*cols, 12)`` packing of force, 6D rotation, position."""
        S, R, C = self.forces.shape[:3]
        packed = np.concatenate([self.forces, self.rot6d, self.pos], axis=-1)
        return packed.reshape(S, R * C, TAXEL_FIELDS)

    @classmethod
    def from_array(cls, arr: np.ndarray, grid: tuple[int, int]) -> "TactileFrame":
        arr = np.asarray(arr, dtype=np.float64)
        S = arr.shape[0]
        arr = arr.reshape(S, grid[0], grid[1], TAXEL_FIELDS)
        return cls(arr[..., :3].copy(), arr[..., 3:9].copy(), arr[..., 9:].copy())

    @classmethod
    def zeros(cls, n_sensors: int = 1, grid: tuple[int, int] = (3, 5)) -> "TactileFrame":
        shape = (n_sensors,) + tuple(grid)
        return cls(np.zeros(shape + (3,)), np.broadcast_to(IDENTITY_6D, shape + (6,)).copy(),
                   np.zeros(shape + (3,)))


@dataclass
class PointCloud:
    points: np.ndarray
    intensity: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.intensity is not None:
            self.intensity = np.asarray(self.intensity, dtype=np.float64).reshape(-1)
            if self.intensity.shape[0] != self.points.shape[0]:
                raise ValueError("intensity length does not match point count")

    def __len__(self):
        return self.points.shape[0]

    def with_intensity(self) -> np.ndarray:
        inten = self.intensity if self.intensity is not None else np.zeros(len(self))
        return np.concatenate([self.points, inten[:, None]], axis=1)


@dataclass
class Observation:
    pc: PointCloud
    tac: TactileFrame
    index: int = 0


@dataclass
class NetForceSeries:
    history: np.ndarray

    @property
    def h(self) -> int:
        return self.history.shape[0]

    def flatten(self) -> np.ndarray:
        return self.history.reshape(-1)


@dataclass
class Action:
    """Motion command: relative translation (m) and 6D rotation, target joint positions (rad)."""

    translation: np.ndarray
    rotation: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(6)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1)

    @property
    def dim(self) -> int:
        return 9 + self.joints.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.translation, self.rotation, self.joints])

    @classmethod
    def from_vector(cls, v) -> "Action":
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:9], v[9:])

    @classmethod
    def hold(cls, joints) -> "Action":
        """No arm motion, fingers held at (or driven to) ``joints``."""
        return cls(np.zeros(3), IDENTITY_6D.copy(), np.array(joints, dtype=np.float64))


@dataclass
class ActionChunk:
    actions: list[Action] = field(default_factory=list)

    def __len__(self):
        return len(self.actions)

    def to_array(self) -> np.ndarray:
        return np.stack([a.to_vector() for a in self.actions])

    @classmethod
    def from_array(cls, arr) -> "ActionChunk":
        return cls([Action.from_vector(row) for row in np.asarray(arr)])


# ---------------------------------------------------------------- forces

def taxel_force_camera(t: TaxelReading) -> np.ndarray:
    return rot6d_to_matrix(t.pose_rot6d) @ np.asarray(t.force, dtype=np.float64)


def net_force(frame: TactileFrame) -> np.ndarray:
    """Sum over every sensor and taxel of the force rotated into the camera frame."""
    rots = rot6d_to_matrix(frame.rot6d.reshape(-1, 6))
    f = frame.forces.reshape(-1, 3)
    return np.einsum("nij,nj->i", rots, f)


def net_force_series(obs_seq: Sequence[Observation], h: int | None = None) -> NetForceSeries:
    if h is not None and len(obs_seq) != h:
        raise ValueError(f"expected {h} observations, got {len(obs_seq)}")
    if not obs_seq:
        raise ValueError("empty observation sequence")
    return NetForceSeries(np.stack([net_force(o.tac) for o in obs_seq]))


# ---------------------------------------------------------------- preprocessing

class PointCloudPreprocessor(TransformerMixin, BaseEstimator):
    """Crop to the workspace box, voxel-downsample, pad to a fixed count.

    ``transform`` maps a sequence of :class:`PointCloud` to an array shaped
    ``(len(X), n_max, 4)`` of xyz + intensity.  Clouds with fewer than
    ``n_max`` voxels are padded by repeating their centroid.
    """

    def __init__(self, box_min=(0.0, 0.0, -0.01), box_max=(0.35, 0.35, 0.2),
                 voxel_size=0.005, n_max=512):
        self.box_min = box_min
        self.box_max = box_max
        self.voxel_size = voxel_size
        self.n_max = n_max

    def fit(self, X=None, y=None):
        if self.n_max < 1 or self.voxel_size <= 0:
            raise ValueError("n_max must be >= 1 and voxel_size > 0")
        self.n_features_out_ = 4
        return self

    def transform(self, X) -> np.ndarray:
        if isinstance(X, PointCloud):
            X = [X]
        return np.stack([self._one(pc) for pc in X])

    def _one(self, pc: PointCloud) -> np.ndarray:
        lo, hi = np.asarray(self.box_min), np.asarray(self.box_max)
        pts = pc.with_intensity()
        if not np.all(np.isfinite(pts)):
            raise ValueError("point cloud contains non-finite values")
        keep = np.all((pts[:, :3] >= lo) & (pts[:, :3] <= hi), axis=1)
        pts = pts[keep]
        if pts.shape[0] == 0:
            raise ValueError("point cloud is empty after workspace crop")
        keys = np.floor((pts[:, :3] - lo) / self.voxel_size).astype(np.int64)
        uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
        inverse = inverse.reshape(-1)
        counts = np.bincount(inverse, minlength=len(uniq)).astype(np.float64)
        vox = np.stack([np.bincount(inverse, weights=pts[:, k], minlength=len(uniq))
                        for k in range(4)], axis=1) / counts[:, None]
        if len(vox) > self.n_max:
            sel = np.round(np.linspace(0, len(vox) - 1, self.n_max)).astype(np.int64)
            vox = vox[sel]
        if len(vox) < self.n_max:
            pad = np.repeat(vox.mean(axis=0, keepdims=True), self.n_max - len(vox), axis=0)
            vox = np.concatenate([vox, pad], axis=0)
        return vox
