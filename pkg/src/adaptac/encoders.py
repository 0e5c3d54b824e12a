"""Point-cloud and tactile encoders plus the alignment projections.

The point-cloud encoder is a shared per-point MLP followed by a coordinate-wise
max pool and a head MLP, so it is permutation invariant by construction.  The
tactile encoder runs a per-taxel MLP over (force, 6D rotation, position),
mean-pools within each sensor and concatenates sensors before its head.
"""
from __future__ import annotations

from typing import Sequence

import numpy as np

from .numerics import tensor as T
from .numerics.nn import MLP, Module
from .numerics.tensor import ShapeError, Tensor


class PointCloudEncoder(Module):
    def __init__(self, rng, point_widths: Sequence[int] = (32, 64), head_widths: Sequence[int] = (64,),
                 center=(0.175, 0.175, 0.05), scale=(0.175, 0.175, 0.05), in_features: int = 4,
                 activation: str = "tanh"):
        self.point = MLP([in_features, *point_widths], rng, activation)
        self.head = MLP([point_widths[-1], *head_widths], rng, activation)
        self.center = np.asarray(center, dtype=np.float64)
        self.scale = np.asarray(scale, dtype=np.float64)
        self.in_features = in_features
        self.out_dim = head_widths[-1]

    def normalize(self, pts: np.ndarray) -> np.ndarray:
        out = np.array(pts, dtype=np.float64, copy=True)
        out[..., :3] = (out[..., :3] - self.center) / self.scale
        return out

    def __call__(self, pts) -> Tensor:
        """``pts``: ``(B, N, in_features)`` preprocessed clouds -> ``(B, out_dim)``."""
        pts = np.asarray(pts, dtype=np.float64)
        if pts.ndim != 3 or pts.shape[1] == 0:
            raise ShapeError(f"point cloud batch must be (B, N>=1, F), got {pts.shape}")
        if pts.shape[2] != self.in_features:
            raise ShapeError(f"expected {self.in_features} point features, got {pts.shape[2]}")
        per_point = self.point(Tensor(self.normalize(pts)))
        pooled = T.max_pool(per_point, axis=1)
        return self.head(pooled)


class TactileEncoder(Module):
    def __init__(self, rng, n_sensors: int = 2, taxel_widths: Sequence[int] = (32,),
                 head_widths: Sequence[int] = (64,), force_scale: float = 2.0,
                 pos_center=(0.175, 0.175, 0.05), pos_scale=(0.175, 0.175, 0.05), activation: str = "tanh"):
        self.taxel = MLP([12, *taxel_widths], rng, activation)
        self.head = MLP([n_sensors * taxel_widths[-1], *head_widths], rng, activation)
        self.n_sensors = n_sensors
        self.force_scale = float(force_scale)
        self.pos_center = np.asarray(pos_center, dtype=np.float64)
        self.pos_scale = np.asarray(pos_scale, dtype=np.float64)
        self.out_dim = head_widths[-1]

    def normalize(self, tac: np.ndarray) -> np.ndarray:
        out = np.array(tac, dtype=np.float64, copy=True)
        out[..., :3] /= self.force_scale
        out[..., 9:12] = (out[..., 9:12] - self.pos_center) / self.pos_scale
        return out

    def pooled(self, tac) -> Tensor:
        """Per-sensor mean of the per-taxel embeddings, ``(B, S, width)``."""
        tac = np.asarray(tac, dtype=np.float64)
        if tac.ndim != 4 or tac.shape[1] != self.n_sensors or tac.shape[3] != 12:
            raise ShapeError(f"tactile batch must be (B, {self.n_sensors}, taxels, 12), got {tac.shape}")
        return T.mean(self.taxel(Tensor(self.normalize(tac))), axis=2)

    def __call__(self, tac) -> Tensor:
        """``tac``: ``(B, S, taxels, 12)`` -> ``(B, out_dim)``."""
        pooled = self.pooled(tac)
        B, S, W = pooled.shape
        return self.head(T.reshape(pooled, (B, S * W)))


class Projection(Module):
    """Alignment MLP mapping a modality feature to the shared width ``d``."""

    def __init__(self, rng, d_in: int, d: int, hidden: Sequence[int] = (64,), activation: str = "tanh"):
        self.mlp = MLP([d_in, *hidden, d], rng, activation)
        self.d_in, self.d = d_in, d

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.shape[-1] != self.d_in:
            raise ShapeError(f"projection expects input width {self.d_in}, got {x.shape[-1]}")
        return self.mlp(x)


class ForceProjection(Projection):
    """g_F: flattened force vector (observed, or observed + predicted) -> query embedding."""

    def __init__(self, rng, d_in: int, d: int, hidden: Sequence[int] = (64,), force_scale: float = 2.0,
                 activation: str = "tanh"):
        super().__init__(rng, d_in, d, hidden, activation)
        self.force_scale = float(force_scale)

    def __call__(self, f) -> Tensor:
        f = T.as_tensor(f)
        if f.shape[-1] != self.d_in:
            raise ShapeError(
                f"force projection expects length {self.d_in}, got {f.shape[-1]}"
            )
        return self.mlp(T.scale(f, 1.0 / self.force_scale))


class Encoders(Module):
    def __init__(self, pc: PointCloudEncoder, tac: TactileEncoder):
        self.pc = pc
        self.tac = tac


class Projections(Module):
    def __init__(self, pc: Projection, tac: Projection, force: ForceProjection | None):
        self.pc = pc
        self.tac = tac
        self.force = force


def encode_pointcloud(enc: PointCloudEncoder, pts) -> Tensor:
    return enc(pts)


def encode_tactile(enc: TactileEncoder, tac) -> Tensor:
    return enc(tac)


def project(proj: Projections, feature, which: str) -> Tensor:
    if which not in ("pc", "tac"):
        raise ValueError(f"unknown modality {which!r}")
    return getattr(proj, which)(feature)


def project_force(proj: Projections, f) -> Tensor:
    if proj.force is None:
        raise ValueError("this configuration has no force projection")
    return proj.force(f)
