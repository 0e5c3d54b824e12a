"""Force-guided attention fusion and guide-force construction.

Each modality contributes a single token, so the attention softmax runs over
two logits and produces the scalar pair (alpha_pc, alpha_tac).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .numerics import tensor as T
from .numerics.nn import Module, uniform_init
from .numerics.tensor import ShapeError, Tensor


@dataclass
class GuideForce:
    observed: np.ndarray
    predicted: np.ndarray | None

    def flatten(self) -> np.ndarray:
        parts = [self.observed.reshape(-1)]
        if self.predicted is not None:
            parts.append(self.predicted.reshape(-1))
        return np.concatenate(parts)


def build_guide_force(observed, predicted, h: int | None = None, n: int | None = None) -> GuideForce:
    if hasattr(observed, "history"):
        observed = observed.history
    observed = np.asarray(observed, dtype=np.float64)
    predicted = np.asarray(predicted, dtype=np.float64)
    if observed.ndim != 2 or observed.shape[1] != 3 or predicted.ndim != 2 or predicted.shape[1] != 3:
        raise ValueError("observed and predicted forces must be (steps, 3)")
    if h is not None and observed.shape[0] != h:
        raise ValueError(f"observed history has {observed.shape[0]} steps, expected {h}")
    if n is not None and predicted.shape[0] != n:
        raise ValueError(f"predicted horizon has {predicted.shape[0]} steps, expected {n}")
    if not (np.all(np.isfinite(observed)) and np.all(np.isfinite(predicted))):
        raise ValueError("guide force must be finite")
    return GuideForce(observed, predicted)


def guide_force_batch(observed, predicted=None) -> Tensor:
    """``(B, h, 3)`` observed (+ ``(B, m, 3)`` predicted) -> ``(B, 3(h+m))`` query input."""
    obs = T.as_tensor(observed)
    B = obs.shape[0]
    parts = [T.reshape(obs, (B, -1))]
    if predicted is not None:
        pred = T.as_tensor(predicted)
        parts.append(T.reshape(pred, (B, -1)))
    return parts[0] if len(parts) == 1 else T.concat(parts, axis=-1)


@dataclass
class FusedFeature:
    vector: Tensor
    alpha: Tensor  # (B, 2): columns (pc, tac)
    v_pc: Tensor
    v_tac: Tensor

    @property
    def alpha_pc(self) -> np.ndarray:
        return self.alpha.data[:, 0]

    @property
    def alpha_tac(self) -> np.ndarray:
        return self.alpha.data[:, 1]


def fgaf(query_embed, e_pc, e_tac, w_q, w_k, w_v) -> FusedFeature:
    """Single-head force-guided attention over the (pc, tac) token pair."""
    q_in, pc, tac = T.as_tensor(query_embed), T.as_tensor(e_pc), T.as_tensor(e_tac)
    if not (q_in.shape[-1] == pc.shape[-1] == tac.shape[-1] == w_q.shape[0] == w_k.shape[0] == w_v.shape[0]):
        raise ShapeError(
            f"fgaf dimension mismatch: query {q_in.shape}, pc {pc.shape}, tac {tac.shape}, "
            f"W_Q {w_q.shape}, W_K {w_k.shape}, W_V {w_v.shape}"
        )
    if w_q.shape[1] != w_k.shape[1]:
        raise ShapeError(f"query width {w_q.shape[1]} != key width {w_k.shape[1]}")
    d_k = w_k.shape[1]
    q = T.linear(q_in, w_q)
    k_pc, k_tac = T.linear(pc, w_k), T.linear(tac, w_k)
    v_pc, v_tac = T.linear(pc, w_v), T.linear(tac, w_v)
    inv = 1.0 / np.sqrt(d_k)
    logit_pc = T.scale(T.sum(T.mul(q, k_pc), axis=-1), inv)
    logit_tac = T.scale(T.sum(T.mul(q, k_tac), axis=-1), inv)
    B = logit_pc.shape[0]
    logits = T.concat([T.reshape(logit_pc, (B, 1)), T.reshape(logit_tac, (B, 1))], axis=-1)
    alpha = T.softmax(logits)
    a_pc = T.reshape(T.take_last(alpha, 0, 1), (B,))
    a_tac = T.reshape(T.take_last(alpha, 1, 2), (B,))
    z = T.add(T.row_scale(v_pc, a_pc), T.row_scale(v_tac, a_tac))
    return FusedFeature(z, alpha, v_pc, v_tac)


class AttentionHead(Module):
    def __init__(self, rng, d_in: int, d_k: int, d_v: int):
        self.w_q = Tensor(uniform_init(rng, d_in, (d_in, d_k)), requires_grad=True)
        self.w_k = Tensor(uniform_init(rng, d_in, (d_in, d_k)), requires_grad=True)
        self.w_v = Tensor(uniform_init(rng, d_in, (d_in, d_v)), requires_grad=True)

    def __call__(self, query, e_pc, e_tac) -> FusedFeature:
        return fgaf(query, e_pc, e_tac, self.w_q, self.w_k, self.w_v)


class ForceGuidedAttention(Module):
    """Multi-head wrapper: head ``j`` sees the ``j``-th slice of every input embedding."""

    def __init__(self, rng, d: int, heads: int = 1, d_k: int | None = None, d_v: int | None = None):
        if heads < 1 or d % heads:
            raise ValueError(f"embedding width {d} is not divisible by {heads} heads")
        dh = d // heads
        self.heads = [AttentionHead(rng, dh, d_k or dh, d_v or dh) for _ in range(heads)]
        self.d = d
        self.out_dim = heads * (d_v or dh)

    def __call__(self, query, e_pc, e_tac) -> FusedFeature:
        return fgaf_multihead(query, e_pc, e_tac, self.heads)


def fgaf_multihead(query, e_pc, e_tac, heads: Sequence[AttentionHead]) -> FusedFeature:
    query, e_pc, e_tac = T.as_tensor(query), T.as_tensor(e_pc), T.as_tensor(e_tac)
    H = len(heads)
    d = query.shape[-1]
    if H < 1 or d % H:
        raise ValueError(f"embedding width {d} is not divisible by {H} heads")
    if H == 1:
        return heads[0](query, e_pc, e_tac)
    dh = d // H
    outs = [
        head(T.take_last(query, j * dh, (j + 1) * dh), T.take_last(e_pc, j * dh, (j + 1) * dh),
             T.take_last(e_tac, j * dh, (j + 1) * dh))
        for j, head in enumerate(heads)
    ]
    alpha = T.scale(_sum_all([o.alpha for o in outs]), 1.0 / H)
    return FusedFeature(
        T.concat([o.vector for o in outs], axis=-1),
        alpha,
        T.concat([o.v_pc for o in outs], axis=-1),
        T.concat([o.v_tac for o in outs], axis=-1),
    )


def _sum_all(ts: Sequence[Tensor]) -> Tensor:
    acc = ts[0]
    for t in ts[1:]:
        acc = T.add(acc, t)
    return acc
