"""DDPM machinery shared by the force head and the action head.

Timesteps are 1-based: ``t = 1`` is the least noisy step and ``t = T`` the
most.  Array index ``t - 1`` addresses ``betas`` and ``alphas_cum``.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import tensor as T
from .numerics.nn import ACTIVATIONS, Linear, Module
from .numerics.tensor import ShapeError, Tensor


@dataclass
class NoiseSchedule:
    betas: np.ndarray
    alphas_cum: np.ndarray
    timesteps: np.ndarray  # network timestep id for each entry (differs after respacing)

    @property
    def T(self) -> int:
        return len(self.betas)

    def alphas_cum_prev(self) -> np.ndarray:
        return np.concatenate([[1.0], self.alphas_cum[:-1]])


def make_schedule(T_steps: int = 100, beta_start: float = 1e-4, beta_end: float = 0.02) -> NoiseSchedule:
    if T_steps < 1:
        raise ValueError("need at least one diffusion step")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ValueError(f"require 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}")
    betas = np.linspace(beta_start, beta_end, T_steps) if T_steps > 1 else np.array([beta_start])
    return NoiseSchedule(betas, np.cumprod(1.0 - betas), np.arange(1, T_steps + 1))


def respace(sched: NoiseSchedule, steps: int) -> NoiseSchedule:
    """Sub-sample ``steps`` timesteps, keeping the cumulative products at those points."""
    if steps >= sched.T:
        return sched
    if steps < 1:
        raise ValueError("respaced schedule needs at least one step")
    idx = np.unique(np.round(np.linspace(0, sched.T - 1, steps)).astype(np.int64))
    ac = sched.alphas_cum[idx]
    prev = np.concatenate([[1.0], ac[:-1]])
    return NoiseSchedule(1.0 - ac / prev, ac, sched.timesteps[idx])


def q_sample(x0, t, eps, sched: NoiseSchedule) -> np.ndarray:
    """Forward noising ``sqrt(ab_t) x0 + sqrt(1 - ab_t) eps``; ``t`` scalar or per-row."""
    t = np.asarray(t)
    if np.any(t < 1) or np.any(t > sched.T):
        raise ValueError(f"timestep out of range [1, {sched.T}]")
    ab = sched.alphas_cum[t - 1]
    x0 = np.asarray(x0, dtype=np.float64)
    if ab.ndim:
        ab = ab.reshape(ab.shape + (1,) * (x0.ndim - ab.ndim))
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def timestep_embedding(t, dim: int, max_period: float = 1000.0) -> np.ndarray:
    t = np.asarray(t, dtype=np.float64).reshape(-1)
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / max(half, 1))
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class Denoiser(Module):
    """Conditional MLP: (noisy target, timestep embedding, condition) -> predicted noise.

    The timestep embedding and the condition enter the first layer together
    with the noisy target, and also scale and shift every hidden layer
    (FiLM), which lets the noise-level dependent slope of the output be
    represented without a very wide network.
    """

    def __init__(self, rng, x_dim: int, cond_dim: int, hidden=(256, 256), temb_dim: int = 32,
                 activation: str = "tanh"):
        if not hidden:
            raise ValueError("denoiser needs at least one hidden layer")
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        c = cond_dim + temb_dim
        self.inp = Linear(x_dim + c, hidden[0], rng)
        self.hidden = [Linear(a, b, rng) for a, b in zip(hidden[:-1], hidden[1:])]
        self.film = [Linear(c, 2 * w, rng) for w in hidden]
        self.out = Linear(hidden[-1], x_dim, rng)
        self.activation = activation
        self.x_dim, self.cond_dim, self.temb_dim = x_dim, cond_dim, temb_dim

    def __call__(self, x_t, t, cond=None) -> Tensor:
        x_t = T.as_tensor(x_t)
        if x_t.data.ndim != 2 or x_t.shape[1] != self.x_dim:
            raise ShapeError(f"denoiser expects (B, {self.x_dim}) targets, got {x_t.shape}")
        B = x_t.shape[0]
        temb = Tensor(np.ascontiguousarray(np.broadcast_to(timestep_embedding(t, self.temb_dim), (B, self.temb_dim))))
        if self.cond_dim:
            if cond is None or cond.shape != (B, self.cond_dim):
                raise ShapeError(f"denoiser expects condition (B, {self.cond_dim})")
            c = T.concat([temb, cond], axis=-1)
        else:
            c = temb
        act = ACTIVATIONS[self.activation]
        h = self.inp(T.concat([x_t, c], axis=-1))
        for i, film in enumerate(self.film):
            if i:
                h = self.hidden[i - 1](h)
            w = h.shape[1]
            gb = film(c)
            # h * (1 + gamma) + beta
            h = act(T.add(T.add(h, T.mul(h, T.take_last(gb, 0, w))), T.take_last(gb, w, 2 * w)))
        return self.out(h)


def epsilon_loss(net: Denoiser, x0, cond, sched: NoiseSchedule, rng: np.random.Generator,
                 t=None, eps=None) -> Tensor:
    """Mean squared error between predicted and injected noise.

    ``t`` and ``eps`` are drawn from ``rng`` unless given.  Gradients flow into
    ``net`` and into ``cond``.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    B = x0.shape[0]
    if t is None:
        t = rng.integers(1, sched.T + 1, size=B)
    if eps is None:
        eps = rng.standard_normal(x0.shape)
    t = np.broadcast_to(np.asarray(t), (B,))
    x_t = q_sample(x0, t, eps, sched)
    pred = net(Tensor(x_t), sched.timesteps[t - 1], cond)
    return T.mse(pred, Tensor(eps))


def p_sample_loop(net, cond, shape, sched: NoiseSchedule, rng: np.random.Generator,
                  clip: float | None = None) -> np.ndarray:
    """Ancestral sampling from ``t = T`` down to ``t = 1`` (no noise on the last step).

    With ``clip`` set, the implied clean estimate is clipped to ``[-clip, clip]``
    before forming the posterior mean; without it the update is the plain
    epsilon-form mean, which is algebraically the same posterior.
    """
    x = rng.standard_normal(shape)
    ab_prev = sched.alphas_cum_prev()
    with T.no_grad():
        for i in range(sched.T - 1, -1, -1):
            beta, ab = sched.betas[i], sched.alphas_cum[i]
            eps_hat = net(Tensor(x), sched.timesteps[i], cond).data
            if clip is None:
                mean = (x - beta / np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(1.0 - beta)
            else:
                x0 = np.clip((x - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab), -clip, clip)
                mean = (np.sqrt(ab_prev[i]) * beta * x0 + np.sqrt(1.0 - beta) * (1.0 - ab_prev[i]) * x) / (1.0 - ab)
            if i > 0:
                var = beta * (1.0 - ab_prev[i]) / (1.0 - ab)
                x = mean + np.sqrt(var) * rng.standard_normal(shape)
            else:
                x = mean
    return x
