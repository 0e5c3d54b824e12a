"""The AdapTac visuo-tactile policy and its ablation variants.

Inference runs in two stages.  The force head samples future net forces from
the visual and tactile embeddings.  The guide force (observed history followed
by the prediction) is projected into an attention query that weighs the two
modality tokens.  The action head then samples an action chunk conditioned on
the fused feature.

Training minimises ``L = L_pi + alpha * L_ffp``.  During training the
predicted slice of the guide force is the ground-truth future net force plus a
little Gaussian noise (teacher forcing) unless ``teacher_forced`` is off, in
which case it is sampled from the force head as at inference.
"""
from __future__ import annotations

import csv
import dataclasses
import json
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from sklearn.base import BaseEstimator

from . import diffusion
from .encoders import (
    Encoders,
    ForceProjection,
    PointCloudEncoder,
    Projection,
    Projections,
    TactileEncoder,
)
from .fusion import ForceGuidedAttention, guide_force_batch
from .numerics import tensor as T
from .numerics.checkpoint import load_checkpoint, save_checkpoint
from .numerics.nn import Module
from .numerics.optim import AdamState, adam_step
from .numerics.tensor import Tensor
from .rng import stream
from .sensing import Action, ActionChunk, Observation, PointCloudPreprocessor, net_force
from .simenv.dataset import DemoDataset
from .simenv.evaluate import Plan
from .validation import check_choice, check_nonnegative, check_positive_int

MODES = ("full", "no_ffpg", "ofp_ofg", "no_fgaf")


@dataclass(frozen=True)
class PolicyConfig:
    mode: str = "full"
    h: int = 2
    n: int = 4
    d: int = 32
    heads: int = 1
    alpha: float = 0.1
    n_joints: int = 2
    n_sensors: int = 2
    n_points: int = 256
    # diffusion
    diffusion_steps: int = 50
    beta_start: float = 1e-4
    beta_end: float = 0.2
    force_sample_steps: int = 8
    denoiser_hidden: tuple = (256, 256)
    temb_dim: int = 32
    activation: str = "tanh"
    # encoders
    pc_point_widths: tuple = (32, 64)
    pc_head_widths: tuple = (64,)
    tac_taxel_widths: tuple = (32,)
    tac_head_widths: tuple = (64,)
    proj_hidden: tuple = (64,)
    force_scale: float = 2.0
    # guide force and fusion
    teacher_forced: bool = True
    teacher_noise: float = 0.05
    concat_query: bool = False
    # optimisation
    lr: float = 1e-3
    batch_size: int = 64
    train_steps: int = 20000
    log_every: int = 1
    # rollout
    exec_horizon: int = 1

    def validate(self) -> "PolicyConfig":
        check_choice(self.mode, "mode", MODES)
        check_choice(self.activation, "activation", ("tanh", "relu"))
        for name in ("h", "n", "d", "heads", "n_joints", "n_sensors", "n_points", "diffusion_steps",
                     "force_sample_steps", "temb_dim", "batch_size", "exec_horizon", "log_every"):
            check_positive_int(getattr(self, name), name)
        check_positive_int(self.train_steps, "train_steps", minimum=0)
        check_nonnegative(self.alpha, "alpha")
        check_nonnegative(self.teacher_noise, "teacher_noise")
        if self.d % self.heads:
            raise ValueError(f"embedding width d={self.d} is not divisible by heads={self.heads}")
        if self.exec_horizon > self.n:
            raise ValueError(f"exec_horizon {self.exec_horizon} exceeds action horizon n={self.n}")
        if self.temb_dim % 2:
            raise ValueError("temb_dim must be even")
        return self

    @property
    def action_dim(self) -> int:
        return 9 + self.n_joints

    @classmethod
    def from_dict(cls, values: dict) -> "PolicyConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        kwargs = {}
        for key, val in values.items():
            if key not in names:
                continue
            if isinstance(val, list):
                val = tuple(val)
            if names[key].type in ("float",) and isinstance(val, int):
                val = float(val)
            kwargs[key] = val
        return cls(**kwargs).validate()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass(frozen=True)
class Wiring:
    """How a mode connects the blocks."""

    force_head: bool
    attention: bool
    query_steps: int          # number of 3-vectors in the attention query input
    force_steps: int          # number of 3-vectors the force head predicts (0 if none)
    alpha: float              # effective force-loss weight


def select_mode(cfg: PolicyConfig) -> Wiring:
    mode = check_choice(cfg.mode, "mode", MODES)
    if mode == "full":
        return Wiring(True, True, cfg.h + cfg.n, cfg.n, cfg.alpha)
    if mode == "ofp_ofg":
        return Wiring(True, True, 2 * cfg.h, cfg.h, cfg.alpha)
    if mode == "no_ffpg":
        return Wiring(False, True, cfg.h, 0, 0.0)
    return Wiring(False, False, 0, 0, 0.0)


class AdapTacNet(Module):
    def __init__(self, cfg: PolicyConfig, rng: np.random.Generator):
        w = select_mode(cfg)
        act = cfg.activation
        pc = PointCloudEncoder(rng, cfg.pc_point_widths, cfg.pc_head_widths, activation=act)
        tac = TactileEncoder(rng, cfg.n_sensors, cfg.tac_taxel_widths, cfg.tac_head_widths,
                             force_scale=cfg.force_scale, activation=act)
        self.enc = Encoders(pc, tac)
        force = (ForceProjection(rng, 3 * w.query_steps, cfg.d, cfg.proj_hidden, cfg.force_scale, act)
                 if w.attention else None)
        self.proj = Projections(Projection(rng, pc.out_dim, cfg.d, cfg.proj_hidden, act),
                                Projection(rng, tac.out_dim, cfg.d, cfg.proj_hidden, act), force)
        self.fuse = ForceGuidedAttention(rng, cfg.d, cfg.heads) if w.attention else None
        self.force_head = (diffusion.Denoiser(rng, 3 * w.force_steps, 2 * cfg.d, cfg.denoiser_hidden,
                                              cfg.temb_dim, act)
                           if w.force_head else None)
        if not w.attention:
            cond_dim = 2 * cfg.d
        else:
            cond_dim = self.fuse.out_dim + (cfg.d if cfg.concat_query else 0)
        self.action_head = diffusion.Denoiser(rng, cfg.n * cfg.action_dim, cond_dim, cfg.denoiser_hidden,
                                              cfg.temb_dim, act)


@dataclass
class Normalizer:
    """Action min-max scaling to [-1, 1] and per-axis force scaling."""

    action_lo: np.ndarray
    action_hi: np.ndarray
    force_std: np.ndarray

    @classmethod
    def fit(cls, actions: np.ndarray, forces: np.ndarray) -> "Normalizer":
        lo, hi = actions.min(axis=0), actions.max(axis=0)
        flat = hi - lo < 1e-9
        lo = np.where(flat, lo - 1.0, lo)
        hi = np.where(flat, hi + 1.0, hi)
        std = np.maximum(np.sqrt(np.mean(forces.reshape(-1, 3) ** 2, axis=0)), 0.1)
        return cls(lo, hi, std)

    def norm_actions(self, a: np.ndarray) -> np.ndarray:
        return 2.0 * (a - self.action_lo) / (self.action_hi - self.action_lo) - 1.0

    def denorm_actions(self, a: np.ndarray) -> np.ndarray:
        a = np.clip(a, -1.0, 1.0)
        return (a + 1.0) / 2.0 * (self.action_hi - self.action_lo) + self.action_lo

    def norm_forces(self, f: np.ndarray) -> np.ndarray:
        return f / self.force_std

    def denorm_forces(self, f: np.ndarray) -> np.ndarray:
        return f * self.force_std


@dataclass
class TrainBatch:
    """Preprocessed training batch.

    ``pc`` and ``tac`` hold the newest observation of each history window; the
    whole window enters through ``observed_force``.
    """

    pc: np.ndarray              # (B, N, 4)
    tac: np.ndarray             # (B, S, taxels, 12)
    observed_force: np.ndarray  # (B, h, 3)
    actions: np.ndarray         # (B, n, 9 + J)
    future_force: np.ndarray    # (B, n, 3)


@dataclass
class TrainOutput:
    loss: Tensor
    loss_pi: Tensor
    loss_ffp: Tensor
    alpha_pc: np.ndarray | None
    alpha_tac: np.ndarray | None


@dataclass
class _Samples:
    pc: np.ndarray
    tac: np.ndarray
    forces: np.ndarray      # per observation, (M_obs, 3)
    hist_idx: np.ndarray    # (M, h) indices into the observation arrays
    future_idx: np.ndarray  # (M, n)
    actions: np.ndarray     # (M, n, A)

    def batch(self, idx: np.ndarray) -> TrainBatch:
        newest = self.hist_idx[idx, -1]
        return TrainBatch(self.pc[newest], self.tac[newest], self.forces[self.hist_idx[idx]],
                          self.actions[idx], self.forces[self.future_idx[idx]])


def build_samples(ds: DemoDataset, cfg: PolicyConfig, pre: PointCloudPreprocessor) -> _Samples:
    """Slice every demo step into (history, action chunk, future force) windows.

    Windows that run past the end of an episode are padded with hold actions
    (no arm motion, final joint targets) and the final observed net force.
    Stored net forces are checked against recomputation from the stored
    tactile frames.
    """
    pcs, tacs, forces = [], [], []
    hist, fut, acts = [], [], []
    offset = 0
    for traj in ds.trajectories:
        K = len(traj)
        pcs.append(pre.transform([traj.observation(k, ds.grid).pc for k in range(K)]))
        tacs.append(traj.tactile)
        recomputed = np.stack([net_force(traj.observation(k, ds.grid).tac) for k in range(K)])
        if not np.allclose(recomputed, traj.net_force, rtol=0.0, atol=1e-9):
            raise ValueError(f"trajectory {traj.seed}: stored net forces disagree with tactile frames")
        forces.append(recomputed)
        L = len(traj.actions)
        hold = Action.hold(traj.actions[-1, 9:]).to_vector()
        for t in range(L):
            hist.append(offset + np.clip(np.arange(t - cfg.h + 1, t + 1), 0, K - 1))
            fut.append(offset + np.clip(np.arange(t + 1, t + cfg.n + 1), 0, K - 1))
            chunk = np.tile(hold, (cfg.n, 1))
            m = min(cfg.n, L - t)
            chunk[:m] = traj.actions[t:t + m]
            acts.append(chunk)
        offset += K
    return _Samples(np.concatenate(pcs), np.concatenate(tacs), np.concatenate(forces),
                    np.stack(hist), np.stack(fut), np.stack(acts))


class AdapTacPolicy(BaseEstimator):
    """Imitation-trained diffusion policy with force-guided attention fusion.

    Parameters
    ----------
    config : PolicyConfig, optional
        Architecture, mode and optimisation settings.
    random_state : int
        Root seed for initialisation and every training draw.
    """

    def __init__(self, config: PolicyConfig | None = None, random_state: int = 0):
        self.config = config
        self.random_state = random_state

    # ------------------------------------------------------------ setup
    @property
    def h(self) -> int:
        return self._cfg().h

    def _cfg(self) -> PolicyConfig:
        return getattr(self, "config_", None) or (self.config or PolicyConfig()).validate()

    def _build(self) -> None:
        cfg = (self.config or PolicyConfig()).validate()
        self.config_ = cfg
        self.wiring_ = select_mode(cfg)
        self.net_ = AdapTacNet(cfg, stream(self.random_state, "init"))
        self.params_ = self.net_.parameters()
        self.optim_ = AdamState(lr=cfg.lr)
        self.step_ = 0
        self.sched_ = diffusion.make_schedule(cfg.diffusion_steps, cfg.beta_start, cfg.beta_end)
        self.force_sched_ = diffusion.respace(self.sched_, cfg.force_sample_steps)
        self.preprocessor_ = PointCloudPreprocessor(n_max=cfg.n_points).fit()

    def _check_fitted(self) -> None:
        if not hasattr(self, "net_") or not hasattr(self, "norm_"):
            raise RuntimeError("policy has no trained parameters; call fit() or load a checkpoint")

    # ------------------------------------------------------------ model
    def _embed(self, pc, tac) -> tuple[Tensor, Tensor]:
        net = self.net_
        e_pc = net.proj.pc(net.enc.pc(pc))
        e_tac = net.proj.tac(net.enc.tac(tac))
        return e_pc, e_tac

    def _sample_forces(self, e_pc: Tensor, e_tac: Tensor, rng) -> np.ndarray:
        """Force-head sample in newtons, shape ``(B, force_steps, 3)``."""
        B = e_pc.shape[0]
        steps = self.wiring_.force_steps
        with T.no_grad():
            cond = Tensor(np.concatenate([e_pc.data, e_tac.data], axis=-1))
            x = diffusion.p_sample_loop(self.net_.force_head, cond, (B, 3 * steps), self.force_sched_, rng)
        return self.norm_.denorm_forces(x.reshape(B, steps, 3))

    def _condition(self, e_pc: Tensor, e_tac: Tensor, observed: np.ndarray, predicted: np.ndarray | None):
        """Action-head condition and attention weights (None without fusion)."""
        net, cfg = self.net_, self.config_
        if not self.wiring_.attention:
            return T.concat([e_pc, e_tac], axis=-1), None
        query = net.proj.force(guide_force_batch(observed, predicted))
        fused = net.fuse(query, e_pc, e_tac)
        cond = T.concat([fused.vector, query], axis=-1) if cfg.concat_query else fused.vector
        return cond, fused

    def forward_train(self, batch: TrainBatch, rng_pi: np.random.Generator, rng_ffp: np.random.Generator,
                      rng_guide: np.random.Generator) -> TrainOutput:
        """Both diffusion losses on one batch; returns ``L = L_pi + alpha * L_ffp``."""
        cfg, w = self.config_, self.wiring_
        B = batch.pc.shape[0]
        if batch.observed_force.shape[1:] != (cfg.h, 3) or batch.actions.shape[1:] != (cfg.n, cfg.action_dim):
            raise ValueError(
                f"batch horizons {batch.observed_force.shape[1:]}, {batch.actions.shape[1:]} do not match "
                f"config h={cfg.h}, n={cfg.n}, action_dim={cfg.action_dim}"
            )
        e_pc, e_tac = self._embed(batch.pc, batch.tac)
        predicted = None
        if w.force_head:
            target = batch.future_force if cfg.mode == "full" else batch.observed_force
            x0 = self.norm_.norm_forces(target).reshape(B, -1)
            loss_ffp = diffusion.epsilon_loss(self.net_.force_head, x0, T.concat([e_pc, e_tac], axis=-1),
                                              self.sched_, rng_ffp)
            if cfg.teacher_forced:
                predicted = target + cfg.teacher_noise * rng_guide.standard_normal(target.shape)
            else:
                predicted = self._sample_forces(e_pc, e_tac, rng_guide)
        else:
            loss_ffp = Tensor(np.array(0.0))
        cond, fused = self._condition(e_pc, e_tac, batch.observed_force, predicted)
        x0 = self.norm_.norm_actions(batch.actions).reshape(B, -1)
        loss_pi = diffusion.epsilon_loss(self.net_.action_head, x0, cond, self.sched_, rng_pi)
        loss = T.add(loss_pi, T.scale(loss_ffp, w.alpha)) if w.force_head else loss_pi
        return TrainOutput(loss, loss_pi, loss_ffp,
                           None if fused is None else fused.alpha_pc,
                           None if fused is None else fused.alpha_tac)

    # ------------------------------------------------------------ training
    def _step_streams(self, k: int):
        base = f"train/step/{k}"
        return tuple(stream(self.random_state, f"{base}/{part}") for part in ("batch", "pi", "ffp", "guide"))

    def _train_step(self, samples: _Samples, k: int) -> tuple[TrainOutput, float]:
        r_batch, r_pi, r_ffp, r_guide = self._step_streams(k)
        idx = r_batch.integers(0, len(samples.actions), size=self.config_.batch_size)
        out = self.forward_train(samples.batch(idx), r_pi, r_ffp, r_guide)
        for p in self.params_.values():
            p.grad = None
        T.backward(out.loss)
        grads = {name: p.grad for name, p in self.params_.items() if p.grad is not None}
        adam_step(self.params_, grads, self.optim_)
        return out, out.loss.item()

    def fit(self, X: DemoDataset, y=None, log_path=None, checkpoint_path=None, checkpoint_every: int = 0):
        """Train on a demonstration dataset.

        Training resumes from ``step_`` when the estimator already holds
        parameters (e.g. after :meth:`load`) and stops at ``train_steps``.
        """
        if not isinstance(X, DemoDataset):
            raise TypeError("fit expects a DemoDataset")
        if not hasattr(self, "net_"):
            self._build()
        cfg = self.config_
        if X.n_joints != cfg.n_joints or X.n_sensors != cfg.n_sensors:
            raise ValueError(f"dataset has J={X.n_joints}, sensors={X.n_sensors}; config expects "
                             f"J={cfg.n_joints}, sensors={cfg.n_sensors}")
        samples = build_samples(X, cfg, self.preprocessor_)
        if not hasattr(self, "norm_"):
            self.norm_ = Normalizer.fit(samples.actions.reshape(-1, cfg.action_dim), samples.forces)
        writer, fh = None, None
        if log_path is not None:
            fh = open(log_path, "a" if self.step_ else "w", newline="", encoding="utf-8")
            writer = csv.writer(fh, lineterminator="\n")
            if not self.step_:
                writer.writerow(("step", "L", "L_pi", "L_ffp", "alpha_tac"))
        self.log_ = []
        try:
            while self.step_ < cfg.train_steps:
                out, loss = self._train_step(samples, self.step_)
                self.step_ += 1
                row = (self.step_, loss, out.loss_pi.item(), out.loss_ffp.item(),
                       None if out.alpha_tac is None else float(np.mean(out.alpha_tac)))
                self.log_.append(row)
                if writer is not None and (self.step_ % cfg.log_every == 0 or self.step_ == cfg.train_steps):
                    writer.writerow([row[0]] + [repr(v) if v is not None else "NA" for v in row[1:]])
                if checkpoint_path is not None and checkpoint_every and self.step_ % checkpoint_every == 0:
                    self.save(f"{checkpoint_path}.step{self.step_}")
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_path is not None:
            self.save(checkpoint_path)
        return self

    # ------------------------------------------------------------ inference
    def plan(self, histories: Sequence[Sequence[Observation]], states=None, rng=None) -> Plan:
        """Batched inference over several observation histories."""
        self._check_fitted()
        cfg = self.config_
        rng = rng if rng is not None else stream(self.random_state, "predict")
        for hist in histories:
            if len(hist) != cfg.h:
                raise ValueError(f"expected {cfg.h} observations per history, got {len(hist)}")
        B = len(histories)
        pc = self.preprocessor_.transform([hist[-1].pc for hist in histories])
        tac = np.stack([hist[-1].tac.as_array() for hist in histories])
        observed = np.stack([[net_force(o.tac) for o in hist] for hist in histories])
        with T.no_grad():
            e_pc, e_tac = self._embed(pc, tac)
            predicted = self._sample_forces(e_pc, e_tac, rng) if self.wiring_.force_head else None
            cond, fused = self._condition(e_pc, e_tac, observed, predicted)
            x = diffusion.p_sample_loop(self.net_.action_head, cond, (B, cfg.n * cfg.action_dim),
                                        self.sched_, rng)
        actions = self.norm_.denorm_actions(x.reshape(B, cfg.n, cfg.action_dim))
        return Plan(actions, None if fused is None else fused.alpha_pc.copy(),
                    None if fused is None else fused.alpha_tac.copy(), predicted)

    def predict(self, X: Sequence[Observation], rng=None):
        """One history of ``h`` observations -> (ActionChunk, (alpha_pc, alpha_tac) or None, F_pred or None)."""
        plan = self.plan([list(X)], rng=rng)
        weights = None if plan.alpha_pc is None else (float(plan.alpha_pc[0]), float(plan.alpha_tac[0]))
        forces = None if plan.forces is None else plan.forces[0]
        return ActionChunk.from_array(plan.actions[0]), weights, forces

    # ------------------------------------------------------------ persistence
    def state_arrays(self) -> dict[str, np.ndarray]:
        self._check_fitted()
        out = {name: p.data for name, p in self.params_.items()}
        for name in self.params_:
            if name in self.optim_.m:
                out[f"adam.m.{name}"] = self.optim_.m[name]
                out[f"adam.v.{name}"] = self.optim_.v[name]
        out["adam.step"] = np.array([float(self.optim_.step)])
        out["meta.step"] = np.array([float(self.step_)])
        out["meta.random_state"] = np.array([float(self.random_state)])
        out["norm.action_lo"] = self.norm_.action_lo
        out["norm.action_hi"] = self.norm_.action_hi
        out["norm.force_std"] = self.norm_.force_std
        text = json.dumps(self.config_.to_dict(), sort_keys=True).encode("utf-8")
        out["meta.config_utf8"] = np.frombuffer(text, dtype=np.uint8).astype(np.float64)
        return out

    def save(self, path) -> None:
        save_checkpoint(path, self.state_arrays())

    @classmethod
    def load(cls, path) -> "AdapTacPolicy":
        arrays = load_checkpoint(path)
        try:
            text = arrays["meta.config_utf8"].astype(np.uint8).tobytes().decode("utf-8")
        except KeyError as exc:
            raise ValueError(f"{path}: checkpoint carries no policy config") from exc
        cfg = PolicyConfig.from_dict(json.loads(text))
        pol = cls(cfg, int(arrays["meta.random_state"][0]))
        pol._build()
        for name, p in pol.params_.items():
            if name not in arrays:
                raise ValueError(f"{path}: missing parameter {name}")
            if arrays[name].shape != p.shape:
                raise ValueError(f"{path}: parameter {name} has shape {arrays[name].shape}, expected {p.shape}")
            p.data = arrays[name].copy()
            if f"adam.m.{name}" in arrays:
                pol.optim_.m[name] = arrays[f"adam.m.{name}"].copy()
                pol.optim_.v[name] = arrays[f"adam.v.{name}"].copy()
        pol.optim_.step = int(arrays["adam.step"][0])
        pol.step_ = int(arrays["meta.step"][0])
        pol.norm_ = Normalizer(arrays["norm.action_lo"].copy(), arrays["norm.action_hi"].copy(),
                               arrays["norm.force_std"].copy())
        return pol
