"""Batched policy rollouts and the SR / AEL metrics.

Policies implement ``plan(histories, states, rng) -> Plan``, where
``histories`` holds the last ``h`` observations of every active episode
(oldest first, padded by repeating the first observation) and ``states`` the
matching privileged world states, which only the expert may read.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np

from ..rng import stream, stream_seed
from ..sensing import Action, Observation, net_force
from ..traces import TraceRecord, write_trace
from .expert import expert_phase, scripted_expert
from .world import FlipEnv, SimConfig, WorldState


@dataclass
class Plan:
    actions: np.ndarray                 # (B, k, 9 + J)
    alpha_pc: np.ndarray | None = None  # (B,)
    alpha_tac: np.ndarray | None = None
    forces: np.ndarray | None = None    # (B, steps, 3) predicted net forces, if any


class Policy(Protocol):
    h: int

    def plan(self, histories: Sequence[Sequence[Observation]], states: Sequence[WorldState],
             rng: np.random.Generator) -> Plan: ...


class ExpertPolicy:
    """The privileged scripted expert behind the policy interface."""

    h = 1

    def __init__(self, sim: SimConfig | None = None):
        self.sim = sim or SimConfig()

    def plan(self, histories, states, rng) -> Plan:
        acts = np.stack([scripted_expert(s, self.sim).to_vector() for s in states])
        return Plan(acts[:, None, :])


@dataclass
class EpisodeResult:
    seed: int
    success: bool
    length: int
    trace: str | None = None


def success_rate(results: Sequence[EpisodeResult]) -> float:
    return sum(r.success for r in results) / len(results)


def average_episode_length(results: Sequence[EpisodeResult], max_steps: int = 300) -> float:
    """Mean length with every failed run counted at ``max_steps``."""
    return float(np.mean([r.length if r.success else max_steps for r in results]))


def episode_seeds(seed: int, episodes: int) -> list[int]:
    return [stream_seed(seed, f"eval/episode/{i}") for i in range(episodes)]


def evaluate(policy: Policy, episodes: int, seed: int, sim: SimConfig | None = None,
             exec_horizon: int = 1, trace_dir=None) -> dict:
    """Run ``episodes`` rollouts in lockstep and return a JSON-ready report."""
    if episodes < 1:
        raise ValueError("episodes must be >= 1")
    if exec_horizon < 1:
        raise ValueError("exec_horizon must be >= 1")
    sim = sim or SimConfig()
    seeds = episode_seeds(seed, episodes)
    envs = [FlipEnv(sim) for _ in seeds]
    hist: list[list[Observation]] = []
    for env, s in zip(envs, seeds):
        first = env.reset(s)
        hist.append([first] * policy.h)
    traces: list[list[TraceRecord]] = [[] for _ in seeds]
    done = [False] * len(envs)
    rng = stream(seed, "eval/policy")
    while not all(done):
        active = [i for i, d in enumerate(done) if not d]
        plan = policy.plan([hist[i] for i in active], [envs[i].state for i in active], rng)
        for j, i in enumerate(active):
            env = envs[i]
            for k in range(min(exec_horizon, plan.actions.shape[1])):
                obs = hist[i][-1]
                traces[i].append(TraceRecord(
                    env.state.steps,
                    None if plan.alpha_pc is None else float(plan.alpha_pc[j]),
                    None if plan.alpha_tac is None else float(plan.alpha_tac[j]),
                    float(np.linalg.norm(net_force(obs.tac))),
                    expert_phase(env.state, sim),
                ))
                obs, finished, _ = env.step(Action.from_vector(plan.actions[j, k]))
                hist[i] = (hist[i] + [obs])[-policy.h:]
                if finished:
                    done[i] = True
                    break
    results = []
    for i, (env, s) in enumerate(zip(envs, seeds)):
        path = None
        if trace_dir is not None:
            Path(trace_dir).mkdir(parents=True, exist_ok=True)
            path = str(Path(trace_dir) / f"episode_{i:04d}.csv")
            write_trace(path, traces[i])
        results.append(EpisodeResult(s, bool(env.state.success), int(env.state.steps), path))
    return {
        "episodes": [asdict(r) for r in results],
        "success_rate": success_rate(results),
        "average_episode_length": average_episode_length(results, sim.max_steps),
        "max_steps": sim.max_steps,
        "seed": seed,
    }


def recompute_metrics(report: dict) -> tuple[float, float]:
    results = [EpisodeResult(**e) for e in report["episodes"]]
    return success_rate(results), average_episode_length(results, report["max_steps"])


def write_report(path, report: dict) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")
