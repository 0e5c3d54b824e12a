"""Planar flip simulator, scripted expert, demonstrations and evaluation."""
from .dataset import (
    DatasetError,
    DemoDataset,
    SchemaVersionError,
    Trajectory,
    generate_demos,
    read_dataset,
    write_dataset,
)
from .evaluate import (
    EpisodeResult,
    ExpertPolicy,
    Plan,
    average_episode_length,
    evaluate,
    recompute_metrics,
    success_rate,
    write_report,
)
from .expert import expert_phase, scripted_expert
from .world import PHASES, FlipEnv, SimConfig, WorldState

__all__ = [
    "DatasetError", "DemoDataset", "SchemaVersionError", "Trajectory", "generate_demos",
    "read_dataset", "write_dataset", "EpisodeResult", "ExpertPolicy", "Plan",
    "average_episode_length", "evaluate", "recompute_metrics", "success_rate", "write_report",
    "expert_phase", "scripted_expert", "PHASES", "FlipEnv", "SimConfig", "WorldState",
]
