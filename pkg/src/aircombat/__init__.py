"""Hierarchical multi-agent reinforcement learning for 2D air combat."""

from .geometry import Pose2D, engagement
from .sim import AircraftKind, ScenarioConfig, Team, WorldState, advance, init_episode
from .training import LeagueRegistry, LowLevelTrainer, TrainConfig, run_curriculum, train_commander
from .harness import EvaluationReport, evaluate, record_trajectory, render_replay

__version__ = "0.1.0"

__all__ = [
    "Pose2D", "engagement", "AircraftKind", "ScenarioConfig", "Team", "WorldState", "advance", "init_episode",
    "LeagueRegistry", "LowLevelTrainer", "TrainConfig", "run_curriculum", "train_commander",
    "EvaluationReport", "evaluate", "record_trajectory", "render_replay",
]
