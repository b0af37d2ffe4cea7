"""defsim: deterministic simulation kit for autonomous cyber-defense agents.

A simulated compromised platform (envsim), a kill-chain malware adversary
(adversary), an agent kernel covering sensing, planning, execution,
collaboration and learning, and a scenario runner that measures resilience
and explains every decision the agent takes.
"""

from .runner import EpisodeResult, explain, replay, run_batch, run_episode
from .scenario import ScenarioConfig, load_scenario, parse_scenario

__all__ = [
    "EpisodeResult",
    "ScenarioConfig",
    "explain",
    "load_scenario",
    "parse_scenario",
    "replay",
    "run_batch",
    "run_episode",
]

__version__ = "0.1.0"
