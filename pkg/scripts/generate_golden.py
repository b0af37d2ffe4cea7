"""Regenerate the committed agent-off baseline metrics.

Run from the repository root after any change that affects environment or
adversary behaviour:

    python3 scripts/generate_golden.py

The acceptance suite compares fresh agent-off runs against these files
byte-for-byte, so they must only ever change deliberately.
"""

from __future__ import annotations

import json
from importlib.resources import files
from pathlib import Path

from defsim.runner import run_episode
from defsim.scenario import load_scenario

SEEDS = range(1, 21)
OUT = Path(__file__).resolve().parent.parent / "tests" / "golden"


def main() -> None:
    OUT.mkdir(parents=True, exist_ok=True)
    for name in ("s1_comms_spoof", "s2_lateral_hunt", "s3_partition"):
        config = load_scenario(str(files("defsim") / "scenarios" / f"{name}.json"))
        baseline = {
            str(seed): run_episode(config, seed, agent_enabled=False).metrics
            for seed in SEEDS
        }
        payload = {"scenario": name, "scenario_hash": config.scenario_hash(),
                   "agent_enabled": False, "metrics_by_seed": baseline}
        path = OUT / f"agent_off_{name}.json"
        path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
        print(f"wrote {path}")


if __name__ == "__main__":
    main()
