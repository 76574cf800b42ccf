"""Run the relay chain in simulation or on loopback and report on it."""

from quickclear.harness.result import RunResult
from quickclear.harness.runner import RunManifest, RunOutput, analyze, quick_clear, run
from quickclear.harness.transcript import ChainBroken, Stage, Status, Transcript

__all__ = [
    "ChainBroken",
    "RunManifest",
    "RunOutput",
    "RunResult",
    "Stage",
    "Status",
    "Transcript",
    "analyze",
    "quick_clear",
    "run",
]
