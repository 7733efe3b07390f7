"""Multi-agent persistent monitoring on graph workspaces.

Simulation, planning, and learning toolkit: Gaussian-process target
beliefs, spatio-temporal attention policy with pointer-style action
selection, PPO training, heuristic baselines, and evaluation metrics.
"""

__version__ = "0.1.0"

from compass.config import Config, load_config  # noqa: F401
