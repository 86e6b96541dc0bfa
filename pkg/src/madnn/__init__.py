"""Movable-antenna downlink: channel simulation, learned end-to-end pipeline, classical baselines."""
from .channel import Scenario
from .e2e import E2EModel, ModelConfig

__version__ = "0.1.0"

__all__ = ["Scenario", "E2EModel", "ModelConfig", "__version__"]
