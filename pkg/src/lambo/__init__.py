"""Prompt-conditioned asymmetric encoder-decoder policies for MEC task offloading."""
from __future__ import annotations

from .errors import LamboError
from .mec import Decision, GenConfig, MecInstance, PhysParams, Prompt, evaluate, generate_instance
from .model import AedConfig

__version__ = "0.1.0"

__all__ = ["AedConfig", "Decision", "GenConfig", "LamboError", "MecInstance", "PhysParams",
           "Prompt", "evaluate", "generate_instance", "__version__"]
