"""Discrete-event network simulator for Opsec paths."""
from ..scenario import ConfigInvalid
from .adversary import Adversary, AdversaryState, apply_adversary
from .nat import NatState, nat_rewrite
from .scaling import ScaleController, load_sweep, scale_controller
from .sim import Metrics, Simulation, build, run

__all__ = ["Adversary", "AdversaryState", "ConfigInvalid", "Metrics", "NatState", "ScaleController", "Simulation",
           "apply_adversary", "build", "load_sweep", "nat_rewrite", "run", "scale_controller"]
