"""Relativistic Vlasov-Darwin particle simulator with an exact-transport stability lab."""

from .dynamics import FlowConfig, Trajectory, run, step
from .ensemble import Ensemble, PhaseParticle, generate, reference_ball
from .errors import NoConvergence, VDarwinError
from .fields import solve_vector_potential
from .transport import w2_exact

__version__ = "0.1.0"

__all__ = [
    "Ensemble",
    "FlowConfig",
    "NoConvergence",
    "PhaseParticle",
    "Trajectory",
    "VDarwinError",
    "generate",
    "reference_ball",
    "run",
    "solve_vector_potential",
    "step",
    "w2_exact",
]
