"""Learned execution models for lattice motion primitives.

Generates a state-lattice primitive set, plans over it with A*, simulates
noisy closed-loop executions, learns per-primitive execution distributions
from Gaussian-process fits and monitors new executions against them.
"""

from .lattice import LatticeConfig, MotionPrimitive, Plan, State, generate_primitive_set
from .planner import LatticePlanner, OccupancyWorld, PlanningProblem, SphereObstacle, plan
from .gp import GPModel, Hyperparams, fit
from .execution_model import PrimitiveExecutionModel, build_model, margin_provider
from .monitor import MonitorConfig, StreamMonitor, classify_execution
from .simulator import FaultSpec, SimConfig, collect_triplets, execute

__version__ = "0.1.0"

__all__ = [
    "LatticeConfig", "MotionPrimitive", "Plan", "State", "generate_primitive_set",
    "LatticePlanner", "OccupancyWorld", "PlanningProblem", "SphereObstacle", "plan",
    "GPModel", "Hyperparams", "fit",
    "PrimitiveExecutionModel", "build_model", "margin_provider",
    "MonitorConfig", "StreamMonitor", "classify_execution",
    "FaultSpec", "SimConfig", "collect_triplets", "execute",
]
