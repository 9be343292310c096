"""Dictionary-free Koopman predictive control for a mixed-traffic platoon."""
from .control import DfkController, EdmdController, MpcConfig, receding_horizon
from .koopman_id import IdConfig, KoopmanRepresentation, iterate
from .traffic_sim import OvmParams, Trajectory, simulate

__all__ = ["DfkController", "EdmdController", "IdConfig", "KoopmanRepresentation", "MpcConfig",
           "OvmParams", "Trajectory", "iterate", "receding_horizon", "simulate"]
__version__ = "0.1.0"
