"""Multi-frame scene flow: temporal inversion of backward estimates and learned forward/backward fusion."""

from .core import BACKWARD, FORWARD, FrameTripletSample, SceneFlowField
from .metrics import EvalReport, evaluate

__version__ = "0.1.0"

__all__ = ["BACKWARD", "FORWARD", "FrameTripletSample", "SceneFlowField", "EvalReport", "evaluate", "__version__"]
