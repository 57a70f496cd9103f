from .toy import ToySafeEnv
from .intersection import IntersectionEnv, ScenarioConfig

__all__ = ["ToySafeEnv", "IntersectionEnv", "ScenarioConfig"]
