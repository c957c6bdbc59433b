"""Camera-only vineyard row following and row switching."""
from .geometry import CameraModel, GroundPoint, ImagePoint, Mount, WorldPoint, WorldPose, default_cameras
from .world import NoiseSpec, RobotState, VineyardLayout

__version__ = "0.1.0"

__all__ = ["CameraModel", "GroundPoint", "ImagePoint", "Mount", "WorldPoint", "WorldPose", "default_cameras",
           "NoiseSpec", "RobotState", "VineyardLayout", "__version__"]
