"""Vehicle pose and shape from a depth map and instance masks by fitting a deformable mesh."""

__version__ = "0.1.0"

from .evaluation import Box3D, Detection, average_precision, bev_iou, confidence_scores, evaluate, iou_3d, mesh_to_box
from .fitting import FitConfig, FitResult, InstanceFitter, InstanceProblem, fit_instance
from .geometry import CameraIntrinsics, EmptyObject, ObjectPose, ShapeManifold, TriMesh
from .learner import EncoderParams, PoseEncoder, TrainConfig, train
from .losses import FitState, FrameTriplet, LossBreakdown, LossWeights
from .manifold import car_manifold
from .render import RenderConfig, render, render_silhouette
from .synth import NoiseSpec, Scene, SynthConfig, corrupt, sample_scene

__all__ = [
    "Box3D", "CameraIntrinsics", "Detection", "EmptyObject", "EncoderParams", "FitConfig", "FitResult",
    "FitState", "FrameTriplet", "InstanceFitter", "InstanceProblem", "LossBreakdown", "LossWeights",
    "NoiseSpec", "ObjectPose", "PoseEncoder", "RenderConfig", "Scene", "ShapeManifold", "SynthConfig",
    "TrainConfig", "TriMesh", "average_precision", "bev_iou", "car_manifold", "confidence_scores",
    "corrupt", "evaluate", "fit_instance", "iou_3d", "mesh_to_box", "render", "render_silhouette",
    "sample_scene", "train",
]
