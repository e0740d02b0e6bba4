"""Multi-view blendshape head fitting with screen-space motion and scan-to-mesh evaluation."""

from .config import EnergyConfig
from .data import Observations, SequenceDataset, TrackingParams
from .energy import check_gradient, gradient, total_energy
from .fitting import fit, initialize_params, reprojection_errors, world_vertices
from .geometry import Camera, RigidTransform, project
from .model import BlendshapeModel, ModelParams, Region, evaluate_model
from .recon import TriangleMesh, chamfer_scan_to_mesh, evaluate_reconstruction, icp_refine, procrustes_rigid
from .ssme import evaluate_ssme, screen_meshes
from .synth import SynthSpec, generate_sequence

__version__ = "0.1.0"

__all__ = [
    "BlendshapeModel",
    "Camera",
    "EnergyConfig",
    "ModelParams",
    "Observations",
    "Region",
    "RigidTransform",
    "SequenceDataset",
    "SynthSpec",
    "TrackingParams",
    "TriangleMesh",
    "chamfer_scan_to_mesh",
    "check_gradient",
    "evaluate_model",
    "evaluate_reconstruction",
    "evaluate_ssme",
    "fit",
    "generate_sequence",
    "gradient",
    "icp_refine",
    "initialize_params",
    "procrustes_rigid",
    "project",
    "reprojection_errors",
    "screen_meshes",
    "total_energy",
    "world_vertices",
]
