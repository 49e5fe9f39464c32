"""Projective fusion of 3D volumes and 2D images for en-face segmentation."""

from .datamodel import StudySample, load_sample, save_sample
from .network import ArchitectureConfig, FusionNet, build_model
from .synthgen import SceneSpec, generate_scene

__version__ = "0.1.0"
