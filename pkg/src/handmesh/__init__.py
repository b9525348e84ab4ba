"""Differentiable hand-mesh decoder and weakly-supervised fitting.

A skinned hand template with learned correctives (skeleton offsets, identity
and pose-dependent vertex offsets, optional skinning-weight deltas), a
z-buffered depth renderer, penetration and smoothness penalties, and a
fitting loop that recovers poses and correctives from 3D joints plus
multi-view depth maps.
"""
from .model import HandModel, JointHierarchy, ValidationError, load_model, save_model, validate
from .correctives import CorrectiveNets, identity_code
from .pipeline import Decoder, LossConfig
from .render import Camera, render_depth, render_depth_map

__version__ = "0.1.0"

__all__ = ["HandModel", "JointHierarchy", "ValidationError", "load_model", "save_model",
           "validate", "CorrectiveNets", "identity_code", "Decoder", "LossConfig", "Camera",
           "render_depth", "render_depth_map"]
