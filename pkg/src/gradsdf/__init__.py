"""Online Euclidean SDF reconstruction: a semi-sparse octree prior with
gradient-augmented interpolation plus a hash-grid neural residual."""

from .config import PROFILES, VARIANTS, RunConfig, load_config, make_config
from .errors import (CheckpointError, ConfigError, EmptyFrameError, EmptyMeshError,
                     GradSdfError, MedialPointError, NonFiniteLossError, OutOfBoundsError,
                     SceneError, ShapeMismatchError)
from .geometry import AnalyticScene, Aabb, Box, Frame, Room, Sphere, generate_frames
from .octree import OctreeConfig, SemiSparseOctree
from .training import HybridSdf, TrainState, run_online

__version__ = "0.1.0"
