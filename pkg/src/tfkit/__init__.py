"""tfkit: rotation-equivariant point-cloud networks for per-atom geometric
vectors, with the supporting SO(3) algebra, rigid-body alignment, analytic
force oracles, and local structure-refinement fields."""

from .geometry import RigidTransform, apply_transform, k_nearest, kabsch_align, rmsd
from .net import Model, ModelConfig, build_model, forward, load_checkpoint, save_checkpoint
from .refinement import RefinementField, StructurePair, apply_refinement, refinement_field
from .so3 import CGTensor, IrrepMatrix, Rotation, clebsch_gordan, random_rotation, real_spherical_harmonics, wigner_matrix
from .systems import AtomSystem, LJParams, lj_forces, parse_structure, write_structure
from .training import MetricsReport, TrainConfig, huber_tensor_loss, metric_suite, naive_baselines, train

__version__ = "0.1.0"
