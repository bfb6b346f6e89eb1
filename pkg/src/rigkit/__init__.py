"""Parametric human rig engine: kinematics, blendshapes, correctives, fitting.

The package is organized around a plain-data ``RigModel`` (template mesh,
identity/expression bases, skinned skeleton, optional pose correctives) and
free functions that evaluate, build, transfer, and fit it. Numpy arrays are
the interchange currency throughout; torch enters only inside gradient-based
operations.
"""

from .body_model import (
    BlendshapeBasis,
    MeshTopology,
    RigModel,
    SkinWeights,
    evaluate,
    evaluate_rest_mesh,
)
from .closest_point import TriangleBVH, closest_point_brute_force
from .core_math import EulerXYZ, Transform3, compose, euler_to_matrix, matrix_to_euler
from .correctives import (
    CorrectiveConfig,
    CorrectiveModel,
    CorrectiveTrainConfig,
    corrective_offsets,
    init_corrective_model,
    train_correctives,
)
from .errors import DataError, NumericError, RigkitError
from .fitting import (
    FitConfig,
    FitInit,
    FitResult,
    ScanTarget,
    evaluate_data2model,
    fit,
    fit_batch,
    register_nonrigid,
)
from .identity import (
    IdentitySpace,
    RegionMask,
    ShapeSet,
    SymmetryMap,
    build_identity_space,
    compute_symmetry_map,
    detect_asymmetric_components,
    masked_pca,
    mirror_augment,
)
from .lod import (
    BarycentricMap,
    build_barycentric_map,
    transfer_field,
    transfer_rig,
    transfer_skin_weights,
)
from .meshio import load_mesh, load_points, save_mesh
from .rigfile import load_rig, save_rig
from .skeleton import (
    Joint,
    ParameterTransform,
    Skeleton,
    apply_parameter_transform,
    forward_kinematics,
)
from .synthetic import SyntheticRigSpec, generate_synthetic_rig, make_benchmark_targets

__version__ = "0.1.0"

__all__ = [
    "BarycentricMap",
    "BlendshapeBasis",
    "CorrectiveConfig",
    "CorrectiveModel",
    "CorrectiveTrainConfig",
    "DataError",
    "EulerXYZ",
    "FitConfig",
    "FitInit",
    "FitResult",
    "IdentitySpace",
    "Joint",
    "MeshTopology",
    "NumericError",
    "ParameterTransform",
    "RegionMask",
    "RigModel",
    "RigkitError",
    "ScanTarget",
    "ShapeSet",
    "Skeleton",
    "SkinWeights",
    "SymmetryMap",
    "SyntheticRigSpec",
    "Transform3",
    "TriangleBVH",
    "apply_parameter_transform",
    "build_barycentric_map",
    "build_identity_space",
    "closest_point_brute_force",
    "compose",
    "compute_symmetry_map",
    "corrective_offsets",
    "detect_asymmetric_components",
    "euler_to_matrix",
    "evaluate",
    "evaluate_data2model",
    "evaluate_rest_mesh",
    "fit",
    "fit_batch",
    "forward_kinematics",
    "generate_synthetic_rig",
    "init_corrective_model",
    "load_mesh",
    "load_points",
    "load_rig",
    "make_benchmark_targets",
    "masked_pca",
    "matrix_to_euler",
    "mirror_augment",
    "register_nonrigid",
    "save_mesh",
    "save_rig",
    "train_correctives",
    "transfer_field",
    "transfer_rig",
    "transfer_skin_weights",
]
