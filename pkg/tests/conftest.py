"""Shared fixtures: a small two-bone tube rig exercising every model stage."""

import numpy as np
import pytest

from rigkit.body_model import BlendshapeBasis, MeshTopology, RigModel, SkinWeights
from rigkit.core_math import EulerXYZ
from rigkit.skeleton import Joint, ParameterTransform, Skeleton


def make_tube(x0: float, x1: float, rings: int, segments: int, radius: float):
    """Open-ended tube along x; returns (verts (R*S, 3), tris)."""
    xs = np.linspace(x0, x1, rings)
    ang = np.linspace(0.0, 2.0 * np.pi, segments, endpoint=False)
    verts = np.array(
        [[x, radius * np.cos(a), radius * np.sin(a)] for x in xs for a in ang]
    )
    tris = []
    for r in range(rings - 1):
        for s in range(segments):
            a = r * segments + s
            b = r * segments + (s + 1) % segments
            c = (r + 1) * segments + s
            d = (r + 1) * segments + (s + 1) % segments
            tris.append([a, b, c])
            tris.append([b, d, c])
    return verts, np.array(tris, dtype=np.int64)


def two_bone_skeleton() -> Skeleton:
    ident = EulerXYZ(0.0, 0.0, 0.0)
    return Skeleton(
        [
            Joint("root", None, np.zeros(3), ident),
            Joint("elbow", 0, np.array([1.0, 0.0, 0.0]), ident),
        ]
    )


def two_bone_parameter_transform() -> ParameterTransform:
    # params: root_t{x,y,z}, root_r{x,y,z}, elbow_r{x,y,z}, scale_all
    names = [
        "root_tx", "root_ty", "root_tz",
        "root_rx", "root_ry", "root_rz",
        "elbow_rx", "elbow_ry", "elbow_rz",
        "scale_all",
    ]
    rows = np.array([0, 1, 2, 3, 4, 5, 10, 11, 12, 6])
    cols = np.arange(10)
    weights = np.ones(10)
    lower = np.array([-5.0] * 3 + [-2.0] * 6 + [-1.0])
    upper = -lower
    return ParameterTransform(
        n_joint_params=14,
        rows=rows,
        cols=cols,
        weights=weights,
        pose_cols=np.arange(9),
        skel_cols=np.array([9]),
        lower=lower,
        upper=upper,
        names=names,
    )


def build_two_bone_rig(rings: int = 15, segments: int = 8) -> RigModel:
    verts, tris = make_tube(0.0, 2.0, rings, segments, radius=0.2)
    v = len(verts)
    topo = MeshTopology(v, tris)

    # smooth handover around the elbow at x = 1
    w_elbow = np.clip((verts[:, 0] - 0.8) / 0.4, 0.0, 1.0)
    pairs = [[(0, 1.0 - w), (1, w)] for w in w_elbow]
    skin = SkinWeights.from_pairs(pairs, max_influences=2)

    # identity: a radial bulge near the elbow and an axial stretch
    radial = verts.copy()
    radial[:, 0] = 0.0
    norms = np.linalg.norm(radial, axis=1, keepdims=True)
    radial = radial / np.where(norms > 0, norms, 1.0)
    bulge = 0.05 * radial * np.exp(-((verts[:, 0] - 1.0) ** 2) / 0.1)[:, None]
    stretch = np.zeros_like(verts)
    stretch[:, 0] = 0.05 * (verts[:, 0] - 1.0)
    identity = BlendshapeBasis(np.stack([bulge, stretch]), ["bulge", "stretch"])

    # expression: a bump at the far tip
    bump = 0.03 * radial * np.exp(-((verts[:, 0] - 2.0) ** 2) / 0.05)[:, None]
    expression = BlendshapeBasis(bump[None], ["tip_bump"])

    return RigModel(
        topology=topo,
        template=verts,
        identity_basis=identity,
        expression_basis=expression,
        skin_weights=skin,
        skeleton=two_bone_skeleton(),
        param_transform=two_bone_parameter_transform(),
    )


@pytest.fixture
def tube_rig() -> RigModel:
    return build_two_bone_rig()
