"""Field transfer between mesh resolutions via closest-face barycentric maps.

Every per-vertex quantity of a rig (template-relative blendshape deltas,
corrective decoder rows, mask vectors, skin weights) transfers to another
level of detail by sampling it at the closest point on the source surface:
target value = sum of the source triangle's corner values weighted by the
barycentric coordinates of that closest point. Skin weights additionally get
re-capped and renormalized, and corrective supports are rebuilt from the
transferred indicator.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, replace

import numpy as np

from .body_model import MeshTopology, RigModel, SkinWeights, BlendshapeBasis
from .closest_point import TriangleBVH
from .correctives import CorrectiveModel, init_masks
from .errors import DataError

log = logging.getLogger(__name__)


@dataclass
class BarycentricMap:
    """Per target vertex: source triangle and barycentric closest-point coords."""

    triangles: np.ndarray  # (Vt,) source triangle index
    weights: np.ndarray  # (Vt, 3) non-negative, summing to 1
    distances: np.ndarray  # (Vt,) closest-point distance, diagnostic only

    def __post_init__(self):
        if np.any(self.weights < -1e-9) or np.any(np.abs(self.weights.sum(axis=1) - 1) > 1e-9):
            raise DataError("BarycentricMap: weights must be a convex combination")


def build_barycentric_map(
    src_verts: np.ndarray, src_topology: MeshTopology, tgt_verts: np.ndarray
) -> BarycentricMap:
    """Closest-point map from each target vertex onto the source surface."""
    src_verts = np.asarray(src_verts, dtype=np.float64)
    tgt_verts = np.asarray(tgt_verts, dtype=np.float64)
    bvh = TriangleBVH(src_verts, src_topology.triangles)
    d2, tri, bary = bvh.query(tgt_verts)
    worst = float(np.sqrt(d2.max(initial=0.0)))
    log.info("build_barycentric_map: worst projection distance %.3e m", worst)
    return BarycentricMap(tri, bary, np.sqrt(d2))


def transfer_field(
    bmap: BarycentricMap, src_topology: MeshTopology, field: np.ndarray
) -> np.ndarray:
    """Interpolate a per-source-vertex field (V, ...) onto the target vertices."""
    field = np.asarray(field)
    if field.shape[0] != src_topology.num_vertices:
        raise DataError(
            f"transfer_field: field has {field.shape[0]} rows, "
            f"source mesh has {src_topology.num_vertices} vertices"
        )
    corners = src_topology.triangles[bmap.triangles]  # (Vt, 3)
    gathered = field[corners]  # (Vt, 3, ...)
    w = bmap.weights.reshape(bmap.weights.shape + (1,) * (field.ndim - 1))
    return (gathered * w).sum(axis=1)


def transfer_skin_weights(
    bmap: BarycentricMap,
    src_topology: MeshTopology,
    skin: SkinWeights,
    max_influences: int | None = None,
) -> SkinWeights:
    """Transfer skin weights, then re-cap to K influences and renormalize."""
    k = max_influences or skin.max_influences
    pairs = []
    for tri, w in zip(src_topology.triangles[bmap.triangles], bmap.weights):
        acc: dict[int, float] = {}
        for corner, bw in zip(tri, w):
            if bw == 0.0:
                continue
            for j, sw in zip(skin.indices[corner], skin.weights[corner]):
                if sw > 0.0:
                    acc[int(j)] = acc.get(int(j), 0.0) + bw * sw
        pairs.append(list(acc.items()))
    return SkinWeights.from_pairs(pairs, max_influences=k)


def smooth_field(topology: MeshTopology, field: np.ndarray, strength: float = 0.5) -> np.ndarray:
    """One umbrella smoothing step x - strength * L x."""
    lap = topology.uniform_laplacian()
    flat = field.reshape(topology.num_vertices, -1)
    return (flat - strength * (lap @ flat)).reshape(field.shape)


def _transfer_basis(
    bmap: BarycentricMap, src_topo: MeshTopology, basis: BlendshapeBasis,
    tgt_topo: MeshTopology, smooth: bool,
) -> BlendshapeBasis:
    if basis.size == 0:
        return BlendshapeBasis.empty(tgt_topo.num_vertices)
    moved = np.stack([transfer_field(bmap, src_topo, d) for d in basis.deltas])
    if smooth:
        moved = np.stack([smooth_field(tgt_topo, d) for d in moved])
    return BlendshapeBasis(moved, list(basis.names))


def _transfer_correctives(
    bmap: BarycentricMap,
    src_topo: MeshTopology,
    cm: CorrectiveModel,
    tgt_topo: MeshTopology,
    tgt_verts: np.ndarray,
    tgt_skin: SkinWeights,
    skeleton,
    smooth: bool,
    reinit: bool,
) -> CorrectiveModel:
    decoders = np.stack([transfer_field(bmap, src_topo, d) for d in cm.decoders])
    if smooth:
        decoders = np.stack([smooth_field(tgt_topo, d) for d in decoders])
    if reinit:
        masks, support = init_masks(tgt_topo, tgt_verts, tgt_skin, skeleton, cm.joints)
        masks[~support] = -0.1
    else:
        masks = np.stack([transfer_field(bmap, src_topo, m) for m in cm.masks])
        support = (
            np.stack([transfer_field(bmap, src_topo, s.astype(np.float64)) for s in cm.support])
            > 1e-9
        )
        if smooth:
            frozen = masks[~support]
            masks = np.stack([smooth_field(tgt_topo, m) for m in masks])
            masks[~support] = frozen  # smoothing must not reopen the frozen region
        masks[~support] = np.minimum(masks[~support], 0.0)
    return CorrectiveModel(
        joints=cm.joints.copy(),
        neighborhoods=cm.neighborhoods.copy(),
        layers=[w.copy() for w in cm.layers],
        decoders=decoders,
        masks=masks,
        support=support,
        leak=cm.leak,
    )


def transfer_rig(
    rig: RigModel,
    tgt_verts: np.ndarray,
    tgt_tris: np.ndarray,
    smooth: bool = False,
    reinit_masks: bool = False,
) -> RigModel:
    """Rebuild the whole rig on a new mesh resolution.

    The target mesh becomes the new template; the skeleton, parameter
    transform and corrective MLP weights are resolution-independent and copied
    through. ``smooth`` runs one Laplacian pass over transferred float fields.
    """
    tgt_verts = np.asarray(tgt_verts, dtype=np.float64)
    tgt_topo = MeshTopology(len(tgt_verts), tgt_tris)
    bmap = build_barycentric_map(rig.template, rig.topology, tgt_verts)

    skin = transfer_skin_weights(bmap, rig.topology, rig.skin_weights)
    identity = _transfer_basis(bmap, rig.topology, rig.identity_basis, tgt_topo, smooth)
    expression = _transfer_basis(bmap, rig.topology, rig.expression_basis, tgt_topo, smooth)
    correctives = None
    if rig.correctives is not None:
        correctives = _transfer_correctives(
            bmap, rig.topology, rig.correctives, tgt_topo, tgt_verts, skin,
            rig.skeleton, smooth, reinit_masks,
        )
    lods = list(rig.metadata.get("lods", []))
    if not lods:
        lods.append({"name": "lod0", "vertices": rig.num_vertices})
    lods.append({"name": f"lod{len(lods)}", "vertices": len(tgt_verts)})
    return RigModel(
        topology=tgt_topo,
        template=tgt_verts,
        identity_basis=identity,
        expression_basis=expression,
        skin_weights=skin,
        skeleton=rig.skeleton,
        param_transform=rig.param_transform,
        correctives=correctives,
        skeleton_basis=None if rig.skeleton_basis is None else rig.skeleton_basis.copy(),
        identity_scales=None if rig.identity_scales is None else rig.identity_scales.copy(),
        metadata={**rig.metadata, "lod_source_vertices": rig.num_vertices, "lods": lods},
    )
