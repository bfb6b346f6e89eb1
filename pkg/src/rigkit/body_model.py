"""Template mesh, blendshape stacks, skin weights and full model evaluation.

The posed surface is

    X(beta, theta) = LBS( Xbar + B_id(bs) + B_expr(bf) + B_pose(theta),
                          FK(T_p @ theta), skin weights )

with the rest mesh staying unposed and unscaled until the skinning step.
Skeleton-transformation columns of theta can be driven either raw or through
a small coefficient basis (``beta_k``).

The torch kernels (``*_tensors``) are batched and differentiable; the plain
functions are the single-sample numpy surface.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import torch

from . import correctives as _correctives
from .core_math import Transform3
from .errors import DataError
from .skeleton import (
    DOF_PER_JOINT,
    ParameterTransform,
    Skeleton,
    bind_inverse,
    fk_tensors,
)

log = logging.getLogger(__name__)


@dataclass
class MeshTopology:
    """Triangle connectivity; quads are triangulated by the loaders."""

    num_vertices: int
    triangles: np.ndarray  # (F, 3) int

    def __post_init__(self):
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if self.triangles.size:
            if self.triangles.min() < 0 or self.triangles.max() >= self.num_vertices:
                raise DataError("MeshTopology: triangle index out of range")
            t = self.triangles
            if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
                raise DataError("MeshTopology: degenerate triangle (repeated vertex index)")

    @property
    def num_triangles(self) -> int:
        return len(self.triangles)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E, 2), sorted pairs."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0)

    def nonmanifold_edges(self) -> int:
        """Number of edges shared by more than two triangles (reported, not fatal)."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return int(np.sum(counts > 2))

    def vertex_adjacency(self, verts: np.ndarray | None = None) -> sp.csr_matrix:
        """Sparse adjacency; entries are Euclidean edge lengths when verts given, else 1."""
        e = self.edges()
        if verts is None:
            w = np.ones(len(e))
        else:
            verts = np.asarray(verts, dtype=np.float64)
            w = np.linalg.norm(verts[e[:, 0]] - verts[e[:, 1]], axis=1)
        i = np.concatenate([e[:, 0], e[:, 1]])
        j = np.concatenate([e[:, 1], e[:, 0]])
        return sp.csr_matrix(
            (np.concatenate([w, w]), (i, j)), shape=(self.num_vertices, self.num_vertices)
        )

    def uniform_laplacian(self) -> sp.csr_matrix:
        """Umbrella operator L = I - D^-1 A; annihilates constant fields."""
        adj = self.vertex_adjacency()
        deg = np.asarray(adj.sum(axis=1)).ravel()
        deg[deg == 0] = 1.0
        inv = sp.diags(1.0 / deg)
        return (sp.eye(self.num_vertices) - inv @ adj).tocsr()


@dataclass
class SkinWeights:
    """Per-vertex joint influences, at most K entries, weights summing to one."""

    indices: np.ndarray  # (V, K) int, padded with 0 where weight is 0
    weights: np.ndarray  # (V, K) float

    def __post_init__(self):
        self.indices = np.asarray(self.indices, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.indices.shape != self.weights.shape or self.indices.ndim != 2:
            raise DataError("SkinWeights: indices and weights must share a (V, K) shape")
        if np.any(self.weights < -1e-12):
            raise DataError("SkinWeights: negative weight")
        sums = self.weights.sum(axis=1)
        bad = np.flatnonzero(np.abs(sums - 1.0) > 1e-6)
        if bad.size:
            raise DataError(
                f"SkinWeights: weights of vertex {bad[0]} sum to {sums[bad[0]]:.8f}, not 1"
            )

    @property
    def num_vertices(self) -> int:
        return self.indices.shape[0]

    @property
    def max_influences(self) -> int:
        return self.indices.shape[1]

    def dominant_joint(self) -> np.ndarray:
        """Per-vertex joint with the largest weight (the vertex's body part)."""
        return self.indices[np.arange(self.num_vertices), np.argmax(self.weights, axis=1)]

    @classmethod
    def from_pairs(cls, pairs: list[list[tuple[int, float]]], max_influences: int = 4):
        """Build from per-vertex (joint, weight) lists.

        Entries beyond ``max_influences`` are truncated to the largest and the
        remainder renormalized, with a warning.
        """
        v = len(pairs)
        idx = np.zeros((v, max_influences), dtype=np.int64)
        w = np.zeros((v, max_influences))
        truncated = 0
        for i, vertex_pairs in enumerate(pairs):
            if not vertex_pairs:
                raise DataError(f"SkinWeights: vertex {i} has no joint influence")
            items = sorted(vertex_pairs, key=lambda p: -p[1])
            if len(items) > max_influences:
                truncated += 1
                items = items[:max_influences]
            total = sum(p[1] for p in items)
            if total <= 0:
                raise DataError(f"SkinWeights: vertex {i} has zero total weight")
            for k, (j, weight) in enumerate(items):
                idx[i, k] = j
                w[i, k] = weight / total
        if truncated:
            log.warning(
                "SkinWeights: %d vertices exceeded %d influences; truncated and renormalized",
                truncated,
                max_influences,
            )
        return cls(idx, w)


@dataclass
class BlendshapeBasis:
    """Stack of per-vertex delta fields (n, V, 3) with component names."""

    deltas: np.ndarray
    names: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.deltas = np.asarray(self.deltas, dtype=np.float64)
        if self.deltas.ndim != 3 or self.deltas.shape[-1] != 3:
            raise DataError("BlendshapeBasis: deltas must have shape (n, V, 3)")
        if not np.all(np.isfinite(self.deltas)):
            raise DataError("BlendshapeBasis: non-finite delta")
        if not self.names:
            self.names = [f"component_{i}" for i in range(len(self.deltas))]
        if len(self.names) != len(self.deltas):
            raise DataError("BlendshapeBasis: names length mismatch")

    @property
    def size(self) -> int:
        return self.deltas.shape[0]

    @classmethod
    def empty(cls, num_vertices: int) -> "BlendshapeBasis":
        return cls(np.zeros((0, num_vertices, 3)), [])


@dataclass
class RigModel:
    """A complete rig: mesh, bases, weights, skeleton and optional correctives."""

    topology: MeshTopology
    template: np.ndarray  # (V, 3) meters
    identity_basis: BlendshapeBasis
    expression_basis: BlendshapeBasis
    skin_weights: SkinWeights
    skeleton: Skeleton
    param_transform: ParameterTransform
    correctives: "_correctives.CorrectiveModel | None" = None
    skeleton_basis: np.ndarray | None = None  # (n_skel, n_k); None = raw skel params
    identity_scales: np.ndarray | None = None  # per-component singular values
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.template = np.asarray(self.template, dtype=np.float64)
        self._t: dict = {}
        self.validate()

    @property
    def num_vertices(self) -> int:
        return self.topology.num_vertices

    def validate(self) -> None:
        v = self.topology.num_vertices
        nj = self.skeleton.n_joints
        if self.template.shape != (v, 3):
            raise DataError(
                f"RigModel: template shape {self.template.shape} != ({v}, 3) "
                "(vertex count mismatch)"
            )
        for label, basis in (("identity", self.identity_basis), ("expression", self.expression_basis)):
            if basis.size and basis.deltas.shape[1] != v:
                raise DataError(f"RigModel: {label} basis vertex count != topology")
        if self.skin_weights.num_vertices != v:
            raise DataError("RigModel: skin weight vertex count != topology")
        if self.skin_weights.indices.max(initial=0) >= nj:
            raise DataError("RigModel: skin weight joint index out of range")
        if self.param_transform.n_joint_params != DOF_PER_JOINT * nj:
            raise DataError("RigModel: parameter transform joint-parameter count != 7*n_j")
        if self.skeleton_basis is not None:
            self.skeleton_basis = np.asarray(self.skeleton_basis, dtype=np.float64)
            if self.skeleton_basis.shape[0] != self.param_transform.n_skel:
                raise DataError("RigModel: skeleton basis output dim != n_skel")
        if self.identity_scales is not None:
            self.identity_scales = np.asarray(self.identity_scales, dtype=np.float64)
            if self.identity_scales.shape != (self.identity_basis.size,):
                raise DataError("RigModel: identity_scales length != identity basis size")
        if self.correctives is not None:
            self.correctives.validate(v, self.skeleton, self.param_transform)
        nm = self.topology.nonmanifold_edges()
        if nm:
            log.warning("RigModel: %d non-manifold edges in topology", nm)

    # cached torch mirrors
    def _tensor(self, key: str, build) -> torch.Tensor:
        if key not in self._t:
            self._t[key] = build()
        return self._t[key]

    def template_t(self) -> torch.Tensor:
        return self._tensor("template", lambda: torch.from_numpy(self.template))

    def identity_t(self) -> torch.Tensor:
        return self._tensor(
            "identity",
            lambda: torch.from_numpy(self.identity_basis.deltas.reshape(self.identity_basis.size, -1)),
        )

    def expression_t(self) -> torch.Tensor:
        return self._tensor(
            "expression",
            lambda: torch.from_numpy(
                self.expression_basis.deltas.reshape(self.expression_basis.size, -1)
            ),
        )

    def skin_t(self) -> tuple[torch.Tensor, torch.Tensor]:
        idx = self._tensor("skin_idx", lambda: torch.from_numpy(self.skin_weights.indices))
        w = self._tensor("skin_w", lambda: torch.from_numpy(self.skin_weights.weights))
        return idx, w

    def bind_inverse_t(self) -> tuple[torch.Tensor, torch.Tensor]:
        def build():
            binv = bind_inverse(self.skeleton)
            r = torch.from_numpy(np.stack([t.rotation for t in binv]))
            t = torch.from_numpy(np.stack([t.translation for t in binv]))
            return r, t

        if "bind_inv" not in self._t:
            self._t["bind_inv"] = build()
        return self._t["bind_inv"]

    def skeleton_basis_t(self) -> torch.Tensor | None:
        if self.skeleton_basis is None:
            return None
        return self._tensor("skel_basis", lambda: torch.from_numpy(self.skeleton_basis))

    def laplacian_t(self) -> torch.Tensor:
        def build():
            lap = self.topology.uniform_laplacian().tocoo()
            idx = torch.from_numpy(np.stack([lap.row, lap.col]))
            return torch.sparse_coo_tensor(
                idx, torch.from_numpy(lap.data), lap.shape, check_invariants=False
            ).coalesce()

        return self._tensor("laplacian", build)


def _as_batch(x, n: int | None = None) -> torch.Tensor:
    """Coerce array-like to a (B, n) float64 tensor, adding a batch dim if needed."""
    if isinstance(x, torch.Tensor):
        t = x.to(torch.float64)
    else:
        t = torch.as_tensor(np.asarray(x, dtype=np.float64))
    if t.ndim == 1:
        t = t.unsqueeze(0)
    if n is not None and t.shape[-1] != n:
        raise DataError(f"expected coefficient length {n}, got {t.shape[-1]}")
    return t


def effective_parameters(model: RigModel, theta_p: torch.Tensor, beta_k: torch.Tensor | None):
    """Model parameters with skeleton columns overwritten by the beta_k drive."""
    if beta_k is None:
        return theta_p
    pt = model.param_transform
    basis = model.skeleton_basis_t()
    if basis is None:
        if beta_k.shape[-1] != pt.n_skel:
            raise DataError(
                "beta_k given without a skeleton basis: length must equal n_skel "
                f"({pt.n_skel}), got {beta_k.shape[-1]}"
            )
        skel_vals = beta_k
    else:
        if beta_k.shape[-1] != basis.shape[1]:
            raise DataError(
                f"beta_k length {beta_k.shape[-1]} != skeleton basis size {basis.shape[1]}"
            )
        skel_vals = beta_k @ basis.T
    cols = torch.from_numpy(pt.skel_cols)
    return theta_p.index_copy(-1, cols, skel_vals)


def rest_mesh_tensors(
    model: RigModel,
    beta_s: torch.Tensor,
    beta_f: torch.Tensor,
    theta_p: torch.Tensor,
    offsets: torch.Tensor | None = None,
) -> torch.Tensor:
    """Unposed, unscaled rest mesh (B, V, 3): template + blendshapes + correctives.

    ``offsets`` is an optional free per-vertex delta field (non-rigid
    registration residual), added before skinning.
    """
    B = theta_p.shape[0]
    v = model.num_vertices
    rest = model.template_t().reshape(1, v, 3).expand(B, v, 3)
    if model.identity_basis.size:
        rest = rest + (beta_s @ model.identity_t()).reshape(B, v, 3)
    elif beta_s.shape[-1] != 0:
        raise DataError("identity coefficients given but the rig has no identity basis")
    if model.expression_basis.size:
        rest = rest + (beta_f @ model.expression_t()).reshape(B, v, 3)
    elif beta_f.shape[-1] != 0:
        raise DataError("expression coefficients given but the rig has no expression basis")
    if model.correctives is not None:
        rest = rest + _correctives.corrective_offsets_tensors(
            model.correctives, model.skeleton, model.param_transform, theta_p
        )
    if offsets is not None:
        rest = rest + offsets
    return rest


def skin_tensors(
    model: RigModel,
    rest: torch.Tensor,
    world_r: torch.Tensor,
    world_t: torch.Tensor,
    world_s: torch.Tensor,
) -> torch.Tensor:
    """Linear blend skinning: blend per-joint transformed positions (B, V, 3)."""
    binv_r, binv_t = model.bind_inverse_t()
    # per-joint skinning transform: world o bind^-1 (bind scales are 1)
    r_m = world_r @ binv_r
    t_m = world_s.unsqueeze(-1) * (world_r @ binv_t.unsqueeze(-1)).squeeze(-1) + world_t
    a_m = world_s.unsqueeze(-1).unsqueeze(-1) * r_m

    idx, w = model.skin_t()
    a_v = a_m[:, idx]  # (B, V, K, 3, 3)
    t_v = t_m[:, idx]  # (B, V, K, 3)
    posed = torch.einsum("bvkij,bvj->bvki", a_v, rest) + t_v
    return (w.unsqueeze(-1) * posed).sum(dim=2)


def evaluate_with_joints_tensors(
    model: RigModel,
    beta_s: torch.Tensor,
    beta_f: torch.Tensor,
    beta_k: torch.Tensor | None,
    theta_p: torch.Tensor,
    offsets: torch.Tensor | None = None,
) -> tuple[torch.Tensor, torch.Tensor]:
    """Differentiable evaluation returning (verts (B, V, 3), joints (B, nj, 3))."""
    pt = model.param_transform
    if theta_p.shape[-1] != pt.n_params:
        raise DataError(
            f"evaluate: expected {pt.n_params} model parameters, got {theta_p.shape[-1]}"
        )
    theta_eff = effective_parameters(model, theta_p, beta_k)
    theta_j = theta_eff @ pt.dense_tensor().T
    nj = model.skeleton.n_joints
    r_w, t_w, s_w = fk_tensors(model.skeleton, theta_j.reshape(-1, nj, DOF_PER_JOINT))
    rest = rest_mesh_tensors(model, beta_s, beta_f, theta_eff, offsets)
    return skin_tensors(model, rest, r_w, t_w, s_w), t_w


def evaluate_tensors(
    model: RigModel,
    beta_s: torch.Tensor,
    beta_f: torch.Tensor,
    beta_k: torch.Tensor | None,
    theta_p: torch.Tensor,
    offsets: torch.Tensor | None = None,
) -> torch.Tensor:
    """Full differentiable model evaluation (B, V, 3)."""
    return evaluate_with_joints_tensors(model, beta_s, beta_f, beta_k, theta_p, offsets)[0]


def evaluate_with_correctives(model: RigModel, theta_p: torch.Tensor, overrides: dict) -> torch.Tensor:
    """Posed template (B, V, 3) with substituted corrective leaves.

    Training-time path: identity and expression coefficients are zero, the
    corrective unit weights come from the optimizer's live tensors.
    """
    pt = model.param_transform
    theta_j = theta_p @ pt.dense_tensor().T
    nj = model.skeleton.n_joints
    r_w, t_w, s_w = fk_tensors(model.skeleton, theta_j.reshape(-1, nj, DOF_PER_JOINT))
    B = theta_p.shape[0]
    v = model.num_vertices
    rest = model.template_t().reshape(1, v, 3).expand(B, v, 3)
    rest = rest + _correctives.corrective_offsets_tensors(
        model.correctives, model.skeleton, pt, theta_p, overrides=overrides
    )
    return skin_tensors(model, rest, r_w, t_w, s_w)


# --- single-sample numpy surface ---


def evaluate_rest_mesh(model: RigModel, beta_s, beta_f, theta_p) -> np.ndarray:
    out = rest_mesh_tensors(
        model,
        _as_batch(beta_s, model.identity_basis.size),
        _as_batch(beta_f, model.expression_basis.size),
        _as_batch(theta_p, model.param_transform.n_params),
    )
    return out[0].numpy()


def skin(model: RigModel, rest_verts: np.ndarray, world: list[Transform3]) -> np.ndarray:
    if len(world) != model.skeleton.n_joints:
        raise DataError("skin: world transform count != joint count")
    rest = torch.from_numpy(np.asarray(rest_verts, dtype=np.float64)).unsqueeze(0)
    r = torch.from_numpy(np.stack([t.rotation for t in world])).unsqueeze(0)
    t = torch.from_numpy(np.stack([t.translation for t in world])).unsqueeze(0)
    s = torch.from_numpy(np.array([t.scale for t in world])).unsqueeze(0)
    return skin_tensors(model, rest, r, t, s)[0].numpy()


def evaluate(model: RigModel, beta_s, beta_f, beta_k, theta_p, offsets=None) -> np.ndarray:
    """Posed vertices (V, 3) for one parameter set; None coefficients mean zero."""
    n_s = model.identity_basis.size
    n_f = model.expression_basis.size
    bs = np.zeros(n_s) if beta_s is None else beta_s
    bf = np.zeros(n_f) if beta_f is None else beta_f
    bk = None if beta_k is None else _as_batch(beta_k)
    off = None
    if offsets is not None:
        off = torch.from_numpy(np.asarray(offsets, dtype=np.float64)).reshape(
            1, model.num_vertices, 3
        )
    out = evaluate_tensors(
        model,
        _as_batch(bs, n_s),
        _as_batch(bf, n_f),
        bk,
        _as_batch(theta_p, model.param_transform.n_params),
        off,
    )
    return out[0].numpy()
