"""Joint hierarchy, parameter transform, forward kinematics and joint limits.

A skeleton is an ordered list of joints, parents stored before children.
Each joint carries a constant translation offset relative to its parent and a
constant pre-rotation orienting its local frame (x-axis along the bone).

Per-joint parameters are 7 values ``(tx, ty, tz, rx, ry, rz, s)``; the full
joint parameter vector has length ``7 * n_j``.  The world transform of a
joint composes parent world, offset, translation, pre-rotation, Euler
rotation and uniform scale, in that order.  The scale parameter ``s`` maps to
the multiplicative factor ``2**s`` (s = 0 is identity, symmetric in
log-space) and propagates to children.

Compact model parameters map to joint parameters through a sparse linear
transform, split into pose columns (per-frame) and skeleton-transformation
columns (per-identity constants).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch

from .core_math import EulerXYZ, Transform3, euler_to_matrix, euler_to_matrix_batch
from .errors import DataError

DOF_PER_JOINT = 7


@dataclass(frozen=True)
class Joint:
    name: str
    parent: int | None  # index into the skeleton's joint list, None for the root
    offset: np.ndarray = field(default_factory=lambda: np.zeros(3))
    prerotation: EulerXYZ = field(default_factory=EulerXYZ)


class Skeleton:
    """Immutable joint hierarchy in topological storage order."""

    def __init__(self, joints: list[Joint]):
        if not joints:
            raise DataError("Skeleton: joint list is empty")
        roots = [i for i, j in enumerate(joints) if j.parent is None]
        if len(roots) != 1:
            raise DataError(f"Skeleton: expected exactly one root, found {len(roots)}")
        if roots[0] != 0:
            raise DataError("Skeleton: root must be stored first")
        names = set()
        for i, j in enumerate(joints):
            if j.parent is not None and not (0 <= j.parent < i):
                raise DataError(
                    f"Skeleton: joint {i} ({j.name}) has parent {j.parent}; "
                    "parents must be stored before children"
                )
            if j.name in names:
                raise DataError(f"Skeleton: duplicate joint name {j.name!r}")
            names.add(j.name)
        self.joints = list(joints)
        self._cache: dict = {}

    @property
    def n_joints(self) -> int:
        return len(self.joints)

    @property
    def names(self) -> list[str]:
        return [j.name for j in self.joints]

    def index_of(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise DataError(f"Skeleton: unknown joint name {name!r}") from None

    def children(self, j: int) -> list[int]:
        key = "children"
        if key not in self._cache:
            ch: list[list[int]] = [[] for _ in self.joints]
            for i, joint in enumerate(self.joints):
                if joint.parent is not None:
                    ch[joint.parent].append(i)
            self._cache[key] = ch
        return self._cache[key][j]

    def depth_levels(self) -> list[np.ndarray]:
        """Joint indices grouped by depth; each level depends only on earlier ones."""
        key = "levels"
        if key not in self._cache:
            depth = np.zeros(self.n_joints, dtype=np.int64)
            for i, j in enumerate(self.joints):
                if j.parent is not None:
                    depth[i] = depth[j.parent] + 1
            levels = [np.flatnonzero(depth == d) for d in range(int(depth.max()) + 1)]
            self._cache[key] = levels
        return self._cache[key]

    def tensors(self) -> "SkeletonTensors":
        key = "tensors"
        if key not in self._cache:
            self._cache[key] = SkeletonTensors(self)
        return self._cache[key]


class SkeletonTensors:
    """Constant torch-side mirrors of a skeleton, shared by all FK calls."""

    def __init__(self, skel: Skeleton):
        nj = skel.n_joints
        parent = np.array(
            [-1 if j.parent is None else j.parent for j in skel.joints], dtype=np.int64
        )
        offsets = np.stack([j.offset for j in skel.joints]).astype(np.float64)
        prerot = np.stack([euler_to_matrix(j.prerotation) for j in skel.joints])
        self.n_joints = nj
        self.parent = torch.from_numpy(parent)
        self.offsets = torch.from_numpy(offsets)
        self.prerot = torch.from_numpy(prerot)
        self.levels = [torch.from_numpy(lv) for lv in skel.depth_levels()]
        self.level_parents = [self.parent[lv] for lv in self.levels]


def fk_tensors(
    skel: Skeleton, theta_j: torch.Tensor
) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Batched forward kinematics.

    theta_j: (B, n_j, 7) joint parameters.
    Returns world rotations (B, n_j, 3, 3), translations (B, n_j, 3) and
    scales (B, n_j).  Differentiable w.r.t. theta_j.
    """
    st = skel.tensors()
    B, nj, d = theta_j.shape
    if nj != st.n_joints or d != DOF_PER_JOINT:
        raise DataError(
            f"fk_tensors: expected (B, {st.n_joints}, {DOF_PER_JOINT}) parameters, "
            f"got {tuple(theta_j.shape)}"
        )
    r_loc = st.prerot @ euler_to_matrix_batch(theta_j[..., 3:6])
    t_loc = st.offsets + theta_j[..., 0:3]
    s_loc = torch.exp2(theta_j[..., 6])

    r_w = torch.zeros(B, nj, 3, 3, dtype=theta_j.dtype)
    t_w = torch.zeros(B, nj, 3, dtype=theta_j.dtype)
    s_w = torch.zeros(B, nj, dtype=theta_j.dtype)
    for lvl, par in zip(st.levels, st.level_parents):
        if par[0] < 0:  # root level
            r_w = r_w.index_copy(1, lvl, r_loc[:, lvl])
            t_w = t_w.index_copy(1, lvl, t_loc[:, lvl])
            s_w = s_w.index_copy(1, lvl, s_loc[:, lvl])
            continue
        rp = r_w.index_select(1, par)
        tp = t_w.index_select(1, par)
        sp = s_w.index_select(1, par)
        r_new = rp @ r_loc[:, lvl]
        t_new = sp.unsqueeze(-1) * (rp @ t_loc[:, lvl].unsqueeze(-1)).squeeze(-1) + tp
        s_new = sp * s_loc[:, lvl]
        r_w = r_w.index_copy(1, lvl, r_new)
        t_w = t_w.index_copy(1, lvl, t_new)
        s_w = s_w.index_copy(1, lvl, s_new)
    return r_w, t_w, s_w


def forward_kinematics(skel: Skeleton, theta_j: np.ndarray) -> list[Transform3]:
    """World transform per joint for one joint-parameter vector (7 * n_j,)."""
    theta_j = np.asarray(theta_j, dtype=np.float64)
    if theta_j.shape != (DOF_PER_JOINT * skel.n_joints,):
        raise DataError(
            f"forward_kinematics: expected {DOF_PER_JOINT * skel.n_joints} joint "
            f"parameters, got {theta_j.shape}"
        )
    t = torch.from_numpy(theta_j.reshape(1, skel.n_joints, DOF_PER_JOINT))
    r_w, t_w, s_w = fk_tensors(skel, t)
    r = r_w[0].numpy()
    tt = t_w[0].numpy()
    ss = s_w[0].numpy()
    return [Transform3(r[j], tt[j], float(ss[j])) for j in range(skel.n_joints)]


def zero_joint_params(skel: Skeleton) -> np.ndarray:
    return np.zeros(DOF_PER_JOINT * skel.n_joints)


def bind_state(skel: Skeleton) -> list[Transform3]:
    """World transforms at the zero pose; cached together with inverses."""
    if "bind" not in skel._cache:
        bind = forward_kinematics(skel, zero_joint_params(skel))
        skel._cache["bind"] = bind
        skel._cache["bind_inverse"] = [t.inverse() for t in bind]
    return skel._cache["bind"]


def bind_inverse(skel: Skeleton) -> list[Transform3]:
    bind_state(skel)
    return skel._cache["bind_inverse"]


@dataclass
class ParameterTransform:
    """Sparse linear map from model parameters to joint parameters.

    Stored as (row, col, weight) triplets over a (7*n_j, n_p) matrix. Columns
    are split into disjoint pose and skeleton-transformation sets. Limits are
    per model parameter, +-inf where unconstrained.
    """

    n_joint_params: int
    rows: np.ndarray
    cols: np.ndarray
    weights: np.ndarray
    pose_cols: np.ndarray
    skel_cols: np.ndarray
    lower: np.ndarray
    upper: np.ndarray
    names: list[str] | None = None

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.int64)
        self.cols = np.asarray(self.cols, dtype=np.int64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.pose_cols = np.asarray(self.pose_cols, dtype=np.int64)
        self.skel_cols = np.asarray(self.skel_cols, dtype=np.int64)
        self.lower = np.asarray(self.lower, dtype=np.float64)
        self.upper = np.asarray(self.upper, dtype=np.float64)
        if not (len(self.rows) == len(self.cols) == len(self.weights)):
            raise DataError("ParameterTransform: triplet arrays have unequal lengths")
        n_p = self.n_params
        combined = np.concatenate([self.pose_cols, self.skel_cols])
        if len(np.unique(combined)) != n_p or combined.min(initial=0) < 0 or (
            combined.size and combined.max() >= n_p
        ):
            raise DataError(
                "ParameterTransform: pose and skel column sets must be disjoint "
                "and cover all parameters"
            )
        if self.rows.size:
            if self.rows.min() < 0 or self.rows.max() >= self.n_joint_params:
                raise DataError("ParameterTransform: triplet row out of range")
            if self.cols.min() < 0 or self.cols.max() >= n_p:
                raise DataError("ParameterTransform: triplet col out of range")
        if self.lower.shape != (n_p,) or self.upper.shape != (n_p,):
            raise DataError("ParameterTransform: limit arrays must have length n_p")
        if self.names is not None and len(self.names) != n_p:
            raise DataError("ParameterTransform: names length != n_p")
        self._dense_t: torch.Tensor | None = None

    @property
    def n_params(self) -> int:
        return len(self.pose_cols) + len(self.skel_cols)

    @property
    def n_pose(self) -> int:
        return len(self.pose_cols)

    @property
    def n_skel(self) -> int:
        return len(self.skel_cols)

    def dense(self) -> np.ndarray:
        m = np.zeros((self.n_joint_params, self.n_params))
        np.add.at(m, (self.rows, self.cols), self.weights)
        return m

    def dense_tensor(self) -> torch.Tensor:
        if self._dense_t is None:
            self._dense_t = torch.from_numpy(self.dense())
        return self._dense_t

    def limited(self) -> np.ndarray:
        """Indices of parameters that carry at least one finite bound."""
        return np.flatnonzero(np.isfinite(self.lower) | np.isfinite(self.upper))


def identity_parameter_transform(
    skel: Skeleton, names: list[str] | None = None
) -> ParameterTransform:
    """Passthrough transform: one model parameter per joint DoF, all pose."""
    n = DOF_PER_JOINT * skel.n_joints
    idx = np.arange(n)
    return ParameterTransform(
        n_joint_params=n,
        rows=idx,
        cols=idx,
        weights=np.ones(n),
        pose_cols=idx,
        skel_cols=np.zeros(0, dtype=np.int64),
        lower=np.full(n, -np.inf),
        upper=np.full(n, np.inf),
        names=names,
    )


def apply_parameter_transform(pt: ParameterTransform, theta_p: np.ndarray) -> np.ndarray:
    """Joint parameters as the sparse product T_p @ theta_p."""
    theta_p = np.asarray(theta_p, dtype=np.float64)
    if theta_p.shape != (pt.n_params,):
        raise DataError(
            f"apply_parameter_transform: expected {pt.n_params} parameters, "
            f"got {theta_p.shape}"
        )
    out = np.zeros(pt.n_joint_params)
    np.add.at(out, pt.rows, pt.weights * theta_p[pt.cols])
    return out


def limit_penalty_terms(
    theta_p: torch.Tensor, lower: torch.Tensor, upper: torch.Tensor
) -> torch.Tensor:
    """Squared out-of-range violation summed over parameters; (B,) for (B, n_p)."""
    over = torch.clamp(theta_p - upper, min=0.0)
    under = torch.clamp(lower - theta_p, min=0.0)
    return (over * over + under * under).sum(dim=-1)


def joint_limit_penalty(pt: ParameterTransform, theta_p: np.ndarray) -> float:
    """Sum of squared violations outside [lower, upper]; zero inside the box."""
    theta_p = np.asarray(theta_p, dtype=np.float64)
    if theta_p.shape != (pt.n_params,):
        raise DataError(
            f"joint_limit_penalty: expected {pt.n_params} parameters, got {theta_p.shape}"
        )
    # inf bounds give -inf differences, which the maximum clamps to 0
    over = np.maximum(theta_p - pt.upper, 0.0)
    under = np.maximum(pt.lower - theta_p, 0.0)
    return float(np.sum(over**2 + under**2))
