"""Sparse non-linear pose correctives.

Each corrective unit belongs to one joint and adds a rest-space delta field

    delta_j = relu(A_j) * (P_j @ f_j(z_j))

where z_j stacks the 6D rotation deviations of the joint's local neighborhood
(parent, the joint itself, up to two children; fixed arity, zero padded),
f_j is a small bias-free MLP with leaky-rectifier activations and P_j is a
per-vertex linear decoder. Bias-free layers and the deviation encoding make
the unit vanish identically at the rest pose. Only pose-section parameters
feed the units; skeleton-transformation columns are zeroed first.

Masks are initialized from normalized geodesic distance to the body-part
boundary ring and stay frozen at -0.1 outside the joint's support region, so
the rectifier clamps them to zero there forever.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse.csgraph as csgraph
import torch
import torch.nn.functional as F

from .core_math import euler_to_matrix_batch, rotation_to_6d_batch
from .errors import DataError, NumericError
from .skeleton import DOF_PER_JOINT, ParameterTransform, Skeleton, bind_state

log = logging.getLogger(__name__)

ARITY = 4  # parent, self, two children
EMBED_DIM = 6 * ARITY

_IDENTITY_6D = torch.tensor([1.0, 0.0, 0.0, 0.0, 1.0, 0.0], dtype=torch.float64)


@dataclass
class CorrectiveConfig:
    hidden: tuple[int, int] = (32, 32)
    channels: int = 8
    leak: float = 0.1


def joint_neighborhoods(skeleton: Skeleton, joints: np.ndarray) -> np.ndarray:
    """(J, 4) neighbor joint indices [parent, self, child0, child1], -1 padded."""
    out = np.full((len(joints), ARITY), -1, dtype=np.int64)
    for row, j in enumerate(joints):
        parent = skeleton.joints[j].parent
        out[row, 0] = -1 if parent is None else parent
        out[row, 1] = j
        kids = skeleton.children(j)[:2]
        out[row, 2 : 2 + len(kids)] = kids
    return out


@dataclass
class CorrectiveModel:
    """Trainable state of all corrective units, numpy-canonical."""

    joints: np.ndarray  # (J,) joint index per unit
    neighborhoods: np.ndarray  # (J, 4)
    layers: list[np.ndarray]  # [(J, 24, h1), (J, h1, h2), (J, h2, c)]
    decoders: np.ndarray  # (J, V, 3, c)
    masks: np.ndarray  # (J, V) raw pre-rectifier values
    support: np.ndarray  # (J, V) bool; False entries are frozen at -0.1
    leak: float = 0.1
    _t: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.int64)
        self.neighborhoods = np.asarray(self.neighborhoods, dtype=np.int64)
        self.layers = [np.asarray(w, dtype=np.float64) for w in self.layers]
        self.decoders = np.asarray(self.decoders, dtype=np.float64)
        self.masks = np.asarray(self.masks, dtype=np.float64)
        self.support = np.asarray(self.support, dtype=bool)

    @property
    def num_units(self) -> int:
        return len(self.joints)

    @property
    def channels(self) -> int:
        return self.decoders.shape[-1]

    def validate(self, num_vertices: int, skeleton: Skeleton, pt: ParameterTransform) -> None:
        j = self.num_units
        nj = skeleton.n_joints
        if self.neighborhoods.shape != (j, ARITY):
            raise DataError("CorrectiveModel: neighborhood shape mismatch")
        if self.joints.max(initial=-1) >= nj or self.neighborhoods.max(initial=-1) >= nj:
            raise DataError("CorrectiveModel: joint index out of range")
        if self.masks.shape != (j, num_vertices) or self.support.shape != (j, num_vertices):
            raise DataError("CorrectiveModel: mask shape != (units, vertices)")
        if self.decoders.shape[:2] != (j, num_vertices) or self.decoders.shape[2] != 3:
            raise DataError("CorrectiveModel: decoder shape != (units, vertices, 3, channels)")
        din = EMBED_DIM
        for li, w in enumerate(self.layers):
            if w.shape[0] != j or w.shape[1] != din:
                raise DataError(f"CorrectiveModel: layer {li} shape mismatch")
            din = w.shape[2]
        if din != self.channels:
            raise DataError("CorrectiveModel: final layer width != decoder channels")
        if np.any(self.masks[~self.support] > 0.0):
            raise DataError("CorrectiveModel: positive mask entry outside the support region")

    def torch_views(self) -> dict:
        if not self._t:
            self._t = {
                "layers": [torch.from_numpy(w) for w in self.layers],
                "decoders": torch.from_numpy(self.decoders),
                "masks": torch.from_numpy(self.masks),
                "nbhd": torch.from_numpy(self.neighborhoods),
            }
        return self._t

    def num_active_mask_entries(self) -> int:
        return int(np.sum(self.masks > 0.0))


def pose_rotation_embed(
    cm: CorrectiveModel, theta_j: torch.Tensor
) -> torch.Tensor:
    """6D rotation deviations over each unit's neighborhood, (B, J, 24).

    theta_j: (B, n_joints, 7) joint parameters built from pose columns only.
    Padded neighbors contribute exact zeros, as does the rest pose.
    """
    B, nj, _ = theta_j.shape
    angles = theta_j[..., 3:6]
    angles = torch.cat([angles, angles.new_zeros(B, 1, 3)], dim=1)  # pad slot
    nbhd = cm.torch_views()["nbhd"]
    idx = torch.where(nbhd >= 0, nbhd, nj).reshape(-1)
    gathered = angles.index_select(1, idx).reshape(B, cm.num_units, ARITY, 3)
    six = rotation_to_6d_batch(euler_to_matrix_batch(gathered))
    dev = six - _IDENTITY_6D
    # padded slots already produce identity rotations; force exact zeros anyway
    dev = dev * (nbhd >= 0).to(dev.dtype).unsqueeze(0).unsqueeze(-1)
    return dev.reshape(B, cm.num_units, EMBED_DIM)


def _unit_mlp(cm: CorrectiveModel, embed: torch.Tensor, layers: list[torch.Tensor]) -> torch.Tensor:
    x = embed
    last = len(layers) - 1
    for li, w in enumerate(layers):
        x = torch.einsum("bji,jio->bjo", x, w)
        if li != last:
            x = F.leaky_relu(x, negative_slope=cm.leak)
    return x


def corrective_offsets_tensors(
    cm: CorrectiveModel,
    skeleton: Skeleton,
    pt: ParameterTransform,
    theta_p: torch.Tensor,
    overrides: dict | None = None,
) -> torch.Tensor:
    """Summed corrective delta field (B, V, 3) in rest space.

    ``overrides`` substitutes torch leaves for layers/decoders/masks during
    training; default uses the model's cached views.
    """
    views = cm.torch_views()
    layers = views["layers"]
    decoders = views["decoders"]
    masks = views["masks"]
    if overrides:
        layers = overrides.get("layers", layers)
        decoders = overrides.get("decoders", decoders)
        masks = overrides.get("masks", masks)

    mask = torch.zeros(pt.n_params, dtype=theta_p.dtype)
    mask[torch.from_numpy(pt.pose_cols)] = 1.0
    theta_pose = theta_p * mask
    theta_j = (theta_pose @ pt.dense_tensor().T).reshape(
        theta_p.shape[0], skeleton.n_joints, DOF_PER_JOINT
    )
    embed = pose_rotation_embed(cm, theta_j)
    channels = _unit_mlp(cm, embed, layers)
    gate = F.relu(masks)
    return torch.einsum("bjc,jvxc,jv->bvx", channels, decoders, gate)


def corrective_offsets(
    cm: CorrectiveModel, skeleton: Skeleton, pt: ParameterTransform, theta_p: np.ndarray
) -> np.ndarray:
    t = torch.as_tensor(np.asarray(theta_p, dtype=np.float64))
    squeeze = t.ndim == 1
    if squeeze:
        t = t.unsqueeze(0)
    out = corrective_offsets_tensors(cm, skeleton, pt, t)
    return out[0].numpy() if squeeze else out.numpy()


# --- mask initialization ---


def _part_sets(skin_weights, n_joints: int) -> list[np.ndarray]:
    """Vertices per body part, a part being a joint's dominant-weight set."""
    dom = skin_weights.dominant_joint()
    return [np.flatnonzero(dom == j) for j in range(n_joints)]


def _seg_joints(skeleton: Skeleton, j: int) -> list[int]:
    """Hierarchy neighborhood defining seg(j): the joint, its parent, children."""
    out = [j]
    parent = skeleton.joints[j].parent
    if parent is not None:
        out.append(parent)
    out.extend(skeleton.children(j))
    return out


def _ring_vertices(adj, parts, template, skeleton: Skeleton, j: int) -> np.ndarray:
    """Boundary ring around joint j: its part's vertices edging the parent part.

    Falls back to the part vertex nearest the joint's bind position when no
    such edge exists (root joints, disconnected islands).
    """
    own = parts[j]
    if own.size == 0:
        raise DataError(
            f"ring({skeleton.joints[j].name}): joint dominates no vertices"
        )
    parent = skeleton.joints[j].parent
    if parent is not None and parts[parent].size:
        sub = adj[own][:, parts[parent]]
        ring = own[np.flatnonzero(sub.getnnz(axis=1) > 0)]
        if ring.size:
            return ring
    anchor = bind_state(skeleton)[j].translation
    return own[[int(np.argmin(np.linalg.norm(template[own] - anchor, axis=1)))]]


def geodesic_ring_distance(
    topology, template: np.ndarray, skin_weights, skeleton: Skeleton, j: int
) -> np.ndarray:
    """Normalized geodesic distance from every vertex to ring(j), in [0, 1].

    Dijkstra over the mesh edge graph with Euclidean edge lengths, divided by
    the largest finite distance within seg(j) and clamped; unreachable
    vertices get 1.
    """
    adj = topology.vertex_adjacency(template)
    parts = _part_sets(skin_weights, skeleton.n_joints)
    ring = _ring_vertices(adj, parts, template, skeleton, j)
    d = csgraph.dijkstra(adj, directed=False, indices=ring).min(axis=0)

    seg = np.concatenate([parts[a] for a in _seg_joints(skeleton, j)])
    d_seg = d[seg]
    dmax = d_seg[np.isfinite(d_seg)].max(initial=0.0)
    if dmax > 0:
        d = d / dmax
    return np.clip(np.where(np.isfinite(d), d, 1.0), 0.0, 1.0)


def init_masks(
    topology,
    template: np.ndarray,
    skin_weights,
    skeleton: Skeleton,
    joints: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Geodesic mask init: (1 - d) inside seg(j), 0 outside.

    seg(j) covers the vertices whose dominant joint is j, j's parent or one of
    j's children. Returns (masks (J, V) in [0, 1], support (J, V) bool); the
    trainer freezes non-support entries at -0.1.
    """
    v = topology.num_vertices
    parts = _part_sets(skin_weights, skeleton.n_joints)

    masks = np.zeros((len(joints), v))
    support = np.zeros((len(joints), v), dtype=bool)
    for row, j in enumerate(joints):
        if parts[j].size == 0:
            log.warning("init_masks: joint %s has no dominant vertices", skeleton.joints[j].name)
            continue
        for a in _seg_joints(skeleton, j):
            support[row, parts[a]] = True
        d = geodesic_ring_distance(topology, template, skin_weights, skeleton, j)
        masks[row, support[row]] = 1.0 - d[support[row]]
    return masks, support


def init_corrective_model(
    topology,
    template: np.ndarray,
    skin_weights,
    skeleton: Skeleton,
    joints=None,
    config: CorrectiveConfig | None = None,
    rng: np.random.Generator | None = None,
    decoder_scale: float = 1e-2,
) -> CorrectiveModel:
    """Fresh unit per joint (default: every non-root joint) with geodesic masks."""
    config = config or CorrectiveConfig()
    rng = rng or np.random.default_rng(0)
    if joints is None:
        joints = np.array(
            [i for i, jt in enumerate(skeleton.joints) if jt.parent is not None], dtype=np.int64
        )
    else:
        joints = np.asarray(joints, dtype=np.int64)
    j = len(joints)
    widths = [EMBED_DIM, *config.hidden, config.channels]
    gain = np.sqrt(2.0 / (1.0 + config.leak**2))
    layers = [
        rng.normal(0.0, gain / np.sqrt(din), size=(j, din, dout))
        for din, dout in zip(widths[:-1], widths[1:])
    ]
    decoders = rng.normal(0.0, decoder_scale, size=(j, topology.num_vertices, 3, config.channels))
    masks, support = init_masks(topology, template, skin_weights, skeleton, joints)
    masks[~support] = -0.1  # training convention: frozen strictly below the gate
    return CorrectiveModel(
        joints=joints,
        neighborhoods=joint_neighborhoods(skeleton, joints),
        layers=layers,
        decoders=decoders,
        masks=masks,
        support=support,
        leak=config.leak,
    )


# --- training ---


@dataclass
class CorrectiveTrainConfig:
    epochs: int = 200
    batch_size: int = 32
    lr: float = 1e-3
    l1_mask: float = 1e-4
    seed: int = 0
    targets_are_posed: bool = False


def train_correctives(
    rig,
    poses: np.ndarray,
    targets: np.ndarray,
    config: CorrectiveTrainConfig | None = None,
) -> tuple[CorrectiveModel, dict]:
    """Fit the rig's corrective units to example deformations.

    poses: (N, n_params) model parameters. targets: (N, V, 3); rest-space
    delta fields by default, full posed vertex positions when
    ``targets_are_posed`` (the loss then runs through skinning).
    Returns the trained model and a history dict with the per-epoch loss.
    """
    from . import body_model as _bm  # deferred: body_model imports this module

    config = config or CorrectiveTrainConfig()
    cm = rig.correctives
    if cm is None:
        raise DataError("train_correctives: rig has no corrective units to train")
    poses = np.asarray(poses, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if poses.ndim != 2 or poses.shape[1] != rig.param_transform.n_params:
        raise DataError("train_correctives: poses must be (N, n_params)")
    if targets.shape != (len(poses), rig.num_vertices, 3):
        raise DataError("train_correctives: targets must be (N, V, 3)")

    leaves = {
        "layers": [torch.from_numpy(w.copy()).requires_grad_(True) for w in cm.layers],
        "decoders": torch.from_numpy(cm.decoders.copy()).requires_grad_(True),
        "masks": torch.from_numpy(cm.masks.copy()).requires_grad_(True),
    }
    support = torch.from_numpy(cm.support)
    params = [*leaves["layers"], leaves["decoders"], leaves["masks"]]
    opt = torch.optim.Adam(params, lr=config.lr)

    poses_t = torch.from_numpy(poses)
    targets_t = torch.from_numpy(targets)
    n = len(poses)
    rng = np.random.default_rng(config.seed)
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, config.batch_size):
            sel = torch.from_numpy(order[start : start + config.batch_size])
            theta_b = poses_t[sel]
            opt.zero_grad()
            if config.targets_are_posed:
                pred = _bm.evaluate_with_correctives(rig, theta_b, leaves)
            else:
                pred = corrective_offsets_tensors(
                    cm, rig.skeleton, rig.param_transform, theta_b, overrides=leaves
                )
            # per-pose total squared residual keeps the data term on the same
            # footing as the L1 mask penalty regardless of vertex count
            data = ((pred - targets_t[sel]) ** 2).sum(dim=(-2, -1)).mean()
            loss = data + config.l1_mask * F.relu(leaves["masks"]).sum()
            if not torch.isfinite(loss):
                raise NumericError(f"train_correctives: non-finite loss at epoch {epoch}")
            loss.backward()
            opt.step()
            with torch.no_grad():
                leaves["masks"][~support] = -0.1
            epoch_loss += float(loss.detach()) * len(sel)
        history.append(epoch_loss / n)

    trained = CorrectiveModel(
        joints=cm.joints.copy(),
        neighborhoods=cm.neighborhoods.copy(),
        layers=[w.detach().numpy() for w in leaves["layers"]],
        decoders=leaves["decoders"].detach().numpy(),
        masks=leaves["masks"].detach().numpy(),
        support=cm.support.copy(),
        leak=cm.leak,
    )
    return trained, {"loss": history}
