"""Synthetic humanoid rigs with planted ground truth.

Everything a recovery experiment needs is generated from a seed: a mirror
symmetric tube-segment body, a bone-aligned skeleton with prerotations, a
sparse parameter transform with overlapping spine controls, a planted
orthonormal identity basis with decaying scales, a planted expression basis,
and a planted sparse corrective model. Left/right tube vertices are exact
mirror images, so symmetry-aware identity building works on these rigs.
"""

from dataclasses import dataclass, field

import numpy as np

from .body_model import (
    BlendshapeBasis,
    MeshTopology,
    RigModel,
    SkinWeights,
    evaluate,
)
from .core_math import EulerXYZ, matrix_to_euler
from .correctives import CorrectiveConfig, init_corrective_model
from .errors import DataError
from .fitting import ScanTarget
from .identity import RegionMask, compute_symmetry_map
from .skeleton import (
    DOF_PER_JOINT,
    Joint,
    ParameterTransform,
    Skeleton,
    apply_parameter_transform,
    bind_state,
    forward_kinematics,
)


@dataclass
class SyntheticRigSpec:
    """Layout knobs for the generated humanoid."""

    spine_joints: int = 4  # pelvis -> spine1, chest, neck, head
    limb_joints: int = 3  # hip/knee/ankle and shoulder/elbow/wrist
    fingers: bool = False  # adds a 2-joint digit chain + per-hand scale param
    rings_per_segment: int = 12
    ring_vertices: int = 8
    identity_components: int = 16
    expression_components: int = 4
    corrective_channels: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.spine_joints < 2:
            raise DataError("SyntheticRigSpec: need at least 2 spine joints")
        if self.limb_joints < 2:
            raise DataError("SyntheticRigSpec: need at least 2 joints per limb")
        if self.rings_per_segment < 2 or self.ring_vertices < 4:
            raise DataError(
                "SyntheticRigSpec: zero-area segments "
                "(need >=2 rings and >=4 vertices per ring)"
            )
        if self.ring_vertices % 2:
            raise DataError("SyntheticRigSpec: ring_vertices must be even for symmetry")


_SPINE_NAMES = ["spine1", "chest", "neck", "head"]
_LEG_NAMES = ["hip", "knee", "ankle", "toe"]
_ARM_NAMES = ["shoulder", "elbow", "wrist", "palm"]


def _chain_name(base: list[str], i: int, fallback: str) -> str:
    return base[i] if i < len(base) else f"{fallback}{i}"


@dataclass
class _Layout:
    """World-space joint positions and naming, before frame alignment."""

    names: list[str] = field(default_factory=list)
    parents: list[int | None] = field(default_factory=list)
    positions: list[np.ndarray] = field(default_factory=list)
    radii: dict[str, float] = field(default_factory=dict)

    def add(self, name: str, parent: int | None, pos, radius: float) -> int:
        self.names.append(name)
        self.parents.append(parent)
        self.positions.append(np.asarray(pos, dtype=np.float64))
        self.radii[name] = radius
        return len(self.names) - 1


def _build_layout(spec: SyntheticRigSpec) -> _Layout:
    lay = _Layout()
    pelvis = lay.add("pelvis", None, [0.0, 0.95, 0.0], 0.10)

    spine_top = pelvis
    y = 0.95
    for i in range(spec.spine_joints):
        neckish = i >= spec.spine_joints - 2
        y += 0.14 if neckish else 0.20
        name = _chain_name(_SPINE_NAMES, i, "spine")
        # adjacent radii must differ so consecutive tubes never share a ring
        radius = (0.055 if neckish else 0.10) - 0.006 * i
        spine_top = lay.add(name, spine_top, [0.0, y, 0.0], radius)

    # arms hang off the joint two below the head end (the chest by default)
    arm_root = max(pelvis + 1, spine_top - 2)
    arm_y = lay.positions[arm_root][1] + 0.05
    for side, sx in (("l", 1.0), ("r", -1.0)):
        parent = arm_root
        x = 0.22
        for i in range(spec.limb_joints):
            name = f"{side}_{_chain_name(_ARM_NAMES, i, 'arm')}"
            parent = lay.add(name, parent, [sx * x, arm_y, 0.0], 0.05 - 0.008 * i)
            x += 0.28
        if spec.fingers:
            for k, dx in enumerate((0.09, 0.08)):
                x += dx
                name = f"{side}_finger{k + 1}"
                parent = lay.add(name, parent, [sx * x, arm_y, 0.0], 0.016 - 0.003 * k)

    for side, sx in (("l", 1.0), ("r", -1.0)):
        parent = pelvis
        y = 0.89
        for i in range(spec.limb_joints):
            name = f"{side}_{_chain_name(_LEG_NAMES, i, 'leg')}"
            parent = lay.add(name, parent, [sx * 0.12, y, 0.0], 0.07 - 0.01 * i)
            y -= 0.44 if i == 0 else 0.40
    return lay


def _bone_frame(direction: np.ndarray) -> np.ndarray:
    """Right-handed frame with x along the bone; columns [x y z]."""
    a = direction / np.linalg.norm(direction)
    ref = np.array([0.0, 1.0, 0.0])
    if abs(a @ ref) > 0.9:
        ref = np.array([0.0, 0.0, 1.0])
    u = np.cross(ref, a)
    u /= np.linalg.norm(u)
    v = np.cross(a, u)
    return np.stack([a, u, v], axis=1)


def _skeleton_from_layout(lay: _Layout) -> Skeleton:
    n = len(lay.names)
    pos = np.stack(lay.positions)
    children: list[list[int]] = [[] for _ in range(n)]
    for i, p in enumerate(lay.parents):
        if p is not None:
            children[p].append(i)

    frames = np.zeros((n, 3, 3))
    for i in range(n):
        if children[i]:
            d = pos[children[i][0]] - pos[i]
        elif lay.parents[i] is not None:
            d = pos[i] - pos[lay.parents[i]]
        else:
            d = np.array([0.0, 1.0, 0.0])
        frames[i] = _bone_frame(d)

    joints = []
    for i in range(n):
        p = lay.parents[i]
        if p is None:
            offset = pos[i]
            prerot = frames[i]
        else:
            offset = frames[p].T @ (pos[i] - pos[p])
            prerot = frames[p].T @ frames[i]
        e = matrix_to_euler(prerot)
        joints.append(Joint(lay.names[i], p, offset, EulerXYZ(e.rx, e.ry, e.rz)))
    return Skeleton(joints)


def _build_transform(lay: _Layout, spec: SyntheticRigSpec) -> ParameterTransform:
    names: list[str] = []
    rows, cols, weights = [], [], []
    lower, upper = [], []

    def param(name, targets, lo, hi):
        col = len(names)
        names.append(name)
        lower.append(lo)
        upper.append(hi)
        for row, w in targets:
            rows.append(row)
            cols.append(col)
            weights.append(w)
        return col

    pose_cols = []
    for axis, label in enumerate("xyz"):
        pose_cols.append(param(f"root_t{label}", [(axis, 1.0)], -10.0, 10.0))
    for axis, label in enumerate("xyz"):
        pose_cols.append(param(f"root_r{label}", [(3 + axis, 1.0)], -3.2, 3.2))
    for j, name in enumerate(lay.names):
        if j == 0:
            continue
        for axis, label in enumerate("xyz"):
            pose_cols.append(
                param(f"{name}_r{label}", [(DOF_PER_JOINT * j + 3 + axis, 1.0)], -1.9, 1.9)
            )
    # one bend control drives two spine joints with decaying weights
    spine_rows = [
        (DOF_PER_JOINT * j + 3, w)
        for j, w in zip(_named(lay, ["spine1", "chest"]), (0.6, 0.4))
    ]
    if spine_rows:
        pose_cols.append(param("spine_bend", spine_rows, -1.0, 1.0))

    skel_cols = []
    leg = [j for j, n in enumerate(lay.names) if n[2:] in ("knee", "ankle")]
    arm = [j for j, n in enumerate(lay.names) if n[2:] in ("elbow", "wrist")]
    skel_cols.append(
        param("leg_length", [(DOF_PER_JOINT * j, 1.0) for j in leg], -0.3, 0.3)
    )
    skel_cols.append(
        param("arm_length", [(DOF_PER_JOINT * j, 1.0) for j in arm], -0.3, 0.3)
    )
    if spec.fingers:
        for side in ("l", "r"):
            wrist = lay.names.index(f"{side}_wrist")
            skel_cols.append(
                param(f"{side}_hand_scale", [(DOF_PER_JOINT * wrist + 6, 1.0)], -1.0, 1.0)
            )

    return ParameterTransform(
        n_joint_params=DOF_PER_JOINT * len(lay.names),
        rows=np.array(rows),
        cols=np.array(cols),
        weights=np.array(weights),
        pose_cols=np.array(pose_cols),
        skel_cols=np.array(skel_cols),
        lower=np.array(lower),
        upper=np.array(upper),
        names=names,
    )


def _named(lay: _Layout, wanted: list[str]) -> list[int]:
    return [lay.names.index(n) for n in wanted if n in lay.names]


def _tube(start, end, radius, rings, ring_verts):
    """Open tube from start to end; returns (verts, tris, t-param per vertex)."""
    frame = _bone_frame(end - start)
    axis, u, v = frame[:, 0], frame[:, 1], frame[:, 2]
    length = np.linalg.norm(end - start)
    ts = np.linspace(0.0, 1.0, rings)
    # half-step offset keeps samples off the x = 0 mirror plane, so left and
    # right tubes never produce coincident vertices
    ang = (np.arange(ring_verts) + 0.5) * (2 * np.pi / ring_verts)
    verts = np.empty((rings * ring_verts, 3))
    tparam = np.repeat(ts, ring_verts)
    for r, t in enumerate(ts):
        c = start + t * length * axis
        ring = c + radius * (np.outer(np.cos(ang), u) + np.outer(np.sin(ang), v))
        verts[r * ring_verts : (r + 1) * ring_verts] = ring
    tris = []
    for r in range(rings - 1):
        for s in range(ring_verts):
            a = r * ring_verts + s
            b = r * ring_verts + (s + 1) % ring_verts
            c = a + ring_verts
            d = b + ring_verts
            tris.append([a, b, c])
            tris.append([b, d, c])
    return verts, np.array(tris, dtype=np.int64), tparam


def _mirror_tube(verts, tris):
    out = verts.copy()
    out[:, 0] = -out[:, 0]
    return out, tris[:, [0, 2, 1]].copy()


def generate_synthetic_rig(spec: SyntheticRigSpec | None = None) -> RigModel:
    spec = spec or SyntheticRigSpec()
    rng = np.random.default_rng(spec.seed)
    lay = _build_layout(spec)
    skeleton = _skeleton_from_layout(lay)
    pt = _build_transform(lay, spec)
    bind_pos = np.stack([t.translation for t in bind_state(skeleton)])

    verts_parts: list[np.ndarray] = []
    tris_parts: list[np.ndarray] = []
    pairs: list[list[tuple[int, float]]] = []
    base = 0
    left_tubes: dict[str, tuple[np.ndarray, np.ndarray, np.ndarray]] = {}

    for j, name in enumerate(lay.names):
        parent = lay.parents[j]
        if parent is None:
            continue
        if name.startswith("r_"):
            # bitwise mirror of the matching left tube keeps the template
            # exactly symmetric about x = 0
            lverts, ltris, tparam = left_tubes["l_" + name[2:]]
            verts, tris = _mirror_tube(lverts, ltris)
        else:
            verts, tris, tparam = _tube(
                bind_pos[parent],
                bind_pos[j],
                lay.radii[name],
                spec.rings_per_segment,
                spec.ring_vertices,
            )
            if name.startswith("l_"):
                left_tubes[name] = (verts, tris, tparam)

        verts_parts.append(verts)
        tris_parts.append(tris + base)
        # bone (parent -> j) follows the parent; handover to j near the far end
        ramp = 0.7 * np.clip((tparam - 0.5) / 0.5, 0.0, 1.0)
        for w in ramp:
            pairs.append([(parent, 1.0 - w), (j, w)] if w > 0 else [(parent, 1.0)])
        base += len(verts)

    template = np.concatenate(verts_parts)
    topology = MeshTopology(len(template), np.concatenate(tris_parts))
    skin = SkinWeights.from_pairs(pairs, max_influences=2)
    sym = compute_symmetry_map(template).perm

    identity, scales = _planted_identity(
        template, sym, spec.identity_components, rng
    )
    expression = _planted_expression(template, lay, bind_pos, spec, rng)
    correctives = _planted_correctives(topology, template, skin, skeleton, lay, spec, rng)

    return RigModel(
        topology=topology,
        template=template,
        identity_basis=identity,
        expression_basis=expression,
        skin_weights=skin,
        skeleton=skeleton,
        param_transform=pt,
        correctives=correctives,
        skeleton_basis=np.eye(len(pt.skel_cols)),
        identity_scales=scales,
        metadata={"symmetry_pairs": [int(i) for i in sym], "generator_seed": spec.seed},
    )


def _mirror_field(field: np.ndarray, sym: np.ndarray) -> np.ndarray:
    out = field[sym].copy()
    out[:, 0] = -out[:, 0]
    return out


def _planted_identity(template, sym, count, rng):
    """Orthonormal symmetric components with decaying scales."""
    v = len(template)
    fields = np.empty((count, v, 3))
    for i in range(count):
        f = np.zeros((v, 3))
        for _ in range(5):
            center = template[rng.integers(0, v)]
            width = rng.uniform(0.1, 0.35)
            direction = rng.normal(size=3)
            direction /= np.linalg.norm(direction)
            w = np.exp(-np.sum((template - center) ** 2, axis=1) / (2 * width**2))
            f += np.outer(w, direction)
        fields[i] = 0.5 * (f + _mirror_field(f, sym))
    flat = fields.reshape(count, -1)
    q, _ = np.linalg.qr(flat.T)
    comps = np.ascontiguousarray(q.T).reshape(count, v, 3)
    # decaying scales keep truncation error well above mm-level scan noise,
    # so component-count sweeps show a clear trend
    scales = 0.2 * (1.0 + np.arange(count)) ** -0.7
    names = [f"identity_{i}" for i in range(count)]
    return BlendshapeBasis(comps, names), scales


def _planted_expression(template, lay, bind_pos, spec, rng):
    head = _named(lay, ["head"])
    center = bind_pos[head[0]] if head else template.mean(axis=0)
    near = np.exp(-np.sum((template - center) ** 2, axis=1) / (2 * 0.12**2))
    shapes = np.zeros((spec.expression_components, len(template), 3))
    for i in range(spec.expression_components):
        direction = rng.normal(size=3)
        direction /= np.linalg.norm(direction)
        local = np.exp(
            -np.sum((template - template[rng.integers(0, len(template))]) ** 2, axis=1)
            / (2 * 0.08**2)
        )
        shapes[i] = 0.01 * np.outer(near * local, direction)
    names = [f"expr_{i}" for i in range(spec.expression_components)]
    return BlendshapeBasis(shapes, names)


def _planted_correctives(topology, template, skin, skeleton, lay, spec, rng):
    wanted = ["l_elbow", "r_elbow", "l_knee", "r_knee", "chest"]
    joints = np.array(_named(lay, wanted), dtype=np.int64)
    if not len(joints):
        return None
    return init_corrective_model(
        topology,
        template,
        skin,
        skeleton,
        joints=joints,
        config=CorrectiveConfig(hidden=(16, 16), channels=spec.corrective_channels),
        rng=rng,
        decoder_scale=0.05,
    )


def region_masks(rig: RigModel) -> list[RegionMask]:
    """Binary partition-of-unity masks: torso plus one region per limb."""
    dom = rig.skin_weights.dominant_joint()
    names = [j.name for j in rig.skeleton.joints]
    groups: dict[str, set[int]] = {"torso": set()}
    for i, name in enumerate(names):
        if name.startswith("l_"):
            key = "left_arm" if name[2:4] in ("sh", "el", "wr", "pa", "fi", "ar") else "left_leg"
        elif name.startswith("r_"):
            key = "right_arm" if name[2:4] in ("sh", "el", "wr", "pa", "fi", "ar") else "right_leg"
        else:
            key = "torso"
        groups.setdefault(key, set()).add(i)
    masks = []
    for key, members in sorted(groups.items()):
        w = np.isin(dom, sorted(members)).astype(np.float64)
        if w.any():
            masks.append(RegionMask(key, w))
    return masks


def make_benchmark_targets(
    rig: RigModel,
    count: int = 20,
    points_per_target: int = 400,
    noise_mm: float = 1.0,
    seed: int = 0,
    pose_scale: float = 0.25,
):
    """Scan targets with known ground truth for recovery experiments.

    Returns (targets, truths, exclude_mask): per-target ScanTarget with
    surface samples + noise and end-effector keypoints, the generating
    (theta, beta_s) pairs, and an evaluation mask excluding the head region.
    """
    pt = rig.param_transform
    n_identity = rig.identity_basis.size
    rng = np.random.default_rng(seed)
    scales = (
        rig.identity_scales
        if rig.identity_scales is not None
        else np.full(n_identity, 0.01)
    )
    effectors = [
        j.name
        for j in rig.skeleton.joints
        if j.name.endswith(("wrist", "ankle", "head"))
    ]
    tris = rig.topology.triangles

    targets, truths = [], []
    for _ in range(count):
        theta = np.zeros(pt.n_params)
        rot = [c for c in pt.pose_cols if np.isfinite(pt.lower[c]) and pt.lower[c] < -2]
        theta[pt.pose_cols] = rng.normal(scale=pose_scale, size=len(pt.pose_cols))
        theta[rot] = rng.normal(scale=0.1, size=len(rot))  # keep the root near upright
        theta[pt.pose_cols[:3]] = rng.normal(scale=0.05, size=3)
        theta = np.clip(theta, pt.lower + 1e-6, pt.upper - 1e-6)
        beta_s = rng.normal(size=n_identity) * scales

        verts = evaluate(rig, beta_s, np.zeros(rig.expression_basis.size), None, theta)
        tri = rng.integers(0, len(tris), points_per_target)
        bary = rng.dirichlet(np.ones(3), size=points_per_target)
        pts = (verts[tris[tri]] * bary[:, :, None]).sum(axis=1)
        pts = pts + rng.normal(scale=noise_mm / 1000.0, size=pts.shape)

        world = forward_kinematics(rig.skeleton, apply_parameter_transform(pt, theta))
        kp = {
            name: world[rig.skeleton.index_of(name)].translation for name in effectors
        }
        targets.append(ScanTarget(points=pts, keypoints=kp))
        truths.append({"theta": theta, "beta_s": beta_s})

    head_joints = _head_region_joints(rig.skeleton)
    dom = rig.skin_weights.dominant_joint()
    exclude = np.isin(dom, head_joints)
    return targets, truths, exclude


def _head_region_joints(skeleton: Skeleton) -> list[int]:
    return [i for i, j in enumerate(skeleton.joints) if j.name in ("neck", "head")]
