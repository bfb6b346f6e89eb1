"""Gradient-based fitting of rig parameters to point clouds.

The data term is ICP-style: closest-point correspondences on the posed
surface are requeried from a BVH every iteration (warm-started with the
previous iteration's triangles) but held fixed within each gradient
evaluation, so the gradient reaches the mesh through the closest triangle's
barycentric weights. Adam runs over whichever variables the config
frees (pose/skeleton parameter sections, blend coefficients, per-vertex
offsets). Several targets can be fitted in one batched run; Adam is
elementwise, so the batch is exactly equivalent to independent fits.

The reported quality metric (`evaluate_data2model`) is deliberately not the
training loss: it is the mean unsquared scan-to-surface distance in
millimeters, with scan points excluded when their closest triangle touches a
masked-out model vertex.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace

import numpy as np
import torch

from .body_model import MeshTopology, RigModel, evaluate_with_joints_tensors
from .closest_point import TriangleBVH
from .errors import DataError
from .skeleton import Skeleton, limit_penalty_terms

MM = 1000.0


@dataclass
class ScanTarget:
    """A scan to fit: points, optional named keypoints, optional vertex mask."""

    points: np.ndarray  # (M, 3) meters
    keypoints: dict[str, np.ndarray] = field(default_factory=dict)
    exclude_vertices: np.ndarray | None = None  # (V,) bool, True = excluded from metric

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise DataError("ScanTarget: empty point set")
        if not np.all(np.isfinite(self.points)):
            raise DataError("ScanTarget: non-finite scan point")
        self.keypoints = {k: np.asarray(v, dtype=np.float64) for k, v in self.keypoints.items()}
        if self.exclude_vertices is not None:
            self.exclude_vertices = np.asarray(self.exclude_vertices, dtype=bool)


@dataclass
class FitConfig:
    iterations: int = 2500
    lr: float = 0.01
    w_data: float = 1.0
    w_kp: float = 1.0
    w_limit: float = 0.1
    w_offset_l2: float = 1.0
    w_offset_lap: float = 10.0
    free_pose: bool = True
    free_skel: bool = False
    free_identity: bool = True
    free_expression: bool = False
    free_skeleton_coeffs: bool = False
    free_offsets: bool = False
    identity_components: int | None = None  # fit only the first k identity coefficients
    seed: int = 0

    def __post_init__(self):
        if self.iterations < 1:
            raise DataError("FitConfig: iterations must be >= 1")
        if self.lr <= 0:
            raise DataError("FitConfig: learning rate must be positive")
        for name in ("w_data", "w_kp", "w_limit", "w_offset_l2", "w_offset_lap"):
            if getattr(self, name) < 0:
                raise DataError(f"FitConfig: {name} must be non-negative")
        if self.free_skel and self.free_skeleton_coeffs:
            raise DataError(
                "FitConfig: free_skel and free_skeleton_coeffs both drive the "
                "skeleton columns; enable only one"
            )


@dataclass
class FitInit:
    """Optional starting values; anything omitted starts at zero."""

    theta: np.ndarray | None = None
    beta_s: np.ndarray | None = None
    beta_f: np.ndarray | None = None
    beta_k: np.ndarray | None = None
    offsets: np.ndarray | None = None


@dataclass
class FitResult:
    theta: np.ndarray
    beta_s: np.ndarray
    beta_f: np.ndarray
    beta_k: np.ndarray | None
    offsets: np.ndarray | None
    loss_trace: np.ndarray
    breakdown: dict[str, float]
    runtime_s: float
    diverged: bool = False


def point_to_surface_loss(
    points: torch.Tensor | np.ndarray,
    verts: torch.Tensor,
    topology: MeshTopology,
    bvh: TriangleBVH | None = None,
) -> torch.Tensor:
    """Sum of squared point-to-mesh distances, differentiable w.r.t. verts.

    Correspondences come from a fresh closest-point query on the current
    (detached) vertices and are treated as fixed for the gradient.
    """
    if topology.num_triangles == 0:
        raise DataError("point_to_surface_loss: mesh has no triangles")
    points_t = torch.as_tensor(np.asarray(points, dtype=np.float64))
    verts_np = verts.detach().numpy()
    if bvh is None:
        bvh = TriangleBVH(verts_np, topology.triangles)
    else:
        bvh.refit(verts_np)
    _, tri, bary = bvh.query(points_t.numpy())
    corners = torch.from_numpy(topology.triangles[tri])  # (M, 3)
    closest = (verts[corners] * torch.from_numpy(bary).unsqueeze(-1)).sum(dim=1)
    return ((points_t - closest) ** 2).sum()


def keypoint_loss(
    skeleton: Skeleton, joint_positions: torch.Tensor, keypoints: dict[str, np.ndarray]
) -> torch.Tensor:
    """Sum of squared distances between named joints and their targets."""
    total = joint_positions.new_zeros(())
    for name, target in keypoints.items():
        idx = skeleton.index_of(name)  # raises DataError on unknown names
        t = torch.as_tensor(np.asarray(target, dtype=np.float64))
        total = total + ((joint_positions[idx] - t) ** 2).sum()
    return total


def gradient(loss_fn, free_variables: list[torch.Tensor]) -> list[torch.Tensor]:
    """Exact gradient of a loss closure w.r.t. the given leaves.

    A variable the loss does not depend on (or that cannot carry gradients)
    is a configuration error, reported rather than silently zeroed.
    """
    for i, v in enumerate(free_variables):
        if not v.requires_grad:
            raise DataError(f"gradient: free variable {i} does not track gradients")
    loss = loss_fn()
    if not loss.requires_grad:
        raise DataError(
            "gradient: loss is independent of free variables "
            f"{list(range(len(free_variables)))}"
        )
    grads = torch.autograd.grad(loss, free_variables, allow_unused=True)
    missing = [i for i, g in enumerate(grads) if g is None]
    if missing:
        raise DataError(f"gradient: loss is independent of free variables {missing}")
    return list(grads)


def _stack_inits(inits, count, default_len, picker) -> np.ndarray:
    rows = []
    for i in range(count):
        val = picker(inits[i]) if inits and inits[i] else None
        rows.append(np.zeros(default_len) if val is None else np.asarray(val, dtype=np.float64))
    return np.stack(rows)


def _resolve_keypoints(skeleton, targets):
    """Flatten all targets' keypoints into (batch row, joint row, position)."""
    seg, idx, pos = [], [], []
    for i, t in enumerate(targets):
        for name, p in t.keypoints.items():
            seg.append(i)
            idx.append(skeleton.index_of(name))  # raises DataError on unknown names
            pos.append(np.asarray(p, dtype=np.float64).reshape(3))
    return (
        torch.tensor(seg, dtype=torch.int64),
        torch.tensor(idx, dtype=torch.int64),
        torch.from_numpy(np.array(pos, dtype=np.float64).reshape(-1, 3)),
    )


def fit_batch(
    model: RigModel,
    targets: list[ScanTarget],
    cfg: FitConfig,
    inits: list[FitInit] | None = None,
) -> list[FitResult]:
    """Fit every target in one Adam run; equivalent to independent fits.

    Each result carries the parameters of that target's own best-loss
    iterate together with the full per-iteration loss trace.
    """
    start = time.perf_counter()
    b = len(targets)
    if b == 0:
        raise DataError("fit_batch: no targets")
    if inits is not None and len(inits) != b:
        raise DataError("fit_batch: one init per target required")
    pt = model.param_transform
    n_s = model.identity_basis.size
    n_f = model.expression_basis.size

    theta0 = torch.from_numpy(_stack_inits(inits, b, pt.n_params, lambda i: i.theta))
    bs0 = torch.from_numpy(_stack_inits(inits, b, n_s, lambda i: i.beta_s))
    bf0 = torch.from_numpy(_stack_inits(inits, b, n_f, lambda i: i.beta_f))

    theta_mask = torch.zeros(pt.n_params, dtype=torch.float64)
    if cfg.free_pose:
        theta_mask[torch.from_numpy(pt.pose_cols)] = 1.0
    if cfg.free_skel:
        theta_mask[torch.from_numpy(pt.skel_cols)] = 1.0

    bs_mask = torch.zeros(n_s, dtype=torch.float64)
    if cfg.free_identity:
        k = n_s if cfg.identity_components is None else min(cfg.identity_components, n_s)
        bs_mask[:k] = 1.0

    use_bk = cfg.free_skeleton_coeffs or (inits is not None and any(
        i and i.beta_k is not None for i in inits
    ))
    n_k = 0
    if use_bk:
        if model.skeleton_basis is not None:
            n_k = model.skeleton_basis.shape[1]
        elif pt.n_skel:
            n_k = pt.n_skel
        else:
            raise DataError("fit: skeleton coefficients freed but the rig has no skeleton columns")
    bk0 = torch.from_numpy(_stack_inits(inits, b, n_k, lambda i: i.beta_k)) if use_bk else None

    leaves: dict[str, torch.Tensor] = {}
    if cfg.free_pose or cfg.free_skel:
        leaves["theta"] = torch.zeros(b, pt.n_params, dtype=torch.float64, requires_grad=True)
    if cfg.free_identity and n_s:
        leaves["beta_s"] = torch.zeros(b, n_s, dtype=torch.float64, requires_grad=True)
    if cfg.free_expression and n_f:
        leaves["beta_f"] = torch.zeros(b, n_f, dtype=torch.float64, requires_grad=True)
    if cfg.free_skeleton_coeffs:
        leaves["beta_k"] = torch.zeros(b, n_k, dtype=torch.float64, requires_grad=True)
    off0 = None
    if cfg.free_offsets:
        off0 = torch.from_numpy(
            np.stack(
                [
                    np.zeros((model.num_vertices, 3))
                    if inits is None or not inits[i] or inits[i].offsets is None
                    else np.asarray(inits[i].offsets, dtype=np.float64)
                    for i in range(b)
                ]
            )
        )
        leaves["offsets"] = torch.zeros_like(off0, requires_grad=True)
    if not leaves:
        raise DataError("fit: no free variables enabled in FitConfig")

    opt = torch.optim.Adam(leaves.values(), lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)
    lower_t = torch.from_numpy(pt.lower)
    upper_t = torch.from_numpy(pt.upper)
    bvhs = [TriangleBVH(model.template, model.topology.triangles) for _ in range(b)]
    kp_seg, kp_idx, kp_pos = _resolve_keypoints(model.skeleton, targets)
    tris = model.topology.triangles
    nv = model.num_vertices
    nj = len(model.skeleton.joints)

    # correspondence queries and the loss are assembled over all targets at
    # once; `seg` maps each concatenated scan point back to its batch row
    counts = [len(t.points) for t in targets]
    seg = torch.repeat_interleave(torch.arange(b), torch.tensor(counts))
    cat_points = torch.from_numpy(np.concatenate([t.points for t in targets]))
    hint_tris = [np.full(c, -1, dtype=np.int64) for c in counts]

    def current():
        theta = theta0 + leaves["theta"] * theta_mask if "theta" in leaves else theta0
        bs = bs0 + leaves["beta_s"] * bs_mask if "beta_s" in leaves else bs0
        bf = bf0 + leaves["beta_f"] if "beta_f" in leaves else bf0
        bk = bk0
        if "beta_k" in leaves:
            bk = bk0 + leaves["beta_k"]
        off = None
        if cfg.free_offsets:
            off = off0 + leaves["offsets"]
        return theta, bs, bf, bk, off

    traces: list[list[float]] = [[] for _ in range(b)]
    diverged = False
    # returned parameters are the best-loss iterate per element, not the last
    # one: ICP requeries keep gradients (and Adam steps) nonzero at the
    # optimum, so late iterates jitter around it
    best_loss = np.full(b, np.inf)
    best_leaves = {k: v.detach().clone() for k, v in leaves.items()}
    part_names = ["data", "keypoint", "limit"]
    if cfg.free_offsets:
        part_names += ["offset_l2", "offset_laplacian"]
    best_parts = {name: np.zeros(b) for name in part_names}

    for _ in range(cfg.iterations):
        theta, bs, bf, bk, off = current()
        verts, joints = evaluate_with_joints_tensors(model, bs, bf, bk, theta, off)
        verts_np = verts.detach().numpy()

        limit = limit_penalty_terms(theta, lower_t, upper_t)
        if cfg.free_offsets:
            off_l2 = (off**2).sum(dim=(1, 2))
            lap = model.laplacian_t()
            flat = off.permute(1, 0, 2).reshape(model.num_vertices, -1)
            lap_term = (torch.sparse.mm(lap, flat) ** 2).reshape(
                model.num_vertices, b, 3
            ).sum(dim=(0, 2))
        corner_rows = []
        bary_rows = []
        for i in range(b):
            bvhs[i].refit(verts_np[i])
            _, tri, bary = bvhs[i].query(targets[i].points, hints=hint_tris[i])
            hint_tris[i] = tri
            corner_rows.append(tris[tri] + i * nv)
            bary_rows.append(bary)
        corners = torch.from_numpy(np.concatenate(corner_rows))  # (sum M, 3)
        bary_t = torch.from_numpy(np.concatenate(bary_rows))
        flat_verts = verts.reshape(b * nv, 3)
        closest = (flat_verts[corners] * bary_t.unsqueeze(-1)).sum(dim=1)
        res = ((cat_points - closest) ** 2).sum(dim=1)
        data = res.new_zeros(b).index_add_(0, seg, res)

        if len(kp_idx):
            kp_res = ((joints.reshape(b * nj, 3)[kp_seg * nj + kp_idx] - kp_pos) ** 2).sum(dim=1)
            kp = kp_res.new_zeros(b).index_add_(0, kp_seg, kp_res)
        else:
            kp = data.new_zeros(b)

        per_el = cfg.w_data * data + cfg.w_kp * kp + cfg.w_limit * limit
        if cfg.free_offsets:
            per_el = per_el + cfg.w_offset_l2 * off_l2 + cfg.w_offset_lap * lap_term

        total = per_el.sum()
        if not torch.isfinite(total):
            diverged = True
            break
        per_el_np = per_el.detach().numpy()
        cur_parts = {
            "data": data.detach().numpy(),
            "keypoint": kp.detach().numpy(),
            "limit": limit.detach().numpy(),
        }
        if cfg.free_offsets:
            cur_parts["offset_l2"] = off_l2.detach().numpy()
            cur_parts["offset_laplacian"] = lap_term.detach().numpy()
        improved = per_el_np < best_loss
        if improved.any():
            rows = torch.from_numpy(np.nonzero(improved)[0])
            with torch.no_grad():
                for k, v in leaves.items():
                    best_leaves[k][rows] = v.detach()[rows]
            best_loss[improved] = per_el_np[improved]
            for name in part_names:
                best_parts[name][improved] = cur_parts[name][improved]
        for i in range(b):
            traces[i].append(float(per_el_np[i]))
        opt.zero_grad()
        total.backward()
        opt.step()

    with torch.no_grad():
        for k, v in leaves.items():
            v.copy_(best_leaves[k])
    breakdown = [{name: float(best_parts[name][i]) for name in part_names} for i in range(b)]
    theta, bs, bf, bk, off = current()
    runtime = time.perf_counter() - start
    results = []
    for i in range(b):
        results.append(
            FitResult(
                theta=theta[i].detach().numpy(),
                beta_s=bs[i].detach().numpy(),
                beta_f=bf[i].detach().numpy(),
                beta_k=None if bk is None else bk[i].detach().numpy(),
                offsets=None if off is None else off[i].detach().numpy(),
                loss_trace=np.array(traces[i]),
                breakdown=breakdown[i],
                runtime_s=runtime,
                diverged=diverged,
            )
        )
    return results


def fit(
    model: RigModel, target: ScanTarget, cfg: FitConfig, init: FitInit | None = None
) -> FitResult:
    """Fit one scan target; see fit_batch."""
    return fit_batch(model, [target], cfg, None if init is None else [init])[0]


def register_nonrigid(
    model: RigModel, target: ScanTarget, cfg: FitConfig, init: FitInit | None = None
) -> FitResult:
    """Fit with free per-vertex offsets on top of the configured variables."""
    return fit(model, target, replace(cfg, free_offsets=True), init)


def evaluate_data2model(
    points: np.ndarray,
    verts: np.ndarray,
    topology: MeshTopology,
    exclude_vertices: np.ndarray | None = None,
) -> float:
    """Mean unsquared scan-to-surface distance in millimeters.

    A scan point is dropped when its closest triangle touches an excluded
    vertex (scan regions like face or hands that the model should not be
    scored on).
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    bvh = TriangleBVH(np.asarray(verts, dtype=np.float64), topology.triangles)
    d2, tri, _ = bvh.query(points)
    if exclude_vertices is not None:
        excluded_tri = np.asarray(exclude_vertices, dtype=bool)[topology.triangles].any(axis=1)
        valid = ~excluded_tri[tri]
        if not valid.any():
            raise DataError("evaluate_data2model: every scan point fell on masked geometry")
        d2 = d2[valid]
    return float(np.sqrt(d2).mean() * MM)
