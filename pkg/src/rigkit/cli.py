"""Command-line surface for the rig pipeline.

Heavy imports happen inside the command handlers so the thread cap from
RIGKIT_THREADS is in place before torch and numba initialize.

Exit codes: 0 ok, 1 usage, 2 data error, 3 numeric failure.
"""

import argparse
import csv
import json
import os
import sys
from pathlib import Path

import numpy as np


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _configure_threads():
    cap = os.environ.get("RIGKIT_THREADS")
    if not cap:
        return
    os.environ.setdefault("OMP_NUM_THREADS", cap)
    os.environ.setdefault("NUMBA_NUM_THREADS", cap)
    import torch

    torch.set_num_threads(max(1, int(cap)))


def _load_json(path) -> dict:
    with open(path) as f:
        return json.load(f)


def _dump_json(path, doc) -> None:
    with open(path, "w") as f:
        json.dump(doc, f, sort_keys=True, indent=1)
        f.write("\n")


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError:
        raise UsageError(f"{flag}: expected comma-separated integers, got {text!r}")


def _read_params(rig, spec: str | None):
    """Parameter sets from a JSON file or inline comma-separated pose values."""
    pt = rig.param_transform
    theta = np.zeros(pt.n_params)
    beta_s = np.zeros(rig.identity_basis.size)
    beta_f = np.zeros(rig.expression_basis.size)
    beta_k = None
    if spec is None:
        return theta, beta_s, beta_f, beta_k
    if os.path.exists(spec):
        doc = _load_json(spec)
        for key, target in (("theta", theta), ("beta_s", beta_s), ("beta_f", beta_f)):
            if key in doc:
                vals = np.asarray(doc[key], dtype=np.float64)
                if vals.shape != target.shape:
                    raise UsageError(
                        f"--params: {key} expects {target.shape[0]} values, "
                        f"got {vals.shape[0]}"
                    )
                target[:] = vals
        if "beta_k" in doc:
            beta_k = np.asarray(doc["beta_k"], dtype=np.float64)
        return theta, beta_s, beta_f, beta_k
    try:
        vals = np.array([float(tok) for tok in spec.split(",")])
    except ValueError:
        raise UsageError(f"--params: {spec!r} is neither a file nor inline floats")
    if len(vals) != pt.n_params:
        raise UsageError(f"--params: expected {pt.n_params} values, got {len(vals)}")
    return vals, beta_s, beta_f, beta_k


def _exclude_mask(path: str | None, num_vertices: int):
    if path is None:
        return None
    doc = _load_json(path)
    idx = np.asarray(doc, dtype=np.int64)
    mask = np.zeros(num_vertices, dtype=bool)
    mask[idx] = True
    return mask


_FREE_FLAGS = {
    "pose": "free_pose",
    "shape": "free_identity",
    "offsets": "free_offsets",
    "expression": "free_expression",
    "skel": "free_skel",
    "skeleton-coeffs": "free_skeleton_coeffs",
}


def cmd_pose(args) -> int:
    from .body_model import evaluate
    from .meshio import save_mesh
    from .rigfile import load_rig

    rig = load_rig(args.rig)
    theta, beta_s, beta_f, beta_k = _read_params(rig, args.params)
    verts = evaluate(rig, beta_s, beta_f, beta_k, theta)
    save_mesh(args.output, verts, rig.topology.triangles)
    return 0


def cmd_fit(args) -> int:
    from .fitting import FitConfig, ScanTarget, evaluate_data2model, fit
    from .body_model import evaluate
    from .meshio import load_points
    from .rigfile import load_rig

    rig = load_rig(args.rig)
    points = load_points(args.scan)
    keypoints = {}
    if args.keypoints:
        keypoints = {
            name: np.asarray(pos, dtype=np.float64)
            for name, pos in _load_json(args.keypoints).items()
        }
    exclude = _exclude_mask(args.mask, rig.num_vertices)

    flags = {"free_pose": False, "free_identity": False}
    for token in args.free.split(","):
        token = token.strip()
        if token not in _FREE_FLAGS:
            raise UsageError(
                f"--free: unknown variable {token!r} "
                f"(choose from {', '.join(sorted(_FREE_FLAGS))})"
            )
        flags[_FREE_FLAGS[token]] = True
    cfg = FitConfig(
        iterations=args.iters,
        lr=args.lr,
        identity_components=args.components,
        seed=args.seed,
        **flags,
    )
    res = fit(rig, ScanTarget(points, keypoints=keypoints), cfg)
    verts = evaluate(rig, res.beta_s, res.beta_f, res.beta_k, res.theta, res.offsets)
    doc = {
        "theta": res.theta.tolist(),
        "beta_s": res.beta_s.tolist(),
        "beta_f": res.beta_f.tolist(),
        "beta_k": None if res.beta_k is None else res.beta_k.tolist(),
        "loss_trace": res.loss_trace.tolist(),
        "breakdown": res.breakdown,
        "diverged": res.diverged,
        "data2model_mm": evaluate_data2model(points, verts, rig.topology, exclude),
    }
    if res.offsets is not None:
        doc["offsets"] = res.offsets.tolist()
    _dump_json(args.output, doc)
    if res.diverged:
        print("fit: diverged, kept last finite iterate", file=sys.stderr)
        return 3
    return 0


def cmd_train_correctives(args) -> int:
    from .correctives import CorrectiveTrainConfig, init_corrective_model, train_correctives
    from .rigfile import load_rig, save_rig

    rig = load_rig(args.rig)
    data_path = Path(args.dataset) / "dataset.npz"
    if not data_path.exists():
        raise UsageError(f"train-correctives: {data_path} not found")
    data = np.load(data_path)
    if "thetas" not in data:
        raise UsageError("train-correctives: dataset.npz must contain 'thetas'")
    if "residuals" in data:
        targets, posed = data["residuals"], False
    elif "posed" in data:
        targets, posed = data["posed"], True
    else:
        raise UsageError("train-correctives: dataset.npz needs 'residuals' or 'posed'")

    if rig.correctives is None:
        rig.correctives = init_corrective_model(
            rig.topology,
            rig.template,
            rig.skin_weights,
            rig.skeleton,
            rng=np.random.default_rng(args.seed),
        )
    cfg = CorrectiveTrainConfig(
        epochs=args.epochs,
        l1_mask=args.l1,
        seed=args.seed,
        targets_are_posed=posed,
    )
    trained, history = train_correctives(rig, data["thetas"], targets, cfg)
    rig.correctives = trained
    save_rig(args.output, rig)
    loss = history["loss"]
    print(f"train-correctives: loss {loss[0]:.6g} -> {loss[-1]:.6g}", file=sys.stderr)
    return 0


def cmd_build_identity(args) -> int:
    from .body_model import BlendshapeBasis
    from .identity import RegionMask, ShapeSet, build_identity_space, compute_symmetry_map
    from .meshio import load_mesh
    from .rigfile import load_rig, save_rig

    rig = load_rig(args.base_rig)
    files = sorted(
        p for p in Path(args.registrations).iterdir() if p.suffix in (".obj", ".ply")
    )
    if not files:
        raise UsageError(f"build-identity: no meshes in {args.registrations}")
    shapes = []
    for p in files:
        verts, _ = load_mesh(p)
        if len(verts) != rig.num_vertices:
            raise UsageError(
                f"build-identity: {p.name} has {len(verts)} vertices, "
                f"rig has {rig.num_vertices}"
            )
        shapes.append(verts)
    shape_set = ShapeSet(np.stack(shapes), [p.stem for p in files])

    masks = [
        RegionMask(name, np.asarray(w, dtype=np.float64))
        for name, w in _load_json(args.masks).items()
    ]
    counts = _parse_int_list(args.counts, "--counts")
    if len(counts) != len(masks):
        raise UsageError(
            f"--counts: {len(counts)} values for {len(masks)} mask regions"
        )
    symmetry = (
        compute_symmetry_map(rig.template)
        if args.mirror or args.drop_asymmetric
        else None
    )
    space = build_identity_space(
        shape_set,
        masks,
        counts,
        symmetry=symmetry,
        mirror=args.mirror,
        drop_asymmetric=args.drop_asymmetric,
    )
    names = [f"{tag}_{i}" for i, tag in enumerate(space.regions)]
    rig.template = space.mean
    rig.identity_basis = BlendshapeBasis(space.components, names)
    rig.identity_scales = space.stddevs()
    rig._t.clear()
    rig.validate()
    save_rig(args.output, rig)
    return 0


def cmd_lod_transfer(args) -> int:
    from .lod import transfer_rig
    from .meshio import load_mesh
    from .rigfile import load_rig, save_rig

    rig = load_rig(args.rig)
    verts, tris = load_mesh(args.target)
    out = transfer_rig(rig, verts, tris, smooth=args.smooth, reinit_masks=args.reinit_masks)
    save_rig(args.output, out)
    return 0


def cmd_eval(args) -> int:
    from .body_model import evaluate
    from .fitting import FitConfig, FitInit, ScanTarget, evaluate_data2model, fit_batch
    from .meshio import load_points
    from .rigfile import load_rig

    rig = load_rig(args.rig)
    scan_dir = Path(args.scans)
    files = sorted(
        p
        for p in scan_dir.iterdir()
        if p.suffix in (".obj", ".ply") and not p.stem.endswith("keypoints")
    )
    if not files:
        raise UsageError(f"eval: no scans in {scan_dir}")
    exclude_path = scan_dir / "exclude.json"
    exclude = _exclude_mask(
        str(exclude_path) if exclude_path.exists() else None, rig.num_vertices
    )

    targets = []
    for p in files:
        kp_path = p.with_suffix(".keypoints.json")
        kp = {}
        if kp_path.exists():
            kp = {k: np.asarray(v) for k, v in _load_json(kp_path).items()}
        targets.append(ScanTarget(load_points(p), keypoints=kp))

    rows = []
    inits = None
    for k in _parse_int_list(args.components, "--components"):
        cfg = FitConfig(
            iterations=args.iters, lr=args.lr, identity_components=k, seed=args.seed
        )
        # sweep stages warm-start from the previous stage so each richer
        # basis refines the poorer basis's solution instead of restarting
        results = fit_batch(rig, targets, cfg, inits=inits)
        inits = [FitInit(theta=r.theta, beta_s=r.beta_s) for r in results]
        errs = []
        for target, res in zip(targets, results):
            verts = evaluate(rig, res.beta_s, res.beta_f, res.beta_k, res.theta)
            errs.append(evaluate_data2model(target.points, verts, rig.topology, exclude))
        errs = np.array(errs)
        rows.append(
            {
                "components": k,
                "mean_mm": f"{errs.mean():.6f}",
                "median_mm": f"{np.median(errs):.6f}",
                "p95_mm": f"{np.percentile(errs, 95):.6f}",
                "runtime_s": f"{results[0].runtime_s:.3f}",
            }
        )

    with open(args.output, "w", newline="") as f:
        writer = csv.DictWriter(
            f, fieldnames=["components", "mean_mm", "median_mm", "p95_mm", "runtime_s"]
        )
        writer.writeheader()
        writer.writerows(rows)
    return 0


def cmd_synth(args) -> int:
    from .rigfile import save_rig
    from .synthetic import SyntheticRigSpec, generate_synthetic_rig

    doc = _load_json(args.spec) if args.spec else {}
    if args.seed is not None:
        doc["seed"] = args.seed
    try:
        spec = SyntheticRigSpec(**doc)
    except TypeError as e:
        raise UsageError(f"synth: bad spec field ({e})")
    save_rig(args.output, generate_synthetic_rig(spec))
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="rigkit", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pose", help="evaluate the model and export a mesh")
    p.add_argument("rig")
    p.add_argument("--params", help="JSON file or inline comma-separated pose values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_pose)

    p = sub.add_parser("fit", help="fit the model to a scan")
    p.add_argument("rig")
    p.add_argument("scan")
    p.add_argument("--keypoints", help="JSON {joint name: [x, y, z]}")
    p.add_argument("--mask", help="JSON list of vertex indices excluded from eval")
    p.add_argument("--free", default="pose,shape")
    p.add_argument("--iters", type=int, default=2500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--components", type=int, default=None)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("train-correctives", help="train pose correctives on a dataset")
    p.add_argument("rig")
    p.add_argument("dataset", help="directory containing dataset.npz")
    p.add_argument("--l1", type=float, default=1e-4)
    p.add_argument("--epochs", type=int, default=200)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_train_correctives)

    p = sub.add_parser("build-identity", help="masked PCA identity space from registrations")
    p.add_argument("registrations", help="directory of registered neutral meshes")
    p.add_argument("--base-rig", required=True, help="rig supplying skeleton and topology")
    p.add_argument("--masks", required=True, help="JSON {region: per-vertex weights}")
    p.add_argument("--counts", required=True, help="components per region, e.g. 20,20,5")
    p.add_argument("--mirror", action="store_true")
    p.add_argument("--drop-asymmetric", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_build_identity)

    p = sub.add_parser("lod-transfer", help="rebuild a rig on a new mesh resolution")
    p.add_argument("rig")
    p.add_argument("target", help="target template mesh (.obj/.ply)")
    p.add_argument("--smooth", action="store_true")
    p.add_argument("--reinit-masks", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_lod_transfer)

    p = sub.add_parser("eval", help="components-vs-error report over a scan directory")
    p.add_argument("rig")
    p.add_argument("scans")
    p.add_argument("--components", default="2,4,8,16")
    p.add_argument("--iters", type=int, default=2500)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic rig with planted ground truth")
    p.add_argument("--spec", help="JSON file of generator options")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("-o", "--output", required=True)
    p.set_defaults(func=cmd_synth)

    return parser


def main(argv=None) -> int:
    _configure_threads()
    from .errors import DataError, NumericError

    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as e:
        print(f"rigkit: usage error: {e}", file=sys.stderr)
        return 1
    except DataError as e:
        print(f"rigkit: data error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"rigkit: numeric failure: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"rigkit: {e}", file=sys.stderr)
        return 2
