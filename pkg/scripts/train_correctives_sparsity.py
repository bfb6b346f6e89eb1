"""L1 sparsity sweep for pose-corrective training.

Plants a sparse corrective model as the teacher, generates pose/offset
pairs from it, then trains freshly initialized students at several mask
sparsity weights. Reports held-out error improvement over initialization
and the surviving mask support at each weight: the held-out ratio shows
the teacher is actually recovered, the support column shows the penalty
trading accuracy for sparsity.
"""

import argparse
import sys
import time
from pathlib import Path

import numpy as np
import torch

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from rigkit.correctives import (
    CorrectiveConfig,
    CorrectiveTrainConfig,
    corrective_offsets,
    init_corrective_model,
    train_correctives,
)
from rigkit.synthetic import SyntheticRigSpec, generate_synthetic_rig


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--train-poses", type=int, default=500)
    ap.add_argument("--held-poses", type=int, default=100)
    ap.add_argument("--pose-scale", type=float, default=0.4)
    ap.add_argument("--epochs", type=int, default=150)
    ap.add_argument("--batch-size", type=int, default=32)
    ap.add_argument("--lr", type=float, default=2e-3)
    ap.add_argument("--lambdas", default="0,1e-4,1e-2")
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--rig-seed", type=int, default=0)
    args = ap.parse_args()

    torch.set_num_threads(1)
    rig = generate_synthetic_rig(SyntheticRigSpec(seed=args.rig_seed))
    pt, skel = rig.param_transform, rig.skeleton
    teacher = rig.correctives
    rng = np.random.default_rng(args.seed)

    def sample(count):
        th = np.zeros((count, pt.n_params))
        th[:, pt.pose_cols] = rng.normal(scale=args.pose_scale, size=(count, len(pt.pose_cols)))
        return np.clip(th, pt.lower + 1e-6, pt.upper - 1e-6)

    train_th = sample(args.train_poses)
    held_th = sample(args.held_poses)
    train_y = corrective_offsets(teacher, skel, pt, train_th)
    held_y = corrective_offsets(teacher, skel, pt, held_th)

    def fresh_student():
        return init_corrective_model(
            rig.topology,
            rig.template,
            rig.skin_weights,
            skel,
            joints=teacher.joints,
            config=CorrectiveConfig(hidden=(16, 16), channels=teacher.channels),
            rng=np.random.default_rng(99),
        )

    def held_mse(cm):
        pred = corrective_offsets(cm, skel, pt, held_th)
        return float(np.mean(np.sum((pred - held_y) ** 2, axis=-1)))

    init_support = int((fresh_student().masks > 0).sum())
    teacher_support = int((teacher.masks > 0).sum())
    print(f"teacher: {len(teacher.joints)} joints, support {teacher_support}; "
          f"student init support {init_support}")
    print(f"{'lambda':>10} {'held_mse':>12} {'improvement':>12} {'support':>8} {'time_s':>7}")

    for lam in [float(s) for s in args.lambdas.split(",")]:
        rig.correctives = fresh_student()
        err0 = held_mse(rig.correctives)
        cfg = CorrectiveTrainConfig(
            epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
            l1_mask=lam, seed=0,
        )
        t0 = time.perf_counter()
        trained, _ = train_correctives(rig, train_th, train_y, cfg)
        dt = time.perf_counter() - t0
        err = held_mse(trained)
        support = int((trained.masks > 0).sum())
        print(f"{lam:>10.0e} {err:>12.3e} {err0 / err:>11.1f}x {support:>8} {dt:>7.1f}")

    rig.correctives = teacher
    return 0


if __name__ == "__main__":
    sys.exit(main())
