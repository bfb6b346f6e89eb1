"""CLI contract tests: subcommands, determinism, exit codes."""

import json
import os
import subprocess
import sys

import numpy as np
import pytest

from rigkit.body_model import evaluate
from rigkit.cli import main
from rigkit.meshio import load_mesh, save_mesh
from rigkit.rigfile import load_rig
from rigkit.synthetic import region_masks


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    """Directory with a generated rig and a small scan."""
    d = tmp_path_factory.mktemp("cli")
    assert main(["synth", "-o", str(d / "rig.bin"), "--seed", "3"]) == 0
    rig = load_rig(d / "rig.bin")

    rng = np.random.default_rng(5)
    pt = rig.param_transform
    theta = np.zeros(pt.n_params)
    theta[pt.names.index("l_elbow_ry")] = 0.6
    bs = rng.normal(size=rig.identity_basis.size) * rig.identity_scales
    verts = evaluate(rig, bs, np.zeros(rig.expression_basis.size), None, theta)
    tris = rig.topology.triangles
    tri = rng.integers(0, len(tris), 300)
    bary = rng.dirichlet(np.ones(3), size=300)
    pts = (verts[tris[tri]] * bary[:, :, None]).sum(1)
    save_mesh(d / "scan.ply", pts, np.zeros((0, 3), dtype=np.int64))
    (d / "params.json").write_text(
        json.dumps({"theta": theta.tolist(), "beta_s": bs.tolist()})
    )
    return d


def test_pose_zero_params_equals_template(workdir, tmp_path):
    out = tmp_path / "rest.obj"
    assert main(["pose", str(workdir / "rig.bin"), "-o", str(out)]) == 0
    verts, tris = load_mesh(out)
    rig = load_rig(workdir / "rig.bin")
    # OBJ text carries float32-level precision
    np.testing.assert_allclose(verts, rig.template, rtol=1e-7, atol=1e-8)
    np.testing.assert_array_equal(tris, rig.topology.triangles)


def test_pose_with_params_file(workdir, tmp_path):
    out = tmp_path / "posed.obj"
    rc = main(
        ["pose", str(workdir / "rig.bin"), "--params", str(workdir / "params.json"),
         "-o", str(out)]
    )
    assert rc == 0
    verts, _ = load_mesh(out)
    rig = load_rig(workdir / "rig.bin")
    doc = json.loads((workdir / "params.json").read_text())
    expected = evaluate(rig, doc["beta_s"], np.zeros(4), None, np.asarray(doc["theta"]))
    np.testing.assert_allclose(verts, expected, atol=1e-7)


def test_synth_is_byte_deterministic(tmp_path):
    a, b = tmp_path / "a.bin", tmp_path / "b.bin"
    assert main(["synth", "-o", str(a), "--seed", "9"]) == 0
    assert main(["synth", "-o", str(b), "--seed", "9"]) == 0
    assert a.read_bytes() == b.read_bytes()
    c = tmp_path / "c.bin"
    assert main(["synth", "-o", str(c), "--seed", "10"]) == 0
    assert a.read_bytes() != c.read_bytes()


def test_fit_single_iteration_trace(workdir, tmp_path):
    out = tmp_path / "fit.json"
    rc = main(
        ["fit", str(workdir / "rig.bin"), str(workdir / "scan.ply"),
         "--iters", "1", "-o", str(out)]
    )
    assert rc == 0
    assert len(json.loads(out.read_text())["loss_trace"]) == 1


def test_fit_runs_are_byte_identical(workdir, tmp_path):
    outs = []
    for name in ("f1.json", "f2.json"):
        out = tmp_path / name
        rc = main(
            ["fit", str(workdir / "rig.bin"), str(workdir / "scan.ply"),
             "--iters", "25", "--seed", "0", "-o", str(out)]
        )
        assert rc == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_fit_free_tokens_validated(workdir, tmp_path):
    rc = main(
        ["fit", str(workdir / "rig.bin"), str(workdir / "scan.ply"),
         "--free", "pose,vibes", "-o", str(tmp_path / "x.json")]
    )
    assert rc == 1


def test_fit_mask_excludes_all_is_data_error(workdir, tmp_path):
    rig = load_rig(workdir / "rig.bin")
    mask = tmp_path / "mask.json"
    mask.write_text(json.dumps(list(range(rig.num_vertices))))
    rc = main(
        ["fit", str(workdir / "rig.bin"), str(workdir / "scan.ply"),
         "--iters", "1", "--mask", str(mask), "-o", str(tmp_path / "x.json")]
    )
    assert rc == 2


def test_eval_report_shape(workdir, tmp_path):
    scans = tmp_path / "scans"
    scans.mkdir()
    (scans / "scan_0.ply").write_bytes((workdir / "scan.ply").read_bytes())
    out = tmp_path / "report.csv"
    rc = main(
        ["eval", str(workdir / "rig.bin"), str(scans),
         "--components", "2,4", "--iters", "5", "-o", str(out)]
    )
    assert rc == 0
    lines = out.read_text().strip().splitlines()
    assert lines[0] == "components,mean_mm,median_mm,p95_mm,runtime_s"
    assert len(lines) == 3
    assert lines[1].split(",")[0] == "2"
    assert lines[2].split(",")[0] == "4"


def test_train_correctives_roundtrip(workdir, tmp_path):
    from rigkit.correctives import corrective_offsets

    rig = load_rig(workdir / "rig.bin")
    pt = rig.param_transform
    rng = np.random.default_rng(7)
    thetas = np.zeros((48, pt.n_params))
    thetas[:, pt.pose_cols] = rng.normal(scale=0.3, size=(48, len(pt.pose_cols)))
    residuals = np.stack(
        [corrective_offsets(rig.correctives, rig.skeleton, pt, th) for th in thetas]
    )
    dataset = tmp_path / "data"
    dataset.mkdir()
    np.savez(dataset / "dataset.npz", thetas=thetas, residuals=residuals)

    out = tmp_path / "trained.bin"
    rc = main(
        ["train-correctives", str(workdir / "rig.bin"), str(dataset),
         "--epochs", "3", "-o", str(out)]
    )
    assert rc == 0
    trained = load_rig(out)
    assert trained.correctives is not None
    assert not np.array_equal(
        trained.correctives.decoders, rig.correctives.decoders
    )


def test_build_identity_updates_rig(workdir, tmp_path):
    rig = load_rig(workdir / "rig.bin")
    rng = np.random.default_rng(2)
    reg = tmp_path / "registrations"
    reg.mkdir()
    zero_pose = np.zeros(rig.param_transform.n_params)
    for i in range(12):
        bs = rng.normal(size=rig.identity_basis.size) * rig.identity_scales
        verts = evaluate(rig, bs, np.zeros(4), None, zero_pose)
        save_mesh(reg / f"subject_{i:02d}.obj", verts, rig.topology.triangles)
    masks_path = tmp_path / "masks.json"
    masks_path.write_text(
        json.dumps({m.name: m.weights.tolist() for m in region_masks(rig)})
    )

    out = tmp_path / "rig_id.bin"
    rc = main(
        ["build-identity", str(reg), "--base-rig", str(workdir / "rig.bin"),
         "--masks", str(masks_path), "--counts", "2,2,2,2,3",
         "--mirror", "--drop-asymmetric", "-o", str(out)]
    )
    assert rc == 0
    built = load_rig(out)
    assert built.identity_basis.size == 11
    assert built.identity_scales is not None and len(built.identity_scales) == 11
    assert built.skeleton.n_joints == rig.skeleton.n_joints


def test_build_identity_counts_mismatch_is_usage_error(workdir, tmp_path):
    reg = tmp_path / "registrations"
    reg.mkdir()
    rig = load_rig(workdir / "rig.bin")
    save_mesh(reg / "a.obj", rig.template, rig.topology.triangles)
    masks_path = tmp_path / "masks.json"
    masks_path.write_text(
        json.dumps({m.name: m.weights.tolist() for m in region_masks(rig)})
    )
    rc = main(
        ["build-identity", str(reg), "--base-rig", str(workdir / "rig.bin"),
         "--masks", str(masks_path), "--counts", "2,2", "-o", str(tmp_path / "x.bin")]
    )
    assert rc == 1


def test_lod_transfer_cli(workdir, tmp_path):
    coarse_spec = tmp_path / "spec.json"
    coarse_spec.write_text(json.dumps({"rings_per_segment": 6}))
    coarse_rig = tmp_path / "coarse.bin"
    assert main(["synth", "--spec", str(coarse_spec), "-o", str(coarse_rig)]) == 0
    coarse = load_rig(coarse_rig)
    target = tmp_path / "coarse.obj"
    save_mesh(target, coarse.template, coarse.topology.triangles)

    out = tmp_path / "rig_lod.bin"
    rc = main(
        ["lod-transfer", str(workdir / "rig.bin"), str(target), "--smooth",
         "-o", str(out)]
    )
    assert rc == 0
    lod = load_rig(out)
    assert lod.num_vertices == coarse.num_vertices
    assert [e["vertices"] for e in lod.metadata["lods"]] == [1536, 768]


def test_exit_codes(workdir, tmp_path):
    assert main(["fit", str(workdir / "rig.bin")]) == 1  # missing scan arg
    assert main(["pose", str(workdir / "scan.ply"), "-o", str(tmp_path / "x.obj")]) == 2
    assert main(["pose", str(tmp_path / "missing.bin"), "-o", str(tmp_path / "x.obj")]) == 2
    assert main(["synth", "--spec", str(workdir / "params.json"), "-o", str(tmp_path / "x.bin")]) == 1


def test_thread_cap_subprocess(workdir, tmp_path):
    env = dict(os.environ, RIGKIT_THREADS="1", PYTHONPATH=str(workdir.parent))
    r = subprocess.run(
        [sys.executable, "-m", "rigkit", "pose", str(workdir / "rig.bin"),
         "-o", str(tmp_path / "rest.obj")],
        capture_output=True,
        text=True,
        env=env,
    )
    assert r.returncode == 0, r.stderr
    check = subprocess.run(
        [sys.executable, "-c",
         "import rigkit.cli; rigkit.cli._configure_threads(); "
         "import torch; print(torch.get_num_threads())"],
        capture_output=True,
        text=True,
        env=env,
    )
    assert check.stdout.strip() == "1"
