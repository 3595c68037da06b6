"""Acceptance criteria, one test per criterion, each printing a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v -s``; the lines are also
repeated in the terminal summary.  Criterion 6 trains six models and takes
5 to 12 minutes on a desktop CPU.
"""

import time

import numpy as np
import pytest
import torch
from scipy.stats import spearmanr

from freescan.geometry import (RigidTransform, compose, corner_points, ground_truth_relative, inverse,
                               pose_to_transform, random_transform, rotation_about, transform_to_pose)
from freescan.losses import accumulated_loss, consistency_loss, multi_task_loss
from freescan.metrics import dice_from_hexahedra
from freescan.pipeline import RunConfig, oracle_reconstruction, run_pipeline, simulate, split, train_and_evaluate
from freescan.reconstruct import evaluate_scan
from freescan.sampling import TaskSet, enumerate_pairs, gt_matrices, make_task_set
from freescan.simulator import ProceduralVolume, TrajectorySpec, default_calibration, simulate_scan
from freescan.training import TrainConfig, gradcheck


def _close(a: RigidTransform, b: RigidTransform) -> float:
    return max(np.abs(a.rotation - b.rotation).max(), np.abs(a.translation - b.translation).max())


# -- 1 -------------------------------------------------------------------------


def test_criterion_1_geometry_suite(report_criterion):
    n = 10_000
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst = 0.0
    ident = RigidTransform.identity()
    for _ in range(n):
        a, b, c, q = (random_transform(rng) for _ in range(4))
        pose = np.concatenate([rng.uniform(-np.pi, np.pi, 1), rng.uniform(-1.5, 1.5, 1),
                               rng.uniform(-np.pi, np.pi, 1), rng.uniform(-100, 100, 3)])
        worst = max(
            worst,
            _close(compose(compose(a, b), c), compose(a, compose(b, c))),  # associativity
            _close(compose(a, inverse(a)), ident),  # inverse
            _close(compose(inverse(a), a), ident),
            float(np.abs(transform_to_pose(pose_to_transform(pose)) - pose).max()),  # round trip
            _close(ground_truth_relative(compose(q, a), compose(q, b)), ground_truth_relative(a, b)),  # world frame
        )
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and elapsed < 10.0
    report_criterion(1, ok, f"{n} cases, max deviation {worst:.2e} (tol 1e-9), {elapsed:.1f} s (limit 10 s)")
    assert ok


# -- 2 -------------------------------------------------------------------------


def _full_task_set(M):
    main = (1, M)
    return TaskSet(M, main, tuple(p for p in enumerate_pairs(M) if p != main))


def _loop_d(a, b, calib, corners):
    """Independent oracle: mean over corners and x, y, z of squared differences."""
    total = 0.0
    for p in corners:
        x, y = a @ calib @ p, b @ calib @ p
        total += sum((x[k] - y[k]) ** 2 for k in range(3))
    return total / (3 * len(corners))


def test_criterion_2_loss_identities(report_criterion):
    t0 = time.perf_counter()
    corners = corner_points(80, 64, 0.5)
    rng = np.random.default_rng(7)
    calib = random_transform(rng, 0.3, 20).as_matrix()
    checks = []
    acc_err = 0.0
    for M in (2, 3, 4, 5):
        tasks = _full_task_set(M)
        poses = np.stack([[random_transform(rng, 0.4, 10).as_matrix() for _ in range(M)] for _ in range(3)])
        gts = gt_matrices(poses, tasks)
        exact = np.stack([[transform_to_pose(RigidTransform.from_matrix(g)) for g in b] for b in gts])
        checks.append(multi_task_loss(exact, gts, calib, corners).item() < 1e-18)
        for n in range(exact.size):
            bumped = exact.copy()
            bumped.flat[n] += 1e-4
            checks.append(multi_task_loss(bumped, gts, calib, corners).item() > 0)
        # predictions derived from one (wrong) pose set are compositionally consistent
        fake = np.stack([[random_transform(rng, 0.4, 10).as_matrix() for _ in range(M)] for _ in range(3)])
        consistent = np.stack([[transform_to_pose(RigidTransform.from_matrix(g)) for g in b]
                               for b in gt_matrices(fake, tasks)])
        noisy = exact + rng.normal(0, 0.02, exact.shape)
        if M == 2:
            checks.append(consistency_loss(consistent, tasks, calib, corners) is None)
            checks.append(accumulated_loss(noisy, gts, tasks, calib, corners) is None)
            continue
        checks.append(consistency_loss(consistent, tasks, calib, corners).item() < 1e-18)
        index = {p: k for k, p in enumerate(tasks.pairs)}
        want = []
        for b in range(len(noisy)):
            m = {p: pose_to_transform(noisy[b, k]).as_matrix() for p, k in index.items()}
            for i in range(1, M + 1):
                for k in range(i + 1, M + 1):
                    for j in range(k + 1, M + 1):
                        want.append(_loop_d(gts[b, index[(i, j)]], m[(k, j)] @ m[(i, k)], calib, corners))
        got = accumulated_loss(noisy, gts, tasks, calib, corners).item()
        acc_err = max(acc_err, abs(got - np.mean(want)) / max(1.0, abs(np.mean(want))))
    elapsed = time.perf_counter() - t0
    ok = all(checks) and acc_err <= 1e-12 and elapsed < 10.0
    report_criterion(2, ok, f"{len(checks)} identity checks all hold={all(checks)}, accumulated vs loop oracle "
                            f"{acc_err:.1e} (tol 1e-12), {elapsed:.1f} s (limit 10 s)")
    assert ok


# -- 3 -------------------------------------------------------------------------


def test_criterion_3_gradient_check(report_criterion):
    t0 = time.perf_counter()
    worst = {v: max(gradcheck(v, seed=0, height=8, width=10, M=3, tau=2, hidden=16).values())
             for v in ("feedforward", "recurrent")}
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) <= 1e-4 and elapsed < 300
    report_criterion(3, ok, f"max relative error feedforward {worst['feedforward']:.1e}, recurrent "
                            f"{worst['recurrent']:.1e} (tol 1e-4), {elapsed:.0f} s (limit 300 s)")
    assert ok


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_pipeline_identity(report_criterion):
    t0 = time.perf_counter()
    spec = TrajectorySpec("c_shape", "perpendicular", 120.0, 100)
    scan = simulate_scan(spec, ProceduralVolume(seed=11), default_calibration(0), rng_seed=4)
    results = []
    for tasks in (make_task_set(2, (1, 2), 0), make_task_set(5, (2, 4), 8, 0)):
        ev = evaluate_scan(scan, oracle_reconstruction(scan, tasks), voxel_mm=0.5)
        results.append((ev.frame_err_mm, ev.acc_err_mm, ev.drift_mm, ev.dice))
    elapsed = time.perf_counter() - t0
    max_err = max(max(r[:3]) for r in results)
    min_dice = min(r[3] for r in results)
    ok = max_err <= 1e-6 and min_dice >= 0.999 and elapsed < 120
    report_criterion(4, ok, f"max(frame, acc, drift) {max_err:.1e} mm (tol 1e-6), dice {min_dice:.4f} at voxel "
                            f"0.5 mm (min 0.999), {elapsed:.0f} s (limit 120 s)")
    assert ok


# -- 5 -------------------------------------------------------------------------


def test_criterion_5_dice_oracle(report_criterion):
    cube = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)], float)
    # analytic overlap of two unit cubes offset by half a side: 2 * 0.5 / (1 + 1)
    d20 = dice_from_hexahedra(cube[None], (cube + [0.5, 0, 0])[None], 1 / 20)
    r = rotation_about([1, 2, 3], 0.3)  # rotated so voxel faces do not align with the boxes
    a, b = (cube - 0.5) @ r.T, (cube + [0.5, 0, 0] - 0.5) @ r.T
    errs = [abs(dice_from_hexahedra(a[None], b[None], 1 / n) - 0.5) for n in (5, 10, 20, 40)]
    monotone = all(e1 <= e0 for e0, e1 in zip(errs, errs[1:]))
    ok = abs(d20 - 0.5) <= 0.02 and monotone
    report_criterion(5, ok, f"dice {d20:.4f} at voxel side/20 (0.5 +- 0.02); rotated-box errors under 2x "
                            f"refinement {', '.join(f'{e:.1e}' for e in errs)} monotone={monotone}")
    assert ok


# -- 6 and 8: desk-scale comparison ----------------------------------------------

SEEDS = (0, 1, 2)
TRAIN_COMMON = dict(steps=3000, learning_rate=1e-3, batch_size=32, eval_every=500, pool=(2, 2))
BASELINE = dict(variant="feedforward", M=2, i_star=1, j_star=2, tau=0)
MULTI_TASK = dict(variant="feedforward", M=5, i_star=2, j_star=4, tau=8)


def _desk_config(seed: int, model: dict) -> RunConfig:
    cfg = RunConfig(seed=0)  # fixed dataset and split; the training seed varies
    cfg.train = TrainConfig(**TRAIN_COMMON, **model, seed=seed, task_seed=seed)
    return cfg


@pytest.fixture(scope="module")
def desk_runs():
    torch.set_num_threads(1)
    t0 = time.perf_counter()
    base_cfg = RunConfig(seed=0)
    scans = simulate(base_cfg)
    parts = split(base_cfg, scans)
    runs = {}
    for seed in SEEDS:
        for name, model in (("baseline", BASELINE), ("multi_task", MULTI_TASK)):
            res = train_and_evaluate(_desk_config(seed, model), parts)
            runs[(name, seed)] = res
            agg = res.report.aggregate
            print(f"  seed {seed} {name}: frame {agg['frame_err_mm']['mean']:.3f} mm, "
                  f"acc {agg['acc_err_mm']['mean']:.2f} mm, drift {agg['drift_mm']['mean']:.1f} mm")
    return {"runs": runs, "n_scans": len(scans), "n_test": len(parts["test"]), "seconds": time.perf_counter() - t0,
            "frames": scans[0].frames.shape}


def test_criterion_6_directional_reproduction(desk_runs, report_criterion):
    runs = desk_runs["runs"]
    wins, rows = 0, []
    for seed in SEEDS:
        b = runs[("baseline", seed)].report.aggregate
        m = runs[("multi_task", seed)].report.aggregate
        acc_win = m["acc_err_mm"]["mean"] < b["acc_err_mm"]["mean"]
        frame_win = m["frame_err_mm"]["mean"] < b["frame_err_mm"]["mean"]
        wins += acc_win and frame_win
        rows.append(f"seed {seed}: acc {m['acc_err_mm']['mean']:.2f} vs {b['acc_err_mm']['mean']:.2f} "
                    f"({'win' if acc_win else 'loss'}), frame {m['frame_err_mm']['mean']:.3f} vs "
                    f"{b['frame_err_mm']['mean']:.3f} ({'win' if frame_win else 'loss'})")
    k, h, w = desk_runs["frames"]
    setup_ok = desk_runs["n_scans"] >= 40 and k == 100 and (h, w) == (64, 80)
    ok = wins >= 2 and setup_ok and desk_runs["seconds"] <= 3600
    report_criterion(6, ok, f"multi-task beats baseline on both metrics in {wins}/3 seeds (need 2); "
                            f"{desk_runs['n_scans']} scans, {desk_runs['n_test']} held out, "
                            f"{desk_runs['seconds'] / 60:.1f} min (limit 60); " + "; ".join(rows))
    assert ok


def test_criterion_8_drift_accumulation(desk_runs, report_criterion):
    rows, ok = [], True
    for (name, seed), res in sorted(desk_runs["runs"].items()):
        acc_rho, frame_rho = [], []
        for ev in res.details.values():
            acc_rho.append(spearmanr(np.arange(len(ev.prefix_acc_err)), ev.prefix_acc_err)[0])
            frame_rho.append(spearmanr(np.arange(len(ev.per_window_frame_err)), ev.per_window_frame_err)[0])
        acc_med = float(np.median(acc_rho))
        frame_med = float(np.median(np.abs(frame_rho)))
        ok &= acc_med > 0.8 and frame_med < 0.5
        rows.append(f"{name}/{seed}: rho_acc {acc_med:.2f}, |rho_frame| {frame_med:.2f}")
    report_criterion(8, ok, "median over held-out scans, need rho_acc > 0.8 and |rho_frame| < 0.5; " + "; ".join(rows))
    assert ok


# -- 7 -------------------------------------------------------------------------


def test_criterion_7_determinism(report_criterion):
    cfg = RunConfig.from_dict({
        "seed": 5,
        "simulation": {"n_subjects": 3, "scans_per_subject": 3, "n_frames": 40, "length_range": [40, 60]},
        "train": {"steps": 60, "eval_every": 20, "batch_size": 8, "M": 5, "i_star": 2, "j_star": 4, "tau": 8,
                  "learning_rate": 1e-3, "seed": 5},
        "metrics": {"voxel_mm": 1.0},
    })
    a, b = run_pipeline(cfg), run_pipeline(cfg)
    same_params = all(torch.equal(v, b.result.model.state_dict()[k]) for k, v in a.result.model.state_dict().items())
    same_report = a.report.to_dict() == b.report.to_dict()
    same_chains = all(np.array_equal(x.ref_from_frame, y.ref_from_frame) for x, y in zip(a.recs, b.recs))
    ok = same_params and same_report and same_chains
    report_criterion(7, ok, f"two runs: parameters identical={same_params}, reconstructions identical="
                            f"{same_chains}, metric reports identical={same_report}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v", "-s"]))
