import numpy as np
import pytest

from freescan.geometry import (RigidTransform, compose, corner_points, pixel_grid, random_transform,
                               rotation_about)
from freescan.metrics import (DegenerateVolumeError, MetricsReport, accumulated_error, dice_from_hexahedra,
                              final_drift, frame_error, frame_errors, hexahedra_from_chain,
                              prefix_accumulated_errors, volume_dice)

CORNERS = corner_points(20, 16, 0.5)
CUBE = np.array([(0, 0, 0), (1, 0, 0), (1, 1, 0), (0, 1, 0), (0, 0, 1), (1, 0, 1), (1, 1, 1), (0, 1, 1)], float)


def shift(dx=0.0, dy=0.0, dz=0.0):
    return RigidTransform(np.eye(3), [dx, dy, dz]).as_matrix()


def straight_chain(n, step=1.0):
    return np.stack([shift(dz=k * step) for k in range(n)])


def test_frame_error_examples():
    assert frame_error(np.eye(4), np.eye(4), np.eye(4), CORNERS) == 0.0
    assert frame_error(shift(dx=1.0), np.eye(4), np.eye(4), CORNERS) == pytest.approx(1.0)
    # a 1 mm offset in tool space stays 1 mm whatever the calibration
    calib = random_transform(np.random.default_rng(0), 0.5, 20).as_matrix()
    assert frame_error(shift(dy=1.0), np.eye(4), calib, CORNERS) == pytest.approx(1.0)


def test_frame_error_rotation_oracle():
    # rotation about the image origin: corner distance is 2 r sin(a/2)
    a = 0.1
    rot = RigidTransform(rotation_about([0, 0, 1], a)).as_matrix()
    r = np.linalg.norm(CORNERS[:, :3], axis=1)
    assert frame_error(rot, np.eye(4), np.eye(4), CORNERS) == pytest.approx(np.mean(2 * r * np.sin(a / 2)))


def test_accumulated_error_examples():
    grid = pixel_grid(20, 16, 0.5, 4)
    gt = straight_chain(5)
    assert accumulated_error(gt, gt, np.eye(4), grid) == 0.0
    pred = gt.copy()
    pred[:, 0, 3] += 2.0
    assert accumulated_error(pred, gt, np.eye(4), grid) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        accumulated_error(pred[:3], gt, np.eye(4), grid)


def test_accumulated_error_pools_naive_loop():
    rng = np.random.default_rng(1)
    gt = straight_chain(6)
    pred = np.stack([compose(RigidTransform.from_matrix(g), random_transform(rng, 0.05, 1.0)).as_matrix()
                     for g in gt])
    calib = random_transform(rng, 0.2, 10).as_matrix()
    grid = pixel_grid(20, 16, 0.5, 3)
    total, count = 0.0, 0
    for p, g in zip(pred, gt):
        for x in grid:
            total += np.linalg.norm((p @ calib @ x)[:3] - (g @ calib @ x)[:3])
            count += 1
    assert accumulated_error(pred, gt, calib, grid) == pytest.approx(total / count, rel=1e-12)
    prefix = prefix_accumulated_errors(pred, gt, calib, grid)
    assert prefix[-1] == pytest.approx(total / count, rel=1e-12)
    assert prefix[1] == pytest.approx(accumulated_error(pred[:2], gt[:2], calib, grid), rel=1e-12)


def test_accumulated_error_monotone_in_magnitude():
    gt = straight_chain(5)
    grid = pixel_grid(20, 16, 0.5, 4)
    direction = np.array([0.3, -0.5, 0.8])
    errs = []
    for mag in (0.0, 0.5, 1.0, 2.0):
        pred = gt.copy()
        pred[:, :3, 3] += mag * direction
        errs.append(accumulated_error(pred, gt, np.eye(4), grid))
    assert errs == sorted(errs) and errs[0] == 0


def test_final_drift():
    gt = straight_chain(4)
    pred = gt.copy()
    pred[-1, 1, 3] += 5.0
    assert final_drift(gt, gt, np.eye(4), CORNERS) == 0.0
    assert final_drift(pred, gt, np.eye(4), CORNERS) == pytest.approx(5.0)
    assert final_drift(pred, gt, np.eye(4), CORNERS) == frame_error(pred[-1], gt[-1], np.eye(4), CORNERS)
    with pytest.raises(ValueError):
        final_drift(np.zeros((0, 4, 4)), gt, np.eye(4), CORNERS)


def test_metrics_invariant_to_common_transform():
    rng = np.random.default_rng(2)
    gt = straight_chain(8, 1.5)
    pred = np.stack([compose(RigidTransform.from_matrix(g), random_transform(rng, 0.05, 1.0)).as_matrix()
                     for g in gt])
    q = random_transform(rng).as_matrix()
    calib = np.eye(4)
    grid = pixel_grid(20, 16, 0.5, 4)
    for fn, pts in ((accumulated_error, grid), (final_drift, CORNERS)):
        assert fn(q @ pred, q @ gt, calib, pts) == pytest.approx(fn(pred, gt, calib, pts), rel=1e-9)
    np.testing.assert_allclose(frame_errors(q @ pred, q @ gt, calib, CORNERS), frame_errors(pred, gt, calib, CORNERS))
    d0 = volume_dice(pred, gt, calib, (20, 16, 0.5), 0.5)
    d1 = volume_dice(q @ pred, q @ gt, calib, (20, 16, 0.5), 0.5)
    assert d1 == pytest.approx(d0, abs=0.02)


def test_box_dice_oracle():
    assert dice_from_hexahedra(CUBE[None], CUBE[None], 0.05) == pytest.approx(1.0)
    assert dice_from_hexahedra(CUBE[None], (CUBE + [0.5, 0, 0])[None], 0.05) == pytest.approx(0.5, abs=0.02)
    assert dice_from_hexahedra(CUBE[None], (CUBE + [3, 0, 0])[None], 0.05) == 0.0


def test_box_dice_converges():
    r = rotation_about([1, 2, 3], 0.3)
    a = (CUBE - 0.5) @ r.T
    b = (CUBE + [0.5, 0, 0] - 0.5) @ r.T
    errs = [abs(dice_from_hexahedra(a[None], b[None], 1 / n) - 0.5) for n in (5, 10, 20, 40)]
    assert all(e1 <= e0 for e0, e1 in zip(errs, errs[1:]))
    assert errs[-1] < 1e-3


def test_swept_volume_dice():
    gt = straight_chain(11, 1.0)  # a 9.5 x 7.5 x 10 mm slab
    assert volume_dice(gt, gt, np.eye(4), (20, 16, 0.5), 0.5) == pytest.approx(1.0)
    half = gt.copy()
    half[:, 2, 3] *= 0.5  # half the sweep length
    assert volume_dice(half, gt, np.eye(4), (20, 16, 0.5), 0.25) == pytest.approx(2 * 5 / 15, abs=0.02)
    with pytest.raises(DegenerateVolumeError):
        volume_dice(gt, np.tile(np.eye(4), (11, 1, 1)), np.eye(4), (20, 16, 0.5), 0.5)


def test_hexahedra_shape():
    hexes = hexahedra_from_chain(straight_chain(4), np.eye(4), CORNERS)
    assert hexes.shape == (3, 8, 3)
    with pytest.raises(ValueError):
        hexahedra_from_chain(straight_chain(1), np.eye(4), CORNERS)


def test_report_aggregate_and_round_trip():
    rep = MetricsReport(config_ref="x")
    rep.add("a", frame_err_mm=1.0, acc_err_mm=2.0, dice=None, drift_mm=3.0)
    rep.add("b", frame_err_mm=3.0, acc_err_mm=4.0, dice=0.5, drift_mm=float("nan"))
    agg = rep.aggregate
    assert agg["frame_err_mm"] == {"mean": 2.0, "std": 1.0, "n": 2}
    assert agg["dice"]["n"] == 1 and agg["drift_mm"]["n"] == 1
    back = MetricsReport.from_dict(rep.to_dict())
    assert back.per_scan == rep.per_scan and back.aggregate == agg
    assert [r["scan_id"] for r in rep.csv_rows()] == ["a", "b"]
