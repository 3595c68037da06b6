import numpy as np
import pytest

from freescan.geometry import ground_truth_relative, random_transform
from freescan.sampling import (TaskSet, chain_schedule, enumerate_pairs, gt_for_tasks, gt_matrices, make_task_set,
                               sample_sequences, valid_starts)


def test_enumerate_pairs():
    assert enumerate_pairs(2) == [(1, 2)]
    assert len(enumerate_pairs(5)) == 10
    assert len(enumerate_pairs(20)) == 190
    with pytest.raises(ValueError):
        enumerate_pairs(1)


def test_task_set_sampling():
    ts = make_task_set(5, (2, 4), 8, 0)
    assert ts.pairs[0] == (2, 4) and ts.n_tasks == 9 and ts.interval == 2
    assert len(set(ts.pairs)) == 9
    assert make_task_set(5, (2, 4), 8, 0) == ts
    full = make_task_set(5, (2, 4), 9, 1)
    assert set(full.pairs) == set(enumerate_pairs(5))
    assert make_task_set(2, (1, 2), 0).pairs == ((1, 2),)
    for bad in [(5, (2, 4), 10), (5, (4, 2), 1), (5, (2, 6), 1)]:
        with pytest.raises(ValueError):
            make_task_set(*bad)


def test_task_set_round_trip():
    ts = make_task_set(6, (2, 5), 5, 3)
    assert TaskSet.from_dict(ts.to_dict()) == ts


def test_triples_enumeration():
    # all pairs of M=4: triples (1,2,3), (1,2,4), (1,3,4), (2,3,4)
    ts = TaskSet(4, (1, 4), tuple(p for p in enumerate_pairs(4) if p != (1, 4)))
    got = {(ts.pairs[a], ts.pairs[b], ts.pairs[c]) for a, b, c in ts.triples}
    want = {((i, k), (k, j), (i, j)) for i in range(1, 5) for k in range(i + 1, 5) for j in range(k + 1, 5)}
    assert got == want and len(got) == 4
    assert len(TaskSet(3, (1, 3), ((1, 2),)).triples) == 0


def test_valid_starts_and_schedule():
    np.testing.assert_array_equal(valid_starts(6, 5), [0, 1])
    with pytest.raises(ValueError):
        valid_starts(4, 5)
    s = chain_schedule(100, 5, 2, 4)
    assert s[0] == 0 and np.all(np.diff(s) == 2) and s[-1] + 5 <= 100 and s[-1] + 2 + 5 > 100
    np.testing.assert_array_equal(chain_schedule(100, 2, 1, 2), np.arange(99))
    s = chain_schedule(100, 20, 6, 10)
    for a, b in zip(s[:-1], s[1:]):
        assert b + 6 - 1 == a + 10 - 1  # i* of the next window is j* of this one
    with pytest.raises(ValueError):
        chain_schedule(3, 5, 2, 4)


def test_gt_matrices_match_relative_oracle(small_scan):
    ts = make_task_set(5, (2, 4), 6, 0)
    poses = small_scan.world_from_tool[3:8]
    got = gt_matrices(poses, ts)
    for t, (i, j) in enumerate(ts.pairs):
        want = ground_truth_relative(small_scan.pose(3 + i - 1), small_scan.pose(3 + j - 1))
        np.testing.assert_allclose(got[t], want.as_matrix(), atol=1e-9)
    batch = gt_matrices(np.stack([poses, poses]), ts)
    assert batch.shape == (2, 7, 4, 4)


def test_sample_sequences(small_scan):
    seqs = sample_sequences(small_scan, 5, (2, 4), n=7, rng=0)
    assert len(seqs) == 7 and all(s.frames.shape == (5, 16, 20) for s in seqs)
    again = sample_sequences(small_scan, 5, (2, 4), n=7, rng=0)
    assert [s.start_index for s in seqs] == [s.start_index for s in again]
    chain = sample_sequences(small_scan, 5, (2, 4), mode="eval")
    assert [s.start_index for s in chain] == list(chain_schedule(30, 5, 2, 4))
    ts = make_task_set(5, (2, 4), 2, 0)
    assert len(gt_for_tasks(chain[0], ts)) == 3
    with pytest.raises(ValueError):
        sample_sequences(small_scan, 5, (2, 4), mode="bogus")
    with pytest.raises(ValueError):
        gt_for_tasks(chain[0], make_task_set(4, (1, 2), 1))
