import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rpnsd.anchors import (
    BG,
    FG,
    IGNORE,
    ANCHOR_SIZES,
    assign_targets,
    build_anchor_grid,
    iou,
    iou_matrix,
    sample_minibatch,
)
from rpnsd.annotation import Interval


def test_full_size_grid():
    grid = build_anchor_grid(63, ANCHOR_SIZES, 16)
    lengths = grid.anchors[:, 1] - grid.anchors[:, 0]
    assert len(grid) == 567
    assert lengths.min() == 16 and lengths.max() == 1024


def test_single_anchor():
    grid = build_anchor_grid(1, [1], 16)
    np.testing.assert_array_equal(grid.anchors, [[0.0, 16.0]])
    assert grid.intervals()[0].center == 8.0


def test_two_steps_size_two():
    grid = build_anchor_grid(2, [2], 16)
    np.testing.assert_array_equal(grid.anchors, [[-8.0, 24.0], [8.0, 40.0]])


def test_timestep_major_order():
    grid = build_anchor_grid(3, [1, 4], 10)
    centers = grid.anchors.mean(axis=1)
    np.testing.assert_array_equal(centers, [5, 5, 15, 15, 25, 25])
    np.testing.assert_array_equal(np.diff(grid.anchors, axis=1).ravel(), [10, 40] * 3)


@pytest.mark.parametrize("bad", [[], [0, 1], [-2]])
def test_bad_sizes(bad):
    with pytest.raises(ValueError):
        build_anchor_grid(4, bad, 16)


def test_iou_examples():
    assert iou(Interval(3, 9), Interval(3, 9)) == 1.0
    assert iou(Interval(0, 5), Interval(5, 10)) == 0.0
    assert iou(Interval(0, 10), Interval(5, 15)) == pytest.approx(5 / 15, abs=1e-15)


intervals = st.tuples(
    st.floats(-100, 100, allow_nan=False), st.floats(0.01, 50, allow_nan=False)
).map(lambda p: Interval(p[0], p[0] + p[1]))


@given(intervals, intervals, st.floats(-500, 500, allow_nan=False))
def test_iou_properties(a, b, shift):
    v = iou(a, b)
    assert 0.0 <= v <= 1.0
    assert v == pytest.approx(iou(b, a), abs=1e-12)
    moved = iou(Interval(a.start + shift, a.end + shift), Interval(b.start + shift, b.end + shift))
    assert moved == pytest.approx(v, abs=1e-9)
    if a == b:
        assert v == 1.0


def test_iou_matrix_matches_scalar():
    rng = np.random.default_rng(0)
    a = np.sort(rng.uniform(0, 50, size=(9, 2)), axis=1) + [0, 0.1]
    b = np.sort(rng.uniform(0, 50, size=(4, 2)), axis=1) + [0, 0.1]
    m = iou_matrix(a, b)
    for i in range(9):
        for j in range(4):
            assert m[i, j] == pytest.approx(iou(Interval(*a[i]), Interval(*b[j])), abs=1e-12)


def test_truth_equal_to_anchor():
    grid = build_anchor_grid(63, ANCHOR_SIZES, 16)
    k = 10 * 9 + 4
    a = assign_targets(grid, grid.anchors[k : k + 1], [7])
    assert a.labels[k] == FG and a.max_iou[k] == 1.0 and a.speakers[k] == 7


def test_empty_truth_all_background():
    grid = build_anchor_grid(63, ANCHOR_SIZES, 16)
    a = assign_targets(grid, np.zeros((0, 2)))
    assert np.all(a.labels == BG) and len(a.fg_indices) == 0


def _brute_force_labels(anchors, truth, fg_thr=0.7, bg_thr=0.3):
    n, m = len(anchors), len(truth)
    ious = [[iou(Interval(*anchors[i]), Interval(*truth[j])) for j in range(m)] for i in range(n)]
    labels = []
    for i in range(n):
        best = max(ious[i])
        labels.append(FG if best > fg_thr else BG if best < bg_thr else IGNORE)
    for j in range(m):
        col = [ious[i][j] for i in range(n)]
        top = max(col)
        if top > 0:
            labels[col.index(top)] = FG
    matched = [max(range(m), key=lambda j: (ious[i][j], -j)) for i in range(n)]
    return np.array(labels), np.array(matched), ious


@pytest.mark.parametrize("seed", range(25))
def test_assignment_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    grid = build_anchor_grid(63, ANCHOR_SIZES, 16)
    n_truth = rng.integers(1, 6)
    starts = rng.uniform(0, 950, size=n_truth)
    truth = np.stack([starts, starts + rng.uniform(10, 400, size=n_truth)], axis=1)
    spk = rng.integers(0, 3, size=n_truth)
    a = assign_targets(grid, truth, spk)
    labels, matched, ious = _brute_force_labels(grid.anchors, truth)
    np.testing.assert_array_equal(a.labels, labels)
    fg = a.labels == FG
    np.testing.assert_array_equal(a.matched[fg], matched[fg])
    np.testing.assert_array_equal(a.speakers[fg], spk[matched[fg]])
    for i in np.flatnonzero(fg):
        assert ious[i][a.matched[i]] >= max(ious[i]) - 1e-12


def _labels(n_fg, n_bg, n_ignore=0):
    return np.array([FG] * n_fg + [BG] * n_bg + [IGNORE] * n_ignore)


@pytest.mark.parametrize(
    "n_fg,n_bg,expect_fg,expect_bg",
    [(40, 300, 40, 88), (0, 300, 0, 128), (100, 300, 64, 64), (10, 20, 10, 20)],
)
def test_minibatch_counts(n_fg, n_bg, expect_fg, expect_bg):
    labels = _labels(n_fg, n_bg, 50)
    idx = sample_minibatch(labels, 128, 0.5, seed=3)
    assert (labels[idx] == FG).sum() == expect_fg
    assert (labels[idx] == BG).sum() == expect_bg


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 200), st.integers(0, 200), st.integers(0, 50), st.integers(1, 200), st.integers(0, 2**31))
def test_minibatch_never_ignore_never_repeat(n_fg, n_bg, n_ign, total, seed):
    labels = np.random.default_rng(seed).permutation(_labels(n_fg, n_bg, n_ign))
    idx = sample_minibatch(labels, total, 0.5, seed)
    assert len(set(idx.tolist())) == len(idx) <= total
    assert not np.any(labels[idx] == IGNORE)


def test_minibatch_deterministic():
    labels = _labels(40, 300)
    np.testing.assert_array_equal(sample_minibatch(labels, 128, 0.5, 11), sample_minibatch(labels, 128, 0.5, 11))
