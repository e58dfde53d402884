import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import stats

from nucpan import sampler


def test_occupancy_examples():
    assert sampler.occupancy([np.zeros((2, 2), int)], 3).tolist() == [[1, 0, 0]]
    occ = sampler.occupancy([np.array([[0, 0], [1, 2]])], 3)
    assert occ.tolist() == [[0.5, 0.25, 0.25]]


@settings(max_examples=40, deadline=None)
@given(st.lists(arrays(np.int64, (4, 5), elements=st.integers(0, 6)), min_size=1, max_size=5))
def test_occupancy_rows_sum_to_one(maps):
    occ = sampler.occupancy(maps, 7)
    assert np.allclose(occ.sum(axis=1), 1.0)


def test_occupancy_rejects_empty_dataset():
    with pytest.raises(ValueError):
        sampler.occupancy([], 3)


def test_identical_rows_are_uniform():
    occ = np.array([[0.6, 0.4], [0.6, 0.4]])
    assert sampler.sampling_distribution(occ).tolist() == [0.5, 0.5]


def test_single_image():
    assert sampler.sampling_distribution(np.array([[0.3, 0.7]])).tolist() == [1.0]


def test_rare_class_image_by_hand():
    occ = np.array([[0.8, 0.2, 0.0, 0.0],
                    [0.7, 0.3, 0.0, 0.0],
                    [0.7, 0.2, 0.0, 0.1]])
    p = sampler.sampling_distribution(occ)
    # class 2 is absent everywhere and is dropped from the class average
    col0 = np.array([0.8, 0.7, 0.7]) / 2.2
    col1 = np.array([0.2, 0.3, 0.2]) / 0.7
    col3 = np.array([0.0, 0.0, 1.0])
    expect = (col0 + col1 + col3) / 3
    assert np.allclose(p, expect, rtol=0, atol=1e-15)
    assert p[2] > p[0] and p[2] > p[1]


def test_all_zero_rejected():
    with pytest.raises(ValueError):
        sampler.sampling_distribution(np.zeros((3, 4)))


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 8), st.integers(2, 7)),
              elements=st.floats(0, 1)))
def test_distribution_sums_to_one(raw):
    if raw.sum(axis=1).min() == 0:
        return
    occ = raw / raw.sum(axis=1, keepdims=True)
    p = sampler.sampling_distribution(occ)
    assert abs(p.sum() - 1.0) < 1e-9
    assert (p >= 0).all()


@settings(max_examples=80, deadline=None)
@given(arrays(np.float64, (6, 5), elements=st.floats(0.05, 1)), st.integers(0, 5),
       st.floats(0.01, 0.5))
def test_more_rare_class_never_lowers_p(raw, n, bump):
    raw = raw.copy()
    raw[:, 4] *= 0.01          # class 4 is globally rare
    occ = raw / raw.sum(axis=1, keepdims=True)
    before = sampler.sampling_distribution(occ)[n]
    row = occ[n].copy()
    row[4] += bump
    occ2 = occ.copy()
    occ2[n] = row / row.sum()
    after = sampler.sampling_distribution(occ2)[n]
    assert after >= before - 1e-12


def test_draw_degenerate_and_deterministic():
    assert sampler.draw_epoch(np.array([1.0]), 50, 3).tolist() == [0] * 50
    d = np.array([0.2, 0.5, 0.3])
    assert np.array_equal(sampler.draw_epoch(d, 100, 7), sampler.draw_epoch(d, 100, 7))
    assert not np.array_equal(sampler.draw_epoch(d, 100, 7), sampler.draw_epoch(d, 100, 8))


def test_draw_frequencies():
    draws = sampler.draw_epoch(np.array([0.9, 0.1]), 100_000, 0)
    assert abs((draws == 0).mean() - 0.9) < 0.01


def test_draw_chi_square():
    d = np.array([0.05, 0.15, 0.3, 0.5])
    draws = sampler.draw_epoch(d, 20_000, 11)
    observed = np.bincount(draws, minlength=4)
    assert stats.chisquare(observed, d * draws.size).pvalue > 1e-3


def test_csv_layout():
    occ = np.array([[1.0, 0.0], [0.5, 0.5]])
    text = sampler.occupancy_csv(occ, sampler.sampling_distribution(occ), ["a", "b"])
    lines = text.splitlines()
    assert lines[0] == "image_id,X_0,X_1,p_n"
    assert lines[2].startswith("b,0.5,0.5,")
    assert sampler.RNG_ALGORITHM == "PCG64"
