import numpy as np
import pytest

from nucpan import imagecore, synthgen, targets


@pytest.fixture(scope="module")
def corpus():
    return synthgen.generate_corpus(1000, synthgen.SceneConfig(size=96), seed=0)


def test_zero_density_is_empty():
    sc = synthgen.generate(synthgen.SceneConfig(size=32, density=0.0, seed=1))
    assert sc.inst.max() == 0 and sc.sem.max() == 0 and sum(sc.counts) == 0
    assert sc.image.shape == (32, 32, 3) and sc.image.dtype == np.float32


def test_deterministic_per_seed():
    a = synthgen.generate(synthgen.SceneConfig(size=48, seed=4))
    b = synthgen.generate(synthgen.SceneConfig(size=48, seed=4))
    c = synthgen.generate(synthgen.SceneConfig(size=48, seed=5))
    assert np.array_equal(a.image, b.image) and np.array_equal(a.inst, b.inst)
    assert not np.array_equal(a.inst, c.inst)


def test_class_shares(corpus):
    counts = np.sum([s.counts for s in corpus], axis=0)
    share = counts / counts.sum() * 100
    assert abs(share[1] - 49.5) <= 2.0
    assert abs(share[4] - 0.68) <= 0.3
    assert np.allclose(share, synthgen.INSTANCE_SHARE, atol=2.0)


def test_mean_areas(corpus):
    areas = [[] for _ in range(6)]
    for s in corpus:
        sizes = np.bincount(s.inst.ravel())
        for k, c in s.classes.items():
            areas[c - 1].append(sizes[k])
    for c in range(6):
        mean = np.mean(areas[c])
        assert abs(mean - synthgen.MEAN_AREA[c]) <= 0.1 * synthgen.MEAN_AREA[c], c


def test_maps_are_consistent(corpus):
    for s in corpus[:100]:
        assert np.array_equal(s.inst > 0, s.sem > 0)
        assert targets.instance_classes(s.inst, s.sem) == s.classes
        for k, c in s.classes.items():
            m = s.inst == k
            # one class per instance, no overlap by construction of a label map
            assert set(np.unique(s.sem[m])) == {c}
            assert imagecore.connected_components(m).max() == 1
            assert np.array_equal(imagecore.fill_holes(m), m)


def test_instances_keep_a_gap():
    from scipy import ndimage

    for seed in range(10):
        sc = synthgen.generate(synthgen.SceneConfig(size=96, seed=seed, min_gap=1))
        for k in sc.classes:
            grown = ndimage.binary_dilation(sc.inst == k, structure=np.ones((3, 3)))
            others = grown & (sc.inst > 0) & (sc.inst != k)
            assert not others.any()


def test_nucleus_pixel_share():
    scenes = synthgen.generate_corpus(40, synthgen.SceneConfig(size=128), seed=3)
    share = np.mean([(s.inst > 0).mean() for s in scenes])
    assert abs(share - synthgen.NUCLEUS_PIXEL_SHARE) < 0.03


def test_simulated_predictions_are_probabilities():
    sc = synthgen.generate(synthgen.SceneConfig(size=64, seed=2))
    sem, tri = synthgen.simulate_predictions(sc.inst, sc.sem, synthgen.NoiseConfig(seed=1))
    assert sem.shape == (64, 64, 7) and tri.shape == (64, 64, 3)
    assert np.allclose(sem.sum(-1), 1, atol=1e-5) and np.allclose(tri.sum(-1), 1, atol=1e-5)
    assert (tri >= 0).all() and (sem >= 0).all()


def test_ellipse_mask_area():
    for area in (20, 80, 200):
        m = synthgen.ellipse_mask(area, 1.5, 0.3)
        assert abs(m.sum() - area) <= 0.15 * area
