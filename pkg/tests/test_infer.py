import numpy as np
import pytest
import torch

from awnet import infer
from awnet.data import patch_origins
from awnet.model import ModelConfig, build_model
from awnet.synthetic import make_fundus

from oracles import covering_oracle


@pytest.fixture(scope="module")
def small_model():
    torch.manual_seed(0)
    return build_model(ModelConfig(levels=3, base_channels=4)).eval()


def test_matches_covering_oracle(small_model):
    img = np.random.default_rng(0).random((37, 41))
    got = infer.predict_array(small_model, img, stride=6, size=16)
    np.testing.assert_allclose(got, covering_oracle(small_model, img, 16, 6), atol=1e-6, rtol=0)


def test_non_overlapping_tiling(small_model):
    img = np.random.default_rng(1).random((32, 48)).astype(np.float32)
    got, cov = infer.predict_array(small_model, img, stride=16, size=16, return_coverage=True)
    assert np.all(cov == 1)
    with torch.no_grad():
        tile = small_model(torch.from_numpy(img[None, None, 16:32, 32:48].copy()))[0, 0].numpy()
    np.testing.assert_allclose(got[16:32, 32:48], tile, atol=1e-6)


@pytest.mark.parametrize("batch_size", [1, 7, 64, 65, 300])
def test_batch_size_invariant(small_model, batch_size):
    img = np.random.default_rng(2).random((70, 66))
    ref = infer.predict_array(small_model, img, stride=4, size=16, batch_size=1024)
    np.testing.assert_array_equal(infer.predict_array(small_model, img, 4, 16, batch_size), ref)


def test_coverage_counts():
    model = build_model().eval()
    prob = infer.predict_image(model, np.zeros((96, 96), np.float32), stride=5)
    assert prob.values.shape == (96, 96)
    origins = patch_origins(*prob.coverage.shape)
    for i, j in [(0, 0), (48, 48), (50, 50), (52, 61), (95, 95)]:
        brute = sum(1 for r, c in origins if r <= i < r + 48 and c <= j < c + 48)
        assert prob.coverage[i, j] == brute
    # 48 is not a multiple of 5: interior pixels see 9 or 10 origins per axis
    assert prob.coverage.max() == 100
    assert prob.coverage[50, 50] == 100
    assert prob.coverage[48, 48] == 81
    assert prob.coverage[0, 0] == 1


def test_overlap_fraction():
    assert infer.overlap_fraction(48, 5) == pytest.approx(43 / 48)
    assert round(100 * infer.overlap_fraction(48, 5), 1) == 89.6
    assert infer.overlap_fraction(48, 48) == 0.0


def test_predict_sample_keeps_fov(small_model):
    s = make_fundus((64, 64), seed=0)
    pm = infer.predict_image(small_model, s, stride=16, stats=(80.0, 50.0))
    np.testing.assert_array_equal(pm.fov_mask, s.fov_mask)
    assert pm.values.min() > 0 and pm.values.max() < 1


def test_training_flag_restored(small_model):
    small_model.train()
    infer.predict_array(small_model, np.zeros((16, 16)), stride=16, size=16)
    assert small_model.training
    small_model.eval()


class TestBinarize:
    def test_tie_goes_to_vessel(self):
        np.testing.assert_array_equal(infer.binarize(np.array([0.49, 0.5, 0.51])), [0, 1, 1])

    def test_fov_masks_out(self):
        vals = np.full((2, 2), 0.9)
        fov = np.array([[1, 0], [0, 1]])
        np.testing.assert_array_equal(infer.binarize(vals, 0.5, fov), fov)

    def test_probability_map(self):
        pm = infer.ProbabilityMap(np.full((2, 2), 0.7), np.array([[1, 1], [0, 1]], np.uint8), "x")
        assert infer.binarize(pm).sum() == 3

    @pytest.mark.parametrize("t", [0.0, 1.0, -0.1])
    def test_threshold_range(self, t):
        with pytest.raises(ValueError):
            infer.binarize(np.zeros(3), t)
