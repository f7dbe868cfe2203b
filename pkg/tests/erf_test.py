import csv
from itertools import product

import numpy as np
import pytest
from scipy.stats import binomtest

from conftest import TINY_INPUT, tiny_model_config
from gccpm._keypoints import THORAX
from gccpm.data import SynthConfig, generate_dataset
from gccpm.erf import (
    Aggregation,
    ErfMap,
    compare_erf_areas,
    erf_stats,
    estimate_erf,
    window_positions,
    render_erf,
    theoretical_receptive_field,
    write_erf_outputs,
)
from gccpm.model import build_model
from gccpm.model.layers import Conv2d, Pool2d
from gccpm.tensor import ConvSpec, Tensor
from gccpm.trainer import TrainConfig, train


def _image(seed=0, size=TINY_INPUT):
    return np.random.default_rng(seed).integers(0, 256, (size, size, 3), dtype=np.uint8)


class LocalNet:
    """3×3 convolution then 8×8 average pooling: every cell sees a 10 pixel square."""

    def __init__(self):
        self.layers = [
            Conv2d("conv", ConvSpec.same(3, 2, 3), np.random.default_rng(0)),
            Pool2d("pool", "avg", 8),
        ]

    def __call__(self, batch):
        for layer in self.layers:
            batch = layer(batch)
        return [batch]


def _centre_mean(margin):
    """A one-cell map: the mean of the image with ``margin`` pixels cropped from every side."""

    def forward(batch):
        crop = batch.data[:, :, margin:-margin, margin:-margin]
        return [Tensor(crop.mean(axis=(1, 2, 3)).reshape(-1, 1, 1, 1))]

    return forward


def test_window_positions_cover_the_image():
    for size, window, stride in product([11, 32, 64, 65], [1, 5, 11], [1, 3, 4, 16]):
        positions = window_positions(size, window, stride)
        assert positions[0] == 0
        assert positions[-1] == size - window
        assert (np.diff(positions) <= stride).all()
        assert (np.diff(positions) > 0).all()


@pytest.mark.parametrize("size,window,stride", [(10, 11, 4), (32, 11, 0)])
def test_window_positions_errors(size, window, stride):
    with pytest.raises(ValueError):
        window_positions(size, window, stride)


def test_importance_stays_inside_the_receptive_field():
    net = LocalNet()
    field = theoretical_receptive_field(net.layers)
    assert (field.size, field.jump, field.start) == (10, 8, 3.5)
    image = _image(1)
    erf_map = estimate_erf(net, image, 0, window=11, stride=3, aggregation=Aggregation.value_at_peak)
    x0, y0, x1, y1 = field.box(*erf_map.reference_location, image_size=image.shape[:2])
    for r, y in enumerate(erf_map.rows):
        for c, x in enumerate(erf_map.cols):
            overlaps = x <= x1 and x + 10 >= x0 and y <= y1 and y + 10 >= y0
            if not overlaps:
                assert erf_map.grid[r, c] == 0.0
    assert erf_map.grid.max() > 0


def test_seeded_estimate_is_repeatable():
    model = build_model(tiny_model_config(), seed=2)
    image = _image(3)
    a = estimate_erf(model, image, 9, window=11, stride=16, seed=4)
    b = estimate_erf(model, image, 9, window=11, stride=16, seed=4)
    assert a.grid.shape == (5, 5)
    np.testing.assert_array_equal(a.grid, b.grid)
    assert (a.grid >= 0).all()


def test_unknown_keypoint():
    with pytest.raises(ValueError, match="keypoint_index"):
        estimate_erf(_centre_mean(8), _image(), 3)


def _brute_force_area(grid, fraction):
    target = fraction * grid.sum() * (1 - 1e-12)
    rows, cols = grid.shape
    best = rows * cols
    for r0, r1 in product(range(rows), repeat=2):
        for c0, c1 in product(range(cols), repeat=2):
            if r1 >= r0 and c1 >= c0 and grid[r0 : r1 + 1, c0 : c1 + 1].sum() >= target:
                best = min(best, (r1 - r0 + 1) * (c1 - c0 + 1))
    return best


@pytest.mark.parametrize("seed", range(20))
def test_smallest_box_matches_brute_force(seed):
    rng = np.random.default_rng(seed)
    grid = rng.exponential(size=(int(rng.integers(1, 6)), int(rng.integers(1, 7))))
    grid[rng.random(grid.shape) < 0.4] = 0.0
    grid.flat[0] += 0.5
    fraction = float(rng.choice([0.5, 0.8, 0.95, 1.0]))
    erf_map = ErfMap(grid, 1, 1, 0, (0, 0), grid.shape)
    stats = erf_stats(erf_map, fraction)
    r0, c0, r1, c1 = stats.cell_box
    assert (r1 - r0 + 1) * (c1 - c0 + 1) == _brute_force_area(grid, fraction)
    assert stats.mass_fraction >= fraction * (1 - 1e-9)


def test_stats_in_pixels():
    grid = np.zeros((7, 7))
    grid[3, 2] = 1.0
    erf_map = ErfMap(grid, window=11, stride=4, keypoint_index=0, reference_location=(0, 0), image_size=(32, 32))
    stats = erf_stats(erf_map)
    assert stats.cell_box == (3, 2, 3, 2)
    assert stats.pixel_box == (8, 12, 18, 22)
    assert stats.area_fraction == pytest.approx(121 / 1024)
    assert stats.mass_fraction == 1.0


@pytest.mark.parametrize("fraction", [0.0, 1.5])
def test_stats_reject_bad_fractions(fraction):
    erf_map = ErfMap(np.ones((2, 2)), 1, 1, 0, (0, 0), (2, 2))
    with pytest.raises(ValueError, match="mass_fraction"):
        erf_stats(erf_map, fraction)


def test_stats_reject_empty_maps():
    with pytest.raises(ValueError, match="no importance"):
        erf_stats(ErfMap(np.zeros((2, 2)), 1, 1, 0, (0, 0), (2, 2)))


def test_wider_model_wins_the_sign_test():
    images = [_image(seed) for seed in range(8)]
    comparison = compare_erf_areas(_centre_mean(24), _centre_mean(8), images, 0, window=11, stride=8)
    assert comparison.wins == comparison.trials == 8
    assert comparison.significant()
    assert all(b > a for a, b in zip(comparison.areas_a, comparison.areas_b))


def test_identical_models_are_not_significant():
    images = [_image(seed) for seed in range(3)]
    model = _centre_mean(16)
    comparison = compare_erf_areas(model, model, images, 0, window=11, stride=8)
    assert comparison.trials == 0
    assert comparison.p_value == 1.0


def test_outputs_on_disk(tmp_path):
    image = _image(5)
    erf_map = estimate_erf(_centre_mean(16), image, 0, window=11, stride=8)
    stats = erf_stats(erf_map)
    paths = write_erf_outputs(tmp_path / "erf", image, erf_map, stats)
    assert paths["map"].exists()
    assert paths["overlay"].exists()
    with open(paths["csv"], newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["px", "py", "importance"]
    assert len(rows) == 1 + erf_map.grid.size
    rendered = render_erf(erf_map)
    assert rendered.shape == image.shape[:2]
    assert rendered.max() == 255


def _synthetic_images(seed, count):
    cfg = SynthConfig(image_size=TINY_INPUT, limb_thickness=[2, 3])
    return [sample.image for sample in generate_dataset(seed, cfg, count)]


def test_sign_test_on_built_models():
    images = _synthetic_images(30, 20)
    baseline = build_model(tiny_model_config("none"), seed=1)
    u_shaped = build_model(tiny_model_config("u_shaped"), seed=1)
    comparison = compare_erf_areas(baseline, u_shaped, images, THORAX, window=11, stride=16)
    assert len(comparison.areas_a) == len(comparison.areas_b) == 20
    assert all(0.0 < area <= 1.0 for area in comparison.areas_a + comparison.areas_b)
    wins = sum(b > a for a, b in zip(comparison.areas_a, comparison.areas_b))
    trials = sum(b != a for a, b in zip(comparison.areas_a, comparison.areas_b))
    assert (comparison.wins, comparison.trials) == (wins, trials)
    if trials:
        expected = binomtest(wins, trials, 0.5, alternative="greater").pvalue
        assert comparison.p_value == pytest.approx(expected)
    else:
        assert comparison.p_value == 1.0


@pytest.mark.slow
def test_trained_u_shaped_context_widens_the_field():
    dataset = generate_dataset(0, SynthConfig(image_size=TINY_INPUT, limb_thickness=[2, 3]), 32)
    cfg = TrainConfig(
        lr=1e-3,
        batch_size=4,
        max_iters=400,
        eval_interval=100,
        eval_samples=4,
        augmentation="none",
        seed=3,
    )
    baseline, _ = train(tiny_model_config("none"), cfg, dataset)
    u_shaped, _ = train(tiny_model_config("u_shaped"), cfg, dataset)
    images = _synthetic_images(40, 20)
    comparison = compare_erf_areas(baseline, u_shaped, images, THORAX, window=11, stride=8)
    assert comparison.significant(0.05)
