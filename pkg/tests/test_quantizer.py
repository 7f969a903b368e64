import math

import numpy as np
import pytest

from qfbsde.quantizer import (
    QuantizerError,
    QuantizerFormatError,
    QuantizerGrid,
    TrainingSchedule,
    cell_means,
    distortion,
    get_quantizer,
    load,
    nearest,
    nearest_indices,
    save,
    scaled_increment,
    train,
)

# Optimal 1-D Lloyd-Max quantizers of N(0, 1): M * D at the exact fixed point,
# computed beforehand from closed-form Gaussian cell integrals.
LLOYD_MAX_M_TIMES_D = {50: 1.6179, 100: 1.6331, 200: 1.6411}

SMALL = TrainingSchedule(n_train=20_000, clvq_steps=5_000, n_weights=50_000)


def test_single_point_is_origin():
    q = train(1, 1, seed=123)
    assert q.points.tolist() == [[0.0]]
    assert q.weights.tolist() == [1.0]


def test_two_points_centroid():
    q = train(1, 2, seed=7)
    # E[Z | Z > 0] = sqrt(2/pi)
    assert np.allclose(np.sort(q.points[:, 0]), [-math.sqrt(2 / math.pi), math.sqrt(2 / math.pi)], atol=2e-3)
    assert np.allclose(q.weights, 0.5, atol=2e-3)


def test_rejects_degenerate_inputs():
    with pytest.raises(ValueError):
        train(1, 0, seed=0)
    with pytest.raises(ValueError):
        train(0, 3, seed=0)
    with pytest.raises(ValueError):
        train(1, 100, seed=0, schedule=TrainingSchedule(n_train=10))


def test_training_is_deterministic():
    a = train(1, 12, seed=3, schedule=SMALL)
    b = train(1, 12, seed=3, schedule=SMALL)
    c = train(1, 12, seed=4, schedule=SMALL)
    assert a == b
    assert a != c


def test_invariants_after_training(quantizer):
    for d, M in ((1, 160), (2, 160)):
        q = quantizer(d, M)
        assert abs(math.fsum(q.weights) - 1) <= 1e-12
        assert np.all(q.weights > 0)
        assert len(np.unique(q.points, axis=0)) == M
        assert np.linalg.norm(q.mean()) < 1e-12


def test_stationarity(quantizer):
    q = quantizer(1, 50)
    means, counts = cell_means(q, samples=400_000, seed=11)
    se = 1.0 / np.sqrt(counts)  # cells are narrow; this bounds the MC error generously
    assert np.all(np.abs(means - q.points)[:, 0] <= np.maximum(5 * se, 1e-3))


def test_distortion_of_single_point():
    q = QuantizerGrid(1, [[0.0]], [1.0], 1.0)
    assert distortion(q, 2, samples=400_000, seed=1) == pytest.approx(1.0, abs=5e-3)


def test_distortion_two_point_closed_form():
    q = train(1, 2, seed=7)
    assert distortion(q, 2, samples=1_000_000, seed=2) == pytest.approx(math.sqrt(1 - 2 / math.pi), rel=0.01)


def test_distortion_deterministic_given_seed(quantizer):
    q = quantizer(1, 50)
    assert distortion(q, 3, samples=10_000, seed=5) == distortion(q, 3, samples=10_000, seed=5)


def test_distortion_rate_ratio(quantizer):
    d50 = distortion(quantizer(1, 50), 2, samples=400_000, seed=3)
    d100 = distortion(quantizer(1, 100), 2, samples=400_000, seed=3)
    assert 0.85 <= (100 * d100) / (50 * d50) <= 1.15


@pytest.mark.parametrize("M", sorted(LLOYD_MAX_M_TIMES_D))
def test_close_to_lloyd_max_optimum(quantizer, M):
    md = M * distortion(quantizer(1, M), 2, samples=1_000_000, seed=9)
    assert md == pytest.approx(LLOYD_MAX_M_TIMES_D[M], rel=0.01)


def test_distortion_monotone_in_M():
    d2 = [train(1, M, seed=0).distortion2 for M in (1, 2, 4, 8, 16)]
    assert all(b <= a for a, b in zip(d2, d2[1:]))


def test_nearest_examples():
    q = QuantizerGrid(1, [[-0.8], [0.8]], [0.5, 0.5], 0.1)
    assert nearest(q, [0.3])[0] == 1
    assert nearest(q, [0.0])[0] == 0  # tie goes to the lowest index
    i, p = nearest(q, [-0.8])
    assert i == 0 and p.tolist() == [-0.8]


def test_nearest_is_argmin(quantizer):
    q = quantizer(2, 160)
    v = np.random.default_rng(0).normal(size=(2000, 2)) * 1.5
    idx = nearest_indices(q, v)
    dist = np.linalg.norm(v[:, None, :] - q.points[None], axis=2)
    assert np.all(dist[np.arange(len(v)), idx] <= dist.min(axis=1))


def test_scaled_increment():
    q = QuantizerGrid(1, [[-1.0], [1.0]], [0.5, 0.5], 0.36)
    w = np.array([0.37])
    assert scaled_increment(q, 1.0, w).tolist() == nearest(q, w)[1].tolist()
    assert scaled_increment(q, 0.01, np.array([0.0])).tolist() == [-0.1]
    rng = np.random.default_rng(1)
    for _ in range(50):
        h = rng.uniform(0.001, 1)
        w = rng.normal(size=1)
        assert np.array_equal(scaled_increment(q, h, w), math.sqrt(h) * scaled_increment(q, 1.0, w / math.sqrt(h)))


def test_quantization_error_scales(quantizer):
    # E|g(dB) - dB| <= C sqrt(h) M^(-1/d): calibrate C at M = 50, check M = 200 and other h
    rng = np.random.default_rng(4)
    z = rng.normal(size=(200_000, 1))

    def mean_err(q, h):
        dB = math.sqrt(h) * z
        return np.mean(np.abs(scaled_increment(q, h, dB) - dB))

    q50, q200 = quantizer(1, 50), quantizer(1, 200)
    C = mean_err(q50, 0.01) / (0.1 / 50)
    for q, M in ((q50, 50), (q200, 200)):
        for h in (0.04, 0.0025):
            assert mean_err(q, h) <= 1.1 * C * math.sqrt(h) / M


def test_save_load_roundtrip(tmp_path, quantizer):
    q = quantizer(2, 160)
    save(q, tmp_path / "q.txt")
    assert load(tmp_path / "q.txt") == q


def _write(path, text):
    path.write_text(text)
    return path


def test_load_rejects_bad_weights(tmp_path):
    p = _write(tmp_path / "w.txt", "1 2\n-1 0.45\n1 0.45\ndistortion2 0.36\n")
    with pytest.raises(QuantizerError, match="sum"):
        load(p)


def test_load_rejects_duplicates(tmp_path):
    p = _write(tmp_path / "d.txt", "1 2\n1 0.5\n1 0.5\ndistortion2 0.36\n")
    with pytest.raises(QuantizerError, match="distinct"):
        load(p)


def test_load_reports_line_and_field(tmp_path):
    p = _write(tmp_path / "m.txt", "1 2\n-1 0.5\n1 abc\ndistortion2 0.36\n")
    with pytest.raises(QuantizerFormatError) as info:
        load(p)
    assert info.value.line == 3
    assert info.value.field == "weight"


def test_cache_hit_returns_identical_grid(tmp_path):
    a = get_quantizer(1, 10, seed=1, schedule=SMALL, cache_dir=tmp_path)
    files = list(tmp_path.iterdir())
    b = get_quantizer(1, 10, seed=1, schedule=SMALL, cache_dir=tmp_path)
    assert a == b and list(tmp_path.iterdir()) == files
