import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from robustlens.data import LabeledDataset
from robustlens.spectral import (
    HeatmapGrid,
    canonical_index,
    center_shift,
    dct2,
    dct_matrix,
    dft2,
    fourier_basis,
    fourier_sensitivity,
    frequency_split,
    heatmap_percentiles,
    idct2,
    idft2,
    perturbation_energy_spectrum,
    read_grid_csv,
    to_pgm_bytes,
    write_grid_csv,
    write_grid_pgm,
)


def brute_dft2(x):
    h, w = x.shape
    out = np.zeros((h, w), dtype=complex)
    for u in range(h):
        for v in range(w):
            for r in range(h):
                for c in range(w):
                    out[u, v] += x[r, c] * np.exp(-2j * np.pi * (u * r / h + v * c / w))
    return out


def brute_dct(x):
    n = len(x)
    out = np.zeros(n)
    for k in range(n):
        a = math.sqrt(1 / n) if k == 0 else math.sqrt(2 / n)
        out[k] = a * sum(x[i] * math.cos(math.pi * (2 * i + 1) * k / (2 * n)) for i in range(n))
    return out


def test_dft_matches_loop_oracle():
    x = np.random.default_rng(0).normal(size=(4, 5))
    np.testing.assert_allclose(dft2(x), brute_dft2(x), atol=1e-12)
    np.testing.assert_allclose(idft2(dft2(x)).real, x, atol=1e-12)


def test_dct_matrix_matches_loop_and_is_orthonormal():
    x = np.random.default_rng(1).normal(size=7)
    np.testing.assert_allclose(dct_matrix(7) @ x, brute_dct(x), atol=1e-12)
    np.testing.assert_allclose(dct_matrix(7) @ dct_matrix(7).T, np.eye(7), atol=1e-12)


def test_dct_of_constant_is_dc_only():
    c = 0.3
    coeffs = dct2(np.full((8, 8), c))
    assert coeffs[0, 0] == pytest.approx(c * 8, abs=1e-12)
    coeffs[0, 0] = 0
    assert np.abs(coeffs).max() < 1e-12


def test_dct_roundtrip_and_parseval_on_random_inputs():
    rng = np.random.default_rng(2)
    for _ in range(100):
        x = rng.uniform(-1, 1, (32, 32))
        c = dct2(x)
        assert np.abs(idct2(c) - x).max() < 1e-9
        assert abs((c**2).sum() - (x**2).sum()) / (x**2).sum() < 1e-9


@given(st.integers(1, 6), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=30, deadline=None)
def test_dct_roundtrip_any_shape(h, w, seed):
    x = np.random.default_rng(seed).normal(size=(h, w))
    assert np.abs(idct2(dct2(x)) - x).max() < 1e-9


def test_fourier_basis_dc_is_constant():
    u = fourier_basis(0, 0, 4, 4).matrix
    np.testing.assert_allclose(u, np.full((4, 4), 0.25), atol=1e-15)


def test_fourier_basis_first_row_frequency_hand_case():
    u = fourier_basis(1, 0, 4, 4).matrix
    rows = np.cos(np.pi * np.arange(4) / 2) / math.sqrt(8)
    np.testing.assert_allclose(u, np.repeat(rows[:, None], 4, axis=1), atol=1e-12)


@pytest.mark.parametrize("i,j", [(0, 0), (1, 0), (0, 3), (5, 7), (16, 16), (31, 1), (16, 0)])
def test_fourier_basis_support_and_norm(i, j):
    u = fourier_basis(i, j, 32, 32).matrix
    assert np.linalg.norm(u) == pytest.approx(1.0, abs=1e-12)
    spec = np.abs(dft2(u))
    nonzero = np.argwhere(spec > 1e-9 * spec.max())
    assert len(nonzero) <= 2
    assert {tuple(p) for p in nonzero} <= {(i, j), ((-i) % 32, (-j) % 32)}


def test_fourier_basis_conjugate_pair_is_bitwise_equal():
    for i, j in [(1, 2), (3, 30), (15, 16)]:
        a = fourier_basis(i, j, 32, 32).matrix
        b = fourier_basis((-i) % 32, (-j) % 32, 32, 32).matrix
        assert np.array_equal(a, b)


def test_fourier_basis_rejects_out_of_range():
    with pytest.raises(ValueError):
        fourier_basis(4, 0, 4, 4)


def test_canonical_index_is_shared_by_pair():
    assert canonical_index(1, 2, 8, 8) == canonical_index(7, 6, 8, 8)


def _toy_dataset(n=6, size=8, seed=0):
    rng = np.random.default_rng(seed)
    return LabeledDataset(rng.uniform(-0.5, 0.5, (n, 3, size, size)), rng.integers(0, 2, n))


def _threshold_model(x):
    # class 1 when the top-left red pixel is above 0
    return (np.asarray(x)[:, 0, 0, 0] > 0).astype(int)


def test_sensitivity_heatmap_point_symmetric_and_in_range():
    ds = _toy_dataset()
    grid = fourier_sensitivity(_threshold_model, ds, epsilon=3.0, seed=4)
    v = grid.values
    assert v.shape == (8, 8)
    assert np.all((v >= 0) & (v <= 1))
    for i in range(8):
        for j in range(8):
            assert v[i, j] == v[(-i) % 8, (-j) % 8]


def test_sensitivity_zero_epsilon_is_clean_error():
    ds = _toy_dataset()
    clean = np.mean(_threshold_model(ds.images) != ds.labels)
    grid = fourier_sensitivity(_threshold_model, ds, epsilon=0.0)
    assert np.all(grid.values == clean)


def test_sensitivity_independent_of_worker_count():
    ds = _toy_dataset()
    a = fourier_sensitivity(_threshold_model, ds, epsilon=2.0, seed=1, workers=1)
    b = fourier_sensitivity(_threshold_model, ds, epsilon=2.0, seed=1, workers=3)
    assert np.array_equal(a.values, b.values)


def test_sensitivity_rejects_empty_dataset():
    ds = LabeledDataset(np.zeros((0, 3, 4, 4)), np.zeros(0, dtype=int))
    with pytest.raises(ValueError):
        fourier_sensitivity(_threshold_model, ds)


def test_percentiles_constant_grid_and_nearest_rank():
    assert heatmap_percentiles(np.full((4, 4), 0.3)) == [0.3] * 5
    vals = np.arange(1, 101, dtype=float)
    assert heatmap_percentiles(vals, [10, 25, 50, 90, 95]) == [10.0, 25.0, 50.0, 90.0, 95.0]
    assert heatmap_percentiles(np.array([3.0, 1.0, 2.0]), [0, 50, 100]) == [1.0, 2.0, 3.0]


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=50))
def test_percentiles_monotone(values):
    ps = heatmap_percentiles(np.array(values))
    assert ps == sorted(ps)


def test_percentile_bounds_checked():
    with pytest.raises(ValueError):
        heatmap_percentiles(np.zeros(3), [101])


def test_energy_spectrum_single_basis_function():
    basis = np.zeros((8, 8))
    basis[1, 1] = 1.0
    delta = idct2(basis)
    low = perturbation_energy_spectrum([delta])
    assert np.count_nonzero(low.energy > 1e-20) == 1
    assert low.high_frequency_fraction == pytest.approx(0.0, abs=1e-20)
    basis = np.zeros((8, 8))
    basis[5, 6] = 2.0
    high = perturbation_energy_spectrum([idct2(basis)])
    assert high.high_frequency_fraction == pytest.approx(1.0)
    assert high.centroid_radius == pytest.approx(math.hypot(5, 6))


def test_energy_spectrum_parseval_over_channels_and_samples():
    rng = np.random.default_rng(3)
    deltas = [rng.normal(size=(3, 32, 32)) * 0.01 for _ in range(10)]
    s = perturbation_energy_spectrum(deltas)
    expected = np.mean([(d**2).sum() / 3 for d in deltas])
    assert abs(s.energy.sum() - expected) / expected < 1e-9
    assert abs(s.mean_squared_norm - expected) / expected < 1e-9


def test_energy_spectrum_white_noise_matches_area_fraction():
    rng = np.random.default_rng(4)
    s = perturbation_energy_spectrum([rng.normal(size=(3, 32, 32)) for _ in range(50)])
    r = np.hypot(*np.meshgrid(np.arange(32), np.arange(32), indexing="ij"))
    area = np.mean(r > 8)
    assert abs(s.high_frequency_fraction - area) < 0.05


def test_energy_spectrum_errors():
    with pytest.raises(ValueError):
        perturbation_energy_spectrum([])
    with pytest.raises(ValueError):
        perturbation_energy_spectrum([np.zeros((4, 4)), np.zeros((5, 5))])


def test_frequency_split_extremes_and_additivity():
    rng = np.random.default_rng(5)
    x = rng.uniform(-1, 1, (3, 16, 16))
    full = frequency_split(x, 8)
    np.testing.assert_allclose(full.low, x, atol=1e-12)
    assert np.abs(full.high).max() < 1e-12
    dc = frequency_split(x, 0)
    np.testing.assert_allclose(dc.low, np.broadcast_to(x.mean(axis=(1, 2), keepdims=True), x.shape), atol=1e-12)
    for radius in (1, 3, 5.5):
        s = frequency_split(x, radius)
        assert np.abs(s.low + s.high - x).max() < 1e-9
    assert full.log_magnitude.values.shape == (16, 16)


def test_frequency_split_rejects_negative_radius():
    with pytest.raises(ValueError):
        frequency_split(np.zeros((4, 4)), -1)


def test_center_shift_moves_dc_to_middle():
    g = np.zeros((4, 4))
    g[0, 0] = 1
    assert center_shift(g)[2, 2] == 1


def test_csv_round_trip(tmp_path):
    values = np.random.default_rng(6).uniform(size=(5, 5))
    grid = HeatmapGrid(values, "error_rate")
    back = read_grid_csv(write_grid_csv(grid, tmp_path / "g.csv"))
    assert back.label == "error_rate"
    assert np.array_equal(back.values, values)


def test_pgm_layout(tmp_path):
    grid = HeatmapGrid(np.array([[0.0, 1.0], [0.5, 0.25]]), center_shift=False)
    data = write_grid_pgm(grid, tmp_path / "g.pgm").read_bytes()
    assert data.startswith(b"P5\n2 2\n255\n")
    assert list(data[-4:]) == [0, 255, 128, 64]
    assert to_pgm_bytes(np.ones((2, 3)))[-6:] == bytes(6)
