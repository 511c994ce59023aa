"""Unit tests for levy.py module."""

import math

import numpy as np
import pytest
from scipy import special

from volterra_lab.levy import (
    FineGrid,
    StableDriverParams,
    StableParameterError,
    aggregate_noise,
    compensator_mass,
    consistent_measure_scale,
    derive_noise_bundle,
    derive_path_noise,
    laplace_denominator,
    noise_to_frame,
    path_rng,
    sample_large_jumps,
    sample_stable_increment,
    stable_laplace_exponent,
)


class TestStableConstants:
    """Tests for closed-form constants of the stable driver."""

    def test_compensator_mass_at_three_halves(self) -> None:
        assert compensator_mass(1.5) == 4.0

    @pytest.mark.parametrize("alpha", [1.0, 2.0, 0.5, 2.5])
    def test_alpha_outside_range_rejected(self, alpha: float) -> None:
        with pytest.raises(StableParameterError):
            compensator_mass(alpha)
        with pytest.raises(StableParameterError):
            StableDriverParams(alpha=alpha)

    def test_laplace_exponent(self) -> None:
        assert stable_laplace_exponent(1.5, -1.0) == pytest.approx(math.sqrt(2.0), rel=1e-14)
        assert stable_laplace_exponent(1.5, -1.0, t=2.0) == pytest.approx(2.0 * math.sqrt(2.0), rel=1e-14)
        assert stable_laplace_exponent(1.5, 0.0) == 0.0

    def test_laplace_exponent_rejects_positive_u(self) -> None:
        with pytest.raises(StableParameterError):
            stable_laplace_exponent(1.5, 0.5)

    def test_consistent_measure_scale(self) -> None:
        c = consistent_measure_scale(1.5)
        assert c > 0.0
        assert c * special.gamma(-1.5) * laplace_denominator(1.5) == pytest.approx(1.0, rel=1e-12)

    def test_driver_params_validation(self) -> None:
        with pytest.raises(StableParameterError):
            StableDriverParams(alpha=1.5, mode="bogus")  # type: ignore[arg-type]
        with pytest.raises(StableParameterError):
            StableDriverParams(alpha=1.5, threshold=0.0)
        with pytest.raises(StableParameterError):
            StableDriverParams(alpha=1.5, measure_scale=-1.0)

    def test_default_threshold(self) -> None:
        params = StableDriverParams(alpha=1.5, mode="thinned")
        assert params.resolved_threshold(0.001) == pytest.approx(0.001 ** (2.0 / 3.0))
        assert StableDriverParams(alpha=1.5, threshold=0.2).resolved_threshold(0.001) == 0.2


class TestSampling:
    """Tests for stable increments and large jumps."""

    def test_laplace_transform_of_increments(self) -> None:
        params = StableDriverParams(alpha=1.5)
        draws = np.asarray(sample_stable_increment(params, 1.0, path_rng(11, 0), size=200_000))
        values = np.exp(-draws)
        se = float(np.std(values, ddof=1) / math.sqrt(values.size))
        z = (float(np.mean(values)) - math.exp(math.sqrt(2.0))) / se
        assert abs(z) < 4.0

    def test_scalar_draw(self) -> None:
        value = sample_stable_increment(StableDriverParams(alpha=1.5), 0.5, path_rng(0, 0))
        assert isinstance(value, float)

    def test_rejects_nonpositive_dt(self) -> None:
        with pytest.raises(StableParameterError):
            sample_stable_increment(StableDriverParams(alpha=1.5), 0.0, path_rng(0, 0))

    def test_large_jumps(self) -> None:
        params = StableDriverParams(alpha=1.5, mode="thinned", measure_scale=2.0)
        stream = sample_large_jumps(params, 5.0, path_rng(3, 1), threshold=0.1)
        assert np.all(stream.sizes >= 0.1)
        assert np.all(np.diff(stream.times) >= 0.0)
        assert np.all((stream.times >= 0.0) & (stream.times < 5.0))
        assert stream.drift_rate == pytest.approx(2.0 * 0.1 ** (-0.5) / 0.5)
        assert stream.compensated_sum() == pytest.approx(float(np.sum(stream.sizes)) - stream.drift_rate * 5.0)


class TestNoiseDerivation:
    """Tests for per-path, counter-based noise."""

    def test_path_rng_is_reproducible(self) -> None:
        a = path_rng(42, 7).standard_normal(5)
        b = path_rng(42, 7).standard_normal(5)
        c = path_rng(42, 8).standard_normal(5)
        np.testing.assert_array_equal(a, b)
        assert not np.array_equal(a, c)

    def test_bundle_rows_do_not_depend_on_the_batch(self) -> None:
        grid = FineGrid(T=1.0, n_steps=32)
        params = StableDriverParams(alpha=1.5)
        full = derive_noise_bundle(5, range(6), grid, params)
        part = derive_noise_bundle(5, [3, 4], grid, params)
        np.testing.assert_array_equal(full.dB[3:5], part.dB)
        assert full.dL is not None and part.dL is not None
        np.testing.assert_array_equal(full.dL[3:5], part.dL)
        np.testing.assert_array_equal(part.path_indices, [3, 4])

    def test_exact_noise_shapes(self) -> None:
        grid = FineGrid(T=2.0, n_steps=20)
        noise = derive_path_noise(1, 0, grid, StableDriverParams(alpha=1.7))
        assert noise.dB.shape == (20,)
        assert noise.dL is not None and noise.dL.shape == (20,)
        assert noise.jumps is None

    def test_thinned_bundle_bins_jumps(self) -> None:
        grid = FineGrid(T=1.0, n_steps=16)
        params = StableDriverParams(alpha=1.5, mode="thinned", threshold=0.05)
        bundle = derive_noise_bundle(9, range(4), grid, params)
        assert bundle.dL is None
        assert bundle.jump_times is not None and bundle.jump_sizes is not None
        assert bundle.jump_times.shape[:2] == (4, 16)
        live = np.isfinite(bundle.jump_times)
        substep = np.broadcast_to(np.arange(16)[None, :, None], bundle.jump_times.shape)
        bins = np.floor(bundle.jump_times[live] / grid.step)
        np.testing.assert_array_equal(np.minimum(bins, 15), substep[live])
        np.testing.assert_array_equal(bundle.jump_sizes[~live], 0.0)
        assert bundle.drift_rate == pytest.approx(params.drift_rate(0.05))
        offsets = bundle.jump_offsets(0.0)
        assert offsets is not None
        assert np.all((offsets >= 0.0) & (offsets <= 1.0))

    def test_window(self) -> None:
        bundle = derive_noise_bundle(2, range(3), FineGrid(T=1.0, n_steps=8), StableDriverParams(alpha=1.5))
        window = bundle.window(2, 6)
        assert window.grid.n_steps == 4
        assert window.grid.step == pytest.approx(bundle.grid.step)
        np.testing.assert_array_equal(window.dB, bundle.dB[:, 2:6])


class TestAggregation:
    """Tests for coupling fine noise onto coarser grids."""

    def test_exact_increments_are_summed(self) -> None:
        bundle = derive_noise_bundle(4, range(3), FineGrid(T=1.0, n_steps=16), StableDriverParams(alpha=1.5))
        coarse = aggregate_noise(bundle, 4)
        assert coarse.grid.n_steps == 4
        np.testing.assert_allclose(coarse.dB, bundle.dB.reshape(3, 4, 4).sum(axis=2))
        assert coarse.dL is not None and bundle.dL is not None
        np.testing.assert_allclose(coarse.dL, bundle.dL.reshape(3, 4, 4).sum(axis=2))

    def test_factor_one_is_identity(self) -> None:
        bundle = derive_noise_bundle(4, range(2), FineGrid(T=1.0, n_steps=4), StableDriverParams(alpha=1.5))
        assert aggregate_noise(bundle, 1) is bundle

    def test_jump_events_are_kept(self) -> None:
        params = StableDriverParams(alpha=1.5, mode="thinned", threshold=0.02)
        bundle = derive_noise_bundle(6, range(5), FineGrid(T=1.0, n_steps=32), params)
        coarse = aggregate_noise(bundle, 8)
        assert bundle.jump_times is not None and coarse.jump_times is not None
        assert int(np.sum(np.isfinite(coarse.jump_times))) == int(np.sum(np.isfinite(bundle.jump_times)))
        for p in range(5):
            fine_times = np.sort(bundle.jump_times[p][np.isfinite(bundle.jump_times[p])])
            coarse_times = np.sort(coarse.jump_times[p][np.isfinite(coarse.jump_times[p])])
            np.testing.assert_array_equal(fine_times, coarse_times)

    def test_rejects_non_divisor(self) -> None:
        bundle = derive_noise_bundle(4, range(2), FineGrid(T=1.0, n_steps=6), StableDriverParams(alpha=1.5))
        with pytest.raises(StableParameterError):
            aggregate_noise(bundle, 4)


class TestNoiseFrame:
    """Tests for the noise dump rows."""

    def test_exact_rows(self) -> None:
        bundle = derive_noise_bundle(1, range(2), FineGrid(T=1.0, n_steps=3), StableDriverParams(alpha=1.5))
        frame = noise_to_frame(bundle)
        assert list(frame.columns) == ["path", "substep", "dB", "dL_or_jump_list"]
        assert len(frame) == 6
        assert frame["substep"].tolist() == [0, 1, 2, 0, 1, 2]

    def test_thinned_rows_list_jumps(self) -> None:
        params = StableDriverParams(alpha=1.5, mode="thinned", threshold=0.01)
        bundle = derive_noise_bundle(1, range(2), FineGrid(T=1.0, n_steps=4), params)
        frame = noise_to_frame(bundle)
        assert len(frame) == 8
        assert bundle.jump_times is not None
        listed = sum(cell.count(":") for cell in frame["dL_or_jump_list"])
        assert listed == int(np.sum(np.isfinite(bundle.jump_times)))
