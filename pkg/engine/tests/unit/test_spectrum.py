"""Unit tests for power-law fits and larger-dataset extrapolation"""

import logging

import numpy as np
import pytest
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from ttime.core.exceptions import ExtrapolationError, FitError, UsageError
from ttime.models.training_models import (
    ExtrapolationConfig, LabelSet, LossKind, ModelKind, ModelSpec, OutputVector, PowerLawFit,
    RunConfig
)
from ttime.services.dynamics import closed_form_mse_curve
from ttime.services.gradient_store import (
    powerlaw_spectrum, synth_powerlaw_gradients, synth_powerlaw_kernel
)
from ttime.services.kernel import build_kernel, residual_projections, sym_eig
from ttime.services.oracle import init_weights, model_gradients, model_outputs
from ttime.services.spectrum import (
    DatasetExtrapolator, corrected_exponent, default_fit_range, extrapolate_eigs,
    extrapolate_projections, fit_powerlaw, fit_projection_tail, predict_curve_larger_dataset
)


class TestFitPowerlaw:
    """Test log-log least squares"""

    def test_exact_law(self):
        """Test recovery of 3 k^-1.5"""
        fit = fit_powerlaw(powerlaw_spectrum(100, 3.0, 1.5), fit_range=(1, 100))
        assert fit.c == pytest.approx(3.0, abs=1e-6)
        assert fit.s == pytest.approx(1.5, abs=1e-6)
        assert fit.residual == pytest.approx(0.0, abs=1e-9)

    def test_constant_values(self):
        """Test s = 0 for a flat spectrum"""
        fit = fit_powerlaw(np.full(20, 0.7), fit_range=(1, 20))
        assert fit.s == pytest.approx(0.0, abs=1e-10)
        assert fit.c == pytest.approx(0.7)

    def test_zeroed_entries_excluded(self, caplog):
        """Test that non-positive entries are dropped and counted"""
        values = powerlaw_spectrum(100, 3.0, 1.5)
        values[9::10] = 0.0
        with caplog.at_level(logging.WARNING, logger="ttime"):
            fit = fit_powerlaw(values, fit_range=(1, 100))
        assert fit.excluded_count == 10
        assert fit.n_points == 90
        assert fit.c == pytest.approx(3.0, abs=1e-6)
        assert fit.s == pytest.approx(1.5, abs=1e-6)
        assert "Excluded 10" in caplog.text

    def test_default_range_drops_tail(self):
        """Test (1, floor(0.8 n))"""
        assert default_fit_range(100) == (1, 80)
        assert default_fit_range(1) == (1, 1)
        assert fit_powerlaw(powerlaw_spectrum(50, 2.0, 1.0)).fit_range == (1, 40)

    def test_too_few_points(self):
        """Test that one usable value is not a fit"""
        with pytest.raises(FitError):
            fit_powerlaw(np.array([1.0, 0.0, 0.0]), fit_range=(1, 3))

    def test_range_outside_values(self):
        """Test range validation"""
        with pytest.raises(UsageError):
            fit_powerlaw(np.ones(5), fit_range=(1, 6))

    @hypothesis_settings(max_examples=20, deadline=None)
    @given(c=st.floats(min_value=0.01, max_value=100.0), s=st.floats(min_value=0.1, max_value=3.0))
    def test_noiseless_round_trip(self, c, s):
        """Test that the fit inverts the generator"""
        fit = fit_powerlaw(powerlaw_spectrum(60, c, s), fit_range=(1, 60))
        assert fit.c == pytest.approx(c, rel=1e-6)
        assert fit.s == pytest.approx(s, abs=1e-6)


class TestExtrapolateEigs:
    """Test the corrected power law"""

    def test_no_correction_when_alpha_zero(self):
        """Test alpha = 0 gives the plain law"""
        fit = PowerLawFit(c=3.0, s=1.5, fit_range=(1, 10))
        cfg = ExtrapolationConfig(alpha=0.0, k0=1, n_subset=10, n_target=40)
        np.testing.assert_allclose(extrapolate_eigs(fit, cfg), powerlaw_spectrum(40, 3.0, 1.5))

    def test_same_size_keeps_exponent(self):
        """Test N0 = N leaves the exponent at -s"""
        fit = PowerLawFit(c=3.0, s=1.5, fit_range=(1, 10))
        cfg = ExtrapolationConfig(alpha=0.15, k0=1, n_subset=10, n_target=10)
        assert corrected_exponent(fit, cfg) == -1.5

    def test_corrected_value(self):
        """Test c=3, s=1.5, alpha=0.15, N0/N=0.25 at k=10"""
        fit = PowerLawFit(c=3.0, s=1.5, fit_range=(1, 10))
        cfg = ExtrapolationConfig(alpha=0.15, k0=1, n_subset=10, n_target=40)
        eigenvalues = extrapolate_eigs(fit, cfg)
        assert eigenvalues.shape == (40,)
        assert eigenvalues[9] == pytest.approx(3.0 * 10 ** -1.6125)

    def test_length_scales_with_outputs(self):
        """Test N x C eigenvalues for multi-output targets"""
        fit = PowerLawFit(c=1.0, s=1.0, fit_range=(1, 10))
        cfg = ExtrapolationConfig(k0=1, n_subset=10, n_target=20, n_outputs=3)
        assert extrapolate_eigs(fit, cfg).shape == (60,)

    def test_size_normalized_fit_matches_raw_fit(self):
        """Test that fitting lambda / N0 and rescaling by N reproduces a raw fit at N within 3%"""
        n0, n, c, s = 100, 400, 0.8, 1.3
        subset = sym_eig(synth_powerlaw_kernel(n0, c * n0, s, seed=1)).eigenvalues
        full = sym_eig(synth_powerlaw_kernel(n, c * n, s, seed=2)).eigenvalues
        cfg = ExtrapolationConfig(alpha=0.0, k0=1, n_subset=n0, n_target=n)

        rescaled = extrapolate_eigs(fit_powerlaw(subset / n0), cfg) * n
        raw = fit_powerlaw(full)
        np.testing.assert_allclose(rescaled, powerlaw_spectrum(n, raw.c, raw.s), rtol=0.03)
        # without the size normalization the subset law undershoots by N0 / N
        assert fit_powerlaw(subset).c == pytest.approx(raw.c * n0 / n, rel=0.03)


class TestExtrapolateProjections:
    """Test the projection tail"""

    def test_self_consistent(self, rng):
        """Test n_target = N0 with the subset's own total"""
        p = powerlaw_spectrum(30, 2.0, 1.1) * (1.0 + 0.1 * rng.random(30))
        result = extrapolate_projections(p, k0=10, target_norm_sq=p.sum(), n_target=30)
        assert result.sum() == pytest.approx(p.sum(), rel=1e-8)
        np.testing.assert_array_equal(result[:9], p[:9])

    def test_recovers_exact_tail(self):
        """Test recovery of a known (a, b)"""
        a, b, k0, n_target = 2.0, 1.3, 5, 200
        k = np.arange(1, n_target + 1, dtype=float)
        exact = a * k ** -b
        tail = fit_projection_tail(exact[:50], k0, exact.sum(), n_target)
        assert tail.b == pytest.approx(b, abs=1e-4)
        assert tail.a == pytest.approx(a, rel=1e-3)
        np.testing.assert_allclose(tail.values, exact, rtol=1e-3)

    @hypothesis_settings(max_examples=25, deadline=None)
    @given(factor=st.floats(min_value=1.05, max_value=3.0), seed=st.integers(0, 500))
    def test_sum_constraint_always_met(self, factor, seed):
        """Test sum and non-negativity on random feasible inputs"""
        rng = np.random.default_rng(seed)
        p = np.sort(rng.random(20))[::-1] + 0.01
        n_target = 80
        # Feasible: above the flattest admissible tail, below the steepest
        target = p[:4].sum() + factor * p[4]
        try:
            result = extrapolate_projections(p, k0=5, target_norm_sq=target, n_target=n_target)
        except ExtrapolationError:
            return
        assert result.shape == (n_target,)
        assert np.all(result >= 0.0)
        assert result.sum() == pytest.approx(target, rel=1e-8)

    def test_head_exceeds_target(self):
        """Test infeasible head mass"""
        with pytest.raises(ExtrapolationError):
            extrapolate_projections(np.array([5.0, 1.0, 0.5]), k0=2, target_norm_sq=4.0, n_target=10)

    def test_zero_anchor(self):
        """Test that a zero projection at k0 cannot anchor a tail"""
        with pytest.raises(ExtrapolationError):
            extrapolate_projections(np.array([1.0, 0.0, 0.5]), k0=2, target_norm_sq=4.0, n_target=10)

    def test_target_needs_growing_tail(self):
        """Test that a target above the flattest tail is infeasible"""
        p = np.array([1.0, 0.5, 0.25])
        with pytest.raises(ExtrapolationError):
            extrapolate_projections(p, k0=2, target_norm_sq=1.0 + 0.5 * 9 + 1.0, n_target=10)

    def test_single_term_tail(self):
        """Test k0 = n_target leaves a single rescaled term"""
        tail = fit_projection_tail(np.array([1.0, 0.5, 0.25]), k0=3, target_norm_sq=2.0, n_target=3)
        assert tail.b == 0.0
        np.testing.assert_allclose(tail.values, [1.0, 0.5, 0.5])

    def test_k0_bounds(self):
        """Test k0 range validation"""
        with pytest.raises(UsageError):
            extrapolate_projections(np.ones(3), k0=4, target_norm_sq=10.0, n_target=10)


class TestDatasetExtrapolator:
    """Test the larger-dataset pipeline"""

    @staticmethod
    def _problem(n, c, s, seed, rng):
        gradients = synth_powerlaw_gradients(n, dim=n + 10, c=c * n, s=s, seed=seed)
        f0 = OutputVector(values=np.zeros(n), n_samples=n, n_outputs=1)
        y = LabelSet.from_targets(rng.standard_normal(n), n_samples=n, n_outputs=1)
        return gradients, f0, y

    def test_same_size_reproduces_own_curve(self, rng):
        """Test N = N0, alpha = 0, k0 = N0 against the subset's own closed form"""
        n = 40
        gradients, f0, y = self._problem(n, c=2.0, s=1.2, seed=3, rng=rng)
        run = RunConfig(learning_rate=0.05, total_steps=100)
        cfg = ExtrapolationConfig(alpha=0.0, k0=n, n_subset=n, n_target=n, fit_range=(1, n))
        target = float(np.sum(y.targets ** 2))

        predicted = predict_curve_larger_dataset(gradients, f0, y, target, cfg, run)

        eigen = sym_eig(build_kernel(gradients))
        own = closed_form_mse_curve(eigen, residual_projections(eigen, f0, y), 0.05, 100).values / n
        np.testing.assert_allclose(predicted.values, own, rtol=0.02)

    def test_prediction_contents(self, rng):
        """Test the shapes and invariants of a full prediction"""
        n0, n = 30, 90
        gradients, f0, y = self._problem(n0, c=1.5, s=1.1, seed=5, rng=rng)
        cfg = ExtrapolationConfig(alpha=0.15, k0=10, n_subset=n0, n_target=n)
        run = RunConfig(learning_rate=0.05, total_steps=50)
        eigen = sym_eig(build_kernel(gradients))
        p = residual_projections(eigen, f0, y).p
        target = float(p[:9].sum() + 5.0 * p[9])

        prediction = DatasetExtrapolator(cfg).run(gradients, f0, y, target, run)

        assert prediction.eigenvalues_hat.shape == (n,)
        assert prediction.projections_hat.shape == (n,)
        assert prediction.projections_hat.sum() == pytest.approx(target, rel=1e-8)
        assert prediction.curve.values[0] == pytest.approx(target / n, rel=1e-8)
        assert np.all(np.diff(prediction.curve.values) <= 1e-12)

    def test_larger_dataset_converges_slower(self, blob_dataset):
        """Test that an N = 4 N0 forecast sits on or above the subset's own forecast on blob data"""
        features, labels = blob_dataset
        n0 = features.shape[0]
        n = 4 * n0
        # constant column acts as a bias and dominates the top mode
        features = np.column_stack([features, np.full(n0, 3.0)])
        spec = ModelSpec(kind=ModelKind.LINEAR, input_dim=features.shape[1], n_outputs=1, init_seed=3)
        weights0 = init_weights(spec)
        gradients = model_gradients(spec, weights0, features)
        f0 = model_outputs(spec, weights0, features)
        y = LabelSet.from_targets((labels.classes == 0).astype(float), n_samples=n0, n_outputs=1)
        norm_sq = float(residual_projections(sym_eig(build_kernel(gradients)), f0, y).p.sum())

        own = DatasetExtrapolator(ExtrapolationConfig(k0=1, n_subset=n0, n_target=n0)).run(
            gradients, f0, y, norm_sq, RunConfig(learning_rate=0.01, total_steps=100)
        ).curve
        # matched per-sample loss: the residual norm grows with N, the summed-loss step shrinks by N0 / N
        larger = DatasetExtrapolator(ExtrapolationConfig(k0=1, n_subset=n0, n_target=n)).run(
            gradients, f0, y, norm_sq * n / n0, RunConfig(learning_rate=0.01 * n0 / n, total_steps=100)
        ).curve

        assert larger.values[0] == pytest.approx(own.values[0], rel=1e-12)
        assert np.all(larger.values >= own.values * (1.0 - 1e-9))
        assert larger.values[-1] > own.values[-1]

    def test_cross_entropy_rejected(self, rng):
        """Test the MSE-only restriction"""
        gradients, f0, y = self._problem(10, c=1.0, s=1.0, seed=1, rng=rng)
        cfg = ExtrapolationConfig(k0=5, n_subset=10, n_target=20)
        run = RunConfig(learning_rate=0.1, total_steps=5, loss_kind=LossKind.CROSS_ENTROPY)
        with pytest.raises(UsageError):
            DatasetExtrapolator(cfg).run(gradients, f0, y, 5.0, run)

    def test_subset_size_checked(self, rng):
        """Test that the config must describe the supplied subset"""
        gradients, f0, y = self._problem(10, c=1.0, s=1.0, seed=1, rng=rng)
        cfg = ExtrapolationConfig(k0=5, n_subset=12, n_target=20)
        with pytest.raises(UsageError):
            DatasetExtrapolator(cfg).run(gradients, f0, y, 5.0, RunConfig(learning_rate=0.1, total_steps=5))
