"""Unit tests for training-time estimation"""

import numpy as np
import pytest
from hypothesis import given, settings as hypothesis_settings
from hypothesis import strategies as st

from ttime.core.config import settings
from ttime.core.exceptions import DimensionError, ResourceError, UsageError
from ttime.models.training_models import (
    CurveKind, GradientMatrix, LabelSet, LossCurve, LossKind, OutputVector, ProjectionSpec,
    RunConfig
)
from ttime.services.estimator import (
    TrainingTimeEstimator, compare_tt, effective_lr, epsilon_training_time,
    predict_training_time, smooth_curve, threshold_from_percentage
)


class TestSmoothCurve:
    """Test the clipped moving average"""

    def test_zero_window_is_identity(self):
        """Test half_window = 0"""
        curve = LossCurve(values=[3.0, 1.0, 2.0])
        np.testing.assert_array_equal(smooth_curve(curve, 0).values, curve.values)

    def test_constant_curve(self):
        """Test that constants are unchanged for any window"""
        curve = LossCurve(values=np.full(7, 0.4))
        np.testing.assert_allclose(smooth_curve(curve, 3).values, curve.values)

    def test_hand_computed(self):
        """Test (0,1,0,1,0) with half_window 1"""
        smoothed = smooth_curve(LossCurve(values=[0.0, 1.0, 0.0, 1.0, 0.0]), 1)
        np.testing.assert_allclose(smoothed.values, [0.5, 1 / 3, 2 / 3, 1 / 3, 0.5])

    def test_error_curves_stay_bounded(self):
        """Test that smoothing keeps error curves in [0, 1]"""
        smoothed = smooth_curve(LossCurve(values=[1.0, 1.0, 0.0], kind=CurveKind.ERROR), 2)
        assert smoothed.kind == CurveKind.ERROR
        assert np.all((smoothed.values >= 0.0) & (smoothed.values <= 1.0))

    def test_negative_window(self):
        """Test window validation"""
        with pytest.raises(UsageError):
            smooth_curve(LossCurve(values=[1.0]), -1)


class TestEpsilonTrainingTime:
    """Test the first-crossing metric"""

    @pytest.mark.parametrize("epsilon, expected", [(0.15, 2), (0.5, 1), (5.0, 0)])
    def test_hand_scan(self, epsilon, expected):
        """Test (1.0, 0.5, 0.2, 0.1, 0.1)"""
        curve = LossCurve(values=[1.0, 0.5, 0.2, 0.1, 0.1])
        assert epsilon_training_time(curve, epsilon) == expected

    def test_last_step_always_qualifies(self):
        """Test the T bound on an oscillating curve"""
        curve = LossCurve(values=[0.0, 1.0, 0.0, 1.0])
        assert epsilon_training_time(curve, 1e-9) == 1

    def test_positive_epsilon(self):
        """Test epsilon validation"""
        with pytest.raises(UsageError):
            epsilon_training_time(LossCurve(values=[1.0]), 0.0)

    @hypothesis_settings(max_examples=50, deadline=None)
    @given(
        values=st.lists(st.floats(min_value=0.0, max_value=10.0), min_size=1, max_size=40),
        eps_small=st.floats(min_value=1e-6, max_value=5.0),
        eps_gap=st.floats(min_value=0.0, max_value=5.0),
    )
    def test_monotone_in_epsilon(self, values, eps_small, eps_gap):
        """Test that a smaller threshold never gives an earlier time"""
        curve = LossCurve(values=values)
        t_small = epsilon_training_time(curve, eps_small)
        t_large = epsilon_training_time(curve, eps_small + eps_gap)
        assert t_small >= t_large
        assert 0 <= t_small <= curve.total_steps


class TestThresholds:
    """Test percentage thresholds"""

    def test_fraction_of_range(self):
        """Test fraction * |c0 - cT|"""
        assert threshold_from_percentage(LossCurve(values=[5.0, 2.0, 1.0]), 0.1) == pytest.approx(0.4)

    def test_flat_curve(self):
        """Test that a flat curve still yields a positive threshold"""
        assert threshold_from_percentage(LossCurve(values=[1.0, 1.0]), 0.1) > 0.0

    def test_effective_lr_exported(self):
        """Test the estimator re-export"""
        assert effective_lr(0.005, 0.9) == pytest.approx(0.05)


class TestPredictTrainingTime:
    """Test the end-to-end estimator"""

    def test_already_converged(self, small_mse_instance):
        """Test f0 = Y gives zero"""
        gradients, _, y = small_mse_instance
        f0 = OutputVector(values=y.targets.copy(), n_samples=y.n_samples, n_outputs=y.n_outputs)
        report, _ = predict_training_time(gradients, f0, y, RunConfig(learning_rate=0.1, total_steps=20))
        assert report.t_hat_epsilon == 0

    def test_scalar_worked_example(self, scalar_instance):
        """Test e^-0.2t with eps = 0.01 over 150 steps"""
        gradients, f0, y = scalar_instance
        cfg = RunConfig(learning_rate=0.1, total_steps=150, epsilon=0.01)
        report, trajectory = predict_training_time(gradients, f0, y, cfg)
        assert report.t_hat_epsilon == 24
        assert report.solver == "ode-rk4"
        assert report.smoothed is False
        assert trajectory.total_steps == 150

    def test_closed_form_agrees(self, scalar_instance):
        """Test the spectral path on the same example"""
        gradients, f0, y = scalar_instance
        cfg = RunConfig(learning_rate=0.1, total_steps=150, epsilon=0.01)
        report, _ = predict_training_time(gradients, f0, y, cfg, closed_form=True)
        assert report.t_hat_epsilon == 24
        assert report.solver == "closed-form"

    def test_momentum_equivalence(self, small_mse_instance):
        """Test (eta, m) and (eta / (1 - m), 0) predict the same time"""
        gradients, f0, y = small_mse_instance
        with_momentum, _ = predict_training_time(
            gradients, f0, y, RunConfig(learning_rate=0.01, momentum=0.5, total_steps=80, epsilon=0.05)
        )
        plain, _ = predict_training_time(
            gradients, f0, y, RunConfig(learning_rate=0.02, total_steps=80, epsilon=0.05)
        )
        assert with_momentum.t_hat_epsilon == plain.t_hat_epsilon
        assert with_momentum.effective_learning_rate == pytest.approx(0.02)

    def test_cross_entropy_closed_form_rejected(self, small_mse_instance):
        """Test that cross-entropy has no closed form"""
        gradients, f0, _ = small_mse_instance
        y = LabelSet.from_classes([0, 1, 0, 1, 0, 1], n_outputs=2)
        cfg = RunConfig(learning_rate=0.1, total_steps=5, loss_kind=LossKind.CROSS_ENTROPY)
        with pytest.raises(UsageError):
            predict_training_time(gradients, f0, y, cfg, closed_form=True)

    def test_mini_batch_uses_sde(self, small_mse_instance):
        """Test solver choice and default smoothing for mini-batches"""
        gradients, f0, y = small_mse_instance
        report, trajectory = predict_training_time(
            gradients, f0, y, RunConfig(learning_rate=0.05, total_steps=30, batch_size=2)
        )
        assert report.solver == "sde"
        assert report.half_window == settings.sde_smoothing_half_window
        assert report.smoothed is True
        assert trajectory.solver == "sde"

    def test_projection_applied_for_sde(self, small_mse_instance):
        """Test that a projection spec feeds the stochastic flow"""
        gradients, f0, y = small_mse_instance
        projection = ProjectionSpec(input_dim=gradients.cols, output_dim=4, seed=1)
        estimator = TrainingTimeEstimator(projection=projection)
        report, _ = estimator.estimate(
            gradients, f0, y, RunConfig(learning_rate=0.05, total_steps=10, batch_size=3)
        )
        assert report.solver == "sde"

    def test_huge_unprojected_gradients(self, small_mse_instance, monkeypatch):
        """Test the resource error advising projection"""
        gradients, f0, y = small_mse_instance
        monkeypatch.setattr(settings, "max_unprojected_dim", 5)
        with pytest.raises(ResourceError, match="project"):
            predict_training_time(gradients, f0, y, RunConfig(learning_rate=0.05, total_steps=5, batch_size=2))

    def test_error_curve(self, small_mse_instance):
        """Test prediction on the classification error"""
        gradients, f0, _ = small_mse_instance
        y = LabelSet.from_classes([0, 1, 1, 0, 0, 1], n_outputs=2, one_hot_targets=True)
        report, trajectory = predict_training_time(
            gradients, f0, y, RunConfig(learning_rate=0.05, total_steps=40, epsilon=0.1),
            curve_kind=CurveKind.ERROR,
        )
        assert report.curve_kind == CurveKind.ERROR
        assert trajectory.error is not None
        assert 0 <= report.t_hat_epsilon <= 40

    def test_error_curve_unavailable(self):
        """Test that generic regression targets have no error curve"""
        gradients = GradientMatrix(data=np.eye(2), n_samples=2, n_outputs=1)
        f0 = OutputVector(values=np.zeros(2), n_samples=2, n_outputs=1)
        y = LabelSet.from_targets([0.5, 0.25], n_samples=2, n_outputs=1)
        with pytest.raises(UsageError):
            predict_training_time(gradients, f0, y, RunConfig(learning_rate=0.1, total_steps=5),
                                  curve_kind=CurveKind.ERROR)

    def test_percentage_threshold(self, scalar_instance):
        """Test that a percentage epsilon scales with the smoothed curve's range"""
        gradients, f0, y = scalar_instance
        report, _ = predict_training_time(
            gradients, f0, y, RunConfig(learning_rate=0.1, total_steps=150), epsilon_fraction=0.01
        )
        assert report.epsilon == pytest.approx(0.01 * (1.0 - np.exp(-30.0)), rel=1e-6)
        assert report.t_hat_epsilon == 24

    def test_output_length_checked(self, small_mse_instance):
        """Test gradients and outputs must agree"""
        gradients, _, y = small_mse_instance
        f0 = OutputVector(values=np.zeros(4), n_samples=2, n_outputs=2)
        with pytest.raises(DimensionError):
            predict_training_time(gradients, f0, y, RunConfig(learning_rate=0.1, total_steps=5))


class TestReplicates:
    """Test seed-averaged estimates"""

    def test_per_seed_times(self, small_mse_instance):
        """Test that each seed gets its own time next to the averaged one"""
        gradients, f0, y = small_mse_instance
        report, summary, per_seed = TrainingTimeEstimator().estimate_replicates(
            gradients, f0, y, RunConfig(learning_rate=0.05, total_steps=20, batch_size=2), seeds=[0, 1, 2]
        )
        assert len(per_seed) == 3
        assert summary.seeds == [0, 1, 2]
        assert report.solver == "sde"
        assert all(0 <= t <= 20 for t in per_seed)

    def test_error_curve_kind(self, small_mse_instance):
        """Test that the error curve drives the averaged and per-seed times"""
        gradients, f0, y = small_mse_instance
        cfg = RunConfig(learning_rate=0.05, total_steps=20, batch_size=2, epsilon=0.1)
        report, summary, per_seed = TrainingTimeEstimator().estimate_replicates(
            gradients, f0, y, cfg, seeds=[0, 1, 2], curve_kind=CurveKind.ERROR
        )

        stacked = np.stack([trajectory.error.values for trajectory in summary.trajectories])
        np.testing.assert_allclose(summary.mean_error.values, stacked.mean(axis=0))
        assert summary.mean_error.kind == CurveKind.ERROR
        assert report.curve_kind == CurveKind.ERROR
        assert report.t_hat_epsilon == epsilon_training_time(smooth_curve(summary.mean_error, 2), 0.1)
        assert per_seed == [
            epsilon_training_time(smooth_curve(trajectory.error, 2), 0.1)
            for trajectory in summary.trajectories
        ]

    def test_error_curve_unavailable(self):
        """Test that real single-output targets have no error curve to average"""
        n = 4
        gradients = GradientMatrix(data=np.eye(n), n_samples=n, n_outputs=1)
        f0 = OutputVector(values=np.zeros(n), n_samples=n, n_outputs=1)
        y = LabelSet.from_targets([0.5, 0.2, 0.3, 0.4], n_samples=n, n_outputs=1)
        with pytest.raises(UsageError):
            TrainingTimeEstimator().estimate_replicates(
                gradients, f0, y, RunConfig(learning_rate=0.1, total_steps=5, batch_size=2),
                seeds=[0, 1], curve_kind=CurveKind.ERROR,
            )

    def test_full_batch_rejected(self, small_mse_instance):
        """Test that replicates need a stochastic run"""
        gradients, f0, y = small_mse_instance
        with pytest.raises(UsageError):
            TrainingTimeEstimator().estimate_replicates(
                gradients, f0, y, RunConfig(learning_rate=0.05, total_steps=20), seeds=[0, 1]
            )


class TestCompareTT:
    """Test training-time error tables"""

    def test_identical_curves(self):
        """Test zero error for identical inputs"""
        curve = LossCurve(values=np.exp(-0.1 * np.arange(50)))
        rows = compare_tt(curve, curve, [0.01, 0.1, 0.4])
        assert [row.absolute_error for row in rows] == [0, 0, 0]

    def test_shifted_curve(self):
        """Test a 3-step shift on a strictly decreasing curve"""
        t = np.arange(201)
        actual = LossCurve(values=np.exp(-0.1 * t))
        predicted = LossCurve(values=np.exp(-0.1 * np.maximum(t - 3, 0)))
        rows = compare_tt(predicted, actual, [0.01, 0.05])
        assert [row.absolute_error for row in rows] == [3, 3]
        assert rows[0].t_actual == 47
        assert rows[0].t_predicted == 50

    def test_percentage_mode(self):
        """Test per-curve range thresholds"""
        curve = LossCurve(values=[10.0, 5.0, 2.0, 1.0, 1.0])
        scaled = LossCurve(values=[1.0, 0.5, 0.2, 0.1, 0.1])
        rows = compare_tt(curve, scaled, [0.1, 0.5], percentage=True)
        assert [row.absolute_error for row in rows] == [0, 0]

    def test_length_mismatch(self):
        """Test curves must be the same length"""
        with pytest.raises(DimensionError):
            compare_tt(LossCurve(values=[1.0, 0.5]), LossCurve(values=[1.0]), [0.1])
