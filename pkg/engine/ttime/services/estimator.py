"""
Training-Time Estimation Service
End-to-end forecast of the step at which a run's loss settles within epsilon of its final value
"""

import time
from typing import List, Optional, Sequence, Tuple

import numpy as np

from ..core.config import settings
from ..core.exceptions import DimensionError, ResourceError, UsageError
from ..core.logger import LoggerMixin
from ..core.metrics import track_stage
from ..models.training_models import (
    CurveKind, GradientMatrix, Integrator, LabelSet, LossCurve, LossKind, OutputVector,
    ProjectionScheme, ProjectionSpec, ReplicateSummary, RunConfig, TTComparisonRow, TTReport,
    Trajectory
)
from .dynamics import (
    ReplicateRunner, closed_form_trajectory, effective_lr, estimate_sigma_diag, solve_ode, solve_sde
)
from .kernel import build_kernel, sym_eig
from .projection import project_gradients

__all__ = [
    "effective_lr",
    "smooth_curve",
    "epsilon_training_time",
    "threshold_from_percentage",
    "TrainingTimeEstimator",
    "predict_training_time",
    "compare_tt",
]


def smooth_curve(curve: LossCurve, half_window: int) -> LossCurve:
    """Centered moving average whose window is clipped at both ends"""
    if half_window < 0:
        raise UsageError("half_window must be non-negative")
    if half_window == 0:
        return LossCurve(values=curve.values.copy(), kind=curve.kind)

    values = curve.values
    n = values.shape[0]
    cumulative = np.concatenate([[0.0], np.cumsum(values)])
    t = np.arange(n)
    lo = np.maximum(t - half_window, 0)
    hi = np.minimum(t + half_window + 1, n)
    smoothed = (cumulative[hi] - cumulative[lo]) / (hi - lo)

    if curve.kind == CurveKind.ERROR:
        smoothed = np.clip(smoothed, 0.0, 1.0)
    return LossCurve(values=smoothed, kind=curve.kind)


def epsilon_training_time(curve: LossCurve, epsilon: float) -> int:
    """First step whose value is strictly within epsilon of the final value"""
    if epsilon <= 0.0:
        raise UsageError("epsilon must be positive")
    values = curve.values
    return int(np.flatnonzero(np.abs(values - values[-1]) < epsilon)[0])


def threshold_from_percentage(curve: LossCurve, fraction: float) -> float:
    """Absolute threshold for a fraction of the curve's range |curve[0] - curve[T]|"""
    if fraction <= 0.0:
        raise UsageError("Percentage thresholds must be positive")
    span = abs(curve.values[0] - curve.values[-1])
    # A flat curve still needs a positive threshold; only exact matches qualify
    return fraction * span if span > 0.0 else float(np.finfo(float).tiny)


class TrainingTimeEstimator(LoggerMixin):
    """Chooses the deterministic or stochastic flow for a run and extracts its training time"""

    def __init__(self, integrator: Integrator = Integrator.RK4,
                 projection: Optional[ProjectionSpec] = None):
        super().__init__()
        self.integrator = integrator
        self.projection = projection

    def _stochastic_gradients(self, gradients: GradientMatrix) -> GradientMatrix:
        if gradients.projected:
            return gradients
        if self.projection is not None:
            return project_gradients(gradients, self.projection)
        if gradients.cols > settings.max_unprojected_dim:
            raise ResourceError(
                f"{gradients.cols} gradient columns exceed {settings.max_unprojected_dim}; "
                "project the gradients (e.g. --project-dim) before simulating SGD noise"
            )
        identity = ProjectionSpec(
            input_dim=gradients.cols, output_dim=gradients.cols, scheme=ProjectionScheme.IDENTITY
        )
        return project_gradients(gradients, identity)

    def simulate(self, gradients: GradientMatrix, f0: OutputVector, y: LabelSet, cfg: RunConfig,
                 closed_form: bool = False) -> Trajectory:
        """Linearized trajectory of the run described by cfg"""
        if gradients.rows != f0.values.shape[0]:
            raise DimensionError(
                f"Gradients have {gradients.rows} rows, outputs have length {f0.values.shape[0]}"
            )

        if cfg.is_full_batch(f0.n_samples):
            if self.projection is not None and not gradients.projected:
                gradients = project_gradients(gradients, self.projection)
            kernel = build_kernel(gradients)
            if closed_form:
                if cfg.loss_kind != LossKind.MSE:
                    raise UsageError("Cross-entropy dynamics have no closed form; drop --closed-form")
                return closed_form_trajectory(sym_eig(kernel), f0, y, cfg)
            return solve_ode(kernel, f0, y, cfg, integrator=self.integrator)

        if closed_form:
            raise UsageError("The closed form covers full-batch MSE runs only")

        projected = self._stochastic_gradients(gradients)
        kernel = build_kernel(projected)
        noise = estimate_sigma_diag(projected, f0, y, cfg.loss_kind)
        return solve_sde(kernel, projected, noise, f0, y, cfg)

    @track_stage("estimate")
    def estimate(self, gradients: GradientMatrix, f0: OutputVector, y: LabelSet, cfg: RunConfig,
                 half_window: Optional[int] = None, curve_kind: CurveKind = CurveKind.LOSS,
                 closed_form: bool = False,
                 epsilon_fraction: Optional[float] = None) -> Tuple[TTReport, Trajectory]:
        start_time = time.perf_counter()

        trajectory = self.simulate(gradients, f0, y, cfg, closed_form=closed_form)
        stochastic = trajectory.solver == "sde"

        if curve_kind == CurveKind.ERROR:
            if trajectory.error is None:
                raise UsageError("Error curves need class labels or +-1 targets")
            curve = trajectory.error
        else:
            curve = trajectory.loss

        if half_window is None:
            half_window = (
                settings.sde_smoothing_half_window if stochastic else settings.ode_smoothing_half_window
            )
        smoothed = smooth_curve(curve, half_window)

        epsilon = cfg.epsilon
        if epsilon_fraction is not None:
            epsilon = threshold_from_percentage(smoothed, epsilon_fraction)
        t_hat = epsilon_training_time(smoothed, epsilon)

        report = TTReport(
            t_hat_epsilon=t_hat,
            epsilon=epsilon,
            curve_kind=curve_kind,
            final_value=float(smoothed.values[-1]),
            smoothed=half_window > 0,
            half_window=half_window,
            solver=trajectory.solver,
            effective_learning_rate=effective_lr(cfg.learning_rate, cfg.momentum),
            total_steps=cfg.total_steps,
            config=cfg,
        )

        self.logger.info(
            f"Predicted T_eps={t_hat} (eps={epsilon:.4g}, {curve_kind.value}, solver={trajectory.solver})"
        )
        self.log_performance("training-time estimate", time.perf_counter() - start_time)
        return report, trajectory

    def estimate_replicates(self, gradients: GradientMatrix, f0: OutputVector, y: LabelSet,
                            cfg: RunConfig, seeds: Sequence[int], half_window: Optional[int] = None,
                            curve_kind: CurveKind = CurveKind.LOSS,
                            epsilon_fraction: Optional[float] = None
                            ) -> Tuple[TTReport, ReplicateSummary, List[int]]:
        """Training time of the seed-averaged SDE curve plus the per-seed training times"""
        if cfg.is_full_batch(f0.n_samples):
            raise UsageError("Replicates only apply to mini-batch runs")

        projected = self._stochastic_gradients(gradients)
        kernel = build_kernel(projected)
        noise = estimate_sigma_diag(projected, f0, y, cfg.loss_kind)
        summary = ReplicateRunner().run_sync(kernel, projected, noise, f0, y, cfg, list(seeds))

        if curve_kind == CurveKind.ERROR:
            if summary.mean_error is None:
                raise UsageError("Error curves need class labels or +-1 targets")
            mean_curve = summary.mean_error
            seed_curves = [trajectory.error for trajectory in summary.trajectories]
        else:
            mean_curve = summary.mean_loss
            seed_curves = [trajectory.loss for trajectory in summary.trajectories]

        if half_window is None:
            half_window = settings.sde_smoothing_half_window

        def training_time(curve: LossCurve) -> Tuple[int, float]:
            smoothed = smooth_curve(curve, half_window)
            epsilon = cfg.epsilon
            if epsilon_fraction is not None:
                epsilon = threshold_from_percentage(smoothed, epsilon_fraction)
            return epsilon_training_time(smoothed, epsilon), epsilon

        per_seed = [training_time(curve)[0] for curve in seed_curves]
        t_hat, epsilon = training_time(mean_curve)

        report = TTReport(
            t_hat_epsilon=t_hat,
            epsilon=epsilon,
            curve_kind=curve_kind,
            final_value=float(smooth_curve(mean_curve, half_window).values[-1]),
            smoothed=half_window > 0,
            half_window=half_window,
            solver="sde",
            effective_learning_rate=effective_lr(cfg.learning_rate, cfg.momentum),
            total_steps=cfg.total_steps,
            config=cfg,
        )
        self.logger.info(f"Replicates {list(summary.seeds)}: mean-curve T_eps={t_hat}, per seed {per_seed}")
        return report, summary, per_seed


def predict_training_time(gradients: GradientMatrix, f0: OutputVector, y: LabelSet, cfg: RunConfig,
                          smoothing: Optional[int] = None, curve_kind: CurveKind = CurveKind.LOSS,
                          projection: Optional[ProjectionSpec] = None,
                          integrator: Integrator = Integrator.RK4, closed_form: bool = False,
                          epsilon_fraction: Optional[float] = None) -> Tuple[TTReport, Trajectory]:
    """Predict the epsilon-training-time of a run from gradients at initialization"""
    estimator = TrainingTimeEstimator(integrator=integrator, projection=projection)
    return estimator.estimate(
        gradients, f0, y, cfg,
        half_window=smoothing,
        curve_kind=curve_kind,
        closed_form=closed_form,
        epsilon_fraction=epsilon_fraction,
    )


def compare_tt(predicted: LossCurve, actual: LossCurve, epsilons: Sequence[float],
               percentage: bool = False) -> List[TTComparisonRow]:
    """|t_predicted - t_actual| per threshold

    In percentage mode each epsilon is a fraction of the respective curve's own range.
    """
    if predicted.values.shape != actual.values.shape:
        raise DimensionError(
            f"Curves differ in length: {predicted.values.shape[0]} vs {actual.values.shape[0]}"
        )

    rows = []
    for epsilon in epsilons:
        if percentage:
            t_pred = epsilon_training_time(predicted, threshold_from_percentage(predicted, epsilon))
            t_real = epsilon_training_time(actual, threshold_from_percentage(actual, epsilon))
        else:
            t_pred = epsilon_training_time(predicted, epsilon)
            t_real = epsilon_training_time(actual, epsilon)
        rows.append(TTComparisonRow(
            epsilon=float(epsilon),
            t_predicted=t_pred,
            t_actual=t_real,
            absolute_error=abs(t_pred - t_real),
        ))
    return rows
