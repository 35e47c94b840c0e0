"""
Spectrum Extrapolation Service
Power-law fits of the kernel spectrum and forecasts of loss curves on larger datasets
"""

import time
from typing import Optional, Tuple

import numpy as np
from scipy.optimize import bisect

from ..core.config import settings
from ..core.exceptions import ExtrapolationError, FitError, UsageError
from ..core.logger import LoggerMixin, get_application_logger
from ..core.metrics import track_stage
from ..models.training_models import (
    ExtrapolationConfig, GradientMatrix, LabelSet, LargerDatasetPrediction, LossCurve, LossKind,
    OutputVector, PowerLawFit, ProjectionTail, RunConfig
)
from .dynamics import closed_form_curve_from_spectrum, effective_lr
from .kernel import build_kernel, residual_projections, sym_eig

logger = get_application_logger("spectrum")


def default_fit_range(n: int, fraction: Optional[float] = None) -> Tuple[int, int]:
    """(1, floor(fraction * n)), dropping the numerically-zero tail"""
    fraction = settings.powerlaw_fit_fraction if fraction is None else fraction
    return 1, max(1, min(n, int(np.floor(fraction * n))))


def fit_powerlaw(values: np.ndarray, fit_range: Optional[Tuple[int, int]] = None) -> PowerLawFit:
    """Least-squares line through (log k, log value); k is 1-based"""
    values = np.asarray(values, dtype=np.float64)
    n = values.shape[0]
    k_lo, k_hi = fit_range or default_fit_range(n)
    if not 1 <= k_lo <= k_hi <= n:
        raise UsageError(f"Fit range ({k_lo}, {k_hi}) is outside 1..{n}")

    k = np.arange(k_lo, k_hi + 1, dtype=np.float64)
    window = values[k_lo - 1:k_hi]
    usable = np.isfinite(window) & (window > 0.0)
    excluded = int(np.count_nonzero(~usable))

    if np.count_nonzero(usable) < 2:
        raise FitError(f"Power-law fit needs at least 2 positive values, got {np.count_nonzero(usable)}")
    if excluded:
        logger.warning(f"Excluded {excluded} non-positive values from the power-law fit")

    log_k = np.log(k[usable])
    log_v = np.log(window[usable])
    slope, intercept = np.polyfit(log_k, log_v, 1)
    residual = float(np.sqrt(np.mean((intercept + slope * log_k - log_v) ** 2)))

    return PowerLawFit(
        c=float(np.exp(intercept)),
        s=float(-slope),
        fit_range=(k_lo, k_hi),
        residual=residual,
        excluded_count=excluded,
        n_points=int(np.count_nonzero(usable)),
    )


def corrected_exponent(fit: PowerLawFit, cfg: ExtrapolationConfig) -> float:
    """Subset slopes run flat; steepen by alpha * (N0/N - 1)"""
    return -fit.s + cfg.alpha * (cfg.n_subset / cfg.n_target - 1.0)


def extrapolate_eigs(fit: PowerLawFit, cfg: ExtrapolationConfig) -> np.ndarray:
    """Size-normalized eigenvalues c * k^(-s + alpha (N0/N - 1)) for k = 1..N*C"""
    k = np.arange(1, cfg.n_target * cfg.n_outputs + 1, dtype=np.float64)
    return fit.c * k ** corrected_exponent(fit, cfg)


def fit_projection_tail(p_subset: np.ndarray, k0: int, target_norm_sq: float,
                        n_target: int) -> ProjectionTail:
    """Keep p'_k for k < k0 and fit a tail a * k^-b through p'_k0 carrying the remaining mass"""
    p_subset = np.asarray(p_subset, dtype=np.float64)
    if not 1 <= k0 <= min(p_subset.shape[0], n_target):
        raise UsageError(f"k0={k0} must lie in 1..min(len(p), n_target)")

    head = p_subset[:k0 - 1]
    head_sum = float(head.sum())
    remaining = target_norm_sq - head_sum
    anchor = float(p_subset[k0 - 1])

    if remaining <= 0.0:
        raise ExtrapolationError(
            f"Head mass {head_sum:.6g} already reaches the target norm {target_norm_sq:.6g}"
        )
    if anchor <= 0.0:
        raise ExtrapolationError(f"Projection at k0={k0} is zero; the tail cannot be anchored")

    ratio = np.arange(k0, n_target + 1, dtype=np.float64) / k0

    if ratio.shape[0] == 1:
        b = 0.0
    else:
        def excess(exponent: float) -> float:
            return anchor * float(np.sum(ratio ** (-exponent))) - remaining

        lower, upper = settings.bisection_lower, settings.bisection_upper
        if excess(lower) < 0.0:
            raise ExtrapolationError(
                f"Target norm {target_norm_sq:.6g} needs a non-decaying tail (b < {lower})"
            )
        if excess(upper) > 0.0:
            raise ExtrapolationError(
                f"Target norm {target_norm_sq:.6g} is below the steepest admissible tail (b > {upper})"
            )
        b = bisect(excess, lower, upper, xtol=settings.bisection_tolerance)

    tail = anchor * ratio ** (-b)
    # Bisection leaves a residual of order xtol; rescale so the sum is exact
    scale = remaining / tail.sum()
    tail = tail * scale

    return ProjectionTail(
        values=np.concatenate([head, tail]),
        a=float(anchor * scale * k0 ** b),
        b=float(b),
    )


def extrapolate_projections(p_subset: np.ndarray, k0: int, target_norm_sq: float,
                            n_target: int) -> np.ndarray:
    return fit_projection_tail(p_subset, k0, target_norm_sq, n_target).values


class DatasetExtrapolator(LoggerMixin):
    """Forecasts the MSE loss curve of an N-sample dataset from an N0-sample subset"""

    def __init__(self, cfg: ExtrapolationConfig):
        super().__init__()
        self.cfg = cfg

    @track_stage("extrapolation")
    def run(self, gradients: GradientMatrix, f0: OutputVector, y: LabelSet,
            target_norm_sq: float, run: RunConfig) -> LargerDatasetPrediction:
        cfg = self.cfg
        if run.loss_kind != LossKind.MSE:
            raise UsageError("Larger-dataset extrapolation is defined for MSE only")
        if gradients.n_samples != cfg.n_subset or gradients.n_outputs != cfg.n_outputs:
            raise UsageError(
                f"Subset gradients are {gradients.n_samples}x{gradients.n_outputs}, "
                f"config expects {cfg.n_subset}x{cfg.n_outputs}"
            )

        start_time = time.perf_counter()

        eigen = sym_eig(build_kernel(gradients))
        fit = fit_powerlaw(eigen.eigenvalues / cfg.n_subset, cfg.fit_range)
        eigenvalues_hat = extrapolate_eigs(fit, cfg) * cfg.n_target

        projections = residual_projections(eigen, f0, y)
        tail = fit_projection_tail(
            projections.p, cfg.k0, target_norm_sq, cfg.n_target * cfg.n_outputs
        )

        lr = effective_lr(run.learning_rate, run.momentum)
        curve = closed_form_curve_from_spectrum(eigenvalues_hat, tail.values, lr, run.total_steps)

        self.logger.info(
            f"Extrapolated N0={cfg.n_subset} -> N={cfg.n_target}: c={fit.c:.4g}, s={fit.s:.4g}, "
            f"tail a={tail.a:.4g}, b={tail.b:.4g}"
        )
        self.log_performance("larger-dataset extrapolation", time.perf_counter() - start_time)

        return LargerDatasetPrediction(
            curve=LossCurve(values=curve.values / cfg.n_target),
            fit=fit,
            eigenvalues_subset=eigen.eigenvalues,
            eigenvalues_hat=eigenvalues_hat,
            projections_subset=projections.p,
            projections_hat=tail.values,
            tail=tail,
        )


def predict_curve_larger_dataset(gradients: GradientMatrix, f0: OutputVector, y: LabelSet,
                                 target_norm_sq: float, cfg: ExtrapolationConfig,
                                 run: RunConfig) -> LossCurve:
    """Per-sample loss curve predicted for the N-sample dataset"""
    return DatasetExtrapolator(cfg).run(gradients, f0, y, target_norm_sq, run).curve
