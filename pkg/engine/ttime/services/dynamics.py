"""
Function-Space Dynamics Service
Deterministic and stochastic linearized training dynamics plus the MSE closed forms

Time is measured in optimizer steps: one unit of t is one update.
"""

import asyncio
import time
from concurrent.futures import ThreadPoolExecutor
from functools import partial
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.integrate import solve_ivp

from ..core.config import settings
from ..core.exceptions import (
    DimensionError, DomainError, InstabilityError, NumericalError, UsageError
)
from ..core.logger import LoggerMixin, get_application_logger
from ..core.metrics import track_stage
from ..models.training_models import (
    BATCH_INF, CurveKind, EigenSystem, GradientMatrix, Integrator, KernelMatrix, LabelSet,
    LossCurve, LossKind, NoiseModel, OutputVector, ReplicateSummary, ResidualProjections,
    RunConfig, Trajectory
)
from .losses import batched_error_rates, batched_loss_values, loss_grad_outputs, output_gradient

logger = get_application_logger("dynamics")


def effective_lr(learning_rate: float, momentum: float) -> float:
    """Drift-equivalent learning rate eta / (1 - m) of SGD with momentum"""
    if not 0.0 <= momentum < 1.0:
        raise DomainError(f"Momentum must lie in [0, 1), got {momentum}")
    return learning_rate / (1.0 - momentum)


def _check_inputs(kernel: KernelMatrix, f0: OutputVector, y: LabelSet) -> None:
    if kernel.size != f0.values.shape[0]:
        raise DimensionError(f"Kernel size {kernel.size} != output length {f0.values.shape[0]}")
    if (f0.n_samples, f0.n_outputs) != (y.n_samples, y.n_outputs):
        raise DimensionError("Outputs and labels disagree in shape")


def _drift(theta: np.ndarray, f: np.ndarray, y: LabelSet, kind: LossKind, lr: float) -> np.ndarray:
    return -lr * (theta @ output_gradient(f, y, kind))


def _guard(step: int, loss: float, threshold: float) -> None:
    if not np.isfinite(loss) or loss > threshold:
        raise InstabilityError(step, float(loss), threshold)


def build_trajectory(outputs: np.ndarray, y: LabelSet, kind: LossKind, solver: str) -> Trajectory:
    """Attach loss and (where defined) error curves to an output history"""
    loss = LossCurve(values=batched_loss_values(outputs, y, kind), kind=CurveKind.LOSS)
    error = None
    if y.supports_error():
        error = LossCurve(values=batched_error_rates(outputs, y), kind=CurveKind.ERROR)
    return Trajectory(
        outputs=outputs,
        loss=loss,
        error=error,
        n_samples=y.n_samples,
        n_outputs=y.n_outputs,
        solver=solver,
    )


# ---------------------------------------------------------------------------
# Deterministic flow


def _integrate_fixed(rhs: Callable[[np.ndarray], np.ndarray], f0: np.ndarray, steps: int,
                     n_sub: int, loss_fn: Callable[[np.ndarray], float], threshold: float,
                     rk4: bool = True) -> np.ndarray:
    outputs = np.empty((steps + 1, f0.shape[0]))
    outputs[0] = f0
    f = f0.copy()
    h = 1.0 / n_sub

    for step in range(1, steps + 1):
        for _ in range(n_sub):
            if rk4:
                k1 = rhs(f)
                k2 = rhs(f + 0.5 * h * k1)
                k3 = rhs(f + 0.5 * h * k2)
                k4 = rhs(f + h * k3)
                f = f + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            else:
                f = f + rhs(f)
        _guard(step, loss_fn(f), threshold)
        outputs[step] = f

    return outputs


def _integrate_rk4_refined(rhs, f0, steps, loss_fn, threshold, n_sub: int, max_sub: int,
                           tolerance: float) -> np.ndarray:
    outputs = _integrate_fixed(rhs, f0, steps, n_sub, loss_fn, threshold)
    final = loss_fn(outputs[-1])

    while n_sub < max_sub:
        n_sub = min(2 * n_sub, max_sub)
        refined = _integrate_fixed(rhs, f0, steps, n_sub, loss_fn, threshold)
        refined_final = loss_fn(refined[-1])
        agreed = abs(refined_final - final) <= tolerance * max(1.0, abs(refined_final))
        outputs, final = refined, refined_final
        if agreed:
            logger.debug(f"RK4 converged with {n_sub} substeps per step")
            return outputs

    logger.warning(f"RK4 refinement hit the substep cap ({max_sub}); using the finest solution")
    return outputs


def _integrate_lsoda(rhs, f0, steps, loss_fn, threshold) -> np.ndarray:
    solution = solve_ivp(
        lambda _, f: rhs(f),
        (0.0, float(steps)),
        f0,
        method="LSODA",
        t_eval=np.arange(steps + 1, dtype=np.float64),
        rtol=1e-10,
        atol=1e-12,
    )
    if not solution.success:
        raise NumericalError(f"LSODA failed: {solution.message}")

    outputs = solution.y.T.copy()
    outputs[0] = f0
    for step in range(1, steps + 1):
        _guard(step, loss_fn(outputs[step]), threshold)
    return outputs


@track_stage("ode")
def solve_ode(kernel: KernelMatrix, f0: OutputVector, y: LabelSet, cfg: RunConfig,
              integrator: Integrator = Integrator.RK4, n_sub: Optional[int] = None) -> Trajectory:
    """Integrate df/dt = -eta_eff * Theta * grad_f L over cfg.total_steps unit steps"""
    _check_inputs(kernel, f0, y)
    if not cfg.is_full_batch(f0.n_samples):
        raise UsageError("The deterministic flow models full-batch runs; use solve_sde for mini-batches")

    lr = effective_lr(cfg.learning_rate, cfg.momentum)
    theta = kernel.data
    kind = cfg.loss_kind
    threshold = settings.divergence_threshold

    rhs = partial(_drift, theta, y=y, kind=kind, lr=lr)
    loss_fn = lambda f: float(batched_loss_values(f[None, :], y, kind)[0])
    start = f0.values.copy()

    if integrator == Integrator.EULER:
        outputs = _integrate_fixed(rhs, start, cfg.total_steps, 1, loss_fn, threshold, rk4=False)
    elif integrator == Integrator.LSODA:
        outputs = _integrate_lsoda(rhs, start, cfg.total_steps, loss_fn, threshold)
    else:
        outputs = _integrate_rk4_refined(
            rhs, start, cfg.total_steps, loss_fn, threshold,
            n_sub=n_sub or settings.rk4_substeps,
            max_sub=settings.rk4_max_substeps,
            tolerance=settings.rk4_refinement_tolerance,
        )

    return build_trajectory(outputs, y, kind, f"ode-{integrator.value}")


# ---------------------------------------------------------------------------
# Stochastic flow


def estimate_sigma_diag(gradients: GradientMatrix, f0: OutputVector, y: LabelSet,
                        kind: LossKind = LossKind.MSE) -> NoiseModel:
    """Diagonal of the per-sample weight-gradient covariance at initialization"""
    if gradients.rows != f0.values.shape[0]:
        raise DimensionError("Gradient rows do not match the output length")

    grad_f = loss_grad_outputs(f0, y, kind)
    g0_norm = float(np.linalg.norm(grad_f))

    if f0.n_samples == 1:
        logger.warning("Noise estimated from a single sample; variance is zero")
        return NoiseModel(sigma_diag=np.zeros(gradients.cols), g0_norm=g0_norm)

    # h_i = sum_j grad f_j(x_i) * dL/df_j(x_i)
    per_sample = np.einsum(
        "ncd,nc->nd",
        np.asarray(gradients.data, dtype=np.float64).reshape(f0.n_samples, f0.n_outputs, -1),
        grad_f.reshape(f0.n_samples, f0.n_outputs),
    )
    return NoiseModel(sigma_diag=np.var(per_sample, axis=0), g0_norm=g0_norm)


@track_stage("sde")
def solve_sde(kernel: KernelMatrix, gradients: GradientMatrix, noise: NoiseModel,
              f0: OutputVector, y: LabelSet, cfg: RunConfig, seed: Optional[int] = None) -> Trajectory:
    """Euler-Maruyama with one step per optimizer update

    f <- f - eta_eff Theta grad_f L + (eta_eff / sqrt(B)) sqrt(1/(1-m)) r_t Gp (sqrt(sigma) * z)
    where r_t = |grad_f L_t| / |grad_f L_0| rescales the initial noise estimate.
    """
    _check_inputs(kernel, f0, y)
    if cfg.batch_size == BATCH_INF:
        raise UsageError("The stochastic flow needs a finite batch size")
    if not gradients.projected:
        raise UsageError("The stochastic flow expects projected gradients")
    if gradients.rows != kernel.size or gradients.cols != noise.sigma_diag.shape[0]:
        raise DimensionError("Gradients, kernel and noise model disagree in shape")

    lr = effective_lr(cfg.learning_rate, cfg.momentum)
    noise_scale = lr / np.sqrt(cfg.batch_size) * np.sqrt(1.0 / (1.0 - cfg.momentum))
    rng = np.random.default_rng(cfg.seed if seed is None else seed)

    theta = kernel.data
    basis = np.asarray(gradients.data, dtype=np.float64)
    sqrt_sigma = np.sqrt(noise.sigma_diag)
    kind = cfg.loss_kind
    threshold = settings.divergence_threshold

    outputs = np.empty((cfg.total_steps + 1, f0.values.shape[0]))
    outputs[0] = f0.values
    f = f0.values.copy()

    for step in range(1, cfg.total_steps + 1):
        grad_f = output_gradient(f, y, kind)
        drift = -lr * (theta @ grad_f)
        rescale = np.linalg.norm(grad_f) / noise.g0_norm if noise.g0_norm > 0.0 else 0.0
        z = rng.standard_normal(sqrt_sigma.shape[0])
        f = f + drift + (noise_scale * rescale) * (basis @ (sqrt_sigma * z))
        _guard(step, float(batched_loss_values(f[None, :], y, kind)[0]), threshold)
        outputs[step] = f

    return build_trajectory(outputs, y, kind, "sde")


class ReplicateRunner(LoggerMixin):
    """Runs independent SDE seeds concurrently and aggregates their loss and error curves"""

    def __init__(self, max_workers: Optional[int] = None):
        super().__init__()
        self.max_workers = max_workers or settings.max_workers

    async def run(self, kernel: KernelMatrix, gradients: GradientMatrix, noise: NoiseModel,
                  f0: OutputVector, y: LabelSet, cfg: RunConfig,
                  seeds: Sequence[int]) -> ReplicateSummary:
        if not seeds:
            raise UsageError("At least one seed is required")

        start_time = time.perf_counter()
        loop = asyncio.get_running_loop()

        with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
            tasks = [
                loop.run_in_executor(
                    executor,
                    partial(solve_sde, kernel, gradients, noise, f0, y, cfg, seed),
                )
                for seed in seeds
            ]
            trajectories: List[Trajectory] = await asyncio.gather(*tasks)

        ordered = sorted(zip(seeds, trajectories), key=lambda pair: pair[0])
        losses = np.stack([trajectory.loss.values for _, trajectory in ordered])
        mean_error = None
        if all(trajectory.error is not None for _, trajectory in ordered):
            errors = np.stack([trajectory.error.values for _, trajectory in ordered])
            mean_error = LossCurve(values=np.clip(errors.mean(axis=0), 0.0, 1.0), kind=CurveKind.ERROR)

        self.log_performance(f"{len(seeds)} SDE replicates", time.perf_counter() - start_time)

        return ReplicateSummary(
            seeds=[seed for seed, _ in ordered],
            trajectories=[trajectory for _, trajectory in ordered],
            mean_loss=LossCurve(values=losses.mean(axis=0)),
            std_loss=LossCurve(values=losses.std(axis=0)),
            mean_error=mean_error,
        )

    def run_sync(self, *args, **kwargs) -> ReplicateSummary:
        return asyncio.run(self.run(*args, **kwargs))


# ---------------------------------------------------------------------------
# MSE closed forms


def closed_form_mse_curve(eigen: EigenSystem, projections: ResidualProjections, lr: float,
                          steps: int) -> LossCurve:
    """L_t = sum_k p_k exp(-2 lr lambda_k t) for t = 0..steps"""
    return closed_form_curve_from_spectrum(eigen.eigenvalues, projections.p, lr, steps)


def closed_form_curve_from_spectrum(eigenvalues: np.ndarray, p: np.ndarray, lr: float,
                                    steps: int) -> LossCurve:
    if eigenvalues.shape != p.shape:
        raise DimensionError("Eigenvalues and projections differ in length")
    t = np.arange(steps + 1, dtype=np.float64)
    return LossCurve(values=np.exp(-2.0 * lr * np.outer(t, eigenvalues)) @ p)


def closed_form_mse_outputs(eigen: EigenSystem, f0: OutputVector, y: LabelSet, lr: float,
                            t: float) -> OutputVector:
    """f_t = Y - V exp(-lr Lambda t) V^T (Y - f0)"""
    if not y.has_real_targets:
        raise UsageError("Closed-form outputs need real MSE targets")
    targets = y.regression_targets()
    coordinates = eigen.eigenvectors.T @ (targets - f0.values)
    decayed = eigen.eigenvectors @ (np.exp(-lr * eigen.eigenvalues * t) * coordinates)
    return OutputVector(values=targets - decayed, n_samples=f0.n_samples, n_outputs=f0.n_outputs)


def closed_form_trajectory(eigen: EigenSystem, f0: OutputVector, y: LabelSet,
                           cfg: RunConfig) -> Trajectory:
    """Exact MSE flow sampled at every integer step"""
    if cfg.loss_kind != LossKind.MSE or not y.has_real_targets:
        raise UsageError("Cross-entropy dynamics have no closed form")

    lr = effective_lr(cfg.learning_rate, cfg.momentum)
    targets = y.regression_targets()
    coordinates = eigen.eigenvectors.T @ (targets - f0.values)
    t = np.arange(cfg.total_steps + 1, dtype=np.float64)
    decay = np.exp(-lr * np.outer(t, eigen.eigenvalues))
    outputs = targets[None, :] - (decay * coordinates) @ eigen.eigenvectors.T
    outputs[0] = f0.values
    return build_trajectory(outputs, y, LossKind.MSE, "closed-form")
