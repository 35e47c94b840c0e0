"""
Empirical NTK construction, symmetric eigendecomposition and residual projections
"""

import time
from concurrent.futures import ThreadPoolExecutor
from itertools import combinations_with_replacement
from typing import Optional

import numpy as np
import scipy.linalg

from ..core.config import settings
from ..core.exceptions import DimensionError, EigenConvergenceError, UsageError
from ..core.logger import get_application_logger
from ..core.metrics import eigendecompositions_total, track_kernel_build, track_stage
from ..models.training_models import (
    EigenMethod, EigenSystem, GradientMatrix, KernelMatrix, LabelSet, OutputVector,
    ResidualProjections
)

logger = get_application_logger("kernel")

KERNEL_ROW_BLOCK = 1024


@track_stage("kernel")
def build_kernel(gradients: GradientMatrix, row_block: int = KERNEL_ROW_BLOCK,
                 max_workers: Optional[int] = None) -> KernelMatrix:
    """Theta = G G^T accumulated in float64, one task per upper-triangular block pair"""
    start_time = time.perf_counter()
    data = gradients.data
    n = gradients.rows
    kernel = np.zeros((n, n))

    starts = list(range(0, n, row_block))
    pairs = list(combinations_with_replacement(starts, 2))

    def block_product(pair):
        a, b = pair
        left = np.asarray(data[a:a + row_block], dtype=np.float64)
        right = np.asarray(data[b:b + row_block], dtype=np.float64)
        return pair, left @ right.T

    with ThreadPoolExecutor(max_workers=max_workers or settings.max_workers) as executor:
        for (a, b), block in executor.map(block_product, pairs):
            kernel[a:a + block.shape[0], b:b + block.shape[1]] = block
            kernel[b:b + block.shape[1], a:a + block.shape[0]] = block.T

    kernel = 0.5 * (kernel + kernel.T)
    duration = time.perf_counter() - start_time
    track_kernel_build(n, duration)
    logger.debug(f"Built {n}x{n} kernel from {gradients.cols} columns in {duration:.3f}s")
    return KernelMatrix(data=kernel)


def jacobi_eigh(matrix: np.ndarray, max_sweeps: int, tolerance: float = 1e-14):
    """Cyclic Jacobi rotations; returns unsorted eigenvalues and eigenvectors"""
    a = np.array(matrix, dtype=np.float64)
    n = a.shape[0]
    vectors = np.eye(n)
    scale = max(np.linalg.norm(a), np.finfo(float).tiny)

    for sweep in range(max_sweeps):
        off_diagonal = np.sqrt(max(np.sum(a * a) - np.sum(np.diag(a) ** 2), 0.0))
        if off_diagonal <= tolerance * scale:
            logger.debug(f"Jacobi converged after {sweep} sweeps")
            return np.diag(a).copy(), vectors

        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) <= np.finfo(float).tiny:
                    continue
                theta = (a[q, q] - a[p, p]) / (2.0 * a[p, q])
                t = (1.0 if theta >= 0.0 else -1.0) / (abs(theta) + np.sqrt(theta * theta + 1.0))
                c = 1.0 / np.sqrt(t * t + 1.0)
                s = t * c

                col_p, col_q = a[:, p].copy(), a[:, q].copy()
                a[:, p], a[:, q] = c * col_p - s * col_q, s * col_p + c * col_q
                row_p, row_q = a[p, :].copy(), a[q, :].copy()
                a[p, :], a[q, :] = c * row_p - s * row_q, s * row_p + c * row_q
                vec_p, vec_q = vectors[:, p].copy(), vectors[:, q].copy()
                vectors[:, p], vectors[:, q] = c * vec_p - s * vec_q, s * vec_p + c * vec_q

    raise EigenConvergenceError(max_sweeps, "off-diagonal mass above tolerance")


@track_stage("eigen")
def sym_eig(kernel: KernelMatrix, method: EigenMethod = EigenMethod.LAPACK,
            max_sweeps: Optional[int] = None) -> EigenSystem:
    """Full eigendecomposition, eigenvalues descending and clamped at zero"""
    if method == EigenMethod.JACOBI:
        eigenvalues, eigenvectors = jacobi_eigh(kernel.data, max_sweeps or settings.jacobi_max_sweeps)
    else:
        try:
            eigenvalues, eigenvectors = scipy.linalg.eigh(kernel.data)
        except np.linalg.LinAlgError as e:
            raise EigenConvergenceError(0, str(e)) from e

    eigendecompositions_total.labels(method=method.value).inc()

    order = np.argsort(eigenvalues, kind="stable")[::-1]
    eigenvalues = eigenvalues[order]
    eigenvectors = eigenvectors[:, order]

    negative = eigenvalues < 0.0
    clamped_mass = float(-eigenvalues[negative].sum())
    top = max(float(eigenvalues[0]), 0.0) if eigenvalues.size else 0.0
    if np.any(eigenvalues < -settings.negative_eigenvalue_tolerance * top):
        logger.warning(
            f"Clamping {int(negative.sum())} negative eigenvalues "
            f"(most negative {eigenvalues[-1]:.3e}, lambda_1 {top:.3e})"
        )
    eigenvalues = np.where(negative, 0.0, eigenvalues)

    return EigenSystem(
        eigenvalues=eigenvalues,
        eigenvectors=eigenvectors,
        clamped_mass=clamped_mass,
        method=method,
    )


def residual_projections(eigen: EigenSystem, f0: OutputVector, y: LabelSet) -> ResidualProjections:
    """Squared coordinates of Y - f0 in the kernel eigenbasis"""
    if not y.has_real_targets:
        raise UsageError("Closed-form spectral analysis needs real MSE targets, not class labels")
    if f0.values.shape[0] != eigen.eigenvalues.shape[0]:
        raise DimensionError(
            f"Outputs have length {f0.values.shape[0]}, kernel has size {eigen.eigenvalues.shape[0]}"
        )
    if (f0.n_samples, f0.n_outputs) != (y.n_samples, y.n_outputs):
        raise DimensionError("Outputs and labels disagree in shape")

    delta_y = y.regression_targets() - f0.values
    coordinates = eigen.eigenvectors.T @ delta_y
    return ResidualProjections(delta_y=delta_y, p=coordinates ** 2)
