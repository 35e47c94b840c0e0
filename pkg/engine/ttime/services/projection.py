"""
Random Projection Service
Sparse-sign and Gaussian sketches of gradient matrices that preserve dot products in expectation
"""

import time
from concurrent.futures import ThreadPoolExecutor
from typing import Optional

import numpy as np
from scipy import sparse

from ..core.config import settings
from ..core.exceptions import DimensionError, UsageError
from ..core.logger import LoggerMixin
from ..core.metrics import projected_rows_total, track_stage
from ..models.training_models import (
    GradientMatrix, ProjectionErrorReport, ProjectionScheme, ProjectionSpec
)


def block_generator(seed: int, block: int) -> np.random.Generator:
    """Counter-based stream for one column block of the projection matrix"""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, block])))


def bernoulli_positions(rng: np.random.Generator, size: int, keep: float) -> np.ndarray:
    """Sorted indices of a Bernoulli(keep) mask over range(size)

    Gaps between kept indices are geometric, so memory scales with the number
    of kept entries rather than with size.
    """
    chunks = []
    last = -1
    while last < size - 1:
        expected = (size - 1 - last) * keep
        count = int(expected + 6.0 * np.sqrt(expected) + 16)
        positions = last + np.cumsum(rng.geometric(keep, size=count))
        chunks.append(positions)
        last = int(positions[-1])
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    positions = np.concatenate(chunks)
    return positions[positions < size]


class GradientProjector(LoggerMixin):
    """Projects gradient rows from D to D' dimensions without materializing R

    R is generated in column blocks of `block_columns`; block b is drawn from a
    Philox stream keyed by (seed, b), so the same spec always yields the same
    matrix regardless of how many workers run.
    """

    def __init__(self, spec: ProjectionSpec, block_columns: Optional[int] = None,
                 max_workers: Optional[int] = None):
        self.spec = spec
        self.block_columns = block_columns or settings.projection_block_columns
        self.max_workers = max_workers or settings.max_workers

    def _block_bounds(self):
        for block, start in enumerate(range(0, self.spec.input_dim, self.block_columns)):
            yield block, start, min(start + self.block_columns, self.spec.input_dim)

    def random_block(self, block: int, width: int):
        """Unscaled D' x width block of R with unit-variance entries"""
        rng = block_generator(self.spec.seed, block)
        shape = (self.spec.output_dim, width)

        if self.spec.scheme == ProjectionScheme.GAUSSIAN:
            return rng.standard_normal(shape)

        keep = 1.0 - self.spec.sparsity
        positions = bernoulli_positions(rng, shape[0] * shape[1], keep)
        signs = 2.0 * rng.integers(0, 2, size=positions.shape[0]) - 1.0
        rows, cols = np.divmod(positions, width)
        return sparse.csr_matrix((signs / np.sqrt(keep), (rows, cols)), shape=shape)

    def _project_block(self, data: np.ndarray, block: int, start: int, stop: int) -> np.ndarray:
        columns = np.asarray(data[:, start:stop], dtype=np.float64)
        random_block = self.random_block(block, stop - start)
        # (D' x w) @ (w x rows) keeps the sparse operand on the left
        return np.asarray(random_block @ columns.T).T

    @track_stage("projection")
    def project(self, gradients: GradientMatrix) -> GradientMatrix:
        if gradients.projected:
            raise UsageError("Gradients are already projected")
        if gradients.cols != self.spec.input_dim:
            raise DimensionError(
                f"Gradients have {gradients.cols} columns, projection expects {self.spec.input_dim}"
            )

        start_time = time.perf_counter()

        if self.spec.scheme == ProjectionScheme.IDENTITY:
            projected = gradients.data.astype(np.float64, copy=True)
        else:
            projected = np.zeros((gradients.rows, self.spec.output_dim))
            with ThreadPoolExecutor(max_workers=self.max_workers) as executor:
                partials = executor.map(
                    lambda bounds: self._project_block(gradients.data, *bounds),
                    self._block_bounds(),
                )
                # map yields in submission order, so the sum order is fixed
                for partial in partials:
                    projected += partial
            projected /= np.sqrt(self.spec.output_dim)

        projected_rows_total.labels(scheme=self.spec.scheme.value).inc(gradients.rows)
        self.log_performance(
            f"projection {gradients.cols}->{self.spec.output_dim} ({self.spec.scheme.value})",
            time.perf_counter() - start_time,
        )

        return GradientMatrix(
            data=projected,
            n_samples=gradients.n_samples,
            n_outputs=gradients.n_outputs,
            projected=True,
        )


def project_gradients(gradients: GradientMatrix, spec: ProjectionSpec) -> GradientMatrix:
    """Project gradient rows g -> R g / sqrt(D')"""
    return GradientProjector(spec).project(gradients)


def projection_error_report(gradients: GradientMatrix, spec: ProjectionSpec, n_pairs: int = 100,
                            seed: int = 0, kernel_rows_max: int = 4096) -> ProjectionErrorReport:
    """Dot-product distortion of a projection on sampled row pairs"""
    if n_pairs < 1:
        raise UsageError("n_pairs must be at least 1")

    projected = project_gradients(gradients, spec).data
    original = gradients.data.astype(np.float64)

    if gradients.rows == 1:
        first = second = np.zeros(1, dtype=np.int64)
    else:
        rng = np.random.default_rng(seed)
        first = rng.integers(0, gradients.rows, n_pairs)
        second = rng.integers(0, gradients.rows, n_pairs)

    exact = np.einsum("ij,ij->i", original[first], original[second])
    approx = np.einsum("ij,ij->i", projected[first], projected[second])
    absolute = np.abs(approx - exact)

    norms = np.linalg.norm(original, axis=1)
    scale = norms[first] * norms[second]
    relative = np.divide(absolute, scale, out=np.zeros_like(absolute), where=scale > 0)

    frobenius = None
    if gradients.rows <= kernel_rows_max:
        exact_kernel = original @ original.T
        reference = np.linalg.norm(exact_kernel)
        if reference > 0:
            frobenius = float(np.linalg.norm(projected @ projected.T - exact_kernel) / reference)

    return ProjectionErrorReport(
        n_pairs=int(first.shape[0]),
        mean_abs_error=float(absolute.mean()),
        max_abs_error=float(absolute.max()),
        mean_relative_error=float(relative.mean()),
        max_relative_error=float(relative.max()),
        kernel_frobenius_error=frobenius,
    )
