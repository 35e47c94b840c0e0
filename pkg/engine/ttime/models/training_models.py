"""
Training-Time Toolkit Data Models
Defines all data structures using Pydantic for validation and serialization
"""

from enum import Enum
from typing import List, Literal, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from ..core.config import settings

BATCH_INF: Literal["inf"] = "inf"
SEED_MAX = 2**64 - 1


class LossKind(str, Enum):
    """Supported training losses"""

    MSE = "mse"
    CROSS_ENTROPY = "ce"


class CurveKind(str, Enum):
    """What a curve measures"""

    LOSS = "loss"
    ERROR = "error"


class GradientDType(str, Enum):
    """On-disk element type of a gradient matrix"""

    F32 = "f32"
    F64 = "f64"


class ProjectionScheme(str, Enum):
    """Random projection families"""

    GAUSSIAN = "gaussian"
    SIGN_SPARSE = "sign_sparse"
    IDENTITY = "identity"


class Integrator(str, Enum):
    """ODE integrators"""

    RK4 = "rk4"
    LSODA = "lsoda"
    EULER = "euler"


class EigenMethod(str, Enum):
    """Symmetric eigensolvers"""

    LAPACK = "lapack"
    JACOBI = "jacobi"


class ModelKind(str, Enum):
    """Reference model families"""

    LINEAR = "linear"
    MLP1 = "mlp1"


class Activation(str, Enum):
    TANH = "tanh"


class TrainMode(str, Enum):
    GD = "gd"
    SGD = "sgd"


class BatchSampling(str, Enum):
    WITH_REPLACEMENT = "with_replacement"
    WITHOUT_REPLACEMENT = "without_replacement"


class ArrayModel(BaseModel):
    """Base for models that carry numpy arrays"""

    model_config = ConfigDict(arbitrary_types_allowed=True)


def _float_vector(value) -> np.ndarray:
    array = np.asarray(value, dtype=np.float64)
    if array.ndim != 1:
        raise ValueError(f"Expected a vector, got shape {array.shape}")
    return array


# ---------------------------------------------------------------------------
# Run configuration


class RunConfig(BaseModel):
    """Optimizer hyper-parameters of the run being forecast"""

    learning_rate: float = Field(..., gt=0.0)
    momentum: float = Field(default=0.0, ge=0.0, lt=1.0)
    batch_size: Union[int, Literal["inf"]] = BATCH_INF
    total_steps: int = Field(..., ge=1)
    epsilon: float = Field(default=0.01, gt=0.0)
    loss_kind: LossKind = LossKind.MSE
    seed: int = Field(default=0, ge=0, le=SEED_MAX)

    @field_validator("batch_size")
    @classmethod
    def validate_batch_size(cls, value):
        if value != BATCH_INF and value < 1:
            raise ValueError("Batch size must be a positive integer or 'inf'")
        return value

    def is_full_batch(self, n_samples: int) -> bool:
        """True when the run is plain gradient descent"""
        return self.batch_size == BATCH_INF or self.batch_size == n_samples


class OracleRunConfig(RunConfig):
    """Run configuration for the reference trainers; a frozen optimizer is allowed"""

    learning_rate: float = Field(..., ge=0.0)


# ---------------------------------------------------------------------------
# Outputs, labels and curves


class OutputVector(ArrayModel):
    """Stacked per-sample outputs, sample-major"""

    values: np.ndarray
    n_samples: int = Field(..., ge=1)
    n_outputs: int = Field(..., ge=1)

    @field_validator("values", mode="before")
    @classmethod
    def coerce_values(cls, value):
        return _float_vector(value)

    @model_validator(mode="after")
    def validate_length(self) -> "OutputVector":
        if self.values.shape[0] != self.n_samples * self.n_outputs:
            raise ValueError(
                f"Output length {self.values.shape[0]} != "
                f"{self.n_samples} x {self.n_outputs}"
            )
        return self

    @classmethod
    def from_matrix(cls, matrix) -> "OutputVector":
        matrix = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
        return cls(values=matrix.reshape(-1), n_samples=matrix.shape[0], n_outputs=matrix.shape[1])

    @property
    def matrix(self) -> np.ndarray:
        return self.values.reshape(self.n_samples, self.n_outputs)


class LabelSet(ArrayModel):
    """Training labels: real targets (MSE) and/or integer classes (cross-entropy)"""

    n_samples: int = Field(..., ge=1)
    n_outputs: int = Field(..., ge=1)
    targets: Optional[np.ndarray] = None
    classes: Optional[np.ndarray] = None

    @field_validator("targets", mode="before")
    @classmethod
    def coerce_targets(cls, value):
        return None if value is None else _float_vector(value)

    @field_validator("classes", mode="before")
    @classmethod
    def coerce_classes(cls, value):
        if value is None:
            return None
        array = np.asarray(value)
        if array.ndim != 1 or (array.size and not np.all(np.equal(np.mod(array, 1), 0))):
            raise ValueError("Class labels must be a vector of integers")
        return array.astype(np.int64)

    @model_validator(mode="after")
    def validate_labels(self) -> "LabelSet":
        if self.targets is None and self.classes is None:
            raise ValueError("A label set needs targets or classes")
        if self.targets is not None and self.targets.shape[0] != self.n_samples * self.n_outputs:
            raise ValueError("MSE target length must equal n_samples x n_outputs")
        if self.classes is not None:
            if self.classes.shape[0] != self.n_samples:
                raise ValueError("One class index per sample is required")
            if np.any(self.classes < 0) or np.any(self.classes >= self.n_outputs):
                raise ValueError(f"Class indices must lie in [0, {self.n_outputs})")
        return self

    @classmethod
    def from_classes(cls, classes, n_outputs: int, one_hot_targets: bool = False) -> "LabelSet":
        classes = np.asarray(classes, dtype=np.int64)
        targets = None
        if one_hot_targets:
            targets = np.eye(n_outputs)[classes].reshape(-1)
        return cls(n_samples=classes.shape[0], n_outputs=n_outputs, classes=classes, targets=targets)

    @classmethod
    def from_targets(cls, targets, n_samples: int, n_outputs: int) -> "LabelSet":
        return cls(n_samples=n_samples, n_outputs=n_outputs, targets=targets)

    @property
    def has_real_targets(self) -> bool:
        return self.targets is not None

    def regression_targets(self) -> np.ndarray:
        """Real targets; one-hot encodings are derived from classes when needed"""
        if self.targets is not None:
            return self.targets
        return np.eye(self.n_outputs)[self.classes].reshape(-1)

    def class_labels(self) -> np.ndarray:
        """Class index per sample; single-output targets map +1 to class 1, else 0"""
        if self.classes is not None:
            return self.classes
        matrix = self.targets.reshape(self.n_samples, self.n_outputs)
        if self.n_outputs == 1:
            return (matrix[:, 0] > 0).astype(np.int64)
        return np.argmax(matrix, axis=1)

    def supports_error(self) -> bool:
        """Error rate is defined for multi-class labels or +-1 single-output targets"""
        if self.n_outputs >= 2:
            return True
        if self.targets is None:
            return False
        return bool(np.all(np.isin(self.targets, (-1.0, 1.0))))


class LossCurve(ArrayModel):
    """Loss or error value at every step t = 0..T"""

    values: np.ndarray
    kind: CurveKind = CurveKind.LOSS

    @field_validator("values", mode="before")
    @classmethod
    def coerce_values(cls, value):
        return _float_vector(value)

    @model_validator(mode="after")
    def validate_values(self) -> "LossCurve":
        if self.values.shape[0] < 1:
            raise ValueError("A curve needs at least one point")
        if self.kind == CurveKind.ERROR and (
            np.any(self.values < 0.0) or np.any(self.values > 1.0)
        ):
            raise ValueError("Error curve values must lie in [0, 1]")
        return self

    @property
    def total_steps(self) -> int:
        return self.values.shape[0] - 1


# ---------------------------------------------------------------------------
# Gradients, projections and datasets


class GradientMatrix(ArrayModel):
    """Per-sample, per-output parameter gradients; row i*C + j holds grad f_j(x_i)"""

    data: np.ndarray
    n_samples: int = Field(..., ge=1)
    n_outputs: int = Field(..., ge=1)
    projected: bool = False

    @field_validator("data", mode="before")
    @classmethod
    def coerce_data(cls, value):
        array = np.asarray(value)
        if array.dtype not in (np.float32, np.float64):
            array = array.astype(np.float64)
        if array.ndim != 2:
            raise ValueError(f"Gradient data must be a matrix, got shape {array.shape}")
        return array

    @model_validator(mode="after")
    def validate_shape(self) -> "GradientMatrix":
        if self.data.shape[0] != self.n_samples * self.n_outputs:
            raise ValueError(
                f"Gradient rows {self.data.shape[0]} != {self.n_samples} x {self.n_outputs}"
            )
        if not np.all(np.isfinite(self.data)):
            raise ValueError("Gradient entries must be finite")
        return self

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dtype(self) -> GradientDType:
        return GradientDType.F32 if self.data.dtype == np.float32 else GradientDType.F64


class DatasetSpec(BaseModel):
    """Gaussian-blob classification dataset"""

    n_samples: int = Field(..., ge=2)
    n_classes: int = Field(..., ge=2)
    input_dim: int = Field(..., ge=1)
    cluster_separation: float = Field(default=5.0, gt=0.0)
    noise_std: float = Field(default=1.0, ge=0.0)
    seed: int = Field(default=0, ge=0, le=SEED_MAX)

    @model_validator(mode="after")
    def validate_counts(self) -> "DatasetSpec":
        if self.n_samples < self.n_classes:
            raise ValueError("n_samples must be at least n_classes")
        return self


class ProjectionSpec(BaseModel):
    """Random projection from D to D' dimensions"""

    input_dim: int = Field(..., ge=1)
    output_dim: int = Field(..., ge=1)
    seed: int = Field(default=0, ge=0, le=SEED_MAX)
    scheme: ProjectionScheme = ProjectionScheme.SIGN_SPARSE
    sparsity: float = Field(default=2.0 / 3.0, ge=0.0, lt=1.0)

    @model_validator(mode="after")
    def validate_dims(self) -> "ProjectionSpec":
        if self.output_dim > self.input_dim:
            raise ValueError(
                f"Projection dimension {self.output_dim} exceeds input dimension {self.input_dim}"
            )
        if self.scheme == ProjectionScheme.IDENTITY and self.output_dim != self.input_dim:
            raise ValueError("Identity projection requires output_dim == input_dim")
        return self


class ProjectionErrorReport(BaseModel):
    """Dot-product distortion introduced by a projection"""

    n_pairs: int
    mean_abs_error: float
    max_abs_error: float
    mean_relative_error: float
    max_relative_error: float
    kernel_frobenius_error: Optional[float] = None


# ---------------------------------------------------------------------------
# Kernel and spectrum


class KernelMatrix(ArrayModel):
    """Empirical NTK over stacked outputs"""

    data: np.ndarray

    @field_validator("data", mode="before")
    @classmethod
    def coerce_data(cls, value):
        array = np.asarray(value, dtype=np.float64)
        if array.ndim != 2 or array.shape[0] != array.shape[1]:
            raise ValueError(f"Kernel must be square, got shape {array.shape}")
        scale = max(1.0, float(np.max(np.abs(array)))) if array.size else 1.0
        if array.size and np.max(np.abs(array - array.T)) > settings.symmetry_tolerance * scale:
            raise ValueError("Kernel must be symmetric")
        return array

    @property
    def size(self) -> int:
        return self.data.shape[0]


class EigenSystem(ArrayModel):
    """Eigenvalues in descending order with orthonormal eigenvector columns"""

    eigenvalues: np.ndarray
    eigenvectors: np.ndarray
    clamped_mass: float = Field(default=0.0, ge=0.0)
    method: EigenMethod = EigenMethod.LAPACK

    @field_validator("eigenvalues", mode="before")
    @classmethod
    def coerce_eigenvalues(cls, value):
        return _float_vector(value)

    @model_validator(mode="after")
    def validate_spectrum(self) -> "EigenSystem":
        n = self.eigenvalues.shape[0]
        if self.eigenvectors.shape != (n, n):
            raise ValueError("Eigenvector matrix must be n x n")
        if np.any(self.eigenvalues < 0.0):
            raise ValueError("Eigenvalues must be clamped to be non-negative")
        if np.any(np.diff(self.eigenvalues) > 0.0):
            raise ValueError("Eigenvalues must be sorted in descending order")
        return self


class ResidualProjections(ArrayModel):
    """Initial residual and its squared coordinates in the eigenbasis"""

    delta_y: np.ndarray
    p: np.ndarray

    @field_validator("p")
    @classmethod
    def validate_p(cls, value: np.ndarray) -> np.ndarray:
        if np.any(value < 0.0):
            raise ValueError("Residual projections must be non-negative")
        return value


class PowerLawFit(BaseModel):
    """Least-squares fit of values ~ c * k^-s in log-log coordinates"""

    c: float = Field(..., gt=0.0)
    s: float
    fit_range: Tuple[int, int]
    residual: float = Field(default=0.0, ge=0.0)
    excluded_count: int = Field(default=0, ge=0)
    n_points: int = Field(default=0, ge=0)

    @field_validator("fit_range")
    @classmethod
    def validate_range(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if value[0] < 1 or value[1] < value[0]:
            raise ValueError("Fit range must satisfy 1 <= k_lo <= k_hi")
        return value


class ExtrapolationConfig(BaseModel):
    """How a subset's spectrum is carried over to a larger dataset"""

    alpha: float = Field(default=0.15, ge=0.0)
    k0: int = Field(default=100, ge=1)
    n_subset: int = Field(..., ge=1)
    n_target: int = Field(..., ge=1)
    n_outputs: int = Field(default=1, ge=1)
    fit_range: Optional[Tuple[int, int]] = None

    @model_validator(mode="after")
    def validate_sizes(self) -> "ExtrapolationConfig":
        if not 1 <= self.k0 <= self.n_subset <= self.n_target:
            raise ValueError("Extrapolation needs 1 <= k0 <= n_subset <= n_target")
        return self


class ProjectionTail(ArrayModel):
    """Extrapolated residual projections with the fitted tail law a * k^-b"""

    values: np.ndarray
    a: float
    b: float


class LargerDatasetPrediction(ArrayModel):
    """Everything produced while forecasting a larger dataset from a subset"""

    curve: LossCurve
    fit: PowerLawFit
    eigenvalues_subset: np.ndarray
    eigenvalues_hat: np.ndarray
    projections_subset: np.ndarray
    projections_hat: np.ndarray
    tail: ProjectionTail


# ---------------------------------------------------------------------------
# Dynamics


class NoiseModel(ArrayModel):
    """Diagonal gradient-noise covariance estimated at initialization"""

    sigma_diag: np.ndarray
    g0_norm: float = Field(..., ge=0.0)

    @field_validator("sigma_diag", mode="before")
    @classmethod
    def coerce_sigma_diag(cls, value):
        return _float_vector(value)

    @field_validator("sigma_diag")
    @classmethod
    def validate_sigma(cls, value: np.ndarray) -> np.ndarray:
        if np.any(value < 0.0):
            raise ValueError("Noise variances must be non-negative")
        return value


class Trajectory(ArrayModel):
    """Function-space outputs and the derived curves at integer steps"""

    outputs: np.ndarray
    loss: LossCurve
    error: Optional[LossCurve] = None
    n_samples: int
    n_outputs: int
    solver: str = "ode"

    @model_validator(mode="after")
    def validate_lengths(self) -> "Trajectory":
        if self.outputs.shape[0] != self.loss.values.shape[0]:
            raise ValueError("Outputs and loss curve lengths differ")
        if self.error is not None and self.error.values.shape[0] != self.loss.values.shape[0]:
            raise ValueError("Error and loss curve lengths differ")
        return self

    @property
    def total_steps(self) -> int:
        return self.loss.total_steps

    def output_at(self, step: int) -> OutputVector:
        return OutputVector(values=self.outputs[step], n_samples=self.n_samples, n_outputs=self.n_outputs)


class ReplicateSummary(ArrayModel):
    """Aggregate of independent SDE runs, ordered by seed"""

    seeds: List[int]
    trajectories: List[Trajectory]
    mean_loss: LossCurve
    std_loss: LossCurve
    mean_error: Optional[LossCurve] = None


# ---------------------------------------------------------------------------
# Estimation reports


class TTReport(BaseModel):
    """Predicted epsilon-training-time of a run"""

    t_hat_epsilon: int = Field(..., ge=0)
    epsilon: float = Field(..., gt=0.0)
    curve_kind: CurveKind = CurveKind.LOSS
    final_value: float
    smoothed: bool = False
    half_window: int = Field(default=0, ge=0)
    solver: str
    effective_learning_rate: float
    total_steps: int = Field(..., ge=1)
    config: RunConfig

    @model_validator(mode="after")
    def validate_bounds(self) -> "TTReport":
        if self.t_hat_epsilon > self.total_steps:
            raise ValueError("Training time cannot exceed the step budget")
        return self


class TTComparisonRow(BaseModel):
    """Absolute training-time error at one threshold"""

    epsilon: float
    t_predicted: int
    t_actual: int
    absolute_error: int


# ---------------------------------------------------------------------------
# Reference trainers


class ModelSpec(BaseModel):
    """Reference model used to produce ground-truth curves"""

    kind: ModelKind = ModelKind.LINEAR
    input_dim: int = Field(..., ge=1)
    hidden_dim: Optional[int] = Field(default=None, ge=1)
    n_outputs: int = Field(default=1, ge=1)
    init_seed: int = Field(default=0, ge=0, le=SEED_MAX)
    init_scale: Optional[float] = Field(default=None, gt=0.0)
    activation: Activation = Activation.TANH

    @model_validator(mode="after")
    def validate_hidden(self) -> "ModelSpec":
        if self.kind == ModelKind.MLP1 and self.hidden_dim is None:
            raise ValueError("MLP1 models need a hidden_dim")
        return self

    @property
    def n_parameters(self) -> int:
        if self.kind == ModelKind.LINEAR:
            return self.n_outputs * self.input_dim
        return self.hidden_dim * self.input_dim + self.n_outputs * self.hidden_dim


class TrainRun(ArrayModel):
    """Ground-truth optimization record"""

    loss_curve: LossCurve
    error_curve: Optional[LossCurve] = None
    final_weights: np.ndarray
    weight_displacement: np.ndarray
    outputs: np.ndarray
