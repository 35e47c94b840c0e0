"""
Reference Trainer Service
Exact GD/SGD-with-momentum training of small linear and one-hidden-layer models

Weights are a flat vector. LINEAR holds W (C x d); MLP1 holds W1 (h x d) followed
by W2 (C x h). Neither model has biases.
"""

import time
from typing import Callable, Optional, Tuple

import numpy as np
from scipy.special import softmax

from ..core.config import settings
from ..core.exceptions import DimensionError, InstabilityError, UsageError
from ..core.logger import LoggerMixin
from ..core.metrics import trainer_steps_total, track_stage
from ..models.training_models import (
    BATCH_INF, BatchSampling, CurveKind, GradientMatrix, LabelSet, LossCurve, LossKind, ModelKind,
    ModelSpec, OutputVector, RunConfig, TrainMode, TrainRun
)
from .losses import batched_error_rates, batched_loss_values


def _check_weights(spec: ModelSpec, weights: np.ndarray) -> None:
    if weights.shape != (spec.n_parameters,):
        raise DimensionError(f"Expected {spec.n_parameters} weights, got shape {weights.shape}")


def _check_features(spec: ModelSpec, features: np.ndarray) -> None:
    if features.ndim != 2 or features.shape[1] != spec.input_dim:
        raise DimensionError(f"Features must be N x {spec.input_dim}, got shape {features.shape}")


def _unpack(spec: ModelSpec, weights: np.ndarray) -> Tuple[np.ndarray, ...]:
    if spec.kind == ModelKind.LINEAR:
        return (weights.reshape(spec.n_outputs, spec.input_dim),)
    split = spec.hidden_dim * spec.input_dim
    return (
        weights[:split].reshape(spec.hidden_dim, spec.input_dim),
        weights[split:].reshape(spec.n_outputs, spec.hidden_dim),
    )


def init_weights(spec: ModelSpec) -> np.ndarray:
    """Gaussian init with per-layer scale init_scale or 0.1 / sqrt(fan_in)"""
    rng = np.random.default_rng(spec.init_seed)

    def layer(rows: int, fan_in: int) -> np.ndarray:
        scale = spec.init_scale if spec.init_scale is not None else 0.1 / np.sqrt(fan_in)
        return scale * rng.standard_normal(rows * fan_in)

    if spec.kind == ModelKind.LINEAR:
        return layer(spec.n_outputs, spec.input_dim)
    return np.concatenate([
        layer(spec.hidden_dim, spec.input_dim),
        layer(spec.n_outputs, spec.hidden_dim),
    ])


def _forward(spec: ModelSpec, weights: np.ndarray, features: np.ndarray) -> np.ndarray:
    if spec.kind == ModelKind.LINEAR:
        (w,) = _unpack(spec, weights)
        return features @ w.T
    w1, w2 = _unpack(spec, weights)
    return np.tanh(features @ w1.T) @ w2.T


def model_outputs(spec: ModelSpec, weights: np.ndarray, features: np.ndarray) -> OutputVector:
    """LINEAR f(x) = W x; MLP1 f(x) = W2 tanh(W1 x)"""
    weights = np.asarray(weights, dtype=np.float64)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_weights(spec, weights)
    _check_features(spec, features)
    return OutputVector.from_matrix(_forward(spec, weights, features))


def model_gradients(spec: ModelSpec, weights: np.ndarray, features: np.ndarray) -> GradientMatrix:
    """Per-sample, per-output parameter gradients; row i*C + j is grad f_j(x_i)"""
    weights = np.asarray(weights, dtype=np.float64)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    _check_weights(spec, weights)
    _check_features(spec, features)

    n, c = features.shape[0], spec.n_outputs
    eye = np.eye(c)

    if spec.kind == ModelKind.LINEAR:
        # d f_j / d W[a, b] = delta_ja x_b
        blocks = np.einsum("ja,nb->njab", eye, features)
        return GradientMatrix(data=blocks.reshape(n * c, -1), n_samples=n, n_outputs=c)

    w1, w2 = _unpack(spec, weights)
    hidden = np.tanh(features @ w1.T)
    slope = 1.0 - hidden ** 2
    grad_w1 = np.einsum("jk,nk,nb->njkb", w2, slope, features)
    grad_w2 = np.einsum("ja,nk->njak", eye, hidden)
    data = np.concatenate([grad_w1.reshape(n, c, -1), grad_w2.reshape(n, c, -1)], axis=2)
    return GradientMatrix(data=data.reshape(n * c, -1), n_samples=n, n_outputs=c)


def _backward(spec: ModelSpec, weights: np.ndarray, features: np.ndarray,
              residual: np.ndarray) -> np.ndarray:
    """Weight gradient of sum_i l_i given dl/df for each row of features"""
    if spec.kind == ModelKind.LINEAR:
        return (residual.T @ features).reshape(-1)

    w1, w2 = _unpack(spec, weights)
    hidden = np.tanh(features @ w1.T)
    grad_w2 = residual.T @ hidden
    grad_pre = (residual @ w2) * (1.0 - hidden ** 2)
    grad_w1 = grad_pre.T @ features
    return np.concatenate([grad_w1.reshape(-1), grad_w2.reshape(-1)])


class ReferenceTrainer(LoggerMixin):
    """Produces ground-truth curves by running the optimizer on a real model"""

    def __init__(self, spec: ModelSpec,
                 sampling: BatchSampling = BatchSampling.WITH_REPLACEMENT):
        super().__init__()
        self.spec = spec
        self.sampling = sampling

    def _batches(self, n: int, cfg: RunConfig, mode: TrainMode, rng: np.random.Generator):
        if mode == TrainMode.GD or cfg.batch_size == BATCH_INF:
            full = np.arange(n)
            while True:
                yield full, 1.0

        batch = int(cfg.batch_size)
        if self.sampling == BatchSampling.WITHOUT_REPLACEMENT and batch > n:
            raise UsageError(f"Cannot draw {batch} of {n} samples without replacement")
        scale = n / batch
        while True:
            if self.sampling == BatchSampling.WITH_REPLACEMENT:
                yield rng.integers(0, n, batch), scale
            else:
                # Sorted so a full batch visits samples in GD order
                yield np.sort(rng.choice(n, batch, replace=False)), scale

    def _optimize(self, weights0: np.ndarray, features: np.ndarray, y: LabelSet, cfg: RunConfig,
                  mode: TrainMode, seed: Optional[int],
                  forward: Callable[[np.ndarray, np.ndarray], np.ndarray],
                  backward: Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]) -> TrainRun:
        n = features.shape[0]
        if y.n_samples != n or y.n_outputs != self.spec.n_outputs:
            raise DimensionError("Labels do not match the features and model outputs")
        if cfg.loss_kind == LossKind.CROSS_ENTROPY and y.n_outputs < 2:
            raise UsageError("Cross-entropy needs at least two outputs")

        start_time = time.perf_counter()
        rng = np.random.default_rng(cfg.seed if seed is None else seed)
        kind = cfg.loss_kind
        threshold = settings.divergence_threshold
        all_rows = np.arange(n)

        if kind == LossKind.MSE:
            targets = y.regression_targets().reshape(n, y.n_outputs)

            def residual(outputs, rows):
                return outputs - targets[rows]
        else:
            classes = y.class_labels()

            def residual(outputs, rows):
                probabilities = softmax(outputs, axis=1)
                probabilities[np.arange(rows.shape[0]), classes[rows]] -= 1.0
                return probabilities

        weights = np.asarray(weights0, dtype=np.float64).copy()
        velocity = np.zeros_like(weights)
        history = np.empty((cfg.total_steps + 1, n * y.n_outputs))
        displacement = np.zeros(cfg.total_steps + 1)
        history[0] = forward(weights, all_rows).reshape(-1)

        batches = self._batches(n, cfg, mode, rng)
        for step in range(1, cfg.total_steps + 1):
            rows, scale = next(batches)
            gradient = scale * backward(weights, rows, residual(forward(weights, rows), rows))
            velocity = cfg.momentum * velocity + gradient
            weights = weights - cfg.learning_rate * velocity

            history[step] = forward(weights, all_rows).reshape(-1)
            displacement[step] = np.linalg.norm(weights - weights0)
            loss = float(batched_loss_values(history[step][None, :], y, kind)[0])
            if not np.isfinite(loss) or loss > threshold:
                raise InstabilityError(step, loss, threshold)

        trainer_steps_total.labels(mode=mode.value).inc(cfg.total_steps)
        self.log_performance(
            f"{self.spec.kind.value} {mode.value} training for {cfg.total_steps} steps",
            time.perf_counter() - start_time,
        )

        error_curve = None
        if y.supports_error():
            error_curve = LossCurve(values=batched_error_rates(history, y), kind=CurveKind.ERROR)

        return TrainRun(
            loss_curve=LossCurve(values=batched_loss_values(history, y, kind)),
            error_curve=error_curve,
            final_weights=weights,
            weight_displacement=displacement,
            outputs=history,
        )

    @track_stage("oracle")
    def train(self, weights0: np.ndarray, features: np.ndarray, y: LabelSet, cfg: RunConfig,
              mode: TrainMode = TrainMode.GD, seed: Optional[int] = None) -> TrainRun:
        """Momentum update a <- m a + g, w <- w - eta a with a_0 = 0"""
        spec = self.spec
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        weights0 = np.asarray(weights0, dtype=np.float64)
        _check_weights(spec, weights0)
        _check_features(spec, features)

        return self._optimize(
            weights0, features, y, cfg, mode, seed,
            forward=lambda w, rows: _forward(spec, w, features[rows]),
            backward=lambda w, rows, r: _backward(spec, w, features[rows], r),
        )

    @track_stage("oracle-linearized")
    def linearized_train(self, weights0: np.ndarray, features: np.ndarray, y: LabelSet,
                         cfg: RunConfig, mode: TrainMode = TrainMode.GD,
                         seed: Optional[int] = None) -> TrainRun:
        """Same optimizer on f0 + J0 (w - w0); a LINEAR model is its own linearization"""
        if self.spec.kind == ModelKind.LINEAR:
            return self.train(weights0, features, y, cfg, mode, seed)

        spec = self.spec
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        weights0 = np.asarray(weights0, dtype=np.float64)
        _check_weights(spec, weights0)
        _check_features(spec, features)

        n, c = features.shape[0], spec.n_outputs
        f0 = _forward(spec, weights0, features)
        jacobian = model_gradients(spec, weights0, features).data.reshape(n, c, -1)

        def forward(w, rows):
            return f0[rows] + jacobian[rows] @ (w - weights0)

        def backward(w, rows, r):
            return np.einsum("ncp,nc->p", jacobian[rows], r)

        return self._optimize(weights0, features, y, cfg, mode, seed, forward, backward)


def train(spec: ModelSpec, weights0: np.ndarray, features: np.ndarray, y: LabelSet,
          cfg: RunConfig, mode: TrainMode = TrainMode.GD, seed: Optional[int] = None,
          sampling: BatchSampling = BatchSampling.WITH_REPLACEMENT) -> TrainRun:
    return ReferenceTrainer(spec, sampling).train(weights0, features, y, cfg, mode, seed)


def linearized_train(spec: ModelSpec, weights0: np.ndarray, features: np.ndarray, y: LabelSet,
                     cfg: RunConfig, mode: TrainMode = TrainMode.GD, seed: Optional[int] = None,
                     sampling: BatchSampling = BatchSampling.WITH_REPLACEMENT) -> TrainRun:
    return ReferenceTrainer(spec, sampling).linearized_train(weights0, features, y, cfg, mode, seed)
