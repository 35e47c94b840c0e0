"""
Loss functions and their output-space gradients

MSE follows the residual convention: the reported loss is the unhalved
squared norm while the flow uses (f - y) as its gradient.
"""

import numpy as np
from scipy.special import logsumexp, softmax

from ..core.exceptions import DimensionError, UsageError
from ..models.training_models import LabelSet, LossKind, OutputVector


def _check_shapes(f: OutputVector, y: LabelSet) -> None:
    if f.n_samples != y.n_samples or f.n_outputs != y.n_outputs:
        raise DimensionError(
            f"Outputs are {f.n_samples}x{f.n_outputs} but labels are "
            f"{y.n_samples}x{y.n_outputs}"
        )


def _check_ce(f: OutputVector) -> None:
    if f.n_outputs < 2:
        raise UsageError("Cross-entropy needs at least two outputs; use MSE with +-1 targets")


def loss_value(f: OutputVector, y: LabelSet, kind: LossKind = LossKind.MSE) -> float:
    """Summed training loss over all samples"""
    _check_shapes(f, y)

    if kind == LossKind.MSE:
        residual = f.values - y.regression_targets()
        return float(residual @ residual)

    _check_ce(f)
    logits = f.matrix
    classes = y.class_labels()
    log_norm = logsumexp(logits, axis=1)
    return float(np.sum(log_norm - logits[np.arange(f.n_samples), classes]))


def loss_grad_outputs(f: OutputVector, y: LabelSet, kind: LossKind = LossKind.MSE) -> np.ndarray:
    """Gradient of the loss with respect to the stacked outputs"""
    _check_shapes(f, y)
    if kind == LossKind.CROSS_ENTROPY:
        _check_ce(f)
    return output_gradient(f.values, y, kind)


def output_gradient(values: np.ndarray, y: LabelSet, kind: LossKind = LossKind.MSE) -> np.ndarray:
    """Array-level loss gradient for solver inner loops; shapes are not rechecked"""
    if kind == LossKind.MSE:
        return values - y.regression_targets()

    probabilities = softmax(values.reshape(y.n_samples, y.n_outputs), axis=1)
    probabilities[np.arange(y.n_samples), y.class_labels()] -= 1.0
    return probabilities.reshape(-1)


def error_rate(f: OutputVector, y: LabelSet) -> float:
    """Fraction of misclassified samples"""
    _check_shapes(f, y)

    if f.n_outputs == 1:
        predicted = (f.values > 0.0).astype(np.int64)
    else:
        # argmax returns the first maximum, so ties go to the lowest index
        predicted = np.argmax(f.matrix, axis=1)

    return float(np.mean(predicted != y.class_labels()))


def batched_loss_values(outputs: np.ndarray, y: LabelSet, kind: LossKind = LossKind.MSE) -> np.ndarray:
    """Loss of every row of a (T+1, N*C) output history"""
    outputs = np.atleast_2d(outputs)
    if outputs.shape[1] != y.n_samples * y.n_outputs:
        raise DimensionError("Output history width does not match the labels")

    if kind == LossKind.MSE:
        residual = outputs - y.regression_targets()[None, :]
        return np.einsum("ti,ti->t", residual, residual)

    if y.n_outputs < 2:
        raise UsageError("Cross-entropy needs at least two outputs; use MSE with +-1 targets")
    logits = outputs.reshape(outputs.shape[0], y.n_samples, y.n_outputs)
    classes = y.class_labels()
    picked = logits[:, np.arange(y.n_samples), classes]
    return np.sum(logsumexp(logits, axis=2) - picked, axis=1)


def batched_error_rates(outputs: np.ndarray, y: LabelSet) -> np.ndarray:
    """Error rate of every row of a (T+1, N*C) output history"""
    outputs = np.atleast_2d(outputs)
    classes = y.class_labels()
    if y.n_outputs == 1:
        predicted = (outputs > 0.0).astype(np.int64)
    else:
        predicted = np.argmax(outputs.reshape(outputs.shape[0], y.n_samples, y.n_outputs), axis=2)
    return np.mean(predicted != classes[None, :], axis=1)
