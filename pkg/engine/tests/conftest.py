"""Shared fixtures for the training-time toolkit test suite"""

import os

os.environ.setdefault("ENVIRONMENT", "testing")

import numpy as np
import pytest

from ttime.models.training_models import (
    DatasetSpec, GradientMatrix, LabelSet, ModelKind, ModelSpec, OutputVector, RunConfig
)
from ttime.services.gradient_store import synth_blobs
from ttime.services.oracle import init_weights, model_gradients, model_outputs


@pytest.fixture
def rng():
    """Seeded generator so every test is reproducible"""
    return np.random.default_rng(1234)


@pytest.fixture
def scalar_instance():
    """N = C = 1 with unit gradient, f0 = 0 and y = 1"""
    gradients = GradientMatrix(data=np.array([[1.0]]), n_samples=1, n_outputs=1)
    f0 = OutputVector(values=np.array([0.0]), n_samples=1, n_outputs=1)
    y = LabelSet.from_targets(np.array([1.0]), n_samples=1, n_outputs=1)
    return gradients, f0, y


@pytest.fixture
def small_mse_instance(rng):
    """Random 6-sample, 2-output regression problem with 9-dimensional gradients"""
    n, c, d = 6, 2, 9
    gradients = GradientMatrix(data=0.3 * rng.standard_normal((n * c, d)), n_samples=n, n_outputs=c)
    f0 = OutputVector(values=0.1 * rng.standard_normal(n * c), n_samples=n, n_outputs=c)
    y = LabelSet.from_targets(rng.standard_normal(n * c), n_samples=n, n_outputs=c)
    return gradients, f0, y


@pytest.fixture
def blob_dataset():
    """Two well-separated blobs with one-hot targets"""
    spec = DatasetSpec(n_samples=20, n_classes=2, input_dim=5, cluster_separation=4.0,
                       noise_std=0.5, seed=7)
    return synth_blobs(spec)


@pytest.fixture
def linear_problem(blob_dataset):
    """LINEAR model on blob data with its gradients and initial outputs"""
    features, labels = blob_dataset
    spec = ModelSpec(kind=ModelKind.LINEAR, input_dim=features.shape[1], n_outputs=2, init_seed=3)
    weights0 = init_weights(spec)
    return {
        "spec": spec,
        "features": features,
        "labels": labels,
        "weights0": weights0,
        "gradients": model_gradients(spec, weights0, features),
        "f0": model_outputs(spec, weights0, features),
    }


@pytest.fixture
def gd_config():
    """Short full-batch MSE run"""
    return RunConfig(learning_rate=0.01, total_steps=40, epsilon=0.01)
