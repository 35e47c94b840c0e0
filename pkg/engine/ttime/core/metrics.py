"""Prometheus metrics collection for the training-time toolkit"""

import time
from functools import wraps
from typing import Callable

from prometheus_client import (
    CollectorRegistry, Counter, Gauge, Histogram, Info, generate_latest
)

from .config import settings

# Create custom registry for our metrics
registry = CollectorRegistry()

# Application info
toolkit_info = Info(
    'toolkit',
    'Information about the training-time toolkit',
    registry=registry
)
toolkit_info.info({
    'name': settings.application_name,
    'version': settings.application_version,
    'component': 'training_time_estimation',
})

# Solver metrics
solver_runs_total = Counter(
    'solver_runs_total',
    'Total number of dynamics / pipeline stage runs',
    ['solver', 'status'],
    registry=registry
)

solver_duration_seconds = Histogram(
    'solver_duration_seconds',
    'Stage duration in seconds',
    ['solver'],
    buckets=[0.001, 0.01, 0.05, 0.1, 0.5, 1.0, 5.0, 30.0, 120.0],
    registry=registry
)

kernel_build_duration_seconds = Histogram(
    'kernel_build_duration_seconds',
    'Gram matrix construction time in seconds',
    buckets=[0.001, 0.01, 0.1, 1.0, 10.0, 60.0],
    registry=registry
)

kernel_size = Gauge(
    'kernel_size',
    'Side length of the most recently built Gram matrix',
    registry=registry
)

eigendecompositions_total = Counter(
    'eigendecompositions_total',
    'Total number of symmetric eigendecompositions',
    ['method'],
    registry=registry
)

projected_rows_total = Counter(
    'projected_rows_total',
    'Gradient rows pushed through a random projection',
    ['scheme'],
    registry=registry
)

trainer_steps_total = Counter(
    'trainer_steps_total',
    'Optimizer steps taken by the reference trainers',
    ['mode'],
    registry=registry
)

gradient_file_bytes_total = Counter(
    'gradient_file_bytes_total',
    'Bytes read from or written to binary matrix files',
    ['direction'],
    registry=registry
)

# Error metrics
errors_total = Counter(
    'errors_total',
    'Total number of errors',
    ['error_type', 'component'],
    registry=registry
)


def track_stage(stage: str) -> Callable:
    """Decorator to track duration and outcome of a pipeline stage"""
    def decorator(func: Callable) -> Callable:
        @wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()

            try:
                result = func(*args, **kwargs)
                solver_runs_total.labels(solver=stage, status='success').inc()
                return result

            except Exception as e:
                solver_runs_total.labels(solver=stage, status='error').inc()
                errors_total.labels(
                    error_type=type(e).__name__,
                    component=stage
                ).inc()
                raise

            finally:
                duration = time.perf_counter() - start_time
                solver_duration_seconds.labels(solver=stage).observe(duration)

        return wrapper
    return decorator


def track_kernel_build(size: int, duration: float):
    """Track Gram matrix construction"""
    kernel_size.set(size)
    kernel_build_duration_seconds.observe(duration)


def track_file_io(direction: str, n_bytes: int):
    """Track binary file traffic"""
    gradient_file_bytes_total.labels(direction=direction).inc(n_bytes)


def get_metrics() -> bytes:
    """Get Prometheus metrics in text format"""
    return generate_latest(registry)
