"""
Command-line front end

    ttime kernel      GRADIENTS            build and factorize the empirical NTK
    ttime predict     GRADIENTS LABELS F0  forecast the epsilon-training-time of a run
    ttime extrapolate GRADIENTS LABELS F0  forecast the loss curve of a larger dataset
    ttime oracle                           train a reference model and export its gradients
    ttime compare     PREDICTED ACTUAL     training-time error table between two curves

Exit codes: 0 success, 2 input or usage errors, 3 numerical failures.
"""

import argparse
import sys
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from . import __version__
from .core.config import settings
from .core.exceptions import EXIT_INPUT, ToolkitError, UsageError
from .core.logger import end_run, get_application_logger, setup_logging, start_run
from .core.metrics import get_metrics
from .models.training_models import (
    BATCH_INF, BatchSampling, CurveKind, DatasetSpec, EigenMethod, ExtrapolationConfig,
    GradientMatrix, Integrator, LabelSet, LossKind, ModelKind, ModelSpec, OracleRunConfig,
    ProjectionScheme, ProjectionSpec, RunConfig, TrainMode
)
from .services import reporting
from .services.estimator import (
    TrainingTimeEstimator, compare_tt, epsilon_training_time, threshold_from_percentage
)
from .services.gradient_store import (
    read_gradients, read_labels, read_outputs, synth_blobs, write_gradients, write_kernel,
    write_labels, write_outputs
)
from .services.kernel import build_kernel, sym_eig
from .services.oracle import ReferenceTrainer, init_weights, model_gradients, model_outputs
from .services.projection import project_gradients
from .services.spectrum import DatasetExtrapolator

logger = get_application_logger("cli")


def _batch_size(value: str):
    if value.lower() == BATCH_INF:
        return BATCH_INF
    try:
        return int(value)
    except ValueError:
        raise argparse.ArgumentTypeError(f"batch size must be an integer or 'inf', got {value!r}")


def _float_list(value: str) -> List[float]:
    try:
        return [float(item) for item in value.split(",") if item.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {value!r}")


# ---------------------------------------------------------------------------
# Shared argument groups


def _add_common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--log-level", type=str.upper, default=None,
                        choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
                        help="override TTIME_LOG_LEVEL")
    parser.add_argument("--metrics-out", type=Path, default=None,
                        help="write Prometheus metrics text to this file")


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("run configuration")
    group.add_argument("--lr", type=float, required=True, help="learning rate")
    group.add_argument("--momentum", type=float, default=0.0)
    group.add_argument("--batch-size", type=_batch_size, default=BATCH_INF,
                       help="mini-batch size or 'inf' for full-batch GD")
    group.add_argument("--steps", type=int, required=True, help="step budget T")
    group.add_argument("--epsilon", type=float, default=0.01, help="threshold in loss units")
    group.add_argument("--epsilon-pct", type=float, default=None,
                       help="threshold as a fraction of the curve range (0.01 = 1%%)")
    group.add_argument("--loss", choices=[kind.value for kind in LossKind], default=LossKind.MSE.value)
    group.add_argument("--seed", type=int, default=0)


def _add_projection_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_argument_group("random projection")
    group.add_argument("--project-dim", type=int, default=None,
                       help="project gradients to this many dimensions (default: TTIME_DEFAULT_PROJECTION_DIM "
                            f"= {settings.default_projection_dim} whenever the gradients are wider)")
    group.add_argument("--no-projection", action="store_true",
                       help="keep raw gradients even when they are wider than the default dimension")
    group.add_argument("--project-seed", type=int, default=0)
    group.add_argument("--sparsity", type=float, default=settings.default_sparsity)
    group.add_argument("--scheme", choices=[s.value for s in ProjectionScheme],
                       default=ProjectionScheme.SIGN_SPARSE.value)


def _add_output_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--out", type=Path, default=None, help="report path (stdout when omitted)")
    parser.add_argument("--curve-out", type=Path, default=None, help="curve path")
    parser.add_argument("--format", choices=["csv", "json"], default="csv", help="curve format")


def _run_config(args: argparse.Namespace, oracle: bool = False) -> RunConfig:
    config_type = OracleRunConfig if oracle else RunConfig
    return config_type(
        learning_rate=args.lr,
        momentum=args.momentum,
        batch_size=args.batch_size,
        total_steps=args.steps,
        epsilon=args.epsilon,
        loss_kind=LossKind(args.loss),
        seed=args.seed,
    )


def _projection(args: argparse.Namespace, gradients: GradientMatrix) -> Optional[ProjectionSpec]:
    output_dim = args.project_dim
    if output_dim is None:
        if args.no_projection or gradients.cols <= settings.default_projection_dim:
            return None
        output_dim = settings.default_projection_dim
        logger.info(f"Projecting {gradients.cols} gradient columns to the default {output_dim}")
    elif args.no_projection:
        raise UsageError("--project-dim and --no-projection are mutually exclusive")
    elif output_dim > gradients.cols:
        raise UsageError(
            f"--project-dim {output_dim} exceeds the gradient dimension {gradients.cols}"
        )
    return ProjectionSpec(
        input_dim=gradients.cols,
        output_dim=output_dim,
        seed=args.project_seed,
        scheme=ProjectionScheme(args.scheme),
        sparsity=args.sparsity,
    )


def _load_inputs(args: argparse.Namespace):
    gradients = read_gradients(args.gradients)
    f0 = read_outputs(args.outputs)
    y = read_labels(args.labels, n_outputs=f0.n_outputs)
    return gradients, f0, y


def _emit_report(args: argparse.Namespace, report: Dict[str, Any], command: str,
                 timings: Dict[str, float], seeds: Sequence[int]) -> None:
    if args.out is None:
        sys.stdout.write(reporting.dumps(report).decode("utf-8"))
        return
    reporting.write_json(args.out, report)
    reporting.write_json(
        reporting.meta_path(args.out),
        reporting.run_metadata(command, report.get("config", {}), seeds, timings),
    )


# ---------------------------------------------------------------------------
# Subcommands


def cmd_kernel(args: argparse.Namespace) -> int:
    start_time = time.perf_counter()
    gradients = read_gradients(args.gradients)

    projection = _projection(args, gradients)
    if projection is not None:
        gradients = project_gradients(gradients, projection)

    kernel = build_kernel(gradients)
    eigen = sym_eig(kernel, method=EigenMethod(args.eig_method))

    if kernel.size <= settings.kernel_text_dump_max:
        np.savetxt(sys.stdout, kernel.data, fmt="%.10g", delimiter=",")

    if args.out is not None:
        write_kernel(args.out, kernel, text_max=settings.kernel_text_dump_max)
    if args.eigs_out is not None:
        table = np.column_stack([np.arange(1, eigen.eigenvalues.shape[0] + 1), eigen.eigenvalues])
        np.savetxt(args.eigs_out, table, fmt=["%d", "%.17g"], delimiter=",",
                   header="k,lambda", comments="")

    logger.info(
        f"Kernel {kernel.size}x{kernel.size}: trace={np.trace(kernel.data):.6g}, "
        f"lambda_1={eigen.eigenvalues[0]:.6g}, clamped mass={eigen.clamped_mass:.3g}"
    )
    logger.debug(f"kernel command finished in {time.perf_counter() - start_time:.3f}s")
    return 0


def cmd_predict(args: argparse.Namespace) -> int:
    start_time = time.perf_counter()
    cfg = _run_config(args)
    if args.closed_form and cfg.loss_kind == LossKind.CROSS_ENTROPY:
        raise UsageError("Cross-entropy has no closed-form loss curve; drop --closed-form")

    gradients, f0, y = _load_inputs(args)
    estimator = TrainingTimeEstimator(
        integrator=Integrator(args.integrator), projection=_projection(args, gradients)
    )
    curve_kind = CurveKind(args.curve)

    full_batch = cfg.is_full_batch(f0.n_samples)
    if args.closed_form and not full_batch:
        raise UsageError("--closed-form covers full-batch runs only; drop it or --batch-size")
    if args.seeds > 1 and full_batch:
        logger.warning(f"Ignoring --seeds {args.seeds}: full-batch runs are deterministic")

    seeds = [cfg.seed]
    replicate_times: Optional[List[int]] = None
    if args.seeds > 1 and not full_batch:
        seeds = [cfg.seed + offset for offset in range(args.seeds)]
        report, summary, replicate_times = estimator.estimate_replicates(
            gradients, f0, y, cfg, seeds,
            half_window=args.smoothing, curve_kind=curve_kind, epsilon_fraction=args.epsilon_pct,
        )
        loss, error = summary.mean_loss, summary.mean_error
    else:
        report, trajectory = estimator.estimate(
            gradients, f0, y, cfg,
            half_window=args.smoothing,
            curve_kind=curve_kind,
            closed_form=args.closed_form,
            epsilon_fraction=args.epsilon_pct,
        )
        loss, error = trajectory.loss, trajectory.error

    if args.curve_out is not None:
        reporting.write_curve(args.curve_out, loss, error, args.format)

    document = report.model_dump(mode="json")
    document["tool_version"] = __version__
    if replicate_times is not None:
        document["replicates"] = {"seeds": seeds, "t_hat_epsilon": replicate_times}

    _emit_report(args, document, "predict", {"total": time.perf_counter() - start_time}, seeds)
    return 0


def cmd_extrapolate(args: argparse.Namespace) -> int:
    start_time = time.perf_counter()
    cfg = _run_config(args)
    if cfg.loss_kind != LossKind.MSE:
        raise UsageError("Larger-dataset extrapolation is defined for MSE only")

    gradients, f0, y = _load_inputs(args)
    k0 = args.k0 if args.k0 is not None else min(settings.extrapolation_k0, gradients.n_samples)
    extrapolation = ExtrapolationConfig(
        alpha=args.alpha,
        k0=k0,
        n_subset=gradients.n_samples,
        n_target=args.target_n,
        n_outputs=gradients.n_outputs,
    )

    prediction = DatasetExtrapolator(extrapolation).run(
        gradients, f0, y, args.target_norm_sq, cfg
    )

    if args.curve_out is not None:
        reporting.write_curve(args.curve_out, prediction.curve, None, args.format)
    if args.spectrum_out is not None:
        reporting.write_spectrum_report(args.spectrum_out, prediction)

    epsilon = cfg.epsilon
    if args.epsilon_pct is not None:
        epsilon = threshold_from_percentage(prediction.curve, args.epsilon_pct)

    document = reporting.extrapolation_document(prediction)
    document.update({
        "config": cfg.model_dump(mode="json"),
        "extrapolation": extrapolation.model_dump(mode="json"),
        "epsilon": epsilon,
        "t_hat_epsilon": epsilon_training_time(prediction.curve, epsilon),
        "tool_version": __version__,
    })
    _emit_report(args, document, "extrapolate", {"total": time.perf_counter() - start_time}, [cfg.seed])
    return 0


def cmd_oracle(args: argparse.Namespace) -> int:
    start_time = time.perf_counter()
    cfg = _run_config(args, oracle=True)

    dataset = DatasetSpec(
        n_samples=args.n_samples,
        n_classes=args.n_classes,
        input_dim=args.input_dim,
        cluster_separation=args.separation,
        noise_std=args.noise,
        seed=args.data_seed,
    )
    features, labels = synth_blobs(dataset)
    if args.targets == "pm1":
        if args.n_classes != 2:
            raise UsageError("+-1 targets need exactly two classes")
        labels = LabelSet.from_targets(
            2.0 * labels.classes - 1.0, n_samples=args.n_samples, n_outputs=1
        )

    spec = ModelSpec(
        kind=ModelKind(args.model),
        input_dim=args.input_dim,
        hidden_dim=args.hidden_dim,
        n_outputs=labels.n_outputs,
        init_seed=args.init_seed,
        init_scale=args.init_scale,
    )
    weights0 = init_weights(spec)
    trainer = ReferenceTrainer(spec, BatchSampling(args.sampling))
    train = trainer.linearized_train if args.linearized else trainer.train
    run = train(weights0, features, labels, cfg, TrainMode(args.mode))

    out_dir: Path = args.out_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    extension = "json" if args.format == "json" else "csv"
    curve_path = out_dir / f"train_curve.{extension}"
    reporting.write_curve(curve_path, run.loss_curve, run.error_curve, args.format)

    gradients = model_gradients(spec, weights0, features)
    if args.gradient_dtype == "f32":
        gradients = GradientMatrix(
            data=gradients.data.astype(np.float32),
            n_samples=gradients.n_samples,
            n_outputs=gradients.n_outputs,
        )
    write_gradients(out_dir / "gradients.bin", gradients)
    write_labels(out_dir / "labels.csv", labels)
    write_outputs(out_dir / "outputs.csv", model_outputs(spec, weights0, features))

    document = {
        "config": cfg.model_dump(mode="json"),
        "model": spec.model_dump(mode="json"),
        "dataset": dataset.model_dump(mode="json"),
        "mode": args.mode,
        "linearized": args.linearized,
        "final_loss": float(run.loss_curve.values[-1]),
        "final_displacement": float(run.weight_displacement[-1]),
        "curve_sha256": reporting.curve_digest(curve_path),
        "tool_version": __version__,
    }
    report_path = out_dir / "report.json"
    reporting.write_json(report_path, document)
    reporting.write_json(
        reporting.meta_path(report_path),
        reporting.run_metadata("oracle", document["config"], [cfg.seed],
                               {"total": time.perf_counter() - start_time}),
    )
    sys.stdout.write(reporting.dumps(document).decode("utf-8"))
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    predicted = reporting.read_curve(args.predicted, args.column)
    actual = reporting.read_curve(args.actual, args.column)
    rows = compare_tt(predicted, actual, args.epsilons, percentage=args.percentage)

    if args.format == "json":
        document = reporting.comparison_document(rows, args.percentage)
        if args.out is None:
            sys.stdout.write(reporting.dumps(document).decode("utf-8"))
        else:
            reporting.write_json(args.out, document)
    else:
        reporting.write_comparison_csv(args.out if args.out is not None else sys.stdout, rows)
    return 0


# ---------------------------------------------------------------------------
# Parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ttime",
        description="Forecast training time from gradients at initialization",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    subparsers = parser.add_subparsers(dest="command", required=True)

    kernel = subparsers.add_parser("kernel", help="build the empirical NTK and its spectrum")
    kernel.add_argument("gradients", type=Path)
    kernel.add_argument("--out", type=Path, default=None, help="kernel dump path")
    kernel.add_argument("--eigs-out", type=Path, default=None, help="eigenvalue table path")
    kernel.add_argument("--eig-method", choices=[m.value for m in EigenMethod],
                        default=EigenMethod.LAPACK.value)
    _add_projection_flags(kernel)
    _add_common(kernel)
    kernel.set_defaults(handler=cmd_kernel)

    predict = subparsers.add_parser("predict", help="estimate the epsilon-training-time")
    predict.add_argument("gradients", type=Path)
    predict.add_argument("labels", type=Path)
    predict.add_argument("outputs", type=Path, help="initial outputs table")
    _add_run_flags(predict)
    predict.add_argument("--smoothing", type=int, default=None, help="moving-average half window")
    predict.add_argument("--curve", choices=[k.value for k in CurveKind], default=CurveKind.LOSS.value)
    predict.add_argument("--integrator", choices=[i.value for i in Integrator],
                         default=Integrator.RK4.value)
    predict.add_argument("--closed-form", action="store_true", help="use the spectral MSE solution")
    predict.add_argument("--seeds", type=int, default=1, help="number of SDE replicates")
    _add_projection_flags(predict)
    _add_output_flags(predict)
    _add_common(predict)
    predict.set_defaults(handler=cmd_predict)

    extrapolate = subparsers.add_parser("extrapolate", help="forecast a larger dataset's loss curve")
    extrapolate.add_argument("gradients", type=Path)
    extrapolate.add_argument("labels", type=Path)
    extrapolate.add_argument("outputs", type=Path, help="initial outputs table")
    _add_run_flags(extrapolate)
    extrapolate.add_argument("--target-n", type=int, required=True, help="size N of the larger dataset")
    extrapolate.add_argument("--target-norm-sq", type=float, required=True,
                             help="squared initial residual norm on the larger dataset")
    extrapolate.add_argument("--alpha", type=float, default=settings.extrapolation_alpha)
    extrapolate.add_argument("--k0", type=int, default=None)
    extrapolate.add_argument("--spectrum-out", type=Path, default=None)
    _add_output_flags(extrapolate)
    _add_common(extrapolate)
    extrapolate.set_defaults(handler=cmd_extrapolate)

    oracle = subparsers.add_parser("oracle", help="train a reference model on blob data")
    oracle.add_argument("--model", choices=[k.value for k in ModelKind], default=ModelKind.LINEAR.value)
    oracle.add_argument("--n-samples", type=int, default=50)
    oracle.add_argument("--n-classes", type=int, default=2)
    oracle.add_argument("--input-dim", type=int, default=10)
    oracle.add_argument("--hidden-dim", type=int, default=None)
    oracle.add_argument("--separation", type=float, default=5.0)
    oracle.add_argument("--noise", type=float, default=1.0)
    oracle.add_argument("--data-seed", type=int, default=0)
    oracle.add_argument("--init-seed", type=int, default=0)
    oracle.add_argument("--init-scale", type=float, default=None)
    oracle.add_argument("--targets", choices=["onehot", "pm1"], default="onehot")
    oracle.add_argument("--mode", choices=[m.value for m in TrainMode], default=TrainMode.GD.value)
    oracle.add_argument("--sampling", choices=[s.value for s in BatchSampling],
                        default=BatchSampling.WITH_REPLACEMENT.value)
    oracle.add_argument("--linearized", action="store_true")
    oracle.add_argument("--gradient-dtype", choices=["f32", "f64"], default="f32")
    oracle.add_argument("--out-dir", type=Path, required=True)
    oracle.add_argument("--format", choices=["csv", "json"], default="csv", help="curve format")
    _add_run_flags(oracle)
    _add_common(oracle)
    oracle.set_defaults(handler=cmd_oracle)

    compare = subparsers.add_parser("compare", help="training-time error between two curves")
    compare.add_argument("predicted", type=Path)
    compare.add_argument("actual", type=Path)
    compare.add_argument("--epsilons", type=_float_list, default=[0.01, 0.1, 0.4])
    compare.add_argument("--percentage", action="store_true",
                         help="epsilons are fractions of each curve's range")
    compare.add_argument("--column", choices=["loss", "error"], default="loss")
    compare.add_argument("--out", type=Path, default=None)
    compare.add_argument("--format", choices=["csv", "json"], default="csv")
    _add_common(compare)
    compare.set_defaults(handler=cmd_compare)

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.log_level)
    run_id = start_run(args.command)
    logger.debug(f"Run {run_id}: ttime {args.command}")

    try:
        code = args.handler(args)
    except ToolkitError as e:
        print(f"ttime {args.command}: {e}", file=sys.stderr)
        logger.debug("Command failed", exc_info=True)
        code = e.exit_code
    except ValidationError as e:
        print(f"ttime {args.command}: invalid input: {e}", file=sys.stderr)
        code = EXIT_INPUT
    except OSError as e:
        print(f"ttime {args.command}: {e}", file=sys.stderr)
        code = EXIT_INPUT
    finally:
        end_run()

    if args.metrics_out is not None:
        args.metrics_out.write_bytes(get_metrics())
    return code


if __name__ == "__main__":
    sys.exit(main())
