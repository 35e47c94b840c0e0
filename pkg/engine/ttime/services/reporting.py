"""
Report and curve export

Curves are columnar CSV (`step,loss,error`), reports are JSON. Anything that
varies between identical invocations (timings, memory) goes to a separate
`*.meta.json` sidecar so reports and curves stay byte-identical.
"""

import hashlib
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import orjson
import psutil

from .. import __version__
from ..core.exceptions import TableFormatError
from ..core.logger import current_run_id
from ..models.training_models import CurveKind, LargerDatasetPrediction, LossCurve, TTComparisonRow

PathLike = Union[str, Path]

JSON_OPTIONS = orjson.OPT_INDENT_2 | orjson.OPT_SORT_KEYS | orjson.OPT_SERIALIZE_NUMPY


def dumps(document: Dict[str, Any]) -> bytes:
    return orjson.dumps(document, option=JSON_OPTIONS) + b"\n"


def write_json(path: PathLike, document: Dict[str, Any]) -> None:
    Path(path).write_bytes(dumps(document))


def read_json(path: PathLike) -> Dict[str, Any]:
    return orjson.loads(Path(path).read_bytes())


def curve_table(loss: LossCurve, error: Optional[LossCurve] = None) -> np.ndarray:
    steps = np.arange(loss.values.shape[0], dtype=np.float64)
    error_values = error.values if error is not None else np.full_like(loss.values, np.nan)
    return np.column_stack([steps, loss.values, error_values])


def write_curve_csv(path: PathLike, loss: LossCurve, error: Optional[LossCurve] = None) -> None:
    """`step,loss,error`; the error column is nan where it is undefined"""
    np.savetxt(
        path, curve_table(loss, error),
        fmt=["%d", "%.17g", "%.17g"], delimiter=",", header="step,loss,error", comments="",
    )


def write_curve_json(path: PathLike, loss: LossCurve, error: Optional[LossCurve] = None) -> None:
    write_json(path, {
        "step": list(range(loss.values.shape[0])),
        "loss": loss.values,
        "error": error.values if error is not None else None,
    })


def write_curve(path: PathLike, loss: LossCurve, error: Optional[LossCurve] = None,
                output_format: str = "csv") -> None:
    if output_format == "json":
        write_curve_json(path, loss, error)
    else:
        write_curve_csv(path, loss, error)


def read_curve(path: PathLike, column: str = "loss") -> LossCurve:
    """Read one column of a curve file written by write_curve (CSV or JSON)"""
    raw = Path(path).read_bytes()

    if raw.lstrip().startswith(b"{"):
        document = orjson.loads(raw)
        if document.get(column) is None:
            raise TableFormatError(f"{path}: curve document has no '{column}' values")
        values = np.asarray(document[column], dtype=np.float64)
    else:
        lines = raw.decode("utf-8").splitlines()
        header = [name.strip() for name in lines[0].split(",")] if lines else []
        if not header or header[0] != "step" or column not in header:
            raise TableFormatError(f"{path}: expected a 'step,...' header containing '{column}'")
        try:
            table = np.loadtxt(lines[1:], delimiter=",", ndmin=2)
        except ValueError as e:
            raise TableFormatError(f"{path}: {e}") from e
        if table.shape[0] == 0:
            raise TableFormatError(f"{path}: curve has no rows")
        if not np.array_equal(table[:, 0], np.arange(table.shape[0])):
            raise TableFormatError(f"{path}: steps must run 0..T in order")
        values = table[:, header.index(column)]

    # write_curve leaves undefined error curves as NaN (null in JSON)
    if not np.all(np.isfinite(values)):
        raise TableFormatError(f"{path}: '{column}' column holds undefined or non-finite values")

    kind = CurveKind.ERROR if column == "error" else CurveKind.LOSS
    return LossCurve(values=values, kind=kind)


def curve_digest(path: PathLike) -> str:
    """sha256 of a written curve file"""
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def comparison_document(rows: Sequence[TTComparisonRow], percentage: bool) -> Dict[str, Any]:
    return {
        "mode": "percentage" if percentage else "absolute",
        "rows": [row.model_dump(mode="json") for row in rows],
    }


def write_comparison_csv(path: PathLike, rows: Sequence[TTComparisonRow]) -> None:
    table = np.array(
        [[row.epsilon, row.t_predicted, row.t_actual, row.absolute_error] for row in rows],
        dtype=np.float64,
    ).reshape(-1, 4)
    np.savetxt(
        path, table, fmt=["%.17g", "%d", "%d", "%d"], delimiter=",",
        header="epsilon,t_predicted,t_actual,absolute_error", comments="",
    )


def write_spectrum_report(path: PathLike, prediction: LargerDatasetPrediction) -> None:
    """`k,lambda,lambda_hat,p,p_hat`; subset columns are blank past the subset size"""
    length = prediction.eigenvalues_hat.shape[0]
    subset = prediction.eigenvalues_subset.shape[0]

    lines: List[str] = ["k,lambda,lambda_hat,p,p_hat"]
    for k in range(length):
        if k < subset:
            observed = f"{prediction.eigenvalues_subset[k]:.17g}"
            projection = f"{prediction.projections_subset[k]:.17g}"
        else:
            observed = projection = ""
        lines.append(
            f"{k + 1},{observed},{prediction.eigenvalues_hat[k]:.17g},"
            f"{projection},{prediction.projections_hat[k]:.17g}"
        )
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def extrapolation_document(prediction: LargerDatasetPrediction) -> Dict[str, Any]:
    return {
        "fit": prediction.fit.model_dump(mode="json"),
        "tail": {"a": prediction.tail.a, "b": prediction.tail.b},
        "final_loss_per_sample": float(prediction.curve.values[-1]),
    }


def meta_path(report_path: PathLike) -> Path:
    report_path = Path(report_path)
    return report_path.with_name(f"{report_path.stem}.meta.json")


def run_metadata(command: str, config: Dict[str, Any], seeds: Sequence[int],
                 timings: Dict[str, float]) -> Dict[str, Any]:
    """Config echo, seeds, timings and resource usage for one invocation"""
    try:
        memory = psutil.Process().memory_info().rss
    except Exception:
        memory = 0

    return {
        "command": command,
        "run_id": current_run_id(),
        "tool_version": __version__,
        "config": config,
        "seeds": list(seeds),
        "timings_seconds": timings,
        "resident_memory_bytes": memory,
        "finished_at": datetime.now(timezone.utc).isoformat(),
    }
