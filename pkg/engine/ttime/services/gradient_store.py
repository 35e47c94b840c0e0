"""
Gradient, kernel and label storage plus synthetic fixtures

Binary layout (little-endian, 40-byte header):
    magic[8] | u32 version | u64 N | u32 C | u64 D | u8 dtype | 7 pad | payload
Payload is the row-major (N*C) x D matrix at the header's element type.
"""

import struct
from pathlib import Path
from typing import Optional, Tuple, Union

import numpy as np
from scipy.stats import ortho_group

from ..core.exceptions import (
    BadMagicError, DimensionOverflowError, GradientFileError, TableFormatError,
    TruncatedPayloadError, UnsupportedVersionError, UsageError
)
from ..core.logger import get_application_logger
from ..core.metrics import track_file_io
from ..models.training_models import (
    DatasetSpec, GradientDType, GradientMatrix, KernelMatrix, LabelSet, OutputVector
)

logger = get_application_logger("gradient_store")

GRADIENT_MAGIC = b"NTKGRAD1"
KERNEL_MAGIC = b"NTKKERN1"
FORMAT_VERSION = 1

HEADER = struct.Struct("<8sIQIQB7x")

_DTYPE_CODES = {GradientDType.F32: 0, GradientDType.F64: 1}
_CODE_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}

# Anything larger cannot be addressed by a numpy buffer
MAX_ELEMENTS = 2**62

PathLike = Union[str, Path]


# ---------------------------------------------------------------------------
# Binary matrices


def _write_matrix(path: PathLike, magic: bytes, data: np.ndarray, n: int, c: int) -> None:
    dtype = GradientDType.F32 if data.dtype == np.float32 else GradientDType.F64
    header = HEADER.pack(magic, FORMAT_VERSION, n, c, data.shape[1], _DTYPE_CODES[dtype])
    payload = np.ascontiguousarray(data, dtype=_CODE_DTYPES[_DTYPE_CODES[dtype]]).tobytes()

    with open(path, "wb") as handle:
        handle.write(header)
        handle.write(payload)

    track_file_io("write", len(header) + len(payload))


def _read_matrix(path: PathLike, magic: bytes) -> Tuple[np.ndarray, int, int]:
    raw = Path(path).read_bytes()
    track_file_io("read", len(raw))

    if raw[: len(magic)] != magic:
        raise BadMagicError(magic, raw[: len(magic)])
    if len(raw) < HEADER.size:
        raise GradientFileError(f"Header truncated: {len(raw)} of {HEADER.size} bytes")

    _, version, n, c, d, code = HEADER.unpack_from(raw)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"Unsupported format version {version}")
    if code not in _CODE_DTYPES:
        raise GradientFileError(f"Unknown dtype code {code}")

    rows = n * c
    if rows == 0:
        raise GradientFileError("File declares an empty matrix")
    if rows > MAX_ELEMENTS or rows * d > MAX_ELEMENTS:
        raise DimensionOverflowError(f"Declared shape {n}x{c}x{d} overflows addressable memory")

    dtype = _CODE_DTYPES[code]
    required = rows * d
    available = (len(raw) - HEADER.size) // dtype.itemsize
    if available < required:
        raise TruncatedPayloadError(required, available)

    data = np.frombuffer(raw, dtype=dtype, count=required, offset=HEADER.size)
    data = data.astype(dtype.newbyteorder("="), copy=True).reshape(rows, d)
    return data, n, c


def write_gradients(path: PathLike, gradients: GradientMatrix) -> None:
    """Write a gradient matrix in the binary gradient format"""
    if gradients.rows == 0:
        raise UsageError("Refusing to write an empty gradient matrix")
    _write_matrix(path, GRADIENT_MAGIC, gradients.data, gradients.n_samples, gradients.n_outputs)
    logger.debug(f"Wrote {gradients.rows}x{gradients.cols} gradients to {path}")


def read_gradients(path: PathLike) -> GradientMatrix:
    """Read a gradient matrix, preserving its element type"""
    data, n, c = _read_matrix(path, GRADIENT_MAGIC)
    logger.debug(f"Read {data.shape[0]}x{data.shape[1]} {data.dtype} gradients from {path}")
    return GradientMatrix(data=data, n_samples=n, n_outputs=c)


def write_kernel(path: PathLike, kernel: KernelMatrix, text_max: int = 64) -> None:
    """Dump a kernel: `i,j,value` text for small matrices, binary otherwise"""
    n = kernel.size
    if n <= text_max:
        i, j = np.meshgrid(np.arange(n), np.arange(n), indexing="ij")
        table = np.column_stack([i.ravel(), j.ravel(), kernel.data.ravel()])
        np.savetxt(path, table, fmt=["%d", "%d", "%.17g"], delimiter=",", header="i,j,value", comments="")
        return
    _write_matrix(path, KERNEL_MAGIC, kernel.data, n, 1)


def read_kernel(path: PathLike) -> KernelMatrix:
    """Read a kernel written by write_kernel in either layout"""
    with open(path, "rb") as handle:
        head = handle.read(len(KERNEL_MAGIC))

    if head == KERNEL_MAGIC:
        data, _, _ = _read_matrix(path, KERNEL_MAGIC)
        return KernelMatrix(data=data.astype(np.float64))

    table = _load_table(path, "i")
    if table.shape[1] != 3:
        raise TableFormatError(f"{path}: kernel table needs columns i,j,value")
    n = int(round(np.sqrt(table.shape[0])))
    if n * n != table.shape[0]:
        raise TableFormatError(f"{path}: kernel table is not square")
    data = np.zeros((n, n))
    data[table[:, 0].astype(int), table[:, 1].astype(int)] = table[:, 2]
    return KernelMatrix(data=data)


# ---------------------------------------------------------------------------
# Text tables


def _load_table(path: PathLike, first_column: str) -> np.ndarray:
    with open(path, "r", encoding="utf-8") as handle:
        header = handle.readline().strip()
        if not header.startswith(first_column):
            raise TableFormatError(f"{path}: expected a header starting with '{first_column}'")
        try:
            table = np.loadtxt(handle, delimiter=",", ndmin=2)
        except ValueError as e:
            raise TableFormatError(f"{path}: {e}") from e

    if table.size == 0:
        raise TableFormatError(f"{path}: table has no rows")
    return table


def _read_header(path: PathLike) -> list:
    with open(path, "r", encoding="utf-8") as handle:
        return [column.strip() for column in handle.readline().strip().split(",")]


def _check_index(path: PathLike, table: np.ndarray) -> None:
    if not np.array_equal(table[:, 0], np.arange(table.shape[0])):
        raise TableFormatError(f"{path}: index column must run 0..N-1 in order")


def write_labels(path: PathLike, labels: LabelSet) -> None:
    """Write `index,class` for class labels or `index,y_1..y_C` for real targets"""
    index = np.arange(labels.n_samples)
    if labels.targets is None:
        table = np.column_stack([index, labels.classes])
        np.savetxt(path, table, fmt="%d", delimiter=",", header="index,class", comments="")
        return

    columns = ",".join(f"y_{j + 1}" for j in range(labels.n_outputs))
    table = np.column_stack([index, labels.targets.reshape(labels.n_samples, labels.n_outputs)])
    fmt = ["%d"] + ["%.17g"] * labels.n_outputs
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=f"index,{columns}", comments="")


def read_labels(path: PathLike, n_outputs: Optional[int] = None) -> LabelSet:
    """Read a label table; class tables need n_outputs unless it can be inferred"""
    header = _read_header(path)
    table = _load_table(path, "index")
    _check_index(path, table)

    if len(header) == 2 and header[1] == "class":
        classes = table[:, 1]
        if n_outputs is None:
            n_outputs = max(2, int(classes.max()) + 1)
        return LabelSet.from_classes(classes.astype(np.int64), n_outputs)

    width = table.shape[1] - 1
    if width < 1:
        raise TableFormatError(f"{path}: label table has no target columns")
    return LabelSet.from_targets(table[:, 1:].reshape(-1), table.shape[0], width)


def write_outputs(path: PathLike, outputs: OutputVector) -> None:
    """Write `index,f_1..f_C`"""
    columns = ",".join(f"f_{j + 1}" for j in range(outputs.n_outputs))
    table = np.column_stack([np.arange(outputs.n_samples), outputs.matrix])
    fmt = ["%d"] + ["%.17g"] * outputs.n_outputs
    np.savetxt(path, table, fmt=fmt, delimiter=",", header=f"index,{columns}", comments="")


def read_outputs(path: PathLike) -> OutputVector:
    table = _load_table(path, "index")
    _check_index(path, table)
    if table.shape[1] < 2:
        raise TableFormatError(f"{path}: output table has no output columns")
    return OutputVector.from_matrix(table[:, 1:])


# ---------------------------------------------------------------------------
# Synthetic fixtures


def _orthogonal(n: int, rng: np.random.Generator) -> np.ndarray:
    if n == 1:
        return np.ones((1, 1))
    return ortho_group.rvs(dim=n, random_state=rng)


def synth_blobs(spec: DatasetSpec) -> Tuple[np.ndarray, LabelSet]:
    """Gaussian blobs with pairwise center distance cluster_separation

    Classes are assigned round-robin so every class is populated. Labels carry
    both class indices and one-hot targets.
    """
    rng = np.random.default_rng(spec.seed)
    n_classes, dim = spec.n_classes, spec.input_dim

    if dim >= n_classes:
        # Scaled basis vectors are exactly cluster_separation apart
        centers = np.zeros((n_classes, dim))
        centers[np.arange(n_classes), np.arange(n_classes)] = spec.cluster_separation / np.sqrt(2.0)
        centers = centers @ _orthogonal(dim, rng).T
    else:
        centers = np.zeros((n_classes, dim))
        centers[:, 0] = spec.cluster_separation * np.arange(n_classes)

    classes = np.arange(spec.n_samples) % n_classes
    features = centers[classes] + spec.noise_std * rng.standard_normal((spec.n_samples, dim))

    logger.debug(f"Synthesized {spec.n_samples} samples in {n_classes} blobs (d={dim})")
    return features, LabelSet.from_classes(classes, n_classes, one_hot_targets=True)


def powerlaw_spectrum(n: int, c: float, s: float) -> np.ndarray:
    return c * np.arange(1, n + 1, dtype=np.float64) ** (-s)


def synth_powerlaw_kernel(n: int, c: float, s: float, seed: int = 0) -> KernelMatrix:
    """Symmetric PSD matrix with spectrum exactly c * k^-s in a random basis"""
    if n < 1:
        raise UsageError("Kernel size must be at least 1")
    basis = _orthogonal(n, np.random.default_rng(seed))
    data = (basis * powerlaw_spectrum(n, c, s)) @ basis.T
    return KernelMatrix(data=0.5 * (data + data.T))


def synth_powerlaw_gradients(n: int, dim: int, c: float, s: float, seed: int = 0) -> GradientMatrix:
    """Single-output gradients whose Gram matrix has spectrum c * k^-s"""
    if dim < n:
        raise UsageError(f"Need dim >= n to realize a full-rank spectrum ({dim} < {n})")
    rng = np.random.default_rng(seed)
    basis = _orthogonal(n, rng)
    rows, _ = np.linalg.qr(rng.standard_normal((dim, n)))
    data = (basis * np.sqrt(powerlaw_spectrum(n, c, s))) @ rows.T
    return GradientMatrix(data=data, n_samples=n, n_outputs=1)
