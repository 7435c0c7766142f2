from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy

import logging
logger = logging.getLogger(__name__)

MAGIC_SIZE = 8


def run_dir(root: Union[str, Path], stage: str, seed: Optional[int] = None, exist_ok: bool = False) -> Path:
    """
    Directory of one stage of a run: `<root>/<stage>` or `<root>/<stage>_<seed>`, created on return.

    An existing directory is reused when `exist_ok`, otherwise the name gets a `-2`, `-3`, ... suffix so a rerun
    never overwrites earlier artifacts.

    Examples:
        >>> run_dir("runs", "explore", seed=3)
        PosixPath('runs/explore_3')
        >>> run_dir("runs", "explore", seed=3)
        PosixPath('runs/explore_3-2')
    """
    name = stage if seed is None else f"{stage}_{seed}"
    path = Path(root) / name
    n = 2
    while path.exists() and not exist_ok:
        path = Path(root) / f"{name}-{n}"
        n += 1
    path.mkdir(parents=True, exist_ok=True)
    return path


def write_records(path: Union[str, Path], magic: bytes, header: Sequence[int], payload: numpy.ndarray) -> Path:
    """
    Write a versioned, length-prefixed binary record.

    Layout: 8 magic bytes, int64 header length, int64 header values, int64 payload length, float64 payload. All
    integers and floats are little-endian; the payload is flattened in row-major order.

    Args:
        path (str | Path): Destination file, parent directories are created.
        magic (bytes): Exactly 8 bytes identifying the record kind and version.
        header (Sequence[int]): Integer header (shapes, flags, ...).
        payload (numpy.ndarray): Values stored as float64.

    Returns:
        (Path): The written path.
    """
    assert len(magic) == MAGIC_SIZE, f"magic must be {MAGIC_SIZE} bytes, got {len(magic)}"
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    head = numpy.asarray(header, dtype="<i8")
    body = numpy.ascontiguousarray(payload, dtype="<f8").ravel()
    with open(path, "wb") as f:
        f.write(magic)
        f.write(numpy.int64(head.size).astype("<i8").tobytes())
        f.write(head.tobytes())
        f.write(numpy.int64(body.size).astype("<i8").tobytes())
        f.write(body.tobytes())
    return path


def read_records(path: Union[str, Path], magic: bytes) -> Tuple[numpy.ndarray, numpy.ndarray]:
    """
    Read a record written by `write_records`.

    Returns:
        (Tuple[numpy.ndarray, numpy.ndarray]): The int64 header and the float64 payload.
    """
    from budgetedrl.solvers.errors import DomainError

    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Record file not found: {path}")
    raw = path.read_bytes()
    if raw[:MAGIC_SIZE] != magic:
        raise DomainError(f"{path}: expected magic {magic!r}, found {raw[:MAGIC_SIZE]!r}")
    offset = MAGIC_SIZE
    (n_head,) = numpy.frombuffer(raw, dtype="<i8", count=1, offset=offset)
    offset += 8
    header = numpy.frombuffer(raw, dtype="<i8", count=int(n_head), offset=offset).astype(numpy.int64)
    offset += 8 * int(n_head)
    (n_body,) = numpy.frombuffer(raw, dtype="<i8", count=1, offset=offset)
    offset += 8
    if len(raw) != offset + 8 * int(n_body):
        raise DomainError(f"{path}: truncated or oversized payload")
    payload = numpy.frombuffer(raw, dtype="<f8", count=int(n_body), offset=offset).astype(numpy.float64)
    return header, payload


def write_frame(frame, path: Union[str, Path]) -> Path:
    """Write a pandas DataFrame as CSV with a fixed float format, creating parent directories."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format="%.12g")
    logger.debug(f"wrote {len(frame)} rows to {path}")
    return path
