"""
Atomic artifact writing and JSON / JSON-Lines helpers.

Writers go through a temporary file in the destination directory followed by
``os.replace`` so that readers only ever see complete files.
"""

import json
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Mapping, Optional, Union

import numpy as np

from utils.common.errors import DataFormatError, MissingArtifactError

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, payload: bytes) -> Path:
    """
    Write bytes to ``path`` atomically.

    Args:
        path: Destination file
        payload: Complete file contents

    Returns:
        Destination path
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_name = tempfile.mkstemp(prefix=f".{target.name}.", suffix=".tmp", dir=target.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
            handle.flush()
            os.fsync(handle.fileno())
        os.replace(tmp_name, target)
    except BaseException:
        if os.path.exists(tmp_name):
            os.unlink(tmp_name)
        raise
    return target


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars/arrays and tuples into plain JSON values."""
    if isinstance(value, Mapping):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return to_jsonable(value.tolist())
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    if isinstance(value, np.bool_):
        return bool(value)
    if isinstance(value, Path):
        return str(value)
    return value


def dumps_json(data: Any) -> str:
    """Stable, human-readable JSON text."""
    return json.dumps(to_jsonable(data), indent=2, sort_keys=True, allow_nan=False) + "\n"


def write_json(path: PathLike, data: Any) -> Path:
    """Write a JSON document atomically."""
    return atomic_write_bytes(path, dumps_json(data).encode("utf-8"))


def read_json(path: PathLike, produced_by: Optional[str] = None) -> Any:
    """
    Read a JSON document.

    Raises:
        MissingArtifactError: If the file does not exist
        DataFormatError: If the file is not valid JSON
    """
    source = Path(path)
    if not source.exists():
        raise MissingArtifactError(source, produced_by)
    try:
        return json.loads(source.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataFormatError(f"{source} is not valid JSON: {e}") from e


def write_jsonl(
    path: PathLike,
    records: Iterable[Mapping[str, Any]],
    stamp: Optional[Mapping[str, Any]] = None
) -> Path:
    """
    Write JSON-Lines atomically, one compact object per line.

    Args:
        path: Destination file
        records: Objects to write
        stamp: Extra keys merged into every record (seed, config hash)

    Returns:
        Destination path
    """
    lines = []
    for record in records:
        row = dict(record)
        if stamp:
            row.update(stamp)
        lines.append(json.dumps(to_jsonable(row), sort_keys=True, separators=(",", ":"), allow_nan=False))
    payload = ("\n".join(lines) + "\n") if lines else ""
    return atomic_write_bytes(path, payload.encode("utf-8"))


def read_jsonl(path: PathLike, produced_by: Optional[str] = None) -> List[Dict[str, Any]]:
    """Read every object from a JSON-Lines file."""
    source = Path(path)
    if not source.exists():
        raise MissingArtifactError(source, produced_by)
    records = []
    with open(source, "r", encoding="utf-8") as handle:
        for line_no, line in enumerate(handle, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataFormatError(f"{source}:{line_no} is not valid JSON: {e}") from e
    return records


def require_artifact(path: PathLike, produced_by: Optional[str] = None) -> Path:
    """Return ``path`` if it exists, otherwise raise a named-path error."""
    target = Path(path)
    if not target.exists():
        raise MissingArtifactError(target, produced_by)
    return target
