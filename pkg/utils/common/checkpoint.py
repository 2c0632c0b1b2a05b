"""
Binary checkpoint format.

Layout (little-endian)::

    magic      4 bytes  b"DWCK"
    version    u32
    man_len    u64      length of the manifest in bytes
    manifest   man_len  compact, key-sorted UTF-8 JSON
    blob       ...      float32 tensors, concatenated in sorted-name order

The manifest carries ``format_version``, ``kind``, the ``config`` echo, the
tensor directory (name -> shape/offset/length in bytes), optional
``calibrated_stats``, the ``transformed`` flag and free-form ``meta``.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, ClassVar, Dict, Optional, Union

import numpy as np

from utils.common.artifacts import atomic_write_bytes
from utils.common.config_loader import canonical_json
from utils.common.errors import DataFormatError, MissingArtifactError

CHECKPOINT_MAGIC = b"DWCK"
CHECKPOINT_VERSION = 1
CHECKPOINT_KINDS = ("supernet", "network", "predictor")


@dataclass
class Checkpoint:
    """In-memory checkpoint: named float tensors plus a JSON manifest."""

    kind: str
    tensors: Dict[str, np.ndarray]
    config: Dict[str, Any] = field(default_factory=dict)
    meta: Dict[str, Any] = field(default_factory=dict)
    calibrated_stats: Optional[Dict[str, Any]] = None
    transformed: bool = False

    header: ClassVar[struct.Struct] = struct.Struct("<4sIQ")

    def __post_init__(self):
        if self.kind not in CHECKPOINT_KINDS:
            raise DataFormatError(f"Unknown checkpoint kind '{self.kind}', expected one of {CHECKPOINT_KINDS}")

    def _directory_and_blob(self) -> tuple:
        directory: Dict[str, Dict[str, Any]] = {}
        chunks = []
        offset = 0
        for name in sorted(self.tensors):
            array = np.ascontiguousarray(self.tensors[name], dtype="<f4")
            raw = array.tobytes()
            directory[name] = {"shape": list(array.shape), "offset": offset, "length": len(raw)}
            chunks.append(raw)
            offset += len(raw)
        return directory, b"".join(chunks)

    def to_bytes(self) -> bytes:
        """Serialize to the on-disk representation."""
        directory, blob = self._directory_and_blob()
        manifest: Dict[str, Any] = {
            "format_version": CHECKPOINT_VERSION,
            "kind": self.kind,
            "config": self.config,
            "tensors": directory,
            "transformed": bool(self.transformed),
            "meta": self.meta,
        }
        if self.calibrated_stats is not None:
            manifest["calibrated_stats"] = self.calibrated_stats
        manifest_bytes = canonical_json(manifest).encode("utf-8")
        return self.header.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(manifest_bytes)) + manifest_bytes + blob

    @classmethod
    def from_bytes(cls, payload: bytes, source: str = "<bytes>") -> "Checkpoint":
        """
        Parse a serialized checkpoint.

        Raises:
            DataFormatError: On bad magic, unsupported version, truncation or a
                manifest entry that points outside the blob
        """
        if len(payload) < cls.header.size:
            raise DataFormatError(
                f"{source}: truncated checkpoint, expected at least {cls.header.size} bytes, got {len(payload)}"
            )
        magic, version, manifest_len = cls.header.unpack_from(payload, 0)
        if magic != CHECKPOINT_MAGIC:
            raise DataFormatError(f"{source}: bad checkpoint magic {magic!r}, expected {CHECKPOINT_MAGIC!r}")
        if version != CHECKPOINT_VERSION:
            raise DataFormatError(f"{source}: unsupported checkpoint version {version}, expected {CHECKPOINT_VERSION}")
        start = cls.header.size
        if len(payload) < start + manifest_len:
            raise DataFormatError(
                f"{source}: truncated manifest, expected {start + manifest_len} bytes, got {len(payload)}"
            )
        try:
            manifest = json.loads(payload[start:start + manifest_len].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise DataFormatError(f"{source}: corrupt checkpoint manifest: {e}") from e

        blob = payload[start + manifest_len:]
        try:
            tensors = cls._read_tensors(manifest, blob, source)
            kind = manifest["kind"]
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DataFormatError(f"{source}: malformed checkpoint manifest entry: {e!r}") from e
        return cls(
            kind=kind,
            tensors=tensors,
            config=manifest.get("config", {}),
            meta=manifest.get("meta", {}),
            calibrated_stats=manifest.get("calibrated_stats"),
            transformed=bool(manifest.get("transformed", False)),
        )

    @staticmethod
    def _read_tensors(manifest: Dict[str, Any], blob: bytes, source: str) -> Dict[str, np.ndarray]:
        directory = manifest["tensors"]
        expected_blob = sum(int(entry["length"]) for entry in directory.values())
        if len(blob) != expected_blob:
            raise DataFormatError(
                f"{source}: checkpoint blob length mismatch, expected {expected_blob} bytes, got {len(blob)}"
            )
        tensors: Dict[str, np.ndarray] = {}
        for name, entry in directory.items():
            offset, length = int(entry["offset"]), int(entry["length"])
            if offset < 0 or offset + length > len(blob):
                raise DataFormatError(f"{source}: tensor '{name}' lies outside the blob")
            array = np.frombuffer(blob[offset:offset + length], dtype="<f4").reshape(entry["shape"])
            tensors[name] = array.astype(np.float32)
        return tensors


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    """Write a checkpoint atomically."""
    return atomic_write_bytes(path, checkpoint.to_bytes())


def load_checkpoint(path: Union[str, Path], expected_kind: Optional[str] = None) -> Checkpoint:
    """
    Load a checkpoint from disk.

    Args:
        path: Checkpoint file
        expected_kind: Reject checkpoints of another kind when given

    Returns:
        Parsed Checkpoint
    """
    source = Path(path)
    if not source.exists():
        raise MissingArtifactError(source)
    checkpoint = Checkpoint.from_bytes(source.read_bytes(), source=str(source))
    if expected_kind is not None and checkpoint.kind != expected_kind:
        raise DataFormatError(f"{source}: expected a '{expected_kind}' checkpoint, found '{checkpoint.kind}'")
    return checkpoint
