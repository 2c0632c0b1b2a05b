"""
Utility for loading configuration from JSON files.
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional, Union

from utils.common.errors import ConfigError


def get_project_root() -> Path:
    """Get the project root directory."""
    return Path(__file__).parent.parent.parent


def resolve_path(path: Union[str, Path]) -> Path:
    """Resolve a path against the CWD, falling back to the project root."""
    candidate = Path(path)
    if candidate.is_absolute() or candidate.exists():
        return candidate
    rooted = get_project_root() / candidate
    return rooted if rooted.exists() else candidate


def load_config(config_path: Optional[Union[str, Path]] = None) -> Dict:
    """
    Load configuration from JSON file.

    Args:
        config_path: Path to config file (absolute, CWD-relative or relative to
                     project root). Defaults to 'experiment_config.json'

    Returns:
        Configuration dictionary

    Raises:
        ConfigError: If the file is missing or is not a JSON object
    """
    if config_path is None:
        config_path = 'experiment_config.json'

    config_file = resolve_path(config_path)
    if not config_file.exists():
        raise ConfigError(f"Config file not found: {config_path}")

    try:
        with open(config_file, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config file {config_path} is not valid JSON: {e}") from e

    if not isinstance(data, dict):
        raise ConfigError(f"Config file {config_path} must contain a JSON object")
    return data


def canonical_json(data: Any) -> str:
    """Serialize to the canonical form used for hashing and manifests."""
    return json.dumps(data, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(config: Dict[str, Any]) -> str:
    """
    Hash an experiment config dump.

    ``output_dir`` is excluded so that relocating a run keeps its identity.

    Args:
        config: Config as a plain dictionary

    Returns:
        First 16 hex characters of the SHA-256 digest
    """
    payload = {k: v for k, v in config.items() if k != "output_dir"}
    return hashlib.sha256(canonical_json(payload).encode("utf-8")).hexdigest()[:16]
