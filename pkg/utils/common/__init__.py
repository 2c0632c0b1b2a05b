"""
Common utilities used across the entire project.
"""

from utils.common.config import get_runtime_settings
from utils.common.config_loader import load_config
from utils.common.errors import ConfigError, NumericalError, TransformableNASError, exit_code_for
from utils.common.logger import setup_logger, get_logger

__all__ = [
    'get_runtime_settings',
    'load_config',
    'ConfigError',
    'NumericalError',
    'TransformableNASError',
    'exit_code_for',
    'setup_logger',
    'get_logger',
]
