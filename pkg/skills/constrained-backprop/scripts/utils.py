#!/usr/bin/env python3
"""
Shared utilities for the constrained-backprop scripts

This module provides common functionality used across all script modules:
- Runtime settings from environment and .env files
- Logging configuration
- The exception hierarchy
- Common helper functions
"""

import os
import logging
from pathlib import Path
from typing import Any, List, Optional, Sequence

from dotenv import load_dotenv


def load_env_file(env_paths: Optional[List[Path]] = None) -> None:
    """
    Load runtime settings from .env files

    Args:
        env_paths: List of paths to check for .env files
                  If None, uses default paths
    """
    if env_paths is None:
        env_paths = [
            Path.home() / ".env",
            Path.cwd() / ".env",
        ]

    for env_path in env_paths:
        if env_path.exists():
            # Never overrides variables already set in the process
            load_dotenv(env_path, override=False)
            break


def get_setting(key_name: str, default: Optional[str] = None,
                env_paths: Optional[List[Path]] = None) -> Optional[str]:
    """
    Get a runtime setting from environment or .env files

    Args:
        key_name: Environment variable name (e.g., 'CBP_LOG_LEVEL')
        default: Value returned when the setting is absent
        env_paths: Optional list of .env file paths to check

    Returns:
        Setting string or default
    """
    value = os.environ.get(key_name)
    if value:
        return value

    load_env_file(env_paths)

    return os.environ.get(key_name, default)


def get_log_level() -> int:
    """Log level from CBP_LOG_LEVEL (name or number), INFO when unset"""
    raw = get_setting("CBP_LOG_LEVEL", "INFO")
    if raw.isdigit():
        return int(raw)
    level = logging.getLevelName(raw.upper())
    return level if isinstance(level, int) else logging.INFO


def setup_logging(name: str, level: Optional[int] = None) -> logging.Logger:
    """
    Set up logging for a module

    Args:
        name: Logger name (usually __name__)
        level: Logging level (default from CBP_LOG_LEVEL, else INFO)

    Returns:
        Configured logger instance
    """
    if level is None:
        level = get_log_level()

    logger = logging.getLogger(name)
    logger.setLevel(level)

    # Only add handler if not already configured
    if not logger.handlers:
        handler = logging.StreamHandler()
        handler.setLevel(level)
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s',
            datefmt='%Y-%m-%d %H:%M:%S'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


# ---------------------------------------------------------------------------
# Exceptions
# ---------------------------------------------------------------------------

class CBPError(Exception):
    """Base class of every error raised by the scripts"""


class ShapeError(CBPError, ValueError):
    """Array dimensions do not line up"""


class DomainError(CBPError, ValueError):
    """Argument outside the domain of the operation"""


class ContractError(CBPError, RuntimeError):
    """An API was called out of order or with mismatched state"""


class DivergenceError(CBPError, ArithmeticError):
    """
    A non-finite value appeared

    Attributes:
        layer: Index of the offending layer, when known
        state: Last finite state (TrainState) or partial Trajectory
    """

    def __init__(self, message: str, layer: Optional[int] = None, state: Any = None):
        super().__init__(message)
        self.layer = layer
        self.state = state


class ParseError(CBPError, ValueError):
    """Malformed bytes in a dataset or checkpoint file"""

    def __init__(self, message: str, offset: Optional[int] = None,
                 path: Optional[str] = None):
        where = []
        if path:
            where.append(str(path))
        if offset is not None:
            where.append(f"byte offset {offset}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)
        self.offset = offset
        self.path = path


class CheckpointVersionError(ParseError):
    """Checkpoint written by a newer format version"""


class ConfigError(CBPError, KeyError):
    """Unknown or malformed configuration key"""

    def __init__(self, message: str, valid_keys: Sequence[str] = ()):
        super().__init__(message)
        self.message = message
        self.valid_keys = list(valid_keys)

    def __str__(self) -> str:
        if self.valid_keys:
            return f"{self.message}; valid keys: {', '.join(self.valid_keys)}"
        return self.message


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def sanitize_error_message(error: Exception) -> str:
    """
    Render an exception for the command line

    Args:
        error: Exception instance

    Returns:
        Single-line message string
    """
    message = str(error).strip()
    if isinstance(error, KeyError) and not isinstance(error, ConfigError):
        message = message.strip("'\"")
    if not message:
        message = type(error).__name__
    return " ".join(message.split())


def validate_file_path(path: str, allowed_extensions: Optional[List[str]] = None,
                       must_exist: bool = True) -> Path:
    """
    Validate an input file path

    Args:
        path: File path to validate
        allowed_extensions: Optional list of allowed file extensions
        must_exist: Require the file to exist

    Returns:
        Resolved path

    Raises:
        FileNotFoundError: File missing
        DomainError: Extension not allowed
    """
    resolved = Path(path).expanduser().resolve()

    if must_exist and not resolved.is_file():
        raise FileNotFoundError(f"File not found: {path}")

    if allowed_extensions:
        ext = resolved.suffix.lower()
        if ext not in [e.lower() for e in allowed_extensions]:
            raise DomainError(
                f"Unsupported file extension '{ext}' for {path}; "
                f"expected one of {', '.join(allowed_extensions)}"
            )

    return resolved


# Version info
__version__ = "0.1.0"
