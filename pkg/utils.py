#!/usr/bin/env python3
"""
Gap Flight Shared Utilities
===========================

Logging setup, artifact writing with reproducibility metadata, hashing and
progress tracking used across the toolkit.
"""

import hashlib
import json
import logging
import subprocess
import time
from dataclasses import asdict, is_dataclass
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Optional

import numpy as np
import pandas as pd

# ==============================================================================
# --- Logging Configuration ---
# ==============================================================================

_log_level = logging.INFO


def setup_logging(name: str, level: Optional[int] = None) -> logging.Logger:
    """Set up consistent logging across all modules."""
    logger = logging.getLogger(name)
    logger.setLevel(level if level is not None else _log_level)

    if not logger.handlers:
        handler = logging.StreamHandler()
        formatter = logging.Formatter(
            '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
        )
        handler.setFormatter(formatter)
        logger.addHandler(handler)

    return logger


def set_log_level(level: int) -> None:
    """Change the level of every logger created through setup_logging."""
    global _log_level
    _log_level = level
    for logger in logging.Logger.manager.loggerDict.values():
        if isinstance(logger, logging.Logger) and logger.handlers:
            logger.setLevel(level)

# ==============================================================================
# --- Serialization Helpers ---
# ==============================================================================

def safe_json_convert(obj: Any) -> Any:
    """Convert numpy/enum/dataclass values into plain JSON types."""
    if isinstance(obj, dict):
        return {str(k): safe_json_convert(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [safe_json_convert(v) for v in obj]
    if is_dataclass(obj) and not isinstance(obj, type):
        return safe_json_convert(asdict(obj))
    if isinstance(obj, Enum):
        return obj.value
    if isinstance(obj, np.ndarray):
        return safe_json_convert(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        value = float(obj)
        return value if np.isfinite(value) else None
    if isinstance(obj, Path):
        return str(obj)
    return obj


def canonical_json(obj: Any) -> str:
    return json.dumps(safe_json_convert(obj), sort_keys=True, separators=(',', ':'))


def content_hash(*parts: Any, length: int = 12) -> str:
    """Short SHA-256 over the canonical JSON of ``parts``."""
    digest = hashlib.sha256(canonical_json(list(parts)).encode()).hexdigest()
    return digest[:length]


@lru_cache(maxsize=1)
def git_revision() -> str:
    try:
        result = subprocess.run(['git', 'rev-parse', 'HEAD'], capture_output=True, text=True,
                                timeout=5, cwd=Path(__file__).parent)
        if result.returncode == 0:
            return result.stdout.strip()
    except (OSError, subprocess.SubprocessError):
        pass
    return "unknown"


def artifact_metadata(config_hash: str, seed: Optional[int] = None, **extra: Any) -> Dict[str, Any]:
    """Metadata embedded in every artifact. Deliberately timestamp-free."""
    meta = {'git_revision': git_revision(), 'config_hash': config_hash, 'seed': seed}
    meta.update(extra)
    return safe_json_convert(meta)

# ==============================================================================
# --- File Management Utilities ---
# ==============================================================================

def ensure_directory_exists(path: Path) -> None:
    """Ensure a directory exists, creating it if necessary."""
    path.mkdir(parents=True, exist_ok=True)


def safe_file_write(data: Any, filepath: Path, format: str = 'auto',
                    metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write a DataFrame (CSV) or mapping (JSON), embedding ``metadata``.

    CSV metadata goes into leading ``# key: value`` lines; JSON metadata into a
    top-level ``"meta"`` object.
    """
    filepath = Path(filepath)
    ensure_directory_exists(filepath.parent)

    if format == 'auto':
        format = filepath.suffix.lower()

    if format in ['.csv', 'csv']:
        if not hasattr(data, 'to_csv'):
            raise ValueError("Data must be a pandas DataFrame for CSV format")
        with open(filepath, 'w', newline='') as f:
            for key, value in (metadata or {}).items():
                f.write(f"# {key}: {json.dumps(safe_json_convert(value))}\n")
            data.to_csv(f, index=False, float_format='%.10g', lineterminator='\n')

    elif format in ['.json', 'json']:
        payload = safe_json_convert(data)
        if metadata is not None:
            payload = {'meta': safe_json_convert(metadata), **payload}
        with open(filepath, 'w') as f:
            json.dump(payload, f, indent=2, sort_keys=False, default=str)
            f.write("\n")

    else:
        raise ValueError(f"Unsupported format: {format}")
    return filepath


def read_csv_artifact(filepath: Path) -> pd.DataFrame:
    """Read a CSV artifact, skipping its metadata lines."""
    return pd.read_csv(filepath, comment='#')


def read_csv_metadata(filepath: Path) -> Dict[str, Any]:
    meta = {}
    with open(filepath) as f:
        for line in f:
            if not line.startswith('#'):
                break
            key, _, value = line[1:].partition(':')
            meta[key.strip()] = json.loads(value.strip())
    return meta

# ==============================================================================
# --- Analysis Utilities ---
# ==============================================================================

def safe_divide(numerator: float, denominator: float, default: float = 0.0) -> float:
    """Perform safe division with default value for zero denominator."""
    return numerator / denominator if denominator != 0 else default

# ==============================================================================
# --- Progress Tracking ---
# ==============================================================================

class ProgressTracker:
    """Simple progress tracking for long-running operations."""

    def __init__(self, total: int, name: str = "Progress",
                 logger: Optional[logging.Logger] = None):
        self.total = total
        self.name = name
        self.current = 0
        self.logger = logger or setup_logging("ProgressTracker")
        self.start_time = time.time()

    def update(self, increment: int = 1) -> None:
        """Update progress by specified increment."""
        self.current += increment

        if self.current % max(1, self.total // 20) == 0 or self.current >= self.total:
            self._log_progress()

    def _log_progress(self) -> None:
        percentage = (self.current / self.total) * 100 if self.total else 100.0
        elapsed = time.time() - self.start_time

        if self.current > 0:
            eta = (elapsed / self.current) * (self.total - self.current)
            self.logger.info(f"{self.name}: {self.current:,}/{self.total:,} ({percentage:.1f}%) - ETA: {eta:.0f}s")
        else:
            self.logger.info(f"{self.name}: {self.current:,}/{self.total:,} ({percentage:.1f}%)")
