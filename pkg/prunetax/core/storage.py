"""Atomic file writes: temp file in the target directory, then rename."""

from __future__ import annotations

import os
import tempfile
from pathlib import Path
from typing import Union


def atomic_write_bytes(path: Union[str, Path], data: bytes, prefix: str = "prunetax_") -> Path:
    """
    Write `data` to `path` atomically.

    Uses temp file + rename so an interrupted write never leaves a
    truncated file behind.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, temp_path = tempfile.mkstemp(suffix=".tmp", prefix=prefix, dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
        os.replace(temp_path, path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
    return path


def atomic_write_text(path: Union[str, Path], text: str, prefix: str = "prunetax_") -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"), prefix=prefix)
