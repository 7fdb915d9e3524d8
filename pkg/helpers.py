"""
helpers.py – DepthAug3D
Shared file utilities: JSON / JSON-lines I/O, atomic writes, seed mixing
and the "mean ± std" formatting used by every report.
"""

import hashlib
import json
import logging
import os
import tempfile
from pathlib import Path
from typing import Any, Dict, Iterable, List, Union

from errors import IoError, MissingFile, ParseError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


# ── Directories ───────────────────────────────────────────────────────────────

def ensure_dir(path: PathLike) -> Path:
    """Create *path* (and parents) if missing and return it as a Path."""
    path = Path(path)
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise IoError(f"Failed to create directory {path}: {e}")
    return path


# ── Atomic text writes ────────────────────────────────────────────────────────

def atomic_write_text(path: PathLike, text: str) -> None:
    """
    Write *text* to *path* through a temp file + rename so readers never
    observe a half-written file.
    """
    path = Path(path)
    ensure_dir(path.parent)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
        with os.fdopen(fd, 'w', encoding='utf-8') as f:
            f.write(text)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"Failed to write {path}: {e}")


def atomic_write_bytes(path: PathLike, payload: bytes) -> None:
    """Binary counterpart of atomic_write_text."""
    path = Path(path)
    ensure_dir(path.parent)
    try:
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f'.{path.name}.', suffix='.tmp')
        with os.fdopen(fd, 'wb') as f:
            f.write(payload)
        os.replace(tmp, path)
    except OSError as e:
        raise IoError(f"Failed to write {path}: {e}")


# ── JSON helpers ─────────────────────────────────────────────────────────────

def write_json(path: PathLike, data: Any) -> None:
    """Serialise *data* as indented UTF-8 JSON (atomic)."""
    atomic_write_text(path, json.dumps(data, indent=2, ensure_ascii=False, sort_keys=True) + '\n')


def read_json(path: PathLike) -> Any:
    """
    Load a JSON document.

    Raises:
        MissingFile: If *path* does not exist.
        ParseError:  If the content is not valid JSON.
        IoError:     On any other read failure.
    """
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return json.load(f)
    except FileNotFoundError:
        raise MissingFile(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON in {path}: {e}")
    except OSError as e:
        raise IoError(f"Failed to read {path}: {e}")


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> None:
    """Write one JSON object per line (atomic)."""
    lines = [json.dumps(r, ensure_ascii=False, sort_keys=True) for r in records]
    atomic_write_text(path, '\n'.join(lines) + ('\n' if lines else ''))


def read_jsonl(path: PathLike) -> List[Dict[str, Any]]:
    """Read a JSON-lines file written by write_jsonl."""
    path = Path(path)
    try:
        with open(path, 'r', encoding='utf-8') as f:
            return [json.loads(line) for line in f if line.strip()]
    except FileNotFoundError:
        raise MissingFile(f"File not found: {path}")
    except json.JSONDecodeError as e:
        raise ParseError(f"Invalid JSON line in {path}: {e}")
    except OSError as e:
        raise IoError(f"Failed to read {path}: {e}")


# ── Seeds ─────────────────────────────────────────────────────────────────────

def mix_seed(*parts: Any) -> int:
    """
    Deterministically mix arbitrary parts into a 64-bit unsigned seed.

    The parts are rendered with repr(), joined with a unit separator and
    hashed with BLAKE2b (8-byte digest, little-endian).
    """
    text = '\x1f'.join(repr(p) for p in parts).encode('utf-8')
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), 'little')


# ── Formatting ────────────────────────────────────────────────────────────────

def format_mean_std(mean: float, std: float, percent: bool = True, digits: int = 2) -> str:
    """Render ``87.21 ± 0.88`` style cells."""
    scale = 100.0 if percent else 1.0
    return f"{mean * scale:.{digits}f} ± {std * scale:.{digits}f}"
