"""
database.py – DepthAug3D
SQLite results store: connection management, schema init and the
append-only run records of an experiment grid.

  - WAL journal mode so report readers never block a running grid
  - Context-manager helper _db() to guarantee connection close
  - One INSERT per transaction; a run record is either fully there or absent
  - Reads return the latest record per run key from a single snapshot
"""

import json
import logging
import sqlite3
from contextlib import contextmanager
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Set, Tuple, Union

from errors import IoError

logger = logging.getLogger(__name__)

# ── Configuration ─────────────────────────────────────────────────────────────

DB_NAME = 'results.db'

RunTuple = Tuple[str, int, int, int, float]


def db_path_for(out_dir: Union[str, Path]) -> Path:
    """Results store location inside an output directory."""
    return Path(out_dir) / DB_NAME


# ── Connection ────────────────────────────────────────────────────────────────

@contextmanager
def _db(db_path: Union[str, Path]):
    """
    Context manager for SQLite connections.
    Guarantees the connection is always closed, even on exceptions.
    """
    Path(db_path).parent.mkdir(parents=True, exist_ok=True)
    conn = sqlite3.connect(str(db_path), timeout=30.0)
    conn.row_factory = sqlite3.Row
    try:
        conn.execute("PRAGMA journal_mode = WAL")
        conn.execute("PRAGMA synchronous = NORMAL")
        yield conn
    except sqlite3.Error as e:
        conn.rollback()
        raise IoError(f"Failed to access results store {db_path}: {e}")
    except Exception:
        conn.rollback()
        raise
    finally:
        conn.close()


# ── Schema Init ───────────────────────────────────────────────────────────────

def init_db(db_path: Union[str, Path]) -> None:
    """
    Create the runs table and its index if they do not already exist.
    Safe to call before every grid.
    """
    with _db(db_path) as conn:
        conn.executescript("""
            BEGIN;

            -- One row per finished (or failed) run attempt; never updated
            CREATE TABLE IF NOT EXISTS runs (
                id         INTEGER PRIMARY KEY AUTOINCREMENT,
                strategy   TEXT    NOT NULL,
                depth      INTEGER NOT NULL,
                fold       INTEGER NOT NULL,
                trial      INTEGER NOT NULL,
                dropout    REAL    NOT NULL,
                status     TEXT    NOT NULL CHECK(status IN ('ok', 'error')),
                payload    TEXT    NOT NULL,
                created_at TEXT    NOT NULL
            );

            CREATE INDEX IF NOT EXISTS idx_runs_key
                ON runs(strategy, depth, fold, trial, dropout, id DESC);

            COMMIT;
        """)
    logger.debug("Results store initialised – %s", db_path)


# ── Runs ──────────────────────────────────────────────────────────────────────

def save_run(db_path: Union[str, Path], key: RunTuple, status: str, payload: Dict[str, Any]) -> int:
    """
    Append one run record.

    Args:
        key:     (strategy, depth, fold, trial, dropout)
        status:  'ok' or 'error'
        payload: JSON-serialisable result (or error description)

    Returns:
        The new row id.
    """
    if status not in ('ok', 'error'):
        raise ValueError("status must be 'ok' or 'error'")
    strategy, depth, fold, trial, dropout = key
    created_at = datetime.now().strftime('%Y-%m-%d %H:%M:%S')

    with _db(db_path) as conn:
        cur = conn.execute(
            "INSERT INTO runs (strategy, depth, fold, trial, dropout, status, payload, created_at) "
            "VALUES (?, ?, ?, ?, ?, ?, ?, ?)",
            (str(strategy), int(depth), int(fold), int(trial), float(dropout), status,
             json.dumps(payload, sort_keys=True), created_at)
        )
        conn.commit()
        return cur.lastrowid


def get_latest_runs(db_path: Union[str, Path], status: Optional[str] = None) -> List[Dict[str, Any]]:
    """
    Latest record per run key, ordered by key. Returns [] when the store
    does not exist yet.
    """
    if not Path(db_path).exists():
        return []
    query = """
        SELECT r.id, r.strategy, r.depth, r.fold, r.trial, r.dropout, r.status, r.payload, r.created_at
        FROM runs r
        JOIN (
            SELECT MAX(id) AS id FROM runs
            GROUP BY strategy, depth, fold, trial, dropout
        ) latest ON r.id = latest.id
    """
    params: Tuple = ()
    if status is not None:
        query += " WHERE r.status = ?"
        params = (status,)
    query += " ORDER BY r.strategy, r.depth, r.fold, r.trial, r.dropout"

    with _db(db_path) as conn:
        rows = conn.execute(query, params).fetchall()
    return [{**dict(row), 'payload': json.loads(row['payload'])} for row in rows]


def completed_keys(db_path: Union[str, Path]) -> Set[RunTuple]:
    """Run keys whose latest record succeeded."""
    return {
        (r['strategy'], r['depth'], r['fold'], r['trial'], r['dropout'])
        for r in get_latest_runs(db_path, status='ok')
    }


def count_runs(db_path: Union[str, Path]) -> int:
    """Total number of stored attempts (all statuses)."""
    if not Path(db_path).exists():
        return 0
    with _db(db_path) as conn:
        return conn.execute("SELECT COUNT(*) FROM runs").fetchone()[0]
