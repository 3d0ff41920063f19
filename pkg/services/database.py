import sqlite3
import uuid
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pandas as pd

from utils.logging import get_logger

logger = get_logger(__name__)


class DatabaseManager:
    """Manages the SQLite run registry of the command line"""

    def __init__(self, db_path: str = "assimilation_runs.db", enabled: bool = True):
        self.db_path = Path(db_path)
        self.enabled = enabled

    def get_connection(self):
        """Get database connection"""
        return sqlite3.connect(str(self.db_path))

    def execute_query(self, query: str, params: tuple = None):
        """Execute a query with proper error handling"""
        if not self.enabled:
            return None
        try:
            with self.get_connection() as conn:
                cursor = conn.cursor()
                if params:
                    cursor.execute(query, params)
                else:
                    cursor.execute(query)
                conn.commit()
                return cursor.fetchall()
        except sqlite3.Error as e:
            logger.warning(f"Database error: {e}")
            return None

    def execute_insert(self, query: str, params: tuple):
        """Execute insert query and return lastrowid"""
        if not self.enabled:
            return None
        try:
            with self.get_connection() as conn:
                cursor = conn.cursor()
                cursor.execute(query, params)
                conn.commit()
                return cursor.lastrowid
        except sqlite3.Error as e:
            logger.warning(f"Database insert error: {e}")
            return None

    def execute_many(self, query: str, rows: List[tuple]):
        """Insert many rows in one transaction"""
        if not self.enabled or not rows:
            return None
        try:
            with self.get_connection() as conn:
                conn.executemany(query, rows)
                conn.commit()
                return len(rows)
        except sqlite3.Error as e:
            logger.warning(f"Database insert error: {e}")
            return None


# Global database manager instance
db_manager = DatabaseManager()


def configure_database(path: str, enabled: bool = True) -> DatabaseManager:
    """Point the global manager at a registry file and create its tables"""
    db_manager.db_path = Path(path)
    db_manager.enabled = enabled
    if enabled:
        if db_manager.db_path.parent != Path(""):
            db_manager.db_path.parent.mkdir(parents=True, exist_ok=True)
        init_database()
    return db_manager


def init_database():
    """Initialize SQLite database with all required tables"""
    if not db_manager.enabled:
        return False
    try:
        with db_manager.get_connection() as conn:
            cursor = conn.cursor()

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS runs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT UNIQUE NOT NULL,
                    command TEXT NOT NULL,
                    started_at TEXT NOT NULL,
                    finished_at TEXT,
                    status TEXT DEFAULT 'running',
                    config_hash TEXT,
                    out_dir TEXT
                )
            ''')

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS run_logs (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    timestamp TEXT NOT NULL,
                    run_id TEXT NOT NULL,
                    log_type TEXT NOT NULL,
                    message TEXT NOT NULL,
                    severity TEXT DEFAULT 'INFO'
                )
            ''')

            cursor.execute('''
                CREATE TABLE IF NOT EXISTS step_metrics (
                    id INTEGER PRIMARY KEY AUTOINCREMENT,
                    run_id TEXT NOT NULL,
                    step INTEGER NOT NULL,
                    grp TEXT NOT NULL,
                    skill REAL,
                    spread REAL,
                    ess REAL,
                    alpha REAL,
                    FOREIGN KEY (run_id) REFERENCES runs(run_id)
                )
            ''')

            conn.commit()
            return True

    except sqlite3.Error as e:
        logger.warning(f"Database initialization error: {e}")
        return False


def start_run(command: str, config_hash: str, out_dir: str) -> str:
    """Register a command run and return its id"""
    run_id = f"{command}-{uuid.uuid4().hex[:12]}"
    db_manager.execute_insert(
        '''
        INSERT INTO runs (run_id, command, started_at, config_hash, out_dir)
        VALUES (?, ?, ?, ?, ?)
        ''',
        (run_id, command, datetime.now().isoformat(), config_hash, out_dir)
    )
    return run_id


def finish_run(run_id: str, status: str = "completed"):
    """Close a run with its final status"""
    db_manager.execute_query(
        '''
        UPDATE runs
        SET finished_at = ?, status = ?
        WHERE run_id = ?
        ''',
        (datetime.now().isoformat(), status, run_id)
    )


def log_to_database(run_id: str, log_type: str, message: str, severity: str = 'INFO'):
    """Log message to database with severity level"""
    db_manager.execute_insert(
        '''
        INSERT INTO run_logs (timestamp, run_id, log_type, message, severity)
        VALUES (?, ?, ?, ?, ?)
        ''',
        (datetime.now().isoformat(), run_id, log_type, message, severity)
    )


def save_step_metrics(run_id: str, metrics: pd.DataFrame):
    """Store the per-step metric rows of an assimilation run"""
    rows = [
        (run_id, int(r.step), str(r.group), _float(r.skill), _float(r.spread),
         _float(r.ess), _float(r.alpha))
        for r in metrics.itertuples(index=False)
    ]
    db_manager.execute_many(
        '''
        INSERT INTO step_metrics (run_id, step, grp, skill, spread, ess, alpha)
        VALUES (?, ?, ?, ?, ?, ?, ?)
        ''',
        rows
    )


def get_runs(command: Optional[str] = None, limit: int = 50) -> List[Dict]:
    """Get registered runs, newest first"""
    if command:
        rows = db_manager.execute_query(
            '''
            SELECT run_id, command, started_at, finished_at, status, config_hash, out_dir
            FROM runs WHERE command = ?
            ORDER BY id DESC LIMIT ?
            ''',
            (command, limit)
        )
    else:
        rows = db_manager.execute_query(
            '''
            SELECT run_id, command, started_at, finished_at, status, config_hash, out_dir
            FROM runs ORDER BY id DESC LIMIT ?
            ''',
            (limit,)
        )
    if not rows:
        return []

    keys = ('run_id', 'command', 'started_at', 'finished_at', 'status', 'config_hash', 'out_dir')
    return [dict(zip(keys, row)) for row in rows]


def get_step_metrics(run_id: str) -> pd.DataFrame:
    """Get the stored metric rows of a run"""
    rows = db_manager.execute_query(
        '''
        SELECT step, grp, skill, spread, ess, alpha
        FROM step_metrics WHERE run_id = ?
        ORDER BY step ASC, id ASC
        ''',
        (run_id,)
    )
    return pd.DataFrame(rows or [], columns=['step', 'group', 'skill', 'spread', 'ess', 'alpha'])


def get_logs_from_database(run_id: Optional[str] = None, limit: int = 100) -> List[Tuple]:
    """Get logs from database with optional run filtering"""
    if run_id:
        rows = db_manager.execute_query(
            '''
            SELECT timestamp, log_type, message, severity
            FROM run_logs WHERE run_id = ?
            ORDER BY id DESC LIMIT ?
            ''',
            (run_id, limit)
        )
    else:
        rows = db_manager.execute_query(
            '''
            SELECT timestamp, log_type, message, severity
            FROM run_logs ORDER BY id DESC LIMIT ?
            ''',
            (limit,)
        )
    return rows if rows else []


def _float(value) -> Optional[float]:
    return None if pd.isna(value) else float(value)
