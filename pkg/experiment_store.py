"""
SQLite registry of experiment runs: one row per run, per-part metrics and
per-epoch training losses.
"""

import json
import logging
import sqlite3
from typing import Any, Dict, List

logger = logging.getLogger(__name__)


class ExperimentStore:
    """Run registry stored next to the run outputs"""

    def __init__(self, db_path: str = "experiments.db"):
        self.db_path = db_path
        self.init_db()

    def init_db(self):
        """Create tables if they don't exist"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS experiments (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                name TEXT NOT NULL,
                strategy TEXT NOT NULL,
                config TEXT NOT NULL,
                status TEXT DEFAULT 'running',
                error TEXT,
                created_at DATETIME DEFAULT CURRENT_TIMESTAMP
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS part_metrics (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                experiment_id INTEGER,
                part INTEGER NOT NULL,
                mrr_whole REAL,
                mrr_avg REAL,
                hits10_whole REAL,
                hits10_avg REAL,
                accuracy_whole REAL,
                accuracy_avg REAL,
                n_queries INTEGER,
                runtime_s REAL,
                replayed_instances INTEGER,
                FOREIGN KEY (experiment_id) REFERENCES experiments (id)
            )
        ''')

        cursor.execute('''
            CREATE TABLE IF NOT EXISTS epoch_logs (
                id INTEGER PRIMARY KEY AUTOINCREMENT,
                experiment_id INTEGER,
                part INTEGER NOT NULL,
                epoch INTEGER NOT NULL,
                loss_new REAL,
                loss_old REAL,
                loss_norm REAL,
                seconds REAL,
                FOREIGN KEY (experiment_id) REFERENCES experiments (id)
            )
        ''')

        conn.commit()
        conn.close()

    def create_experiment(self, name: str, strategy: str, config: Dict[str, Any]) -> int:
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO experiments (name, strategy, config) VALUES (?, ?, ?)
        ''', (name, strategy, json.dumps(config, sort_keys=True)))
        experiment_id = cursor.lastrowid
        conn.commit()
        conn.close()
        return experiment_id

    def set_status(self, experiment_id: int, status: str, error: str = None):
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('UPDATE experiments SET status = ?, error = ? WHERE id = ?',
                       (status, error, experiment_id))
        conn.commit()
        conn.close()

    def log_part(self, experiment_id: int, report: Dict[str, Any]):
        """Store one per-part metrics report"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            INSERT INTO part_metrics
            (experiment_id, part, mrr_whole, mrr_avg, hits10_whole, hits10_avg,
             accuracy_whole, accuracy_avg, n_queries, runtime_s, replayed_instances)
            VALUES (?, ?, ?, ?, ?, ?, ?, ?, ?, ?, ?)
        ''', (
            experiment_id,
            report["part"],
            report.get("mrr_whole"),
            report.get("mrr_avg"),
            report.get("hits10_whole"),
            report.get("hits10_avg"),
            report.get("accuracy_whole"),
            report.get("accuracy_avg"),
            report.get("n_queries"),
            report.get("runtime_s"),
            report.get("replayed_instances"),
        ))
        conn.commit()
        conn.close()

    def log_epochs(self, experiment_id: int, records: List[Dict[str, Any]]):
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.executemany('''
            INSERT INTO epoch_logs
            (experiment_id, part, epoch, loss_new, loss_old, loss_norm, seconds)
            VALUES (?, ?, ?, ?, ?, ?, ?)
        ''', [(experiment_id, r["part"], r["epoch"], r["L_new"], r["L_old"], r["L_norm"], r["seconds"])
              for r in records])
        conn.commit()
        conn.close()

    def history(self) -> List[Dict[str, Any]]:
        """All runs, newest first"""
        conn = sqlite3.connect(self.db_path)
        cursor = conn.cursor()
        cursor.execute('''
            SELECT e.id, e.name, e.strategy, e.status, e.error, e.created_at,
                   COUNT(m.id), MAX(m.part)
            FROM experiments e
            LEFT JOIN part_metrics m ON m.experiment_id = e.id
            GROUP BY e.id
            ORDER BY e.id DESC
        ''')
        history = []
        for row in cursor.fetchall():
            history.append({
                'id': row[0],
                'name': row[1],
                'strategy': row[2],
                'status': row[3],
                'error': row[4],
                'created_at': row[5],
                'parts_completed': row[6],
                'last_part': row[7],
            })
        conn.close()
        return history

    def part_metrics(self, experiment_id: int) -> List[Dict[str, Any]]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM part_metrics WHERE experiment_id = ? ORDER BY part',
                       (experiment_id,))
        rows = [dict(row) for row in cursor.fetchall()]
        conn.close()
        return rows

    def epoch_logs(self, experiment_id: int) -> List[Dict[str, Any]]:
        conn = sqlite3.connect(self.db_path)
        conn.row_factory = sqlite3.Row
        cursor = conn.cursor()
        cursor.execute('SELECT * FROM epoch_logs WHERE experiment_id = ? ORDER BY part, epoch',
                       (experiment_id,))
        rows = [dict(row) for row in cursor.fetchall()]
        conn.close()
        return rows
