import json
import logging
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import sqlite_utils

logger = logging.getLogger(__name__)

TABLE = "run_log"


def _encode(data: Any) -> Optional[str]:
    return json.dumps(data, default=str) if data is not None else None


class RunLedger:
    """SQLite record of every pipeline stage; without a path it records nothing"""

    def __init__(self, db_path: Optional[Union[str, Path]] = "./data/ledger.db"):
        self.db_path = Path(db_path) if db_path else None
        if self.db_path is not None:
            self.db_path.parent.mkdir(parents=True, exist_ok=True)

    @property
    def enabled(self) -> bool:
        return self.db_path is not None

    def log_stage(
        self,
        stage: str,
        agent: Optional[int] = None,
        input_data: Any = None,
        output_data: Any = None,
        success: bool = True,
        error_message: Optional[str] = None,
    ):
        """Append one stage outcome; storage failures are logged, never raised"""
        if self.db_path is None:
            return
        try:
            db = sqlite_utils.Database(self.db_path)
            try:
                db[TABLE].insert(
                    {
                        "timestamp": datetime.now(timezone.utc).isoformat(),
                        "stage": stage,
                        "agent": agent,
                        "input_data": _encode(input_data),
                        "output_data": _encode(output_data),
                        "success": success,
                        "error_message": error_message,
                    },
                    alter=True,
                )
            finally:
                db.conn.close()
        except Exception as e:
            logger.error(f"Failed to log to run ledger: {e}")

    def entries(
        self, stage: Optional[str] = None, agent: Optional[int] = None
    ) -> List[Dict[str, Any]]:
        if self.db_path is None or not self.db_path.exists():
            return []
        db = sqlite_utils.Database(self.db_path)
        try:
            if TABLE not in db.table_names():
                return []
            clauses, params = [], []
            if stage is not None:
                clauses.append("stage = ?")
                params.append(stage)
            if agent is not None:
                clauses.append("agent = ?")
                params.append(agent)
            where = " and ".join(clauses) or None
            return list(db[TABLE].rows_where(where, params, order_by="rowid"))
        finally:
            db.conn.close()
