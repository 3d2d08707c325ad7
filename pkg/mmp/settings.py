import logging
import os
from pathlib import Path
from typing import Any, Dict, Optional

import yaml

logger = logging.getLogger(__name__)

LOG_FORMAT = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
DEFAULT_PROFILES_PATH = Path(__file__).resolve().parent.parent / "solvers.yml"


def configure_logging(level: Optional[str] = None) -> None:
    """Configure root logging from MMP_LOG_LEVEL unless a level is given"""
    name = (level or os.environ.get("MMP_LOG_LEVEL", "INFO")).upper()
    logging.basicConfig(level=getattr(logging, name, logging.INFO), format=LOG_FORMAT)


def ledger_path() -> Optional[str]:
    """Path of the sqlite run ledger, None when MMP_LEDGER is set to an empty string"""
    value = os.environ.get("MMP_LEDGER")
    if value is None:
        return "./data/ledger.db"
    return value or None


def load_solver_profiles(path: Optional[Path] = None) -> Dict[str, Dict[str, Any]]:
    """
    Load the named solver profiles registry

    Returns:
        Mapping profile id -> solver keys
    """
    registry = Path(path) if path else DEFAULT_PROFILES_PATH
    if not registry.exists():
        logger.warning(f"Solver profile registry not found: {registry}")
        return {}
    with open(registry) as f:
        entries = yaml.safe_load(f) or []
    profiles = {}
    for entry in entries:
        profile_id = entry.get("id")
        if not profile_id:
            continue
        profiles[profile_id] = dict(entry.get("solver", {}))
    return profiles
