from pathlib import Path
from typing import Optional

from fastapi import Query

from app.core.config import settings
from app.core.exceptions import UsageError


def get_output_dir(out: Optional[str] = Query(None, description="Subdirectory of OUTPUT_DIR")) -> Path:
    """Artifacts of API runs always land below ``settings.OUTPUT_DIR``."""
    root = Path(settings.OUTPUT_DIR).resolve()
    if not out:
        return root
    target = (root / out).resolve()
    if target != root and root not in target.parents:
        raise UsageError(f"output directory '{out}' escapes {settings.OUTPUT_DIR}")
    return target
