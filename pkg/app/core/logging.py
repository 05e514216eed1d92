import logging

from app.core.config import settings


def configure_logging(level: str = None) -> None:
    """Configure root logging once for an entry point."""
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
