import logging
import sys

from src.core.config import settings

logging.basicConfig(
    level=getattr(logging, settings.LOG_LEVEL.upper(), logging.INFO),
    format="%(asctime)s [%(levelname)s] %(name)s: %(message)s",
    handlers=[logging.StreamHandler(sys.stdout)]
)

logger = logging.getLogger("pdmp-lab")


def set_level(level: str) -> None:
    """Adjust the library log level at runtime (used by the CLI `--log-level` flag)."""
    logger.setLevel(getattr(logging, level.upper(), logging.INFO))
