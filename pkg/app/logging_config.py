import logging
import sys
from typing import Optional

from .config import settings

def setup_logging(level: Optional[str] = None):
    """Configures the root logger for lp-lab."""
    logging.basicConfig(
        level=getattr(logging, (level or settings.LOG_LEVEL).upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
        handlers=[
            logging.FileHandler(settings.LOG_FILE),  # Log to a file
            logging.StreamHandler(sys.stdout) # Log to console
        ]
    )
    # Suppress overly verbose logs from third-party libraries
    logging.getLogger("uvicorn.access").setLevel(logging.WARNING)
    logging.getLogger("hypothesis").setLevel(logging.WARNING)
