import hashlib
import json
import logging
import os
import sys
from datetime import datetime
from typing import Any


def setup_logging(level: str = 'INFO', environment: str = 'development', log_dir: str = ''):
    """Setup logging for production and development runs"""

    log_format = '%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    handlers = [logging.StreamHandler(sys.stdout)]

    # Local development may also keep a dated log file; never inside a run directory
    if environment != 'production' and log_dir:
        os.makedirs(log_dir, exist_ok=True)
        log_file = os.path.join(log_dir, f"audit_{datetime.now().strftime('%Y%m%d')}.log")
        handlers.append(logging.FileHandler(log_file, encoding='utf-8'))

    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format=log_format,
        handlers=handlers,
        force=True,
    )

    # Quiet down some loggers
    logging.getLogger('urllib3').setLevel(logging.WARNING)
    logging.getLogger('sklearn').setLevel(logging.WARNING)

    logger = logging.getLogger(__name__)
    logger.debug("Logging initialized")


def stable_seed(*parts: Any) -> int:
    """Derive a 63-bit seed from arbitrary parts, independent of PYTHONHASHSEED."""
    digest = hashlib.sha256('\x1f'.join(str(p) for p in parts).encode('utf-8')).digest()
    return int.from_bytes(digest[:8], 'big') >> 1


def hash_payload(payload: Any) -> str:
    """SHA256 of a JSON-serializable payload in canonical form."""
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def prominence_mass(feed_size: int) -> float:
    """Total Zipf prominence of a feed: H(|F|) / |F|."""
    if feed_size <= 0:
        return 0.0
    return sum(1.0 / r for r in range(1, feed_size + 1)) / feed_size


def format_number(value: Any, digits: int = 6) -> str:
    """Locale-independent fixed formatting for report tables."""
    if value is None:
        return ''
    value = float(value)
    if value != value:
        return 'nan'
    if value in (float('inf'), float('-inf')):
        return 'inf' if value > 0 else '-inf'
    text = f"{value:.{digits}f}"
    return '0.' + '0' * digits if text == '-0.' + '0' * digits else text
