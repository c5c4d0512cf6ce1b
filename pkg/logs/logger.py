import logging
import os
from datetime import datetime
from pathlib import Path

from config import config


# Log directory
LOG_DIR = Path(os.getenv("GCD_LOG_DIR", config.get("logging.dir", "/tmp/logs")))
LOG_DIR.mkdir(parents=True, exist_ok=True)

# Log file name
today = datetime.now().strftime('%Y%m%d')
log_filename = LOG_DIR / f'gcd_lab_{today}.txt'

# Basic logging config
logging.basicConfig(
    level=getattr(logging, str(config.get("logging.level", "INFO")).upper(), logging.INFO),
    format='%(asctime)s - %(levelname)s - %(message)s',
    handlers=[
        logging.FileHandler(log_filename),
        logging.StreamHandler()
    ]
)

# Logger instance
logger = logging.getLogger("gcd_lab")
