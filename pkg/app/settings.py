"""Environment-driven defaults shared by the library and the CLI."""

import os

from dotenv import load_dotenv

# Load environment variables from .env file
load_dotenv()

LOG_LEVEL = os.getenv("RDT_LOG_LEVEL", "INFO")
MAX_ENUMERATED_LEAVES = int(os.getenv("RDT_MAX_ENUMERATED_LEAVES", "10000"))
WORKERS = int(os.getenv("RDT_WORKERS", "1"))
INIT_SCALE = float(os.getenv("RDT_INIT_SCALE", "0.1"))
DEFAULT_BOUNDS = os.getenv("RDT_DEFAULT_BOUNDS", "-1.5,-1.5,1.5,1.5")

MODEL_FORMAT_VERSION = 1
