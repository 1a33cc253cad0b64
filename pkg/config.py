import logging
import os
from pathlib import Path
from dotenv import load_dotenv

from backend.errors import ConfigError

# Load environment variables from .env file
load_dotenv()

# Base directory
BASE_DIR = Path(__file__).parent


class Config:
    # App settings
    DEBUG = os.getenv("DEBUG", "False").lower() == "true"
    GEN_CONCURRENCY = int(os.getenv("GEN_CONCURRENCY", "2"))
    MOLDIFF_CONFIG = os.getenv("MOLDIFF_CONFIG")

    # File paths
    DATA_DIR = Path(os.getenv("MOLDIFF_DATA_DIR", str(BASE_DIR / "data")))
    DATASET_DIR = DATA_DIR / "datasets"
    OUTPUT_DIR = DATA_DIR / "outputs"
    CHECKPOINT_DIR = DATA_DIR / "checkpoints"

    @classmethod
    def create_directories(cls):
        for directory in [cls.DATASET_DIR, cls.OUTPUT_DIR, cls.CHECKPOINT_DIR]:
            directory.mkdir(parents=True, exist_ok=True)

    @classmethod
    def validate_config(cls):
        """Validate environment-level settings"""
        if cls.GEN_CONCURRENCY < 1:
            raise ConfigError("GEN_CONCURRENCY must be at least 1.")
        if cls.MOLDIFF_CONFIG and not Path(cls.MOLDIFF_CONFIG).exists():
            raise ConfigError(f"MOLDIFF_CONFIG points to a missing file: {cls.MOLDIFF_CONFIG}")
        return True

    @classmethod
    def setup_logging(cls):
        logging.basicConfig(
            level=logging.DEBUG if cls.DEBUG else logging.INFO,
            format="[%(name)s] %(message)s",
        )
