from pathlib import Path
import os
from dotenv import load_dotenv

BASE_DIR = Path(__file__).resolve().parent.parent
load_dotenv(BASE_DIR / ".env")

def bool_env(name, default="0"):
    val = os.getenv(name, default).strip().lower()
    return val in ("1", "true", "yes", "on")

def int_env(name, default):
    return int(os.getenv(name, str(default)).strip())

def float_env(name, default):
    return float(os.getenv(name, str(default)).strip())

SECRET_KEY = os.getenv("DJANGO_SECRET_KEY", "dev-insecure-key-change-me")
DEBUG = bool_env("DJANGO_DEBUG", "1")

INSTALLED_APPS = [
    "rest_framework",
    "sampling",
]

# No database: every computation is in memory.
DATABASES = {}

LANGUAGE_CODE = "en-us"
TIME_ZONE = "UTC"
USE_I18N = True
USE_TZ = True

LOGGING = {
    "version": 1,
    "disable_existing_loggers": False,
    "formatters": {
        "plain": {"format": "%(asctime)s %(levelname)s %(name)s: %(message)s"},
    },
    "handlers": {
        "console": {"class": "logging.StreamHandler", "formatter": "plain"},
    },
    "loggers": {
        "sampling": {
            "handlers": ["console"],
            "level": os.getenv("SAMPLING_LOG_LEVEL", "INFO").upper(),
            "propagate": False,
        },
    },
}

# Seeding contract: master seed + replication counter -> Philox stream.
SAMPLING_MASTER_SEED = int_env("SAMPLING_MASTER_SEED", 20240101)
SAMPLING_REPLICATIONS = int_env("SAMPLING_REPLICATIONS", 100_000)
SAMPLING_WORKERS = int_env("SAMPLING_WORKERS", 1)
SAMPLING_BLOCK_SIZE = int_env("SAMPLING_BLOCK_SIZE", 5_000)
SAMPLING_PROGRESS = bool_env("SAMPLING_PROGRESS", "0")

SAMPLING_REJECTION_CAP = int_env("SAMPLING_REJECTION_CAP", 1_000_000)
SAMPLING_SEQUENTIAL_BELOW_DN = float_env("SAMPLING_SEQUENTIAL_BELOW_DN", 4.0)

SAMPLING_SOLVER_MAX_ITER = int_env("SAMPLING_SOLVER_MAX_ITER", 500)
SAMPLING_SOLVER_TOL = float_env("SAMPLING_SOLVER_TOL", 1e-13)
SAMPLING_LOG_DOMAIN_ABOVE_N = int_env("SAMPLING_LOG_DOMAIN_ABOVE_N", 2000)

SAMPLING_ENUMERATION_CAP = int_env("SAMPLING_ENUMERATION_CAP", 2_000_000)
SAMPLING_ENUMERATION_MAX_N = int_env("SAMPLING_ENUMERATION_MAX_N", 20)

# Universal constants of the rejective bounds; the defaults are uncalibrated.
SAMPLING_CONSTANT_C = float_env("SAMPLING_CONSTANT_C", 1.0)
SAMPLING_CONSTANT_D = float_env("SAMPLING_CONSTANT_D", 1.0)
SAMPLING_CONFIDENCE_LEVEL = float_env("SAMPLING_CONFIDENCE_LEVEL", 0.95)
