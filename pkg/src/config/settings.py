import os

# Get the project root directory (parent of src)
PROJECT_ROOT = os.path.dirname(
    os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
)


def _env_bool(name: str, default: str) -> bool:
    return os.environ.get(name, default).strip().lower() in ("1", "true", "yes", "on")


OUTPUT_DIRECTORY = os.environ.get(
    "ASABLADE_OUT_DIR", os.path.join(PROJECT_ROOT, "data", "output")
)
MAX_WORKERS = int(os.environ.get("MAX_WORKERS", "4"))
DEFAULT_SEED = int(os.environ.get("ASABLADE_SEED", "42"))

# Adaptive block-sparse attention defaults
ASA_BLOCK_SIZE = int(os.environ.get("ASA_BLOCK_SIZE", "128"))
ASA_SAMPLES = int(os.environ.get("ASA_SAMPLES", "16"))
ASA_TAU = float(os.environ.get("ASA_TAU", "0.9"))
ASA_MIN_KEEP = float(os.environ.get("ASA_MIN_KEEP", "0.05"))
ASA_MAX_KEEP = float(os.environ.get("ASA_MAX_KEEP", "1.0"))
ASA_POOL_N = int(os.environ.get("ASA_POOL_N", "0"))
ASA_SAMPLING = os.environ.get("ASA_SAMPLING", "uniform")
GILBERT_MODE = os.environ.get("GILBERT_MODE", "3d")

# Available token-ordering modes
GILBERT_MODES = ("3d", "2d", "off")

# Available sampling strategies for the prober
SAMPLING_MODES = ("uniform", "strided")

# Pipeline variants understood by the bench
PIPELINE_VARIANTS = ("asa", "asa_gt", "asa_gt_no_bias", "static_window", "dense")

# Trajectory distillation defaults
TDM_STAGES = int(os.environ.get("TDM_STAGES", "4"))
TDM_ITERS = int(os.environ.get("TDM_ITERS", "2000"))
TDM_LR_AFFINE = float(os.environ.get("TDM_LR_AFFINE", "1e-2"))
TDM_LR_ATTN = float(os.environ.get("TDM_LR_ATTN", "1e-3"))
TDM_BATCH = int(os.environ.get("TDM_BATCH", "1024"))
TDM_TIMESTEPS_PER_STAGE = int(os.environ.get("TDM_TIMESTEPS_PER_STAGE", "4"))
TDM_EVAL_SAMPLES = int(os.environ.get("TDM_EVAL_SAMPLES", "20000"))
TDM_DIVERGENCE_FACTOR = 10.0
RIDGE_DAMPING = 1e-6

# Theory suite defaults
RANK_LAW_N = 16384
RANK_LAW_K = 256
RANK_LAW_TRIALS = 100_000
RANK_LAW_CHUNK = 10_000
CONFIDENCE_LEVELS = (0.68, 0.95, 0.99)

# Sweep report columns, in order
SWEEP_COLUMNS = [
    "tau",
    "variant",
    "sparsity",
    "rel_error",
    "psnr",
    "ssim",
    "flops_ratio",
    "overlap",
]

# Logging configuration
LOG_DIR = os.environ.get("LOG_DIR", os.path.join(PROJECT_ROOT, "data", "logs"))
LOG_TO_FILE = _env_bool("LOG_TO_FILE", "1")
LOG_RETENTION_DAYS = int(os.environ.get("LOG_RETENTION_DAYS", "5"))
DEFAULT_LOG_LEVEL = os.environ.get("LOG_LEVEL", "INFO").upper()

CONSOLE_LOG_FORMAT = (
    "%(asctime)s [%(levelname)s] %(module)s:%(funcName)s:%(lineno)d - %(message)s"
)
CONSOLE_DATE_FORMAT = "%H:%M:%S"
FILE_LOG_FORMAT = (
    "%(asctime)s - %(name)s - %(levelname)s - "
    "%(module)s:%(funcName)s:%(lineno)d - %(message)s"
)
FILE_DATE_FORMAT = "%Y-%m-%d %H:%M:%S"

LOGGING_CONFIG = {
    "console": {"format": CONSOLE_LOG_FORMAT, "datefmt": CONSOLE_DATE_FORMAT},
    "file": {
        "format": FILE_LOG_FORMAT,
        "datefmt": FILE_DATE_FORMAT,
        "directory": LOG_DIR,
        "enabled": LOG_TO_FILE,
        "retention_days": LOG_RETENTION_DAYS,
    },
    "level": DEFAULT_LOG_LEVEL,
}

# Log colors for terminal output
LOG_COLORS = {
    "DEBUG": "\033[36m",  # Cyan
    "INFO": "\033[32m",  # Green
    "WARNING": "\033[33m",  # Yellow
    "ERROR": "\033[31m",  # Red
    "CRITICAL": "\033[35m",  # Magenta
    "RESET": "\033[0m",  # Reset color
}

# Colors for summary reports
REPORT_COLORS = {
    "GREEN": "\033[92m",
    "BLUE": "\033[94m",
    "YELLOW": "\033[93m",
    "CYAN": "\033[96m",
    "MAGENTA": "\033[95m",
    "WHITE": "\033[97m",
    "BOLD": "\033[1m",
    "RESET": "\033[0m",
}
