import os

from dotenv import load_dotenv

load_dotenv()

LOG_LEVEL = os.getenv("RKM_LOG_LEVEL", "INFO")
LOG_FORMAT = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"
LOG_DIR = os.getenv("LOG_DIR", ".logs")

OUTPUT_DIR = os.getenv("RKM_OUTPUT_DIR", ".output")
DEFAULT_SEED = int(os.getenv("RKM_DEFAULT_SEED", "0"))

LAYER_NORM_EPS = 1e-5
FINITE_DIFF_EPS = 1e-5
GRADCHECK_TOLERANCE = 1e-5

# Static gains used by the linear-kernel variants unless configured otherwise
DEFAULT_SIGMA_SQ = 0.5

CHECKPOINT_MAGIC = b"RKMC"
CHECKPOINT_VERSION = 1
SIGNAL_MAGIC = b"RKMS"
SIGNAL_VERSION = 1

BEST_CHECKPOINT_NAME = "best.ckpt"
REPORT_FILE_NAME = "report.csv"
