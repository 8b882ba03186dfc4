from pathlib import Path
import os
from dotenv import load_dotenv

load_dotenv()

BASE_DIR = Path(__file__).resolve().parent.parent

# ===== Runtime =====
LOG_LEVEL = os.getenv("DLAB_LOG_LEVEL", "INFO").upper()
PROGRESS = os.getenv("DLAB_PROGRESS", "1") == "1"
THREADS = max(1, int(os.getenv("DLAB_THREADS", "1")))
RUNS_DIR = Path(os.getenv("DLAB_RUNS", str(BASE_DIR / "runs")))

# ===== Optimizer =====
ADAM_LR = float(os.getenv("DLAB_ADAM_LR", "1e-4"))
ADAM_BETA1 = float(os.getenv("DLAB_ADAM_BETA1", "0.9"))
ADAM_BETA2 = float(os.getenv("DLAB_ADAM_BETA2", "0.999"))
ADAM_EPS = 1e-8
DISC_BETA1 = float(os.getenv("DLAB_DISC_BETA1", "0.5"))
DISC_BETA2 = float(os.getenv("DLAB_DISC_BETA2", "0.9"))

# ===== Latent =====
GUMBEL_EPS = 1e-12
INITIAL_SCALE = 0.5
FINAL_SCALE = 2.0
TEMPERATURE = 1.0
MASK_LOGIT = -1e30  # finite stand-in for log(0) inside the graph

# ===== Models =====
LEAKY_SLOPE = 0.2
HIDDEN = 256
DISC_WIDTH = 1000
DISC_DEPTH = 6
PROBE_BATCH = 64
LABEL_TRAIN_SPLIT = 0.9

# ===== Metrics =====
MI_BINS = int(os.getenv("DLAB_MI_BINS", "20"))
METRIC_TRAIN = int(os.getenv("DLAB_METRIC_TRAIN", "10000"))
METRIC_EVAL = int(os.getenv("DLAB_METRIC_EVAL", "5000"))
METRIC_BATCH = int(os.getenv("DLAB_METRIC_BATCH", "64"))
PRUNE_SAMPLES = int(os.getenv("DLAB_PRUNE_SAMPLES", "10000"))
PRUNE_THRESHOLD = 0.05
LOGREG_L2 = 1e-4
LOGREG_ITERS = 500
DOWNSTREAM_SMALL = 100
DOWNSTREAM_LARGE = 10_000
DOWNSTREAM_TEST = 5_000

# ===== Logging =====
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
        "dlab": {"handlers": ["console"], "level": LOG_LEVEL, "propagate": False},
    },
}
