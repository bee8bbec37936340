"""
Configuration Module
Loads environment variables and provides default settings for model fitting,
effect queries and significance testing
"""

import os
from pathlib import Path
from typing import Tuple
from dotenv import load_dotenv

# Load .env file if it exists
env_path = Path(".") / ".env"
if env_path.exists():
    load_dotenv(env_path)


VERSION = "1.0.0"


def _floats(value: str) -> Tuple[float, ...]:
    return tuple(float(v) for v in value.split(",") if v.strip())


class Config:
    """Configuration class for the application"""

    # Network Configuration
    HIDDEN_LAYERS: int = int(os.getenv("CDRNN_HIDDEN_LAYERS", "2"))
    HIDDEN_UNITS: int = int(os.getenv("CDRNN_HIDDEN_UNITS", "32"))
    WEIGHT_L2: float = float(os.getenv("CDRNN_WEIGHT_L2", "5"))
    RANEF_L2: float = float(os.getenv("CDRNN_RANEF_L2", "10"))
    RANEF_PRIOR_SCALE: float = float(os.getenv("CDRNN_RANEF_PRIOR_SCALE", "0.1"))
    DROPOUT: float = float(os.getenv("CDRNN_DROPOUT", "0.2"))
    HISTORY_LENGTH: int = int(os.getenv("CDRNN_HISTORY_LENGTH", "32"))
    EPSILON: float = float(os.getenv("CDRNN_EPSILON", "1e-5"))
    INFERENCE: str = os.getenv("CDRNN_INFERENCE", "variational")

    # Optimization Configuration
    LEARNING_RATE: float = float(os.getenv("CDRNN_LEARNING_RATE", "0.003"))
    BATCH_SIZE: int = int(os.getenv("CDRNN_BATCH_SIZE", "1024"))
    MAX_EPOCHS: int = int(os.getenv("CDRNN_MAX_EPOCHS", "5000"))
    CLIP_NORM: float = float(os.getenv("CDRNN_CLIP_NORM", "1.0"))
    EMA_DECAY: float = float(os.getenv("CDRNN_EMA_DECAY", "0.999"))
    GUARD_DECAY: float = float(os.getenv("CDRNN_GUARD_DECAY", "0.999"))
    GUARD_THRESHOLD: float = float(os.getenv("CDRNN_GUARD_THRESHOLD", "1000"))
    CHECKPOINT_EVERY: int = int(os.getenv("CDRNN_CHECKPOINT_EVERY", "10"))
    MAX_RESTORES: int = int(os.getenv("CDRNN_MAX_RESTORES", "3"))

    # Convergence Configuration
    CONVERGENCE_WINDOW: int = int(os.getenv("CDRNN_CONVERGENCE_WINDOW", "100"))
    CONVERGENCE_ALPHA: float = float(os.getenv("CDRNN_CONVERGENCE_ALPHA", "0.5"))
    EXPLORATORY_EVERY: int = int(os.getenv("CDRNN_EXPLORATORY_EVERY", "10"))

    # Query Configuration
    PLOT_HORIZON: float = float(os.getenv("CDRNN_PLOT_HORIZON", "2.5"))
    DELAY_POINTS: int = int(os.getenv("CDRNN_DELAY_POINTS", "101"))
    QUERY_SAMPLES: int = int(os.getenv("CDRNN_QUERY_SAMPLES", "100"))
    BAND_QUANTILES: Tuple[float, ...] = _floats(os.getenv("CDRNN_BAND_QUANTILES", "0.025,0.5,0.975"))

    # Significance Testing Configuration
    PERMUTATION_ITERATIONS: int = int(os.getenv("CDRNN_PERMUTATION_ITERATIONS", "10000"))
    ENSEMBLE_SIZE: int = int(os.getenv("CDRNN_ENSEMBLE_SIZE", "10"))
    SPLIT_RATIOS: Tuple[float, ...] = _floats(os.getenv("CDRNN_SPLIT_RATIOS", "0.5,0.25,0.25"))

    # Logging Configuration
    LOG_LEVEL: str = os.getenv("LOG_LEVEL", "INFO")
    LOG_FILE: str = os.getenv("LOG_FILE", "")

    # Paths
    RUNS_DIR: Path = Path(os.getenv("CDRNN_RUNS_DIR", "runs"))

    @classmethod
    def print_config(cls):
        """Print current configuration"""
        print("\n" + "=" * 70)
        print(" CDRNN CONFIGURATION")
        print("=" * 70)
        print(f"Network: {cls.HIDDEN_LAYERS}x{cls.HIDDEN_UNITS}, dropout={cls.DROPOUT}, "
              f"L2={cls.WEIGHT_L2}, ranef L2={cls.RANEF_L2}, inference={cls.INFERENCE}")
        print(f"Optimizer: lr={cls.LEARNING_RATE}, batch={cls.BATCH_SIZE}, "
              f"max epochs={cls.MAX_EPOCHS}")
        print(f"Convergence: window={cls.CONVERGENCE_WINDOW}, alpha={cls.CONVERGENCE_ALPHA}")
        print(f"Testing: B={cls.PERMUTATION_ITERATIONS}, E={cls.ENSEMBLE_SIZE}")
        print("=" * 70 + "\n")


# Create global config instance
config = Config()


if __name__ == "__main__":
    config.print_config()
