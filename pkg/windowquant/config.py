import os
from dotenv import load_dotenv

load_dotenv()


class Settings:
    # Search hyperparameters (defaults follow the published setup)
    ALPHA: float = float(os.getenv("WINDOWQUANT_ALPHA", "2.0"))
    WINDOW_SIZE: int = int(os.getenv("WINDOWQUANT_WINDOW_SIZE", "32"))
    SIMILARITY: str = os.getenv("WINDOWQUANT_SIMILARITY", "cosine")

    # Resource limits
    TOKEN_CAP: int = int(os.getenv("WINDOWQUANT_TOKEN_CAP", "16384"))
    BENCH_WORKERS: int = int(os.getenv("WINDOWQUANT_BENCH_WORKERS", "4"))

    # Reproducibility
    SEED: int = int(os.getenv("WINDOWQUANT_SEED", "0"))

    # Logging & error tracking
    LOG_LEVEL: str = os.getenv("WINDOWQUANT_LOG_LEVEL", "INFO")
    ERROR_LOG_PATH: str = os.getenv("WINDOWQUANT_ERROR_LOG_PATH", "")


settings = Settings()

if settings.WINDOW_SIZE < 1 or settings.TOKEN_CAP < 1 or settings.ALPHA <= 0:
    raise RuntimeError(
        "Invalid WindowQuant environment: WINDOW_SIZE and TOKEN_CAP must be >= 1 "
        "and ALPHA must be positive"
    )
