import logging
import os
import warnings


def silence_warnings_and_logs() -> None:
    """Suppress Python warnings and noisy numerical loggers.

    Call it as early as possible in the process, before any solver runs.
    """
    # Environment-level suppression for Python warnings
    os.environ.setdefault("PYTHONWARNINGS", "ignore")

    warnings.filterwarnings("ignore")
    for _category in (
        Warning,
        DeprecationWarning,
        RuntimeWarning,
        UserWarning,
    ):
        try:
            warnings.filterwarnings("ignore", category=_category)
        except Exception:
            pass

    # scipy.sparse efficiency and linalg warnings are only importable once scipy is present
    try:
        from scipy.linalg import LinAlgWarning
        from scipy.sparse import SparseEfficiencyWarning

        warnings.filterwarnings("ignore", category=SparseEfficiencyWarning)
        warnings.filterwarnings("ignore", category=LinAlgWarning)
    except Exception:
        pass

    try:
        import numpy as np

        np.seterr(all="ignore")
    except Exception:
        pass

    # Route warnings through logging, then quiet library loggers
    try:
        logging.captureWarnings(True)
        logging.getLogger().setLevel(logging.ERROR)
        for _name in ("stochcov", "py.warnings", "pydantic"):
            logging.getLogger(_name).setLevel(logging.ERROR)
    except Exception:
        pass


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format="%(asctime)s - %(name)s - %(levelname)s - %(message)s",
    )
