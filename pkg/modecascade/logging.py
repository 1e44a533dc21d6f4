import logging
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from time import perf_counter

logger = logging.getLogger(__name__)


@contextmanager
def log_phase(label: str, log: logging.Logger | None = None) -> Iterator[None]:
    """Log the start, end and wall time of a named phase.

    Parameters
    ----------
    label : str
        Name of the phase shown in the log.
    log : logging.Logger, optional
        Logger to write to, by default this module's logger.
    """
    log = log or logger
    log.info(f"{label}...")
    start = perf_counter()
    try:
        yield
    except Exception:
        log.error(f"{label} failed after {perf_counter() - start:.2f} s")
        raise
    log.info(f"{label} done in {perf_counter() - start:.2f} s")


def setup_logging(log_file: str | None = None, level: int = logging.INFO) -> None:
    """Sets up logging output.

    Parameters
    ----------
    log_file: str | None
        Setup path to log file.
    level: int
        Logging level of the root logger, by default INFO.
    """
    # create handlers list
    handlers: list[logging.Handler] = []

    # create file write handler if log file specified
    if log_file:
        # get log file path
        log_file_path = Path(log_file).resolve()

        # create path to log if needed
        log_file_path.parent.mkdir(parents=True, exist_ok=True)

        # append to handlers
        handlers.append(logging.FileHandler(str(log_file_path), mode="w"))  # will overwrite logs if they exist at path

    # add stdout streaming to handlers
    handlers.append(logging.StreamHandler(sys.stdout))

    # setup log output config
    logging.basicConfig(
        level=level, format="[%(asctime)s] %(levelname)s: %(message)s", handlers=handlers, force=True
    )
