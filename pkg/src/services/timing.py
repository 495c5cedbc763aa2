import functools
import time

from loguru import logger


def process_time(label: str | None = None):
    """
    Decorator that logs how long the wrapped command took.

    Args:
        label (str | None): Name used in the log line. Defaults to the function name.
    """

    def decorator(func):
        name = label or func.__name__

        @functools.wraps(func)
        def wrapper(*args, **kwargs):
            start_time = time.perf_counter()
            try:
                return func(*args, **kwargs)
            finally:
                logger.info(f"{name} finished in {time.perf_counter() - start_time:.2f}s")

        return wrapper

    return decorator
