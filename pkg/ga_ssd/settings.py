import logging
import os
from dataclasses import dataclass

from dotenv import load_dotenv
from rich.console import Console
from rich.logging import RichHandler


console = Console()
err_console = Console(stderr=True)


@dataclass
class Settings:
    log_level: str = "INFO"
    workers: int = 1
    single_thread: bool = False
    dtype: str = "float32"

    @property
    def max_workers(self) -> int:
        return 1 if self.single_thread else max(1, self.workers)


def load_settings() -> Settings:
    load_dotenv()
    dtype = os.getenv("GA_SSD_DTYPE", "float32").lower()
    if dtype not in ("float32", "float64"):
        dtype = "float32"
    return Settings(
        log_level=os.getenv("GA_SSD_LOG_LEVEL", "INFO").upper(),
        workers=int(os.getenv("GA_SSD_WORKERS", str(os.cpu_count() or 1))),
        single_thread=os.getenv("GA_SSD_SINGLE_THREAD", "false").lower() == "true",
        dtype=dtype,
    )


def configure_logging(level: str = "INFO") -> None:
    logging.basicConfig(
        level=level,
        format="%(message)s",
        datefmt="[%X]",
        handlers=[RichHandler(console=err_console, rich_tracebacks=True, show_path=False)],
        force=True,
    )
