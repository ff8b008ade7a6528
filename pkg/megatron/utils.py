"""Shared utilities for the attack toolkit."""
from __future__ import annotations

import hashlib
import json
import logging
import os
import time
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterable, Iterator, List, Optional

try:
    import requests
    from requests.adapters import HTTPAdapter
except ImportError:  # pragma: no cover - ambiente sem requests
    requests = None  # type: ignore[assignment]
    HTTPAdapter = None  # type: ignore[assignment]

try:  # pragma: no cover - ambiente sem urllib3
    from urllib3.util.retry import Retry  # type: ignore[attr-defined]
except ImportError:  # pragma: no cover
    Retry = None  # type: ignore[assignment]

LOGGER = logging.getLogger("megatron")

LOG_FORMAT = "%(asctime)s [%(levelname)s] %(name)s - %(message)s"
DATA_DIR_ENV = "MEGATRON_DATA_DIR"


def setup_logging(level: str = "INFO") -> None:
    log_level = getattr(logging, level.upper(), logging.INFO)
    logging.basicConfig(level=log_level, format=LOG_FORMAT)


@contextmanager
def log_to_file(path: Path) -> Iterator[logging.Handler]:
    """Mirror every ``megatron.*`` record into ``path`` while the block runs."""

    ensure_directory(path.parent)
    handler = logging.FileHandler(path, encoding="utf-8")
    handler.setFormatter(logging.Formatter(LOG_FORMAT))
    root = logging.getLogger("megatron")
    previous = root.level
    if root.level == logging.NOTSET or root.level > logging.INFO:
        root.setLevel(logging.INFO)
    root.addHandler(handler)
    try:
        yield handler
    finally:
        root.removeHandler(handler)
        root.setLevel(previous)
        handler.close()


def create_retry_session(
    retries: int = 3,
    backoff_factor: float = 0.5,
    status_forcelist: Iterable[int] | None = None,
):
    if requests is None:
        raise RuntimeError("Biblioteca 'requests' não está instalada. Instale-a para baixar datasets.")
    session = requests.Session()
    if Retry and HTTPAdapter:
        retry = Retry(
            total=retries,
            read=retries,
            connect=retries,
            backoff_factor=backoff_factor,
            status_forcelist=status_forcelist or (500, 502, 503, 504, 429),
            allowed_methods=("GET", "HEAD"),
            raise_on_status=False,
        )
        adapter = HTTPAdapter(max_retries=retry)
        session.mount("http://", adapter)
        session.mount("https://", adapter)
    session.headers.update({"User-Agent": "megatron-vit/1.0"})
    return session


def ensure_directory(path: Path) -> None:
    path.mkdir(parents=True, exist_ok=True)


def safe_write_json(target: Path, data: Any) -> None:
    """Write JSON with stable key order so artifacts diff cleanly."""

    ensure_directory(target.parent)
    target.write_text(
        json.dumps(data, ensure_ascii=False, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def read_json(path: Path) -> Any:
    with path.open("r", encoding="utf-8") as stream:
        return json.load(stream)


def file_sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with path.open("rb") as handle:
        for chunk in iter(lambda: handle.read(1024 * 64), b""):
            digest.update(chunk)
    return digest.hexdigest()


def json_sha256(data: Any) -> str:
    encoded = json.dumps(data, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(encoded).hexdigest()


def directory_is_empty(path: Path) -> bool:
    return not path.exists() or not any(path.iterdir())


def data_root() -> Optional[Path]:
    raw = os.getenv(DATA_DIR_ENV)
    if not raw:
        return None
    return Path(raw).expanduser()


@dataclass
class StageTimer:
    """Collects wall-clock durations of named pipeline stages."""

    rows: List[Dict[str, Any]] = field(default_factory=list)

    @contextmanager
    def stage(self, name: str) -> Iterator[None]:
        started = time.perf_counter()
        LOGGER.info("Etapa %s iniciada", name)
        status = "ok"
        try:
            yield
        except Exception:
            status = "falhou"
            raise
        finally:
            elapsed = time.perf_counter() - started
            self.rows.append({"stage": name, "seconds": round(elapsed, 3), "status": status})
            LOGGER.info("Etapa %s %s em %.2fs", name, status, elapsed)


__all__ = [
    "DATA_DIR_ENV",
    "StageTimer",
    "create_retry_session",
    "data_root",
    "directory_is_empty",
    "ensure_directory",
    "file_sha256",
    "json_sha256",
    "log_to_file",
    "read_json",
    "safe_write_json",
    "setup_logging",
]
