"""
On-disk artifacts shared by every command:
- Atomic file writes (write to a temporary sibling, then rename)
- Staged output directories that only appear once a command succeeds
- JSON-lines readers/writers with stable key order
- The RunManifest written at the end of each command
"""

import json
import logging
import os
import shutil
import tempfile
import time
from contextlib import contextmanager
from dataclasses import asdict, dataclass, field
from pathlib import Path

from dialstory import __version__
from dialstory.errors import DataError

log = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.json"


def dumps(record):
    """Serialize one record the same way every time (sorted keys, compact, UTF-8)."""
    return json.dumps(record, sort_keys=True, ensure_ascii=False, separators=(",", ":"))


def atomic_write_bytes(path, payload):
    """Write bytes to path via a temporary file in the same directory and os.replace."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as handle:
            handle.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text):
    atomic_write_bytes(path, text.encode("utf-8"))


def write_json(path, record):
    atomic_write_text(path, json.dumps(record, sort_keys=True, ensure_ascii=False, indent=2) + "\n")


def read_json(path):
    try:
        with open(path, "r", encoding="utf-8") as handle:
            return json.load(handle)
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: invalid JSON ({exc})") from exc


def write_jsonl(path, records):
    """Write one JSON object per line, atomically."""
    atomic_write_text(path, "".join(dumps(r) + "\n" for r in records))


def read_jsonl(path):
    """Read a JSON-lines file into a list of dicts. Blank lines are ignored."""
    records = []
    try:
        with open(path, "r", encoding="utf-8") as handle:
            for line_number, line in enumerate(handle, start=1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise DataError(f"{path}:{line_number}: invalid JSON ({exc})") from exc
    except FileNotFoundError as exc:
        raise DataError(f"missing file: {path}") from exc
    return records


class JsonlLog:
    """Append-only JSON-lines log (training metrics). Flushed per record."""

    def __init__(self, path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.handle = open(self.path, "w", encoding="utf-8")

    def write(self, record):
        self.handle.write(dumps(record) + "\n")
        self.handle.flush()

    def close(self):
        if self.handle:
            self.handle.close()
            self.handle = None


@contextmanager
def staged_directory(final_dir):
    """
    Yield a temporary directory next to final_dir; on success it replaces final_dir,
    on failure it is removed so no partial output is left behind.
    """
    final_dir = Path(final_dir)
    try:
        final_dir.parent.mkdir(parents=True, exist_ok=True)
        staging = Path(tempfile.mkdtemp(prefix=f".{final_dir.name}.", suffix=".staging", dir=final_dir.parent))
    except OSError as exc:
        raise DataError(f"cannot write to {final_dir}: {exc.strerror or exc}") from exc
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    if final_dir.exists():
        shutil.rmtree(final_dir)
    os.replace(staging, final_dir)


@dataclass
class RunManifest:
    """
    Record of one command invocation, written atomically as the last step of a run.
    """
    command: str
    config: dict
    inputs: dict
    outputs: dict
    seed: int | None
    tool_version: str = __version__
    started_at: float = field(default_factory=time.time)
    duration_seconds: float = 0.0

    def finish(self, directory):
        """Stamp the duration and write manifest.json into directory."""
        self.duration_seconds = round(time.time() - self.started_at, 3)
        write_json(Path(directory) / MANIFEST_NAME, asdict(self))
        log.info("Manifest written to %s", Path(directory) / MANIFEST_NAME)
