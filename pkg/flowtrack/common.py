import json
import os
import sys
import tempfile
from datetime import datetime, timezone

# Warn only once per process for a given key (see warn_once).
_WARNED: set[str] = set()

# Bump only on breaking changes to artifact shapes; configs and reports carry
# it so downstream scripts can tell whether they can still read us.
SCHEMA_VERSION = 1


class FlowTrackError(Exception):
    """Base class for every error raised by the library."""


class ParseError(FlowTrackError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        prefix = f"line {line}: " if line is not None else ""
        super().__init__(prefix + message)


class GraphError(FlowTrackError):
    pass


class SolverError(FlowTrackError):
    pass


class ConvergenceError(SolverError):
    def __init__(self, message: str, grad_norm: float, iterations: int):
        self.grad_norm = grad_norm
        self.iterations = iterations
        super().__init__(f"{message} (grad norm {grad_norm:.3e} after {iterations} iterations)")


class ModelError(FlowTrackError):
    pass


class TrainingError(FlowTrackError):
    pass


class ConfigError(FlowTrackError):
    def __init__(self, field: str, message: str):
        self.field = field
        super().__init__(f"{field}: {message}")


def now_iso() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def log(tag: str, message: str) -> None:
    print(f"[{tag}] {message}", flush=True)


def warn(tag: str, message: str) -> None:
    print(f"[{tag}] WARNING {message}", file=sys.stderr, flush=True)


def warn_once(key: str, tag: str, message: str) -> None:
    if key in _WARNED:
        return
    _WARNED.add(key)
    warn(tag, message)


def env_int(name: str, default: int) -> int:
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        warn("env", f"{name}={raw!r} is not an integer, using {default}")
        return default


def env_str(name: str, default: str) -> str:
    raw = os.getenv(name)
    return raw.strip() if raw and raw.strip() else default


def schema(kind: str, payload: dict, *, timestamp: bool = True) -> dict:
    """Stamp an artifact; reports that must be byte-reproducible skip the timestamp."""
    stamp = {"schema_version": SCHEMA_VERSION}
    if timestamp:
        stamp["generated_at"] = now_iso()
    return {**stamp, "kind": kind, **payload}


def _guard(path: str, root: str | None) -> str:
    abs_path = os.path.abspath(path)
    if root is not None:
        abs_root = os.path.abspath(root)
        if os.path.commonpath([abs_path, abs_root]) != abs_root:
            raise ConfigError("paths.output_dir", f"refusing to write {path} outside {root}")
    return abs_path


def write_text(path: str, text: str, *, root: str | None = None) -> str:
    """Atomically write ``text`` to ``path`` (temp file + rename).

    When ``root`` is given the target must resolve inside it; nothing else on
    disk is touched.
    """
    abs_path = _guard(path, root)
    directory = os.path.dirname(abs_path)
    os.makedirs(directory, exist_ok=True)

    temp_fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".flowtrack_tmp_")
    try:
        with os.fdopen(temp_fd, "w", encoding="utf-8", newline="\n") as f:
            f.write(text)
        os.replace(temp_path, abs_path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
    return abs_path


def write_bytes(path: str, data: bytes, *, root: str | None = None) -> str:
    abs_path = _guard(path, root)
    directory = os.path.dirname(abs_path)
    os.makedirs(directory, exist_ok=True)

    temp_fd, temp_path = tempfile.mkstemp(dir=directory, prefix=".flowtrack_tmp_")
    try:
        with os.fdopen(temp_fd, "wb") as f:
            f.write(data)
        os.replace(temp_path, abs_path)
    except Exception:
        if os.path.exists(temp_path):
            os.unlink(temp_path)
        raise
    return abs_path


def write_json(path: str, payload: dict, *, root: str | None = None, indent: int | None = 2) -> str:
    return write_text(path, json.dumps(payload, ensure_ascii=False, indent=indent) + "\n", root=root)


def read_bytes(path: str) -> bytes:
    with open(path, "rb") as f:
        return f.read()


def append_line(path: str, line: str, *, root: str | None = None) -> None:
    """Append one UTF-8 line to a running log file (train.log, timing.log)."""
    abs_path = _guard(path, root)
    os.makedirs(os.path.dirname(abs_path), exist_ok=True)
    with open(abs_path, "a", encoding="utf-8", newline="\n") as f:
        f.write(line.rstrip("\n") + "\n")
