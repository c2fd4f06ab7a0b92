"""
Storage module for a run directory: atomic files, JSONL logs and checkpoints
"""

import io
import json
import os
import pickle
import re
import tempfile
from datetime import datetime
from pathlib import Path
from typing import Any

import torch

import config
from errors import CheckpointError
from logger import log_event

CHECKPOINT_FORMAT_VERSION = 1

_EPOCH_CKPT = re.compile(r"^epoch-(\d+)\.ckpt$")


class Storage:
    """Storage manager for one run directory"""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str) -> Path:
        return self.root / name

    def exists(self, name: str) -> bool:
        return self.path(name).exists()

    def write_bytes(self, name: str, data: bytes) -> Path:
        """Write a file atomically (temp file in the same directory, then rename)"""
        target = self.path(name)
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=f".{target.name}.", suffix=".tmp")
        try:
            with os.fdopen(fd, "wb") as f:
                f.write(data)
                f.flush()
                os.fsync(f.fileno())
            os.replace(tmp, target)
        except Exception:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise
        return target

    def write_text(self, name: str, text: str) -> Path:
        return self.write_bytes(name, text.encode("utf-8"))

    def write_json(self, name: str, payload: Any) -> Path:
        return self.write_text(name, json.dumps(payload, indent=2, sort_keys=True) + "\n")

    def read_json(self, name: str) -> Any:
        with open(self.path(name), "r", encoding="utf-8") as f:
            return json.load(f)

    def append_jsonl(self, name: str, record: dict[str, Any]):
        with open(self.path(name), "a", encoding="utf-8") as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")

    def read_jsonl(self, name: str) -> list[dict[str, Any]]:
        if not self.exists(name):
            return []
        with open(self.path(name), "r", encoding="utf-8") as f:
            return [json.loads(line) for line in f if line.strip()]

    def add_log_entry(self, entry: dict[str, Any]) -> bool:
        """Append an entry to the run's event log"""
        try:
            if "timestamp" not in entry:
                entry["timestamp"] = datetime.now().isoformat()
            self.append_jsonl(config.settings.log_file, entry)
            return True
        except OSError as e:
            # log_event would recurse here
            print(f"ERROR: cannot write event log in {self.root}: {e}")
            return False

    def save_checkpoint(self, name: str, payload: dict[str, Any]) -> Path:
        """Serialize a checkpoint dict with torch.save, atomically"""
        payload = {"format_version": CHECKPOINT_FORMAT_VERSION, **payload}
        # serialized in memory so the archive does not embed the file name
        buffer = io.BytesIO()
        torch.save(payload, buffer)
        return self.write_bytes(name, buffer.getvalue())

    def load_checkpoint(self, name: str | Path) -> dict[str, Any]:
        return load_checkpoint(self.path(name) if not Path(name).is_absolute() else Path(name))

    def prune_checkpoints(self, keep: int | None = None, protect: tuple[str, ...] = ()) -> list[str]:
        """Remove the oldest epoch checkpoints beyond the retention count"""
        keep = config.settings.keep_checkpoints if keep is None else keep
        epochs = sorted(
            (int(m.group(1)), p.name)
            for p in self.root.iterdir()
            if (m := _EPOCH_CKPT.match(p.name))
        )
        removed = []
        for _, name in epochs[: max(len(epochs) - keep, 0)]:
            if name in protect:
                continue
            try:
                self.path(name).unlink()
                removed.append(name)
            except OSError as e:
                log_event("storage", "warning", f"Could not prune {name}: {e}")
        return removed


def load_checkpoint(path: str | Path) -> dict[str, Any]:
    """Load and version-check a checkpoint file"""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (OSError, RuntimeError, EOFError, pickle.UnpicklingError) as e:
        raise CheckpointError(f"Cannot read checkpoint {path}: {e}") from e
    if not isinstance(payload, dict) or "format_version" not in payload:
        raise CheckpointError(f"{path} is not a sequencer checkpoint")
    if payload["format_version"] != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format_version {payload['format_version']}, "
            f"expected {CHECKPOINT_FORMAT_VERSION}"
        )
    return payload
