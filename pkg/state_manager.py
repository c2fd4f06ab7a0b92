"""
State manager for tracking training progress so interrupted runs can resume
"""

from datetime import datetime
from typing import Any, Optional

from logger import log_event
from storage import Storage

STATE_FILE = "train_state.json"


class StateManager:
    """Persists train_state.json inside a run directory"""

    def __init__(self, storage: Storage):
        self.storage = storage
        self.state = self._load_state()

    @staticmethod
    def _default_state() -> dict[str, Any]:
        return {
            "status": "new",
            "last_epoch": -1,
            "global_step": 0,
            "best_metric": None,
            "best_checkpoint": None,
            "last_good_checkpoint": None,
            "last_update": None,
        }

    def _load_state(self) -> dict[str, Any]:
        if not self.storage.exists(STATE_FILE):
            return self._default_state()
        try:
            state = self._default_state()
            state.update(self.storage.read_json(STATE_FILE))
            return state
        except (OSError, ValueError) as e:
            log_event("state", "error", f"Error loading training state, starting fresh: {e}")
            return self._default_state()

    def save_state(self):
        self.state["last_update"] = datetime.now().isoformat()
        self.storage.write_json(STATE_FILE, self.state)

    def mark_running(self):
        self.state["status"] = "running"
        self.save_state()

    def record_epoch(
        self,
        epoch: int,
        global_step: int,
        checkpoint: str,
        metric: Optional[float],
    ) -> bool:
        """
        Record a completed epoch

        Returns:
            bool: True if the epoch's checkpoint is the new best
        """
        self.state["last_epoch"] = epoch
        self.state["global_step"] = global_step
        self.state["last_good_checkpoint"] = checkpoint
        best = self.state["best_metric"]
        improved = self.state["best_checkpoint"] is None or (
            metric is not None and (best is None or metric > best)
        )
        if improved:
            self.state["best_metric"] = metric
            self.state["best_checkpoint"] = checkpoint
        self.save_state()
        return improved

    def mark_diverged(self, step: int):
        self.state["status"] = "diverged"
        self.state["diverged_at_step"] = step
        self.save_state()
        log_event("state", "error", f"Training diverged at step {step}")

    def mark_completed(self):
        self.state["status"] = "completed"
        self.save_state()

    def resume_epoch(self) -> int:
        """First epoch still to run"""
        return self.state["last_epoch"] + 1

    def reset(self):
        self.state = self._default_state()
        self.save_state()
