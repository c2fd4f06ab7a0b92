import threading

import pytest
import torch

import config
import logger
import parallel
from errors import CheckpointError
from state_manager import STATE_FILE, StateManager
from storage import CHECKPOINT_FORMAT_VERSION, load_checkpoint


def test_atomic_writes_leave_no_temp_files(storage):
    storage.write_text("a.txt", "one")
    storage.write_text("a.txt", "two")
    storage.write_json("b.json", {"z": 1, "a": [1, 2]})
    assert storage.path("a.txt").read_text() == "two"
    assert storage.read_json("b.json") == {"a": [1, 2], "z": 1}
    assert sorted(p.name for p in storage.root.iterdir()) == ["a.txt", "b.json"]


def test_jsonl_append_and_read(storage):
    assert storage.read_jsonl("m.jsonl") == []
    storage.append_jsonl("m.jsonl", {"step": 0})
    storage.append_jsonl("m.jsonl", {"step": 1})
    assert storage.read_jsonl("m.jsonl") == [{"step": 0}, {"step": 1}]


def test_checkpoint_is_versioned(storage):
    path = storage.save_checkpoint("x.ckpt", {"w": torch.arange(3)})
    payload = load_checkpoint(path)
    assert payload["format_version"] == CHECKPOINT_FORMAT_VERSION
    assert torch.equal(storage.load_checkpoint("x.ckpt")["w"], torch.arange(3))

    torch.save({"format_version": 99}, storage.path("future.ckpt"))
    with pytest.raises(CheckpointError):
        storage.load_checkpoint("future.ckpt")
    torch.save([1, 2], storage.path("list.ckpt"))
    with pytest.raises(CheckpointError):
        storage.load_checkpoint("list.ckpt")
    with pytest.raises(CheckpointError):
        storage.load_checkpoint("missing.ckpt")


def test_checkpoint_bytes_do_not_depend_on_file_name(storage):
    payload = {"w": torch.arange(6.0).reshape(2, 3), "meta": {"step": 3, "name": "x"}}
    first = storage.save_checkpoint("a.ckpt", payload)
    second = storage.save_checkpoint("b.ckpt", storage.load_checkpoint("a.ckpt"))
    assert first.read_bytes() == second.read_bytes()


def test_prune_keeps_newest_and_protected(storage):
    for epoch in range(5):
        storage.save_checkpoint(f"epoch-{epoch}.ckpt", {"epoch": epoch})
    storage.save_checkpoint("best.ckpt", {})
    removed = storage.prune_checkpoints(keep=2, protect=("epoch-0.ckpt",))
    assert removed == ["epoch-1.ckpt", "epoch-2.ckpt"]
    left = sorted(p.name for p in storage.root.iterdir())
    assert left == ["best.ckpt", "epoch-0.ckpt", "epoch-3.ckpt", "epoch-4.ckpt"]


def test_state_manager_tracks_best_epoch(storage):
    state = StateManager(storage)
    assert state.state["status"] == "new"
    state.mark_running()
    assert state.record_epoch(0, 10, "epoch-0.ckpt", 0.2)
    assert not state.record_epoch(1, 20, "epoch-1.ckpt", 0.1)
    assert state.record_epoch(2, 30, "epoch-2.ckpt", 0.4)
    reloaded = StateManager(storage).state
    assert reloaded["best_checkpoint"] == "epoch-2.ckpt"
    assert reloaded["best_metric"] == 0.4
    assert reloaded["last_good_checkpoint"] == "epoch-2.ckpt"
    assert StateManager(storage).resume_epoch() == 3


def test_state_manager_first_epoch_is_best_without_metric(storage):
    state = StateManager(storage)
    assert state.record_epoch(0, 5, "epoch-0.ckpt", None)
    assert not state.record_epoch(1, 10, "epoch-1.ckpt", None)
    assert state.record_epoch(2, 15, "epoch-2.ckpt", 0.0)


def test_state_manager_divergence_and_corrupt_file(storage):
    state = StateManager(storage)
    state.mark_diverged(7)
    assert StateManager(storage).state["status"] == "diverged"
    assert StateManager(storage).state["diverged_at_step"] == 7
    storage.write_text(STATE_FILE, "{not json")
    assert StateManager(storage).state["status"] == "new"


def test_ordered_map_keeps_input_order():
    items = list(range(50))
    assert parallel.ordered_map(lambda x: x * x, items, max_workers=4) == [x * x for x in items]
    assert parallel.ordered_map(lambda x: x, [], max_workers=4) == []


def test_ordered_map_stops_on_request():
    flag = threading.Event()
    flag.set()
    with pytest.raises(parallel.StopRequested):
        parallel.ordered_map(lambda x: x, [1, 2, 3], max_workers=2, stop_flag=flag)


def test_log_buffer_is_flushed_to_storage(storage):
    logger.detach_storage()
    logger.flush_log_buffer()
    logger.log_event("test", "info", "before storage", {"k": 1})
    logger.init_storage(storage)
    logger.flush_log_buffer()
    logger.log_event("test", "warning", "after storage")
    entries = storage.read_jsonl(config.settings.log_file)
    messages = [e["message"] for e in entries if e["component"] == "test"]
    assert messages[-2:] == ["before storage", "after storage"]
    assert entries[-2]["details"] == {"k": 1}
    recent = logger.get_recent_logs(component="test", level="warning")
    assert [e["message"] for e in recent] == ["after storage"]


def test_console_respects_log_level(capsys, monkeypatch):
    monkeypatch.setattr(config.settings, "log_level", "warning")
    logger.log_event("test", "info", "quiet")
    logger.log_event("test", "error", "loud")
    err = capsys.readouterr().err
    assert "quiet" not in err
    assert "[test] [ERROR] loud" in err
