"""
Training loop: AdamW with linear warmup and cosine decay, per-step loss
logging, per-epoch checkpoints and best-checkpoint selection
"""

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
import torch

import config
import evalx
import infer
import msio
from config import EvalConfig, InferConfig, ModelConfig, PreprocessConfig, TrainConfig
from errors import CheckpointError, ConfigError, DivergenceError, DomainError
from logger import log_event
from msio import AnnotatedSpectrum, DatasetSplit
from neural import ImpNovoModel, LossBreakdown, count_parameters
from state_manager import StateManager
from storage import Storage, load_checkpoint

METRICS_FILE = "metrics.jsonl"
BEST_CHECKPOINT = "best.ckpt"
LAST_CHECKPOINT = "last.ckpt"


def lr_schedule(step: int, cfg: TrainConfig, total_steps: int) -> float:
    """Linear warmup to peak_lr, then half-cosine decay to 0 at total_steps"""
    if total_steps <= cfg.warmup_steps:
        raise ConfigError(
            f"total_steps ({total_steps}) must exceed warmup_steps ({cfg.warmup_steps})"
        )
    if step < 0:
        raise DomainError("step must be non-negative")
    if step <= cfg.warmup_steps:
        return cfg.peak_lr * step / cfg.warmup_steps
    progress = min((step - cfg.warmup_steps) / (total_steps - cfg.warmup_steps), 1.0)
    return max(cfg.peak_lr * 0.5 * (1.0 + math.cos(math.pi * progress)), 0.0)


class WarmupCosineScheduler(torch.optim.lr_scheduler.LambdaLR):
    """LambdaLR wrapper around lr_schedule (factor relative to peak_lr)"""

    def __init__(self, optimizer: torch.optim.Optimizer, cfg: TrainConfig, total_steps: int, last_epoch: int = -1):
        lr_schedule(0, cfg, total_steps)
        self.total_steps = total_steps
        super().__init__(
            optimizer,
            lambda step: lr_schedule(step, cfg, total_steps) / cfg.peak_lr,
            last_epoch=last_epoch,
        )


@dataclass
class TrainResult:
    best_checkpoint: Optional[Path]
    last_checkpoint: Optional[Path]
    metrics_path: Path
    best_metric: Optional[float]
    global_step: int
    history: list[dict[str, Any]] = field(default_factory=list)
    n_parameters: int = 0


def seed_everything(seed: int, deterministic: bool):
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(deterministic, warn_only=True)


def load_model(path: str | Path, device: str = "cpu") -> tuple[ImpNovoModel, dict[str, Any]]:
    """Rebuild a model from a checkpoint file"""
    payload = load_checkpoint(path)
    try:
        model_cfg = ModelConfig(**payload["model_config"])
        model = ImpNovoModel(model_cfg)
        model.load_state_dict(payload["state_dict"])
    except (KeyError, RuntimeError, ValueError) as e:
        raise CheckpointError(f"Checkpoint {path} does not match the model: {e}") from e
    return model.to(device), payload


class Trainer:
    """Owns the model parameters and optimizer for one run directory"""

    def __init__(
        self,
        model_cfg: ModelConfig,
        train_cfg: TrainConfig,
        storage: Storage,
        total_steps: int,
        eval_cfg: EvalConfig = EvalConfig(),
        infer_cfg: InferConfig = InferConfig(),
        device: Optional[str] = None,
    ):
        if train_cfg.dropout is not None:
            model_cfg = model_cfg.model_copy(update={"dropout": train_cfg.dropout})
        self.model_cfg = model_cfg
        self.cfg = train_cfg
        self.eval_cfg = eval_cfg
        self.infer_cfg = infer_cfg
        self.storage = storage
        self.total_steps = total_steps
        self.device = device or config.settings.device

        seed_everything(train_cfg.seed, train_cfg.deterministic)
        self.model = ImpNovoModel(model_cfg).to(self.device)
        self.optimizer = torch.optim.AdamW(
            self.model.parameters(),
            lr=train_cfg.peak_lr,
            betas=train_cfg.betas,
            eps=train_cfg.adam_eps,
            weight_decay=train_cfg.weight_decay,
        )
        self.scheduler = WarmupCosineScheduler(self.optimizer, train_cfg, total_steps)
        self.global_step = 0
        self.last_good: Optional[str] = None
        self.n_parameters = count_parameters(self.model)
        log_event(
            "train",
            "info",
            f"Model has {self.n_parameters} trainable parameters",
            {"use_imputation": model_cfg.use_imputation, "use_theory_ce": model_cfg.use_theory_ce,
             "extra_ffn": model_cfg.extra_ffn, "encoder_layers": model_cfg.encoder_layers},
        )

    def train_step(self, psms: Sequence[AnnotatedSpectrum], epoch: int = 0) -> Optional[dict[str, Any]]:
        """One optimizer step; returns the logged record, or None if the batch had nothing trainable"""
        self.model.train()
        try:
            batch = self.model.collate(psms)
        except DomainError as e:
            log_event("train", "warning", f"Skipping batch at step {self.global_step}: {e}")
            return None

        lr = self.optimizer.param_groups[0]["lr"]
        losses: LossBreakdown = self.model.forward_train(batch, self.cfg.label_smoothing)
        record = {"step": self.global_step, "epoch": epoch, "lr": lr, **losses.as_floats()}
        if not all(math.isfinite(record[k]) for k in ("ce_main", "ce_theory", "imputation", "total")):
            raise DivergenceError(
                f"Non-finite loss at step {self.global_step}: {record}",
                step=self.global_step,
                last_good=self.last_good,
            )

        self.optimizer.zero_grad(set_to_none=True)
        losses.total.backward()
        self.optimizer.step()
        self.scheduler.step()
        self.global_step += 1

        self.storage.append_jsonl(METRICS_FILE, record)
        log_event(
            "train",
            "debug",
            f"step {record['step']} total={record['total']:.4f}",
            {"n_skipped": losses.n_skipped},
        )
        return record

    def validate(self, psms: Sequence[AnnotatedSpectrum]) -> Optional[float]:
        """Validation aa precision with greedy decoding through the evaluation code path"""
        if not psms:
            return None
        preds = [
            infer.greedy_decode(p.spectrum, self.model, self.infer_cfg.max_len,
                                self.infer_cfg.precursor_tol_ppm, p.source_id)
            for p in psms
        ]
        records = evalx.join_records(preds, psms)
        precision, _ = evalx.aa_metrics(records, self.eval_cfg)
        return precision

    def checkpoint_payload(self, epoch: int, metric: Optional[float]) -> dict[str, Any]:
        return {
            "model_config": self.model_cfg.model_dump(mode="json"),
            "train_config": self.cfg.model_dump(mode="json"),
            "state_dict": self.model.state_dict(),
            "optimizer": self.optimizer.state_dict(),
            "scheduler": self.scheduler.state_dict(),
            "global_step": self.global_step,
            "epoch": epoch,
            "total_steps": self.total_steps,
            "n_parameters": self.n_parameters,
            "val_aa_precision": metric,
            "rng_state": torch.get_rng_state(),
        }

    def restore(self, payload: dict[str, Any]):
        self.model.load_state_dict(payload["state_dict"])
        self.optimizer.load_state_dict(payload["optimizer"])
        self.scheduler.load_state_dict(payload["scheduler"])
        self.global_step = payload["global_step"]
        torch.set_rng_state(payload["rng_state"])


def _batches(psms: Sequence[AnnotatedSpectrum], batch_size: int, seed: int, epoch: int):
    order = np.random.default_rng([seed, epoch]).permutation(len(psms))
    for start in range(0, len(order), batch_size):
        yield [psms[i] for i in order[start : start + batch_size]]


def train(
    cfg: TrainConfig,
    dataset: DatasetSplit,
    model_cfg: ModelConfig,
    storage: Storage,
    preprocess_cfg: PreprocessConfig = PreprocessConfig(),
    eval_cfg: EvalConfig = EvalConfig(),
    infer_cfg: InferConfig = InferConfig(),
    resume: bool = False,
) -> TrainResult:
    """
    Optimize the combined loss over the training split

    Args:
        cfg: Optimisation settings
        dataset: Raw annotated splits; spectra are preprocessed here
        model_cfg: Model shape and ablation switches
        storage: Run directory for metrics, checkpoints and state
        resume: Continue from the last completed epoch of a previous run

    Returns:
        TrainResult: checkpoint paths, best validation aa precision and the step history

    Raises:
        DivergenceError: a non-finite loss; last good checkpoint is kept
    """
    train_psms = msio.prepare(dataset.train, preprocess_cfg)
    val_psms = msio.prepare(dataset.validation, preprocess_cfg)
    if cfg.val_max_psms is not None:
        val_psms = val_psms[: cfg.val_max_psms]
    if not train_psms or not val_psms:
        raise DomainError("Training and validation splits must be non-empty")

    steps_per_epoch = math.ceil(len(train_psms) / cfg.batch_size)
    total_steps = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total_steps = min(total_steps, cfg.max_steps)
    trainer = Trainer(model_cfg, cfg, storage, total_steps, eval_cfg, infer_cfg)

    state = StateManager(storage)
    start_epoch = 0
    if resume and state.state["last_good_checkpoint"]:
        payload = storage.load_checkpoint(state.state["last_good_checkpoint"])
        trainer.restore(payload)
        trainer.last_good = state.state["last_good_checkpoint"]
        start_epoch = state.resume_epoch()
        log_event("train", "info", f"Resuming at epoch {start_epoch}, step {trainer.global_step}")
    else:
        state.reset()
    state.mark_running()

    log_event(
        "train",
        "info",
        f"Training on {len(train_psms)} PSMs, validating on {len(val_psms)}",
        {"epochs": cfg.epochs, "total_steps": total_steps, "batch_size": cfg.batch_size},
    )
    history: list[dict[str, Any]] = []
    for epoch in range(start_epoch, cfg.epochs):
        if trainer.global_step >= total_steps:
            break
        try:
            for psms in _batches(train_psms, cfg.batch_size, cfg.seed, epoch):
                record = trainer.train_step(psms, epoch)
                if record is not None:
                    history.append(record)
                if trainer.global_step >= total_steps:
                    break
        except DivergenceError as e:
            state.mark_diverged(e.step)
            log_event("train", "error", f"{e}; last good checkpoint: {e.last_good}")
            raise

        metric = trainer.validate(val_psms)
        name = f"epoch-{epoch}.ckpt"
        payload = trainer.checkpoint_payload(epoch, metric)
        storage.save_checkpoint(name, payload)
        storage.save_checkpoint(LAST_CHECKPOINT, payload)
        trainer.last_good = name
        if state.record_epoch(epoch, trainer.global_step, name, metric):
            storage.save_checkpoint(BEST_CHECKPOINT, payload)
        storage.prune_checkpoints(protect=(state.state["best_checkpoint"],))
        log_event(
            "train",
            "info",
            f"Epoch {epoch} done at step {trainer.global_step}",
            {"val_aa_precision": metric, "best": state.state["best_metric"]},
        )

    state.mark_completed()
    return TrainResult(
        best_checkpoint=storage.path(BEST_CHECKPOINT) if storage.exists(BEST_CHECKPOINT) else None,
        last_checkpoint=storage.path(LAST_CHECKPOINT) if storage.exists(LAST_CHECKPOINT) else None,
        metrics_path=storage.path(METRICS_FILE),
        best_metric=state.state["best_metric"],
        global_step=trainer.global_step,
        history=history,
        n_parameters=trainer.n_parameters,
    )
