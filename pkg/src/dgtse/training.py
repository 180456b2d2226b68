"""Optimizer schedule and the generic training loop shared by every model kind.

A *task* object supplies data and the objective::

    task.train_batch(step) -> batch      # pure function of the step index
    task.val_batches() -> list of batches
    task.loss(model, batch) -> (loss tensor, dict of floats)
    task.parameters(model) -> trainable parameters
    task.on_end(model)                    # optional

Because batches depend only on the step index and the RNG state is stored in
checkpoints, a resumed run continues exactly where the original left off.
"""

from __future__ import annotations

import copy
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt

logger = logging.getLogger(__name__)

# Hours of audio the full-scale schedule was designed for.
REFERENCE_HOURS = 460.0


@dataclass
class TrainConfig:
    lr_init: float = 1e-3
    warmup_steps: int = 10000
    plateau_patience_epochs: int = 3
    lr_halving_factor: float = 0.5
    max_epochs: int = 100
    steps_per_epoch: int = 100
    total_steps: int | None = None
    batch_size: int = 8
    seed: int = 0
    grad_clip: float = 5.0
    log_every: int = 50

    def __post_init__(self):
        if self.lr_init <= 0:
            raise ValueError("lr_init must be positive")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be >= 0")

    @property
    def n_steps(self) -> int:
        if self.total_steps is not None:
            return int(self.total_steps)
        return self.max_epochs * self.steps_per_epoch

    def scaled_to(self, hours: float) -> "TrainConfig":
        """Shrink warmup and epoch count in proportion to the amount of training audio.

        ``warmup_steps`` and ``max_epochs`` are multiplied by
        ``hours / REFERENCE_HOURS`` (floors of 10 steps and 1 epoch).
        """
        ratio = min(1.0, hours / REFERENCE_HOURS)
        out = copy.copy(self)
        out.warmup_steps = max(10, int(round(self.warmup_steps * ratio)))
        out.max_epochs = max(1, int(round(self.max_epochs * ratio)))
        return out

    def to_dict(self):
        return asdict(self)


def count_halvings(epoch_history, patience: int) -> int:
    """Number of LR halvings triggered by ``patience`` epochs without improvement."""
    best = math.inf
    stale = 0
    halvings = 0
    for val in epoch_history:
        if val < best:
            best = val
            stale = 0
        else:
            stale += 1
            if stale >= patience:
                halvings += 1
                stale = 0
    return halvings


def lr_at(step: int, epoch_history, cfg: TrainConfig) -> float:
    """Linear warmup from 0 to ``lr_init`` over ``warmup_steps``, then plateau halving."""
    if step < 0:
        raise ValueError("step must be >= 0")
    warm = 1.0 if cfg.warmup_steps == 0 else min(1.0, step / cfg.warmup_steps)
    h = count_halvings(epoch_history, cfg.plateau_patience_epochs)
    return cfg.lr_init * warm * cfg.lr_halving_factor ** h


class TrainingDiverged(RuntimeError):
    pass


@dataclass
class FitResult:
    losses: list = field(default_factory=list)
    val_history: list = field(default_factory=list)
    best_val: float = math.inf
    best_epoch: int = -1
    steps: int = 0
    seconds: float = 0.0


def _batch_stats(batch) -> dict:
    def describe(x):
        if torch.is_tensor(x) and x.is_floating_point():
            return {"shape": list(x.shape), "mean": float(x.mean()), "std": float(x.std()) if x.numel() > 1 else 0.0,
                    "absmax": float(x.abs().max()), "finite": bool(torch.isfinite(x).all())}
        return type(x).__name__

    if isinstance(batch, dict):
        return {k: describe(v) for k, v in batch.items()}
    if isinstance(batch, (list, tuple)):
        return {str(i): describe(v) for i, v in enumerate(batch)}
    return {"batch": describe(batch)}


def _evaluate(model, task) -> float:
    was_training = model.training
    model.eval()
    vals = []
    with torch.no_grad():
        for b in task.val_batches():
            vals.append(float(task.loss(model, b)[0]))
    model.train(was_training)
    return float(np.mean(vals)) if vals else math.nan


def fit(model: torch.nn.Module, task, cfg: TrainConfig, out_path=None, resume_from=None,
        meta: dict | None = None, stop_after: int | None = None) -> FitResult:
    """Train ``model`` in place with Adam and the warmup/plateau schedule.

    The lowest-validation-loss weights are restored at the end. If ``out_path``
    is given, the best model is saved there and the resumable training state
    next to it (``<out_path>.last``). ``stop_after`` ends the run early after
    that many optimizer steps (used to test resumption).
    """
    torch.manual_seed(cfg.seed)
    params = list(task.parameters(model))
    opt = torch.optim.Adam(params, lr=cfg.lr_init)
    result = FitResult()
    start = 0
    best_state = None
    if resume_from is not None:
        state = torch.load(resume_from, map_location="cpu", weights_only=False)
        model.load_state_dict(state["state_dict"])
        opt.load_state_dict(state["optimizer"])
        torch.set_rng_state(state["torch_rng"])
        start = state["step"]
        result.losses = list(state["losses"])
        result.val_history = list(state["val_history"])
        result.best_val = state["best_val"]
        result.best_epoch = state["best_epoch"]
        best_state = state.get("best_state")

    n_steps = cfg.n_steps
    end = n_steps if stop_after is None else min(n_steps, start + stop_after)
    t0 = time.time()
    model.train()
    for step in range(start, end):
        lr = lr_at(step + 1, result.val_history, cfg)
        for g in opt.param_groups:
            g["lr"] = lr
        batch = task.train_batch(step)
        loss, stats = task.loss(model, batch)
        if not torch.isfinite(loss):
            raise TrainingDiverged(
                f"non-finite loss at step {step}: {stats}; last batch: {_batch_stats(batch)}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip:
            torch.nn.utils.clip_grad_norm_(params, cfg.grad_clip)
        opt.step()
        result.losses.append(loss.item())
        if cfg.log_every and (step + 1) % cfg.log_every == 0:
            recent = np.mean(result.losses[-cfg.log_every:])
            logger.info("%s step %d loss %.4f lr %.2e %s", task.kind, step + 1, recent, lr,
                        {k: round(v, 4) for k, v in stats.items()})
        epoch_done = (step + 1) % cfg.steps_per_epoch == 0 or step + 1 == n_steps
        if epoch_done:
            val = _evaluate(model, task)
            result.val_history.append(val)
            logger.info("%s epoch %d val %.4f", task.kind, len(result.val_history), val)
            if val < result.best_val or best_state is None:
                result.best_val = val
                result.best_epoch = len(result.val_history) - 1
                best_state = copy.deepcopy(model.state_dict())
        if out_path is not None and (epoch_done or step + 1 == end):
            torch.save({
                "state_dict": model.state_dict(),
                "optimizer": opt.state_dict(),
                "torch_rng": torch.get_rng_state(),
                "step": step + 1,
                "losses": result.losses,
                "val_history": result.val_history,
                "best_val": result.best_val,
                "best_epoch": result.best_epoch,
                "best_state": best_state,
            }, str(out_path) + ".last")
    result.steps = end
    result.seconds = time.time() - t0
    if end == n_steps and best_state is not None:
        model.load_state_dict(best_state)
    if hasattr(task, "on_end") and end == n_steps:
        task.on_end(model)
    model.eval()
    if out_path is not None and end == n_steps:
        info = dict(meta or {})
        info.update(train_config=cfg.to_dict(), best_val=result.best_val,
                    val_history=result.val_history, steps=result.steps)
        ckpt.save(out_path, model, info)
    return result


def smoothed(values, window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        window = max(1, len(v))
    return np.convolve(v, np.ones(window) / window, mode="valid")
