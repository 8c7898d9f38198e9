"""Optimizer step wrapper: AdamW with linear warmup, gradient accumulation,
norm clipping, and finite-loss guards."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import torch
from torch import Tensor, nn


@dataclass(frozen=True)
class TrainStep:
    """Per-component optimization hyperparameters."""

    learning_rate: float
    weight_decay: float = 0.0
    warmup_steps: int = 0
    accumulation_steps: int = 1
    max_grad_norm: float = 0.0  # 0 disables clipping
    dropout: float = 0.1
    seed: int = 0

    def __post_init__(self):
        for name in ("learning_rate", "weight_decay", "warmup_steps", "max_grad_norm", "dropout"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.accumulation_steps < 1:
            raise ValueError("accumulation_steps must be >= 1")


@dataclass(frozen=True)
class StepReport:
    loss: float
    stepped: bool
    grad_norm: float | None  # pre-clip norm
    applied_grad_norm: float | None  # norm actually used in the update
    learning_rate: float
    optimizer_steps: int


class Trainer:
    """Owns the optimizer for one or more modules trained jointly.

    Micro-batch protocol: call backward() for each loss contribution, then
    optimizer_step() once per micro-batch; parameters update every
    accumulation_steps micro-batches. Losses are scaled by 1/accumulation so
    the effective step matches the single-batch one.
    """

    def __init__(self, modules: nn.Module | Sequence[nn.Module], step: TrainStep):
        if isinstance(modules, nn.Module):
            modules = [modules]
        self.modules = list(modules)
        self.step_config = step
        self._params = [p for m in self.modules for p in m.parameters()]
        self.optimizer = torch.optim.AdamW(
            self._params, lr=step.learning_rate, weight_decay=step.weight_decay
        )
        self._micro_batches = 0
        self._optimizer_steps = 0
        self._pending_loss = 0.0

    @property
    def will_step_next(self) -> bool:
        """True when the next optimizer_step() call updates parameters."""
        return (self._micro_batches + 1) % self.step_config.accumulation_steps == 0

    def _warmup_lr(self) -> float:
        step = self.step_config
        if step.warmup_steps <= 0:
            return step.learning_rate
        frac = min(1.0, (self._optimizer_steps + 1) / step.warmup_steps)
        return step.learning_rate * frac

    def backward(self, loss: Tensor) -> float:
        if not torch.isfinite(loss):
            raise RuntimeError(f"non-finite loss encountered: {loss.item()!r}")
        (loss / self.step_config.accumulation_steps).backward()
        value = float(loss.item())
        self._pending_loss += value
        return value

    def optimizer_step(self) -> StepReport:
        self._micro_batches += 1
        if self._micro_batches % self.step_config.accumulation_steps != 0:
            return StepReport(
                loss=self._pending_loss,
                stepped=False,
                grad_norm=None,
                applied_grad_norm=None,
                learning_rate=self._warmup_lr(),
                optimizer_steps=self._optimizer_steps,
            )
        max_norm = self.step_config.max_grad_norm
        grad_norm = float(
            torch.nn.utils.clip_grad_norm_(
                self._params, max_norm if max_norm > 0 else float("inf")
            )
        )
        if not torch.isfinite(torch.tensor(grad_norm)):
            raise RuntimeError(f"non-finite gradient norm: {grad_norm!r}")
        applied = float(
            torch.sqrt(
                sum(p.grad.pow(2).sum() for p in self._params if p.grad is not None)
            )
        )
        lr = self._warmup_lr()
        for group in self.optimizer.param_groups:
            group["lr"] = lr
        self.optimizer.step()
        self.optimizer.zero_grad(set_to_none=True)
        for p in self._params:
            if not torch.isfinite(p).all():
                raise RuntimeError("non-finite parameter after optimizer update")
        self._optimizer_steps += 1
        loss = self._pending_loss
        self._pending_loss = 0.0
        return StepReport(
            loss=loss,
            stepped=True,
            grad_norm=grad_norm,
            applied_grad_norm=applied,
            learning_rate=lr,
            optimizer_steps=self._optimizer_steps,
        )

    def backward_and_step(self, loss: Tensor) -> StepReport:
        self.backward(loss)
        return self.optimizer_step()


def set_train_mode(modules: Iterable[nn.Module], train: bool) -> None:
    for m in modules:
        m.train(train)
