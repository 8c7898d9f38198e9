"""Fast-gradient-method adversarial training on embedded inputs.

One adversarial step: clean forward+backward, read the gradient on each
model's word-embedding output, perturb by r = epsilon * g / ||g||_2 (norm
taken per example over its whole embedded sequence), run a second
forward+backward that accumulates into the same parameter gradients, then
drop the perturbation before the optimizer step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import torch
from torch import Tensor, nn

from .neural.training import StepReport, Trainer


@dataclass(frozen=True)
class FgmConfig:
    epsilon: float = 1.0
    apply_every_step: bool = True

    def __post_init__(self):
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be finite and >= 0, got {self.epsilon}")


@dataclass(frozen=True)
class FgmStepReport:
    clean_loss: float
    adversarial_loss: float | None
    loss: float  # clean + adversarial
    step: StepReport


def perturbation(grad: Tensor, epsilon: float) -> Tensor:
    """r = epsilon * g / ||g||_2 with the norm over each example's flattened
    embedded sequence; zero-gradient examples get r = 0."""
    if not torch.isfinite(grad).all():
        raise RuntimeError("non-finite embedding gradient in adversarial step")
    flat = grad.reshape(grad.shape[0], -1)
    norms = flat.norm(dim=1).clamp(min=torch.finfo(grad.dtype).tiny)
    scale = torch.where(
        flat.norm(dim=1) > 0,
        epsilon / norms,
        torch.zeros_like(norms),
    )
    return grad * scale.view(-1, *([1] * (grad.dim() - 1)))


def adversarial_step(
    models: nn.Module | Sequence[nn.Module],
    loss_fn: Callable[[bool], Tensor],
    trainer: Trainer,
    config: FgmConfig,
    apply_adversarial: bool = True,
) -> FgmStepReport:
    """Run one FGM micro-batch. loss_fn(capture) must rerun the same batch;
    on the first call it is invoked with capture=True so each attacked model
    records its embedding output.

    With epsilon == 0 the adversarial pass is skipped entirely, making the
    step identical to a clean training step.
    """
    if isinstance(models, nn.Module):
        models = [models]
    clean_loss = loss_fn(True)
    trainer.backward(clean_loss)
    adv_value: float | None = None
    if apply_adversarial and config.epsilon > 0:
        try:
            for model in models:
                r = perturbation(model.captured_embedding_grad(), config.epsilon)
                model.set_embed_offset(r.detach())
            adv_loss = loss_fn(False)
            adv_value = trainer.backward(adv_loss)
        finally:
            for model in models:
                model.clear_embed_offset()
    report = trainer.optimizer_step()
    clean_value = float(clean_loss.item())
    return FgmStepReport(
        clean_loss=clean_value,
        adversarial_loss=adv_value,
        loss=clean_value + (adv_value or 0.0),
        step=report,
    )
