"""The three training loss terms and their weighted combination."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .frequency import freq_mask


class NonFiniteLossError(RuntimeError):
    """A loss term diverged; carries the name of the offending term."""

    def __init__(self, term: str, value: float):
        super().__init__(f"loss term '{term}' is non-finite ({value})")
        self.term = term
        self.value = value


@dataclass(frozen=True)
class LossWeights:
    lambda_cls: float = 0.01
    lambda_rec: float = 1.0
    lambda_det: float = 1.0

    def __post_init__(self):
        for name in ("lambda_cls", "lambda_rec", "lambda_det"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


@dataclass
class LossReport:
    """Per-batch scalar values of each term and the weighted total."""

    cls: float
    rec: float
    det: float
    total: float

    CSV_FIELDS = ("step", "task", "cls", "rec", "det", "total")

    def csv_row(self, step: int, task: int) -> list[str]:
        """One metrics-log row; floats use repr so they read back bit-exact."""
        return [str(step), str(task), repr(self.cls), repr(self.rec),
                repr(self.det), repr(self.total)]


def loss_cls(logits: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Mean cross-entropy over the batch; labels must be within head range."""
    if labels.numel() and (labels.min() < 0 or labels.max() >= logits.shape[-1]):
        raise ValueError(
            f"label out of range for a {logits.shape[-1]}-way head: "
            f"[{int(labels.min())}, {int(labels.max())}]")
    return F.cross_entropy(logits, labels)


def loss_rec(x: torch.Tensor, x_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error over all pixels of the full reconstruction."""
    if x.shape != x_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x.shape)} vs {tuple(x_hat.shape)}")
    return F.mse_loss(x_hat, x)


def loss_det(pred_spectrum: torch.Tensor, x1_hat: torch.Tensor, x2_hat: torch.Tensor,
             cutoff_fraction: float) -> torch.Tensor:
    """L1 distance between the predicted detail spectrum and the masked
    spectrum of the reconstruction residual ``x2_hat - x1_hat``.

    The residual target never contributes gradients: both reconstructions
    are detached here regardless of how they were produced. Complex bins are
    compared componentwise (real and imaginary parts) on an orthonormal
    amplitude scale (the unnormalized fft2 gain of sqrt(H*W) divided out)
    and averaged over all components, so the value is independent of image
    resolution in both entry count and transform gain, and commensurate
    with pixel-domain losses.
    """
    if x1_hat.shape != x2_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(x1_hat.shape)} vs {tuple(x2_hat.shape)}")
    target = freq_mask(x2_hat.detach() - x1_hat.detach(), cutoff_fraction)
    if pred_spectrum.shape != target.shape:
        raise ValueError(
            f"shape mismatch: {tuple(pred_spectrum.shape)} vs {tuple(target.shape)}")
    gain = math.sqrt(x1_hat.shape[-2] * x1_hat.shape[-1])
    return torch.view_as_real(pred_spectrum - target).abs().mean() / gain


def total_loss(cls: torch.Tensor, rec: torch.Tensor, det: torch.Tensor,
               weights: LossWeights) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the three terms; raises on any non-finite component."""
    for name, term in (("cls", cls), ("rec", rec), ("det", det)):
        if not bool(torch.isfinite(term)):
            raise NonFiniteLossError(name, float(term.detach()))
    total = weights.lambda_cls * cls + weights.lambda_rec * rec + weights.lambda_det * det
    report = LossReport(cls=float(cls.detach()), rec=float(rec.detach()),
                        det=float(det.detach()), total=float(total.detach()))
    return total, report
