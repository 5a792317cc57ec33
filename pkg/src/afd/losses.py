"""Loss terms for disentangled adversarial fine-tuning.

- confusion loss: CE of the classifier on f2 against the strongest wrong label
- repulsion loss: negative angular distance between f1 and a frozen f2
- alignment loss: CE on f1 plus γ times the angular distance from f1 to the
  frozen pretrained extractor's natural features
"""
from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from afd import tensor as T
from afd.errors import ConfigError, DimensionError
from afd.tensor import Tensor, angular_distance, softmax_cross_entropy, stop_gradient

__all__ = [
    "LossBreakdown",
    "angular_distance",
    "select_wrong_label",
    "loss_confusion",
    "loss_repulsion",
    "loss_aft_align",
]


@dataclass
class LossBreakdown:
    l1: float = 0.0
    l2: float = 0.0
    l3_ce: float = 0.0
    l3_align: float = 0.0
    total: float = 0.0

    @classmethod
    def combine(cls, l1: float, l2: float, l3_ce: float, l3_align: float,
                alpha: float, beta: float, gamma: float) -> "LossBreakdown":
        total = alpha * l1 + beta * l2 + (l3_ce + gamma * l3_align)
        return cls(l1, l2, l3_ce, l3_align, total)

    def to_dict(self) -> dict:
        return asdict(self)


def select_wrong_label(logits_f1, y) -> np.ndarray:
    """Per-row argmax over classes other than ``y`` (lowest index on ties)."""
    z = np.array(logits_f1.data if isinstance(logits_f1, Tensor) else logits_f1, dtype=np.float64)
    if z.ndim != 2 or z.shape[1] < 2:
        raise ConfigError("wrong-label selection needs at least two classes")
    y = np.asarray(y)
    z[np.arange(len(z)), y] = -np.inf
    return np.argmax(z, axis=1)


def loss_confusion(f2: Tensor, weight: Tensor, bias: Tensor, y_wrong) -> Tensor:
    if f2.shape[1] != weight.shape[1]:
        raise DimensionError(f"f2 width {f2.shape[1]} does not match classifier input {weight.shape[1]}")
    return softmax_cross_entropy(T.linear(f2, weight, bias), y_wrong)


def loss_repulsion(f1: Tensor, f2: Tensor) -> Tensor:
    return T.neg(angular_distance(f1, stop_gradient(f2)))


def loss_aft_align(f1: Tensor, weight: Tensor, bias: Tensor, y, f_nat_pre, gamma: float
                   ) -> tuple[Tensor, Tensor]:
    """Return the CE term and the (unweighted) alignment term separately.

    Combine as ``ce + gamma * align``. With ``gamma == 0`` the alignment value
    is still reported but kept off the graph.
    """
    f_nat = stop_gradient(f_nat_pre if isinstance(f_nat_pre, Tensor) else Tensor(f_nat_pre))
    if f1.shape != f_nat.shape:
        raise DimensionError(f"f1 shape {f1.shape} does not match pretrained feature shape {f_nat.shape}")
    ce = softmax_cross_entropy(T.linear(f1, weight, bias), y)
    if gamma == 0:
        return ce, angular_distance(stop_gradient(f1), f_nat)
    return ce, angular_distance(f1, f_nat)
