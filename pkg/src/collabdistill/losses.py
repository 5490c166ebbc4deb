"""Training objectives.

Every squared-error term is divided by its element count so the default
weights carry over between resolutions and batch sizes.  All losses return
scalar tensors; gradients come from autograd.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn

from .transforms import gram


@dataclass(frozen=True)
class LossWeights:
    lambda_p: float = 1.0
    lambda_s: float = 10.0
    beta: float = 10.0

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "beta"):
            value = getattr(self, name)
            if not value >= 0:
                raise ValueError(f"{name} must be non-negative, got {value}")


class EmbeddingMap(nn.Module):
    """Bias-free linear map ``Q`` (C_teacher x C_student) applied per pixel."""

    def __init__(self, c_student: int, c_teacher: int, stage: int, seed=None):
        super().__init__()
        if c_student > c_teacher:
            raise ValueError(f"student width {c_student} exceeds teacher width {c_teacher}")
        self.stage = stage
        gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
        bound = math.sqrt(3.0 / c_student)
        self.weight = nn.Parameter(torch.rand(c_teacher, c_student, generator=gen) * 2 * bound - bound)

    @classmethod
    def identity(cls, channels: int, stage: int) -> "EmbeddingMap":
        m = cls(channels, channels, stage)
        with torch.no_grad():
            m.weight.copy_(torch.eye(channels))
        return m

    @property
    def c_student(self) -> int:
        return self.weight.shape[1]

    @property
    def c_teacher(self) -> int:
        return self.weight.shape[0]

    def forward(self, F_student):
        return apply_embedding(self.weight, F_student)


def apply_embedding(Q: torch.Tensor, F_student: torch.Tensor) -> torch.Tensor:
    if F_student.shape[-3] != Q.shape[1]:
        raise ValueError(f"Q expects {Q.shape[1]} input channels, feature has {F_student.shape[-3]}")
    return torch.einsum("oc,...chw->...ohw", Q, F_student)


def _mse(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    return (a - b).pow(2).mean()


def reconstruction_loss(I_r, I_o, taps_r, taps_o, k=None, weights=LossWeights(),
                        components=False):
    """Pixel loss plus ``lambda_p`` times the perceptual loss over stages 1..k.

    ``taps_*`` are ReLU_i_1 activations of the fixed teacher encoder.
    """
    k = len(taps_o) if k is None else k
    if k > len(taps_o) or k > len(taps_r):
        raise ValueError(f"need taps for stages 1..{k}, got {len(taps_r)} and {len(taps_o)}")
    pixel = _mse(I_r, I_o)
    perceptual = sum((_mse(a, b) for a, b in zip(taps_r[:k], taps_o[:k])), torch.zeros_like(pixel))
    total = pixel + weights.lambda_p * perceptual
    if components:
        return total, {"pixel": pixel, "perceptual": perceptual}
    return total


def stylization_loss(taps_st, taps_c, taps_s, weights=LossWeights(), components=False):
    """Content distance at the deepest tap plus ``lambda_s`` times Gram distances at every tap."""
    if not (len(taps_st) == len(taps_c) == len(taps_s)):
        raise ValueError("stylized, content and style taps must cover the same stages")
    content = _mse(taps_st[-1], taps_c[-1])
    style = torch.zeros_like(content)
    for a, b in zip(taps_st, taps_s):
        Ga, Gb = gram(a), gram(b)
        if Ga.shape[-2:] != Gb.shape[-2:]:
            raise ValueError(f"channel mismatch between stylized {tuple(a.shape)} and style {tuple(b.shape)}")
        style = style + (Ga - Gb.expand_as(Ga)).pow(2).mean()
    total = content + weights.lambda_s * style
    if components:
        return total, {"content": content, "style": style}
    return total


def embedding_loss(F_teacher, F_student, Q):
    """Mean squared residual of ``F_teacher - Q F_student``."""
    Qm = Q.weight if isinstance(Q, EmbeddingMap) else Q
    if Qm.dim() != 2 or Qm.shape[0] != F_teacher.shape[-3] or Qm.shape[1] != F_student.shape[-3]:
        raise ValueError(
            f"Q of shape {tuple(Qm.shape)} does not map {F_student.shape[-3]} "
            f"student channels to {F_teacher.shape[-3]} teacher channels"
        )
    if F_teacher.shape[-2:] != F_student.shape[-2:]:
        raise ValueError("teacher and student features differ in spatial size")
    return _mse(apply_embedding(Qm, F_student), F_teacher)


def total_distill_loss(embed_terms, collab_term, beta, collab_weight=1.0):
    """``beta * sum(embed_terms) + collab_weight * collab_term``."""
    return beta * sum(embed_terms) + collab_weight * collab_term
