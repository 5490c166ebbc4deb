"""Feature statistics and the WCT / AdaIN feature transforms.

Feature maps are ``torch`` tensors shaped ``(C, H, W)``; ``gram`` and
``adain_transfer`` also accept leading batch dimensions.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .errors import DegenerateFeatureError, PreconditionError

# relative eigenvalue floor: eigenpairs with d <= EIG_FLOOR * d_max are dropped
EIG_FLOOR = 1e-8
# absolute floor below which a spectrum counts as all-zero
ABS_EIG_FLOOR = 1e-12
ADAIN_EPS = 1e-5


def _flat(F: torch.Tensor) -> torch.Tensor:
    if F.dim() != 3:
        raise PreconditionError(f"expected a C x H x W feature, got shape {tuple(F.shape)}")
    return F.reshape(F.shape[0], -1)


def gram(F: torch.Tensor, normalize: bool = True) -> torch.Tensor:
    """``F @ F.T`` over the flattened spatial axis, divided by C*H*W if ``normalize``."""
    C, H, W = F.shape[-3:]
    flat = F.reshape(*F.shape[:-2], H * W)
    G = flat @ flat.transpose(-1, -2)
    if normalize:
        G = G / (C * H * W)
    return G


@dataclass
class StyleStats:
    mean: torch.Tensor
    covariance: torch.Tensor
    eigvals: torch.Tensor
    eigvecs: torch.Tensor

    def retained(self, eig_floor: float = EIG_FLOOR) -> torch.Tensor:
        """Boolean mask of eigenpairs above the (relative) floor."""
        top = self.eigvals.max()
        threshold = max(float(top) * eig_floor, ABS_EIG_FLOOR)
        return self.eigvals > threshold


def compute_stats(F: torch.Tensor) -> StyleStats:
    flat = _flat(F)
    n = flat.shape[1]
    if n < 2:
        raise DegenerateFeatureError("covariance needs at least two spatial positions")
    mean = flat.mean(dim=1)
    centered = flat - mean[:, None]
    cov = centered @ centered.T / (n - 1)
    cov = 0.5 * (cov + cov.T)
    eigvals, eigvecs = torch.linalg.eigh(cov)
    return StyleStats(mean, cov, eigvals, eigvecs)


def whiten(F: torch.Tensor, stats: StyleStats, eig_floor: float = EIG_FLOOR) -> torch.Tensor:
    keep = stats.retained(eig_floor)
    if not bool(keep.any()):
        raise DegenerateFeatureError("every eigenvalue is below the floor; nothing to whiten")
    E = stats.eigvecs[:, keep]
    d = stats.eigvals[keep]
    flat = _flat(F) - stats.mean[:, None]
    out = E @ ((E.T @ flat) * d.rsqrt()[:, None])
    return out.reshape(F.shape)


def color(F_whitened: torch.Tensor, style_stats: StyleStats,
          eig_floor: float = EIG_FLOOR) -> torch.Tensor:
    flat = _flat(F_whitened)
    keep = style_stats.retained(eig_floor)
    E = style_stats.eigvecs[:, keep]
    d = style_stats.eigvals[keep]
    out = E @ ((E.T @ flat) * d.sqrt()[:, None]) + style_stats.mean[:, None]
    return out.reshape(F_whitened.shape)


def wct_transfer(F_content: torch.Tensor, F_style: torch.Tensor, alpha: float = 1.0,
                 eig_floor: float = EIG_FLOOR) -> torch.Tensor:
    """Whiten the content feature, recolour it with the style covariance, blend by ``alpha``."""
    if F_content.shape[0] != F_style.shape[0]:
        raise ValueError(
            f"channel mismatch: content has {F_content.shape[0]}, style has {F_style.shape[0]}"
        )
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must lie in [0, 1], got {alpha}")
    if alpha == 0.0:
        return F_content.clone()
    whitened = whiten(F_content, compute_stats(F_content), eig_floor)
    colored = color(whitened, compute_stats(F_style), eig_floor)
    if alpha == 1.0:
        return colored
    return alpha * colored + (1.0 - alpha) * F_content


def channel_mean_std(F: torch.Tensor):
    """Per-channel spatial mean and population standard deviation."""
    flat = F.reshape(*F.shape[:-2], -1)
    mean = flat.mean(dim=-1)
    std = (flat - mean[..., None]).pow(2).mean(dim=-1).sqrt()
    return mean, std


def adain_transfer(F_content: torch.Tensor, F_style: torch.Tensor,
                   eps: float = ADAIN_EPS) -> torch.Tensor:
    if F_content.shape[-3] != F_style.shape[-3]:
        raise ValueError(
            f"channel mismatch: content has {F_content.shape[-3]}, style has {F_style.shape[-3]}"
        )
    mu_c, sd_c = channel_mean_std(F_content)
    mu_s, sd_s = channel_mean_std(F_style)
    denom = (sd_c + eps)[..., None, None]
    centered = F_content - mu_c[..., None, None]
    # a constant channel (sd_c + eps == 0) maps to the style mean
    normalized = torch.where(denom > 0, centered / torch.where(denom > 0, denom, 1.0), 0.0)
    return normalized * sd_s[..., None, None] + mu_s[..., None, None]


def style_distance(stylized: torch.Tensor, style: torch.Tensor, eval_encoder, stage: int) -> float:
    """Frobenius distance between normalized Gram matrices of ReLU_k_1 features."""
    if not 1 <= stage <= eval_encoder.spec.max_stage:
        raise ValueError(f"stage {stage} outside 1..{eval_encoder.spec.max_stage}")
    with torch.no_grad():
        a = eval_encoder.taps(stylized)[stage - 1]
        b = eval_encoder.taps(style)[stage - 1]
        return float(torch.linalg.matrix_norm(gram(a) - gram(b)))
