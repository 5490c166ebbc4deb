"""Stylization pipelines (WCT cascade, AdaIN, Gatys) and the resolution probe."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import torch
import torch.nn.functional as F
from scipy.optimize import minimize

from .architectures import ArchSpec, Network, estimate_peak_activation_memory
from .errors import ConfigurationError, InfeasibleError, PreconditionError
from .losses import LossWeights
from .transforms import adain_transfer, gram, wct_transfer

log = logging.getLogger(__name__)

METHODS = ("wct", "adain", "gatys")


@dataclass
class StageModel:
    """Encoder/decoder pair for one stage; ``embedding`` maps a student's
    features into the decoder's input width when present."""

    encoder: Network
    decoder: Network
    embedding: torch.nn.Module | None = None

    def encode(self, x):
        f = self.encoder(x)
        return self.embedding(f) if self.embedding is not None else f

    def decode(self, f):
        return self.decoder(f)

    @property
    def divisor(self) -> int:
        return self.encoder.spec.divisor


@dataclass
class ModelBundle:
    stages: dict = field(default_factory=dict)  # stage -> StageModel

    def __getitem__(self, k) -> StageModel:
        try:
            return self.stages[k]
        except KeyError:
            raise ConfigurationError(
                f"no model for stage {k}; bundle has {sorted(self.stages)}"
            ) from None

    def __contains__(self, k):
        return k in self.stages


@dataclass
class StylizationRequest:
    content: torch.Tensor
    style: torch.Tensor
    bundle: ModelBundle | None = None
    method: str = "wct"
    alpha: float = 1.0
    stages: tuple | None = None

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"method must be one of {METHODS}, got {self.method!r}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        for name in ("content", "style"):
            img = getattr(self, name)
            if img.dim() != 3 or img.shape[0] != 3:
                raise PreconditionError(f"{name} must be a 3 x H x W image, got {tuple(img.shape)}")


def _pad_to(x, divisor):
    """Pad the bottom/right edges to a multiple of ``divisor``; reflect where possible."""
    h, w = x.shape[-2:]
    ph, pw = (-h) % divisor, (-w) % divisor
    if ph == 0 and pw == 0:
        return x
    mode = "reflect" if ph < h and pw < w else "replicate"
    return F.pad(x[None], (0, pw, 0, ph), mode=mode)[0]


def _run_stage(model: StageModel, image, style, transform):
    h, w = image.shape[-2:]
    d = model.divisor
    fc = model.encode(_pad_to(image, d))
    fs = model.encode(_pad_to(style, d))
    out = model.decode(transform(fc, fs))
    return out[..., :h, :w]


def wct_stylize(req: StylizationRequest) -> torch.Tensor:
    """Coarse-to-fine WCT: for each stage, deepest first, encode, transfer, decode."""
    bundle = req.bundle
    stages = sorted(req.stages or bundle.stages, reverse=True)
    missing = [k for k in stages if k not in bundle]
    if missing:
        raise ConfigurationError(f"bundle lacks models for stages {missing}")
    image = req.content
    with torch.no_grad():
        for k in stages:
            image = _run_stage(bundle[k], image, req.style,
                               lambda fc, fs: wct_transfer(fc, fs, req.alpha))
    return image.clamp(0.0, 1.0)


def adain_stylize(req: StylizationRequest) -> torch.Tensor:
    """Single AdaIN pass at stage 4, or at the deepest requested/available stage."""
    bundle = req.bundle
    if req.stages:
        k = max(req.stages)
    else:
        k = 4 if 4 in bundle else max(bundle.stages)
    model = bundle[k]

    def transform(fc, fs):
        t = adain_transfer(fc, fs)
        return t if req.alpha == 1.0 else req.alpha * t + (1.0 - req.alpha) * fc

    with torch.no_grad():
        out = _run_stage(model, req.content, req.style, transform)
    return out.clamp(0.0, 1.0)


def reconstruct(bundle: ModelBundle, image, stages=None) -> torch.Tensor:
    """The cascade with identity transforms: what stylization degrades to at alpha=0."""
    out = image
    with torch.no_grad():
        for k in sorted(stages or bundle.stages, reverse=True):
            out = _run_stage(bundle[k], out, out, lambda fc, fs: fc)
    return out.clamp(0.0, 1.0)


def stylize(req: StylizationRequest) -> torch.Tensor:
    if req.method == "wct":
        return wct_stylize(req)
    if req.method == "adain":
        return adain_stylize(req)
    raise ValueError("use gatys_stylize for optimization-based transfer")


def gatys_layers(spec: ArchSpec):
    """Style layers conv_k_1 for every stage; content layer conv_{K-1}_2.

    For the five-stage VGG-19 this is conv1_1..conv5_1 and conv4_2.  Shallower
    encoders fall back to conv_{K-1}_1, then conv_K_1.
    """
    names = {l.name for l in spec.encoder_layers()}
    K = spec.max_stage
    style = [f"conv{k}_1" for k in range(1, K + 1)]
    for cand in (f"conv{K - 1}_2", f"conv{K - 1}_1", f"conv{K}_1"):
        if cand in names:
            return style, cand
    raise AssertionError("unreachable: conv{K}_1 always exists")


class GatysResult(NamedTuple):
    image: torch.Tensor
    history: list
    aborted: bool = False


# Normalized Gram errors are ~C^2 smaller than per-layer Gatys energies, so
# pixel-space optimization needs a far larger style weight than decoder training.
GATYS_WEIGHTS = LossWeights(lambda_s=1e4)


def gatys_objective(encoder: Network, content, style, weights=GATYS_WEIGHTS):
    """Closure ``f(x) -> (total, content_term, style_term)`` for the Gatys loss."""
    style_names, content_name = gatys_layers(encoder.spec)
    with torch.no_grad():
        targets = encoder.features(style, style_names)
        style_grams = [gram(targets[n]) for n in style_names]
        content_target = encoder.features(content, [content_name])[content_name]

    def f(x):
        feats = encoder.features(x, style_names + [content_name])
        c = (feats[content_name] - content_target).pow(2).mean()
        s = sum((gram(feats[n]) - g).pow(2).mean() for n, g in zip(style_names, style_grams))
        return c + weights.lambda_s * s, c, s

    return f


class _NonFinite(Exception):
    pass


def gatys_stylize(content, style, encoder: Network, iterations: int = 200,
                  weights=GATYS_WEIGHTS, memory: int = 50) -> GatysResult:
    """Optimize the pixels with box-constrained L-BFGS, starting from the content image.

    ``history`` holds the initial loss followed by the loss after every
    accepted quasi-Newton step.  A non-finite loss stops the run and the
    best image seen so far is returned with ``aborted=True``.
    """
    encoder.freeze().eval()
    dtype = encoder.convs[0].weight.dtype
    content = content.to(dtype)
    objective = gatys_objective(encoder, content, style.to(dtype), weights)
    shape = content.shape

    def loss_and_grad(v):
        x = torch.from_numpy(v.reshape(shape)).to(dtype).requires_grad_(True)
        loss = objective(x)[0]
        value = float(loss.detach())
        if not math.isfinite(value):
            raise _NonFinite
        loss.backward()
        return value, x.grad.detach().to(torch.float64).numpy().ravel()

    x0 = content.detach().to(torch.float64).clamp(0, 1).numpy().ravel()
    history = [loss_and_grad(x0)[0]]
    best = [x0]

    def record(intermediate_result):
        history.append(float(intermediate_result.fun))
        best[0] = intermediate_result.x.copy()

    aborted = False
    try:
        minimize(loss_and_grad, x0, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * x0.size,
                 callback=record,
                 options={"maxiter": iterations, "maxcor": memory, "ftol": 0.0, "gtol": 0.0})
    except _NonFinite:
        log.warning("non-finite Gatys loss; returning best image so far")
        aborted = True
    image = torch.from_numpy(best[0].reshape(shape)).to(dtype)
    return GatysResult(image.clamp(0.0, 1.0), history, aborted)


def probe_max_resolution(spec: ArchSpec, memory_budget_bytes: int, bytes_per_scalar: int = 4) -> int:
    """Largest square side, a multiple of the spec's divisor, whose estimate fits the budget."""
    step = spec.divisor

    def fits(m):
        return estimate_peak_activation_memory(spec, m * step, m * step, bytes_per_scalar) <= memory_budget_bytes

    if not fits(1):
        raise InfeasibleError(
            f"budget {memory_budget_bytes} B is below the {step}x{step} footprint of "
            f"{estimate_peak_activation_memory(spec, step, step, bytes_per_scalar)} B"
        )
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo * step
