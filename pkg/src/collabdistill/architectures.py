"""VGG-style encoders, their mirrored decoders, and analytic cost counters.

An encoder built for stage ``k`` runs the reference layout up to and
including the first convolution of stage ``k`` (``ReLU_k_1``).  Every
``ReLU_i_1`` with ``i <= k`` is exposed as a tap.  The decoder mirrors the
encoder convolution for convolution, with nearest-neighbour upsampling in
place of each max-pool and no ReLU after its final (3-channel) layer.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import NamedTuple, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F
import yaml

from .errors import PreconditionError, SpecificationError

VGG19_LAYOUT = (
    (64, 64),
    (128, 128),
    (256, 256, 256, 256),
    (512, 512, 512, 512),
    (512,),
)

# desk-scale teacher: three stages, 16/32/64 channels
TOY_LAYOUT = ((16, 16), (32, 32), (64, 64))

KERNEL_SIZE = 3
IMAGE_CHANNELS = 3


def _round_width(width: float) -> int:
    return max(1, int(math.floor(width + 0.5)))


class Layer(NamedTuple):
    """One step of a network plan.

    ``kind`` is ``"conv"``, ``"pool"`` or ``"upsample"``.  ``level`` is the
    number of 2x downsamplings applied to the input *before* this layer.
    """

    kind: str
    name: str
    c_in: int
    c_out: int
    level: int
    relu: bool = True
    stage: int = 0


@dataclass(frozen=True)
class ArchSpec:
    """Declarative description of an encoder (and, by mirroring, its decoder).

    ``layout`` holds per-stage convolution widths before scaling; the
    effective widths are ``round(width * width_factor)`` with a floor of 1.
    An empty layout describes a network with no layers (useful only for
    counting).
    """

    max_stage: int = 5
    layout: tuple = VGG19_LAYOUT
    width_factor: float = 1.0

    def __post_init__(self):
        try:
            layout = tuple(tuple(int(w) for w in stage) for stage in self.layout)
        except (TypeError, ValueError) as exc:
            raise SpecificationError(f"layout must be a list of width lists: {self.layout!r}") from exc
        object.__setattr__(self, "layout", layout)
        if isinstance(self.max_stage, bool) or not isinstance(self.max_stage, (int, np.integer)):
            raise SpecificationError(f"max_stage must be an integer, got {self.max_stage!r}")
        if not 1 <= self.max_stage <= 5:
            raise SpecificationError(f"max_stage must lie in 1..5, got {self.max_stage}")
        if not (self.width_factor > 0 and math.isfinite(self.width_factor)):
            raise SpecificationError(f"width_factor must be positive, got {self.width_factor}")
        if not layout:
            return
        if len(layout) < self.max_stage:
            raise SpecificationError(
                f"layout has {len(layout)} stages but max_stage is {self.max_stage}"
            )
        for k, stage in enumerate(layout[: self.max_stage], start=1):
            if not stage:
                raise SpecificationError(f"stage {k} has no convolutions")
            bad = [w for w in stage if w <= 0]
            if bad:
                raise SpecificationError(f"stage {k} has non-positive widths {bad}")

    @property
    def widths(self) -> tuple:
        """Scaled per-stage widths for all stages in the layout."""
        return tuple(
            tuple(_round_width(w * self.width_factor) for w in stage) for stage in self.layout
        )

    @property
    def divisor(self) -> int:
        return 2 ** (self.max_stage - 1)

    def at_stage(self, k: int) -> "ArchSpec":
        return replace(self, max_stage=k)

    def scaled(self, factor: float) -> "ArchSpec":
        """Same layout with an explicit, already-rounded width list."""
        layout = tuple(tuple(_round_width(w * factor) for w in stage) for stage in self.widths)
        return ArchSpec(max_stage=self.max_stage, layout=layout)

    def encoder_layers(self) -> list[Layer]:
        if not self.layout:
            return []
        layers = []
        c_in = IMAGE_CHANNELS
        for k in range(1, self.max_stage + 1):
            if k > 1:
                layers.append(Layer("pool", f"pool{k - 1}", c_in, c_in, k - 2, relu=False, stage=k))
            widths = self.widths[k - 1]
            if k == self.max_stage:
                widths = widths[:1]
            for j, w in enumerate(widths, start=1):
                layers.append(Layer("conv", f"conv{k}_{j}", c_in, w, k - 1, stage=k))
                c_in = w
        return layers

    def decoder_layers(self) -> list[Layer]:
        layers = []
        enc = self.encoder_layers()
        for i, layer in enumerate(reversed(enc)):
            last = i == len(enc) - 1
            if layer.kind == "pool":
                layers.append(
                    Layer("upsample", f"up{layer.stage - 1}", layer.c_in, layer.c_in,
                          layer.level + 1, relu=False, stage=layer.stage)
                )
            else:
                layers.append(
                    Layer("conv", "de" + layer.name, layer.c_out, layer.c_in, layer.level,
                          relu=not last, stage=layer.stage)
                )
        return layers

    def tap_channels(self) -> tuple:
        return tuple(self.widths[k - 1][0] for k in range(1, self.max_stage + 1)) if self.layout else ()

    @property
    def out_channels(self) -> int:
        return self.widths[self.max_stage - 1][0]

    def to_dict(self) -> dict:
        if self.layout == VGG19_LAYOUT:
            return {"max_stage": self.max_stage, "width_factor": self.width_factor}
        return {"max_stage": self.max_stage, "layout": [list(s) for s in self.widths]}

    @classmethod
    def from_dict(cls, doc: dict) -> "ArchSpec":
        doc = dict(doc)
        unknown = set(doc) - {"max_stage", "width_factor", "layout", "preset"}
        if unknown:
            raise SpecificationError(f"unknown architecture keys: {sorted(unknown)}")
        if "preset" in doc:
            base = preset(doc.pop("preset"))
            if "layout" in doc:
                raise SpecificationError("give either a preset or a layout, not both")
            spec = base
            if "width_factor" in doc:
                spec = base.scaled(float(doc["width_factor"]))
            if "max_stage" in doc:
                spec = spec.at_stage(int(doc["max_stage"]))
            return spec
        max_stage = doc.get("max_stage", 5)
        if "layout" in doc:
            # an explicit layout is taken literally; width_factor is ignored
            return cls(max_stage=max_stage, layout=doc["layout"])
        return cls(max_stage=max_stage, width_factor=float(doc.get("width_factor", 1.0)))


PRESETS = {
    "vgg19": ArchSpec(5, VGG19_LAYOUT),
    "vgg19-quarter": ArchSpec(5, VGG19_LAYOUT, 0.25),
    "toy": ArchSpec(3, TOY_LAYOUT),
    "toy-quarter": ArchSpec(3, TOY_LAYOUT, 0.25),
}


def preset(name: str) -> ArchSpec:
    try:
        return PRESETS[name]
    except KeyError:
        raise SpecificationError(f"unknown preset {name!r}; known: {sorted(PRESETS)}") from None


def load_spec(path) -> ArchSpec:
    with open(path) as fh:
        return ArchSpec.from_dict(yaml.safe_load(fh) or {})


def dump_spec(spec: ArchSpec, path) -> None:
    Path(path).write_text(yaml.safe_dump(spec.to_dict(), sort_keys=True))


class Network(nn.Module):
    """A plain chain of 3x3 convolutions, pools and upsamples.

    Encoders expose ``taps``; decoders only ``forward``.  ``train_steps``
    counts optimisation steps applied to this network's parameters.
    """

    def __init__(self, spec: ArchSpec, role: str):
        super().__init__()
        if role not in ("encoder", "decoder"):
            raise ValueError(f"role must be 'encoder' or 'decoder', got {role!r}")
        if not spec.encoder_layers():
            raise SpecificationError("cannot build a network from a zero-layer spec")
        self.spec = spec
        self.role = role
        self.plan = spec.encoder_layers() if role == "encoder" else spec.decoder_layers()
        self.convs = nn.ModuleList(
            nn.Conv2d(l.c_in, l.c_out, KERNEL_SIZE, padding=KERNEL_SIZE // 2)
            for l in self.plan
            if l.kind == "conv"
        )
        self.train_steps = 0

    @property
    def tap_points(self) -> list[int]:
        """Plan indices of the ReLU_k_1 convolutions."""
        return [i for i, l in enumerate(self.plan) if l.kind == "conv" and l.name.endswith("_1")]

    def _run(self, x, wanted=()):
        if x.dim() not in (3, 4) or x.shape[-3] != self.plan[0].c_in:
            raise PreconditionError(
                f"{self.role} expects {self.plan[0].c_in} channels, got shape {tuple(x.shape)}"
            )
        squeeze = x.dim() == 3
        if squeeze:
            x = x.unsqueeze(0)
        out = {}
        convs = iter(self.convs)
        for layer in self.plan:
            if layer.kind == "conv":
                x = next(convs)(x)
                if layer.relu:
                    x = F.relu(x)
            elif layer.kind == "pool":
                x = F.max_pool2d(x, 2)
            else:
                x = F.interpolate(x, scale_factor=2, mode="nearest")
            if layer.name in wanted:
                out[layer.name] = x.squeeze(0) if squeeze else x
        return (x.squeeze(0) if squeeze else x), out

    def forward(self, x):
        return self._run(x)[0]

    def taps(self, x) -> list:
        """ReLU_k_1 activations for k = 1..max_stage, shallowest first."""
        if self.role != "encoder":
            raise PreconditionError("only encoders expose taps")
        names = [self.plan[i].name for i in self.tap_points]
        _, out = self._run(x, set(names))
        return [out[n] for n in names]

    def features(self, x, names: Sequence[str]) -> dict:
        """Post-activation outputs of the named layers (e.g. ``conv2_2``)."""
        known = {l.name for l in self.plan}
        missing = [n for n in names if n not in known]
        if missing:
            raise PreconditionError(f"no such layers: {missing}")
        return self._run(x, set(names))[1]

    def freeze(self) -> "Network":
        for p in self.parameters():
            p.requires_grad_(False)
        return self

    def truncate(self, k: int) -> "Network":
        """Encoder for stage ``k`` sharing (a copy of) this encoder's weights."""
        if self.role != "encoder":
            raise PreconditionError("only encoders can be truncated")
        if not 1 <= k <= self.spec.max_stage:
            raise ValueError(f"stage {k} outside 1..{self.spec.max_stage}")
        net = Network(self.spec.at_stage(k), "encoder").to(self.convs[0].weight.dtype)
        with torch.no_grad():
            for dst, src in zip(net.convs, self.convs):
                dst.weight.copy_(src.weight)
                dst.bias.copy_(src.bias)
        net.train_steps = self.train_steps
        return net


def _init_network(net: Network, seed) -> Network:
    gen = torch.Generator().manual_seed(0 if seed is None else int(seed))
    with torch.no_grad():
        for conv in net.convs:
            fan_in = conv.in_channels * KERNEL_SIZE * KERNEL_SIZE
            bound = math.sqrt(6.0 / fan_in)
            conv.weight.copy_(torch.rand(conv.weight.shape, generator=gen) * 2 * bound - bound)
            conv.bias.zero_()
    return net


def build_encoder(spec: ArchSpec, seed=None) -> Network:
    return _init_network(Network(spec, "encoder"), seed)


def build_mirror_decoder(spec: ArchSpec, seed=None) -> Network:
    return _init_network(Network(spec, "decoder"), seed)


def _conv_params(layers) -> int:
    return sum(l.c_in * l.c_out * KERNEL_SIZE**2 + l.c_out for l in layers if l.kind == "conv")


def count_params(spec: ArchSpec, include_decoder: bool = False) -> int:
    """Weights plus biases of every convolution (embedding maps excluded)."""
    n = _conv_params(spec.encoder_layers())
    if include_decoder:
        n += _conv_params(spec.decoder_layers())
    return n


def count_params_cascade(spec: ArchSpec, include_decoder: bool = False) -> int:
    """Parameters of the stage-1..max_stage networks used by a WCT cascade."""
    return sum(
        count_params(spec.at_stage(k), include_decoder) for k in range(1, spec.max_stage + 1)
    ) if spec.layout else 0


def _check_divisible(spec: ArchSpec, h: int, w: int) -> None:
    d = spec.divisor
    if h <= 0 or w <= 0 or h % d or w % d:
        raise PreconditionError(f"input {h}x{w} must be positive and divisible by {d}")


def conv_macs(c_in: int, c_out: int, h: int, w: int, kernel: int = KERNEL_SIZE) -> int:
    """MACs of one stride-1, same-padded convolution on an ``h x w`` input."""
    return c_in * c_out * kernel**2 * h * w


def count_macs(spec: ArchSpec, input_h: int, input_w: int, include_decoder: bool = False,
               strict: bool = True) -> int:
    """Multiply-accumulates of the convolutions in one forward pass.

    With ``strict=False`` indivisible inputs are accepted and each max-pool
    floors the spatial size, as a framework would.
    """
    if strict:
        _check_divisible(spec, input_h, input_w)
    sizes = [(input_h, input_w)]
    for _ in range(1, spec.max_stage):
        h, w = sizes[-1]
        sizes.append((h // 2, w // 2))
    plans = [spec.encoder_layers()]
    if include_decoder:
        plans.append(spec.decoder_layers())
    total = 0
    for plan in plans:
        for l in plan:
            if l.kind == "conv":
                h, w = sizes[l.level]
                total += conv_macs(l.c_in, l.c_out, h, w)
    return total


def count_flops(spec: ArchSpec, input_h: int, input_w: int, include_decoder: bool = False,
                strict: bool = True) -> int:
    """Convolution FLOPs with 1 MAC = 2 FLOPs; activations and resampling are free."""
    return 2 * count_macs(spec, input_h, input_w, include_decoder, strict)


def count_macs_cascade(spec: ArchSpec, input_h: int, input_w: int,
                       include_decoder: bool = False, strict: bool = True) -> int:
    return sum(
        count_macs(spec.at_stage(k), input_h, input_w, include_decoder, strict)
        for k in range(1, spec.max_stage + 1)
    ) if spec.layout else 0


def estimate_peak_activation_memory(spec: ArchSpec, input_h: int, input_w: int,
                                    bytes_per_scalar: int = 4) -> int:
    """Upper bound on live activation bytes during an encoder forward pass.

    Liveness model: the largest input+output pair of any single layer, plus
    every ReLU_k_1 tap below the final stage (kept for losses or transforms).
    """
    _check_divisible(spec, input_h, input_w)
    layers = spec.encoder_layers()
    if not layers:
        return 0
    px = input_h * input_w

    def elems(c, level):
        return c * px // 4**level

    widest = 0
    for l in layers:
        out_level = l.level + 1 if l.kind == "pool" else l.level
        widest = max(widest, elems(l.c_in, l.level) + elems(l.c_out, out_level))
    taps = sum(
        elems(l.c_out, l.level)
        for l in layers
        if l.kind == "conv" and l.name.endswith("_1") and l.stage < spec.max_stage
    )
    return (widest + taps) * bytes_per_scalar


def select_filters_l1(weights, keep: int) -> list[int]:
    """Indices of the ``keep`` filters with the largest L1 norm, ascending.

    ``weights`` is indexed by output filter along its first axis.  Ties go to
    the lower index.
    """
    if isinstance(weights, torch.Tensor):
        weights = weights.detach().cpu().numpy()
    w = np.asarray(weights, dtype=np.float64)
    n = w.shape[0]
    if not 1 <= keep <= n:
        raise ValueError(f"keep must lie in 1..{n}, got {keep}")
    norms = np.abs(w.reshape(n, -1)).sum(axis=1)
    order = np.argsort(-norms, kind="stable")
    return sorted(int(i) for i in order[:keep])


def init_student_from_teacher(teacher: Network, student_spec: ArchSpec) -> Network:
    """Student encoder seeded with the teacher's largest-L1 filters."""
    t_layers = [l for l in teacher.plan if l.kind == "conv"]
    s_layers = [l for l in student_spec.encoder_layers() if l.kind == "conv"]
    if [(l.name) for l in t_layers] != [(l.name) for l in s_layers]:
        raise SpecificationError("student and teacher must have the same layer structure")
    for t, s in zip(t_layers, s_layers):
        if s.c_out > t.c_out:
            raise SpecificationError(f"{s.name}: student width {s.c_out} exceeds teacher {t.c_out}")
    student = Network(student_spec, "encoder").to(teacher.convs[0].weight.dtype)
    prev = list(range(IMAGE_CHANNELS))
    with torch.no_grad():
        for t_conv, s_conv, s in zip(teacher.convs, student.convs, s_layers):
            kept = select_filters_l1(t_conv.weight, s.c_out)
            s_conv.weight.copy_(t_conv.weight[kept][:, prev])
            s_conv.bias.copy_(t_conv.bias[kept])
            prev = kept
    return student
