"""Collaborator (decoder) training, collaborative distillation, and the cross-pair harness.

Step 1 trains a decoder against a frozen encoder.  Step 2 freezes that
decoder and trains a narrower student encoder whose features, passed
through learned linear embeddings, must both match the teacher's taps and
drive the frozen decoder.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from .architectures import ArchSpec, Network, build_mirror_decoder, init_student_from_teacher
from .checkpoint import Checkpoint
from .data import Corpus, prefetch
from .errors import ConfigurationError, DataError, DivergenceError, PreconditionError
from .losses import (
    EmbeddingMap,
    LossWeights,
    embedding_loss,
    reconstruction_loss,
    stylization_loss,
    total_distill_loss,
)
from .transforms import adain_transfer

log = logging.getLogger(__name__)

COLLABORATIONS = ("reconstruction", "stylization")


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 1e-4
    batch_size: int = 16
    resize: int = 300
    crop: int = 256
    epochs: int = 20
    max_steps: int | None = None
    weights: LossWeights = LossWeights()
    seed: int = 0
    log_every: int = 1
    checkpoint_every: int = 10

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be positive")
        if self.crop > self.resize:
            raise ValueError(f"crop {self.crop} exceeds resize {self.resize}")

    @classmethod
    def desk(cls, **overrides) -> "HyperParams":
        """Desk-scale defaults: 48px images, 32px crops, a faster learning rate."""
        base = dict(learning_rate=1e-3, batch_size=16, resize=48, crop=32, epochs=20)
        base.update(overrides)
        return cls(**base)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, doc: dict) -> "HyperParams":
        doc = dict(doc)
        weights = doc.pop("weights", {})
        for key in ("lambda_p", "lambda_s", "beta"):
            if key in doc:
                weights[key] = doc.pop(key)
        return cls(weights=LossWeights(**weights), **doc)


@dataclass
class MetricsRecord:
    step: int
    epoch: int
    total: float
    pixel: float | None = None
    perceptual: float | None = None
    content: float | None = None
    style: float | None = None
    collab: float | None = None
    embed: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


class MetricsLog:
    """Collects records in memory and optionally appends them as JSON lines."""

    def __init__(self, path=None):
        self.records = []
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.write_text("")

    def append(self, rec: MetricsRecord):
        self.records.append(rec)
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(rec.to_json() + "\n")


def _finite(x) -> bool:
    return math.isfinite(float(x.detach() if isinstance(x, torch.Tensor) else x))


def _params_finite(params) -> bool:
    return all(bool(torch.isfinite(p).all()) for p in params)


def _run_loop(params, step_fn, batches, hp, snapshot, metrics, trained, deterministic=True):
    """Adam loop shared by both training steps.

    ``step_fn(batch) -> (loss, record_fields)``.  ``snapshot()`` returns a
    Checkpoint of the current state; the latest one taken before a
    non-finite loss travels with the DivergenceError.
    """
    opt = torch.optim.Adam(params, lr=hp.learning_rate)
    source = batches if deterministic else prefetch(batches)
    last_good = snapshot(0)
    start = time.perf_counter()
    step = 0
    for step, (epoch, batch) in enumerate(source, start=1):
        loss, fields = step_fn(batch)
        if not _finite(loss):
            raise DivergenceError(f"non-finite loss at step {step}", checkpoint=last_good, step=step)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if not _params_finite(params):
            raise DivergenceError(f"non-finite parameters after step {step}",
                                  checkpoint=last_good, step=step)
        for net in trained:
            net.train_steps += 1
        if step % hp.log_every == 0 or step == 1:
            rec = MetricsRecord(step=step, epoch=epoch, total=float(loss.detach()),
                                wall_clock=time.perf_counter() - start, **fields)
            metrics.append(rec)
            log.debug("step %d loss %.6g", step, rec.total)
        if step % hp.checkpoint_every == 0:
            last_good = snapshot(step)
    if step == 0:
        raise DataError("the corpus produced no batches")
    return step


def _fingerprint(net) -> list:
    return [p.detach().clone() for p in net.parameters()]


def _check_unchanged(net, before, what):
    for a, b in zip(before, net.parameters()):
        if not torch.equal(a, b.detach()):
            raise AssertionError(f"{what} parameters changed during training")


def _style_batches(style_corpus, hp, seed):
    if style_corpus is None:
        raise DataError("stylization collaboration needs a style corpus")
    while True:
        for _, batch in style_corpus.batches(hp.batch_size, epochs=1, seed=seed):
            yield batch
        seed += 1


def train_decoder(encoder: Network, corpus: Corpus, hp: HyperParams,
                  collaboration: str = "reconstruction", stage=None, style_corpus=None,
                  decoder=None, metrics_path=None, deterministic=True) -> Checkpoint:
    """Train a collaborator decoder for a frozen encoder.

    Returns a checkpoint with networks ``encoder`` and ``decoder``; the
    per-step metrics are in ``checkpoint.history``.
    """
    if collaboration not in COLLABORATIONS:
        raise ValueError(f"collaboration must be one of {COLLABORATIONS}")
    if len(corpus) == 0:
        raise DataError("empty corpus")
    if stage is not None and stage != encoder.spec.max_stage:
        encoder = encoder.truncate(stage)
    dtype = encoder.convs[0].weight.dtype
    encoder.freeze().eval()
    frozen = _fingerprint(encoder)
    torch.manual_seed(hp.seed)
    if decoder is None:
        decoder = build_mirror_decoder(encoder.spec, seed=hp.seed + 1).to(dtype)
    w = hp.weights
    styles = _style_batches(style_corpus, hp, hp.seed + 7) if collaboration == "stylization" else None

    def step_fn(x):
        with torch.no_grad():
            taps_o = encoder.taps(x)
        if collaboration == "reconstruction":
            I_r = decoder(taps_o[-1])
            loss, parts = reconstruction_loss(I_r, x, encoder.taps(I_r), taps_o, weights=w,
                                              components=True)
        else:
            s = next(styles).to(dtype)[: x.shape[0]]
            with torch.no_grad():
                taps_s = encoder.taps(s)
                t = adain_transfer(taps_o[-1], taps_s[-1])
            I_st = decoder(t)
            loss, parts = stylization_loss(encoder.taps(I_st), taps_o, taps_s, weights=w,
                                           components=True)
        return loss, {k: float(v.detach()) for k, v in parts.items()}

    metrics = MetricsLog(metrics_path)

    def snapshot(step):
        return Checkpoint.from_modules({"encoder": encoder, "decoder": decoder}, step=step,
                                       hparams=_hp_record(hp, collaboration))

    batches = corpus.batches(hp.batch_size, hp.epochs, seed=hp.seed, max_steps=hp.max_steps,
                             dtype=dtype)
    decoder.train()
    steps = _run_loop(list(decoder.parameters()), step_fn, batches, hp, snapshot, metrics,
                      [decoder], deterministic)
    decoder.eval()
    _check_unchanged(encoder, frozen, "frozen encoder")
    ckpt = snapshot(steps)
    ckpt.history = metrics.records
    return ckpt


def _hp_record(hp, collaboration, **extra):
    d = hp.to_dict()
    d["collaboration"] = collaboration
    d.update(extra)
    return d


def _embedding_maps(teacher, student, seed, identity=False):
    maps = []
    for k, (ct, cs) in enumerate(zip(teacher.spec.tap_channels(), student.spec.tap_channels()), start=1):
        if identity:
            if ct != cs:
                raise ConfigurationError("identity embeddings need equal teacher and student widths")
            maps.append(EmbeddingMap.identity(ct, k))
        else:
            maps.append(EmbeddingMap(cs, ct, k, seed=seed + k))
    return maps


def collaborative_distill(teacher: Network, decoder: Network, student_spec: ArchSpec,
                          corpus: Corpus, hp: HyperParams, collaboration: str = "reconstruction",
                          student=None, embeddings=None, style_corpus=None,
                          freeze_embeddings=False, collab_weight=1.0, metrics_path=None,
                          deterministic=True) -> Checkpoint:
    """Distil ``teacher`` into a student encoder against the frozen ``decoder``.

    Minimises ``beta * sum_k embed_k + collab_weight * collab`` where the
    student's deepest feature is mapped by its embedding into the decoder's
    input width.  Returns a checkpoint with networks ``teacher``,
    ``decoder`` and ``student`` and embeddings ``embed1..embedK``.
    """
    if collaboration not in COLLABORATIONS:
        raise ValueError(f"collaboration must be one of {COLLABORATIONS}")
    if student_spec.max_stage != teacher.spec.max_stage:
        raise ConfigurationError("student and teacher must end at the same stage")
    dtype = teacher.convs[0].weight.dtype
    teacher.freeze().eval()
    decoder.freeze().eval()
    frozen_t, frozen_d = _fingerprint(teacher), _fingerprint(decoder)
    if student is None:
        student = init_student_from_teacher(teacher, student_spec)
    student = student.to(dtype)
    if embeddings is None:
        embeddings = _embedding_maps(teacher, student, hp.seed, identity=freeze_embeddings)
    embeddings = [e.to(dtype) for e in embeddings]
    if len(embeddings) != student_spec.max_stage:
        raise ConfigurationError(f"need {student_spec.max_stage} embeddings, got {len(embeddings)}")
    for k, (e, cs, ct) in enumerate(zip(embeddings, student.spec.tap_channels(),
                                        teacher.spec.tap_channels()), start=1):
        if e.c_student != cs or e.c_teacher != ct:
            raise ConfigurationError(
                f"embedding {k} maps {e.c_student}->{e.c_teacher}, taps need {cs}->{ct}"
            )
    dec_in = decoder.plan[0].c_in
    if embeddings[-1].c_teacher != dec_in:
        raise ConfigurationError(
            f"final embedding emits {embeddings[-1].c_teacher} channels, decoder takes {dec_in}"
        )
    torch.manual_seed(hp.seed)
    w = hp.weights
    styles = _style_batches(style_corpus, hp, hp.seed + 7) if collaboration == "stylization" else None

    def step_fn(x):
        with torch.no_grad():
            taps_t = teacher.taps(x)
        taps_s = student.taps(x)
        embeds = [embedding_loss(ft, fs, q) for ft, fs, q in zip(taps_t, taps_s, embeddings)]
        if collaboration == "reconstruction":
            I_r = decoder(embeddings[-1](taps_s[-1]))
            collab = reconstruction_loss(I_r, x, teacher.taps(I_r), taps_t, weights=w)
        else:
            s = next(styles).to(dtype)[: x.shape[0]]
            with torch.no_grad():
                taps_ts = teacher.taps(s)
            fs_style = student.taps(s)[-1]
            t = adain_transfer(embeddings[-1](taps_s[-1]), embeddings[-1](fs_style))
            I_st = decoder(t)
            collab = stylization_loss(teacher.taps(I_st), taps_t, taps_ts, weights=w)
        if collab_weight == 0:
            collab = collab.detach()
        loss = total_distill_loss(embeds, collab, w.beta, collab_weight)
        return loss, {"collab": float(collab.detach()), "embed": [float(e.detach()) for e in embeds]}

    params = list(student.parameters())
    if not freeze_embeddings:
        params += [p for e in embeddings for p in e.parameters()]
    else:
        for e in embeddings:
            e.weight.requires_grad_(False)

    metrics = MetricsLog(metrics_path)
    hp_rec = _hp_record(hp, collaboration, collab_weight=collab_weight,
                        freeze_embeddings=freeze_embeddings)

    def snapshot(step):
        return Checkpoint.from_modules(
            {"teacher": teacher, "decoder": decoder, "student": student},
            {f"embed{e.stage}": e for e in embeddings},
            step=step, hparams=hp_rec,
        )

    batches = corpus.batches(hp.batch_size, hp.epochs, seed=hp.seed, max_steps=hp.max_steps,
                             dtype=dtype)
    steps = _run_loop(params, step_fn, batches, hp, snapshot, metrics, [student], deterministic)
    _check_unchanged(teacher, frozen_t, "teacher")
    _check_unchanged(decoder, frozen_d, "collaborator decoder")
    ckpt = snapshot(steps)
    ckpt.history = metrics.records
    return ckpt


def distill_objectives(teacher, decoder, student, embeddings, images, weights=LossWeights()):
    """Summed embedding loss and reconstruction collaboration loss on fixed images."""
    with torch.no_grad():
        taps_t = teacher.taps(images)
        taps_s = student.taps(images)
        embed = sum(float(embedding_loss(a, b, q)) for a, b, q in zip(taps_t, taps_s, embeddings))
        I_r = decoder(embeddings[-1](taps_s[-1]))
        collab = float(reconstruction_loss(I_r, images, teacher.taps(I_r), taps_t, weights=weights))
    return {"embed": embed, "collab": collab}


def reconstruction_error(encoder, decoder, images, embedding=None) -> float:
    """Mean squared pixel error of ``decoder(embedding(encoder(x)))`` against ``x``."""
    with torch.no_grad():
        f = encoder(images)
        if embedding is not None:
            f = embedding(f)
        return float((decoder(f) - images).pow(2).mean())


def distillation_ablation(teacher, decoder, student_spec, corpus, hp, eval_images=None):
    """Train embed-only, collab-only and combined students from the same start.

    Returns, per variant, both objectives before and after training measured
    on ``eval_images`` (default: one fixed crop per corpus image).
    """
    images = corpus.fixed_crops(seed=hp.seed + 99) if eval_images is None else eval_images
    images = images.to(teacher.convs[0].weight.dtype)
    variants = {
        "embed": dict(collab_weight=0.0, hp=hp),
        "collab": dict(collab_weight=1.0, hp=replace(hp, weights=replace(hp.weights, beta=0.0))),
        "both": dict(collab_weight=1.0, hp=hp),
    }
    results = {}
    for name, v in variants.items():
        student = init_student_from_teacher(teacher, student_spec)
        maps = _embedding_maps(teacher, student, hp.seed)
        before = distill_objectives(teacher, decoder, student, maps, images, hp.weights)
        ckpt = collaborative_distill(teacher, decoder, student_spec, corpus, v["hp"],
                                     student=student, embeddings=maps,
                                     collab_weight=v["collab_weight"])
        after = distill_objectives(teacher, decoder, ckpt.network("student"),
                                   ckpt.embedding_list(), images, hp.weights)
        results[name] = {"before": before, "after": after, "checkpoint": ckpt}
    return results


def cross_pair_experiment(pairs, images) -> np.ndarray:
    """Reconstruction error of every encoder with every decoder.

    ``pairs`` is a sequence of ``(encoder, decoder)``; entry ``[i, j]`` is
    the error of encoder ``i`` feeding decoder ``j``.
    """
    for i, (_, dec) in enumerate(pairs):
        if dec.train_steps == 0:
            raise PreconditionError(f"decoder of pair {i} has never been trained")
    n = len(pairs)
    out = np.zeros((n, n))
    for i, (enc, _) in enumerate(pairs):
        for j, (_, dec) in enumerate(pairs):
            out[i, j] = reconstruction_error(enc, dec, images)
    return out
