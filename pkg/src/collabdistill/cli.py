"""Command-line entry point.

Every command reads a YAML config (``--config``), fills in defaults, rejects
unknown keys, writes the resolved config plus a JSON report into ``--out``
and exits with::

    0 success, 2 bad config, 3 data error, 4 divergence, 70 internal error
"""

from __future__ import annotations

import argparse
import copy
import csv
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch
import yaml

from . import __version__
from .architectures import (
    ArchSpec,
    build_encoder,
    count_macs_cascade,
    count_params,
    count_params_cascade,
)
from .checkpoint import Checkpoint
from .data import CONTENT_GENERATOR, STYLE_GENERATOR, load_corpus, load_image, save_image
from .errors import (
    CollabDistillError,
    ConfigurationError,
    DataError,
    DivergenceError,
    InfeasibleError,
    PreconditionError,
    SpecificationError,
)
from .losses import LossWeights
from .stylize import (
    GATYS_WEIGHTS,
    ModelBundle,
    StageModel,
    StylizationRequest,
    gatys_stylize,
    probe_max_resolution,
    reconstruct,
    stylize,
)
from .training import (
    HyperParams,
    collaborative_distill,
    cross_pair_experiment,
    reconstruction_error,
    train_decoder,
)
from .transforms import style_distance

log = logging.getLogger("collabdistill")

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGENCE, EXIT_INTERNAL = 0, 2, 3, 4, 70


class ConfigError(CollabDistillError):
    pass


DESK_HP = {
    "learning_rate": 1e-3,
    "batch_size": 16,
    "resize": 48,
    "crop": 32,
    "epochs": 20,
    "max_steps": None,
    "lambda_p": 1.0,
    "lambda_s": 10.0,
    "beta": 10.0,
    "log_every": 10,
    "checkpoint_every": 50,
}
CONTENT = {"generator": CONTENT_GENERATOR, "count": 64}
STYLE = {"generator": STYLE_GENERATOR, "count": 64}
HELDOUT = {"generator": CONTENT_GENERATOR, "count": 16, "seed": 1000}

COMMON = {"seed": 0, "deterministic": False, "out": None}

DEFAULTS = {
    "train-decoder": {
        "encoder": {"preset": "toy"},
        "encoder_checkpoint": None,
        "encoder_network": "encoder",
        "stage": None,
        "collaboration": "reconstruction",
        "corpus": CONTENT,
        "style_corpus": STYLE,
        "heldout": HELDOUT,
        "hyperparams": DESK_HP,
    },
    "distill": {
        "checkpoint": None,
        "teacher_network": "encoder",
        "decoder_network": "decoder",
        "student": {"width_factor": 0.25},
        "collaboration": "reconstruction",
        "collab_weight": 1.0,
        "freeze_embeddings": False,
        "corpus": CONTENT,
        "style_corpus": STYLE,
        "heldout": HELDOUT,
        "hyperparams": DESK_HP,
    },
    "stylize": {
        "content": None,
        "style": None,
        "size": None,
        "method": "wct",
        "alpha": 1.0,
        "stages": None,
        "bundle": None,
        "output": "stylized.png",
        "reconstruction": False,
    },
    "gatys": {
        "content": None,
        "style": None,
        "size": 64,
        "iterations": 200,
        "lambda_s": GATYS_WEIGHTS.lambda_s,
        "encoder": {"preset": "toy"},
        "encoder_checkpoint": None,
        "encoder_network": "encoder",
        "output": "gatys.png",
    },
    "eval": {
        "stylized_dir": None,
        "style_dir": None,
        "size": None,
        "stages": None,
        "encoder": {"preset": "toy"},
        "encoder_checkpoint": None,
        "encoder_network": "encoder",
    },
    "bench": {
        "teacher": {"preset": "vgg19"},
        "student": {"preset": "vgg19-quarter"},
        "resolution": 3000,
        "memory_budget_bytes": 12 * 10**9,
        "bytes_per_scalar": 4,
        "time_resolution": 0,
    },
    "cross-pair": {
        "encoder": {"preset": "toy"},
        "encoder_seeds": [1, 2],
        "corpus": CONTENT,
        "heldout": HELDOUT,
        "hyperparams": DESK_HP,
    },
}

REQUIRED = {
    "distill": ["checkpoint"],
    "stylize": ["content", "style", "bundle"],
    "gatys": ["content", "style"],
    "eval": ["stylized_dir", "style_dir"],
}


def resolve_config(command: str, doc: dict | None) -> dict:
    doc = dict(doc or {})
    defaults = {**COMMON, **DEFAULTS[command]}
    unknown = set(doc) - set(defaults)
    if unknown:
        raise ConfigError(f"unknown config keys for {command}: {sorted(unknown)}")
    cfg = copy.deepcopy(defaults)
    for key, value in doc.items():
        if key == "hyperparams" and value is not None:
            bad = set(value) - set(DESK_HP)
            if bad:
                raise ConfigError(f"unknown hyperparameter keys: {sorted(bad)}")
            cfg[key] = {**cfg[key], **value}
        else:
            cfg[key] = value
    for key in REQUIRED.get(command, []):
        if cfg.get(key) is None:
            raise ConfigError(f"{command} needs '{key}' in its config")
    return cfg


def _hyperparams(cfg) -> HyperParams:
    h = dict(cfg["hyperparams"])
    weights = LossWeights(h.pop("lambda_p"), h.pop("lambda_s"), h.pop("beta"))
    return HyperParams(weights=weights, seed=int(cfg["seed"]), **h)


def _arch(doc, base: ArchSpec | None = None) -> ArchSpec:
    doc = dict(doc or {})
    if base is not None and not ({"preset", "layout"} & set(doc)):
        # a bare width_factor/max_stage is relative to the base architecture
        spec = base
        if "width_factor" in doc:
            spec = spec.scaled(float(doc.pop("width_factor")))
        if "max_stage" in doc:
            spec = spec.at_stage(int(doc.pop("max_stage")))
        if doc:
            raise ConfigError(f"unknown architecture keys: {sorted(doc)}")
        return spec
    return ArchSpec.from_dict(doc)


def _encoder(cfg, seed):
    if cfg.get("encoder_checkpoint"):
        return Checkpoint.load(cfg["encoder_checkpoint"]).network(cfg["encoder_network"])
    return build_encoder(_arch(cfg["encoder"]), seed=seed)


def _corpus(doc, hp: HyperParams, seed: int, name: str):
    doc = dict(doc)
    seed = int(doc.pop("seed", seed))
    return load_corpus(doc, resize=hp.resize, crop=hp.crop, seed=seed, name=name)


def _heldout(cfg, hp):
    return _corpus(cfg["heldout"], hp, cfg["seed"] + 1000, "heldout").fixed_crops(seed=cfg["seed"])


def cmd_train_decoder(cfg, out: Path) -> dict:
    hp = _hyperparams(cfg)
    encoder = _encoder(cfg, cfg["seed"])
    corpus = _corpus(cfg["corpus"], hp, cfg["seed"], "corpus")
    styles = None
    if cfg["collaboration"] == "stylization":
        styles = _corpus(cfg["style_corpus"], hp, cfg["seed"] + 500, "style corpus")
    ckpt = train_decoder(encoder, corpus, hp, cfg["collaboration"], stage=cfg["stage"],
                         style_corpus=styles, metrics_path=out / "metrics.jsonl",
                         deterministic=cfg["deterministic"])
    ckpt.save(out / "checkpoint")
    enc, dec = ckpt.network("encoder"), ckpt.network("decoder")
    held = _heldout(cfg, hp)
    return {
        "steps": ckpt.step,
        "initial_loss": ckpt.history[0].total,
        "final_loss": ckpt.history[-1].total,
        "heldout_reconstruction_error": reconstruction_error(enc, dec, held),
        "checkpoint": "checkpoint",
    }


def cmd_distill(cfg, out: Path) -> dict:
    hp = _hyperparams(cfg)
    src = Checkpoint.load(cfg["checkpoint"])
    teacher = src.network(cfg["teacher_network"])
    decoder = src.network(cfg["decoder_network"])
    student_spec = _arch(cfg["student"], teacher.spec)
    corpus = _corpus(cfg["corpus"], hp, cfg["seed"], "corpus")
    styles = None
    if cfg["collaboration"] == "stylization":
        styles = _corpus(cfg["style_corpus"], hp, cfg["seed"] + 500, "style corpus")
    ckpt = collaborative_distill(
        teacher, decoder, student_spec, corpus, hp, cfg["collaboration"], style_corpus=styles,
        freeze_embeddings=cfg["freeze_embeddings"], collab_weight=float(cfg["collab_weight"]),
        metrics_path=out / "metrics.jsonl", deterministic=cfg["deterministic"],
    )
    ckpt.save(out / "checkpoint")
    held = _heldout(cfg, hp)
    student = ckpt.network("student")
    embeds = ckpt.embedding_list()
    e_teacher = reconstruction_error(teacher, decoder, held)
    e_student = reconstruction_error(student, decoder, held, embeds[-1])
    return {
        "steps": ckpt.step,
        "initial_loss": ckpt.history[0].total,
        "final_loss": ckpt.history[-1].total,
        "teacher_params": count_params(teacher.spec),
        "student_params": count_params(student.spec),
        "heldout_teacher_error": e_teacher,
        "heldout_student_error": e_student,
        "error_ratio": e_student / e_teacher if e_teacher > 0 else None,
        "checkpoint": "checkpoint",
    }


def load_bundle(entries) -> ModelBundle:
    """Build a bundle from ``[{stage, checkpoint, encoder, decoder, embedding}]``."""
    bundle = ModelBundle()
    cache = {}
    for e in entries:
        bad = set(e) - {"stage", "checkpoint", "encoder", "decoder", "embedding"}
        if bad:
            raise ConfigError(f"unknown bundle keys: {sorted(bad)}")
        path = e["checkpoint"]
        if path not in cache:
            cache[path] = Checkpoint.load(path)
        ck = cache[path]
        encoder = ck.network(e.get("encoder", "encoder"))
        stage = int(e.get("stage", encoder.spec.max_stage))
        if stage != encoder.spec.max_stage:
            encoder = encoder.truncate(stage)
        emb = ck.embedding(e["embedding"]) if e.get("embedding") else None
        decoder = ck.network(e.get("decoder", "decoder"))
        width = emb.c_teacher if emb is not None else encoder.spec.out_channels
        if decoder.plan[0].c_in != width:
            raise ConfigError(f"stage {stage}: decoder takes {decoder.plan[0].c_in} channels, "
                              f"encoder side emits {width}")
        bundle.stages[stage] = StageModel(encoder.eval(), decoder.eval(), emb)
    return bundle


def cmd_stylize(cfg, out: Path) -> dict:
    content = load_image(cfg["content"], cfg["size"])
    style = load_image(cfg["style"], cfg["size"])
    bundle = load_bundle(cfg["bundle"])
    stages = tuple(cfg["stages"]) if cfg["stages"] else None
    req = StylizationRequest(content, style, bundle, cfg["method"], float(cfg["alpha"]), stages)
    image = stylize(req)
    save_image(image, out / cfg["output"])
    report = {"output": cfg["output"], "height": image.shape[1], "width": image.shape[2],
              "method": cfg["method"], "alpha": req.alpha}
    if cfg["reconstruction"]:
        rec_stages = stages or (sorted(bundle.stages) if req.method == "wct" else None)
        if req.method == "adain":
            rec_stages = [max(stages)] if stages else [4 if 4 in bundle else max(bundle.stages)]
        save_image(reconstruct(bundle, content, rec_stages), out / "reconstruction.png")
        report["reconstruction"] = "reconstruction.png"
    return report


def cmd_gatys(cfg, out: Path) -> dict:
    encoder = _encoder(cfg, cfg["seed"])
    content = load_image(cfg["content"], cfg["size"])
    style = load_image(cfg["style"], cfg["size"])
    res = gatys_stylize(content, style, encoder, int(cfg["iterations"]),
                        LossWeights(lambda_s=float(cfg["lambda_s"])))
    save_image(res.image, out / cfg["output"])
    with open(out / "loss_history.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["iteration", "loss"])
        writer.writerows(enumerate(res.history))
    return {
        "output": cfg["output"],
        "initial_loss": res.history[0],
        "final_loss": res.history[-1],
        "iterations": len(res.history) - 1,
        "aborted": res.aborted,
    }


def _images(directory):
    directory = Path(directory)
    if not directory.is_dir():
        raise DataError(f"{directory} is not a directory")
    files = {p.stem: p for p in sorted(directory.iterdir())
             if p.suffix.lower() in {".png", ".jpg", ".jpeg"}}
    if not files:
        raise DataError(f"no images in {directory}")
    return files


def cmd_eval(cfg, out: Path) -> dict:
    encoder = _encoder(cfg, cfg["seed"])
    stylized = _images(cfg["stylized_dir"])
    styles = _images(cfg["style_dir"])
    names = sorted(set(stylized) & set(styles))
    if not names:
        raise DataError("no stylized/style image pairs share a file name")
    stages = cfg["stages"] or list(range(1, encoder.spec.max_stage + 1))
    rows = []
    for name in names:
        a = load_image(stylized[name], cfg["size"])
        b = load_image(styles[name], cfg["size"])
        rows.append({"name": name, **{f"conv{k}": style_distance(a, b, encoder, k) for k in stages}})
    mean = {f"conv{k}": float(np.mean([r[f"conv{k}"] for r in rows])) for k in stages}
    return {"pairs": len(rows), "style_distance": mean, "per_image": rows}


def _bench_model(spec: ArchSpec, cfg) -> dict:
    res = int(cfg["resolution"])
    macs = count_macs_cascade(spec, res, res, strict=False)
    params = count_params_cascade(spec)
    return {
        "spec": spec.to_dict(),
        "params": params,
        "params_final_stage_encoder": count_params(spec),
        "params_with_decoders": count_params_cascade(spec, include_decoder=True),
        "storage_mb": params * int(cfg["bytes_per_scalar"]) / 2**20,
        "gmacs": macs / 1e9,
        "gflops": 2 * macs / 1e9,
        "max_resolution": probe_max_resolution(spec, int(cfg["memory_budget_bytes"]),
                                               int(cfg["bytes_per_scalar"])),
    }


def _time_forward(spec, size, seed):
    enc = build_encoder(spec, seed=seed).eval()
    x = torch.rand(3, size, size, generator=torch.Generator().manual_seed(seed))
    with torch.no_grad():
        start = time.perf_counter()
        for k in range(1, spec.max_stage + 1):
            enc.truncate(k)(x)
        return time.perf_counter() - start


def cmd_bench(cfg, out: Path) -> dict:
    teacher = _arch(cfg["teacher"])
    student = _arch(cfg["student"])
    t, s = _bench_model(teacher, cfg), _bench_model(student, cfg)
    report = {
        "resolution": int(cfg["resolution"]),
        "memory_budget_bytes": int(cfg["memory_budget_bytes"]),
        "teacher": t,
        "student": s,
        "params_ratio": t["params"] / s["params"],
        "storage_ratio": t["storage_mb"] / s["storage_mb"],
        "flops_ratio": t["gmacs"] / s["gmacs"],
        "max_resolution_ratio": s["max_resolution"] / t["max_resolution"],
    }
    if cfg["time_resolution"]:
        size = int(cfg["time_resolution"])
        report["timing"] = {
            "resolution": size,
            "teacher_s": _time_forward(teacher, size, cfg["seed"]),
            "student_s": _time_forward(student, size, cfg["seed"]),
        }
    return report


def cmd_cross_pair(cfg, out: Path) -> dict:
    hp = _hyperparams(cfg)
    corpus = _corpus(cfg["corpus"], hp, cfg["seed"], "corpus")
    spec = _arch(cfg["encoder"])
    pairs = []
    for i, s in enumerate(cfg["encoder_seeds"]):
        enc = build_encoder(spec, seed=int(s))
        ckpt = train_decoder(enc, corpus, hp, metrics_path=out / f"metrics_pair{i}.jsonl",
                             deterministic=cfg["deterministic"])
        ckpt.save(out / f"pair{i}")
        pairs.append((ckpt.network("encoder"), ckpt.network("decoder")))
    matrix = cross_pair_experiment(pairs, _heldout(cfg, hp))
    diag = np.diag(matrix)
    off = matrix[~np.eye(len(pairs), dtype=bool)]
    return {
        "matrix": matrix.tolist(),
        "diagonal": diag.tolist(),
        "off_diagonal": off.tolist(),
        "exclusive": bool(diag.max() < off.min()),
        "off_diag_ratio": float(off.min() / diag.max()),
    }


COMMANDS = {
    "train-decoder": cmd_train_decoder,
    "distill": cmd_distill,
    "stylize": cmd_stylize,
    "gatys": cmd_gatys,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "cross-pair": cmd_cross_pair,
}


def write_report(report: dict, command: str, path: Path) -> None:
    doc = {"schema": f"collabdistill.{command}", "schema_version": SCHEMA_VERSION, **report}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def set_deterministic(flag: bool) -> None:
    if flag:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def run(command: str, config_path=None, seed=None, out=None, deterministic=False) -> Path:
    """Run one command; returns the output directory.  Raises on failure."""
    doc = {}
    if config_path:
        try:
            doc = yaml.safe_load(Path(config_path).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {config_path}: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError(f"{config_path} must hold a mapping")
    cfg = resolve_config(command, doc)
    if seed is not None:
        cfg["seed"] = seed
    if out is not None:
        cfg["out"] = str(out)
    if deterministic:
        cfg["deterministic"] = True
    if cfg["out"] is None:
        cfg["out"] = f"runs/{command}"
    out_dir = Path(cfg["out"])
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.yaml").write_text(yaml.safe_dump(cfg, sort_keys=True))
    set_deterministic(cfg["deterministic"])
    torch.manual_seed(cfg["seed"])
    report = COMMANDS[command](cfg, out_dir)
    write_report(report, command, out_dir / "report.json")
    return out_dir


def exit_code(exc: BaseException) -> int:
    if isinstance(exc, (ConfigError, ConfigurationError, SpecificationError, InfeasibleError,
                        PreconditionError, ValueError, TypeError, KeyError)):
        return EXIT_CONFIG
    if isinstance(exc, (DataError, FileNotFoundError, OSError)):
        return EXIT_DATA
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGENCE
    return EXIT_INTERNAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="collabdistill", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, help="YAML config file")
        p.add_argument("--seed", type=int)
        p.add_argument("--out", type=Path, help="output directory")
        p.add_argument("--deterministic", action="store_true",
                       help="single-threaded, deterministic kernels, no prefetch thread")
        p.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        out = run(args.command, args.config, args.seed, args.out, args.deterministic)
    except DivergenceError as exc:
        if exc.checkpoint is not None and args.out is not None:
            exc.checkpoint.save(Path(args.out) / "last_good")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except Exception as exc:  # mapped to the exit-code taxonomy
        code = exit_code(exc)
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            log.exception("internal error")
        return code
    print(out / "report.json")
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
