"""Checkpoint container: a directory holding ``manifest.json`` and ``tensors.bin``.

The manifest is versioned JSON listing every tensor with dtype, shape and
byte offset into the blob; the blob is the raw little-endian data in
manifest order.  Saving is deterministic, so save -> load -> save
reproduces the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .architectures import ArchSpec, Network
from .errors import ConfigurationError
from .losses import EmbeddingMap

FORMAT = "collabdistill-checkpoint"
VERSION = 1
MANIFEST = "manifest.json"
BLOB = "tensors.bin"


@dataclass(eq=False)
class Checkpoint:
    networks: dict = field(default_factory=dict)    # name -> {"role", "spec", "train_steps"}
    embeddings: dict = field(default_factory=dict)  # name -> {"stage"}
    tensors: dict = field(default_factory=dict)     # "<module>.<param>" -> ndarray
    step: int = 0
    hparams: dict = field(default_factory=dict)
    # per-step metrics of the run that produced this checkpoint; not persisted
    history: list = field(default_factory=list, compare=False, repr=False)

    def __eq__(self, other):
        if not isinstance(other, Checkpoint):
            return NotImplemented
        meta = ("networks", "embeddings", "step", "hparams")
        if any(getattr(self, m) != getattr(other, m) for m in meta):
            return False
        if self.tensors.keys() != other.tensors.keys():
            return False
        return all(
            self.tensors[k].dtype == other.tensors[k].dtype
            and np.array_equal(self.tensors[k], other.tensors[k])
            for k in self.tensors
        )

    @classmethod
    def from_modules(cls, networks=None, embeddings=None, step=0, hparams=None):
        ckpt = cls(step=int(step), hparams=dict(hparams or {}))
        for name, net in (networks or {}).items():
            ckpt.add_network(name, net)
        for name, emb in (embeddings or {}).items():
            ckpt.add_embedding(name, emb)
        return ckpt

    def _add_state(self, name, module):
        for key, value in module.state_dict().items():
            self.tensors[f"{name}.{key}"] = value.detach().cpu().numpy().copy()

    def add_network(self, name: str, net: Network) -> None:
        self.networks[name] = {
            "role": net.role,
            "spec": net.spec.to_dict(),
            "train_steps": int(net.train_steps),
        }
        self._add_state(name, net)

    def add_embedding(self, name: str, emb: EmbeddingMap) -> None:
        self.embeddings[name] = {"stage": int(emb.stage)}
        self._add_state(name, emb)

    def _state(self, name):
        prefix = name + "."
        return {k[len(prefix):]: torch.from_numpy(v.copy())
                for k, v in self.tensors.items() if k.startswith(prefix)}

    def network(self, name: str) -> Network:
        if name not in self.networks:
            raise ConfigurationError(f"checkpoint has no network {name!r}; has {sorted(self.networks)}")
        rec = self.networks[name]
        state = self._state(name)
        net = Network(ArchSpec.from_dict(rec["spec"]), rec["role"])
        net = net.to(next(iter(state.values())).dtype)
        net.load_state_dict(state)
        net.train_steps = rec["train_steps"]
        return net

    def embedding(self, name: str) -> EmbeddingMap:
        if name not in self.embeddings:
            raise ConfigurationError(f"checkpoint has no embedding {name!r}; has {sorted(self.embeddings)}")
        state = self._state(name)
        c_teacher, c_student = state["weight"].shape
        emb = EmbeddingMap(c_student, c_teacher, self.embeddings[name]["stage"]).to(state["weight"].dtype)
        emb.load_state_dict(state)
        return emb

    def embedding_list(self) -> list:
        """All embedding maps ordered by stage."""
        names = sorted(self.embeddings, key=lambda n: self.embeddings[n]["stage"])
        return [self.embedding(n) for n in names]

    def save(self, path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        entries = []
        offset = 0
        with open(path / BLOB, "wb") as blob:
            for name in sorted(self.tensors):
                arr = np.asarray(self.tensors[name])
                arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
                data = np.ascontiguousarray(arr).tobytes()
                entries.append({
                    "name": name,
                    "dtype": arr.dtype.str,
                    "shape": list(arr.shape),
                    "offset": offset,
                    "nbytes": len(data),
                })
                blob.write(data)
                offset += len(data)
        manifest = {
            "format": FORMAT,
            "version": VERSION,
            "step": self.step,
            "hparams": self.hparams,
            "networks": self.networks,
            "embeddings": self.embeddings,
            "blob": BLOB,
            "tensors": entries,
        }
        (path / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path) -> "Checkpoint":
        path = Path(path)
        try:
            manifest = json.loads((path / MANIFEST).read_text())
        except FileNotFoundError:
            raise ConfigurationError(f"{path} is not a checkpoint directory") from None
        if manifest.get("format") != FORMAT:
            raise ConfigurationError(f"{path}: unrecognised checkpoint format")
        if manifest.get("version") != VERSION:
            raise ConfigurationError(f"{path}: unsupported checkpoint version {manifest.get('version')}")
        raw = (path / manifest["blob"]).read_bytes()
        tensors = {}
        for e in manifest["tensors"]:
            chunk = raw[e["offset"]:e["offset"] + e["nbytes"]]
            tensors[e["name"]] = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        return cls(
            networks=manifest["networks"],
            embeddings=manifest["embeddings"],
            tensors=tensors,
            step=manifest["step"],
            hparams=manifest["hparams"],
        )
