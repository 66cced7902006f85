"""Versioned checkpoint container.

A checkpoint is a ``torch.save``d dict holding every tensor keyed by module
path, a per-tensor ``frozen`` flag, the run configuration, the epoch, the
torch RNG state and (optionally) optimizer state. The configuration and ``extra`` are
stored as JSON text so that a resumed run pickles to the same bytes as an
uninterrupted one. Estimator-only checkpoints
use the same ``estimator.`` paths as the full network so they load into it
directly.
"""
import hashlib
import json
from collections import OrderedDict
from dataclasses import dataclass, field

import torch

from .core import RunConfig
from .errors import ConfigError

FORMAT = "pcnet-checkpoint"
VERSION = 1
KINDS = ("estimator", "pcnet")


@dataclass
class Checkpoint:
    kind: str
    tensors: "OrderedDict[str, torch.Tensor]"
    frozen: dict
    config: RunConfig
    epoch: int
    rng_state: torch.Tensor | None = None
    optimizer: dict | None = None
    extra: dict = field(default_factory=dict)

    def frozen_names(self):
        return {k for k, v in self.frozen.items() if v}


def module_tensors(module, prefix=""):
    """Detached copies of ``module.state_dict()`` with an optional path prefix."""
    return OrderedDict((prefix + k, v.detach().clone()) for k, v in module.state_dict().items())


def save_checkpoint(path, ckpt: Checkpoint):
    if ckpt.kind not in KINDS:
        raise ConfigError(f"unknown checkpoint kind {ckpt.kind!r}")
    payload = {
        "format": FORMAT,
        "version": VERSION,
        "kind": ckpt.kind,
        "tensors": OrderedDict((k, v.detach().cpu().contiguous()) for k, v in ckpt.tensors.items()),
        "frozen": {k: bool(ckpt.frozen.get(k, False)) for k in ckpt.tensors},
        "config": json.dumps(ckpt.config.to_dict(), sort_keys=True),
        "epoch": int(ckpt.epoch),
        "rng_state": ckpt.rng_state,
        "optimizer": ckpt.optimizer,
        "extra": json.dumps(ckpt.extra, sort_keys=True),
    }
    torch.save(payload, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise ConfigError(f"checkpoint not found: {path}") from None
    except Exception as exc:  # corrupt or foreign file
        raise ConfigError(f"cannot read checkpoint {path}: {exc}") from None
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise ConfigError(f"{path} is not a checkpoint")
    if payload.get("version") != VERSION:
        raise ConfigError(f"{path}: unsupported checkpoint version {payload.get('version')}")
    return Checkpoint(
        kind=payload["kind"],
        tensors=OrderedDict(payload["tensors"]),
        frozen=dict(payload["frozen"]),
        config=RunConfig.from_dict(json.loads(payload["config"])),
        epoch=payload["epoch"],
        rng_state=payload.get("rng_state"),
        optimizer=payload.get("optimizer"),
        extra=json.loads(payload.get("extra") or "{}"),
    )


def tensor_digest(tensors, names=None):
    """SHA-256 over the raw bytes of the named tensors (all if ``names`` is None)."""
    h = hashlib.sha256()
    for k in sorted(tensors if names is None else names):
        t = tensors[k].detach().cpu().contiguous()
        h.update(k.encode())
        h.update(t.numpy().tobytes())
    return h.hexdigest()


def file_digest(path):
    with open(path, "rb") as f:
        return hashlib.sha256(f.read()).hexdigest()
