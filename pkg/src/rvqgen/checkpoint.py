"""Checkpoint container: model + optimizer + EMA + RNG state + configs in
one self-describing binary file, bit-exact across save/load cycles.

Layout: magic "RGCK", version u32, u64 header length, JSON header, inline
codebook blob, then the raw float64 little-endian arrays in header order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from . import rvq
from .backbone import Backbone, BackboneConfig
from .data import atomic_write
from .trainer import TrainConfig, Trainer

CHECKPOINT_MAGIC = b"RGCK"
CHECKPOINT_VERSION = 1

_GROUPS = ("params", "ema", "opt_m", "opt_v")


@dataclass
class Checkpoint:
    backbone_config: BackboneConfig
    train_config: TrainConfig
    step: int
    rng_state: dict
    codebook: rvq.Codebook
    params: dict
    ema: dict
    opt_m: dict
    opt_v: dict

    def to_bytes(self) -> bytes:
        groups = {"params": self.params, "ema": self.ema,
                  "opt_m": self.opt_m, "opt_v": self.opt_v}
        manifest = []
        raw = bytearray()
        for group in _GROUPS:
            for name in sorted(groups[group]):
                arr = np.ascontiguousarray(groups[group][name], dtype="<f8")
                manifest.append({"group": group, "name": name,
                                 "shape": list(arr.shape)})
                raw += arr.tobytes()
        book_blob = rvq.codebook_to_bytes(self.codebook)
        header = json.dumps({
            "backbone_config": self.backbone_config.to_dict(),
            "train_config": self.train_config.to_dict(),
            "step": self.step,
            "rng_state": self.rng_state,
            "codebook_bytes": len(book_blob),
            "arrays": manifest,
        }, sort_keys=True).encode()
        return (struct.pack("<4sIQ", CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
                            len(header))
                + header + book_blob + bytes(raw))

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        magic, version, hlen = struct.unpack_from("<4sIQ", blob, 0)
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(
                f"bad checkpoint magic: expected {CHECKPOINT_MAGIC!r}, found {magic!r}")
        if version != CHECKPOINT_VERSION:
            raise ValueError(
                f"unsupported checkpoint version: expected {CHECKPOINT_VERSION}, "
                f"found {version}")
        off = struct.calcsize("<4sIQ")
        head = json.loads(blob[off:off + hlen])
        off += hlen
        book = rvq.codebook_from_bytes(blob[off:off + head["codebook_bytes"]])
        off += head["codebook_bytes"]
        groups = {g: {} for g in _GROUPS}
        for item in head["arrays"]:
            size = int(np.prod(item["shape"])) if item["shape"] else 1
            arr = np.frombuffer(blob, dtype="<f8", count=size, offset=off)
            groups[item["group"]][item["name"]] = arr.reshape(item["shape"]).copy()
            off += size * 8
        return cls(
            backbone_config=BackboneConfig.from_dict(head["backbone_config"]),
            train_config=TrainConfig.from_dict(head["train_config"]),
            step=head["step"],
            rng_state=head["rng_state"],
            codebook=book,
            params=groups["params"],
            ema=groups["ema"],
            opt_m=groups["opt_m"],
            opt_v=groups["opt_v"],
        )


def from_trainer(trainer: Trainer) -> Checkpoint:
    return Checkpoint(
        backbone_config=trainer.model.config,
        train_config=trainer.config,
        step=trainer.step_count,
        rng_state=trainer.rng.bit_generator.state,
        codebook=trainer.book,
        params=trainer.model.parameter_arrays(),
        ema={k: v.copy() for k, v in trainer.ema.items()},
        opt_m={k: v.copy() for k, v in trainer.opt_m.items()},
        opt_v={k: v.copy() for k, v in trainer.opt_v.items()},
    )


def restore_trainer(ckpt: Checkpoint, grids, labels) -> Trainer:
    """Rebuild a Trainer mid-run; continuation is bit-identical to a
    straight run because the RNG state travels with the checkpoint."""
    model = Backbone(ckpt.backbone_config, seed=0)
    model.load_arrays(ckpt.params)
    rng = np.random.default_rng(0)
    rng.bit_generator.state = ckpt.rng_state
    tr = Trainer(model, ckpt.codebook, grids, labels, ckpt.train_config, rng=rng)
    tr.step_count = ckpt.step
    tr.ema = {k: v.copy() for k, v in ckpt.ema.items()}
    tr.opt_m = {k: v.copy() for k, v in ckpt.opt_m.items()}
    tr.opt_v = {k: v.copy() for k, v in ckpt.opt_v.items()}
    return tr


def model_from_checkpoint(ckpt: Checkpoint, weights="ema") -> Backbone:
    if weights not in ("ema", "raw"):
        raise ValueError(f"weights must be 'ema' or 'raw', got {weights!r}")
    model = Backbone(ckpt.backbone_config, seed=0)
    model.load_arrays(ckpt.ema if weights == "ema" else ckpt.params)
    return model


def save_checkpoint(ckpt: Checkpoint, path):
    atomic_write(path, ckpt.to_bytes())


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        return Checkpoint.from_bytes(fh.read())
