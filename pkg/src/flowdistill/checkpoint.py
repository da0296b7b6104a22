"""Binary checkpoints.

Layout::

    b"FGMCKPT1"                      8-byte magic
    uint64 little-endian             header length in bytes
    header                           canonical JSON (sorted keys)
    float64 little-endian arrays     in the order listed by header["arrays"]
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nets import OneStepGenerator, VectorFieldNet

__all__ = ["Checkpoint", "CheckpointError", "MAGIC", "load_checkpoint", "load_model", "checkpoint_for"]

MAGIC = b"FGMCKPT1"
FORMAT_VERSION = 1
KINDS = ("teacher", "online-flow", "generator")


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    kind: str
    arch: dict
    params: np.ndarray
    ema: np.ndarray | None = None
    step: int = 0
    config_hash: str = ""
    generator: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CheckpointError(f"unknown checkpoint kind {self.kind!r}")
        self.params = np.ascontiguousarray(self.params, dtype="<f8").ravel()
        if self.ema is not None:
            self.ema = np.ascontiguousarray(self.ema, dtype="<f8").ravel()

    def header(self) -> dict:
        arrays = [{"name": "params", "size": int(self.params.size)}]
        if self.ema is not None:
            arrays.append({"name": "ema", "size": int(self.ema.size)})
        head = {
            "version": self.version,
            "kind": self.kind,
            "arch": self.arch,
            "arrays": arrays,
            "step": int(self.step),
            "config_hash": self.config_hash,
        }
        if self.kind == "generator":
            head["generator"] = self.generator
        return head

    def to_bytes(self) -> bytes:
        head = json.dumps(self.header(), sort_keys=True, separators=(",", ":")).encode()
        parts = [MAGIC, struct.pack("<Q", len(head)), head, self.params.tobytes()]
        if self.ema is not None:
            parts.append(self.ema.tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, blob: bytes) -> "Checkpoint":
        if blob[:8] != MAGIC:
            raise CheckpointError("not a checkpoint file (bad magic)")
        if len(blob) < 16:
            raise CheckpointError("truncated checkpoint header")
        (size,) = struct.unpack("<Q", blob[8:16])
        try:
            head = json.loads(blob[16 : 16 + size])
        except (json.JSONDecodeError, UnicodeDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
        if head.get("version") != FORMAT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {head.get('version')!r}")
        offset = 16 + size
        arrays = {}
        for entry in head["arrays"]:
            nbytes = 8 * entry["size"]
            chunk = blob[offset : offset + nbytes]
            if len(chunk) != nbytes:
                raise CheckpointError(f"truncated array {entry['name']!r}")
            arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f8").copy()
            offset += nbytes
        if offset != len(blob):
            raise CheckpointError(f"{len(blob) - offset} trailing bytes after arrays")
        return cls(
            kind=head["kind"],
            arch=head["arch"],
            params=arrays["params"],
            ema=arrays.get("ema"),
            step=head["step"],
            config_hash=head["config_hash"],
            generator=head.get("generator", {}),
            version=head["version"],
        )


def load_checkpoint(path) -> Checkpoint:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from None
    return Checkpoint.from_bytes(blob)


def checkpoint_for(model, kind: str, ema=None, step: int = 0, config_hash: str = "") -> Checkpoint:
    """Package a :class:`VectorFieldNet` or :class:`OneStepGenerator`."""
    if isinstance(model, OneStepGenerator):
        net, extra = model.backbone, model.constants()
    else:
        net, extra = model, {}
    ema_flat = None if ema is None else (ema.backbone if isinstance(ema, OneStepGenerator) else ema).get_flat()
    return Checkpoint(kind, net.arch(), net.get_flat(), ema_flat, step, config_hash, extra)


def load_model(ckpt: Checkpoint, expected_arch: dict | None = None, use_ema: bool = True):
    """Rebuild the model stored in ``ckpt`` (EMA weights when present and requested)."""
    if expected_arch is not None and expected_arch != ckpt.arch:
        raise CheckpointError(f"architecture mismatch: checkpoint has {ckpt.arch}, expected {expected_arch}")
    net = VectorFieldNet.from_arch(ckpt.arch)
    net.set_flat(ckpt.ema if use_ema and ckpt.ema is not None else ckpt.params)
    if ckpt.kind == "generator":
        return OneStepGenerator(net, **ckpt.generator)
    return net
