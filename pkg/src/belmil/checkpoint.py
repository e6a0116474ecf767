"""MILT checkpoint format.

Layout (little-endian): magic ``MILT``, u32 version, u32 header length, UTF-8
JSON header, then every tensor as u32 rank, u32 dims, f32 row-major data. The
header lists tensor names in file order: model parameters in declaration
order, then ``bank.<class>`` prototypes, then optimizer state.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from .encoder import EncoderConfig, TransMIL
from .loss import PrototypeBank

MAGIC = b"MILT"
VERSION = 1


class CheckpointError(ValueError):
    pass


def encode_checkpoint(header: dict, tensors: dict[str, torch.Tensor]) -> bytes:
    header = dict(header, tensors=list(tensors))
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(blob)), blob]
    for name, t in tensors.items():
        arr = t.detach().cpu().numpy().astype("<f4")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"tensor {name!r} is not finite")
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_checkpoint(buf: bytes) -> tuple[dict, dict[str, torch.Tensor]]:
    if buf[:4] != MAGIC:
        raise CheckpointError(f"bad magic bytes {buf[:4]!r}")
    version, n = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 12
    header = json.loads(buf[pos:pos + n].decode("utf-8"))
    pos += n
    tensors = {}
    for name in header["tensors"]:
        try:
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
        except struct.error as exc:
            raise CheckpointError(f"truncated header for tensor {name!r}") from exc
        pos += 4 + 4 * rank
        count = int(np.prod(dims)) if rank else 1
        if pos + 4 * count > len(buf):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(dims)
        tensors[name] = torch.from_numpy(arr.astype(np.float32))
        pos += 4 * count
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes")
    return header, tensors


def save_checkpoint(path, model: TransMIL, bank: PrototypeBank | None = None, optimizer=None, meta=None) -> None:
    tensors = dict(model.named_parameters())
    bank_classes = []
    if bank is not None:
        for c in sorted(bank.slots):
            tensors[f"bank.{c}"] = bank.slots[c]
            bank_classes.append(c)
    if optimizer is not None:
        tensors.update({f"optim.{k}": v for k, v in optimizer.state_tensors().items()})
    header = {
        "encoder": model.config.to_dict(),
        "bank_classes": bank_classes,
        "has_optimizer": optimizer is not None,
        "meta": meta or {},
    }
    Path(path).write_bytes(encode_checkpoint(header, tensors))


def load_checkpoint(path, optimizer_factory=None):
    """Return ``(model, bank, optimizer, meta)``.

    ``optimizer_factory(model)`` builds a fresh optimizer whose state is then
    restored; without it the optimizer slot is None.
    """
    header, tensors = decode_checkpoint(Path(path).read_bytes())
    config = EncoderConfig(**header["encoder"])
    model = TransMIL(config)
    with torch.no_grad():
        for name, p in model.named_parameters():
            if name not in tensors:
                raise CheckpointError(f"missing parameter {name!r}")
            if tuple(tensors[name].shape) != tuple(p.shape):
                raise CheckpointError(f"shape mismatch for {name!r}")
            p.copy_(tensors[name])
    bank = PrototypeBank(config.n_classes)
    for c in header["bank_classes"]:
        bank.slots[int(c)] = tensors[f"bank.{c}"]
    optimizer = None
    if optimizer_factory is not None and header["has_optimizer"]:
        optimizer = optimizer_factory(model)
        optimizer.load_state_tensors({k[6:]: v for k, v in tensors.items() if k.startswith("optim.")})
    return model, bank, optimizer, header["meta"]
