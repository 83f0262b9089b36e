"""Versioned binary checkpoint container.

Layout: ``b"BIRDCKPT"``, uint32 version, uint64 header length, a UTF-8 JSON
header, then the raw little-endian tensor bytes. The header carries the
architecture (``model``), training clip length, deformable groups, kernel
size and widths, and a table of ``name -> dtype, shape, offset, nbytes,
crc32`` entries. Names are the canonical ``module.block.layer`` parameter
paths of the model's state dict.
"""
from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np
import torch

from .propagation import ModelConfig

MAGIC = b"BIRDCKPT"
VERSION = 1
_DTYPES = {"float32": np.float32, "float64": np.float64, "int64": np.int64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, model, n_train: int, extra: dict | None = None) -> None:
    cfg: ModelConfig = model.cfg
    entries = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy().copy(order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.name not in _DTYPES:
            raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.name,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        blobs.append(raw)
        offset += len(raw)
    header = {
        "version": VERSION,
        "n_train": int(n_train),
        "d": cfg.groups,
        "K": cfg.kernel_size,
        "channels": cfg.channels,
        "backbone_width": cfg.backbone_width,
        "growth": cfg.growth,
        "model": cfg.to_dict(),
        "extra": extra or {},
        "tensors": entries,
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQ", VERSION, len(hb)))
        f.write(hb)
        for raw in blobs:
            f.write(raw)


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    """Return ``(header, state_dict)``; every failure names the offending field."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError(f"{path}: field 'magic' does not identify a checkpoint")
    pos = len(MAGIC)
    if len(data) < pos + 12:
        raise CheckpointError(f"{path}: field 'version' truncated")
    version, hlen = struct.unpack_from("<IQ", data, pos)
    if version != VERSION:
        raise CheckpointError(f"{path}: field 'version' is {version}, expected {VERSION}")
    pos += 12
    try:
        header = json.loads(data[pos : pos + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: field 'header' is not valid JSON ({exc})") from exc
    for key in ("n_train", "d", "K", "channels", "model", "tensors"):
        if key not in header:
            raise CheckpointError(f"{path}: field '{key}' missing from header")
    base = pos + hlen
    state: dict[str, torch.Tensor] = {}
    for e in header["tensors"]:
        name = e.get("name", "?")
        try:
            dtype = np.dtype(_DTYPES[e["dtype"]]).newbyteorder("<")
            start, nbytes, shape = base + int(e["offset"]), int(e["nbytes"]), tuple(e["shape"])
        except (KeyError, TypeError, ValueError) as exc:
            raise CheckpointError(f"{path}: tensor '{name}' has a malformed entry ({exc})") from exc
        raw = data[start : start + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: tensor '{name}' truncated")
        if zlib.crc32(raw) != e.get("crc32"):
            raise CheckpointError(f"{path}: tensor '{name}' failed its checksum")
        if int(np.prod(shape, dtype=np.int64)) * dtype.itemsize != nbytes:
            raise CheckpointError(f"{path}: tensor '{name}' shape {shape} disagrees with its size")
        arr = np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
        state[name] = torch.from_numpy(arr.copy())
    return header, state


def load_checkpoint(path: str | Path, model=None):
    """Load into ``model`` (or build one from the header); returns ``(model, header)``."""
    from .model import BIRDDetector

    header, state = read_checkpoint(path)
    try:
        cfg = ModelConfig.from_dict(header["model"])
    except (KeyError, TypeError) as exc:
        raise CheckpointError(f"{path}: field 'model' invalid ({exc})") from exc
    if model is None:
        model = BIRDDetector(cfg)
    elif model.cfg != cfg:
        diff = [k for k, v in cfg.to_dict().items() if model.cfg.to_dict()[k] != v]
        raise CheckpointError(f"{path}: field 'model' mismatches the target model in {diff}")
    expected = model.state_dict()
    missing = sorted(set(expected) - set(state))
    unexpected = sorted(set(state) - set(expected))
    if missing or unexpected:
        raise CheckpointError(f"{path}: tensors missing {missing[:5]} / unexpected {unexpected[:5]}")
    for name, t in expected.items():
        if tuple(t.shape) != tuple(state[name].shape):
            raise CheckpointError(
                f"{path}: tensor '{name}' has shape {tuple(state[name].shape)}, model expects {tuple(t.shape)}"
            )
        if t.dtype != state[name].dtype:
            raise CheckpointError(f"{path}: tensor '{name}' has dtype {state[name].dtype}, model expects {t.dtype}")
    model.load_state_dict(state)
    return model, header
