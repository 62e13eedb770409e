"""Model checkpoints.

Layout (little-endian): ``"SMCK"`` | u32 version | u32 metadata length |
UTF-8 JSON metadata | u32 section count | sections | u64 checksum.
A section is u16 name length, UTF-8 name, u8 rank, u32 dims[rank], then
float32 data. The checksum is the same BLAKE2b-64 used for datasets, over
all preceding bytes.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from .heat import DatasetFormatError, UnsupportedVersionError, _Reader, checksum
from .losses import AuxConfig
from .tensor import DTYPE
from .train import TrainConfig, build_model

MAGIC = b"SMCK"
VERSION = 1


def _plain_init(cfg: TrainConfig) -> str:
    return "fixed_random" if cfg.init_gate == "fixed_random" else "uniform"


def config_to_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)


def config_from_dict(d: dict) -> TrainConfig:
    d = dict(d)
    aux = AuxConfig(**d.pop("aux", {}))
    return TrainConfig(aux=aux, **d)


def checkpoint_bytes(model, cfg: TrainConfig, region_shape, extra=None) -> bytes:
    meta = {
        "kind": model.kind,
        "config": config_to_dict(cfg),
        "shape": list(region_shape),
        "frozen": sorted(model.frozen()),
        **(extra or {}),
    }
    mb = json.dumps(meta, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<II", VERSION, len(mb)), mb]
    params = model.params
    parts.append(struct.pack("<I", len(params)))
    for name in sorted(params):
        a = np.asarray(params[name], dtype="<f4")
        nb = name.encode()
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
        parts.append(a.tobytes())
    payload = b"".join(parts)
    return payload + struct.pack("<Q", checksum(payload))


def save_checkpoint(path, model, cfg: TrainConfig, region_shape, extra=None) -> None:
    Path(path).write_bytes(checkpoint_bytes(model, cfg, region_shape, extra))


def read_checkpoint(buf: bytes) -> tuple[dict, dict]:
    """Parse checkpoint bytes into ``(metadata, {name: float32 array})``."""
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise DatasetFormatError("bad magic, not an SMCK checkpoint", 0)
    (version,) = struct.unpack("<I", r.take(4, "version"))
    if version != VERSION:
        raise UnsupportedVersionError(f"unsupported checkpoint version {version}", 4)
    (mlen,) = struct.unpack("<I", r.take(4, "metadata length"))
    meta = json.loads(r.take(mlen, "metadata").decode())
    (count,) = struct.unpack("<I", r.take(4, "section count"))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", r.take(2, "section name length"))
        name = r.take(nlen, "section name").decode()
        (rank,) = struct.unpack("<B", r.take(1, "section rank"))
        shape = struct.unpack(f"<{rank}I", r.take(4 * rank, "section dims"))
        n = int(np.prod(shape)) if rank else 1
        arrays[name] = np.frombuffer(r.take(4 * n, f"section {name}"), dtype="<f4").astype(DTYPE).reshape(shape)
    end = r.pos
    (stored,) = struct.unpack("<Q", r.take(8, "checksum"))
    if checksum(buf[:end]) != stored:
        raise DatasetFormatError("checksum mismatch", end)
    return meta, arrays


def load_checkpoint(path, region_map=None):
    """Rebuild the model stored at ``path``; returns ``(model, cfg, metadata)``.

    ``region_map`` is only used to check that the grid matches.
    """
    meta, arrays = read_checkpoint(Path(path).read_bytes())
    shape = tuple(meta["shape"])
    if region_map is not None and shape != tuple(region_map.shape):
        raise ValueError(f"checkpoint grid {shape} does not match data grid {region_map.shape}")
    cfg = config_from_dict(meta["config"])
    # stored parameters overwrite whatever the init produced
    model = build_model(meta["kind"], replace(cfg, init_gate=_plain_init(cfg), init_experts="random"), shape)
    params = model.params
    if set(params) != set(arrays):
        raise ValueError(f"checkpoint sections {sorted(arrays)} != model parameters {sorted(params)}")
    for name, p in params.items():
        if p.shape != arrays[name].shape:
            raise ValueError(f"parameter {name}: checkpoint {arrays[name].shape} vs model {p.shape}")
        p[...] = arrays[name]
    return model, cfg, meta
