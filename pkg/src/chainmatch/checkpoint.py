"""Single-file model checkpoints.

Layout (all integers little-endian):

    magic      8 bytes  b"CHMCKPT1"
    header     u32 length + UTF-8 JSON {"kind", "role", "config"}
    n_tensors  u32
    per tensor, in parameter declaration order:
        u16 name length + UTF-8 name
        u32 ndim, then ndim x u32 dims
        prod(dims) float32 values, row-major
"""

from __future__ import annotations

import dataclasses
import json
import struct
from pathlib import Path

import numpy as np
import torch

MAGIC = b"CHMCKPT1"


def _kinds():
    from chainmatch.asr import ASRConfig, ASRModel
    from chainmatch.tts import TTSConfig, TTSModel

    return {"asr": (ASRModel, ASRConfig), "tts": (TTSModel, TTSConfig)}


def save_model(model: torch.nn.Module, path: str | Path) -> None:
    kind = next(k for k, (cls, _) in _kinds().items() if isinstance(model, cls))
    header = {"kind": kind, "role": getattr(model, "role", ""), "config": dataclasses.asdict(model.config)}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    state = model.state_dict()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(state)))
        for name, tensor in state.items():
            raw = name.encode("utf-8")
            arr = tensor.detach().cpu().numpy().astype("<f4")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load_model(path: str | Path):
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise ValueError(f"{path}: not a checkpoint")
    pos = 8
    (n,) = struct.unpack_from("<I", data, pos)
    pos += 4
    header = json.loads(data[pos : pos + n].decode("utf-8"))
    pos += n
    model_cls, config_cls = _kinds()[header["kind"]]
    model = model_cls(config_cls(**header["config"]), role=header["role"])
    (count,) = struct.unpack_from("<I", data, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", data, pos)
        pos += 2
        name = data[pos : pos + ln].decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<I", data, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", data, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
        pos += 4 * size
        state[name] = torch.from_numpy(arr.astype(np.float32))
    model.load_state_dict(state)
    return model
