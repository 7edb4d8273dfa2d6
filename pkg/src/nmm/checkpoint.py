"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"NMM1"  u16 version  u32 len  <config YAML, UTF-8>
    repeated: u16 len  <name, UTF-8>  u8 rank  rank x u32 dims  <f32 payload>
    8-byte BLAKE2b digest of every preceding byte

Records follow the model's parameter layout order, so saving the same
model twice yields identical bytes.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

from .config import dump_config, parse_config
from .errors import ConfigError
from .mixture import Model, parameter_layout

MAGIC = b"NMM1"
VERSION = 1
DIGEST_SIZE = 8


class CheckpointError(ConfigError):
    pass


def _digest(data):
    return hashlib.blake2b(data, digest_size=DIGEST_SIZE).digest()


def to_bytes(cfg, model):
    arrays = {n: p.data for n, p in model.params.items()}
    arrays.update(model.buffers)
    text = dump_config(cfg).encode("utf-8")
    out = [MAGIC, struct.pack("<HI", VERSION, len(text)), text]
    for name, _, _ in parameter_layout(model.cfg):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        raw = name.encode("utf-8")
        out.append(struct.pack("<H", len(raw)) + raw)
        out.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        out.append(arr.tobytes())
    body = b"".join(out)
    return body + _digest(body)


def from_bytes(data):
    """Returns ``(FullConfig, Model)``; raises :class:`CheckpointError` on any corruption."""
    if len(data) < len(MAGIC) + 6 + DIGEST_SIZE or data[:4] != MAGIC:
        raise CheckpointError("not an NMM1 checkpoint")
    body, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]
    if _digest(body) != digest:
        raise CheckpointError("checksum mismatch")
    version, text_len = struct.unpack_from("<HI", body, 4)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 10
    cfg = parse_config(body[pos:pos + text_len].decode("utf-8"))
    pos += text_len
    arrays = {}
    try:
        while pos < len(body):
            (n,) = struct.unpack_from("<H", body, pos)
            name = body[pos + 2:pos + 2 + n].decode("utf-8")
            pos += 2 + n
            (rank,) = struct.unpack_from("<B", body, pos)
            dims = struct.unpack_from(f"<{rank}I", body, pos + 1)
            pos += 1 + 4 * rank
            size = int(np.prod(dims)) * 4
            if pos + size > len(body):
                raise CheckpointError(f"truncated record {name}")
            arrays[name] = np.frombuffer(body, dtype="<f4", count=size // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += size
    except struct.error as exc:
        raise CheckpointError(f"malformed record: {exc}") from None
    buffers = {n: a for n, a in arrays.items() if n.endswith(("running_mean", "running_var"))}
    params = {n: a for n, a in arrays.items() if n not in buffers}
    return cfg, Model(cfg.model, params, buffers)


def save_checkpoint(path, cfg, model):
    data = to_bytes(cfg, model)
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
