"""Binary checkpoint format.

Layout (little-endian)::

    magic      8 bytes  b"CSQACKPT"
    version    u32
    epoch      u32
    cfg hash   32 bytes (sha256 digest of the canonical config text)
    cfg text   u32 length + utf-8
    blocks     u32 count, then per block:
               u16 name length + utf-8 name, u8 ndim, u64 * ndim shape,
               float64 * prod(shape) data
"""

import hashlib
import struct
from collections import OrderedDict
from dataclasses import dataclass, field

import numpy as np

from .errors import UsageError

MAGIC = b"CSQACKPT"
VERSION = 1


@dataclass
class Checkpoint:
    config_text: str
    epoch: int
    blocks: OrderedDict = field(default_factory=OrderedDict)

    @property
    def config_hash(self):
        return hashlib.sha256(self.config_text.encode()).hexdigest()

    def section(self, prefix):
        n = len(prefix) + 1
        return OrderedDict((k[n:], v) for k, v in self.blocks.items() if k.startswith(prefix + "/"))


def save(path, ckpt):
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, ckpt.epoch))
        fh.write(bytes.fromhex(ckpt.config_hash))
        text = ckpt.config_text.encode()
        fh.write(struct.pack("<I", len(text)))
        fh.write(text)
        fh.write(struct.pack("<I", len(ckpt.blocks)))
        for name, arr in ckpt.blocks.items():
            arr = np.asarray(arr, dtype="<f8")
            raw = name.encode()
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:8] != MAGIC:
        raise UsageError(f"{path}: not a csqa checkpoint (bad magic)")
    version, epoch = struct.unpack_from("<II", buf, 8)
    if version != VERSION:
        raise UsageError(f"{path}: unsupported checkpoint version {version}")
    digest = buf[16:48].hex()
    (tlen,) = struct.unpack_from("<I", buf, 48)
    pos = 52
    text = buf[pos:pos + tlen].decode()
    pos += tlen
    ckpt = Checkpoint(text, epoch)
    if ckpt.config_hash != digest:
        raise UsageError(f"{path}: config hash does not match the embedded config")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}Q", buf, pos)
        pos += 8 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        ckpt.blocks[name] = arr
    return ckpt
