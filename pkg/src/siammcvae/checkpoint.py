"""Binary checkpoints.

Layout (all integers little-endian)::

    b"SMCK"  u32 version
    u32 n    config text (utf-8, ``key = value`` lines)
    u32 n    meta text (utf-8 JSON: step counter, RNG state)
    u32 count
    count x record:  u16 name_len, name (utf-8), u8 ndim, ndim x u32 dims,
                     prod(dims) x f64 payload

Records hold parameters under their own names and Adam moments under
``adam.m/<name>`` and ``adam.v/<name>``.
"""

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import tensor as T
from .model import param_shapes
from .optim import AdamState

MAGIC = b"SMCK"
VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    config: "cfgmod.TrainConfig"
    params: dict
    adam: AdamState
    step: int
    rng_state: dict


def _u32(n):
    return struct.pack("<I", n)


def _record(name, arr):
    nb = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f8")
    head = struct.pack("<H", len(nb)) + nb + struct.pack("<B", arr.ndim)
    head += b"".join(_u32(d) for d in arr.shape)
    return head + arr.tobytes()


def dumps(ck):
    ctext = cfgmod.dumps(ck.config).encode()
    meta = json.dumps({"step": ck.step, "adam_step": ck.adam.step,
                       "rng_state": ck.rng_state}).encode()
    recs = [_record(n, p.data) for n, p in ck.params.items()]
    for n in ck.params:
        if n in ck.adam.m:
            recs.append(_record(f"adam.m/{n}", ck.adam.m[n]))
            recs.append(_record(f"adam.v/{n}", ck.adam.v[n]))
    return b"".join([MAGIC, _u32(VERSION), _u32(len(ctext)), ctext, _u32(len(meta)), meta,
                     _u32(len(recs))] + recs)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n):
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"truncated checkpoint at byte {self.pos}")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def loads(buf):
    r = _Reader(buf)
    if r.take(4) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    config = cfgmod.loads(r.take(n).decode())
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n).decode())
    (count,) = r.unpack("<I")
    arrays = {}
    for _ in range(count):
        (nl,) = r.unpack("<H")
        name = r.take(nl).decode()
        (ndim,) = r.unpack("<B")
        dims = r.unpack(f"<{ndim}I") if ndim else ()
        size = int(np.prod(dims)) if ndim else 1
        arrays[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(dims).astype(np.float64)

    expected = param_shapes(config.model)
    params = {}
    for name, shape in expected.items():
        if name not in arrays:
            raise CheckpointError(f"checkpoint lacks parameter {name}")
        if arrays[name].shape != shape:
            raise CheckpointError(f"{name}: stored shape {arrays[name].shape}, config says {shape}")
        params[name] = T.Tensor(arrays[name], requires_grad=True, name=name)
    adam = AdamState(step=meta["adam_step"])
    for name in expected:
        if f"adam.m/{name}" in arrays:
            adam.m[name] = arrays[f"adam.m/{name}"]
            adam.v[name] = arrays[f"adam.v/{name}"]
    return Checkpoint(config=config, params=params, adam=adam, step=meta["step"],
                      rng_state=meta["rng_state"])


def save(ck, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(ck))
    tmp.replace(path)
    return path


def load(path):
    return loads(Path(path).read_bytes())
