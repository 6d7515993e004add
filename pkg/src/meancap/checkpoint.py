"""Versioned checkpoint container, bit-exact on round trip.

Layout: magic "CMLC" | version u16 LE | header length u32 LE | header JSON
| parameter blobs | CRC32 (of header plus blobs).  The header carries the
model config, vocabulary, counters, and the name/shape/dtype listing of
each parameter group; blobs follow in exactly that order as little-endian
raw bytes.  Everything needed to resume or caption is inside: a checkpoint
is self-contained.
"""

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"CMLC"
CHECKPOINT_VERSION = 1

_PREAMBLE = struct.Struct("<4sHI")


@dataclass
class Checkpoint:
    config: dict
    vocab_tokens: list
    vocab_merges: list
    step: int
    adam_t: int
    seed: int
    stage: str
    momentum: float
    lambda_kd: float
    use_ema: bool
    groups: dict  # group name -> {param name -> ndarray}
    best: dict = None
    extra: dict = field(default_factory=dict)


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    listing = {}
    blobs = []
    for group in sorted(ckpt.groups):
        entries = []
        for name in sorted(ckpt.groups[group]):
            arr = np.ascontiguousarray(ckpt.groups[group][name])
            dtype = arr.dtype.newbyteorder("<")
            entries.append([name, list(arr.shape), dtype.str])
            blobs.append(arr.astype(dtype, copy=False).tobytes())
        listing[group] = entries
    header = {
        "version": CHECKPOINT_VERSION,
        "config": ckpt.config,
        "vocab": {"tokens": ckpt.vocab_tokens, "merges": [list(m) for m in ckpt.vocab_merges]},
        "step": ckpt.step,
        "adam_t": ckpt.adam_t,
        "seed": ckpt.seed,
        "stage": ckpt.stage,
        "momentum": ckpt.momentum,
        "lambda_kd": ckpt.lambda_kd,
        "use_ema": ckpt.use_ema,
        "groups": listing,
        "best": ckpt.best,
        "extra": ckpt.extra,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    payload = head + b"".join(blobs)
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, len(head)))
        fh.write(payload)
        fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _PREAMBLE.size + 4:
        raise ValueError(f"checkpoint too short: {len(blob)} bytes")
    magic, version, head_len = _PREAMBLE.unpack_from(blob, 0)
    if magic != CHECKPOINT_MAGIC:
        raise ValueError(f"bad checkpoint magic: {magic!r}")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    payload = blob[_PREAMBLE.size:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    actual = zlib.crc32(payload)
    if crc != actual:
        raise ValueError(f"checkpoint checksum mismatch: stored {crc:#010x}, computed {actual:#010x}")
    header = json.loads(payload[:head_len].decode("utf-8"))
    offset = head_len
    groups = {}
    for group in sorted(header["groups"]):
        params = {}
        for name, shape, dtype_str in header["groups"][group]:
            dtype = np.dtype(dtype_str)
            count = int(np.prod(shape)) if shape else 1
            size = count * dtype.itemsize
            arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
            params[name] = arr.reshape(shape).copy()
            offset += size
        groups[group] = params
    if offset != len(payload):
        raise ValueError(f"checkpoint payload length mismatch: consumed {offset}, have {len(payload)}")
    return Checkpoint(
        config=header["config"],
        vocab_tokens=header["vocab"]["tokens"],
        vocab_merges=[tuple(m) for m in header["vocab"]["merges"]],
        step=header["step"],
        adam_t=header["adam_t"],
        seed=header["seed"],
        stage=header["stage"],
        momentum=header["momentum"],
        lambda_kd=header["lambda_kd"],
        use_ema=header["use_ema"],
        groups=groups,
        best=header.get("best"),
        extra=header.get("extra", {}),
    )
