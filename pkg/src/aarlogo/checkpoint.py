"""Binary checkpoint container.

Layout (little-endian):
    magic "AARC" | u32 version | u64 config_hash | u32 n_blobs
    directory: per blob, u16 name_len | name utf8 | u64 offset
               | u64 length | u32 crc32
    payload bytes

Parameter and optimizer blobs are raw little-endian f32; the "meta" blob
is JSON (shapes, config, epoch, rng state). Blobs are written in sorted
name order so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import binascii
import json
import struct
from dataclasses import dataclass

import numpy as np

from . import numeric as nm
from .numeric import Tensor

MAGIC = b"AARC"
VERSION = 1


class CheckpointError(IOError):
    pass


class IntegrityError(CheckpointError):
    pass


class IncompatibleError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    config: dict
    config_hash: int
    params: dict  # name -> Tensor (requires_grad)
    adam: nm.AdamState
    epoch: int
    rng_state: dict
    extra: dict  # label_map and friends


def _f32_bytes(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f4").tobytes()


def save(path: str, config: dict, config_hash: int, params: dict,
         adam: nm.AdamState, epoch: int, rng_state: dict, extra: dict = None):
    blobs = {}
    shapes = {}
    for name in sorted(params):
        blobs[f"param:{name}"] = _f32_bytes(params[name].data)
        shapes[name] = list(params[name].data.shape)
    for name in sorted(adam.m):
        blobs[f"adam_m:{name}"] = _f32_bytes(adam.m[name])
        blobs[f"adam_v:{name}"] = _f32_bytes(adam.v[name])
    meta = {
        "config": config,
        "shapes": shapes,
        "epoch": epoch,
        "adam": {"t": adam.t, "beta1": adam.beta1, "beta2": adam.beta2,
                 "eps": adam.eps},
        "rng_state": rng_state,
        "extra": extra or {},
    }
    blobs["meta"] = json.dumps(meta, sort_keys=True).encode("utf-8")

    names = sorted(blobs)
    dir_size = sum(2 + len(n.encode()) + 8 + 8 + 4 for n in names)
    header_size = 4 + 4 + 8 + 4
    offset = header_size + dir_size
    directory = []
    for n in names:
        data = blobs[n]
        directory.append((n, offset, len(data), binascii.crc32(data)))
        offset += len(data)

    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<IQI", VERSION, config_hash, len(names)))
        for n, off, length, crc in directory:
            enc = n.encode()
            f.write(struct.pack("<H", len(enc)))
            f.write(enc)
            f.write(struct.pack("<QQI", off, length, crc))
        for n in names:
            f.write(blobs[n])


def load(path: str, expect_hash: int = None) -> Checkpoint:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 20 or raw[:4] != MAGIC:
        raise IntegrityError(f"{path}: not a checkpoint file")
    version, cfg_hash, n_blobs = struct.unpack_from("<IQI", raw, 4)
    if version != VERSION:
        raise IncompatibleError(
            f"{path}: checkpoint version {version}, expected {VERSION}")
    pos = 20
    directory = []
    for _ in range(n_blobs):
        (name_len,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + name_len].decode()
        pos += name_len
        off, length, crc = struct.unpack_from("<QQI", raw, pos)
        pos += 20
        directory.append((name, off, length, crc))
    expected_end = max((off + length for _, off, length, _ in directory),
                       default=pos)
    if len(raw) != expected_end:
        raise IntegrityError(
            f"{path}: truncated or padded file ({len(raw)} bytes, "
            f"expected {expected_end})")
    blobs = {}
    for name, off, length, crc in directory:
        data = raw[off:off + length]
        if binascii.crc32(data) != crc:
            raise IntegrityError(f"{path}: CRC mismatch in blob {name!r}")
        blobs[name] = data

    meta = json.loads(blobs["meta"])
    if expect_hash is not None and cfg_hash != expect_hash:
        raise IncompatibleError(
            f"{path}: config hash {cfg_hash:016x} does not match expected "
            f"{expect_hash:016x}")
    params = {}
    for name, shape in meta["shapes"].items():
        arr = np.frombuffer(blobs[f"param:{name}"], dtype="<f4").reshape(shape)
        params[name] = Tensor(arr.copy(), requires_grad=True)
    adam = nm.AdamState(t=meta["adam"]["t"], beta1=meta["adam"]["beta1"],
                        beta2=meta["adam"]["beta2"], eps=meta["adam"]["eps"])
    for name, shape in meta["shapes"].items():
        key = f"adam_m:{name}"
        if key in blobs:
            adam.m[name] = np.frombuffer(blobs[key], dtype="<f4") \
                .reshape(shape).copy()
            adam.v[name] = np.frombuffer(blobs[f"adam_v:{name}"], dtype="<f4") \
                .reshape(shape).copy()
    return Checkpoint(config=meta["config"], config_hash=cfg_hash,
                      params=params, adam=adam, epoch=meta["epoch"],
                      rng_state=meta["rng_state"], extra=meta["extra"])
