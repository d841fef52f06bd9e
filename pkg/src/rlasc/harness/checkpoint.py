"""Versioned binary checkpoints for parameter blocks.

Layout, little-endian::

    "RLCK" | version u8 | meta length u32 | meta (UTF-8 JSON)
    tensor count u32 | per tensor: name length u16 | name | ndim u8 | dims u32 * ndim
                                   | float64 values, row-major
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict
from pathlib import Path

import numpy as np

from ..decoder import CodecModel
from ..rl import Policy, PolicySpec
from ..semantic import SceneConfig

MAGIC = b"RLCK"
VERSION = 1


class CheckpointError(ValueError):
    def __init__(self, message: str, offset: int | None = None):
        where = "" if offset is None else f" (at byte offset {offset})"
        super().__init__(message + where)
        self.offset = offset


def dump_tensors(tensors: dict[str, np.ndarray], meta: dict) -> bytes:
    blob = json.dumps(meta, sort_keys=True).encode()
    out = bytearray(MAGIC + struct.pack("<BI", VERSION, len(blob)) + blob)
    out += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name], dtype="<f8")
        key = name.encode()
        out += struct.pack("<H", len(key)) + key + struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    return bytes(out)


def load_tensors(data: bytes) -> tuple[dict[str, np.ndarray], dict]:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(data):
            raise CheckpointError(f"truncated checkpoint while reading {what}", pos)
        chunk = data[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic)", 0)
    version, meta_len = struct.unpack("<BI", take(5, "header"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}", 4)
    meta = json.loads(take(meta_len, "metadata").decode())
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    tensors = {}
    for _ in range(count):
        (klen,) = struct.unpack("<H", take(2, "name length"))
        name = take(klen, "name").decode()
        (ndim,) = struct.unpack("<B", take(1, f"{name} rank"))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim, f"{name} shape"))
        size = int(np.prod(shape)) if ndim else 1
        raw = take(8 * size, f"{name} values")
        tensors[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(data):
        raise CheckpointError("trailing bytes after last tensor", pos)
    return tensors, meta


def save_checkpoint(path, model: CodecModel, policy: Policy | None = None,
                    extra: dict | None = None) -> None:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    meta = {"n": model.n, "seed": model.seed, "stage": model.stage, "frozen": model.frozen,
            "scene": asdict(model.scene)}
    if policy is not None:
        tensors.update({f"policy.{k}": v for k, v in policy.params.values().items()})
        spec = asdict(policy.spec)
        spec["hidden"] = list(spec["hidden"])
        meta["policy"] = spec
    meta.update(extra or {})
    Path(path).write_bytes(dump_tensors(tensors, meta))


def load_checkpoint(path) -> tuple[CodecModel, Policy | None, dict]:
    tensors, meta = load_tensors(Path(path).read_bytes())
    scene = dict(meta["scene"])
    if scene.get("active") is not None:
        scene["active"] = tuple(scene["active"])
    model = CodecModel(SceneConfig(**scene), n=meta["n"], seed=meta["seed"])
    model.load_state_dict({k[6:]: v for k, v in tensors.items() if k.startswith("model.")})
    model.stage = meta["stage"]
    model.frozen = meta["frozen"]
    policy = None
    if "policy" in meta:
        spec = dict(meta["policy"])
        spec["hidden"] = tuple(spec["hidden"])
        policy = Policy(PolicySpec(**spec))
        policy.params.load({k[7:]: v for k, v in tensors.items() if k.startswith("policy.")})
    return model, policy, meta
