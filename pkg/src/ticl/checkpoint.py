"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"TICL"                      magic
    u32 version                  currently 1
    u32 tensor_count
    per tensor:
        u32 name_len, name (UTF-8)
        u32 rank, rank x u64 dims
        prod(dims) x f32 values
    u64 meta_len, meta (UTF-8 JSON, sorted keys)

Files are written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .continual import ClassifierHead, ContinualLearner, TaskToken
from .autodiff import Parameter
from .encoder import EncoderConfig

MAGIC = b"TICL"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def encode(tensors: list[tuple[str, np.ndarray]], meta: dict) -> bytes:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, arr in tensors:
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    blob = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts.append(struct.pack("<Q", len(blob)))
    parts.append(blob)
    return b"".join(parts)


def decode(data: bytes) -> tuple[list[tuple[str, np.ndarray]], dict]:
    try:
        if data[:4] != MAGIC:
            raise CheckpointError("bad magic bytes")
        version, count = struct.unpack_from("<II", data, 4)
        if version != FORMAT_VERSION:
            raise CheckpointError(f"unsupported format version {version}")
        off = 12
        tensors = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode("utf-8")
            off += nlen
            (rank,) = struct.unpack_from("<I", data, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}Q", data, off)
            off += 8 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            if off + 4 * size > len(data):
                raise CheckpointError(f"truncated tensor {name!r}")
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
            off += 4 * size
            tensors.append((name, arr))
        (mlen,) = struct.unpack_from("<Q", data, off)
        off += 8
        if off + mlen != len(data):
            raise CheckpointError("metadata length does not match file size")
        meta = json.loads(data[off:off + mlen].decode("utf-8"))
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint: {exc}") from exc
    return tensors, meta


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


def learner_meta(learner: ContinualLearner, extra: dict | None = None) -> dict:
    meta = {
        "format": FORMAT_VERSION,
        "step": learner.step,
        "lambda": learner.lam,
        "seed": learner.seed,
        "head_hidden": learner.head_hidden,
        "squared_distance": learner.squared_distance,
        "encoder": learner.config.to_dict(),
        "tasks": [{"task_id": h.task_id, "classes": h.classes} for h in learner.heads],
        "learned_classes": sorted(learner.learned_classes),
    }
    if extra:
        meta.update(extra)
    return meta


def save_checkpoint(path, learner: ContinualLearner, extra: dict | None = None, meta: dict | None = None) -> None:
    """Write ``learner`` (extractor, tokens, heads) plus metadata."""
    if meta is None:
        meta = learner_meta(learner, extra)
    atomic_write(path, encode(learner.named_tensors(), meta))


def load_checkpoint(path) -> tuple[ContinualLearner, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"no checkpoint at {path}")
    tensors, meta = decode(path.read_bytes())
    try:
        return learner_from_tensors(tensors, meta), meta
    except (KeyError, ValueError, TypeError) as exc:
        raise CheckpointError(f"checkpoint content is inconsistent: {exc}") from exc


def learner_from_tensors(tensors: list[tuple[str, np.ndarray]], meta: dict) -> ContinualLearner:
    config = EncoderConfig(**meta["encoder"])
    learner = ContinualLearner(config, lam=meta["lambda"], seed=meta["seed"],
                               head_hidden=meta.get("head_hidden", 0),
                               squared_distance=meta.get("squared_distance", False))
    table = dict(tensors)
    if len(table) != len(tensors):
        raise ValueError("duplicate tensor names")
    fe_state = {name[3:]: arr for name, arr in tensors if name.startswith("fe.")}
    learner.student.load_state_dict(fe_state)
    rng = np.random.default_rng(0)
    for task in meta["tasks"]:
        tid = int(task["task_id"])
        tok = Parameter(table[f"token.{tid}"], name=f"token.{tid}", frozen=True)
        head = ClassifierHead(tid, task["classes"], config.embed_dim, rng, np.float32, learner.head_hidden)
        head.load_state_dict({n: table[p.name] for n, p in head.named_parameters()})
        head.freeze()
        learner.tokens.append(TaskToken(tok, tid))
        learner.heads.append(head)
    known = {f"fe.{n}" for n in fe_state} | {t.param.name for t in learner.tokens}
    known |= {p.name for h in learner.heads for p in h.parameters()}
    stray = set(table) - known
    if stray:
        raise ValueError(f"unexpected tensors {sorted(stray)}")
    learner.step = int(meta["step"])
    learner.learned_classes = set(int(c) for c in meta.get("learned_classes", []))
    return learner
