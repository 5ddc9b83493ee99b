"""Binary checkpoint format.

Layout: ``PBRT`` magic, u32 format version, u32 header length, UTF-8 JSON
header, then tensors as (u32 name length, name, u32 rank, u32 dims...,
little-endian float32 data). Optimizer moments are stored as tensors named
``adam.m/<param>`` and ``adam.v/<param>``.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .engine import AdamState
from .model import ModelConfig, parameter_shapes

MAGIC = b"PBRT"
FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict[str, np.ndarray]
    optimizer: AdamState | None = None
    rng_state: dict = field(default_factory=dict)
    step: int = 0
    epoch: int = 0
    best_val: float | None = None
    mode: str = ""
    num_classes: int | None = None
    vocab: dict | None = None
    history: list[float] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def header(self) -> dict:
        opt = None
        if self.optimizer is not None:
            st = self.optimizer
            opt = {"step": st.step, "lr": st.lr, "beta1": st.beta1, "beta2": st.beta2, "eps": st.eps}
        return {
            "model_config": self.model_config.to_json(),
            "optimizer": opt,
            "rng_state": self.rng_state,
            "step": self.step,
            "epoch": self.epoch,
            "best_val": self.best_val,
            "mode": self.mode,
            "num_classes": self.num_classes,
            "vocab": self.vocab,
            "history": self.history,
            "meta": self.meta,
        }


def _tensors(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = list(ckpt.params.items())
    if ckpt.optimizer is not None:
        out += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.first_moment.items()]
        out += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.second_moment.items()]
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = _tensors(ckpt)
    header = ckpt.header() | {"num_tensors": len(tensors)}
    blob = json.dumps(header, ensure_ascii=False).encode("utf-8")
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC + struct.pack("<II", ckpt.format_version, len(blob)) + blob)
        for name, arr in tensors:
            raw = name.encode("utf-8")
            fh.write(struct.pack("<I", len(raw)) + raw + struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    tmp.replace(path)
    return path


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointTruncatedError(f"checkpoint truncated at byte {len(self.data)} (needed {self.pos + n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u32(self, count: int = 1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def load_checkpoint(path: str | Path) -> Checkpoint:
    r = _Reader(Path(path).read_bytes())
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path} is not a checkpoint (bad magic)")
    version = r.u32()
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(r.u32()).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from exc
    tensors = {}
    for _ in range(header["num_tensors"]):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        shape = tuple(r.u32(rank)) if rank > 1 else ((r.u32(),) if rank == 1 else ())
        count = int(np.prod(shape)) if shape else 1
        tensors[name] = np.frombuffer(r.take(4 * count), dtype="<f4").astype(np.float32).reshape(shape)
    if r.pos != len(r.data):
        raise CheckpointError("trailing bytes after the last tensor")

    cfg = ModelConfig.from_json(header["model_config"])
    expected = parameter_shapes(cfg, header["num_classes"])
    params = {k: v for k, v in tensors.items() if not k.startswith("adam.")}
    if set(params) != set(expected):
        missing, extra = sorted(set(expected) - set(params)), sorted(set(params) - set(expected))
        raise CheckpointShapeError(f"parameter set mismatch: missing {missing}, unexpected {extra}")
    for name, shape in expected.items():
        if params[name].shape != tuple(shape):
            raise CheckpointShapeError(f"{name}: stored shape {params[name].shape}, config implies {tuple(shape)}")
    params = {name: params[name] for name in expected}

    optimizer = None
    if header["optimizer"] is not None:
        o = header["optimizer"]
        optimizer = AdamState(lr=o["lr"], beta1=o["beta1"], beta2=o["beta2"], eps=o["eps"], step=o["step"])
        for name in expected:
            for kind, store in (("m", optimizer.first_moment), ("v", optimizer.second_moment)):
                key = f"adam.{kind}/{name}"
                if key in tensors:
                    if tensors[key].shape != params[name].shape:
                        raise CheckpointShapeError(f"{key}: shape {tensors[key].shape} != {params[name].shape}")
                    store[name] = tensors[key]
    return Checkpoint(
        model_config=cfg,
        params=params,
        optimizer=optimizer,
        rng_state=header["rng_state"],
        step=header["step"],
        epoch=header["epoch"],
        best_val=header["best_val"],
        mode=header["mode"],
        num_classes=header["num_classes"],
        vocab=header["vocab"],
        history=header["history"],
        meta=header["meta"],
        format_version=version,
    )
