"""Versioned single-file checkpoints.

Layout::

    b"GRIDVLP\\n" | u32 format version | u64 header length | JSON header | tensor bytes

The header lists every tensor (name, dtype, shape, byte offset) plus the
step count, resolved run config and vocabulary. JSON is written with sorted
keys, so saving a loaded checkpoint reproduces the file byte for byte.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

MAGIC = b"GRIDVLP\n"
FORMAT_VERSION = 1

_DTYPES = {
    "float32": torch.float32, "float64": torch.float64, "float16": torch.float16,
    "int64": torch.int64, "int32": torch.int32, "bool": torch.bool, "uint8": torch.uint8,
}


class CheckpointError(RuntimeError):
    pass


@dataclass
class Checkpoint:
    tensors: dict[str, torch.Tensor]
    meta: dict = field(default_factory=dict)

    @property
    def step(self) -> int:
        return self.meta.get("step", 0)

    def section(self, prefix: str) -> dict[str, torch.Tensor]:
        p = prefix + "."
        return {k[len(p):]: v for k, v in self.tensors.items() if k.startswith(p)}


def _dtype_name(t: torch.Tensor) -> str:
    return str(t.dtype).replace("torch.", "")


def write_checkpoint(path, ckpt: Checkpoint) -> None:
    entries, blobs, offset = [], [], 0
    for name in sorted(ckpt.tensors):
        t = ckpt.tensors[name].detach().cpu().contiguous()
        raw = t.numpy().tobytes()
        entries.append({"name": name, "dtype": _dtype_name(t), "shape": list(t.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = dict(ckpt.meta)
    header["tensors"] = entries
    header["format_version"] = FORMAT_VERSION
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", FORMAT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for raw in blobs:
            fh.write(raw)


def read_checkpoint(path) -> Checkpoint:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not a checkpoint (bad magic header)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(data[start:start + hlen])
    body = start + hlen
    tensors = {}
    for e in header.pop("tensors"):
        dtype = _DTYPES[e["dtype"]]
        lo = body + e["offset"]
        buf = np.frombuffer(data[lo:lo + e["nbytes"]],
                            dtype=torch.empty(0, dtype=dtype).numpy().dtype)
        tensors[e["name"]] = torch.from_numpy(buf.copy()).reshape(e["shape"])
    header.pop("format_version", None)
    return Checkpoint(tensors, header)


# --- model / optimizer packing ---------------------------------------------------

def pack(model: torch.nn.Module, optimizer: Optional[torch.optim.Optimizer] = None,
         step: int = 0, config: Optional[dict] = None, vocab=None,
         heads: Optional[dict[str, torch.nn.Module]] = None) -> Checkpoint:
    tensors = {f"model.{k}": v for k, v in model.state_dict().items()}
    for task, head in (heads or {}).items():
        tensors.update({f"heads.{task}.{k}": v for k, v in head.state_dict().items()})
    meta: dict = {"step": step, "config": config or {},
                  "vocab": list(vocab.tokens) if vocab is not None else []}
    if optimizer is not None:
        names = {id(p): n for n, p in model.named_parameters()}
        for task, head in (heads or {}).items():
            names.update({id(p): f"heads.{task}.{n}" for n, p in head.named_parameters()})
        groups = []
        for g in optimizer.param_groups:
            info = {k: v for k, v in g.items() if k != "params"}
            info["params"] = [names[id(p)] for p in g["params"]]
            groups.append(info)
            for p in g["params"]:
                for key, value in optimizer.state.get(p, {}).items():
                    tensors[f"optim.{names[id(p)]}.{key}"] = torch.as_tensor(value)
        meta["optimizer"] = {"param_groups": groups}
    return Checkpoint(tensors, meta)


def save_checkpoint(path, model, optimizer=None, step: int = 0, config=None,
                    heads: Optional[dict] = None) -> None:
    cfg = config.to_dict() if hasattr(config, "to_dict") else (config or {})
    write_checkpoint(path, pack(model, optimizer, step, cfg, getattr(model, "vocab", None), heads))


def diff_report(expected: dict[str, torch.Size], found: dict[str, torch.Size]) -> str:
    missing = sorted(set(expected) - set(found))
    unexpected = sorted(set(found) - set(expected))
    shape = sorted(k for k in set(expected) & set(found) if tuple(expected[k]) != tuple(found[k]))
    lines = []
    lines += [f"  missing:    {k} {tuple(expected[k])}" for k in missing]
    lines += [f"  unexpected: {k} {tuple(found[k])}" for k in unexpected]
    lines += [f"  shape:      {k} expected {tuple(expected[k])}, found {tuple(found[k])}"
              for k in shape]
    return "\n".join(lines)


def restore_module(module: torch.nn.Module, tensors: dict[str, torch.Tensor],
                   what: str = "model") -> None:
    expected = {k: v.shape for k, v in module.state_dict().items()}
    found = {k: v.shape for k, v in tensors.items()}
    report = diff_report(expected, found)
    if report:
        raise CheckpointError(f"{what} architecture mismatch:\n{report}")
    module.load_state_dict(tensors, strict=True)


def restore_optimizer(optimizer: torch.optim.Optimizer, ckpt: Checkpoint,
                      named: dict[str, torch.nn.Parameter]) -> None:
    info = ckpt.meta.get("optimizer")
    if not info:
        raise CheckpointError("checkpoint carries no optimizer state")
    if len(info["param_groups"]) != len(optimizer.param_groups):
        raise CheckpointError("optimizer parameter groups differ")
    for saved, group in zip(info["param_groups"], optimizer.param_groups):
        names = saved["params"]
        if [named.get(n) is p for n, p in zip(names, group["params"])] != [True] * len(names) \
                or len(names) != len(group["params"]):
            raise CheckpointError(f"optimizer group {saved.get('name')} parameters differ")
        for k, v in saved.items():
            if k != "params":
                group[k] = v
        for n, p in zip(names, group["params"]):
            prefix = f"optim.{n}."
            state = {k[len(prefix):]: v.clone() for k, v in ckpt.tensors.items()
                     if k.startswith(prefix)}
            if state:
                optimizer.state[p] = state


def model_from_checkpoint(path_or_ckpt):
    from .model import ModelConfig, VLPModel
    from .text import Vocabulary

    ckpt = path_or_ckpt if isinstance(path_or_ckpt, Checkpoint) else read_checkpoint(path_or_ckpt)
    cfg = ModelConfig(**ckpt.meta["config"]["model"])
    model = VLPModel(cfg, Vocabulary(ckpt.meta["vocab"]))
    restore_module(model, ckpt.section("model"))
    return model, ckpt
