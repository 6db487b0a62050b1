"""Checkpoint container: a text header followed by concatenated tensor records.

Header lines are ``key=value``; ``config.<key>`` lines snapshot the
RunConfig and ``tensor=<name> <offset> <nbytes>`` lines index the binary
section that starts after the ``end`` line.  Floats that must survive
bit-exactly are stored with ``float.hex``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict

import numpy as np

from mist.autodiff import ParamStore, tensor_from_bytes, tensor_to_bytes
from mist.harness import config as config_mod
from mist.harness.config import RunConfig

MAGIC = "MIST-CHECKPOINT"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


@dataclass
class Checkpoint:
    cfg: RunConfig
    params: Dict[str, np.ndarray]
    exp_avg: Dict[str, np.ndarray]
    exp_avg_sq: Dict[str, np.ndarray]
    step: int = 0
    epoch: int = -1
    best_dice: float = float("-inf")
    best_epoch: int = -1
    version: int = FORMAT_VERSION

    @classmethod
    def from_store(cls, cfg: RunConfig, store: ParamStore, **meta) -> "Checkpoint":
        return cls(
            cfg=cfg,
            params={k: p.data.copy() for k, p in store.items()},
            exp_avg={k: v.copy() for k, v in store.exp_avg.items()},
            exp_avg_sq={k: v.copy() for k, v in store.exp_avg_sq.items()},
            step=store.step,
            **meta,
        )

    def restore(self, store: ParamStore) -> None:
        if set(self.params) != set(store.params):
            missing = sorted(set(store.params) ^ set(self.params))
            raise CheckpointError(f"checkpoint parameters do not match the model: {missing[:5]}")
        for k, p in store.items():
            if self.params[k].shape != p.shape:
                raise CheckpointError(f"shape mismatch for {k}: {self.params[k].shape} vs {p.shape}")
            p.data = self.params[k].copy()
            store.exp_avg[k] = self.exp_avg[k].copy()
            store.exp_avg_sq[k] = self.exp_avg_sq[k].copy()
        store.step = self.step


def save(ckpt: Checkpoint, path) -> None:
    records, index, offset = [], [], 0
    for group, tensors in (("param", ckpt.params), ("exp_avg", ckpt.exp_avg), ("exp_avg_sq", ckpt.exp_avg_sq)):
        for name in sorted(tensors):
            blob = tensor_to_bytes(tensors[name])
            index.append(f"tensor={group}/{name} {offset} {len(blob)}")
            records.append(blob)
            offset += len(blob)
    lines = [
        MAGIC,
        f"version={ckpt.version}",
        f"step={ckpt.step}",
        f"epoch={ckpt.epoch}",
        f"best_dice={float(ckpt.best_dice).hex()}",
        f"best_epoch={ckpt.best_epoch}",
    ]
    lines += [f"config.{k}={v}" for k, v in config_mod.to_items(ckpt.cfg)]
    lines += index
    lines.append("end")
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode())
        for blob in records:
            fh.write(blob)
    tmp.replace(path)


def load(path) -> Checkpoint:
    with open(path, "rb") as fh:
        raw = fh.read()
    head_end = raw.find(b"\nend\n")
    if not raw.startswith(MAGIC.encode()) or head_end < 0:
        raise CheckpointError(f"{path} is not a MIST checkpoint")
    lines = raw[:head_end].decode().splitlines()[1:]
    body = raw[head_end + len(b"\nend\n") :]
    meta, cfg_lines, groups = {}, [], {"param": {}, "exp_avg": {}, "exp_avg_sq": {}}
    for line in lines:
        key, value = line.split("=", 1)
        if key.startswith("config."):
            cfg_lines.append(f"{key[len('config.'):]}={value}")
        elif key == "tensor":
            name, off, n = value.rsplit(" ", 2)
            group, pname = name.split("/", 1)
            off, n = int(off), int(n)
            groups[group][pname] = tensor_from_bytes(body[off : off + n])
        else:
            meta[key] = value
    version = int(meta.get("version", -1))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        cfg = config_mod.loads("\n".join(cfg_lines))
    except config_mod.ConfigError as exc:
        raise CheckpointError(f"checkpoint config is incompatible: {exc}") from None
    return Checkpoint(
        cfg=cfg,
        params=groups["param"],
        exp_avg=groups["exp_avg"],
        exp_avg_sq=groups["exp_avg_sq"],
        step=int(meta["step"]),
        epoch=int(meta["epoch"]),
        best_dice=float.fromhex(meta["best_dice"]),
        best_epoch=int(meta["best_epoch"]),
        version=version,
    )
