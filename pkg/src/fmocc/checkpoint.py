"""Versioned checkpoint container.

Layout (little-endian): magic ``FMCK``, u16 version, u32 header length, a JSON
header with sorted keys, then every tensor as raw f64 in header order.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .autodiff.optim import AdamWState
from .errors import CheckpointError
from .training import FmoccModel, TrainState

MAGIC = b"FMCK"
VERSION = 1
_PREFIX = struct.Struct("<4sHI")


def _tensor_table(model: FmoccModel, state: TrainState) -> dict[str, np.ndarray]:
    table = {f"param/{k}": p.data for k, p in model.named_parameters().items()}
    opt = state.optimizer
    for k in sorted(opt.first_moment):
        table[f"adam_m/{k}"] = opt.first_moment[k]
        table[f"adam_v/{k}"] = opt.second_moment[k]
    return table


def checkpoint_bytes(model: FmoccModel, state: TrainState, config_hash: str) -> bytes:
    table = _tensor_table(model, state)
    entries, offset = [], 0
    for name in sorted(table):
        arr = table[name]
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    opt = state.optimizer
    header = {
        "config_hash": config_hash,
        "train_state": {
            "E": state.E,
            "steps_per_epoch": state.steps_per_epoch,
            "seed": state.seed,
            "step": state.step,
            "history": [list(h) for h in state.history],
        },
        "optimizer": {
            "lr": opt.lr,
            "weight_decay": opt.weight_decay,
            "beta1": opt.beta1,
            "beta2": opt.beta2,
            "eps": opt.eps,
            "step_count": opt.step_count,
        },
        "tensors": entries,
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    payload = b"".join(
        np.ascontiguousarray(table[e["name"]], dtype="<f8").tobytes() for e in entries
    )
    return _PREFIX.pack(MAGIC, VERSION, len(head)) + head + payload


def save_checkpoint(path, model: FmoccModel, state: TrainState, config_hash: str) -> None:
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(checkpoint_bytes(model, state, config_hash))
    os.replace(tmp, path)


def load_checkpoint(path, model: FmoccModel, config_hash: str | None = None) -> TrainState:
    """Restore parameters into ``model`` and return the saved training state.

    When ``config_hash`` is given it must equal the hash stored in the file.
    """
    buf = Path(path).read_bytes()
    if len(buf) < _PREFIX.size or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    _, version, hlen = _PREFIX.unpack_from(buf)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(buf[_PREFIX.size: _PREFIX.size + hlen])
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    if config_hash is not None and header["config_hash"] != config_hash:
        raise CheckpointError(
            f"{path}: checkpoint was trained with config {header['config_hash'][:12]}, "
            f"current config is {config_hash[:12]}"
        )
    base = _PREFIX.size + hlen
    arrays = {}
    for e in header["tensors"]:
        n = int(np.prod(e["shape"], dtype=np.int64))
        start = base + e["offset"]
        if start + 8 * n > len(buf):
            raise CheckpointError(f"{path}: truncated payload at tensor {e['name']}")
        arrays[e["name"]] = np.frombuffer(buf, "<f8", n, start).astype(np.float64).reshape(
            e["shape"]
        )

    params = model.named_parameters()
    saved = {k[len("param/"):] for k in arrays if k.startswith("param/")}
    if saved != set(params):
        missing = sorted(set(params) - saved)
        extra = sorted(saved - set(params))
        raise CheckpointError(f"{path}: parameter mismatch (missing {missing}, unexpected {extra})")
    for k, p in params.items():
        arr = arrays[f"param/{k}"]
        if arr.shape != p.shape:
            raise CheckpointError(f"{path}: {k} has shape {arr.shape}, model expects {p.shape}")
        p.data = arr

    o = header["optimizer"]
    opt = AdamWState(lr=o["lr"], weight_decay=o["weight_decay"], beta1=o["beta1"],
                     beta2=o["beta2"], eps=o["eps"], step_count=o["step_count"])
    for name, arr in arrays.items():
        if name.startswith("adam_m/"):
            opt.first_moment[name[len("adam_m/"):]] = arr
        elif name.startswith("adam_v/"):
            opt.second_moment[name[len("adam_v/"):]] = arr
    ts = header["train_state"]
    return TrainState(
        E=ts["E"],
        steps_per_epoch=ts["steps_per_epoch"],
        seed=ts["seed"],
        step=ts["step"],
        optimizer=opt,
        history=[tuple(h) for h in ts["history"]],
    )


def read_config_hash(path) -> str:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    _, _, hlen = _PREFIX.unpack_from(buf)
    return json.loads(buf[_PREFIX.size: _PREFIX.size + hlen])["config_hash"]
