"""Checkpoint container.

Layout: ``EZVCCKPT1\\n``, one JSON header line, then the tensors back to back as
little-endian float32.  The header holds the decoder and training configs,
the step counter, the optimizer's scalar hyperparameters and a table of
``{name, shape, offset}`` for every stored tensor.  Parameters are named
``param/<module path>``; AdamW moments ``optim/<module path>/<state key>``.
"""

from __future__ import annotations

import dataclasses
import json
import os
from pathlib import Path
from typing import Any

import numpy as np
import torch

from ..container import FLOAT_LE, read_header
from ..errors import ArtifactMissingError, FormatError
from .config import DecoderConfig, TrainConfig
from .model import UnitToMelDiT
from .train import make_optimizer

CKPT_MAGIC = b"EZVCCKPT1\n"
VERSION = 1


@dataclasses.dataclass
class Checkpoint:
    model: UnitToMelDiT
    optimizer: torch.optim.Optimizer | None
    step: int
    train_config: TrainConfig | None


def _config_to_dict(cfg) -> dict[str, Any]:
    return json.loads(json.dumps(dataclasses.asdict(cfg)))


def decoder_config_from_dict(d: dict[str, Any]) -> DecoderConfig:
    d = dict(d)
    if "mask_frac_range" in d:
        d["mask_frac_range"] = tuple(d["mask_frac_range"])
    return DecoderConfig(**d)


def save_checkpoint(
    path: str | os.PathLike,
    model: UnitToMelDiT,
    optimizer: torch.optim.Optimizer | None = None,
    step: int = 0,
    train_config: TrainConfig | None = None,
) -> None:
    tensors: list[tuple[str, np.ndarray]] = []
    names = {}
    for name, p in model.named_parameters():
        tensors.append((f"param/{name}", p.detach().cpu().numpy()))
        names[p] = name

    optim_meta = None
    if optimizer is not None:
        groups = []
        for g in optimizer.param_groups:
            groups.append({k: v for k, v in g.items() if k != "params" and isinstance(v, (int, float, bool, tuple, list, type(None)))})
        optim_meta = {"type": type(optimizer).__name__, "groups": groups}
        for p, st in optimizer.state.items():
            for key, val in sorted(st.items()):
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                tensors.append((f"optim/{names[p]}/{key}", arr))

    table, offset = [], 0
    for name, arr in tensors:
        nbytes = int(arr.size) * FLOAT_LE.itemsize
        table.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += nbytes

    header = {
        "version": VERSION,
        "config": _config_to_dict(model.config),
        "train_config": None if train_config is None else _config_to_dict(train_config),
        "step": int(step),
        "optimizer": optim_meta,
        "tensors": table,
        "payload_bytes": offset,
    }
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as f:
        f.write(CKPT_MAGIC)
        f.write(json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n")
        for _, arr in tensors:
            f.write(np.ascontiguousarray(arr, dtype=FLOAT_LE).tobytes())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike, *, with_optimizer: bool = True) -> Checkpoint:
    path = Path(path)
    if path.is_dir():
        path = path / "model.ezckpt"
    if not path.is_file():
        raise ArtifactMissingError(f"checkpoint not found: {path}")
    with open(path, "rb") as f:
        header = read_header(f, CKPT_MAGIC, path)
        payload = f.read()
    if header.get("version") != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {header.get('version')!r}")
    if len(payload) != header.get("payload_bytes"):
        raise FormatError(f"{path}: payload has {len(payload)} bytes, header declares {header.get('payload_bytes')}")

    arrays = {}
    for entry in header["tensors"]:
        count = int(np.prod(entry["shape"], dtype=np.int64))
        start = entry["offset"]
        end = start + count * FLOAT_LE.itemsize
        if end > len(payload):
            raise FormatError(f"{path}: tensor {entry['name']} runs past the payload")
        arrays[entry["name"]] = np.frombuffer(payload[start:end], dtype=FLOAT_LE).reshape(entry["shape"])

    config = decoder_config_from_dict(header["config"])
    model = UnitToMelDiT(config)
    state = {}
    for name, p in model.named_parameters():
        key = f"param/{name}"
        if key not in arrays:
            raise FormatError(f"{path}: missing parameter {name}")
        state[name] = torch.from_numpy(arrays[key].astype(np.float32))
    model.load_state_dict(state)
    model.eval()

    train_cfg = None
    if header.get("train_config"):
        train_cfg = TrainConfig(**header["train_config"])

    optimizer = None
    if with_optimizer and header.get("optimizer") is not None:
        optimizer = make_optimizer(model, train_cfg or TrainConfig())
        for group, saved in zip(optimizer.param_groups, header["optimizer"]["groups"]):
            for k, v in saved.items():
                group[k] = tuple(v) if isinstance(group.get(k), tuple) else v
        params = dict(model.named_parameters())
        for key, arr in arrays.items():
            if not key.startswith("optim/"):
                continue
            pname, _, skey = key[len("optim/"):].rpartition("/")
            optimizer.state[params[pname]][skey] = torch.from_numpy(arr.astype(np.float32))
    return Checkpoint(model, optimizer, int(header.get("step", 0)), train_cfg)
