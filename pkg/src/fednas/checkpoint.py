"""Deterministic binary serialization for supernet checkpoints and derived nets.

Layout: magic, version u32, header-length u64, canonical JSON header, then
raw little-endian float64 array bytes in the order the header lists them.
No timestamps or platform fields, so identical state serializes to identical
bytes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError
from .supernet import ArchParams, NormalNet, ParamSet, SuperNetModel

_MAGIC = b"FNCK"
_VERSION = 1


@dataclass
class Checkpoint:
    model: SuperNetModel
    params: ParamSet
    arch: ArchParams
    round: int = 0
    seed: int = 0
    config_hash: str = ""
    opt_state: dict[str, np.ndarray] = field(default_factory=dict)


def _write_container(path, header: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    header = dict(header)
    header["arrays"] = [{"name": n, "shape": list(a.shape)} for n, a in arrays]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<I", _VERSION))
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def _read_container(path):
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise CheckpointError(f"{path} is not a checkpoint file")
        (version,) = struct.unpack("<I", fh.read(4))
        if version != _VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        try:
            header = json.loads(fh.read(hlen).decode())
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise CheckpointError(f"corrupt checkpoint header in {path}") from exc
        arrays = {}
        for spec in header["arrays"]:
            n_vals = int(np.prod(spec["shape"])) if spec["shape"] else 1
            raw = fh.read(8 * n_vals)
            if len(raw) != 8 * n_vals:
                raise CheckpointError(f"truncated checkpoint {path}")
            arrays[spec["name"]] = np.frombuffer(raw, dtype="<f8").reshape(spec["shape"]).copy()
    return header, arrays


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    arrays = [(f"param:{k}", v) for k, v in ckpt.params.items()]
    arrays += [(f"alpha:{i}", a) for i, a in enumerate(ckpt.arch.logits)]
    arrays += [(f"opt:{k}", v) for k, v in sorted(ckpt.opt_state.items())]
    header = {
        "kind": "checkpoint",
        "round": ckpt.round,
        "seed": ckpt.seed,
        "config_hash": ckpt.config_hash,
        "model": ckpt.model.to_dict(),
    }
    _write_container(path, header, arrays)


def load_checkpoint(path) -> Checkpoint:
    header, arrays = _read_container(path)
    if header.get("kind") != "checkpoint":
        raise CheckpointError(f"{path} is not a supernet checkpoint")
    model = SuperNetModel.from_dict(header["model"])
    params = ParamSet()
    for key in model.param_registry():
        if f"param:{key}" not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {key}")
        params[key] = arrays[f"param:{key}"]
    logits = []
    for i in range(model.num_layers):
        if f"alpha:{i}" not in arrays:
            raise CheckpointError(f"checkpoint missing logits for layer {i}")
        logits.append(arrays[f"alpha:{i}"])
    opt_state = {k[4:]: v for k, v in arrays.items() if k.startswith("opt:")}
    return Checkpoint(model=model, params=params, arch=ArchParams(logits),
                      round=header["round"], seed=header["seed"],
                      config_hash=header["config_hash"], opt_state=opt_state)


def save_normal_net(path, net: NormalNet, params: ParamSet, seed: int = 0,
                    config_hash: str = "") -> None:
    header = {"kind": "normalnet", "seed": seed, "config_hash": config_hash,
              "model": net.to_dict()}
    _write_container(path, header, [(f"param:{k}", v) for k, v in params.items()])


def load_normal_net(path):
    header, arrays = _read_container(path)
    if header.get("kind") != "normalnet":
        raise CheckpointError(f"{path} is not a derived-net file")
    net = NormalNet.from_dict(header["model"])
    params = ParamSet()
    for key in net.param_registry():
        if f"param:{key}" not in arrays:
            raise CheckpointError(f"derived-net file missing parameter {key}")
        params[key] = arrays[f"param:{key}"]
    return net, params, header


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
