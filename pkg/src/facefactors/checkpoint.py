"""Byte-stable checkpoint container.

Layout: magic, 8-byte little-endian header length, canonical JSON header
(stage tag, config hash, step, blob table, optimizer metadata), then raw
little-endian blob bytes in header order. Saving the result of a load
reproduces the file byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch

from .errors import CheckpointMismatchError, DataError

MAGIC = b"FFCKPT1\n"


def save_checkpoint(path, stage: str, config_hash: str, step: int,
                    blobs: Dict[str, np.ndarray], meta: Optional[dict] = None) -> None:
    names = sorted(blobs)
    table = []
    offset = 0
    payload = []
    for name in names:
        arr = np.asarray(blobs[name])
        if arr.ndim > 0 and not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        data = arr.tobytes()
        table.append({
            "name": name,
            "shape": list(arr.shape),
            "dtype": arr.dtype.str,
            "offset": offset,
            "nbytes": len(data),
        })
        payload.append(data)
        offset += len(data)
    digest = hashlib.sha256()
    for data in payload:
        digest.update(data)
    header = {
        "stage": stage,
        "config_hash": config_hash,
        "step": int(step),
        "meta": meta or {},
        "payload_sha256": digest.hexdigest(),
        "blobs": table,
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for data in payload:
            fh.write(data)


def load_checkpoint(path, expect_config_hash: Optional[str] = None
                    ) -> Tuple[dict, Dict[str, np.ndarray]]:
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise DataError(f"not a checkpoint file: {path}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen))
        base = fh.tell()
        blobs = {}
        digest = hashlib.sha256()
        for entry in header["blobs"]:
            fh.seek(base + entry["offset"])
            data = fh.read(entry["nbytes"])
            if len(data) != entry["nbytes"]:
                raise CheckpointMismatchError(f"truncated checkpoint: {path}")
            digest.update(data)
            arr = np.frombuffer(data, dtype=np.dtype(entry["dtype"]))
            blobs[entry["name"]] = arr.reshape(entry["shape"]).copy()
    if digest.hexdigest() != header["payload_sha256"]:
        raise CheckpointMismatchError(f"checkpoint payload hash mismatch: {path}")
    if expect_config_hash is not None and header["config_hash"] != expect_config_hash:
        raise CheckpointMismatchError(
            f"checkpoint config hash {header['config_hash'][:12]} does not match "
            f"expected {expect_config_hash[:12]}")
    return header, blobs


def model_blobs(model: torch.nn.Module, prefix: str = "model") -> Dict[str, np.ndarray]:
    out = {}
    for name, tensor in model.state_dict().items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy()
    return out


def load_model_blobs(model: torch.nn.Module, blobs: Dict[str, np.ndarray],
                     prefix: str = "model") -> None:
    state = {}
    plen = len(prefix) + 1
    for key, arr in blobs.items():
        if key.startswith(prefix + "/"):
            state[key[plen:]] = torch.from_numpy(np.ascontiguousarray(arr))
    model.load_state_dict(state)


def optimizer_blobs(opt: torch.optim.Optimizer, prefix: str) -> Tuple[Dict[str, np.ndarray], dict]:
    sd = opt.state_dict()
    blobs = {}
    for idx, state in sd["state"].items():
        for key, val in state.items():
            if torch.is_tensor(val):
                blobs[f"{prefix}/{idx}/{key}"] = val.detach().cpu().numpy()
            else:
                blobs[f"{prefix}/{idx}/{key}"] = np.array(val)
    meta = {"param_groups": [
        {k: v for k, v in g.items() if k != "params"} | {"params": g["params"]}
        for g in sd["param_groups"]
    ]}
    return blobs, meta


def load_optimizer_blobs(opt: torch.optim.Optimizer, blobs: Dict[str, np.ndarray],
                         meta: dict, prefix: str) -> None:
    state: Dict[int, dict] = {}
    plen = len(prefix) + 1
    for key, arr in blobs.items():
        if not key.startswith(prefix + "/"):
            continue
        idx_str, field = key[plen:].split("/", 1)
        entry = state.setdefault(int(idx_str), {})
        if arr.ndim == 0:
            entry[field] = torch.tensor(arr.item())
        else:
            entry[field] = torch.from_numpy(np.ascontiguousarray(arr))
    opt.load_state_dict({"state": state, "param_groups": meta["param_groups"]})
