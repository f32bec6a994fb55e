"""Deterministic checkpoint container.

A checkpoint is a JSON header (format version, user metadata, array
directory) followed by raw little-endian array bytes.  Unlike zip-based
formats it contains no timestamps, so identical state always produces
identical bytes - required for the pipeline's bitwise-rerun guarantee.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch

MAGIC = b"SGCKPT\n"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: Path, arrays: dict[str, np.ndarray], meta: dict) -> None:
    directory = []
    offset = 0
    blobs = []
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        buf = arr.tobytes()
        directory.append({
            "name": name,
            "dtype": str(arr.dtype),
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(buf),
        })
        blobs.append(buf)
        offset += len(buf)
    header = json.dumps(
        {"format_version": FORMAT_VERSION, "meta": meta, "arrays": directory},
        sort_keys=True,
    ).encode()
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(len(header).to_bytes(8, "little"))
        f.write(header)
        for buf in blobs:
            f.write(buf)


def load_checkpoint(path: Path) -> tuple[dict[str, np.ndarray], dict]:
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path} is not a simgrasp checkpoint")
    n = int.from_bytes(data[len(MAGIC):len(MAGIC) + 8], "little")
    header = json.loads(data[len(MAGIC) + 8:len(MAGIC) + 8 + n])
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format {header.get('format_version')}")
    base = len(MAGIC) + 8 + n
    arrays = {}
    for entry in header["arrays"]:
        start = base + entry["offset"]
        arr = np.frombuffer(data[start:start + entry["nbytes"]], dtype=entry["dtype"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return arrays, header["meta"]


def module_state_arrays(module: torch.nn.Module, prefix: str = "") -> dict[str, np.ndarray]:
    return {prefix + k: v.detach().cpu().numpy() for k, v in module.state_dict().items()}


def load_module_state(module: torch.nn.Module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    state = {}
    for k, v in module.state_dict().items():
        key = prefix + k
        if key not in arrays:
            raise CheckpointError(f"checkpoint missing parameter {key}")
        state[k] = torch.from_numpy(np.ascontiguousarray(arrays[key])).to(v.dtype)
    module.load_state_dict(state)


def optimizer_state_arrays(opt: torch.optim.Optimizer, prefix: str) -> dict[str, np.ndarray]:
    """Flatten Adam state (step/exp_avg/exp_avg_sq per parameter index)."""
    out = {}
    for group_idx, group in enumerate(opt.param_groups):
        for p_idx, p in enumerate(group["params"]):
            state = opt.state.get(p, {})
            for key, val in state.items():
                name = f"{prefix}{group_idx}.{p_idx}.{key}"
                if torch.is_tensor(val):
                    out[name] = val.detach().cpu().numpy()
                else:
                    out[name] = np.asarray(val)
    return out


def load_optimizer_state(opt: torch.optim.Optimizer, arrays: dict[str, np.ndarray], prefix: str) -> None:
    for group_idx, group in enumerate(opt.param_groups):
        for p_idx, p in enumerate(group["params"]):
            keys = [k for k in arrays if k.startswith(f"{prefix}{group_idx}.{p_idx}.")]
            if not keys:
                continue
            state = {}
            for k in keys:
                field = k.rsplit(".", 1)[1]
                arr = arrays[k]
                if field == "step":
                    state[field] = torch.tensor(float(arr.reshape(-1)[0]))
                else:
                    state[field] = torch.from_numpy(np.ascontiguousarray(arr)).to(p.dtype)
            opt.state[p] = state
