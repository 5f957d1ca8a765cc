"""Single-file checkpoint archives.

A checkpoint is a zip holding `header.json` plus one raw blob per parameter
under `params/`.  Blobs are little-endian 32-bit floats; shapes and order
live in the header, so files are readable without torch.  The header carries
a format tag and version for forward compatibility.
"""

from __future__ import annotations

import dataclasses
import io
import json
import zipfile
from pathlib import Path

import numpy as np
import torch

FORMAT_TAG = "vid2game-checkpoint"
FORMAT_VERSION = 1


@dataclasses.dataclass
class Checkpoint:
    kind: str                      # "p2p" | "p2f"
    spec: dict                     # model architecture description
    params: dict[str, np.ndarray]  # name -> float32 array
    extra: dict                    # training statistics, resolution, etc.


def save_checkpoint(path, kind: str, spec: dict, params: dict[str, torch.Tensor | np.ndarray],
                    extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": FORMAT_TAG,
        "version": FORMAT_VERSION,
        "kind": kind,
        "spec": spec,
        "extra": extra or {},
        "params": {},
    }
    blobs = {}
    for name, value in params.items():
        arr = value.detach().cpu().numpy() if isinstance(value, torch.Tensor) else np.asarray(value)
        arr = arr.astype("<f4")
        header["params"][name] = {"shape": list(arr.shape)}
        blobs[name] = arr.tobytes()
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr("header.json", json.dumps(header, indent=2))
        for name, blob in blobs.items():
            zf.writestr(f"params/{name}.bin", blob)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    with zipfile.ZipFile(path, "r") as zf:
        header = json.loads(zf.read("header.json"))
        if header.get("format") != FORMAT_TAG:
            raise ValueError(f"{path} is not a {FORMAT_TAG} archive")
        if header.get("version") != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        params = {}
        for name, meta in header["params"].items():
            raw = np.frombuffer(zf.read(f"params/{name}.bin"), dtype="<f4")
            params[name] = raw.reshape(meta["shape"]).copy()
    return Checkpoint(kind=header["kind"], spec=header["spec"],
                      params=params, extra=header["extra"])


def state_dict_to_params(state_dict: dict[str, torch.Tensor]) -> dict[str, torch.Tensor]:
    return {name: tensor for name, tensor in state_dict.items()}


def params_to_state_dict(params: dict[str, np.ndarray]) -> dict[str, torch.Tensor]:
    return {name: torch.from_numpy(np.array(arr, dtype=np.float32)) for name, arr in params.items()}
