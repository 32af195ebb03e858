"""Weight files: ``manifest.json`` plus one concatenated little-endian blob."""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "manifest.json"


def save_weights(directory, arrays: dict[str, np.ndarray], meta: dict | None = None, dtype="<f8") -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    layout, offset = [], 0
    with open(directory / WEIGHTS_FILE, "wb") as fh:
        for name, arr in arrays.items():
            data = np.ascontiguousarray(arr, dtype=dtype)
            fh.write(data.tobytes())
            layout.append({"name": name, "shape": list(arr.shape), "offset": offset})
            offset += data.nbytes
    manifest = {"dtype": np.dtype(dtype).str, "tensors": layout, **(meta or {})}
    with open(directory / MANIFEST_FILE, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return directory


def load_weights(directory) -> tuple[dict[str, np.ndarray], dict]:
    directory = Path(directory)
    manifest = json.loads((directory / MANIFEST_FILE).read_text())
    blob = (directory / WEIGHTS_FILE).read_bytes()
    dtype = np.dtype(manifest["dtype"])
    arrays = {}
    for t in manifest["tensors"]:
        n = int(np.prod(t["shape"], dtype=np.int64))
        arrays[t["name"]] = np.frombuffer(blob, dtype=dtype, count=n, offset=t["offset"]).astype(np.float64).reshape(t["shape"])
    return arrays, manifest
