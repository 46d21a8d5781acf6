"""Flat tensor-archive checkpoint format.

Layout (byte-exact, so alternate implementations can read it):

  line 1: UTF-8 JSON header ending in "\\n":
          {"format_version": 1, "model_config": {...}, ...extra keys}
  line 2: UTF-8 JSON index ending in "\\n":
          [{"name": str, "shape": [int, ...], "offset": int, "nbytes": int}, ...]
  body:   the tensors' raw bytes, concatenated in index order;
          row-major float64, little-endian. Offsets are relative to the
          first body byte.

Extra header keys in use: "adapter_config" on adapter-only checkpoints and
"merged_prompt" (domain/slot/fingerprint) on merged checkpoints.
"""

from __future__ import annotations

import json

import numpy as np

FORMAT_VERSION = 1


def save_checkpoint(path, tensors: dict[str, np.ndarray],
                    model_config: dict, extra: dict | None = None) -> None:
    header = {"format_version": FORMAT_VERSION, "model_config": model_config}
    if extra:
        header.update(extra)
    index = []
    offset = 0
    blobs = []
    for name, arr in tensors.items():
        data = np.asarray(arr, dtype=np.float64)
        raw = data.astype("<f8").tobytes()  # tobytes emits row-major order
        index.append({"name": name, "shape": list(data.shape),
                      "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(json.dumps(index).encode("utf-8") + b"\n")
        for raw in blobs:
            fh.write(raw)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    """Returns (name -> float64 array, header dict)."""
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ValueError(
                f"unsupported checkpoint format_version {header.get('format_version')}")
        index = json.loads(fh.readline().decode("utf-8"))
        body = fh.read()
    tensors = {}
    for entry in index:
        raw = body[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64)
        tensors[entry["name"]] = arr.reshape(entry["shape"])
    return tensors, header
