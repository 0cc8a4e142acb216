"""JSON parameter archive.

Layout::

    {"format": "mammovl-archive", "version": 1, "kind": "...", ...payload}

Tensors are stored as ``{"__tensor__": {"shape": [...], "dtype": "float32",
"data": [flat row-major values]}}``.  Dicts with non-string keys (optimizer
state) are stored as ``{"__items__": [[key, value], ...]}``.  Floats are
written with ``repr`` precision, so float32/float64 values round-trip
bit-exactly.
"""

from __future__ import annotations

import json
import os
from pathlib import Path

import torch

FORMAT = "mammovl-archive"
VERSION = 1


def encode(obj):
    if isinstance(obj, torch.Tensor):
        t = obj.detach().cpu()
        return {"__tensor__": {"shape": list(t.shape), "dtype": str(t.dtype).removeprefix("torch."),
                               "data": t.reshape(-1).tolist()}}
    if isinstance(obj, dict):
        if all(isinstance(k, str) for k in obj):
            return {k: encode(v) for k, v in obj.items()}
        return {"__items__": [[k, encode(v)] for k, v in obj.items()]}
    if isinstance(obj, (list, tuple)):
        return [encode(v) for v in obj]
    return obj


def decode(obj):
    if isinstance(obj, dict):
        if "__tensor__" in obj:
            r = obj["__tensor__"]
            return torch.tensor(r["data"], dtype=getattr(torch, r["dtype"])).reshape(r["shape"])
        if "__items__" in obj:
            return {k: decode(v) for k, v in obj["__items__"]}
        return {k: decode(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [decode(v) for v in obj]
    return obj


def save_archive(path, kind: str, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"format": FORMAT, "version": VERSION, "kind": kind, **encode(payload)}
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        json.dump(doc, fh)
    os.replace(tmp, path)
    return path


def load_archive(path, kind: str | None = None) -> dict:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("format") != FORMAT:
        raise ValueError(f"{path} is not a {FORMAT} file")
    if doc.get("version") != VERSION:
        raise ValueError(f"unsupported archive version {doc.get('version')}")
    if kind is not None and doc.get("kind") != kind:
        raise ValueError(f"{path} holds a {doc.get('kind')!r} archive, expected {kind!r}")
    return decode({k: v for k, v in doc.items() if k not in ("format", "version", "kind")})
