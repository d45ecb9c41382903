"""Checkpoint files: one line of JSON, a newline, then a little-endian
float32 blob holding every array in header order."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ConfigurationError, ParseError
from .nn import ParamStore


def save_checkpoint(path, stores: dict[str, ParamStore], header: dict) -> Path:
    """Write one or more named parameter stores under a shared header.

    ``stores`` maps a role (e.g. ``"params"``, ``"ema"``) to its ParamStore.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    layout = []
    blobs = []
    for role, store in stores.items():
        for name, arr in store.items():
            layout.append([role, name, list(arr.shape)])
            blobs.append(np.asarray(arr, dtype="<f4").ravel())
    head = dict(header)
    head["layout"] = layout
    line = json.dumps(head, sort_keys=True, separators=(",", ":"))
    blob = np.concatenate(blobs).tobytes() if blobs else b""
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8"))
        fh.write(b"\n")
        fh.write(blob)
    return path


def load_checkpoint(path) -> tuple[dict[str, ParamStore], dict]:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    cut = raw.find(b"\n")
    if cut < 0:
        raise ParseError(f"{path}: missing header terminator", line=1)
    try:
        header = json.loads(raw[:cut].decode("utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: bad header JSON ({exc.msg})", line=1) from None
    data = np.frombuffer(raw[cut + 1 :], dtype="<f4")
    stores: dict[str, dict] = {}
    pos = 0
    for role, name, shape in header.pop("layout", []):
        n = int(np.prod(shape)) if shape else 1
        if pos + n > data.size:
            raise ParseError(f"{path}: blob truncated at {role}/{name}")
        stores.setdefault(role, {})[name] = data[pos : pos + n].astype(np.float64).reshape(shape)
        pos += n
    if pos != data.size:
        raise ParseError(f"{path}: {data.size - pos} trailing values in blob")
    return {role: ParamStore(e) for role, e in stores.items()}, header
