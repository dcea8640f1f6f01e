"""JSON-header + raw float32 payload files.

Layout: one line of JSON terminated by ``\\n``, then little-endian IEEE-754
float32 values for every tensor listed in ``header["tensors"]``, in order.
Each entry records ``name``, ``shape``, ``offset`` (bytes from the start of
the payload) and ``count`` (elements). Checkpoints and precomputed feature
files share this framing.
"""

from __future__ import annotations

import json
from pathlib import Path
from typing import Mapping

import numpy as np

FORMAT_VERSION = 1
_LE_F32 = np.dtype("<f4")


class FramingError(ValueError):
    pass


def write_framed(path, header: Mapping, tensors: Mapping[str, np.ndarray]) -> None:
    table = []
    offset = 0
    payload = []
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype=_LE_F32)
        table.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        offset += arr.nbytes
        payload.append(arr.tobytes())
    full = {"format_version": FORMAT_VERSION, **header, "tensors": table}
    line = json.dumps(full, sort_keys=True, separators=(",", ":"))
    with open(path, "wb") as fh:
        fh.write(line.encode("utf-8") + b"\n")
        for chunk in payload:
            fh.write(chunk)


def read_framed(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    newline = raw.find(b"\n")
    if newline < 0:
        raise FramingError(f"{path}: missing header terminator")
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FramingError(f"{path}: malformed header: {exc}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise FramingError(f"{path}: unsupported format version {header.get('format_version')}")
    body = raw[newline + 1:]
    tensors = {}
    for entry in header.get("tensors", []):
        start, count = entry["offset"], entry["count"]
        end = start + count * 4
        if end > len(body):
            raise FramingError(f"{path}: tensor {entry['name']!r} runs past end of file")
        arr = np.frombuffer(body, dtype=_LE_F32, count=count, offset=start)
        tensors[entry["name"]] = arr.astype(np.float32).reshape(entry["shape"])
    return header, tensors


def write_features(path, frames: np.ndarray) -> None:
    """Store a ``[T, n_mels]`` log-Mel matrix."""
    frames = np.asarray(frames)
    if frames.ndim != 2:
        raise FramingError(f"feature matrix must be 2-D [T, n_mels], got {frames.shape}")
    write_framed(path, {"T": int(frames.shape[0]), "n_mels": int(frames.shape[1])}, {"frames": frames})


def read_features(path) -> np.ndarray:
    header, tensors = read_framed(path)
    frames = tensors.get("frames")
    if frames is None or frames.shape != (header["T"], header["n_mels"]):
        raise FramingError(f"{path}: feature payload does not match declared T/n_mels")
    return frames
