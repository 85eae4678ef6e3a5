"""On-disk container: text manifest header plus a flat little-endian payload.

Layout (all header lines are UTF-8, newline-terminated):

    raglet-container 1
    meta <key> <json>
    array <name> <dtype> <shape-json> <offset> <nbytes>
    ...
    end
    <payload bytes>

`meta` values are JSON; arrays are appended to the payload in header order.
Writing the same state twice produces byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "raglet-container 1"
_DTYPES = {"float32": "<f4", "float64": "<f8"}


def write_container(path: str | Path, meta: dict, arrays: dict[str, np.ndarray]) -> None:
    lines = [MAGIC]
    for key, value in meta.items():
        lines.append(f"meta {key} {json.dumps(value, sort_keys=True)}")
    offset = 0
    payload = []
    for name, arr in arrays.items():
        dtype = str(arr.dtype)
        if dtype not in _DTYPES:
            raise CheckpointError(f"unsupported array dtype {dtype} for {name}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[dtype]).tobytes()
        lines.append(f"array {name} {dtype} {json.dumps(list(arr.shape))} {offset} {len(raw)}")
        payload.append(raw)
        offset += len(raw)
    lines.append("end")
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\n").encode("utf-8"))
        for raw in payload:
            f.write(raw)


def read_container(path: str | Path) -> tuple[dict, dict[str, np.ndarray]]:
    try:
        blob = Path(path).read_bytes()
    except OSError as e:
        raise CheckpointError(f"cannot read {path}: {e}") from e
    meta: dict = {}
    specs: list[tuple[str, str, list[int], int, int]] = []
    pos = 0
    saw_magic = saw_end = False
    while pos < len(blob):
        nl = blob.find(b"\n", pos)
        if nl < 0:
            break
        line = blob[pos:nl].decode("utf-8", errors="replace")
        pos = nl + 1
        if not saw_magic:
            if line != MAGIC:
                raise CheckpointError(f"{path}: bad magic line {line!r}")
            saw_magic = True
            continue
        if line == "end":
            saw_end = True
            break
        kind, _, rest = line.partition(" ")
        if kind == "meta":
            key, _, value = rest.partition(" ")
            try:
                meta[key] = json.loads(value)
            except json.JSONDecodeError as e:
                raise CheckpointError(f"{path}: bad meta line for {key}: {e}") from e
        elif kind == "array":
            try:
                name, dtype, shape_json, off, nbytes = rest.split(" ")
                specs.append((name, dtype, json.loads(shape_json), int(off), int(nbytes)))
            except (ValueError, json.JSONDecodeError) as e:
                raise CheckpointError(f"{path}: bad array line {line!r}") from e
        else:
            raise CheckpointError(f"{path}: unknown header line {line!r}")
    if not saw_end:
        raise CheckpointError(f"{path}: truncated header (no end marker)")
    payload = blob[pos:]
    arrays: dict[str, np.ndarray] = {}
    for name, dtype, shape, off, nbytes in specs:
        if dtype not in _DTYPES:
            raise CheckpointError(f"{path}: array {name} has unsupported dtype {dtype}")
        raw = payload[off:off + nbytes]
        if len(raw) != nbytes:
            raise CheckpointError(f"{path}: payload truncated for array {name}")
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype]).astype(dtype).reshape(shape)
        arrays[name] = arr
    return meta, arrays


def prng_state_to_json(bit_generator_state: dict) -> dict:
    """Philox state dict -> JSON-safe nested structure (exact)."""
    def conv(x):
        if isinstance(x, np.ndarray):
            return {"__ndarray__": [int(v) for v in x], "dtype": str(x.dtype)}
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, (np.integer,)):
            return int(x)
        return x
    return conv(bit_generator_state)


def prng_state_from_json(obj: dict) -> dict:
    def conv(x):
        if isinstance(x, dict) and "__ndarray__" in x:
            return np.array(x["__ndarray__"], dtype=x["dtype"])
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        return x
    return conv(obj)
