"""On-disk tensor format (".ten").

One UTF-8 JSON line {"dtype", "shape"} terminated by '\\n', followed by the
raw array values as little-endian IEEE-754 (32- or 64-bit as tagged),
row-major. Truncated or oversized payloads are integrity errors.
"""

import json
import os

import numpy as np

_DTYPES = {"float32": "<f4", "float64": "<f8"}


class SerializationError(ValueError):
    pass


def save_tensor(path, arr):
    arr = np.asarray(arr)
    if arr.dtype == np.float32:
        tag = "float32"
    elif arr.dtype == np.float64:
        tag = "float64"
    else:
        raise SerializationError(f"unsupported dtype {arr.dtype} for {path}")
    header = json.dumps({"dtype": tag, "shape": list(arr.shape)}) + "\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(arr).astype(_DTYPES[tag]).tobytes())


def load_tensor(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise SerializationError(f"{path}: missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
        tag = header["dtype"]
        shape = tuple(int(s) for s in header["shape"])
    except (ValueError, KeyError, TypeError) as e:
        raise SerializationError(f"{path}: malformed header: {e}") from e
    if tag not in _DTYPES:
        raise SerializationError(f"{path}: unknown dtype tag {tag!r}")
    payload = raw[nl + 1:]
    itemsize = 4 if tag == "float32" else 8
    expected = int(np.prod(shape, dtype=np.int64)) * itemsize
    if len(payload) != expected:
        raise SerializationError(
            f"{path}: payload is {len(payload)} bytes, expected {expected} for shape {shape}")
    arr = np.frombuffer(payload, dtype=_DTYPES[tag]).reshape(shape)
    return np.ascontiguousarray(arr.astype(tag))


def save_tensor_dir(dirpath, named_arrays):
    """Write {name: ndarray} as name.ten files (dots in names are kept)."""
    os.makedirs(dirpath, exist_ok=True)
    for name, arr in named_arrays.items():
        save_tensor(os.path.join(dirpath, name + ".ten"), arr)


def load_tensor_dir(dirpath):
    out = {}
    for fn in sorted(os.listdir(dirpath)):
        if fn.endswith(".ten"):
            out[fn[:-4]] = load_tensor(os.path.join(dirpath, fn))
    return out
