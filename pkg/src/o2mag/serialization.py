"""Binary tensor blobs and the named-tensor container used for checkpoints.

Single tensor blob layout (little-endian):

    magic "TNSR" | version u32 | dtype code u8 | ndim u8 | dims u64 * ndim | payload

dtype code 0 is float32; nothing else is written today. A container file is a
plain-text key=value header followed by a count and a sequence of named
blobs, and serves both model checkpoints and cached prompt embeddings.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

TNSR_MAGIC = b"TNSR"
TNSR_VERSION = 1
MAP_MAGIC = b"TMAP"
_DTYPES = {0: np.dtype("<f4")}
_DTYPE_CODES = {np.dtype("float32"): 0}


def write_tensor(fh, arr: np.ndarray) -> None:
    arr = np.ascontiguousarray(arr)
    code = _DTYPE_CODES.get(arr.dtype)
    if code is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    fh.write(TNSR_MAGIC)
    fh.write(struct.pack("<IBB", TNSR_VERSION, code, arr.ndim))
    fh.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    fh.write(arr.astype("<f4", copy=False).tobytes())


def read_tensor(fh) -> np.ndarray:
    magic = fh.read(4)
    if magic != TNSR_MAGIC:
        raise ValueError(f"bad tensor magic {magic!r}")
    version, code, ndim = struct.unpack("<IBB", fh.read(6))
    if version != TNSR_VERSION:
        raise ValueError(f"unsupported tensor version {version}")
    dims = struct.unpack(f"<{ndim}Q", fh.read(8 * ndim)) if ndim else ()
    count = int(np.prod(dims)) if dims else 1
    dt = _DTYPES[code]
    payload = fh.read(count * dt.itemsize)
    arr = np.frombuffer(payload, dtype=dt, count=count).reshape(dims)
    return arr.astype(np.float32)


def save_tensor_map(path, header: dict, tensors: dict[str, np.ndarray]) -> None:
    """Write a key=value header plus named tensor blobs to one file."""
    path = Path(path)
    lines = []
    for key, value in header.items():
        key, value = str(key), str(value)
        if "=" in key or "\n" in key or "\n" in value:
            raise ValueError(f"header entry not representable: {key!r}")
        lines.append(f"{key}={value}\n")
    head = "".join(lines).encode("utf-8")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAP_MAGIC)
        fh.write(struct.pack("<I", len(head)))
        fh.write(head)
        fh.write(struct.pack("<I", len(tensors)))
        for name, arr in tensors.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            write_tensor(fh, arr)


def load_tensor_map(path) -> tuple[dict, dict[str, np.ndarray]]:
    with open(path, "rb") as fh:
        if fh.read(4) != MAP_MAGIC:
            raise ValueError(f"{path}: not a tensor-map file")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = {}
        for line in fh.read(hlen).decode("utf-8").splitlines():
            if line:
                key, _, value = line.partition("=")
                header[key] = value
        (count,) = struct.unpack("<I", fh.read(4))
        tensors = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", fh.read(2))
            name = fh.read(nlen).decode("utf-8")
            tensors[name] = read_tensor(fh)
    return header, tensors
