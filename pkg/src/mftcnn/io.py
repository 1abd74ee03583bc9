"""Tensor and dataset serialization.

Trajectory tensors ``(N, K, d)`` go to a columnar CSV (``sample, step,
coordinate, value``) or to a binary dump: a 16-byte little-endian header
(magic ``MFTC``, uint16 version, uint32 N, uint32 K, uint16 d) followed by
float64 values in C order.

Training datasets hold one record per ``(sample, step)`` with the fields
``(x, mean_x, B, u, mean_u)`` and optionally a provenance tag.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .exceptions import ContractViolation

MAGIC = b"MFTC"
VERSION = 1
HEADER = struct.Struct("<4sHIIH")
assert HEADER.size == 16


def _num(v) -> str:
    return format(float(v), ".17g")


def tensor_to_csv(tensor) -> str:
    t = np.asarray(tensor, float)
    if t.ndim != 3:
        raise ContractViolation(f"expected an (N, K, d) tensor, got shape {t.shape}")
    buf = io.StringIO()
    buf.write("sample,step,coordinate,value\n")
    for (i, k, c), v in np.ndenumerate(t):
        buf.write(f"{i},{k},{c},{_num(v)}\n")
    return buf.getvalue()


def tensor_from_csv(text: str) -> np.ndarray:
    rows = list(csv.DictReader(io.StringIO(text)))
    if not rows:
        return np.zeros((0, 0, 0))
    idx = np.array([[int(r["sample"]), int(r["step"]), int(r["coordinate"])] for r in rows])
    shape = tuple(idx.max(axis=0) + 1)
    out = np.full(shape, np.nan)
    out[idx[:, 0], idx[:, 1], idx[:, 2]] = [float(r["value"]) for r in rows]
    return out


def tensor_to_bytes(tensor) -> bytes:
    t = np.ascontiguousarray(tensor, dtype="<f8")
    if t.ndim != 3:
        raise ContractViolation(f"expected an (N, K, d) tensor, got shape {t.shape}")
    n, k, d = t.shape
    return HEADER.pack(MAGIC, VERSION, n, k, d) + t.tobytes()


def tensor_from_bytes(data: bytes, offset: int = 0):
    """Parse one tensor block; returns ``(tensor, next_offset)``."""
    if len(data) - offset < HEADER.size:
        raise ContractViolation("truncated header")
    magic, version, n, k, d = HEADER.unpack_from(data, offset)
    if magic != MAGIC:
        raise ContractViolation(f"bad magic {magic!r}")
    if version != VERSION:
        raise ContractViolation(f"unsupported version {version}")
    start = offset + HEADER.size
    end = start + 8 * n * k * d
    if len(data) < end:
        raise ContractViolation("truncated payload")
    t = np.frombuffer(data[start:end], dtype="<f8").reshape(n, k, d).astype(float)
    return t, end


def save_tensor(path, tensor) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(tensor_to_csv(tensor))
    else:
        path.write_bytes(tensor_to_bytes(tensor))


def load_tensor(path) -> np.ndarray:
    path = Path(path)
    if path.suffix == ".csv":
        return tensor_from_csv(path.read_text())
    return tensor_from_bytes(path.read_bytes())[0]


# --- datasets -------------------------------------------------------------------

def _columns(d: int, m: int, provenance: bool) -> list:
    cols = ["sample", "step"]
    for name, width in (("x", d), ("mean_x", d), ("b", d), ("u", m), ("mean_u", m)):
        cols += [f"{name}_{i}" for i in range(width)]
    return cols + (["provenance"] if provenance else [])


def dataset_to_csv(Z, Y, steps: int, provenance=None) -> str:
    """Records ordered sample-major; ``steps`` recovers the (sample, step) index."""
    Z, Y = np.asarray(Z, float), np.asarray(Y, float)
    if Z.shape[1] % 3 or Y.shape[1] % 2 or len(Z) != len(Y) or len(Z) % steps:
        raise ContractViolation("inconsistent dataset shapes")
    d, m = Z.shape[1] // 3, Y.shape[1] // 2
    buf = io.StringIO()
    buf.write(",".join(_columns(d, m, provenance is not None)) + "\n")
    for j in range(len(Z)):
        cells = [str(j // steps), str(j % steps)] + [_num(v) for v in Z[j]] + [_num(v) for v in Y[j]]
        if provenance is not None:
            cells.append(str(int(provenance[j])))
        buf.write(",".join(cells) + "\n")
    return buf.getvalue()


def dataset_from_csv(text: str):
    """Returns ``(Z, Y, provenance or None)``."""
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    rows = np.array([[float(v) for v in row] for row in reader if row]).reshape(-1, len(header))
    has_prov = header[-1] == "provenance"
    body = rows[:, 2:-1] if has_prov else rows[:, 2:]
    d = sum(h.startswith("x_") for h in header)
    Z, Y = body[:, :3 * d], body[:, 3 * d:]
    return Z, Y, (rows[:, -1].astype(int) if has_prov else None)


def dataset_to_bytes(Z, Y, steps: int, provenance=None) -> bytes:
    """Two (or three, with provenance) tensor blocks: inputs, targets, tags."""
    Z, Y = np.asarray(Z, float), np.asarray(Y, float)
    n = len(Z) // steps
    blocks = [Z.reshape(n, steps, -1), Y.reshape(n, steps, -1)]
    if provenance is not None:
        blocks.append(np.asarray(provenance, float).reshape(n, steps, 1))
    return b"".join(tensor_to_bytes(b) for b in blocks)


def dataset_from_bytes(data: bytes):
    blocks, off = [], 0
    while off < len(data):
        t, off = tensor_from_bytes(data, off)
        blocks.append(t.reshape(-1, t.shape[2]))
    if len(blocks) not in (2, 3):
        raise ContractViolation(f"expected 2 or 3 blocks, found {len(blocks)}")
    prov = blocks[2][:, 0].astype(int) if len(blocks) == 3 else None
    return blocks[0], blocks[1], prov


def save_dataset(path, Z, Y, steps: int, provenance=None) -> None:
    path = Path(path)
    if path.suffix == ".csv":
        path.write_text(dataset_to_csv(Z, Y, steps, provenance))
    else:
        path.write_bytes(dataset_to_bytes(Z, Y, steps, provenance))


def load_dataset(path):
    path = Path(path)
    if path.suffix == ".csv":
        return dataset_from_csv(path.read_text())
    return dataset_from_bytes(path.read_bytes())
