"""Binary checkpoint container.

Layout (all integers little-endian):

    magic   4 bytes  b"SWNC"
    version u16      currently 1
    count   u32      number of entries
    entry   u16 name length, name bytes (utf-8), u8 rank,
            u32 per extent, float32 little-endian values (row-major)

Values are stored as float32 regardless of compute precision, so a save of
a float64 model is lossy; save -> load -> save round-trips bit-exactly.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import CheckpointError

MAGIC = b"SWNC"
VERSION = 1


def save_arrays(path, arrays: dict) -> None:
    """Write named arrays in insertion order."""
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<H", VERSION))
        f.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            arr = np.asarray(arr)
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(struct.pack("<B", arr.ndim))
            for extent in arr.shape:
                f.write(struct.pack("<I", extent))
            f.write(arr.astype("<f4", copy=False).tobytes(order="C"))


def load_arrays(path) -> dict:
    """Read a checkpoint container back into name -> float32 array."""
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file (bad magic {blob[:4]!r})")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (count,) = struct.unpack_from("<I", blob, 6)
    offset = 10
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + nlen].decode("utf-8")
        offset += nlen
        (rank,) = struct.unpack_from("<B", blob, offset)
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset)
        offset += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=offset).reshape(shape)
        offset += 4 * size
        out[name] = arr.copy()
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")
    return out


@dataclass
class LoadReport:
    loaded: list = field(default_factory=list)
    missing_in_file: list = field(default_factory=list)
    unused_in_file: list = field(default_factory=list)
    shape_mismatch: list = field(default_factory=list)

    @property
    def skipped(self) -> list:
        return sorted(self.missing_in_file + self.unused_in_file + [n for n, *_ in self.shape_mismatch])

    def lines(self):
        for name in self.missing_in_file:
            yield f"skipped (not in file): {name}"
        for name in self.unused_in_file:
            yield f"skipped (not in model): {name}"
        for name, want, got in self.shape_mismatch:
            yield f"skipped (shape {got} != {want}): {name}"


def save_model(path, model) -> None:
    save_arrays(path, model.state_arrays())


def load_model(path, model, strict: bool = True) -> LoadReport:
    """Copy checkpoint entries into matching model tensors.

    Strict mode requires exact name and shape agreement in both directions
    and reports every mismatch at once; non-strict mode loads the matching
    subset and reports what was skipped.
    """
    entries = load_arrays(path)
    state = dict(model.named_tensors())
    report = LoadReport()
    for name, t in state.items():
        if name not in entries:
            report.missing_in_file.append(name)
        elif entries[name].shape != t.data.shape:
            report.shape_mismatch.append((name, t.data.shape, entries[name].shape))
    for name in entries:
        if name not in state:
            report.unused_in_file.append(name)
    problems = report.missing_in_file or report.unused_in_file or report.shape_mismatch
    if strict and problems:
        detail = "; ".join(report.lines())
        raise CheckpointError(f"strict load failed: {detail}")
    for name, t in state.items():
        if name in entries and entries[name].shape == t.data.shape:
            t.data = entries[name].astype(t.dtype)
            report.loaded.append(name)
    return report
