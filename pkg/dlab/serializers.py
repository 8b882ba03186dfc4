"""On-disk formats: DLAB checkpoints, DLDS datasets, JSON config sidecars, CSV tables."""
from __future__ import annotations

import json
import logging
import struct
from pathlib import Path

import numpy as np
import pandas as pd

from .datasets import Factor, FactorSpec
from .exceptions import FormatError

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"DLAB"
CHECKPOINT_VERSION = 1
DATASET_MAGIC = b"DLDS"
DATASET_VERSION = 1
KIND_CODES = {"discrete": 0, "continuous": 1}


class _Reader:
    def __init__(self, blob: bytes, path):
        self.blob, self.path, self.pos = blob, path, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError(f"truncated at byte {self.pos} (wanted {n} more)", self.path)
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        size = struct.calcsize(fmt)
        vals = struct.unpack(fmt, self.take(size))
        return vals[0] if len(vals) == 1 else vals

    def text(self) -> str:
        n = self.unpack("<I")
        try:
            return self.take(n).decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError("name is not valid UTF-8", self.path) from None

    def header(self, magic: bytes, version: int):
        got = self.take(4)
        if got != magic:
            raise FormatError(f"bad magic {got!r}, expected {magic!r}", self.path)
        v = self.unpack("<I")
        if v != version:
            raise FormatError(f"unsupported version {v}", self.path)


def _text(s: str) -> bytes:
    raw = s.encode("utf-8")
    return struct.pack("<I", len(raw)) + raw


# ===== Checkpoints =====
def encode_arrays(arrays: dict[str, np.ndarray]) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(arrays))]
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8")
        parts.append(_text(name))
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def decode_arrays(blob: bytes, path=None) -> dict[str, np.ndarray]:
    r = _Reader(blob, path)
    r.header(CHECKPOINT_MAGIC, CHECKPOINT_VERSION)
    count = r.unpack("<I")
    out = {}
    for _ in range(count):
        name = r.text()
        rank = r.unpack("<I")
        shape = struct.unpack(f"<{rank}Q", r.take(8 * rank)) if rank else ()
        size = int(np.prod(shape)) if rank else 1
        out[name] = np.frombuffer(r.take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if r.pos != len(blob):
        raise FormatError(f"{len(blob) - r.pos} trailing bytes", path)
    return out


def write_checkpoint(path, arrays: dict[str, np.ndarray]) -> Path:
    path = Path(path)
    path.write_bytes(encode_arrays(arrays))
    return path


def read_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    return decode_arrays(path.read_bytes(), path)


def write_config(path, config: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(config, indent=2, sort_keys=True), encoding="utf-8")
    return path


def read_config(path) -> dict:
    path = Path(path)
    try:
        return json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"config sidecar is not JSON ({exc})", path) from None


# ===== Datasets =====
def _record_dtype(spec: FactorSpec, pixels: int) -> np.dtype:
    fields = [(f"f{i}", "<u4" if f.discrete else "<f8") for i, f in enumerate(spec.factors)]
    return np.dtype(fields + [("pixels", "u1", (pixels,))])


def write_dataset(path, spec: FactorSpec, images: np.ndarray, factors: np.ndarray) -> Path:
    path = Path(path)
    images = np.asarray(images, dtype=np.float64)
    factors = np.asarray(factors, dtype=np.float64).reshape(len(images), spec.k)
    h, w, c = images.shape[1:]
    parts = [DATASET_MAGIC, struct.pack("<II", DATASET_VERSION, spec.k)]
    for f in spec.factors:
        parts.append(_text(f.name))
        parts.append(struct.pack("<B", KIND_CODES[f.kind]))
        parts.append(struct.pack("<I", f.cardinality) if f.discrete else struct.pack("<dd", f.low, f.high))
    parts.append(struct.pack("<Q", len(images)))
    parts.append(struct.pack("<III", h, w, c))
    records = np.zeros(len(images), dtype=_record_dtype(spec, h * w * c))
    for i in range(spec.k):
        records[f"f{i}"] = factors[:, i]
    records["pixels"] = np.clip(np.round(images.reshape(len(images), -1) * 255), 0, 255).astype(np.uint8)
    parts.append(records.tobytes())
    try:
        path.write_bytes(b"".join(parts))
    except OSError as exc:
        raise FormatError(f"cannot write dataset ({exc.strerror})", path) from None
    logger.info("wrote %d records to %s", len(images), path)
    return path


def read_dataset(path):
    path = Path(path)
    try:
        r = _Reader(path.read_bytes(), path)
    except OSError as exc:
        raise FormatError(f"cannot read dataset ({exc.strerror})", path) from None
    r.header(DATASET_MAGIC, DATASET_VERSION)
    factors = []
    for _ in range(r.unpack("<I")):
        name = r.text()
        kind = r.unpack("<B")
        if kind == KIND_CODES["discrete"]:
            factors.append(Factor(name, cardinality=r.unpack("<I")))
        elif kind == KIND_CODES["continuous"]:
            low, high = r.unpack("<dd")
            factors.append(Factor(name, low=low, high=high))
        else:
            raise FormatError(f"factor '{name}' has unknown kind code {kind}", path)
    spec = FactorSpec(tuple(factors))
    count = r.unpack("<Q")
    h, w, c = r.unpack("<III")
    dtype = _record_dtype(spec, h * w * c)
    records = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype)
    if r.pos != len(r.blob):
        raise FormatError(f"{len(r.blob) - r.pos} trailing bytes", path)
    table = np.stack([records[f"f{i}"].astype(np.float64) for i in range(spec.k)], axis=1) if count else np.zeros((0, spec.k))
    _check_cardinalities(spec, table, path)
    images = records["pixels"].reshape(count, h, w, c).astype(np.float64) / 255.0
    return spec, images, table


def _check_cardinalities(spec: FactorSpec, table: np.ndarray, path):
    if len(table) == 0:
        return
    for i, f in enumerate(spec.factors):
        col = table[:, i]
        if f.discrete:
            top = int(col.max())
            if col.min() < 1 or top > f.cardinality:
                raise FormatError(f"factor '{f.name}' index outside 1..{f.cardinality}", path)
            # too few records to reach every value is not an error
            if top != f.cardinality and len(table) >= f.cardinality:
                raise FormatError(f"factor '{f.name}' declares cardinality {f.cardinality} "
                                  f"but its largest index is {top}", path)
        elif col.min() < f.low or col.max() > f.high:
            raise FormatError(f"factor '{f.name}' value outside [{f.low}, {f.high}]", path)


# ===== Tables =====
def write_rows(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    pd.DataFrame(rows, columns=columns).to_csv(path, index=False)
    return path


def append_rows(path, rows: list[dict], columns: list[str]) -> Path:
    path = Path(path)
    frame = pd.DataFrame(rows, columns=columns)
    frame.to_csv(path, mode="a", header=not path.exists(), index=False)
    return path


def read_rows(path) -> pd.DataFrame:
    path = Path(path)
    try:
        return pd.read_csv(path)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as exc:
        raise FormatError(f"cannot read table ({exc})", path) from None
