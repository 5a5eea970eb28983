"""Id-keyed embedding matrices and the SSND binary container.

Layout of an SSND file (all integers little-endian)::

    0   4  magic  b"SSND"
    4   4  u32    version (1 = binary32 payload, 2 = binary64 payload)
    8   8  u64    N, number of rows
    16  4  u32    d, number of columns
    20  .  id table, N records of [u16 byte length, UTF-8 bytes]
    .   .  payload, N*d floats, row-major

Embedding sets are always written as version 1. Version 2 exists only for
checkpoint tensors, which must survive a save/load cycle without rounding.
"""

from __future__ import annotations

import logging
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DataError, FormatError

logger = logging.getLogger(__name__)

MAGIC = b"SSND"
HEADER = struct.Struct("<4sIQI")
ID_LEN = struct.Struct("<H")
PAYLOAD_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
MAX_ID_BYTES = 0xFFFF


@dataclass
class EmbeddingSet:
    """N embeddings of dimension ``dim``, row i belonging to ``ids[i]``.

    ``data`` is held as float32 so that a write/read cycle is bit-exact.
    """

    ids: list[str]
    data: np.ndarray
    dim: int = field(default=-1)

    def __post_init__(self):
        self.ids = list(self.ids)
        data = np.asarray(self.data)
        if data.ndim == 1 and data.size == 0:
            data = data.reshape(0, max(self.dim, 0))
        if data.ndim != 2:
            raise DataError(f"embedding data must be 2-D, got shape {data.shape}")
        self.data = np.ascontiguousarray(data, dtype=np.float32)
        if self.dim < 0:
            self.dim = self.data.shape[1]
        self.validate()

    def __len__(self) -> int:
        return len(self.ids)

    def validate(self) -> None:
        if self.data.shape != (len(self.ids), self.dim):
            raise DataError(
                f"data shape {self.data.shape} does not match "
                f"{len(self.ids)} ids x dim {self.dim}"
            )
        if self.dim <= 0:
            raise DataError(f"dim must be positive, got {self.dim}")
        _check_ids(self.ids)
        if not np.all(np.isfinite(self.data)):
            row = int(np.argwhere(~np.isfinite(self.data))[0, 0])
            raise DataError(f"non-finite value in row {row} (id {self.ids[row]!r})")

    def index(self) -> dict[str, int]:
        return {k: i for i, k in enumerate(self.ids)}

    def subset(self, ids: Sequence[str]) -> "EmbeddingSet":
        pos = self.index()
        rows = [pos[i] for i in ids]
        return EmbeddingSet(list(ids), self.data[rows], self.dim)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EmbeddingSet):
            return NotImplemented
        return (
            self.ids == other.ids
            and self.dim == other.dim
            and self.data.tobytes() == other.data.tobytes()
        )


@dataclass
class PairedDataset:
    """Student inputs and teacher targets joined on sample id."""

    inputs: np.ndarray
    targets: np.ndarray
    ids: list[str]
    dropped_inputs: int = 0
    dropped_targets: int = 0

    def __post_init__(self):
        if len(self.inputs) != len(self.targets) or len(self.inputs) != len(self.ids):
            raise DataError(
                f"row counts differ: inputs {len(self.inputs)}, "
                f"targets {len(self.targets)}, ids {len(self.ids)}"
            )

    def __len__(self) -> int:
        return len(self.ids)


def _check_ids(ids: Sequence[str]) -> None:
    seen = set()
    for i in ids:
        if not isinstance(i, str) or not i:
            raise DataError(f"ids must be non-empty strings, got {i!r}")
        if i in seen:
            raise DataError(f"duplicate id {i!r}")
        if len(i.encode("utf-8")) > MAX_ID_BYTES:
            raise DataError(f"id longer than {MAX_ID_BYTES} bytes: {i[:40]!r}...")
        seen.add(i)


def _encode(ids: Sequence[str], data: np.ndarray, version: int) -> bytes:
    n, d = data.shape
    parts = [HEADER.pack(MAGIC, version, n, d)]
    for i in ids:
        raw = i.encode("utf-8")
        parts.append(ID_LEN.pack(len(raw)))
        parts.append(raw)
    parts.append(np.ascontiguousarray(data, dtype=PAYLOAD_DTYPES[version]).tobytes())
    return b"".join(parts)


def _atomic_write(path: Path, blob: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _decode(blob: bytes, path) -> tuple[list[str], np.ndarray, int]:
    if len(blob) < HEADER.size:
        raise FormatError(f"{path}: file too short for header ({len(blob)} bytes)")
    magic, version, n, d = HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version not in PAYLOAD_DTYPES:
        raise FormatError(f"{path}: unsupported version {version}")
    off = HEADER.size
    ids = []
    for r in range(n):
        if off + ID_LEN.size > len(blob):
            raise FormatError(f"{path}: truncated id table at record {r} of {n}")
        (ln,) = ID_LEN.unpack_from(blob, off)
        off += ID_LEN.size
        if off + ln > len(blob):
            raise FormatError(f"{path}: truncated id table at record {r} of {n}")
        try:
            ids.append(blob[off : off + ln].decode("utf-8"))
        except UnicodeDecodeError as exc:
            raise FormatError(f"{path}: id {r} is not valid UTF-8") from exc
        off += ln
    dtype = PAYLOAD_DTYPES[version]
    expected = n * d * dtype.itemsize
    if len(blob) - off < expected:
        raise FormatError(
            f"{path}: truncated payload, need {expected} bytes, have {len(blob) - off}"
        )
    if len(blob) - off > expected:
        raise FormatError(f"{path}: {len(blob) - off - expected} trailing bytes")
    data = np.frombuffer(blob, dtype=dtype, count=n * d, offset=off).reshape(n, d)
    try:
        _check_ids(ids)
    except DataError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return ids, data, version


def write_embeddings(path, emb: EmbeddingSet) -> None:
    """Write ``emb`` as an SSND version-1 file.

    Validation happens before anything touches the disk, so a bad set never
    leaves a partial file behind.
    """
    emb.validate()
    _atomic_write(Path(path), _encode(emb.ids, emb.data, 1))


def read_embeddings(path) -> EmbeddingSet:
    blob = Path(path).read_bytes()
    ids, data, version = _decode(blob, path)
    if version != 1:
        raise FormatError(f"{path}: expected an embedding file (version 1), got version {version}")
    return EmbeddingSet(ids, data.astype(np.float32), data.shape[1])


def write_tensor(path, array: np.ndarray) -> None:
    """Store a float64 tensor as SSND version 2 (rows keyed "0", "1", ...).

    1-D arrays are stored as a single row; the caller keeps the true shape.
    """
    arr = np.asarray(array, dtype=np.float64)
    mat = arr.reshape(1, -1) if arr.ndim == 1 else arr.reshape(arr.shape[0], -1)
    _atomic_write(Path(path), _encode([str(i) for i in range(mat.shape[0])], mat, 2))


def read_tensor(path) -> np.ndarray:
    ids, data, version = _decode(Path(path).read_bytes(), path)
    if version != 2:
        raise FormatError(f"{path}: expected a tensor file (version 2), got version {version}")
    return data.astype(np.float64)


def align_pairs(inputs: EmbeddingSet, targets: EmbeddingSet) -> PairedDataset:
    """Inner-join two sets on id, keeping the order of ``inputs``."""
    tpos = targets.index()
    keep = [i for i in inputs.ids if i in tpos]
    if not keep:
        raise DataError("inputs and targets share no ids")
    ipos = inputs.index()
    dropped_in = len(inputs) - len(keep)
    dropped_t = len(targets) - len(keep)
    if dropped_in or dropped_t:
        logger.warning(
            "align_pairs dropped %d input ids and %d target ids", dropped_in, dropped_t
        )
    return PairedDataset(
        inputs=inputs.data[[ipos[i] for i in keep]],
        targets=targets.data[[tpos[i] for i in keep]],
        ids=keep,
        dropped_inputs=dropped_in,
        dropped_targets=dropped_t,
    )


def read_label_csv(path) -> tuple[list[str], np.ndarray]:
    """Read a label sidecar.

    Header ``id,label`` holds integer classes; header ``id,multihot`` holds
    bit strings such as ``0110``. Returns ids and either an int vector or an
    int matrix of 0/1.
    """
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty label file") from None
        header = [h.strip() for h in header]
        if header not in (["id", "label"], ["id", "multihot"]):
            raise FormatError(f"{path}: header must be id,label or id,multihot, got {header}")
        ids, raw = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 2:
                raise FormatError(f"{path}:{lineno}: expected 2 fields, got {len(row)}")
            ids.append(row[0])
            raw.append(row[1].strip())
    _check_ids(ids)
    if header[1] == "label":
        try:
            labels = np.array([int(v) for v in raw], dtype=np.int64)
        except ValueError as exc:
            raise FormatError(f"{path}: {exc}") from exc
        if labels.size and labels.min() < 0:
            raise FormatError(f"{path}: negative class label")
        return ids, labels
    widths = {len(v) for v in raw}
    if len(widths) > 1 or any(set(v) - {"0", "1"} for v in raw):
        raise FormatError(f"{path}: multihot values must be equal-length 0/1 strings")
    labels = np.array([[int(c) for c in v] for v in raw], dtype=np.int64)
    return ids, labels.reshape(len(ids), -1)


def write_label_csv(path, ids: Sequence[str], labels: np.ndarray) -> None:
    import csv

    labels = np.asarray(labels)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if labels.ndim == 1:
            w.writerow(["id", "label"])
            w.writerows([i, int(v)] for i, v in zip(ids, labels))
        else:
            w.writerow(["id", "multihot"])
            w.writerows([i, "".join(str(int(b)) for b in row)] for i, row in zip(ids, labels))
