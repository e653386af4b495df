"""On-disk formats.

``DSCF`` feature files::

    b"DSCF" | u32 n | u32 d | n x (i32 label | d x f64)      little-endian, packed

Array containers (``DSCS`` scorers, ``DSCT`` teacher statistics, ``DSCM`` students)::

    4-byte magic | u32 version | u32 tag | u32 n_arrays
    then per array: u16 name_len | name (utf-8) | u32 ndim | ndim x u32 shape | f64 data (C order)

Arrays are written in the order given, which for every producer in this package
is the field order of the dataclass being saved.
"""

from __future__ import annotations

import csv
import io
import struct
from pathlib import Path

import numpy as np

from .specmath import FeatureMatrix

FEATURE_MAGIC = b"DSCF"
SCORER_MAGIC = b"DSCS"
TEACHER_MAGIC = b"DSCT"
MODEL_MAGIC = b"DSCM"
CONTAINER_VERSION = 1


class FormatError(ValueError):
    pass


def feature_bytes(feats: FeatureMatrix) -> bytes:
    dt = np.dtype([("label", "<i4"), ("x", "<f8", (feats.d,))])
    rec = np.empty(feats.n, dtype=dt)
    rec["label"] = feats.labels
    rec["x"] = feats.data
    return FEATURE_MAGIC + struct.pack("<II", feats.n, feats.d) + rec.tobytes()


def features_from_bytes(buf: bytes, n_classes: int | None = None) -> FeatureMatrix:
    if buf[:4] != FEATURE_MAGIC:
        raise FormatError("not a DSCF feature file")
    n, d = struct.unpack_from("<II", buf, 4)
    dt = np.dtype([("label", "<i4"), ("x", "<f8", (d,))])
    expected = 12 + n * dt.itemsize
    if len(buf) != expected:
        raise FormatError(f"DSCF size mismatch: expected {expected} bytes, got {len(buf)}")
    rec = np.frombuffer(buf, dtype=dt, count=n, offset=12)
    labels = rec["label"].astype(np.int64)
    data = np.array(rec["x"], dtype=np.float64).reshape(n, d)
    c = n_classes if n_classes is not None else int(labels.max()) + 1 if n else 1
    return FeatureMatrix(data, labels, c)


def save_features(path, feats: FeatureMatrix) -> None:
    Path(path).write_bytes(feature_bytes(feats))


def load_features(path, n_classes: int | None = None) -> FeatureMatrix:
    return features_from_bytes(Path(path).read_bytes(), n_classes)


def save_features_csv(path, feats: FeatureMatrix) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["label"] + [f"f{j}" for j in range(feats.d)])
        for lab, row in zip(feats.labels, feats.data):
            writer.writerow([int(lab)] + [repr(float(v)) for v in row])


def load_features_csv(path, n_classes: int | None = None) -> FeatureMatrix:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if not header or header[0] != "label":
            raise FormatError("CSV feature file must start with a 'label,f0,...' header")
        rows = [r for r in reader if r]
    labels = np.array([int(r[0]) for r in rows], dtype=np.int64)
    data = np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64).reshape(len(rows), len(header) - 1)
    c = n_classes if n_classes is not None else int(labels.max()) + 1
    return FeatureMatrix(data, labels, c)


def container_bytes(magic: bytes, tag: int, arrays: dict[str, np.ndarray]) -> bytes:
    out = io.BytesIO()
    out.write(magic)
    out.write(struct.pack("<III", CONTAINER_VERSION, tag, len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f8", order="C")  # keeps 0-d arrays 0-d
        key = name.encode("utf-8")
        out.write(struct.pack("<H", len(key)))
        out.write(key)
        out.write(struct.pack("<I", arr.ndim))
        out.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.write(arr.tobytes())
    return out.getvalue()


def container_from_bytes(buf: bytes, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    if buf[:4] != magic:
        raise FormatError(f"expected magic {magic!r}, found {buf[:4]!r}")
    version, tag, count = struct.unpack_from("<III", buf, 4)
    if version != CONTAINER_VERSION:
        raise FormatError(f"unsupported container version {version}")
    pos = 16
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        (klen,) = struct.unpack_from("<H", buf, pos)
        pos += 2
        name = buf[pos : pos + klen].decode("utf-8")
        pos += klen
        (ndim,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        size = int(np.prod(shape, dtype=np.int64)) if ndim else 1
        arrays[name] = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
        pos += 8 * size
    if pos != len(buf):
        raise FormatError("trailing bytes after container payload")
    return tag, arrays


def save_container(path, magic: bytes, tag: int, arrays: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(container_bytes(magic, tag, arrays))


def load_container(path, magic: bytes) -> tuple[int, dict[str, np.ndarray]]:
    return container_from_bytes(Path(path).read_bytes(), magic)


def scorer_bytes(scorer) -> bytes:
    from .scorers import VARIANTS

    return container_bytes(SCORER_MAGIC, VARIANTS.index(scorer.variant), scorer.to_arrays())


def scorer_from_bytes(buf: bytes):
    from .scorers import SCORER_CLASSES, VARIANTS

    tag, arrays = container_from_bytes(buf, SCORER_MAGIC)
    if not 0 <= tag < len(VARIANTS):
        raise FormatError(f"unknown scorer tag {tag}")
    return SCORER_CLASSES[VARIANTS[tag]].from_arrays(arrays)


def save_scorer(path, scorer) -> None:
    Path(path).write_bytes(scorer_bytes(scorer))


def load_scorer(path):
    return scorer_from_bytes(Path(path).read_bytes())


def write_manifest(path, items: dict) -> None:
    lines = [f"{k}={v}" for k, v in items.items()]
    Path(path).write_text("\n".join(lines) + "\n")


def read_manifest(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, _, value = line.partition("=")
            out[key.strip()] = value.strip()
    return out


def fmt_float(x: float) -> str:
    """Shortest round-trip repr; fixed ``.`` decimal independent of locale."""
    return repr(float(x))


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([fmt_float(v) if isinstance(v, (float, np.floating)) else v for v in row])
