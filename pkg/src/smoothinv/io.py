"""On-disk formats: the SMIV container, PPM/PGM export and run reports.

SMIV container (little-endian)::

    b"SMIV"  u32 version  u32 file kind  u32 record count
    per record: u32 tag  u32 ndim  u32 dims[ndim]  u64 n  f32 payload[n]

File kinds: 0 model, 1 dataset, 2 tensor. A model is the input-shape record
followed by one record per layer; conv and dense layers are followed by
their bias record. Every write goes to a temporary file that is renamed
into place.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .data import Dataset
from .errors import ContractError, FormatError, VersionError
from .training import Layer, Model

MAGIC = b"SMIV"
VERSION = 1

KIND_MODEL, KIND_DATASET, KIND_TENSOR = 0, 1, 2

TAG_INPUT = 1
TAG_CONV = 2
TAG_POOL = 3
TAG_DENSE_RELU = 4
TAG_DENSE = 5
TAG_BIAS = 6
TAG_IMAGES = 16
TAG_LABELS = 17
TAG_CLASSES = 18
TAG_TENSOR = 32

SPLITS = ("train", "test")


def atomic_write(path, payload: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _pack(kind: int, records: Sequence[Tuple[int, Tuple[int, ...], np.ndarray]]) -> bytes:
    out = [MAGIC, struct.pack("<III", VERSION, kind, len(records))]
    for tag, shape, payload in records:
        data = np.ascontiguousarray(payload, dtype="<f4").reshape(-1)
        out.append(struct.pack(f"<II{len(shape)}IQ", tag, len(shape), *shape, data.size))
        out.append(data.tobytes())
    return b"".join(out)


def _unpack(path, kind: int) -> List[Tuple[int, Tuple[int, ...], np.ndarray]]:
    raw = Path(path).read_bytes()
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated header")
    if raw[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:4]!r}")
    version, found, count = struct.unpack("<III", raw[4:16])
    if version != VERSION:
        raise VersionError(f"{path}: format version {version}, this build reads {VERSION}")
    if found != kind:
        raise FormatError(f"{path}: file kind {found}, expected {kind}")
    pos = 16
    records = []

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}")
        chunk = raw[pos:pos + n]
        pos += n
        return chunk

    for _ in range(count):
        tag, ndim = struct.unpack("<II", take(8))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (n,) = struct.unpack("<Q", take(8))
        payload = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32)
        records.append((tag, tuple(shape), payload))
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return records


def save_model(path, m: Model) -> None:
    records = [(TAG_INPUT, tuple(m.input_shape), np.zeros(0))]
    for layer in m.layers:
        if layer.kind == "pool":
            records.append((TAG_POOL, (), np.zeros(0)))
            continue
        tag = TAG_CONV if layer.kind == "conv" else (TAG_DENSE_RELU if layer.relu else TAG_DENSE)
        records.append((tag, layer.weight.shape, layer.weight))
        records.append((TAG_BIAS, layer.bias.shape, layer.bias))
    atomic_write(path, _pack(KIND_MODEL, records))


def load_model(path) -> Model:
    records = _unpack(path, KIND_MODEL)
    if not records or records[0][0] != TAG_INPUT:
        raise FormatError(f"{path}: model file must start with the input shape")
    input_shape = records[0][1]
    layers: List[Layer] = []
    it = iter(records[1:])
    for tag, shape, payload in it:
        if tag == TAG_POOL:
            layers.append(Layer("pool"))
            continue
        if tag not in (TAG_CONV, TAG_DENSE_RELU, TAG_DENSE):
            raise FormatError(f"{path}: unexpected record tag {tag}")
        bias = next(it, None)
        if bias is None or bias[0] != TAG_BIAS:
            raise FormatError(f"{path}: layer without bias record")
        kind = "conv" if tag == TAG_CONV else "dense"
        layers.append(Layer(kind, payload.reshape(shape), bias[2].reshape(bias[1]), tag != TAG_DENSE))
    try:
        final = layers[-1].weight.shape[1]
        return Model(layers, tuple(input_shape), final)
    except (IndexError, AttributeError, ValueError) as exc:
        raise FormatError(f"{path}: inconsistent layer stack ({exc})") from exc


def save_dataset(path, d: Dataset) -> None:
    records = [
        (TAG_CLASSES, (d.class_count, SPLITS.index(d.split) if d.split in SPLITS else 0), np.zeros(0)),
        (TAG_IMAGES, d.images.shape, d.images),
        (TAG_LABELS, d.labels.shape, d.labels.astype(np.float32)),
    ]
    atomic_write(path, _pack(KIND_DATASET, records))


def load_dataset(path) -> Dataset:
    records = {tag: (shape, payload) for tag, shape, payload in _unpack(path, KIND_DATASET)}
    try:
        (classes, split), _ = records[TAG_CLASSES]
        shape, images = records[TAG_IMAGES]
        _, labels = records[TAG_LABELS]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: incomplete dataset file") from exc
    return Dataset(images.reshape(shape), labels.astype(np.int64), classes, SPLITS[split])


def save_tensor(path, arr: np.ndarray) -> None:
    atomic_write(path, _pack(KIND_TENSOR, [(TAG_TENSOR, arr.shape, arr)]))


def load_tensor(path) -> np.ndarray:
    records = _unpack(path, KIND_TENSOR)
    if len(records) != 1 or records[0][0] != TAG_TENSOR:
        raise FormatError(f"{path}: expected a single tensor record")
    _, shape, payload = records[0]
    return payload.reshape(shape)


# --------------------------------------------------------------------------
# Images


def to_bytes(x: np.ndarray) -> np.ndarray:
    """Clamp to [0, 1], then round half up onto 0..255."""
    return np.floor(np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0) * 255 + 0.5).astype(np.uint8)


def export_image_ppm(x: np.ndarray, path) -> None:
    """Binary PPM (P6) for 3 channels, PGM (P5) for 1."""
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] not in (1, 3):
        raise ContractError(f"can only export 1- or 3-channel C x H x W images, got {x.shape}")
    c, h, w = x.shape
    magic = b"P6" if c == 3 else b"P5"
    body = to_bytes(x).transpose(1, 2, 0).tobytes()
    atomic_write(path, magic + f"\n{w} {h}\n255\n".encode() + body)


# --------------------------------------------------------------------------
# Reports
#
# One ``key = <json value>`` per line; tables are CSV blocks between
# ``[table NAME]`` and ``[end]``. Nested dicts are flattened with dots.


@dataclass
class Table:
    columns: List[str]
    rows: List[List] = field(default_factory=list)


def _flatten(prefix: str, value, out: Dict) -> None:
    if isinstance(value, dict):
        for k, v in value.items():
            _flatten(f"{prefix}.{k}" if prefix else str(k), v, out)
    else:
        out[prefix] = value


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, (tuple, set, frozenset)):
        return [_jsonable(x) for x in (sorted(v) if isinstance(v, (set, frozenset)) else v)]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def _cell(v) -> str:
    v = _jsonable(v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def _parse_cell(s: str):
    for conv in (int, float):
        try:
            return conv(s)
        except ValueError:
            pass
    return s


def render_report(results: Dict) -> str:
    flat: Dict = {}
    _flatten("", results, flat)
    lines = ["# smoothinv report v1"]
    tables = []
    for key, value in flat.items():
        if isinstance(value, Table):
            tables.append((key, value))
            continue
        lines.append(f"{key} = {json.dumps(_jsonable(value), allow_nan=True)}")
    for key, table in tables:
        lines.append(f"[table {key}]")
        lines.append(",".join(table.columns))
        for row in table.rows:
            lines.append(",".join(_cell(v) for v in row))
        lines.append("[end]")
    return "\n".join(lines) + "\n"


def write_report(results: Dict, path) -> None:
    atomic_write(path, render_report(results).encode())


def read_report(path) -> Dict:
    out: Dict = {}
    lines = Path(path).read_text().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i].strip()
        i += 1
        if not line or line.startswith("#"):
            continue
        if line.startswith("[table ") and line.endswith("]"):
            name = line[len("[table "):-1]
            columns = lines[i].split(",")
            i += 1
            rows = []
            while lines[i].strip() != "[end]":
                rows.append([_parse_cell(c) for c in lines[i].split(",")])
                i += 1
            i += 1
            out[name] = Table(columns, rows)
            continue
        key, sep, value = line.partition(" = ")
        if not sep:
            raise FormatError(f"{path}:{i}: malformed report line")
        out[key] = json.loads(value)
    return out

