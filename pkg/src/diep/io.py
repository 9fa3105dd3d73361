"""Model artifacts, run reports and CSV tables.

Model artifact layout (all integers little-endian)::

    b"DIEPMOD\\0"  magic (8 bytes)
    uint16 major, uint16 minor
    uint32 header length, then a UTF-8 JSON header
    float64 arrays back to back, in header order
    sha256 of everything above (32 bytes)
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .exceptions import SchemaError
from .moe import CloneGroup, ModelConfig, MoEModel, PruneMask

__all__ = [
    "MAGIC",
    "REPORT_SCHEMA",
    "diff_reports",
    "load_model",
    "load_report",
    "model_bytes",
    "model_digest",
    "read_csv_matrix",
    "read_csv_rows",
    "save_model",
    "save_report",
    "write_csv_matrix",
    "write_csv_rows",
]

MAGIC = b"DIEPMOD\0"
FORMAT_VERSION = (1, 0)
REPORT_SCHEMA = "1.0"
_PREFIX = struct.Struct("<HHI")


def model_bytes(model: MoEModel) -> bytes:
    params = model.parameters()
    header = {
        "config": model.config.to_dict(),
        "clone_groups": [g.to_dict() for g in model.clone_groups],
        "arrays": [{"name": k, "shape": list(v.shape)} for k, v in params.items()],
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    body = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.values())
    payload = MAGIC + _PREFIX.pack(*FORMAT_VERSION, len(head)) + head + body
    return payload + hashlib.sha256(payload).digest()


def model_digest(model: MoEModel) -> str:
    return hashlib.sha256(model_bytes(model)).hexdigest()


def save_model(model: MoEModel, path) -> str:
    """Write ``model`` to ``path``; returns the file's sha256."""
    data = model_bytes(model)
    Path(path).write_bytes(data)
    return hashlib.sha256(data).hexdigest()


def load_model(path) -> MoEModel:
    data = Path(path).read_bytes()
    if data[:len(MAGIC)] != MAGIC:
        raise SchemaError(f"{path}: not a model artifact (bad magic)")
    if len(data) < len(MAGIC) + _PREFIX.size + 32:
        raise SchemaError(f"{path}: truncated artifact")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise SchemaError(f"{path}: checksum mismatch")
    major, _minor, n_head = _PREFIX.unpack_from(data, len(MAGIC))
    if major != FORMAT_VERSION[0]:
        raise SchemaError(f"{path}: unsupported artifact version {major}")
    start = len(MAGIC) + _PREFIX.size
    header = json.loads(payload[start:start + n_head].decode("utf-8"))
    offset = start + n_head
    params = {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(payload, dtype="<f8", count=count, offset=offset)
        params[spec["name"]] = arr.reshape(shape).astype(np.float64)
        offset += 8 * count
    if offset != len(payload):
        raise SchemaError(f"{path}: {len(payload) - offset} trailing bytes")
    config = ModelConfig.from_dict(header["config"])
    groups = [CloneGroup.from_dict(g) for g in header["clone_groups"]]
    return MoEModel.from_parameters(config, params, groups)


# -- reports ---------------------------------------------------------------

def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, np.bool_):
        return bool(obj)
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.floating):
        return float(obj)
    if isinstance(obj, PruneMask):
        return obj.to_grid()
    if isinstance(obj, Path):
        return str(obj)
    return obj


def save_report(report: dict, path) -> None:
    data = dict(report)
    data.setdefault("schema_version", REPORT_SCHEMA)
    Path(path).write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_report(path) -> dict:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    version = str(data.get("schema_version", ""))
    major = version.split(".")[0]
    if major != REPORT_SCHEMA.split(".")[0]:
        raise SchemaError(f"{path}: unsupported report schema version {version!r}")
    return data


def diff_reports(a, b, ignore=("timing",), path="") -> list[str]:
    """Paths whose scalar content (numbers, strings, nulls) or structure differs.

    Floats must match bit for bit; keys in ``ignore`` (wall-clock) are skipped.
    """
    out = []
    if isinstance(a, dict) and isinstance(b, dict):
        for key in sorted(set(a) | set(b)):
            if key in ignore:
                continue
            if key not in a or key not in b:
                out.append(f"{path}/{key}")
                continue
            out.extend(diff_reports(a[key], b[key], ignore, f"{path}/{key}"))
    elif isinstance(a, (list, tuple)) and isinstance(b, (list, tuple)):
        if len(a) != len(b):
            return [path]
        for i, (x, y) in enumerate(zip(a, b)):
            out.extend(diff_reports(x, y, ignore, f"{path}[{i}]"))
    elif type(a) is not type(b):
        out.append(path)
    elif isinstance(a, float):
        if not (a == b or (a != a and b != b)) or np.signbit(a) != np.signbit(b):
            out.append(path)
    elif a != b:
        out.append(path)
    return out


# -- CSV -------------------------------------------------------------------

def write_csv_matrix(matrix, path, row_label: str = "row", col_prefix: str = "col") -> None:
    m = np.atleast_2d(np.asarray(matrix, dtype=np.float64))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow([row_label] + [f"{col_prefix}{j}" for j in range(m.shape[1])])
        for i, row in enumerate(m):
            w.writerow([i] + [repr(float(v)) for v in row])


def read_csv_matrix(path) -> np.ndarray:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    return np.array([[float(v) for v in r[1:]] for r in rows], dtype=np.float64)


def write_csv_rows(rows: list[dict], path, fields: list[str] | None = None) -> None:
    if fields is None:
        fields = []
        for r in rows:
            fields.extend(k for k in r if k not in fields)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=fields, restval="")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


def read_csv_rows(path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))
