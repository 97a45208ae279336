"""On-disk formats: the SVOL volume container, cohort CSV and report tables.

SVOL layout (all little-endian)::

    8 bytes   magic  b"SVOLQC01"
    4 bytes   uint32 header length H
    H bytes   UTF-8 JSON header {"kind", "dims", ["num_classes"], "dtype"}
    payload   u16 labels or f32 values, x fastest:
              index = ((z * Y) + y) * X + x; "prob" stores one such block per class

Report tables are written with ``repr`` floats so that output is byte-stable
and parses back to the identical value.
"""

from __future__ import annotations

import csv
import io
import json
import math
import struct
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    BadMagic,
    InvalidHeaderField,
    InvalidVolume,
    MissingColumn,
    TrailingBytes,
    TruncatedPayload,
    UnparseableField,
)
from .volume import IntensityVolume, LabelVolume, ProbStack

MAGIC = b"SVOLQC01"
_KIND_DTYPE = {"labels": "u16", "prob": "f32", "intensity": "f32"}
_NP_DTYPE = {"u16": np.dtype("<u2"), "f32": np.dtype("<f4")}

Volume = LabelVolume | ProbStack | IntensityVolume


# ---------------------------------------------------------------------------
# SVOL
# ---------------------------------------------------------------------------


def write_svol(volume: Volume) -> bytes:
    if isinstance(volume, LabelVolume):
        header = {"kind": "labels", "dims": list(volume.dims), "num_classes": volume.num_classes, "dtype": "u16"}
        arrays = [volume.data]
    elif isinstance(volume, ProbStack):
        header = {"kind": "prob", "dims": list(volume.dims), "num_classes": volume.num_classes, "dtype": "f32"}
        arrays = list(volume.data)
    elif isinstance(volume, IntensityVolume):
        header = {"kind": "intensity", "dims": list(volume.dims), "dtype": "f32"}
        arrays = [volume.data]
    else:
        raise TypeError(f"cannot serialise {type(volume).__name__}")
    header_bytes = json.dumps(header, separators=(",", ":")).encode("utf-8")
    dt = _NP_DTYPE[header["dtype"]]
    payload = b"".join(np.asarray(a, dtype=dt).ravel(order="F").tobytes() for a in arrays)
    return MAGIC + struct.pack("<I", len(header_bytes)) + header_bytes + payload


def _parse_header(raw: bytes) -> dict[str, Any]:
    try:
        header = json.loads(raw.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidHeaderField(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise InvalidHeaderField("header must be a JSON object")

    kind = header.get("kind")
    if kind not in _KIND_DTYPE:
        raise InvalidHeaderField(f"kind must be one of {sorted(_KIND_DTYPE)}, got {kind!r}")
    dtype = header.get("dtype")
    if dtype != _KIND_DTYPE[kind]:
        raise InvalidHeaderField(f"kind {kind!r} requires dtype {_KIND_DTYPE[kind]!r}, got {dtype!r}")
    dims = header.get("dims")
    if (
        not isinstance(dims, list)
        or len(dims) != 3
        or not all(isinstance(d, int) and not isinstance(d, bool) and d >= 1 for d in dims)
    ):
        raise InvalidHeaderField(f"dims must be 3 integers >= 1, got {dims!r}")
    if kind in ("labels", "prob"):
        nc = header.get("num_classes")
        if not isinstance(nc, int) or isinstance(nc, bool) or nc < 2:
            raise InvalidHeaderField(f"num_classes must be an integer >= 2, got {nc!r}")
    return header


def read_svol(data: bytes) -> Volume:
    if len(data) < 12 or data[:8] != MAGIC:
        raise BadMagic("not an SVOL file")
    (hlen,) = struct.unpack("<I", data[8:12])
    if len(data) < 12 + hlen:
        raise TruncatedPayload("file ends inside the header")
    header = _parse_header(data[12 : 12 + hlen])
    kind = header["kind"]
    x, y, z = header["dims"]
    n_blocks = header["num_classes"] if kind == "prob" else 1
    dt = _NP_DTYPE[header["dtype"]]
    expected = x * y * z * n_blocks * dt.itemsize
    payload = data[12 + hlen :]
    if len(payload) < expected:
        raise TruncatedPayload(f"payload has {len(payload)} bytes, header implies {expected}")
    if len(payload) > expected:
        raise TrailingBytes(f"payload has {len(payload)} bytes, header implies {expected}")

    flat = np.frombuffer(payload, dtype=dt)
    try:
        if kind == "labels":
            return LabelVolume(flat.reshape((x, y, z), order="F"), header["num_classes"])
        if kind == "prob":
            blocks = flat.reshape((n_blocks, x * y * z))
            return ProbStack(np.stack([b.reshape((x, y, z), order="F") for b in blocks]))
        return IntensityVolume(flat.reshape((x, y, z), order="F"))
    except InvalidVolume as exc:
        raise InvalidHeaderField(f"payload violates {kind} invariants: {exc}") from exc


def load_svol(path) -> Volume:
    with open(path, "rb") as fh:
        return read_svol(fh.read())


def save_svol(path, volume: Volume) -> None:
    with open(path, "wb") as fh:
        fh.write(write_svol(volume))


# ---------------------------------------------------------------------------
# Cohort CSV
# ---------------------------------------------------------------------------

REQUIRED_COHORT_COLUMNS = ("subject_id", "age", "sex", "diagnosis", "site")
VOLUME_PREFIX = "vol_"
WEIGHT_PREFIX = "w_"


@dataclass
class CohortRow:
    """One subject: covariates, ICV-normalised structure volumes, optional weights."""

    subject_id: str
    age: float
    sex: int
    diagnosis: int
    site: str
    volumes: dict[str, float]
    weights: dict[str, float] = field(default_factory=dict)


def _fmt(x: float | None) -> str:
    if x is None:
        return ""
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    return repr(float(x))


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        val = float(text)
    except ValueError:
        raise UnparseableField(row, col, text, "not a number") from None
    if not math.isfinite(val):
        raise UnparseableField(row, col, text, "not finite")
    return val


def _parse_binary(text: str, row: int, col: str) -> int:
    if text.strip() not in ("0", "1"):
        raise UnparseableField(row, col, text, "expected 0 or 1")
    return int(text)


def read_cohort_csv(text: str) -> list[CohortRow]:
    """Parse a cohort table.  Row numbers in errors count data rows from 1."""
    reader = csv.DictReader(io.StringIO(text))
    columns = reader.fieldnames or []
    for col in REQUIRED_COHORT_COLUMNS:
        if col not in columns:
            raise MissingColumn(f"cohort CSV lacks required column {col!r}")
    vol_cols = [c for c in columns if c.startswith(VOLUME_PREFIX)]
    if not vol_cols:
        raise MissingColumn("cohort CSV needs at least one vol_<structure> column")
    w_cols = [c for c in columns if c.startswith(WEIGHT_PREFIX)]

    rows = []
    for i, rec in enumerate(reader, start=1):
        if None in rec or any(v is None for v in rec.values()):
            raise UnparseableField(i, "*", "", "wrong number of fields")
        age = _parse_float(rec["age"], i, "age")
        if age < 0:
            raise UnparseableField(i, "age", rec["age"], "negative age")
        volumes = {}
        for c in vol_cols:
            v = _parse_float(rec[c], i, c)
            if not 0.0 <= v <= 1.0:
                raise UnparseableField(i, c, rec[c], "normalised volume outside [0, 1]")
            volumes[c[len(VOLUME_PREFIX) :]] = v
        weights = {}
        for c in w_cols:
            if rec[c] == "":
                continue
            w = _parse_float(rec[c], i, c)
            if w < 0:
                raise UnparseableField(i, c, rec[c], "negative weight")
            weights[c[len(WEIGHT_PREFIX) :]] = w
        rows.append(
            CohortRow(
                subject_id=rec["subject_id"],
                age=age,
                sex=_parse_binary(rec["sex"], i, "sex"),
                diagnosis=_parse_binary(rec["diagnosis"], i, "diagnosis"),
                site=rec["site"],
                volumes=volumes,
                weights=weights,
            )
        )
    return rows


def write_cohort_csv(rows: Sequence[CohortRow]) -> str:
    structures: list[str] = []
    weighted: list[str] = []
    for r in rows:
        structures += [s for s in r.volumes if s not in structures]
        weighted += [s for s in r.weights if s not in weighted]
    header = list(REQUIRED_COHORT_COLUMNS)
    header += [VOLUME_PREFIX + s for s in structures]
    header += [WEIGHT_PREFIX + s for s in weighted]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(
            [r.subject_id, _fmt(r.age), str(r.sex), str(r.diagnosis), r.site]
            + [_fmt(r.volumes.get(s)) for s in structures]
            + [_fmt(r.weights.get(s)) for s in weighted]
        )
    return buf.getvalue()


# ---------------------------------------------------------------------------
# Report tables
# ---------------------------------------------------------------------------

METRIC_COLUMNS = (
    "subject_id",
    "structure",
    "cv",
    "dmc",
    "iou",
    "mean_entropy",
    "volume_fraction",
    "quality_class",
)
EVAL_COLUMNS = ("subject_id", "structure", "dice", "iou", "dmc", "cv", "mean_entropy", "dice_class", "iou_class")
REGRESSION_COLUMNS = ("structure", "scheme", "beta_D", "se_D", "t_D", "p_D", "n_used", "n_excluded")
STABILITY_COLUMNS = ("from_n", "to_n", "mean_abs_change")


def write_table_csv(records: Iterable[Mapping[str, Any]], columns: Sequence[str]) -> str:
    """CSV with a fixed column set; ``None`` becomes an empty field."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([v if isinstance(v, str) else _fmt(v) for v in (rec.get(c) for c in columns)])
    return buf.getvalue()


def write_table_json(records: Iterable[Mapping[str, Any]], columns: Sequence[str] | None = None) -> str:
    out = []
    for rec in records:
        keys = columns if columns is not None else list(rec)
        out.append({k: _jsonable(rec.get(k)) for k in keys})
    return json.dumps(out, indent=2) + "\n"


def _jsonable(v: Any) -> Any:
    if isinstance(v, (np.integer,)):
        return int(v)
    if isinstance(v, (np.floating,)):
        return float(v)
    return v


def read_table_json(text: str) -> list[dict[str, Any]]:
    data = json.loads(text)
    if not isinstance(data, list) or not all(isinstance(r, dict) for r in data):
        raise ValueError("expected a JSON list of objects")
    return data
