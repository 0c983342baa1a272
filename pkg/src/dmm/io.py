"""File formats: series/mask/latent CSVs, flat config files, run manifests,
and windowing of long real-world series."""
from __future__ import annotations

import csv
import hashlib
import json
import os
import tempfile
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError, ValidationError

FLOAT_FMT = "%.17g"


# -- series CSVs ----------------------------------------------------------------

def write_series_csv(path, values: np.ndarray, integer: bool = False, prefix: str = "ch") -> None:
    """``seq,t,<prefix>0..`` with one row per (sequence, step)."""
    values = np.asarray(values)
    if values.ndim != 3:
        raise ShapeError(f"expected (batch, T, channels), got {values.shape}")
    b, t_len, c = values.shape
    idx = np.indices((b, t_len)).reshape(2, -1).T
    flat = values.reshape(b * t_len, c)
    header = ",".join(["seq", "t", *(f"{prefix}{k}" for k in range(c))])
    if integer:
        body = np.concatenate([idx, flat.astype(np.int64)], axis=1)
        fmt = "%d"
    else:
        body = np.concatenate([idx.astype(np.float64), flat.astype(np.float64)], axis=1)
        fmt = ["%d", "%d", *([FLOAT_FMT] * c)]
    _atomic_write(path, lambda fh: np.savetxt(fh, body, fmt=fmt, delimiter=",", header=header, comments=""))


def read_series_csv(path, integer: bool = False) -> np.ndarray:
    """Inverse of :func:`write_series_csv`; rows may come in any order."""
    with open(path) as fh:
        header = fh.readline().strip().split(",")
    if header[:2] != ["seq", "t"] or len(header) < 3:
        raise ValidationError(f"{path}: header must start with seq,t and name at least one channel")
    raw = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2, dtype=np.float64)
    if raw.shape[1] != len(header):
        raise ValidationError(f"{path}: rows have {raw.shape[1]} fields, header has {len(header)}")
    seq, t = raw[:, 0].astype(np.int64), raw[:, 1].astype(np.int64)
    b, t_len = int(seq.max()) + 1, int(t.max()) + 1
    if raw.shape[0] != b * t_len or seq.min() < 0 or t.min() < 0:
        raise ValidationError(f"{path}: expected {b}x{t_len} rows, found {raw.shape[0]}")
    out = np.full((b, t_len, len(header) - 2), np.nan)
    out[seq, t] = raw[:, 2:]
    if np.isnan(out).any() and not np.isnan(raw[:, 2:]).any():
        raise ValidationError(f"{path}: duplicate or missing (seq, t) rows")
    if integer:
        if not np.all((out == 0) | (out == 1)):
            raise ValidationError(f"{path}: mask entries must be 0 or 1")
        return out.astype(np.int8)
    return out


# -- config files ---------------------------------------------------------------

def parse_config_text(text: str) -> dict[str, str]:
    """Flat ``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        if key in out:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        out[key] = value
    return out


def _coerce(value: str, kind):
    kind = str(kind)
    try:
        if "bool" in kind:
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if "tuple" in kind:
            return tuple(int(v) for v in value.replace(",", " ").split())
        if "int" in kind and "float" not in kind:
            return int(value)
        if "float" in kind:
            return float(value)
    except ValueError as exc:
        raise ConfigError(f"cannot read {value!r} as {kind}") from exc
    return value


def apply_config(obj_cls, values: dict[str, str], allowed: set[str] | None = None, **base):
    """Build dataclass ``obj_cls`` from string values, rejecting unknown keys."""
    known = {f.name: f.type for f in fields(obj_cls)}
    allowed = set(known) if allowed is None else allowed & set(known)
    kwargs = dict(base)
    for key, value in values.items():
        if key not in allowed:
            raise ConfigError(f"unknown config key {key!r}")
        kwargs[key] = _coerce(value, known[key])
    return obj_cls(**kwargs)


def load_config(path, known: set[str]) -> dict[str, str]:
    values = parse_config_text(Path(path).read_text())
    unknown = sorted(set(values) - known)
    if unknown:
        raise ConfigError(f"{path}: unknown config keys {unknown}")
    return values


# -- manifests ------------------------------------------------------------------

def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    seed: int
    inputs: dict[str, str] = field(default_factory=dict)
    outputs: dict[str, str] = field(default_factory=dict)
    seconds: float = 0.0
    checksums: dict[str, str] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def finalize(self) -> "RunManifest":
        self.checksums = {name: sha256(p) for name, p in self.outputs.items()}
        return self

    def write(self, path) -> None:
        doc = json.dumps(self.__dict__, indent=2, sort_keys=True, default=_jsonable)
        _atomic_write(path, lambda fh: fh.write(doc + "\n"))


def _jsonable(v):
    if isinstance(v, np.generic):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Path):
        return str(v)
    raise TypeError(f"cannot serialise {type(v).__name__}")


def _atomic_write(path, writer) -> None:
    path = Path(path)
    if path.parent and not path.parent.exists():
        raise ValidationError(f"directory {path.parent} does not exist")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", newline="") as fh:
            writer(fh)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def write_rows_csv(path, rows: list[dict], columns) -> None:
    def writer(fh):
        w = csv.DictWriter(fh, fieldnames=list(columns), lineterminator="\n")
        w.writeheader()
        for row in rows:
            w.writerow({k: format_value(row.get(k, "")) for k in columns})

    _atomic_write(path, writer)


def format_value(v):
    if isinstance(v, (float, np.floating)):
        return FLOAT_FMT % v
    return v


# -- real series ------------------------------------------------------------------

def read_long_csv(path) -> tuple[list[str], np.ndarray]:
    """Numeric columns of a single long series CSV (a leading non-numeric
    column such as a date is dropped)."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if len(rows) < 2:
        raise ValidationError(f"{path}: no data rows")
    header, body = rows[0], rows[1:]
    keep = []
    for k, name in enumerate(header):
        try:
            float(body[0][k])
            keep.append(k)
        except (ValueError, IndexError):
            continue
    if not keep:
        raise ValidationError(f"{path}: no numeric columns")
    try:
        data = np.array([[float(r[k]) for k in keep] for r in body], dtype=np.float64)
    except (ValueError, IndexError) as exc:
        raise ValidationError(f"{path}: malformed numeric row") from exc
    return [header[k] for k in keep], data


def window(series: np.ndarray, T: int, stride: int | None = None) -> np.ndarray:
    """Slice a (length, channels) series into (n, T, channels) windows."""
    stride = T if stride is None else stride
    if T < 1 or stride < 1:
        raise ValidationError("window length and stride must be positive")
    n = (series.shape[0] - T) // stride + 1
    if n < 1:
        raise ValidationError(f"series of length {series.shape[0]} is shorter than one window of {T}")
    return np.stack([series[k * stride : k * stride + T] for k in range(n)])
