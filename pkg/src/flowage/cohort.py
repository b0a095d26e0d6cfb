"""Cohort manifests and flat key=value config files.

A manifest is a CSV with columns subject_id, age_years, velocity_path and
an optional split column ('train' or 'test'). Velocity paths are resolved
relative to the manifest's directory. Config files are plain text, one
`key = value` per line, '#' comments allowed; parse errors name the file,
the line, and what was expected.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from pathlib import Path

from .container import atomic_write_bytes, read_velocity
from .errors import ValidationError
from .geometry import VelocityField


@dataclass
class ManifestRow:
    subject_id: str
    age_years: float
    velocity_path: Path
    split: str | None = None


def read_manifest(path) -> list[ManifestRow]:
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: line 1: empty file, expected a CSV header") from None
        cols = [c.strip() for c in header]
        for need in ("subject_id", "age_years", "velocity_path"):
            if need not in cols:
                raise ValidationError(f"{path}: line 1: missing required column {need!r} (found {cols})")
        idx = {c: cols.index(c) for c in cols}
        has_split = "split" in idx

        rows: list[ManifestRow] = []
        seen: set[str] = set()
        for lineno, rec in enumerate(reader, start=2):
            if not rec or all(not c.strip() for c in rec):
                continue
            if len(rec) != len(cols):
                raise ValidationError(f"{path}: line {lineno}: expected {len(cols)} fields, found {len(rec)}")
            sid = rec[idx["subject_id"]].strip()
            if not sid:
                raise ValidationError(f"{path}: line {lineno}: empty subject_id")
            if sid in seen:
                raise ValidationError(f"{path}: line {lineno}: duplicate subject_id {sid!r}")
            seen.add(sid)
            try:
                age = float(rec[idx["age_years"]])
            except ValueError:
                raise ValidationError(
                    f"{path}: line {lineno}: age_years must be a number, got {rec[idx['age_years']]!r}"
                ) from None
            if not (age == age and abs(age) != float("inf")):
                raise ValidationError(f"{path}: line {lineno}: age_years must be finite, got {age}")
            vp = (path.parent / rec[idx["velocity_path"]].strip()).resolve()
            if not vp.is_file():
                raise ValidationError(f"{path}: line {lineno}: velocity_path does not resolve to a file: {vp}")
            split = None
            if has_split:
                split = rec[idx["split"]].strip() or None
                if split is not None and split not in ("train", "test"):
                    raise ValidationError(f"{path}: line {lineno}: split must be 'train' or 'test', got {split!r}")
            rows.append(ManifestRow(sid, age, vp, split))
    if not rows:
        raise ValidationError(f"{path}: manifest has no data rows")
    return rows


def write_manifest(path, rows: list[ManifestRow]) -> None:
    path = Path(path)
    has_split = any(r.split is not None for r in rows)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["subject_id", "age_years", "velocity_path"] + (["split"] if has_split else []))
    for r in rows:
        rel = Path(r.velocity_path).resolve()
        try:
            rel = rel.relative_to(path.parent.resolve())
        except ValueError:
            pass  # outside the manifest dir: keep the absolute path
        rec = [r.subject_id, repr(float(r.age_years)), str(rel)]
        if has_split:
            rec.append(r.split or "")
        w.writerow(rec)
    atomic_write_bytes(path, buf.getvalue().encode())


def load_cohort(rows: list[ManifestRow]) -> list[tuple[VelocityField, float]]:
    """Load velocity fields for manifest rows, checking grid consistency."""
    out: list[tuple[VelocityField, float]] = []
    dims = spacing = None
    for r in rows:
        v = read_velocity(r.velocity_path)
        if dims is None:
            dims, spacing = v.dims, v.spacing
        elif v.dims != dims or v.spacing != spacing:
            raise ValidationError(
                f"{r.velocity_path}: grid {v.dims}/{v.spacing} differs from first subject {dims}/{spacing}"
            )
        out.append((v, r.age_years))
    return out


def split_rows(rows: list[ManifestRow]) -> tuple[list[ManifestRow], list[ManifestRow]]:
    """(train, test) partition; rows without a split tag count as train."""
    train = [r for r in rows if r.split in (None, "train")]
    test = [r for r in rows if r.split == "test"]
    return train, test


def read_kv_config(path) -> dict[str, str]:
    """Parse a flat `key = value` config file."""
    path = Path(path)
    if not path.is_file():
        raise ValidationError(f"{path}: file not found")
    entries: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ValidationError(f"{path}: line {lineno}: expected 'key = value', got {line!r}")
        k, v = stripped.split("=", 1)
        k = k.strip()
        if not k:
            raise ValidationError(f"{path}: line {lineno}: empty key")
        if k in entries:
            raise ValidationError(f"{path}: line {lineno}: duplicate key {k!r}")
        entries[k] = v.strip()
    return entries


class ConfigReader:
    """Typed access to a parsed key=value config with spent-key tracking."""

    def __init__(self, entries: dict[str, str], where: str):
        self.entries = dict(entries)
        self.where = where
        self.used: set[str] = set()

    def _raw(self, key, default):
        self.used.add(key)
        if key in self.entries:
            return self.entries[key]
        return default

    def get_optional(self, key: str):
        """Raw string value or None; marks the key as recognized."""
        return self._raw(key, None)

    def get_str(self, key: str, default=None, choices=None) -> str:
        val = self._raw(key, default)
        if val is None:
            raise ValidationError(f"{self.where}: missing required key {key!r}")
        val = str(val)
        if choices and val not in choices:
            raise ValidationError(f"{self.where}: key {key!r} must be one of {choices}, got {val!r}")
        return val

    def get_int(self, key: str, default=None) -> int:
        val = self._raw(key, default)
        if val is None:
            raise ValidationError(f"{self.where}: missing required key {key!r}")
        try:
            return int(str(val))
        except ValueError:
            raise ValidationError(f"{self.where}: key {key!r} must be an integer, got {val!r}") from None

    def get_float(self, key: str, default=None) -> float:
        val = self._raw(key, default)
        if val is None:
            raise ValidationError(f"{self.where}: missing required key {key!r}")
        try:
            return float(str(val))
        except ValueError:
            raise ValidationError(f"{self.where}: key {key!r} must be a number, got {val!r}") from None

    def get_bool(self, key: str, default=None) -> bool:
        val = self._raw(key, default)
        if isinstance(val, bool):
            return val
        sval = str(val).strip().lower()
        if sval in ("true", "1", "yes", "on"):
            return True
        if sval in ("false", "0", "no", "off"):
            return False
        raise ValidationError(f"{self.where}: key {key!r} must be a boolean, got {val!r}")

    def get_tuple(self, key: str, n: int, cast, default=None):
        val = self._raw(key, default)
        if val is None:
            raise ValidationError(f"{self.where}: missing required key {key!r}")
        if not isinstance(val, str):
            return tuple(cast(x) for x in val)
        parts = [p for p in val.split(",") if p.strip()]
        if len(parts) != n:
            raise ValidationError(f"{self.where}: key {key!r} must have {n} comma-separated values, got {val!r}")
        try:
            return tuple(cast(p.strip()) for p in parts)
        except ValueError:
            raise ValidationError(f"{self.where}: key {key!r} has a malformed value: {val!r}") from None

    def reject_unknown(self) -> None:
        unknown = sorted(set(self.entries) - self.used)
        if unknown:
            raise ValidationError(f"{self.where}: unknown config keys {unknown}; expected a subset of {sorted(self.used)}")
