"""Plain-text output tables and the checksummed run manifest.

Every file starts with a header of ``# key: value`` lines followed by
whitespace-separated rows. Floats are written with 17 significant digits so
that reading a file back reproduces the in-memory values bit for bit.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import SnapshotFormatError
from .snapshot import FieldSnapshot

SNAPSHOT_COLUMNS = ("x", "y", "rho", "vx", "vy", "S")
TRAJECTORY_COLUMNS = ("t", "id", "x", "y", "rho", "S", "Q", "Lq")
FLOAT_FMT = "%.17g"


def fmt(value: float) -> str:
    return FLOAT_FMT % value


def _header_lines(items: dict) -> list[str]:
    return [f"# {k}: {v}" for k, v in items.items()]


def _write_text(path: Path, lines: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="\n") as fh:
        fh.write("\n".join(lines))
        fh.write("\n")


def _rows(columns) -> list[str]:
    cols = [np.asarray(c) for c in columns]
    if not cols:
        return []
    out = []
    for row in zip(*cols):
        out.append(" ".join(str(int(v)) if isinstance(v, (np.integer, int)) else fmt(v) for v in row))
    return out


# ---------------------------------------------------------------- snapshots

def snapshot_filename(time: float, prefix: str = "snapshot") -> str:
    return f"{prefix}_t{time:09.3f}.txt"


def write_snapshot(path, snap: FieldSnapshot) -> Path:
    """Write ``snap`` with rows in its own order (row-major in y, then x)."""
    header = {
        "format": "qhydro-snapshot 1",
        "time": fmt(snap.time),
        "source": snap.source,
        "spacing": f"{fmt(snap.spacing[0])} {fmt(snap.spacing[1])}",
        "origin": f"{fmt(snap.origin[0])} {fmt(snap.origin[1])}",
        "points": snap.size,
        "meta": json.dumps(snap.meta, sort_keys=True, default=float),
        "columns": " ".join(SNAPSHOT_COLUMNS),
    }
    lines = _header_lines(header)
    lines += _rows([snap.x, snap.y, snap.rho, snap.vx, snap.vy, snap.S])
    _write_text(path, lines)
    return Path(path)


def _parse_header(fh, path):
    """Read header lines; returns (dict, byte offset of the first data line)."""
    header = {}
    while True:
        pos = fh.tell()
        raw = fh.readline()
        line = raw.decode("utf-8", errors="replace").rstrip("\n")
        if not line.startswith("#"):
            fh.seek(pos)
            return header, pos
        body = line[1:].strip()
        if ":" not in body:
            raise SnapshotFormatError(f"{path}: malformed header line at byte {pos}: {line!r}", offset=pos)
        k, v = body.split(":", 1)
        header[k.strip()] = v.strip()


def _parse_rows(fh, path, ncol, start):
    rows = []
    pos = start
    for raw in fh:
        line = raw.decode("utf-8", errors="replace").strip()
        if line:
            parts = line.split()
            if len(parts) != ncol:
                raise SnapshotFormatError(
                    f"{path}: expected {ncol} columns at byte {pos}, found {len(parts)}", offset=pos,
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise SnapshotFormatError(f"{path}: non-numeric value at byte {pos}: {line!r}", offset=pos) from None
        pos += len(raw)
    return np.array(rows, dtype=np.float64).reshape(-1, ncol)


def _floats(text, n, key, path):
    try:
        vals = tuple(float(v) for v in text.split())
    except ValueError:
        vals = ()
    if len(vals) != n:
        raise SnapshotFormatError(f"{path}: header field {key!r} must hold {n} numbers", offset=0)
    return vals


def read_snapshot(path) -> FieldSnapshot:
    path = Path(path)
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise SnapshotFormatError(f"cannot open {path}: {exc}", offset=0) from exc
    with fh:
        header, start = _parse_header(fh, path)
        for key in ("time", "spacing", "columns"):
            if key not in header:
                raise SnapshotFormatError(f"{path}: header lacks {key!r}", offset=0)
        if tuple(header["columns"].split()) != SNAPSHOT_COLUMNS:
            raise SnapshotFormatError(f"{path}: unexpected columns {header['columns']!r}", offset=0)
        data = _parse_rows(fh, path, len(SNAPSHOT_COLUMNS), start)
    if "points" in header and int(header["points"]) != len(data):
        raise SnapshotFormatError(
            f"{path}: header announces {header['points']} points, found {len(data)}", offset=start,
        )
    try:
        meta = json.loads(header.get("meta", "{}"))
    except json.JSONDecodeError:
        raise SnapshotFormatError(f"{path}: unreadable meta header", offset=0) from None
    try:
        return FieldSnapshot(
            time=_floats(header["time"], 1, "time", path)[0],
            x=data[:, 0].copy(), y=data[:, 1].copy(), rho=data[:, 2].copy(),
            vx=data[:, 3].copy(), vy=data[:, 4].copy(), S=data[:, 5].copy(),
            spacing=_floats(header["spacing"], 2, "spacing", path),
            origin=_floats(header.get("origin", "0 0"), 2, "origin", path),
            source=header.get("source", "qtm"),
            meta=meta,
        )
    except ValueError as exc:
        raise SnapshotFormatError(f"{path}: {exc}", offset=start) from None


# -------------------------------------------------------------- trajectories

def write_trajectories(path, records) -> Path:
    """Rows ``t id x y rho S Q Lq`` sorted by (t, id)."""
    recs = sorted(records, key=lambda r: (r.t, r.id))
    lines = _header_lines({
        "format": "qhydro-trajectories 1",
        "records": len(recs),
        "lineages": len({r.id for r in recs}),
        "columns": " ".join(TRAJECTORY_COLUMNS),
    })
    for r in recs:
        lines.append(" ".join([fmt(r.t), str(r.id), fmt(r.x), fmt(r.y), fmt(r.rho), fmt(r.S), fmt(r.Q), fmt(r.L_q)]))
    _write_text(path, lines)
    return Path(path)


def read_trajectories(path) -> np.ndarray:
    """Trajectory rows as a float array with columns ``TRAJECTORY_COLUMNS``."""
    path = Path(path)
    with open(path, "rb") as fh:
        header, start = _parse_header(fh, path)
        if tuple(header.get("columns", "").split()) != TRAJECTORY_COLUMNS:
            raise SnapshotFormatError(f"{path}: not a trajectory file", offset=0)
        return _parse_rows(fh, path, len(TRAJECTORY_COLUMNS), start)


# ------------------------------------------------------------------ tables

def write_table(path, columns: dict, header: dict | None = None) -> Path:
    """Generic whitespace table; column names are listed in the header.

    NaN marks values that were not evaluated.
    """
    names = list(columns)
    lines = _header_lines({**(header or {}), "columns": " ".join(names)})
    lines += _rows([columns[n] for n in names])
    _write_text(path, lines)
    return Path(path)


def read_table(path) -> tuple[dict, dict]:
    path = Path(path)
    with open(path, "rb") as fh:
        header, start = _parse_header(fh, path)
        names = header.get("columns", "").split()
        if not names:
            raise SnapshotFormatError(f"{path}: table header lacks 'columns'", offset=0)
        data = _parse_rows(fh, path, len(names), start)
    return header, {n: data[:, k] for k, n in enumerate(names)}


# ---------------------------------------------------------------- manifest

def sha256_of(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


@dataclass
class ManifestEntry:
    path: str
    role: str
    time: float | None = None


@dataclass
class OutputManifest:
    """Files emitted by one command; written last, after every listed file."""

    directory: Path
    command: str
    config_text: str = ""
    entries: list = field(default_factory=list)
    status: str = "ok"
    message: str = ""

    @property
    def run_id(self) -> str:
        h = hashlib.sha256(f"{self.command}\n{self.config_text}".encode())
        return h.hexdigest()[:16]

    def add(self, path, role: str, time: float | None = None) -> None:
        rel = os.path.relpath(Path(path), self.directory)
        if any(e.path == rel for e in self.entries):
            raise ValueError(f"file {rel} is already in the manifest")
        self.entries.append(ManifestEntry(rel, role, time))

    def to_dict(self) -> dict:
        files = []
        for e in self.entries:
            item = {"path": e.path, "role": e.role, "sha256": sha256_of(self.directory / e.path)}
            if e.time is not None and math.isfinite(e.time):
                item["time"] = e.time
            files.append(item)
        return {
            "run_id": self.run_id,
            "command": self.command,
            "status": self.status,
            "message": self.message,
            "config": self.config_text,
            "files": files,
        }

    def write(self, name: str = "manifest.json") -> Path:
        path = Path(self.directory) / name
        text = json.dumps(self.to_dict(), indent=2, sort_keys=True)
        _write_text(path, [text])
        return path


def verify_manifest(path) -> list[str]:
    """Paths whose checksum does not match the manifest (empty when all match)."""
    path = Path(path)
    doc = json.loads(path.read_text())
    bad = []
    for item in doc["files"]:
        target = path.parent / item["path"]
        if not target.is_file() or sha256_of(target) != item["sha256"]:
            bad.append(item["path"])
    return bad
