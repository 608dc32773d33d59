import json

import numpy as np
import pytest

from qhydro import fileio
from qhydro.errors import SnapshotFormatError
from qhydro.hydrodynamics import TrajectoryRecord
from qhydro.snapshot import FieldSnapshot


def make_snapshot(seed=0):
    rng = np.random.default_rng(seed)
    n = 37
    x = np.arange(n) * 0.1 / 3
    y = (np.arange(n) % 5) * 0.7
    vx = rng.normal(size=n) * 1e-3
    vx[3] = np.nan
    return FieldSnapshot(
        time=12.0, x=x, y=y, rho=rng.uniform(1e-300, 1.0, n), vx=vx, vy=rng.normal(size=n),
        S=rng.normal(size=n) * 1e5, spacing=(0.1 / 3, 0.7), origin=(0.0, 0.0), source="qtm",
        meta={"n_elements": n, "density_cutoff": 1.3e-8},
    )


def test_snapshot_round_trip_is_bit_exact(tmp_path):
    snap = make_snapshot()
    path = fileio.write_snapshot(tmp_path / fileio.snapshot_filename(snap.time), snap)
    assert path.name == "snapshot_t00012.000.txt"
    back = fileio.read_snapshot(path)
    assert back.equals(snap)
    assert back.meta == snap.meta


def test_snapshot_header_and_layout(tmp_path):
    path = fileio.write_snapshot(tmp_path / "s.txt", make_snapshot())
    lines = path.read_text().splitlines()
    assert lines[0] == "# format: qhydro-snapshot 1"
    assert "# columns: x y rho vx vy S" in lines
    rows = [ln for ln in lines if not ln.startswith("#")]
    assert len(rows) == 37 and all(len(r.split()) == 6 for r in rows)


def test_writes_are_reproducible(tmp_path):
    a = fileio.write_snapshot(tmp_path / "a.txt", make_snapshot())
    b = fileio.write_snapshot(tmp_path / "b.txt", make_snapshot())
    assert a.read_bytes() == b.read_bytes()


def test_corrupt_row_reports_offset(tmp_path):
    path = fileio.write_snapshot(tmp_path / "s.txt", make_snapshot())
    text = path.read_text()
    lines = text.splitlines(keepends=True)
    k = next(i for i, ln in enumerate(lines) if not ln.startswith("#")) + 4
    offset = sum(len(ln) for ln in lines[:k])
    lines[k] = lines[k].replace(lines[k].split()[2], "abc", 1)
    path.write_text("".join(lines))
    with pytest.raises(SnapshotFormatError) as info:
        fileio.read_snapshot(path)
    assert info.value.offset == offset
    assert f"byte {offset}" in str(info.value)


def test_truncated_file(tmp_path):
    path = fileio.write_snapshot(tmp_path / "s.txt", make_snapshot())
    data = path.read_bytes()
    path.write_bytes(data[: len(data) - 40])
    with pytest.raises(SnapshotFormatError):
        fileio.read_snapshot(path)


def test_missing_file(tmp_path):
    with pytest.raises(SnapshotFormatError):
        fileio.read_snapshot(tmp_path / "nope.txt")


def test_trajectories_sorted_and_counted(tmp_path):
    recs = [TrajectoryRecord(t, i, 0.1 * i, -0.1 * i, 0.0, 0.0, 0.5, 0.0, 1e-3, -2e-3) for t in (2.0, 0.0) for i in (5, 1, 3)]
    path = fileio.write_trajectories(tmp_path / "traj.txt", recs)
    data = fileio.read_trajectories(path)
    assert data.shape == (6, 8)
    assert [tuple(r) for r in data[:, :2]] == [(0, 1), (0, 3), (0, 5), (2, 1), (2, 3), (2, 5)]
    assert "# lineages: 3" in path.read_text()


def test_table_round_trip(tmp_path):
    cols = {"t": [0.0, 2.0], "n": np.array([3, 4]), "v": [np.nan, 1.5]}
    path = fileio.write_table(tmp_path / "tab.txt", cols, {"note": "x"})
    header, data = fileio.read_table(path)
    assert header["note"] == "x" and header["columns"] == "t n v"
    assert np.isnan(data["v"][0]) and data["n"][1] == 4.0


def test_manifest(tmp_path):
    m = fileio.OutputManifest(tmp_path, "run --mode qtm", "[hydro]\ndt = 0.5\n")
    p = fileio.write_snapshot(tmp_path / "a.txt", make_snapshot())
    m.add(p, "snapshot", 12.0)
    with pytest.raises(ValueError):
        m.add(p, "snapshot", 12.0)
    mp = m.write()
    doc = json.loads(mp.read_text())
    assert doc["files"][0]["path"] == "a.txt" and doc["files"][0]["time"] == 12.0
    assert doc["run_id"] == fileio.OutputManifest(tmp_path, "run --mode qtm", "[hydro]\ndt = 0.5\n").run_id
    assert fileio.verify_manifest(mp) == []
    p.write_text("tampered\n")
    assert fileio.verify_manifest(mp) == ["a.txt"]
