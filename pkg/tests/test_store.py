from __future__ import annotations

import errno
import json
import os

import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from passprefix import store as store_mod
from passprefix.errors import CorruptRecord, DuplicateRunId, NotFound, SchemaMismatch, StorageFull
from passprefix.store import RunRecord, RunStore, new_run_id
from profiles import profile


def _run(run_id, valid=True, target="t", benches=("1", "2")):
    profs = [profile([("-O0-custom", 0, 1.1, 900, True), ("sroa - 9", 9, 0.8, 850, valid)], bench=b) for b in benches]
    return RunRecord(run_id, target, "clang 6.0.0", "-O3", {"repetitions": 10}, {"objective": ["exec_time"]},
                     profs, {"clock_source": "clock_gettime", "governors": ["performance"]})


def test_save_then_load_roundtrip(tmp_path):
    s = RunStore(tmp_path)
    run = _run("a")
    assert s.save_run(run) == "a"
    assert s.load_run("a") == run
    doc = json.loads((tmp_path / "runs" / "a" / "run.json").read_text())
    assert doc["schema_version"] == 1
    prof = json.loads((tmp_path / "runs" / "a" / "profiles" / "1.json").read_text())
    assert prof["schema_version"] == 1 and prof["kind"] == "profile"


def test_duplicate_run_id(tmp_path):
    s = RunStore(tmp_path)
    s.save_run(_run("a"))
    with pytest.raises(DuplicateRunId):
        s.save_run(_run("a"))


def test_missing_run(tmp_path):
    with pytest.raises(NotFound):
        RunStore(tmp_path).load_run("nope")


def test_tampered_profile_is_detected(tmp_path):
    s = RunStore(tmp_path)
    s.save_run(_run("a"))
    p = tmp_path / "runs" / "a" / "profiles" / "2.json"
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(CorruptRecord):
        s.load_run("a")


def test_interrupted_write_leaves_index_unchanged(tmp_path, monkeypatch):
    s = RunStore(tmp_path)
    s.save_run(_run("a"))
    before = s.index_path.read_bytes()
    real_fsync = os.fsync
    calls = []

    def failing_fsync(fd):
        calls.append(fd)
        if len(calls) == 2:
            raise KeyboardInterrupt("simulated crash")
        return real_fsync(fd)

    monkeypatch.setattr(store_mod.os, "fsync", failing_fsync)
    with pytest.raises(KeyboardInterrupt):
        s.save_run(_run("b"))
    monkeypatch.undo()
    assert s.index_path.read_bytes() == before
    assert [r["run_id"] for r in s.list_runs()] == ["a"]
    assert not (tmp_path / "runs" / "b").exists()
    assert [p.name for p in (tmp_path / "runs").iterdir()] == ["a"]


def test_disk_full_maps_to_storage_full(tmp_path, monkeypatch):
    s = RunStore(tmp_path)

    def enospc(*a, **k):
        raise OSError(errno.ENOSPC, "No space left on device")

    monkeypatch.setattr(store_mod.os, "rename", enospc)
    with pytest.raises(StorageFull):
        s.save_run(_run("a"))
    monkeypatch.undo()
    assert s.list_runs() == []


def test_latest_reference(tmp_path):
    s = RunStore(tmp_path)
    assert s.latest_reference("t") is None
    s.save_run(_run("A"))
    s.save_run(_run("B", valid=False))
    assert s.latest_reference("t") == "A"
    s.save_run(_run("C"))
    assert s.latest_reference("t") == "C"
    s.save_run(_run("D", target="other"))
    assert s.latest_reference("t") == "C"


def test_listing_order_and_prune(tmp_path):
    s = RunStore(tmp_path)
    for rid in ["z", "a", "m"]:
        s.save_run(_run(rid))
    assert [r["run_id"] for r in s.list_runs()] == ["z", "a", "m"]
    s.prune("a")
    assert [r["run_id"] for r in s.list_runs()] == ["z", "m"]
    with pytest.raises(NotFound):
        s.load_run("a")


def test_schema_mismatch_in_index(tmp_path):
    (tmp_path / "index.json").write_text(json.dumps({"schema_version": 99, "runs": []}))
    with pytest.raises(SchemaMismatch):
        RunStore(tmp_path).list_runs()


def test_fixture_rows_roundtrip(tmp_path):
    s = RunStore(tmp_path)
    rows = [{"benchmark_id": "8", "first_better": "sroa - 9", "gains_removing": "simplifycfg - 34",
             "best_overall": "instcombine - 33", "exec_reduction_pct": -70.98}]
    run = RunRecord("f", "i5", report_rows=rows, provenance="transcribed")
    s.save_run(run)
    assert s.load_run("f") == run


def test_run_ids_are_unique_and_sortable():
    ids = {new_run_id() for _ in range(50)}
    assert len(ids) == 50


def test_env_root(tmp_path, monkeypatch):
    monkeypatch.setenv("PASSPREFIX_STORE", str(tmp_path / "x"))
    assert RunStore.from_env().root == tmp_path / "x"


times = st.floats(0.01, 10, allow_nan=False)


@settings(max_examples=40, deadline=None, suppress_health_check=[HealthCheck.function_scoped_fixture])
@given(st.lists(st.tuples(times, st.integers(1, 10**6), st.booleans()), min_size=1, max_size=8),
       st.text("abcdef", min_size=1, max_size=8))
def test_roundtrip_property(tmp_path_factory, pts, target):
    s = RunStore(tmp_path_factory.mktemp("store"))
    prof = profile([(f"p - {k}" if k else "-O0-custom", k, t, sz, v) for k, (t, sz, v) in enumerate(pts)])
    run = RunRecord(new_run_id(), target, profiles=[prof], environment={"n": len(pts)})
    s.save_run(run)
    assert s.load_run(run.run_id) == run
