import json
import os

import pytest

from iotrace import cli, export


def test_parse_size():
    assert cli.parse_size("4096") == 4096
    assert cli.parse_size("2MB") == 2_000_000
    assert cli.parse_size("1MiB") == 1 << 20
    assert cli.parse_size("88K") == 88_000
    with pytest.raises(Exception):
        cli.parse_size("lots")


def test_usage_errors_exit_3(capsys):
    with pytest.raises(SystemExit) as info:
        cli.main(["nonsense"])
    assert info.value.code == 3
    assert cli.main(["validate"]) == 3
    assert cli.main(["run"]) == 3


def test_stream_validate_report_advise(tmp_path, capsys):
    ds = tmp_path / "ds"
    assert cli.main(["mkdataset", str(ds), "--files", "24", "--size", "16KiB"]) == 0
    assert "wrote 24 files" in capsys.readouterr().out
    prefix = str(tmp_path / "out")
    assert cli.main(["stream", "--dataset", str(ds), "--steps", "6", "--batch-size", "4",
                     "--window-every-steps", "2", "--out-prefix", prefix, "--format", "json"]) == 0
    report = json.loads(capsys.readouterr().out)
    assert report["op_counts"]["opens"] == 24 and report["op_counts"]["reads"] == 48
    for suffix in ("iotrace.ndjson", "windows.json", "oracle.ndjson", "summary.json",
                   "report.txt", "report.json", "trace.json"):
        assert os.path.exists(f"{prefix}.{suffix}"), suffix
    export.validate_trace(open(f"{prefix}.trace.json").read())

    assert cli.main(["validate", "--out-prefix", prefix]) == 0
    assert "verdict: PASS" in capsys.readouterr().out

    assert cli.main(["report", f"{prefix}.iotrace.ndjson", "--format", "json"]) == 0
    d = json.loads(capsys.readouterr().out)
    assert d["zero_reads"]["finding"] == "TRAILING_EOF_READS"

    assert cli.main(["advise", "--manifest", str(ds / "manifest.csv"), "--threshold", "20K",
                     "--emit-moves", "/fast", "--format", "json"]) == 0
    out = capsys.readouterr().out
    doc = json.loads(out[: out.rindex("}") + 1])
    assert doc["staged_file_count"] == 24
    assert out.count("\t/fast/") == 24


def test_validate_detects_mismatch(tmp_path, capsys):
    ds = tmp_path / "ds"
    cli.main(["mkdataset", str(ds), "--files", "8", "--size", "4KiB"])
    a, b = str(tmp_path / "a"), str(tmp_path / "b")
    for p in (a, b):
        cli.main(["stream", "--dataset", str(ds), "--steps", "2", "--batch-size", "4",
                  "--out-prefix", p])
    capsys.readouterr()
    assert cli.main(["validate", "--windows", f"{a}.windows.json",
                     "--oracle", f"{b}.oracle.ndjson"]) == 2
    assert "MismatchedRun" in capsys.readouterr().out


def test_checkpoint_command(tmp_path, capsys):
    assert cli.main(["checkpoint", str(tmp_path / "ck"), "--checkpoints", "3",
                     "--writes-per-checkpoint", "7", "--format", "json"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["stdio_writes"] == 21 and out["stdio_opens"] == 3


def test_run_under_preload(tmp_path, dynamic_exe, capsys):
    data = tmp_path / "in.bin"
    data.write_bytes(b"q" * 5000)
    prefix = str(tmp_path / "r")
    assert cli.main(["run", "--out-prefix", prefix, "--format", "json", "--",
                     dynamic_exe, str(data)]) == 0
    out = capsys.readouterr().out
    report = json.loads(out[out.index("{"):])
    assert report["window"]["elapsed"] > 0
    snap = export.load_log(f"{prefix}.iotrace.ndjson")
    assert snap.find(str(data)).counters.bytes_read == 10_000
    assert not list(tmp_path.glob("r.raw.*"))


def test_run_missing_target(tmp_path):
    assert cli.main(["run", "--out-prefix", str(tmp_path / "x"), "--",
                     "definitely-not-a-command-xyz"]) == 1


def test_report_on_malformed_log(tmp_path):
    p = tmp_path / "bad.ndjson"
    p.write_text("{}\n")
    assert cli.main(["report", str(p)]) == 1
