import json
import math
import shutil

import jsonschema
import pytest

from fhnloop import cli, pipeline
from fhnloop.collocation import ConvergenceError
from fhnloop.config import RunConfig


@pytest.fixture
def ref_copy(reference_out, tmp_path):
    dst = tmp_path / "copy"
    shutil.copytree(reference_out.out, dst)
    return dst


def test_reference_run_passes(reference_out):
    assert reference_out.exit_code == 0
    for name, res in reference_out.results.items():
        assert res.status == "ok", (name, res.message, res.gates)


def test_rerun_is_fully_cached(reference_out):
    cfg = RunConfig()
    again = pipeline.run_pipeline(cfg, out=reference_out.out)
    assert again.recomputed == []
    assert again.exit_code == 0
    for name, res in again.results.items():
        assert res.output_hash == reference_out.results[name].output_hash


def test_corrupted_checkpoint_named(ref_copy):
    target = ref_copy / "loop" / "h1.txt"
    target.write_text(target.read_text().replace("e-", "E-", 1))
    with pytest.raises(pipeline.ChecksumError, match="h1.txt"):
        pipeline.run_pipeline(RunConfig(), out=ref_copy)


def test_missing_upstream_checkpoint(tmp_path):
    with pytest.raises(pipeline.MissingCheckpointError):
        pipeline.run_pipeline(RunConfig(), out=tmp_path, stages=["loop", "reduce"])


def test_report_needs_artifacts(tmp_path):
    with pytest.raises(FileNotFoundError):
        pipeline.emit_report(tmp_path)
    assert cli.main(["report", "--out", str(tmp_path)]) == 2


def _walk_numbers(obj):
    if isinstance(obj, dict):
        for v in obj.values():
            yield from _walk_numbers(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _walk_numbers(v)
    elif isinstance(obj, (int, float)) and not isinstance(obj, bool):
        yield obj


def test_report_schema_and_finiteness(reference_out):
    report = json.loads((reference_out.out / "report" / "report.json").read_text())
    jsonschema.validate(report, pipeline._load_schema())
    assert all(math.isfinite(x) for x in _walk_numbers(report))
    for rel, sha in report["files"].items():
        assert pipeline.sha256_file(reference_out.out / rel) == sha
    lines = (reference_out.out / "report" / "summary.csv").read_text().splitlines()
    assert lines[0] == "key,value" and len(lines) > 10


def test_cli_rejects_bad_config(tmp_path, capsys):
    bad = tmp_path / "bad.ini"
    bad.write_text("[loop]\ntol = -1\n")
    assert cli.main(["loop", "--config", str(bad), "--out", str(tmp_path / "o")]) == 2
    assert "[loop] tol" in capsys.readouterr().err
    with pytest.raises(SystemExit) as exc:
        cli.main(["nonsense"])
    assert exc.value.code == 2


def test_cli_report_from_cache(ref_copy, capsys):
    assert cli.main(["run", "--out", str(ref_copy)]) == 0
    out = capsys.readouterr().out.splitlines()
    assert len(out) == 7 and all("cached" in line for line in out)


@pytest.mark.slow
def test_forced_runs_are_byte_identical(tmp_path):
    cfg = RunConfig()
    cfg.periodic.t_targets = (100.0, 150.0, 200.0)
    stages = ["loop", "periodic", "melnikov", "reduce"]
    outs = []
    for name in ("a", "b"):
        res = pipeline.run_pipeline(cfg, out=tmp_path / name, stages=stages, force=True, threads=1)
        assert res.exit_code == 0
        outs.append(res)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    assert files
    for rel in files:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel
    for s in stages:
        assert outs[0].results[s].outputs == outs[1].results[s].outputs


def test_numerical_failure_skips_dependents(ref_copy, monkeypatch):
    def broken(cfg, out, threads):
        raise ConvergenceError("forced")

    monkeypatch.setitem(pipeline.RUNNERS, "melnikov", broken)
    res = pipeline.run_pipeline(RunConfig(), out=ref_copy, stages=["melnikov", "reduce", "evolve"], force=True,
                                threads=1)
    assert res.results["melnikov"].status == "error"
    assert res.results["reduce"].status == "skipped"
    assert res.exit_code == 3


def test_gate_failure_exit_code(ref_copy, monkeypatch):
    real = pipeline.RUNNERS["melnikov"]

    def gated(cfg, out, threads):
        files, gates, summary = real(cfg, out, threads)
        return files, {**gates, "M1_negative": False}, summary

    monkeypatch.setitem(pipeline.RUNNERS, "melnikov", gated)
    res = pipeline.run_pipeline(RunConfig(), out=ref_copy, stages=["melnikov"], force=True, threads=1)
    assert res.results["melnikov"].status == "failed"
    assert res.exit_code == 1
