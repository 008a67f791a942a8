from __future__ import annotations

import json
from pathlib import Path

import pytest

from objdiscover.cli import main


def run_cli(*args) -> int:
    return main([str(a) for a in args])


def pipeline_files(state: Path) -> list[str]:
    return sorted(
        str(p.relative_to(state))
        for p in state.rglob("*")
        if p.is_file() and not p.name.endswith(".tmp")
    )


def run_full_pipeline(state: Path, seed=1) -> None:
    assert run_cli("synth", "--images", 14, "--classes", 2, "--noise", 0.1,
                   "--seed", seed, "--state-dir", state) == 0
    assert run_cli("propose", "--state-dir", state) == 0
    assert run_cli("score", "--neighbor-cap", 6, "--score-budget", 20, "--state-dir", state) == 0
    assert run_cli("discover", "--nu", 2, "--tau", 3, "--seed", seed, "--state-dir", state) == 0
    assert run_cli("evaluate", "--metric", "corloc", "--state-dir", state) == 0


def test_end_to_end_smoke(tmp_path):
    state = tmp_path / "state"
    run_full_pipeline(state)
    for name in ("manifest.json", "proposals.jsonl", "neighbors.json", "scores.bin",
                 "scores.index.json", "solution.jsonl", "predictions.jsonl",
                 "report.json", "report.txt", "report.csv"):
        assert (state / name).exists(), name
    report = json.loads((state / "report.json").read_text())
    assert report["metric"] == "corloc"
    assert 0.0 <= report["overall"] <= 100.0


def test_pipeline_reproducible_byte_for_byte(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_full_pipeline(a, seed=5)
    run_full_pipeline(b, seed=5)
    assert pipeline_files(a) == pipeline_files(b)
    for rel in pipeline_files(a):
        assert (a / rel).read_bytes() == (b / rel).read_bytes(), rel


def test_stage_idempotence(tmp_path):
    state = tmp_path / "state"
    run_full_pipeline(state, seed=2)
    before = {rel: (state / rel).read_bytes() for rel in pipeline_files(state)}
    stamps = {rel: (state / rel).stat().st_mtime_ns for rel in pipeline_files(state)}
    for args in (("propose",), ("score", "--neighbor-cap", 6, "--score-budget", 20),
                 ("discover", "--nu", 2, "--tau", 3, "--seed", 2)):
        assert run_cli(*args, "--state-dir", state) == 0
    after = {rel: (state / rel).read_bytes() for rel in pipeline_files(state)}
    assert before == after
    for rel, stamp in stamps.items():
        if rel.startswith(("proposals", "neighbors", "scores", "solution", "predictions")):
            assert (state / rel).stat().st_mtime_ns == stamp, f"{rel} was rewritten"


def test_discover_large_smoke(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 12, "--classes", 2, "--noise", 0.1,
                   "--seed", 3, "--state-dir", state) == 0
    assert run_cli("propose", "--state-dir", state) == 0
    assert run_cli("discover-large", "--parts", 2, "--neighbor-cap", 5, "--score-budget", 10,
                   "--nu", 2, "--tau", 3, "--seed", 3, "--state-dir", state) == 0
    assert (state / "largescale" / "plan.json").exists()
    assert (state / "solution.jsonl").exists()
    assert run_cli("evaluate", "--metric", "corloc", "--state-dir", state) == 0


def test_missing_state_dir_is_validation_failure():
    assert run_cli("propose") == 2


def test_missing_manifest_is_validation_failure(tmp_path):
    assert run_cli("propose", "--state-dir", tmp_path / "empty") == 2


def test_missing_prior_stage_outputs_are_validation_failures(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 4, "--classes", 2, "--seed", 0, "--state-dir", state) == 0
    assert run_cli("score", "--state-dir", state) == 2  # no proposals yet
    assert run_cli("discover", "--state-dir", state) == 2  # no scores yet
    assert run_cli("evaluate", "--metric", "corloc", "--state-dir", state) == 2


def test_state_dir_from_environment(tmp_path, monkeypatch):
    state = tmp_path / "env_state"
    monkeypatch.setenv("ROSD_STATE_DIR", str(state))
    assert run_cli("synth", "--images", 4, "--classes", 2, "--seed", 0) == 0
    assert (state / "manifest.json").exists()


def test_config_file_and_flag_precedence(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 8, "--classes", 2, "--seed", 4, "--state-dir", state) == 0
    cfg = tmp_path / "cfg.yaml"
    cfg.write_text("alpha: 0.4\nmax_maxima: 7\n", encoding="utf-8")
    assert run_cli("propose", "--config", cfg, "--alpha", 0.5, "--state-dir", state) == 0
    meta = json.loads((state / "propose.meta.json").read_text())
    assert meta["config"]["alpha"] == 0.5  # flag wins
    assert meta["config"]["max_maxima"] == 7  # config file applies
    assert meta["config"]["beta"] == 0.5  # default fills the rest


def test_unknown_config_field_rejected(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 4, "--classes", 2, "--seed", 0, "--state-dir", state) == 0
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"alfa": 0.4}), encoding="utf-8")
    assert run_cli("propose", "--config", cfg, "--state-dir", state) == 2


def test_invalid_flag_value_rejected(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 4, "--classes", 2, "--seed", 0, "--state-dir", state) == 0
    assert run_cli("propose", "--alpha", 1.5, "--state-dir", state) == 2


def test_config_echo_covers_every_field(tmp_path):
    import dataclasses

    from objdiscover.pipeline import PipelineConfig

    state = tmp_path / "state"
    assert run_cli("synth", "--images", 6, "--classes", 2, "--seed", 1, "--state-dir", state) == 0
    assert run_cli("propose", "--state-dir", state) == 0
    meta = json.loads((state / "propose.meta.json").read_text())
    assert set(meta["config"]) == {f.name for f in dataclasses.fields(PipelineConfig)}


def test_config_hash_changes_iff_fields_change():
    import dataclasses

    from objdiscover.pipeline import PipelineConfig

    base = PipelineConfig()
    assert base.content_hash() == PipelineConfig().content_hash()
    for field in dataclasses.fields(PipelineConfig):
        current = getattr(base, field.name)
        if isinstance(current, bool):
            bumped = not current
        elif isinstance(current, (int, float)):
            bumped = current + 1
        else:
            bumped = current + "x"
        changed = dataclasses.replace(base, **{field.name: bumped})
        assert changed.content_hash() != base.content_hash(), field.name


def test_console_script_registered():
    import shutil
    import subprocess

    exe = shutil.which("objdiscover")
    if exe is None:
        pytest.skip("console script not on PATH")
    proc = subprocess.run([exe, "--help"], capture_output=True, text=True)
    assert proc.returncode == 0
    assert "propose" in proc.stdout and "discover-large" in proc.stdout


def test_multi_region_predictions(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 10, "--classes", 2, "--noise", 0.0,
                   "--seed", 6, "--state-dir", state) == 0
    assert run_cli("propose", "--state-dir", state) == 0
    assert run_cli("score", "--neighbor-cap", 5, "--score-budget", 20, "--state-dir", state) == 0
    assert run_cli("discover", "--nu", 10, "--tau", 3, "--multi", "--max-regions", 3,
                   "--seed", 6, "--state-dir", state) == 0
    docs = [json.loads(line) for line in (state / "predictions.jsonl").read_text().splitlines()]
    assert all(1 <= len(d["boxes"]) <= 3 for d in docs)
    assert run_cli("evaluate", "--metric", "detection-rate", "--state-dir", state) == 0
    assert run_cli("evaluate", "--metric", "corret", "--state-dir", state) == 0


def test_multi_defaults_nu_to_fifty(tmp_path):
    state = tmp_path / "state"
    assert run_cli("synth", "--images", 6, "--classes", 2, "--seed", 1, "--state-dir", state) == 0
    assert run_cli("propose", "--state-dir", state) == 0
    assert run_cli("score", "--neighbor-cap", 5, "--score-budget", 10, "--state-dir", state) == 0
    assert run_cli("discover", "--multi", "--state-dir", state) == 0
    meta = json.loads((state / "discover.meta.json").read_text())
    assert meta["config"]["nu"] == 50
    assert run_cli("discover", "--multi", "--nu", 25, "--state-dir", state) == 0
    meta = json.loads((state / "discover.meta.json").read_text())
    assert meta["config"]["nu"] == 25  # explicit flag still wins
