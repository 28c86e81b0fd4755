import json
import re
from pathlib import Path

import pytest
from click.testing import CliRunner

from gazecxr.cli import main
from gazecxr.synth import generate_corpus


def invoke(*args):
    return CliRunner().invoke(main, [str(a) for a in args], catch_exceptions=False)


@pytest.fixture
def corpus(tmp_path, mock_server):
    return generate_corpus(tmp_path / "corpus", n_eval=3, n_train=4, image_size=32,
                           seed=5, base_url=mock_server.base_url)


def snapshot(root: Path) -> dict:
    return {p.relative_to(root).as_posix(): (p.read_bytes(), p.stat().st_mtime_ns)
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_render_outputs_and_idempotence(corpus):
    res = invoke("render", "--config", corpus.config)
    assert res.exit_code == 0, res.output
    out = corpus.root / "out" / "overlays"
    assert len(list(out.glob("*.png"))) == 3 and len(list(out.glob("*.json"))) == 3
    side = json.loads((out / "e00000.json").read_text())
    assert {"c_max", "n_in_bounds", "spec", "input_hash", "tool_version"} <= set(side)
    before = snapshot(corpus.root / "out")
    res = invoke("render", "--config", corpus.config)
    assert "up_to_date=3" in res.output
    assert snapshot(corpus.root / "out") == before


def test_render_skips_missing_recording(corpus):
    next((corpus.root / "gaze").glob("e00001.*")).unlink()
    res = invoke("render", "--config", corpus.config)
    assert res.exit_code == 0
    assert "skipped=1" in res.output and "e00001" in res.output
    assert not (corpus.root / "out" / "overlays" / "e00001.png").exists()


def test_build_deterministic_and_counts(corpus):
    invoke("render", "--config", corpus.config)
    res = invoke("build", "--config", corpus.config)
    assert res.exit_code == 0, res.output
    manifest = corpus.root / "out" / "manifest.jsonl"
    first = manifest.read_bytes()
    rows = [json.loads(line) for line in first.decode().splitlines()]
    assert len(rows) == 15 and sorted({r["kind"] for r in rows}) == ["DDX", "ERR", "GEN", "SUM", "VQA"]
    manifest.unlink()
    invoke("build", "--config", corpus.config)
    assert manifest.read_bytes() == first


def test_build_rejects_overlapping_split(corpus):
    invoke("render", "--config", corpus.config)
    split = json.loads((corpus.root / "split.json").read_text())
    split["train_ids"].append(split["eval_ids"][0])
    (corpus.root / "split.json").write_text(json.dumps(split))
    res = invoke("build", "--config", corpus.config)
    assert res.exit_code == 1 and "e00000" in res.output
    assert not (corpus.root / "out" / "manifest.jsonl").exists()


def test_run_resume_and_score(corpus, mock_server):
    invoke("render", "--config", corpus.config)
    invoke("build", "--config", corpus.config)
    res = invoke("run", "--config", corpus.config, "--condition", "no_gaze")
    assert res.exit_code == 0 and "dispatched=15" in res.output
    res = invoke("score", "--config", corpus.config)
    assert res.exit_code == 0
    report = json.loads((corpus.root / "out" / "report.json").read_text())
    assert report["tasks"]["GEN"]["gaze"]["skipped"] is True
    assert report["tasks"]["GEN"]["no_gaze"]["skipped"] is False

    n_before = len(mock_server.app.state.requests)
    res = invoke("run", "--config", corpus.config)
    assert "dispatched=15" in res.output and "cached=15" in res.output
    assert len(mock_server.app.state.requests) - n_before == 15
    assert {p["max_tokens"] for p in mock_server.app.state.requests} == {320, 128, 64, 192}
    assert {p["temperature"] for p in mock_server.app.state.requests} == {0}

    invoke("score", "--config", corpus.config)
    out = corpus.root / "out"
    first = {n: (out / n).read_bytes() for n in ("report.json", "report.md", "scores.jsonl")}
    assert not any(c["skipped"] for t in json.loads(first["report.json"])["tasks"].values()
                   for c in (t["gaze"], t["no_gaze"]))
    invoke("score", "--config", corpus.config)
    assert {n: (out / n).read_bytes() for n in first} == first


def test_run_unreachable_endpoint(corpus):
    invoke("render", "--config", corpus.config)
    invoke("build", "--config", corpus.config)
    text = re.sub(r'base_url = ".*"', 'base_url = "http://127.0.0.1:9/v1"', corpus.config.read_text())
    corpus.config.write_text(text.replace("max_retries = 2", "max_retries = 0"))
    # endpoint edits do not invalidate the instance manifest
    res = invoke("run", "--config", corpus.config, "--condition", "gaze")
    assert res.exit_code == 2 and "errors=15" in res.output
    assert not list((corpus.root / "out" / "cache").glob("*.json"))


def test_stale_manifest_detected(corpus):
    invoke("render", "--config", corpus.config)
    invoke("build", "--config", corpus.config)
    res = invoke("run", "--config", corpus.config, "--seed", "99")
    assert res.exit_code == 1 and "stale" in res.output


def test_validate_is_read_only(corpus):
    before = snapshot(corpus.root)
    res = invoke("validate", "--config", corpus.config, "--json")
    assert res.exit_code == 0, res.output
    doc = json.loads(res.output)
    assert doc["counts"]["eval_ids"] == 3 and doc["counts"]["errors"] == 0
    assert snapshot(corpus.root) == before
    (corpus.root / "reports.jsonl").write_text("{broken\n")
    assert invoke("validate", "--config", corpus.config).exit_code == 1


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text("seed = 'x'\n")
    res = invoke("build", "--config", cfg)
    assert res.exit_code == 1 and "config error" in res.output


def test_synth_command(tmp_path):
    res = invoke("synth", tmp_path / "c", "--n-eval", 2, "--n-train", 2, "--image-size", 16)
    assert res.exit_code == 0 and Path(res.output.strip()).exists()
