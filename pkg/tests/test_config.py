from pathlib import Path

import pytest

from gazecxr.config import ConfigError, load_config, parse_config

MINIMAL = """
[data]
images = "images"
gaze = "gaze"
reports = "reports.jsonl"
split = "split.json"
"""


def test_defaults_and_relative_paths(tmp_path):
    cfg = parse_config(MINIMAL, tmp_path)
    assert cfg.data.images == tmp_path / "images"
    assert cfg.output_dir == tmp_path / "out"
    assert cfg.endpoint.max_retries == 2 and cfg.corrupt_probability == 0.7317
    assert [t.value for t in cfg.tasks] == ["GEN", "SUM", "ERR", "DDX", "VQA"]


def test_syntax_error_reports_location(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config("seed = \n[data]", tmp_path, "run.toml")
    msg = str(info.value)
    assert msg.startswith("run.toml: syntax error") and "line 1" in msg


@pytest.mark.parametrize(
    "extra,location",
    [
        ("seed = -1", "seed"),
        ("bogus = 1", "bogus"),
        ('tasks = ["GEN", "XYZ"]', "tasks.1"),
        ("[overlay]\nalpha_max = 1.5", "overlay.alpha_max"),
        ("[overlay]\ncolor = [0, 0, 300]", "overlay.color"),
        ('[endpoint]\nbase_url = "http://x"\ntimeout = 0', "endpoint.timeout"),
        ('[endpoint]\nbase_url = "http://x"\nmax_retries = -1', "endpoint.max_retries"),
    ],
)
def test_schema_errors_name_the_field(tmp_path, extra, location):
    text = extra + "\n" + MINIMAL if not extra.startswith("[") else MINIMAL + extra
    with pytest.raises(ConfigError) as info:
        parse_config(text, tmp_path)
    assert any(m.startswith(location + ":") for m in info.value.messages), info.value.messages


def test_missing_data_section(tmp_path):
    with pytest.raises(ConfigError) as info:
        parse_config("seed = 1", tmp_path)
    assert info.value.messages == ["data: Field required"]


def test_overrides_and_path_checks(tmp_path):
    path = tmp_path / "run.toml"
    path.write_text(MINIMAL)
    with pytest.raises(ConfigError) as info:
        load_config(path)
    assert len(info.value.messages) == 4
    cfg = load_config(path, {"seed": 7, "tasks": ["VQA", "GEN", "GEN"]}, check_paths=False)
    assert cfg.seed == 7 and [t.value for t in cfg.tasks] == ["GEN", "VQA"]
    with pytest.raises(ConfigError):
        load_config(path, {"seed": 2**64}, check_paths=False)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "absent.toml")


def test_config_hash_is_stable(tmp_path):
    a = parse_config(MINIMAL, tmp_path)
    b = parse_config(MINIMAL, tmp_path)
    assert a.config_hash == b.config_hash
    assert parse_config("seed = 3\n" + MINIMAL, tmp_path).config_hash != a.config_hash
