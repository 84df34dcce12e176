import json
from dataclasses import replace

import numpy as np
import pytest

from vlaprune import cli
from vlaprune.config import OUTPUT_ENV, ConfigError, RunConfig, apply_overrides, config_from_dict, load_config
from vlaprune.harness import (
    CLASS_COLORS,
    read_ppm,
    render_retention,
    retention_image,
    run_suite,
    sweep,
    timing_summary,
    write_ppm,
)
from vlaprune.pipeline import PruneViolation

SMALL = {
    "model": {"num_layers": 3, "hidden_dim": 16, "num_heads": 2, "ffn_dim": 32},
    "scene": {"grid_size": 6, "feature_dim": 16},
    "episodes": 2,
    "steps": 5,
    "strategies": ["full", "none"],
    "num_text": 4,
    "chunk": 2,
}


@pytest.fixture
def small_cfg():
    return config_from_dict(SMALL)


@pytest.fixture
def cfg_file(tmp_path):
    p = tmp_path / "run.json"
    p.write_text(json.dumps(SMALL))
    return p


def test_suite_is_byte_identical(tmp_path, small_cfg):
    cfg = replace(small_cfg, repetitions=1)
    run_suite(cfg, tmp_path / "a")
    run_suite(cfg, tmp_path / "b")
    for name in ("metrics.jsonl", "summary.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()
    rows = [json.loads(l) for l in (tmp_path / "a" / "metrics.jsonl").read_text().splitlines()]
    assert len(rows) == 2 * 2 * 5 and all(r["schema_version"] == 1 for r in rows)
    assert all("forward_seconds" not in r for r in rows)
    summary = json.loads((tmp_path / "a" / "summary.json").read_text())
    assert set(summary["strategies"]) == {"full", "none"}


def test_worker_pool_matches_serial(small_cfg):
    serial = run_suite(small_cfg)["rows"]
    pooled = run_suite(replace(small_cfg, workers=2))["rows"]
    assert serial == pooled


def test_none_speedup_is_one():
    t = [{"strategy": "none", "step": 1, "forward_seconds": 0.2},
         {"strategy": "full", "step": 1, "forward_seconds": 0.1},
         {"strategy": "full", "step": 0, "forward_seconds": 9.0}]
    out = timing_summary(t)
    assert out["none"]["speedup"] == 1.0 and out["full"]["speedup"] == pytest.approx(2.0)


def test_sweep_grid(tmp_path, small_cfg):
    res = sweep(replace(small_cfg, episodes=1), {"pruner.k_d": [0, 4], "pruner.tau": [0.9]}, tmp_path)
    assert [r["params"] for r in res] == [{"pruner.k_d": 0, "pruner.tau": 0.9}, {"pruner.k_d": 4, "pruner.tau": 0.9}]
    assert len((tmp_path / "sweep.jsonl").read_text().splitlines()) == 2


# images


def test_three_token_pixel_mask(tmp_path):
    classes = np.arange(64).reshape(8, 8) % len(CLASS_COLORS)
    img = retention_image(classes, [0, 9, 63], scale=2)
    expected = np.zeros((16, 16, 3), dtype=np.uint8)
    for r in range(8):
        for c in range(8):
            color = CLASS_COLORS[classes[r, c]]
            if r * 8 + c not in (0, 9, 63):
                color = color // 4
            expected[2 * r:2 * r + 2, 2 * c:2 * c + 2] = color
    assert np.array_equal(img, expected)
    path = write_ppm(tmp_path / "x.ppm", img)
    data = path.read_bytes()
    assert data.startswith(b"P6\n16 16\n255\n") and len(data) == len(b"P6\n16 16\n255\n") + 16 * 16 * 3
    assert np.array_equal(read_ppm(path), img)


def test_all_and_none_retained(tmp_path):
    classes = np.full((4, 4), 6)
    full = retention_image(classes, range(16), scale=1)
    empty = retention_image(classes, [], scale=1)
    assert np.all(full == CLASS_COLORS[6]) and np.all(empty == CLASS_COLORS[6] // 4)
    paths = render_retention({"wrist": classes}, {}, tmp_path / "imgs", 3)
    assert [p.name for p in paths] == ["wrist_step003.ppm"]


def test_render_unwritable(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("x")
    with pytest.raises(OSError):
        render_retention({"wrist": np.zeros((2, 2), int)}, {}, blocker / "sub", 0)


# config


def test_overrides_and_errors(tmp_path, cfg_file):
    cfg = load_config(cfg_file, ["pruner.tau=0.9", "preset=paper-appendix", "task_suite=long"])
    assert cfg.pruner.tau == 0.9 and cfg.alpha == 1.0
    assert load_config(cfg_file, ["preset=paper-main", "task_suite=object"]).effective_pruner().alpha == 0.6
    assert apply_overrides({}, ["a.b=[1, 2]"]) == {"a": {"b": [1, 2]}}
    for bad in (["pruner.nope=1"], ["preset=other"], ["strategies=[\"x\"]"], ["episodes=0"],
                ["model.hidden_dim=32"], ["pruner.tau=5"], ["noequals"]):
        with pytest.raises(ConfigError):
            load_config(cfg_file, bad)
    with pytest.raises(ConfigError):
        load_config(tmp_path / "missing.json")
    with pytest.raises(ConfigError):
        RunConfig(specs=str(tmp_path / "missing.json"))


def test_specs_path_relative_to_config(tmp_path):
    (tmp_path / "specs.json").write_text('{"scene": {"grid_size": 5, "feature_dim": 16}}')
    p = tmp_path / "run.json"
    p.write_text(json.dumps({**SMALL, "specs": "specs.json"}))
    cfg = load_config(p)
    assert cfg.resolved_specs()[0].grid_size == 5


def test_output_root(monkeypatch, small_cfg):
    monkeypatch.delenv(OUTPUT_ENV, raising=False)
    assert str(small_cfg.output_root()) == "runs"
    monkeypatch.setenv(OUTPUT_ENV, "/tmp/elsewhere")
    assert str(small_cfg.output_root()) == "/tmp/elsewhere"
    assert str(small_cfg.output_root("given")) == "given"


# command line


def test_cli_verbs(tmp_path, cfg_file, capsys, monkeypatch):
    monkeypatch.setenv(OUTPUT_ENV, str(tmp_path / "env"))
    assert cli.main(["flops", "-c", str(cfg_file)]) == 0
    assert json.loads((tmp_path / "env" / "flops.json").read_text())["estimate"] == pytest.approx(0.6355)
    assert cli.main(["run", "-c", str(cfg_file), "-o", str(tmp_path / "run"), "--dump"]) == 0
    assert (tmp_path / "run" / "episode.npz").exists() and (tmp_path / "run" / "metrics.jsonl").exists()
    assert cli.main(["suite", "-c", str(cfg_file), "-o", str(tmp_path / "suite"), "--episodes", "1"]) == 0
    assert "| full |" in capsys.readouterr().out
    assert cli.main(["sweep", "-c", str(cfg_file), "-o", str(tmp_path / "sw"), "--set", "episodes=1",
                     "--grid", "pruner.k_d=0,8"]) == 0
    assert cli.main(["render", "-c", str(cfg_file), "-o", str(tmp_path / "img")]) == 0
    assert len(list((tmp_path / "img").glob("*.ppm"))) == 2 * 5


def test_cli_exit_codes(tmp_path, cfg_file, monkeypatch):
    assert cli.main(["flops", "-c", str(tmp_path / "nope.json")]) == 2
    assert cli.main(["flops", "-c", str(cfg_file), "--set", "pruner.beta=2"]) == 2
    blocker = tmp_path / "blocker"
    blocker.write_text("")
    assert cli.main(["render", "-c", str(cfg_file), "-o", str(blocker / "x")]) == 3

    def broken(self, row):
        raise PruneViolation("stage counts disagree")
    monkeypatch.setattr("vlaprune.pipeline.Pipeline._check", broken)
    assert cli.main(["run", "-c", str(cfg_file), "-o", str(tmp_path / "bad")]) == 1
