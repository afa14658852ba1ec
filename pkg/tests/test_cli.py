import json
from pathlib import Path

import pytest

from blockbot import cli, llm, orchestrator, robodsl, tasks
from blockbot.cli import EXIT_OK, EXIT_RUNTIME, EXIT_USAGE

from helpers import (MOVE_CUBE_EVAL, MOVE_CUBE_GOOD, episode_fixtures,
                     eval_fixture, fenced, write_fixture)


def run_cli(capsys, *argv):
    code = cli.main(list(argv))
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# ---------------------------------------------------------------------------
# score

def test_score_task(capsys):
    code, out, _ = run_cli(capsys, "score", "--task", "move_cube")
    assert code == EXIT_OK
    assert out.strip() == "6 EASY"


def test_score_zero(capsys):
    code, out, _ = run_cli(capsys, "score", "--objects", "0",
                           "--categories", "0", "--steps", "0")
    assert code == EXIT_OK
    assert out.strip() == "0 EASY"


def test_score_table_bands(capsys):
    code, out, _ = run_cli(capsys, "score", "--table")
    assert code == EXIT_OK
    lines = [l for l in out.splitlines() if l.strip()]
    assert len(lines) == 8
    assert [l.split()[-1] for l in lines] == list("EMMMMHHH")


def test_score_table_json(capsys):
    code, out, _ = run_cli(capsys, "score", "--table", "--json")
    rows = json.loads(out)
    assert [r["band"][0] for r in rows] == list("EMMMMHHH")
    assert rows[0]["score"] == 6


def test_score_negative_rejected(capsys):
    code, out, err = run_cli(capsys, "score", "--objects", "-1",
                             "--categories", "0", "--steps", "0")
    assert code == EXIT_RUNTIME


def test_score_unknown_task(capsys):
    code, _, err = run_cli(capsys, "score", "--task", "nope")
    assert code == EXIT_RUNTIME
    assert "unknown task" in err


def test_score_without_selector_is_usage_error(capsys):
    code, _, err = run_cli(capsys, "score")
    assert code == EXIT_USAGE


# ---------------------------------------------------------------------------
# scene / dsl-run

def test_scene_roundtrip_same_hash(capsys, tmp_path):
    out_path = tmp_path / "s.json"
    code, out, _ = run_cli(capsys, "scene", "--task", "bin_packing",
                           "--seed", "1", "--out", str(out_path))
    assert code == EXIT_OK
    digest = [l for l in out.splitlines() if l.startswith("hash:")][0]
    code, out2, _ = run_cli(capsys, "scene", "--task", "bin_packing",
                            "--seed", "1", "--out", str(out_path))
    digest2 = [l for l in out2.splitlines() if l.startswith("hash:")][0]
    assert digest == digest2
    from blockbot.blockworld import scene_from_json, scene_hash
    reloaded = scene_from_json(json.loads(out_path.read_text()))
    assert f"hash: {scene_hash(reloaded)}" == digest


def test_dsl_run_move_cube(capsys, tmp_path):
    scene_path = tmp_path / "s.json"
    run_cli(capsys, "scene", "--task", "move_cube", "--seed", "3",
            "--out", str(scene_path))
    prog_path = tmp_path / "p.dsl"
    prog_path.write_text(MOVE_CUBE_GOOD + "\n")
    code, out, _ = run_cli(capsys, "dsl-run", "--file", str(prog_path),
                           "--scene", str(scene_path))
    assert code == EXIT_OK
    assert out.count("PICK") == 1 and out.count("PLACE") == 1
    assert "oracle: true" in out


def test_dsl_run_error_exit(capsys, tmp_path):
    scene_path = tmp_path / "s.json"
    run_cli(capsys, "scene", "--task", "move_cube", "--seed", "3",
            "--out", str(scene_path))
    prog_path = tmp_path / "p.dsl"
    prog_path.write_text("x = 1/0\n")
    code, out, _ = run_cli(capsys, "dsl-run", "--file", str(prog_path),
                           "--scene", str(scene_path))
    assert code == EXIT_RUNTIME
    assert "DIV_ZERO" in out


# ---------------------------------------------------------------------------
# gen-demos (scripted)

def write_episode_fixtures(root: Path, task, seeds, attempts_fn, analyses_fn):
    scene0 = tasks.make_scene(task, seeds[0])
    write_fixture(root / task.name / "eval.json", eval_fixture(task, scene0))
    eval_bot = llm.BotSession.scripted(eval_fixture(task, scene0))
    record = orchestrator.obtain_eval_code(task, scene0, eval_bot,
                                           orchestrator.AutoOracleReview())
    for seed in seeds:
        scene = tasks.make_scene(task, seed)
        dec, cor = episode_fixtures(task, scene, record.program,
                                    attempts_fn(seed), analyses_fn(seed))
        write_fixture(root / task.name / f"{seed:05d}" / "decision.json", dec)
        write_fixture(root / task.name / f"{seed:05d}" / "corrector.json", cor)


def test_gen_demos_scripted_all_success(capsys, tmp_path):
    task = tasks.get_task("move_cube")
    seeds = list(range(4))
    write_episode_fixtures(tmp_path / "fx", task, seeds,
                           lambda s: [fenced(MOVE_CUBE_GOOD)], lambda s: [])
    code, out, _ = run_cli(capsys, "gen-demos", "--task", "move_cube",
                           "--episodes", "4", "--bot", "scripted",
                           "--fixtures", str(tmp_path / "fx"),
                           "--out", str(tmp_path / "demos"))
    assert code == EXIT_OK
    assert out.strip().endswith("move_cube 4 0 1.0")
    assert (tmp_path / "demos" / "move_cube.llm.demos").exists()


def test_gen_demos_scripted_mixed(capsys, tmp_path):
    task = tasks.get_task("move_cube")
    seeds = list(range(4))
    wrong = 'pick("cube_small")\nplace(0.32, 0.33, 0.0)'

    def attempts(seed):
        if seed == 2:
            return [fenced(wrong)] * 4
        return [fenced(MOVE_CUBE_GOOD)]

    def analyses(seed):
        return ["analysis one", "analysis two", "analysis three"] if seed == 2 else []

    write_episode_fixtures(tmp_path / "fx", task, seeds, attempts, analyses)
    code, out, _ = run_cli(capsys, "gen-demos", "--task", "move_cube",
                           "--episodes", "4", "--bot", "scripted",
                           "--fixtures", str(tmp_path / "fx"),
                           "--out", str(tmp_path / "demos"), "--json")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert (doc["success"], doc["fail"]) == (3, 1)


def test_gen_demos_missing_fixtures(capsys, tmp_path):
    code, _, err = run_cli(capsys, "gen-demos", "--task", "move_cube",
                           "--episodes", "1", "--bot", "scripted",
                           "--fixtures", str(tmp_path / "missing"))
    assert code == EXIT_RUNTIME
    assert "missing fixture" in err


def test_gen_demos_scripted_without_fixtures_flag(capsys):
    code, _, err = run_cli(capsys, "gen-demos", "--task", "move_cube",
                           "--episodes", "1", "--bot", "scripted")
    assert code == EXIT_USAGE


def test_gen_demos_live_without_key(capsys, monkeypatch, tmp_path):
    monkeypatch.delenv("ROBOTGPT_API_KEY", raising=False)
    cfg = tmp_path / "cfg"
    cfg.write_text("llm.endpoint = http://example.invalid\nllm.model = m\n")
    code, _, err = run_cli(capsys, "--config", str(cfg), "gen-demos",
                           "--task", "move_cube", "--episodes", "1",
                           "--bot", "live")
    assert code == EXIT_RUNTIME
    assert "ROBOTGPT_API_KEY" in err


# ---------------------------------------------------------------------------
# expert-demos / train / eval / replay

def test_expert_train_eval_replay_pipeline(capsys, tmp_path):
    demos = tmp_path / "demos"
    code, out, _ = run_cli(capsys, "expert-demos", "--task", "move_cube",
                           "--episodes", "8", "--out", str(demos),
                           "--seed", "100")
    assert code == EXIT_OK
    assert out.strip().endswith("move_cube 8 0 1.0")

    cfg = tmp_path / "train.cfg"
    cfg.write_text("learner.steps = 60\nlearner.batch_size = 8\n")
    model_path = tmp_path / "m.ckpt"
    code, out, _ = run_cli(capsys, "--config", str(cfg), "train",
                           "--task", "move_cube", "--demos", str(demos),
                           "--out", str(model_path))
    assert code == EXIT_OK
    assert model_path.exists()

    code, out, _ = run_cli(capsys, "eval", "--model", str(model_path),
                           "--task", "move_cube", "--episodes", "3",
                           "--seed", "900", "--json")
    assert code == EXIT_OK
    doc = json.loads(out)
    assert doc["total"] == 3

    code, out, _ = run_cli(capsys, "replay", "--demos", str(demos),
                           "--task", "move_cube", "--index", "0", "--ascii",
                           "--pgm", str(tmp_path / "h.pgm"))
    assert code == EXIT_OK
    assert "PICK" in out and "PLACE" in out
    assert (tmp_path / "h.pgm").read_bytes().startswith(b"P5\n")


def test_replay_bad_index(capsys, tmp_path):
    demos = tmp_path / "demos"
    run_cli(capsys, "expert-demos", "--task", "move_cube", "--episodes", "1",
            "--out", str(demos))
    code, _, err = run_cli(capsys, "replay", "--demos", str(demos),
                           "--index", "5")
    assert code == EXIT_USAGE


def test_train_without_demos(capsys, tmp_path):
    (tmp_path / "empty").mkdir()
    code, _, err = run_cli(capsys, "train", "--task", "move_cube",
                           "--demos", str(tmp_path / "empty"),
                           "--out", str(tmp_path / "m.ckpt"))
    assert code == EXIT_RUNTIME


# ---------------------------------------------------------------------------
# config plumbing

def test_unknown_config_key_rejected(capsys, tmp_path):
    cfg = tmp_path / "bad.cfg"
    cfg.write_text("sim.wat = 3\n")
    code, _, err = run_cli(capsys, "--config", str(cfg), "score", "--table")
    assert code == EXIT_USAGE
    assert "unknown config key" in err


def test_config_overrides_grid(capsys, tmp_path):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("# comment\nsim.G = 32\n")
    out_path = tmp_path / "s.json"
    code, _, _ = run_cli(capsys, "--config", str(cfg), "scene", "--task",
                         "move_cube", "--seed", "0", "--out", str(out_path))
    assert code == EXIT_OK
    assert json.loads(out_path.read_text())["grid"] == 32


def test_config_flag_after_subcommand(capsys, tmp_path):
    cfg = tmp_path / "ok.cfg"
    cfg.write_text("sim.G = 16\n")
    out_path = tmp_path / "s.json"
    code, _, _ = run_cli(capsys, "scene", "--task", "move_cube", "--seed", "0",
                         "--out", str(out_path), "--config", str(cfg))
    assert code == EXIT_OK
    assert json.loads(out_path.read_text())["grid"] == 16


def test_transport_failure_exits_3(capsys, monkeypatch, tmp_path):
    monkeypatch.setenv("ROBOTGPT_API_KEY", "k")
    cfg = tmp_path / "cfg"
    # unroutable endpoint; no retries so the test is quick
    cfg.write_text("llm.endpoint = http://127.0.0.1:9/nope\n"
                   "llm.model = m\nllm.retries = 0\nllm.backoff = 0\n"
                   "llm.timeout = 2\n")
    code, _, err = run_cli(capsys, "--config", str(cfg), "gen-demos",
                           "--task", "move_cube", "--episodes", "1",
                           "--bot", "live")
    assert code == 3
    assert "external service" in err


def test_help_available_everywhere(capsys):
    for argv in (["--help"], ["score", "--help"], ["gen-demos", "--help"],
                 ["train", "--help"], ["eval", "--help"], ["replay", "--help"],
                 ["scene", "--help"], ["dsl-run", "--help"],
                 ["expert-demos", "--help"]):
        with pytest.raises(SystemExit) as exc:
            cli.main(argv)
        assert exc.value.code == 0
        capsys.readouterr()
