"""Operator command line: scene generation, DSL runs, difficulty scores,
demo harvesting (live or scripted bots), training, and evaluation.

Exit codes: 0 ok, 1 usage error, 2 runtime error, 3 external-service error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import demostore, difficulty, learner, llm, orchestrator, robodsl
from . import tasks as tasklib
from .blockworld import (PlacementExhausted, observe, render_heightmap,
                         scene_from_json, scene_hash, scene_to_json,
                         scene_to_text)
from .config import ConfigError, load_config
from .difficulty import DifficultyInput
from .orchestrator import AutoOracleReview, ReviewDecision, format_ap

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_RUNTIME = 2
EXIT_EXTERNAL = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would exit(2); we reserve 2 for runtime
        raise UsageError(message)


def _ascii_heightmap(hm: np.ndarray) -> str:
    palette = " .:-=+*#%@"
    top = float(hm.max()) or 1.0
    rows = []
    for j in range(hm.shape[1] - 1, -1, -1):  # y grows upward
        row = "".join(palette[min(int(hm[i, j] / top * (len(palette) - 1)),
                                  len(palette) - 1)]
                      for i in range(hm.shape[0]))
        rows.append(row)
    return "\n".join(rows)


def _write_pgm(hm: np.ndarray, path: Path):
    top = float(hm.max()) or 1.0
    img = np.clip(hm / top * 255.0, 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[0]} {img.shape[1]}\n255\n".encode())
        fh.write(img.T[::-1].tobytes())  # y up, row-major


def interactive_review(program_text: str, task) -> ReviewDecision:
    """Terminal prompt: show the program with line numbers, approve/edit/reject."""
    print(f"--- evaluation code for task {task.name} ---")
    for i, line in enumerate(program_text.splitlines(), start=1):
        print(f"{i:3d}  {line}")
    print("--- [a]pprove / [e]dit / [r]eject ---")
    while True:
        choice = input("review> ").strip().lower()
        if choice in ("a", "approve"):
            return ReviewDecision("approve")
        if choice in ("r", "reject"):
            return ReviewDecision("reject")
        if choice in ("e", "edit"):
            print("enter the replacement program; finish with a single '.'")
            lines = []
            while True:
                line = input()
                if line.strip() == ".":
                    break
                lines.append(line)
            return ReviewDecision("edit", "\n".join(lines))
        print("please answer a, e, or r")


# ---------------------------------------------------------------------------
# subcommands

def _cmd_score(args, cfg) -> int:
    if args.table:
        rows = []
        for task in tasklib.TASKS.values():
            d = task.difficulty_input
            s = difficulty.score(d)
            rows.append({"task": task.name, "objects": d.objects,
                         "categories": d.categories, "steps": d.steps,
                         "score": s.score, "band": s.band})
        if args.json:
            print(json.dumps(rows, indent=2))
        else:
            for r in rows:
                print(f"{r['task']:20s} o={r['objects']} c={r['categories']} "
                      f"s={r['steps']:2d} score={r['score']:2d} {r['band'][0]}")
        return EXIT_OK
    if args.task:
        d = tasklib.get_task(args.task).difficulty_input
    elif args.objects is not None:
        if None in (args.categories, args.steps):
            raise UsageError("--objects needs --categories and --steps")
        d = DifficultyInput(args.objects, args.categories, args.steps)
    else:
        raise UsageError("give --task, --objects/--categories/--steps, or --table")
    s = difficulty.score(d)
    if args.json:
        print(json.dumps({"score": s.score, "band": s.band}))
    else:
        print(f"{s.score} {s.band}")
    return EXIT_OK


def _cmd_scene(args, cfg) -> int:
    task = tasklib.get_task(args.task)
    scene = tasklib.make_scene(task, args.seed, sim=cfg.sim)
    if args.out:
        Path(args.out).write_text(json.dumps(scene_to_json(scene), indent=2))
    if args.json:
        print(json.dumps(scene_to_json(scene)))
    else:
        print(scene_to_text(scene))
        print(f"hash: {scene_hash(scene)}")
        if args.ascii:
            print(_ascii_heightmap(render_heightmap(scene)))
    return EXIT_OK


def _cmd_dsl_run(args, cfg) -> int:
    source = Path(args.file).read_text()
    scene = scene_from_json(json.loads(Path(args.scene).read_text()))
    api = robodsl.ACTOR if args.api == "actor" else robodsl.QUERY
    try:
        program = robodsl.parse(source)
        result = robodsl.execute(program, scene, api=api)
    except robodsl.DslError as exc:
        if args.json:
            print(json.dumps({"error": {"kind": exc.kind, "line": exc.line,
                                        "message": exc.message}}))
        else:
            print(f"error: {exc}")
            if exc.source_line:
                print(f"    {exc.source_line}")
        return EXIT_RUNTIME
    oracle = None
    if scene.task:
        oracle = tasklib.oracle_check(tasklib.get_task(scene.task), result.scene)
    if args.json:
        print(json.dumps({
            "trace": [{"skill": s.skill, "x": s.x, "y": s.y, "theta": s.theta,
                       "line": s.line} for s in result.trace],
            "return": result.value, "oracle": oracle}))
        return EXIT_OK
    for step in result.trace:
        print(f"{step.skill} ({step.x:.4f}, {step.y:.4f}, {step.theta:.4f}) "
              f"line {step.line}")
    print(f"return: {result.value}")
    if oracle is not None:
        print(f"oracle: {str(oracle).lower()}")
    return EXIT_OK


def _scripted_session(fixtures_dir: Path, task_name: str, role: str,
                      seed: int | None = None) -> llm.BotSession:
    base = fixtures_dir / task_name
    path = base / f"{seed:05d}" / f"{role}.json" if seed is not None \
        else base / f"{role}.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing fixture {path}")
    return llm.BotSession.scripted(llm.load_fixture(path))


def _cmd_gen_demos(args, cfg) -> int:
    task = tasklib.get_task(args.task)
    seeds = [args.seed + i for i in range(args.episodes)]
    fixtures_dir = Path(args.fixtures) if args.fixtures else None

    if args.bot == "scripted":
        if fixtures_dir is None:
            raise UsageError("--bot scripted needs --fixtures")
        eval_bot = _scripted_session(fixtures_dir, task.name, "eval")

        def decision_factory(seed):
            return _scripted_session(fixtures_dir, task.name, "decision", seed)

        def corrector_factory(seed):
            return _scripted_session(fixtures_dir, task.name, "corrector", seed)
    else:
        llm.set_max_in_flight(cfg.llm.max_in_flight)
        eval_bot = llm.BotSession.live(cfg.llm, "eval")

        def decision_factory(seed):
            return llm.BotSession.live(cfg.llm, "decision")

        def corrector_factory(seed):
            return llm.BotSession.live(cfg.llm, "corrector")

    review = interactive_review if args.review == "interactive" \
        else AutoOracleReview(sim=cfg.sim)
    scene = tasklib.make_scene(task, seeds[0], sim=cfg.sim)
    record = orchestrator.obtain_eval_code(task, scene, eval_bot, review)

    result = orchestrator.harvest(
        task, seeds, decision_factory, corrector_factory, record,
        sim=cfg.sim, rotations=cfg.learner.rotations,
        out_dir=args.out, jobs=args.jobs)
    if args.json:
        print(json.dumps({"task": task.name, "success": result.stats.success,
                          "fail": result.stats.fail,
                          "ap": result.stats.ap,
                          "divergent": result.stats.divergent}))
    else:
        print(result.stats.table_row(task.name))
    return EXIT_OK


def _cmd_expert_demos(args, cfg) -> int:
    task = tasklib.get_task(args.task)
    seeds = [args.seed + i for i in range(args.episodes)]
    result = orchestrator.expert_demos(task, seeds, sim=cfg.sim,
                                       rotations=cfg.learner.rotations,
                                       out_dir=args.out)
    if args.json:
        print(json.dumps({"task": task.name, "success": result.stats.success,
                          "fail": result.stats.fail, "ap": result.stats.ap}))
    else:
        print(result.stats.table_row(task.name))
    return EXIT_OK if result.stats.fail == 0 else EXIT_RUNTIME


def _cmd_train(args, cfg) -> int:
    episodes = [ep for ep in demostore.read(args.demos) if ep.task == args.task]
    if not episodes:
        print(f"no episodes for task {args.task} under {args.demos}",
              file=sys.stderr)
        return EXIT_RUNTIME
    model = learner.QModel.create(cfg.learner)
    t0 = time.time()
    losses = learner.train(model, episodes, cfg.learner)
    learner.save_model(model, args.out)
    print(f"trained {cfg.learner.steps} steps on {len(episodes)} episodes "
          f"in {time.time() - t0:.1f}s; final loss {losses[-1]:.5f}")
    print(f"saved {args.out}")
    return EXIT_OK


def _cmd_eval(args, cfg) -> int:
    task = tasklib.get_task(args.task)
    model = learner.load_model(args.model)
    seeds = [args.seed + i for i in range(args.episodes)]
    result = learner.evaluate(model, task, seeds, sim=cfg.sim,
                              mask_policy=cfg.learner.mask, jobs=args.jobs)
    if args.json:
        print(json.dumps({"task": task.name, "success": result.success,
                          "total": result.total, "ap": result.ap}))
    else:
        print(f"{task.name} {result.success} {result.total - result.success} "
              f"{format_ap(result.ap)}")
    return EXIT_OK


def _cmd_replay(args, cfg) -> int:
    episodes = demostore.read(args.demos)
    if args.task:
        episodes = [e for e in episodes if e.task == args.task]
    if args.source:
        episodes = [e for e in episodes if e.source == args.source.upper()]
    if not episodes:
        print("no matching episodes", file=sys.stderr)
        return EXIT_RUNTIME
    if not 0 <= args.index < len(episodes):
        raise UsageError(f"--index out of range (0..{len(episodes) - 1})")
    ep = episodes[args.index]
    print(f"episode: task={ep.task} seed={ep.seed} source={ep.source} "
          f"transitions={len(ep.transitions)}")
    for t, tr in enumerate(ep.transitions):
        a = tr.action
        print(f"[{t}] {a.skill} cell=({a.i},{a.j}) rot={a.k} "
              f"reward={tr.reward:g} done={tr.done}")
        if args.ascii:
            print(_ascii_heightmap(tr.obs.heightmap))
    if args.pgm:
        _write_pgm(ep.transitions[-1].next_obs.heightmap, Path(args.pgm))
        print(f"wrote {args.pgm}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# wiring

def _add_subparser(sub, name: str, help_text: str):
    p = sub.add_parser(name, help=help_text)
    # accepted before or after the subcommand; SUPPRESS keeps a late default
    # from clobbering a value parsed by the main parser
    p.add_argument("--config", default=argparse.SUPPRESS,
                   help="key=value config file (or set ROBOTGPT_CONFIG)")
    return p


def build_parser() -> _Parser:
    parser = _Parser(prog="blockbot",
                     description="LLM-planned tabletop pick-and-place pipeline")
    parser.add_argument("--config", help="key=value config file "
                                         "(or set ROBOTGPT_CONFIG)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = _add_subparser(sub, "score", "task difficulty score and band")
    p.add_argument("--task")
    p.add_argument("--objects", type=int)
    p.add_argument("--categories", type=int)
    p.add_argument("--steps", type=int)
    p.add_argument("--table", action="store_true",
                   help="print all benchmark tasks")
    p.add_argument("--json", action="store_true")

    p = _add_subparser(sub, "scene", "generate a seeded scene")
    p.add_argument("--task", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", help="write the scene JSON here")
    p.add_argument("--ascii", action="store_true", help="print the heightmap")
    p.add_argument("--json", action="store_true")

    p = _add_subparser(sub, "dsl-run", "run a DSL program against a scene")
    p.add_argument("--file", required=True)
    p.add_argument("--scene", required=True, help="scene JSON path")
    p.add_argument("--api", choices=["actor", "query"], default="actor")
    p.add_argument("--json", action="store_true")

    p = _add_subparser(sub, "gen-demos", "harvest demos through the bot loop")
    p.add_argument("--task", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--bot", choices=["live", "scripted"], default="scripted")
    p.add_argument("--fixtures", help="fixture dir for scripted mode")
    p.add_argument("--out", help="demo store directory")
    p.add_argument("--review", choices=["auto", "interactive"], default="auto")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--json", action="store_true")

    p = _add_subparser(sub, "expert-demos", "harvest scripted-expert demos")
    p.add_argument("--task", required=True)
    p.add_argument("--episodes", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--json", action="store_true")

    p = _add_subparser(sub, "train", "train a policy on stored demos")
    p.add_argument("--task", required=True)
    p.add_argument("--demos", required=True)
    p.add_argument("--out", required=True)

    p = _add_subparser(sub, "eval", "evaluate a trained policy")
    p.add_argument("--model", required=True)
    p.add_argument("--task", required=True)
    p.add_argument("--episodes", type=int, default=25)
    p.add_argument("--seed", type=int, default=10000)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--json", action="store_true")

    p = _add_subparser(sub, "replay", "pretty-print a stored episode")
    p.add_argument("--demos", required=True)
    p.add_argument("--task")
    p.add_argument("--source", choices=["llm", "expert", "agent"])
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--ascii", action="store_true")
    p.add_argument("--pgm", help="write the final heightmap as a PGM image")
    return parser


_COMMANDS = {
    "score": _cmd_score,
    "scene": _cmd_scene,
    "dsl-run": _cmd_dsl_run,
    "gen-demos": _cmd_gen_demos,
    "expert-demos": _cmd_expert_demos,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "replay": _cmd_replay,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        cfg = load_config(args.config)
        return _COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (llm.TransportError, llm.ApiError) as exc:
        print(f"external service error: {exc}", file=sys.stderr)
        return EXIT_EXTERNAL
    except (llm.LlmError, robodsl.DslError, demostore.StoreError,
            learner.LearnerError, learner.CheckpointError,
            orchestrator.ReviewRejected, orchestrator.EvalCodeError,
            PlacementExhausted, tasklib.PlanInfeasible,
            FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
