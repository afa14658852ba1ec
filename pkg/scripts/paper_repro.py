#!/usr/bin/env python3
"""Live-endpoint benchmark run: 25 seeded scenes per task through the full
bot pipeline, printed as a Success/Fail/AP table.

Not part of CI: it needs a configured chat-completions endpoint and a real
key, and live bots are nondeterministic. Usage:

    export ROBOTGPT_API_KEY=...
    python3 scripts/paper_repro.py --config my.cfg [--episodes 25]
    # or target one task:
    python3 scripts/paper_repro.py --config my.cfg --task move_cube

The endpoint and model come from llm.endpoint / llm.model in the config
file. Transcripts are recorded under --record-dir so any run can be
replayed later with `blockbot gen-demos --bot scripted`.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from blockbot import llm, orchestrator, tasks
from blockbot.config import load_config
from blockbot.orchestrator import AutoOracleReview


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--config", required=False,
                        help="config file with llm.endpoint / llm.model")
    parser.add_argument("--task", help="run a single task instead of all 8")
    parser.add_argument("--episodes", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--record-dir", default="recordings",
                        help="transcript capture directory")
    parser.add_argument("--out", help="demo store directory for successes")
    args = parser.parse_args()

    cfg = load_config(args.config)
    llm.set_max_in_flight(cfg.llm.max_in_flight)
    names = [args.task] if args.task else list(tasks.TASKS)
    record_dir = Path(args.record_dir)

    print(f"{'Task Name':22s} {'Success':>7s} {'Fail':>5s} {'AP':>5s}")
    failures = 0
    for name in names:
        task = tasks.get_task(name)
        seeds = [args.seed + i for i in range(args.episodes)]

        def record_session(role: str, tag: str) -> llm.BotSession:
            path = record_dir / name / f"{tag}" / f"{role}.json"
            return llm.BotSession.recording(cfg.llm, role, path)

        try:
            eval_bot = record_session("eval", "eval")
            record = orchestrator.obtain_eval_code(
                task, tasks.make_scene(task, seeds[0], sim=cfg.sim),
                eval_bot, AutoOracleReview(sim=cfg.sim))
            result = orchestrator.harvest(
                task, seeds,
                lambda s: record_session("decision", f"{s:05d}"),
                lambda s: record_session("corrector", f"{s:05d}"),
                record, sim=cfg.sim, rotations=cfg.learner.rotations,
                out_dir=args.out)
        except (llm.TransportError, llm.ApiError) as exc:
            print(f"{name:22s} transport failure: {exc}", file=sys.stderr)
            failures += 1
            continue
        except (orchestrator.ReviewRejected, orchestrator.EvalCodeError) as exc:
            print(f"{name:22s} eval-code failure: {exc}", file=sys.stderr)
            failures += 1
            continue
        s = result.stats
        print(f"{name:22s} {s.success:7d} {s.fail:5d} "
              f"{orchestrator.format_ap(s.ap):>5s}")
    return 3 if failures else 0


if __name__ == "__main__":
    sys.exit(main())
