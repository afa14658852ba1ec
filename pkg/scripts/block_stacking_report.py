#!/usr/bin/env python3
"""Non-gating report: train on 200 expert block_stacking demos and print the
held-out AP (target >= 0.6). Takes a few minutes on a laptop CPU.

    python3 scripts/block_stacking_report.py [--demos 200] [--steps 3000]
"""

from __future__ import annotations

import argparse
import time

from blockbot import learner, orchestrator, tasks
from blockbot.config import LearnerConfig


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--demos", type=int, default=200)
    parser.add_argument("--steps", type=int, default=3000)
    parser.add_argument("--eval-episodes", type=int, default=25)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    task = tasks.get_task("block_stacking")
    t0 = time.time()
    demos = orchestrator.expert_demos(
        task, [1000 + args.seed + i for i in range(args.demos)]).episodes
    print(f"generated {len(demos)} expert demos in {time.time() - t0:.0f}s")

    cfg = LearnerConfig(steps=args.steps, seed=args.seed)
    model = learner.QModel.create(cfg)
    t0 = time.time()
    losses = learner.train(model, demos, cfg)
    print(f"trained {args.steps} steps in {time.time() - t0:.0f}s; "
          f"final loss {losses[-1]:.5f}")

    seeds = [5000 + i for i in range(args.eval_episodes)]
    result = learner.evaluate(model, task, seeds, mask_policy=cfg.mask)
    print(f"block_stacking {result.success} {result.total - result.success} "
          f"{orchestrator.format_ap(result.ap)}  (target >= 0.6)")


if __name__ == "__main__":
    main()
