"""The bot pipeline: decision bot writes a program, runtime errors loop back
for correction, a vetted evaluation program judges clean runs, and the
corrector bot turns judged failures into analysis for the next attempt. At
most three correction rounds are spent per episode; successful traces become
demonstrations.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from . import demostore, promptgen, robodsl, tasks as tasklib
from .blockworld import Scene, scene_hash
from .config import SimConfig
from .llm import BotSession
from .promptgen import EvalFailureAnalysis
from .robodsl import DslError, NoCodeFound, Program
from .tasks import TaskSpec

log = logging.getLogger(__name__)

MAX_ITERATIONS = 3

# episode statuses
SUCCESS = "SUCCESS"
RUNTIME_FAILURE = "RUNTIME_FAILURE"
EVAL_FAILURE = "EVAL_FAILURE"
NO_CODE = "NO_CODE"
BUDGET_EXHAUSTED = "BUDGET_EXHAUSTED"

# eval-code approvers
HUMAN = "HUMAN"
AUTO_ORACLE_AGREEMENT = "AUTO_ORACLE_AGREEMENT"


class ReviewRejected(Exception):
    """The review hook declined the generated evaluation code."""


class EvalCodeError(Exception):
    """The evaluation bot could not produce a parseable program."""


@dataclass(frozen=True)
class ReviewDecision:
    action: str  # "approve" | "edit" | "reject"
    text: str | None = None  # replacement program for "edit"


@dataclass
class EvalCodeRecord:
    program: Program
    text: str
    approved: bool
    approver: str  # HUMAN or AUTO_ORACLE_AGREEMENT


@dataclass
class EpisodeOutcome:
    status: str                      # SUCCESS or BUDGET_EXHAUSTED
    last_failure: str | None         # RUNTIME_FAILURE / EVAL_FAILURE / NO_CODE
    iterations_used: int
    trace: list
    transcripts: dict
    eval_verdict: bool | None
    oracle_verdict: bool | None
    divergent: bool
    final_scene: Scene | None
    error: DslError | None = None


@dataclass
class SuccessStats:
    success: int
    fail: int
    divergent: int = 0

    @property
    def total(self) -> int:
        return self.success + self.fail

    @property
    def ap(self) -> float | None:
        return self.success / self.total if self.total else None

    def table_row(self, name: str) -> str:
        return f"{name} {self.success} {self.fail} {format_ap(self.ap)}"


def format_ap(ap: float | None) -> str:
    """Two decimals with a single trailing zero stripped ('1.00' -> '1.0')."""
    if ap is None:
        return "n/a"
    s = f"{ap:.2f}"
    if s.endswith("0") and len(s.split(".")[1]) == 2:
        s = s[:-1]
    return s


# ---------------------------------------------------------------------------
# evaluation-code review

class AutoOracleReview:
    """Approve iff the program agrees with the task oracle on a seeded batch
    of labelled terminal scenes."""

    approver = AUTO_ORACLE_AGREEMENT

    def __init__(self, seed: int = 0, n_pos: int = 10, n_neg: int = 10,
                 sim: SimConfig = SimConfig()):
        self.seed = seed
        self.n_pos = n_pos
        self.n_neg = n_neg
        self.sim = sim

    def __call__(self, program_text: str, task: TaskSpec) -> ReviewDecision:
        try:
            program = robodsl.parse(program_text)
        except DslError:
            return ReviewDecision("reject")
        probes = tasklib.probe_scenes(task, seed=self.seed, n_pos=self.n_pos,
                                      n_neg=self.n_neg, sim=self.sim)
        for scene, label in probes:
            try:
                result = robodsl.execute(program, scene, api=robodsl.QUERY)
            except DslError:
                return ReviewDecision("reject")
            if not isinstance(result.value, bool) or result.value != label:
                return ReviewDecision("reject")
        return ReviewDecision("approve")


def obtain_eval_code(task: TaskSpec, scene: Scene, bot: BotSession,
                     review: Callable[[str, TaskSpec], ReviewDecision],
                     cache: dict | None = None) -> EvalCodeRecord:
    """Ask the evaluation bot for a success-check program and vet it.

    A parse failure earns the bot one correction round; the reviewed program
    must be approved (or edited and approved) or ReviewRejected is raised.
    Pass a dict as `cache` to reuse approved code across scenes of one task.
    """
    if cache is not None and task.name in cache:
        return cache[task.name]
    bundle = promptgen.build_eval_prompt(scene, task)
    bot.ensure_system(bundle.system)
    reply = bot.send(bundle.user)

    program = None
    text = ""
    for attempt in range(2):
        try:
            text = robodsl.extract_code(reply)
            program = robodsl.parse(text)
            break
        except (NoCodeFound, DslError) as exc:
            if attempt == 1:
                raise EvalCodeError(f"evaluation bot produced no parseable "
                                    f"program: {exc}") from exc
            reply = bot.send(promptgen.build_correction_message(exc))
    assert program is not None

    decision = review(text, task)
    if decision.action == "approve":
        approver = getattr(review, "approver", HUMAN)
        record = EvalCodeRecord(program=program, text=text, approved=True,
                                approver=approver)
    elif decision.action == "edit":
        edited = decision.text or ""
        try:
            program = robodsl.parse(edited)
        except DslError as exc:
            raise EvalCodeError(f"edited evaluation code does not parse: {exc}") \
                from exc
        record = EvalCodeRecord(program=program, text=edited, approved=True,
                                approver=HUMAN)
    else:
        raise ReviewRejected(f"evaluation code for {task.name} was rejected")
    if cache is not None:
        cache[task.name] = record
    return record


def run_eval_program(record: EvalCodeRecord, scene: Scene) -> bool:
    """Verdict of the vetted evaluation program on a final scene.

    Programs that error out or return a non-boolean count as False.
    """
    try:
        result = robodsl.execute(record.program, scene, api=robodsl.QUERY)
    except DslError as exc:
        log.warning("evaluation program failed at runtime: %s", exc)
        return False
    if not isinstance(result.value, bool):
        log.warning("evaluation program returned %r, not a boolean", result.value)
        return False
    return result.value


# ---------------------------------------------------------------------------
# episode loop

def run_episode(task: TaskSpec, scene: Scene, decision: BotSession,
                corrector: BotSession, eval_code: EvalCodeRecord,
                max_iterations: int = MAX_ITERATIONS) -> EpisodeOutcome:
    """One scene through the generate / execute / correct loop.

    The initial request plus at most `max_iterations` correction rounds are
    sent to the decision bot; the scene is re-run from its initial state on
    every attempt.
    """
    if not eval_code.approved:
        raise ValueError("eval code has not been approved")
    bundle = promptgen.build_decision_prompt(scene, task)
    decision.ensure_system(bundle.system)
    initial_hash = scene_hash(scene)

    message = bundle.user
    iterations = 0
    outcome = EpisodeOutcome(status=BUDGET_EXHAUSTED, last_failure=None,
                             iterations_used=0, trace=[], transcripts={},
                             eval_verdict=None, oracle_verdict=None,
                             divergent=False, final_scene=None)

    while True:
        assert scene_hash(scene) == initial_hash  # reset soundness
        reply = decision.send(message)
        failure: str
        correction = None
        try:
            code = robodsl.extract_code(reply)
            program = robodsl.parse(code)
            result = robodsl.execute(program, scene, api=robodsl.ACTOR)
        except NoCodeFound as exc:
            failure = NO_CODE
            outcome.trace = []
            outcome.error = None
            correction = promptgen.build_correction_message(exc)
        except DslError as exc:
            failure = RUNTIME_FAILURE
            outcome.trace = exc.trace
            outcome.error = exc
            correction = promptgen.build_correction_message(exc)
        else:
            verdict = run_eval_program(eval_code, result.scene)
            oracle = tasklib.oracle_check(task, result.scene)
            outcome.eval_verdict = verdict
            outcome.oracle_verdict = oracle
            outcome.divergent = verdict != oracle
            outcome.trace = result.trace
            outcome.final_scene = result.scene
            outcome.error = None
            if outcome.divergent:
                log.warning("EVAL_DIVERGENCE on %s seed %s: eval=%s oracle=%s",
                            task.name, scene.seed, verdict, oracle)
            if verdict:
                outcome.status = SUCCESS
                outcome.last_failure = None
                break
            failure = EVAL_FAILURE

        outcome.last_failure = failure
        if iterations >= max_iterations:
            outcome.status = BUDGET_EXHAUSTED
            break
        if failure == EVAL_FAILURE:
            analysis_bundle = promptgen.build_corrector_prompt(
                task, outcome.final_scene, code, outcome.eval_verdict)
            corrector.ensure_system(analysis_bundle.system)
            analysis = corrector.send(analysis_bundle.user)
            correction = promptgen.build_correction_message(
                EvalFailureAnalysis(analysis))
        iterations += 1
        message = correction

    outcome.iterations_used = iterations
    outcome.transcripts = {"decision": decision.transcript,
                           "corrector": corrector.transcript}
    return outcome


# ---------------------------------------------------------------------------
# batch harvesting

@dataclass
class HarvestResult:
    stats: SuccessStats
    episodes: list            # demostore.Episode, successes only
    outcomes: list[EpisodeOutcome]
    paths: list[Path] = field(default_factory=list)


def harvest(task: TaskSpec, seeds: Sequence[int],
            decision_factory: Callable[[int], BotSession],
            corrector_factory: Callable[[int], BotSession],
            eval_code: EvalCodeRecord, *,
            sim: SimConfig = SimConfig(), rotations: int = 8,
            out_dir: str | Path | None = None, jobs: int = 1) -> HarvestResult:
    """Run one episode per seed and keep the demonstrations that both the
    evaluation program and the oracle call successful.

    Divergent episodes (evaluation program and oracle disagree) never enter
    the demo store. Per-episode errors are collected, not raised, so one bad
    seed cannot abort a batch.
    """
    def one(seed: int):
        scene = tasklib.make_scene(task, seed, sim=sim)
        try:
            return run_episode(task, scene, decision_factory(seed),
                               corrector_factory(seed), eval_code)
        except Exception as exc:  # noqa: BLE001 - aggregated per episode
            log.error("episode %s/%s failed: %s", task.name, seed, exc)
            return exc

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]

    outcomes: list[EpisodeOutcome] = []
    episodes = []
    success = fail = divergent = 0
    for seed, result in zip(seeds, results):
        if isinstance(result, Exception):
            fail += 1
            continue
        outcomes.append(result)
        if result.divergent:
            divergent += 1
        if result.status == SUCCESS and not result.divergent:
            success += 1
            episodes.append(demostore.from_trace(
                result.trace, True, task=task.name, seed=seed, source="LLM",
                workspace=sim.workspace, rotations=rotations))
        else:
            fail += 1

    stats = SuccessStats(success=success, fail=fail, divergent=divergent)
    paths = []
    if out_dir is not None and episodes:
        paths = demostore.write(episodes, out_dir)
    return HarvestResult(stats=stats, episodes=episodes, outcomes=outcomes,
                         paths=paths)


def expert_demos(task: TaskSpec, seeds: Sequence[int], *,
                 sim: SimConfig = SimConfig(), rotations: int = 8,
                 out_dir: str | Path | None = None) -> HarvestResult:
    """Demonstrations from the scripted expert instead of a live bot."""
    episodes = []
    success = fail = 0
    for seed in seeds:
        scene = tasklib.make_scene(task, seed, sim=sim)
        program = robodsl.parse(tasklib.expert_plan(task, scene))
        result = robodsl.execute(program, scene, api=robodsl.ACTOR)
        if not tasklib.oracle_check(task, result.scene):
            fail += 1
            log.error("expert plan failed the oracle on %s seed %s",
                      task.name, seed)
            continue
        success += 1
        episodes.append(demostore.from_trace(
            result.trace, True, task=task.name, seed=seed, source="EXPERT",
            workspace=sim.workspace, rotations=rotations))
    paths = []
    if out_dir is not None and episodes:
        paths = demostore.write(episodes, out_dir)
    return HarvestResult(stats=SuccessStats(success=success, fail=fail),
                         episodes=episodes, outcomes=[], paths=paths)
