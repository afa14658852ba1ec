"""Prompt construction for the three bot roles.

Every user message carries five sections in a fixed order (BACKGROUND,
OBJECTS, ENVIRONMENT, TASK, EXAMPLES); the system message holds the full
background plus the API reference for the role's surface. Templates live in
templates/*.txt with {placeholder} slots so the phrasing can be retargeted
without code changes.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from importlib import resources

from .blockworld import Scene, scene_to_text
from .robodsl import DslError, NoCodeFound

DECISION = "DECISION"
EVALUATION = "EVALUATION"
CORRECTOR = "CORRECTOR"

SECTION_ORDER = ("BACKGROUND", "OBJECTS", "ENVIRONMENT", "TASK", "EXAMPLES")
DEFAULT_BUDGET = 6000  # max characters per message
_TRUNCATION_NOTE = "[examples truncated to fit the message budget]"

ACTOR_API = """\
objects() -> list of all object ids
pose(id) -> record with fields .x .y .z .theta (meters / radians)
size(id) -> record with fields .w .l .h (meters)
pick(id) -> grasp object `id` at its center
pick_at(x, y, theta) -> grasp whatever sits at (x, y) with gripper rotation theta
place(x, y, theta) -> put the held object down at (x, y) with rotation theta
place_on(id) -> put the held object centered on top of object `id`"""

QUERY_API = """\
objects() -> list of all object ids
pose(id) -> record with fields .x .y .z .theta (meters / radians)
size(id) -> record with fields .w .l .h (meters)
is_on(a, b) -> True when object `a` rests directly on object `b`
dist_xy(a, b) -> planar distance between the centers of `a` and `b`
inside(id, container) -> True when `id` lies within the container footprint"""


@dataclass(frozen=True)
class PromptBundle:
    system: str
    user: str
    role: str
    truncated: bool = False


@dataclass(frozen=True)
class EvalFailureAnalysis:
    """Corrector-bot output forwarded verbatim to the decision bot."""
    analysis: str


def _template(name: str) -> str:
    return resources.files("blockbot").joinpath("templates", name).read_text()


def _background(scene: Scene) -> str:
    return (f"A robot arm with a parallel-jaw gripper works above a square "
            f"{scene.workspace:g} m tabletop seen from overhead.")


def _environment(scene: Scene) -> str:
    return (f"Workspace bounds: x and y in [0, {scene.workspace:g}] meters; "
            f"rotations in [0, pi). Gripper: {scene.gripper_text()}.")


def _fit_budget(user: str, examples: str, budget: int) -> tuple[str, bool]:
    if len(user) <= budget:
        return user, False
    overshoot = len(user) - budget
    keep = max(0, len(examples) - overshoot - len(_TRUNCATION_NOTE) - 1)
    truncated_examples = examples[:keep].rstrip() + "\n" + _TRUNCATION_NOTE
    user = user.replace(examples, truncated_examples, 1)
    if len(user) > budget:  # examples were not the (only) culprit
        user = user[:budget]
    return user, True


def _build(scene: Scene, task, role: str, system_template: str, api: str,
           task_text: str, examples: str, budget: int) -> PromptBundle:
    system = system_template.format(workspace=f"{scene.workspace:g}", api=api)
    user = _template("user_message.txt").format(
        background=_background(scene),
        objects=scene_to_text(scene),
        environment=_environment(scene),
        task=task_text,
        examples=examples,
    )
    user, truncated = _fit_budget(user, examples, budget)
    return PromptBundle(system=system, user=user, role=role, truncated=truncated)


def build_decision_prompt(scene: Scene, task,
                          budget: int = DEFAULT_BUDGET) -> PromptBundle:
    """Five-part prompt asking for an action program on the full robot API."""
    task_text = (f"{task.instruction}\n"
                 f"Generate a program in the robot language that completes "
                 f"the task.")
    return _build(scene, task, DECISION, _template("decision_system.txt"),
                  ACTOR_API, task_text, _template("examples_actor.txt").rstrip(),
                  budget)


def build_eval_prompt(scene: Scene, task,
                      budget: int = DEFAULT_BUDGET) -> PromptBundle:
    """Same structure, read-only API; asks for a boolean `return` program."""
    task_text = (f"{task.instruction}\n"
                 f"Write a check program in the read-only language whose "
                 f"`return` value is True exactly when the task above has "
                 f"been completed, and False otherwise.")
    return _build(scene, task, EVALUATION, _template("eval_system.txt"),
                  QUERY_API, task_text, _template("examples_query.txt").rstrip(),
                  budget)


def build_correction_message(error) -> str:
    """Feedback sent back to the decision bot after a failed attempt."""
    if isinstance(error, EvalFailureAnalysis):
        return _template("correction_eval.txt").format(analysis=error.analysis)
    if isinstance(error, DslError):
        return _template("correction_runtime.txt").format(
            line=error.line, source_line=error.source_line,
            kind=error.kind if error.subkind is None
            else f"{error.kind}({error.subkind})",
            message=error.message)
    if isinstance(error, NoCodeFound):
        return _template("correction_no_code.txt")
    raise TypeError(f"cannot build a correction message from {type(error)!r}")


def build_corrector_prompt(task, final_scene: Scene, program_text: str,
                           eval_verdict: bool) -> PromptBundle:
    """Failure-analysis request for the corrector bot."""
    user = _template("corrector_user.txt").format(
        task=task.instruction,
        scene=scene_to_text(final_scene),
        program=program_text,
        verdict=eval_verdict,
    )
    return PromptBundle(system=_template("corrector_system.txt"), user=user,
                        role=CORRECTOR)


_SECTION_RE = re.compile(
    r"^BACKGROUND$.*^OBJECTS$.*^ENVIRONMENT$.*^TASK$.*^EXAMPLES$",
    re.DOTALL | re.MULTILINE)


def has_section_order(user: str) -> bool:
    """Machine check that the five headers appear in the fixed order."""
    return _SECTION_RE.search(user) is not None
