"""Shared test utilities: hand-built scenes and scripted-bot fixtures."""

from __future__ import annotations

import json
from pathlib import Path

from blockbot import llm, promptgen, robodsl
from blockbot.blockworld import ObjectState, Scene, SHAPES
from blockbot.promptgen import EvalFailureAnalysis


def obj(oid: str, shape: str, x: float, y: float, z: float = 0.0,
        theta: float = 0.0, size=None, support: str = "TABLE",
        color: str = "gray") -> ObjectState:
    default_size, graspable = SHAPES[shape]
    return ObjectState(id=oid, shape=shape, size=size or default_size,
                       pose=(x, y, z, theta), color=color,
                       graspable=graspable, support=support)


def scene_of(*objects: ObjectState, workspace: float = 0.4, grid: int = 64,
             crop: int = 24, held: str | None = None, inhand: bytes | None = None,
             seed: int = 0, task: str | None = None) -> Scene:
    return Scene(workspace=workspace, grid=grid, crop=crop,
                 objects=tuple(objects), held=held, inhand=inhand,
                 seed=seed, step_count=0, task=task)


def fenced(code: str) -> str:
    return f"Here is the program:\n```\n{code}\n```"


MOVE_CUBE_GOOD = 'pick("cube_small")\nplace_on("cube_big")'
MOVE_CUBE_EVAL = 'return is_on("cube_small", "cube_big")'


def eval_fixture(task, scene, eval_code: str = MOVE_CUBE_EVAL) -> llm.ChatTranscript:
    bundle = promptgen.build_eval_prompt(scene, task)
    return llm.scripted_fixture(bundle.system, [(bundle.user, fenced(eval_code))])


def episode_fixtures(task, scene, eval_program: robodsl.Program,
                     attempts: list[str], analyses: list[str],
                     max_iterations: int = 3):
    """Simulate the correction protocol to produce strict-replay fixtures.

    `attempts` are raw decision-bot replies in order; `analyses` are
    corrector-bot replies consumed on judged failures while budget remains.
    """
    dec_bundle = promptgen.build_decision_prompt(scene, task)
    dec_pairs = []
    cor_pairs = []
    message = dec_bundle.user
    iterations = 0
    ai = 0
    for reply in attempts:
        dec_pairs.append((message, reply))
        try:
            code = robodsl.extract_code(reply)
            program = robodsl.parse(code)
            result = robodsl.execute(program, scene)
        except (robodsl.NoCodeFound, robodsl.DslError) as exc:
            correction = promptgen.build_correction_message(exc)
        else:
            eval_run = robodsl.execute(eval_program, result.scene,
                                       api=robodsl.QUERY)
            if eval_run.value is True:
                break
            if iterations >= max_iterations:
                break
            analysis = analyses[ai]
            ai += 1
            cor_user = promptgen.build_corrector_prompt(
                task, result.scene, code, False).user
            cor_pairs.append((cor_user, analysis))
            correction = promptgen.build_correction_message(
                EvalFailureAnalysis(analysis))
        if iterations >= max_iterations:
            break
        iterations += 1
        message = correction
    cor_system = promptgen.build_corrector_prompt(task, scene, "", False).system
    return (llm.scripted_fixture(dec_bundle.system, dec_pairs),
            llm.scripted_fixture(cor_system, cor_pairs))


def write_fixture(path: Path, transcript: llm.ChatTranscript):
    path.parent.mkdir(parents=True, exist_ok=True)
    doc = {"model": transcript.model, "temperature": transcript.temperature,
           "messages": [{"role": m.role, "content": m.content}
                        for m in transcript.messages]}
    path.write_text(json.dumps(doc, indent=2))
