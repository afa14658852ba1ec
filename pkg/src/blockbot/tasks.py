"""The eight benchmark tasks: inventories, instructions, oracle success
predicates, and scripted expert planners.

The oracle is the artifact-internal ground truth used to vet bot-written
evaluation code and to score policies. The expert emits a program in the
robot DSL whose execution completes the task from any generated scene; it
is the demonstration source when no live bot is available.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

from .blockworld import (BIN_RIM, GEN_MARGIN_FRAC, TABLE, ObjectState,
                         ObjectTemplate, Scene, make_scene as _make_scene)
from .config import SimConfig
from .difficulty import DifficultyInput
from .geometry import overlap_area, norm_angle_pi, rect_corners


class PlanInfeasible(Exception):
    """The expert could not find room to build (scene invariants violated)."""


@dataclass(frozen=True)
class TaskSpec:
    name: str
    instruction: str
    inventory: tuple[ObjectTemplate, ...]
    difficulty_input: DifficultyInput
    oracle: Callable[[Scene], bool]
    expert: Callable[[Scene], str]

    @property
    def steps(self) -> int:
        return self.difficulty_input.steps


def make_scene(task: TaskSpec, seed: int, sim: SimConfig = SimConfig()) -> Scene:
    return _make_scene(task.inventory, seed, sim=sim, task=task.name)


def oracle_check(task: TaskSpec, scene: Scene) -> bool:
    return task.oracle(scene)


def expert_plan(task: TaskSpec, scene: Scene) -> str:
    return task.expert(scene)


def get_task(name: str) -> TaskSpec:
    try:
        return TASKS[name]
    except KeyError:
        raise ValueError(f"unknown task {name!r}; known: {', '.join(TASKS)}") from None


# ---------------------------------------------------------------------------
# oracle helpers

def _eps_goal(scene: Scene) -> float:
    # 1.5 heightmap cells: a policy on a half-resolution action grid can land
    # within 0.5 action cells of any target, plus slack for targets that sit
    # on an action-cell boundary (where the two nearest cells are equally far)
    return 1.5 * scene.cell


def _frac_on(upper: ObjectState, lower: ObjectState) -> float:
    """Fraction of `upper`'s footprint resting on `lower`'s top face."""
    if abs(upper.z - lower.top) > 1e-6:
        return 0.0
    return overlap_area(upper.corners(), lower.corners()) / (upper.w * upper.l)


def _find_chain(scene: Scene, blocks: list[ObjectState]) -> list[ObjectState] | None:
    """Order `blocks` into a single vertical support chain rooted on the table."""
    ids = {b.id for b in blocks}
    base = [b for b in blocks if b.support == TABLE]
    if len(base) != 1:
        return None
    chain = [base[0]]
    remaining = {b.id: b for b in blocks if b.id != base[0].id}
    while remaining:
        nxt = [b for b in remaining.values() if b.support == chain[-1].id]
        if len(nxt) != 1:
            return None
        chain.append(nxt[0])
        del remaining[nxt[0].id]
    if any(b.support not in ids | {TABLE} for b in blocks):
        return None
    return chain


def _adjacent(a: ObjectState, b: ObjectState, eps: float) -> bool:
    return math.hypot(a.x - b.x, a.y - b.y) - a.w <= eps


def _tray_frame(container: ObjectState, obj: ObjectState) -> tuple[float, float]:
    """(u, v) coordinates of `obj`'s center in the container's frame."""
    c, s = math.cos(container.theta), math.sin(container.theta)
    dx, dy = obj.x - container.x, obj.y - container.y
    return c * dx + s * dy, -s * dx + c * dy


def _grouped(values: list[float], group_size: int, eps: float) -> list[float] | None:
    """Split sorted values into equal groups; each must hug its mean within eps.

    Returns the group means, or None if any group is too spread out.
    """
    values = sorted(values)
    means = []
    for i in range(0, len(values), group_size):
        group = values[i:i + group_size]
        mean = sum(group) / len(group)
        if any(abs(v - mean) > eps for v in group):
            return None
        means.append(mean)
    return means


# ---------------------------------------------------------------------------
# oracles

def _oracle_move_cube(scene: Scene) -> bool:
    if scene.held:
        return False
    small, big = scene.object("cube_small"), scene.object("cube_big")
    eps = _eps_goal(scene)
    return (small.support == "cube_big"
            and abs(small.x - big.x) <= eps and abs(small.y - big.y) <= eps)


def _oracle_block_stacking(scene: Scene) -> bool:
    if scene.held:
        return False
    blocks = [scene.object(f"cube_{c}") for c in "abcd"]
    return _find_chain(scene, blocks) is not None


def _oracle_pyramid(scene: Scene) -> bool:
    if scene.held:
        return False
    blocks = [scene.object(f"cube_{c}") for c in "abc"]
    base = [b for b in blocks if b.support == TABLE]
    if len(base) != 2:
        return False
    top = next(b for b in blocks if b not in base)
    if top.support not in {base[0].id, base[1].id}:
        return False
    gap = math.hypot(base[0].x - base[1].x, base[0].y - base[1].y)
    if gap > 1.2 * top.w:
        return False
    return _frac_on(top, base[0]) >= 0.25 and _frac_on(top, base[1]) >= 0.25


def _oracle_house_1(scene: Scene) -> bool:
    if scene.held:
        return False
    bricks = [scene.object(f"brick_{c}") for c in "abc"]
    chain = _find_chain(scene, bricks)
    if chain is None:
        return False
    roof = scene.object("roof")
    return roof.support == chain[-1].id and abs(roof.z - chain[-1].top) < 1e-6


def _oracle_house_2(scene: Scene) -> bool:
    if scene.held:
        return False
    a, b = scene.object("cube_a"), scene.object("cube_b")
    roof = scene.object("roof")
    if a.support != TABLE or b.support != TABLE:
        return False
    if not _adjacent(a, b, _eps_goal(scene)):
        return False
    return _frac_on(roof, a) >= 0.2 and _frac_on(roof, b) >= 0.2


def _oracle_house_3(scene: Scene) -> bool:
    if scene.held:
        return False
    a, b = scene.object("red_cube_a"), scene.object("red_cube_b")
    brick, roof = scene.object("blue_brick"), scene.object("roof")
    if a.support != TABLE or b.support != TABLE:
        return False
    if not _adjacent(a, b, _eps_goal(scene)):
        return False
    if _frac_on(brick, a) < 0.2 or _frac_on(brick, b) < 0.2:
        return False
    return roof.support == "blue_brick" and abs(roof.z - brick.top) < 1e-6


def _oracle_bottles(scene: Scene) -> bool:
    if scene.held:
        return False
    tray = scene.object("tray")
    bottles = [scene.object(f"bottle_{i}") for i in range(1, 7)]
    if any(b.support != "tray" for b in bottles):
        return False
    eps = _eps_goal(scene)
    coords = [_tray_frame(tray, b) for b in bottles]
    if any(abs(u) > tray.w / 2 or abs(v) > tray.l / 2 for u, v in coords):
        return False
    rows = _grouped([v for _, v in coords], 3, eps)
    cols = _grouped([u for u, _ in coords], 2, eps)
    if rows is None or cols is None:
        return False
    if abs(rows[0] - rows[1]) <= 2 * eps:
        return False
    return all(cols[i + 1] - cols[i] > 2 * eps for i in range(len(cols) - 1))


def _oracle_bin(scene: Scene) -> bool:
    if scene.held:
        return False
    bin_ = scene.object("bin")
    c, s = math.cos(bin_.theta), math.sin(bin_.theta)
    half = bin_.w / 2 - BIN_RIM
    for i in range(1, 9):
        blk = scene.object(f"block_{i}")
        if blk.support != "bin":
            return False
        dx, dy = blk.x - bin_.x, blk.y - bin_.y
        u, v = c * dx + s * dy, -s * dx + c * dy
        if abs(u) > half or abs(v) > half:
            return False
        if blk.top > bin_.top - 1e-9:  # must sit below the rim
            return False
    return True


# ---------------------------------------------------------------------------
# expert planners

def _fmt(v: float) -> str:
    return f"{v:.6f}"


def _pick(oid: str) -> str:
    return f'pick("{oid}")'


def _place(x: float, y: float, theta: float) -> str:
    return f"place({_fmt(x)}, {_fmt(y)}, {_fmt(theta)})"


def _place_on(oid: str) -> str:
    return f'place_on("{oid}")'


def _free_anchor(scene: Scene, half_u: float, half_v: float,
                 clearance: float = 0.008, step: float = 0.01) -> tuple[float, float]:
    """First grid point whose inflated region clears every current footprint."""
    W = scene.workspace
    margin = GEN_MARGIN_FRAC * W
    rects = [o.corners() for o in scene.objects]
    n = int((W - 2 * margin) / step) + 1
    for ix in range(n):
        for iy in range(n):
            x = margin + ix * step
            y = margin + iy * step
            region = rect_corners(x, y, 2 * (half_u + clearance),
                                  2 * (half_v + clearance), 0.0)
            if all(overlap_area(region, r) <= 1e-9 for r in rects):
                return x, y
    raise PlanInfeasible("no free region for the build site")


def _pair_site(scene: Scene, base: ObjectState, dist: float,
               avoid: Sequence[ObjectState],
               diagonals: bool = False) -> tuple[tuple[float, float], tuple[float, float], float]:
    """Place-next-to search: returns (partner spot, pair midpoint, pair axis).

    Tries the four cardinal directions in the base's frame (plus diagonals
    when allowed); a direction is valid when the partner spot stays clear of
    the not-yet-moved pieces and everything stays inside the workspace.
    """
    W = scene.workspace
    angles = [0.0, math.pi / 2, math.pi, 3 * math.pi / 2]
    if diagonals:
        angles += [math.pi / 4, 3 * math.pi / 4, 5 * math.pi / 4, 7 * math.pi / 4]
    span_half_diag = math.hypot(0.09, 0.03) / 2  # the bridging piece
    for phi in angles:
        ang = base.theta + phi
        sx = base.x + dist * math.cos(ang)
        sy = base.y + dist * math.sin(ang)
        mx = base.x + dist / 2 * math.cos(ang)
        my = base.y + dist / 2 * math.sin(ang)
        lim = math.hypot(base.w, base.l) / 2 + 1e-3
        if not (lim <= sx <= W - lim and lim <= sy <= W - lim):
            continue
        mlim = span_half_diag + 1e-3
        if not (mlim <= mx <= W - mlim and mlim <= my <= W - mlim):
            continue
        spot = rect_corners(sx, sy, base.w + 0.004, base.l + 0.004, base.theta)
        if any(overlap_area(spot, o.corners()) > 1e-9 for o in avoid):
            continue
        return (sx, sy), (mx, my), norm_angle_pi(ang)
    raise PlanInfeasible("all adjacency directions blocked")


def _pick_at_center(obj: ObjectState) -> str:
    # cube grasps are rotation-free; demonstrating theta=0 keeps the
    # rotation head of a learned policy noise-free
    return f"pick_at({_fmt(obj.x)}, {_fmt(obj.y)}, 0.000000)"


def _expert_move_cube(scene: Scene) -> str:
    big = scene.object("cube_big")
    return "\n".join([_pick_at_center(scene.object("cube_small")),
                      _place(big.x, big.y, 0.0)])


def _expert_block_stacking(scene: Scene) -> str:
    base = scene.object("cube_a")
    lines = []
    for mover in ("cube_b", "cube_c", "cube_d"):
        lines += [_pick_at_center(scene.object(mover)),
                  _place(base.x, base.y, 0.0)]
    return "\n".join(lines)


def _expert_pyramid(scene: Scene) -> str:
    cube = scene.object("cube_a")
    gap = 1.1 * cube.w  # base-center spacing; bridging top then rests 45%/45%
    ax, ay = _free_anchor(scene, half_u=gap / 2 + cube.w / 2, half_v=cube.l / 2)
    lines = [
        _pick_at_center(scene.object("cube_a")), _place(ax - gap / 2, ay, 0.0),
        _pick_at_center(scene.object("cube_b")), _place(ax + gap / 2, ay, 0.0),
        _pick_at_center(scene.object("cube_c")), _place(ax, ay, 0.0),
    ]
    return "\n".join(lines)


def _expert_house_1(scene: Scene) -> str:
    lines = []
    for mover, target in (("brick_b", "brick_a"), ("brick_c", "brick_b"),
                          ("roof", "brick_c")):
        lines += [_pick(mover), _place_on(target)]
    return "\n".join(lines)


def _expert_house_2(scene: Scene) -> str:
    base = scene.object("cube_a")
    roof = scene.object("roof")
    # the roof must line up with the cubes' square symmetry: cardinal dirs only
    (sx, sy), (mx, my), axis = _pair_site(scene, base, base.w + 0.002, [roof])
    return "\n".join([
        _pick("cube_b"), _place(sx, sy, base.theta),
        _pick("roof"), _place(mx, my, axis),
    ])


def _expert_house_3(scene: Scene) -> str:
    base = scene.object("red_cube_a")
    avoid = [scene.object("blue_brick"), scene.object("roof")]
    (sx, sy), (mx, my), axis = _pair_site(scene, base, base.w + 0.002, avoid,
                                          diagonals=True)
    return "\n".join([
        _pick("red_cube_b"), _place(sx, sy, base.theta),
        _pick("blue_brick"), _place(mx, my, axis),
        _pick("roof"), _place_on("blue_brick"),
    ])


def _expert_bottles(scene: Scene) -> str:
    tray = scene.object("tray")
    c, s = math.cos(tray.theta), math.sin(tray.theta)
    lines = []
    spots = [(u, v) for v in (-0.03, 0.03) for u in (-0.055, 0.0, 0.055)]
    for i, (u, v) in enumerate(spots, start=1):
        x = tray.x + c * u - s * v
        y = tray.y + s * u + c * v
        lines += [_pick(f"bottle_{i}"), _place(x, y, tray.theta)]
    return "\n".join(lines)


def _expert_bin(scene: Scene) -> str:
    bin_ = scene.object("bin")
    c, s = math.cos(bin_.theta), math.sin(bin_.theta)
    lines = []
    spots = [(u, v) for v in (-0.0175, 0.0175)
             for u in (-0.0525, -0.0175, 0.0175, 0.0525)]
    for i, (u, v) in enumerate(spots, start=1):
        x = bin_.x + c * u - s * v
        y = bin_.y + s * u + c * v
        lines += [_pick(f"block_{i}"), _place(x, y, bin_.theta)]
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# registry (benchmark order)

def _cube(oid: str, color: str, side: float = 0.03) -> ObjectTemplate:
    return ObjectTemplate(oid, "CUBE", (side, side, side), color)


TASKS: dict[str, TaskSpec] = {}

for _spec in [
    TaskSpec(
        name="move_cube",
        instruction="Move small cube above onto big cube",
        inventory=(_cube("cube_small", "red"), _cube("cube_big", "blue", 0.05)),
        difficulty_input=DifficultyInput(2, 1, 2),
        oracle=_oracle_move_cube,
        expert=_expert_move_cube,
    ),
    TaskSpec(
        name="block_stacking",
        instruction="Stack the given blocks together.",
        inventory=(_cube("cube_a", "green"), _cube("cube_b", "red"),
                   _cube("cube_c", "blue"), _cube("cube_d", "yellow")),
        difficulty_input=DifficultyInput(4, 1, 6),
        oracle=_oracle_block_stacking,
        expert=_expert_block_stacking,
    ),
    TaskSpec(
        name="pyramid_stacking",
        instruction="Stack the given three blocks into a pyramid shape.",
        inventory=(_cube("cube_a", "red"), _cube("cube_b", "green"),
                   _cube("cube_c", "blue")),
        difficulty_input=DifficultyInput(3, 1, 6),
        oracle=_oracle_pyramid,
        expert=_expert_pyramid,
    ),
    TaskSpec(
        name="house_building_1",
        instruction="Construct a tall building using the given three blocks "
                    "and a triangle shape.",
        inventory=(ObjectTemplate("brick_a", "BRICK", color="yellow"),
                   ObjectTemplate("brick_b", "BRICK", color="yellow"),
                   ObjectTemplate("brick_c", "BRICK", color="yellow"),
                   ObjectTemplate("roof", "TRIANGLE_ROOF", color="red")),
        difficulty_input=DifficultyInput(4, 2, 6),
        oracle=_oracle_house_1,
        expert=_expert_house_1,
    ),
    TaskSpec(
        name="house_building_2",
        instruction="Construct a bungalow using the given two cubes and a "
                    "triangle shape.",
        inventory=(_cube("cube_a", "orange"), _cube("cube_b", "orange"),
                   ObjectTemplate("roof", "TRIANGLE_ROOF", color="red")),
        difficulty_input=DifficultyInput(3, 2, 4),
        oracle=_oracle_house_2,
        expert=_expert_house_2,
    ),
    TaskSpec(
        name="house_building_3",
        instruction="Construct a house using the given two cubes (red), a "
                    "brick (blue) and a triangle shape.",
        inventory=(_cube("red_cube_a", "red"), _cube("red_cube_b", "red"),
                   ObjectTemplate("blue_brick", "BRICK", color="blue"),
                   ObjectTemplate("roof", "TRIANGLE_ROOF", color="green")),
        difficulty_input=DifficultyInput(4, 3, 6),
        oracle=_oracle_house_3,
        expert=_expert_house_3,
    ),
    TaskSpec(
        name="bottle_arrangement",
        instruction="Arrange the given six bottles neatly on a tray.",
        # the tray goes first so rejection sampling fits its big footprint
        inventory=(ObjectTemplate("tray", "TRAY", color="brown"),) +
                  tuple(ObjectTemplate(f"bottle_{i}", "BOTTLE", color="green")
                        for i in range(1, 7)),
        difficulty_input=DifficultyInput(6, 1, 12),
        oracle=_oracle_bottles,
        expert=_expert_bottles,
    ),
    TaskSpec(
        name="bin_packing",
        instruction="Pick up the blocks on the table and place them into "
                    "the bin.",
        inventory=(ObjectTemplate("bin", "BIN", color="gray"),) +
                  tuple(_cube(f"block_{i}", "purple") for i in range(1, 9)),
        difficulty_input=DifficultyInput(8, 1, 16),
        oracle=_oracle_bin,
        expert=_expert_bin,
    ),
]:
    TASKS[_spec.name] = _spec


# ---------------------------------------------------------------------------
# oracle probe scenes (used to vet bot-written evaluation code)

def probe_scenes(task: TaskSpec, seed: int = 0, n_pos: int = 10,
                 n_neg: int = 10, sim: SimConfig = SimConfig()) -> list[tuple[Scene, bool]]:
    """Labelled terminal scenes: expert-built positives, untouched negatives."""
    from . import robodsl

    probes: list[tuple[Scene, bool]] = []
    for k in range(n_neg):
        scene = make_scene(task, seed + k, sim=sim)
        probes.append((scene, False))
    for k in range(n_pos):
        scene = make_scene(task, seed + 1000 + k, sim=sim)
        program = robodsl.parse(expert_plan(task, scene))
        result = robodsl.execute(program, scene, api=robodsl.ACTOR)
        if not oracle_check(task, result.scene):
            raise PlanInfeasible(
                f"expert failed to build a positive probe for {task.name} "
                f"(seed {seed + 1000 + k})")
        probes.append((result.scene, True))
    return probes
