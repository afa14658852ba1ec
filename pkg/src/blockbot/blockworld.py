"""Deterministic kinematic tabletop simulator.

Objects are boxes (bottles use their bounding square) resting on the table
or on each other. Pick and place are the only actions; placement applies a
support-stability rule instead of rigid-body dynamics, so every failure is
reproducible bit-for-bit.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, replace
from functools import lru_cache
from typing import Sequence

import numpy as np

from .config import SimConfig
from .geometry import (ang_dist_mod, norm_angle_pi, overlap_area,
                       overlap_region, rect_contains, rect_corners)

TABLE = "TABLE"

# shape name -> (default size (w, l, h), graspable)
SHAPES = {
    "CUBE": ((0.03, 0.03, 0.03), True),
    "BRICK": ((0.09, 0.03, 0.03), True),
    "TRIANGLE_ROOF": ((0.09, 0.03, 0.02), True),
    "BOTTLE": ((0.03, 0.03, 0.10), True),
    "TRAY": ((0.20, 0.14, 0.005), False),
    "BIN": ((0.16, 0.16, 0.04), False),
}

PHI_MIN = 0.5          # minimum supported area fraction for a stable placement
EPS_ALIGN = 0.3        # rad; roof long axis must align with its support
EPS_OVERLAP = 1e-6     # m^2; footprint overlaps below this are ignored
GRASP_FRAC = 0.6       # grasp tolerance = GRASP_FRAC * min(w, l) / 2
BIN_RIM = 0.01         # m; bin wall thickness
BIN_FLOOR = 0.005      # m; bin floor height above its z
GEN_MARGIN_FRAC = 0.2  # scene generation keeps centers this * W away from walls
GEN_CLEARANCE = 0.01   # m; extra footprint gap enforced during generation

# fault kinds
PICK_WHILE_HOLDING = "PICK_WHILE_HOLDING"
GRASP_MISS = "GRASP_MISS"
OBJECT_LOADED = "OBJECT_LOADED"
OUT_OF_WORKSPACE = "OUT_OF_WORKSPACE"
PLACE_WHILE_EMPTY = "PLACE_WHILE_EMPTY"


class RobotFault(Exception):
    """A pick/place that could not be carried out; the scene is unchanged."""

    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind
        self.message = message


class PlacementExhausted(Exception):
    """Rejection sampling could not fit the inventory into the workspace."""


@dataclass(frozen=True)
class ObjectState:
    id: str
    shape: str
    size: tuple[float, float, float]   # (w, l, h)
    pose: tuple[float, float, float, float]  # (x, y, z, theta); z = bottom
    color: str
    graspable: bool
    support: str  # id of the supporting object, or TABLE

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise ValueError(f"unknown shape {self.shape!r}")
        x, y, z, theta = self.pose
        object.__setattr__(self, "pose", (x, y, z, norm_angle_pi(theta)))

    @property
    def x(self) -> float:
        return self.pose[0]

    @property
    def y(self) -> float:
        return self.pose[1]

    @property
    def z(self) -> float:
        return self.pose[2]

    @property
    def theta(self) -> float:
        return self.pose[3]

    @property
    def w(self) -> float:
        return self.size[0]

    @property
    def l(self) -> float:
        return self.size[1]

    @property
    def h(self) -> float:
        return self.size[2]

    @property
    def top(self) -> float:
        return self.z + self.h

    @property
    def grasp_tol(self) -> float:
        return GRASP_FRAC * min(self.w, self.l) / 2.0

    def corners(self, x: float | None = None, y: float | None = None,
                theta: float | None = None) -> np.ndarray:
        return rect_corners(self.x if x is None else x,
                            self.y if y is None else y,
                            self.w, self.l,
                            self.theta if theta is None else theta)

    def contains(self, px, py):
        return rect_contains(self.x, self.y, self.w, self.l, self.theta, px, py)


@dataclass(frozen=True)
class ObjectTemplate:
    """Inventory entry; size/graspable default from the shape table."""
    id: str
    shape: str
    size: tuple[float, float, float] | None = None
    color: str = "gray"

    def instantiate(self, pose: tuple[float, float, float, float]) -> ObjectState:
        default_size, graspable = SHAPES[self.shape]
        return ObjectState(id=self.id, shape=self.shape,
                           size=self.size or default_size, pose=pose,
                           color=self.color, graspable=graspable, support=TABLE)


@dataclass(frozen=True)
class Scene:
    workspace: float
    grid: int
    crop: int
    objects: tuple[ObjectState, ...]
    held: str | None          # id of the held object, or None (gripper EMPTY)
    inhand: bytes | None      # f32 crop captured at the last pick
    seed: int
    step_count: int
    task: str | None = None

    def object(self, oid: str) -> ObjectState:
        for o in self.objects:
            if o.id == oid:
                return o
        raise KeyError(oid)

    def has_object(self, oid: str) -> bool:
        return any(o.id == oid for o in self.objects)

    @property
    def cell(self) -> float:
        return self.workspace / self.grid

    def world_objects(self) -> list[ObjectState]:
        """Objects physically in the scene (the held one is in the gripper)."""
        return [o for o in self.objects if o.id != self.held]

    def gripper_text(self) -> str:
        return f"HOLDING({self.held})" if self.held else "EMPTY"


@dataclass(frozen=True)
class Observation:
    heightmap: np.ndarray  # (G, G) f32; axis 0 is x, axis 1 is y
    inhand: np.ndarray     # (C, C) f32; zeros when the gripper is empty
    gripper: int           # 1 = holding


# ---------------------------------------------------------------------------
# rendering

@lru_cache(maxsize=8)
def _cell_centers(grid: int, workspace: float) -> tuple[np.ndarray, np.ndarray]:
    xs = (np.arange(grid) + 0.5) * (workspace / grid)
    return np.meshgrid(xs, xs, indexing="ij")


def _surface_height_at(obj: ObjectState, px, py):
    """Top height of `obj` at point(s), 0 outside its footprint.

    A BIN exposes two surfaces: the rim band at full height and the interior
    floor; everything else is a flat box top.
    """
    inside = obj.contains(px, py)
    if obj.shape == "BIN":
        inner = rect_contains(obj.x, obj.y, obj.w - 2 * BIN_RIM,
                              obj.l - 2 * BIN_RIM, obj.theta, px, py)
        h = np.where(inner, obj.z + BIN_FLOOR, obj.top)
        return np.where(inside, h, 0.0)
    return np.where(inside, obj.top, 0.0)


def render_heightmap(scene: Scene) -> np.ndarray:
    """Top-down max-height projection sampled at cell centers, f32."""
    X, Y = _cell_centers(scene.grid, scene.workspace)
    hm = np.zeros((scene.grid, scene.grid))
    for obj in scene.world_objects():
        hm = np.maximum(hm, _surface_height_at(obj, X, Y))
    return hm.astype(np.float32)


def _crop_heightmap(hm: np.ndarray, scene: Scene, x: float, y: float,
                    theta: float) -> np.ndarray:
    """C x C crop of `hm` centered at (x, y), content rotated by -theta.

    Nearest-cell sampling keeps the result bit-exact; points outside the
    workspace read as 0.
    """
    C = scene.crop
    cell = scene.cell
    offs = (np.arange(C) + 0.5 - C / 2.0) * cell
    du, dv = np.meshgrid(offs, offs, indexing="ij")
    c, s = math.cos(theta), math.sin(theta)
    px = x + c * du - s * dv
    py = y + s * du + c * dv
    ix = np.floor(px / cell).astype(np.int64)
    iy = np.floor(py / cell).astype(np.int64)
    valid = (ix >= 0) & (ix < scene.grid) & (iy >= 0) & (iy < scene.grid)
    out = np.zeros((C, C), dtype=np.float32)
    out[valid] = hm[ix[valid], iy[valid]]
    return out


def inhand_image(scene: Scene) -> np.ndarray:
    if scene.inhand is None:
        return np.zeros((scene.crop, scene.crop), dtype=np.float32)
    return np.frombuffer(scene.inhand, dtype=np.float32).reshape(scene.crop, scene.crop).copy()


def observe(scene: Scene) -> Observation:
    return Observation(heightmap=render_heightmap(scene),
                       inhand=inhand_image(scene),
                       gripper=1 if scene.held else 0)


# ---------------------------------------------------------------------------
# pick / place

def _in_workspace(scene: Scene, x: float, y: float) -> bool:
    return 0.0 <= x <= scene.workspace and 0.0 <= y <= scene.workspace


def pick(scene: Scene, x: float, y: float, theta: float) -> Scene:
    """Grasp the topmost graspable object whose center is within reach of (x, y).

    Raises RobotFault(PICK_WHILE_HOLDING | OUT_OF_WORKSPACE | GRASP_MISS |
    OBJECT_LOADED) and leaves the scene unchanged on failure.
    """
    if scene.held is not None:
        raise RobotFault(PICK_WHILE_HOLDING, f"already holding {scene.held}")
    if not _in_workspace(scene, x, y):
        raise RobotFault(OUT_OF_WORKSPACE, f"pick at ({x:.3f}, {y:.3f})")
    theta = norm_angle_pi(theta)

    candidates = [o for o in scene.world_objects()
                  if o.graspable and math.hypot(x - o.x, y - o.y) <= o.grasp_tol]
    if not candidates:
        raise RobotFault(GRASP_MISS, f"nothing graspable at ({x:.3f}, {y:.3f})")
    candidates.sort(key=lambda o: (-o.top, o.id))
    target = candidates[0]

    # the target must be the topmost thing covering the grasp point
    for other in scene.world_objects():
        if other.id != target.id and bool(other.contains(x, y)) \
                and _point_top(other, x, y) > target.top + 1e-9:
            raise RobotFault(GRASP_MISS, f"{other.id} covers the grasp point")
    if any(o.support == target.id for o in scene.world_objects()):
        raise RobotFault(OBJECT_LOADED, f"{target.id} supports another object")

    crop = _crop_heightmap(render_heightmap(scene), scene, x, y, theta)
    return replace(scene, held=target.id, inhand=crop.tobytes(),
                   step_count=scene.step_count + 1)


def _point_top(obj: ObjectState, x: float, y: float) -> float:
    return float(_surface_height_at(obj, x, y))


def _support_candidates(scene: Scene, held_rect: np.ndarray,
                        exclude: str) -> list[tuple[float, float, str, tuple[float, float]]]:
    """(top_z, overlap_area, object_id, overlap_centroid) per touching surface."""
    out = []
    for obj in scene.world_objects():
        if obj.id == exclude:
            continue
        if obj.shape == "BIN":
            outer = obj.corners()
            inner = rect_corners(obj.x, obj.y, obj.w - 2 * BIN_RIM,
                                 obj.l - 2 * BIN_RIM, obj.theta)
            a_out, c_out = overlap_region(held_rect, outer)
            a_in, c_in = overlap_region(held_rect, inner)
            a_rim = a_out - a_in
            if a_in > EPS_OVERLAP:
                out.append((obj.z + BIN_FLOOR, a_in, obj.id, c_in))
            if a_rim > EPS_OVERLAP:
                cx = (a_out * c_out[0] - a_in * c_in[0]) / a_rim
                cy = (a_out * c_out[1] - a_in * c_in[1]) / a_rim
                out.append((obj.top, a_rim, obj.id, (cx, cy)))
        else:
            a, c = overlap_region(held_rect, obj.corners())
            if a > EPS_OVERLAP:
                out.append((obj.top, a, obj.id, c))
    return out


def _roof_aligned(theta: float, support: ObjectState) -> bool:
    # square supports are symmetric under quarter turns
    period = math.pi / 2 if abs(support.w - support.l) < 1e-9 else math.pi
    return ang_dist_mod(theta, support.theta, period) <= EPS_ALIGN


def place(scene: Scene, x: float, y: float, theta: float) -> Scene:
    """Put the held object down at (x, y, theta).

    The object settles on the tallest surface overlapping its footprint if
    the supported area fraction reaches PHI_MIN (and, for a roof piece, its
    axis lines up with the support); otherwise it falls to the table,
    displaced along the overhang direction.
    """
    if scene.held is None:
        raise RobotFault(PLACE_WHILE_EMPTY, "gripper is empty")
    if not _in_workspace(scene, x, y):
        raise RobotFault(OUT_OF_WORKSPACE, f"place at ({x:.3f}, {y:.3f})")
    theta = norm_angle_pi(theta)

    held = scene.object(scene.held)
    held_rect = rect_corners(x, y, held.w, held.l, theta)
    held_area = held.w * held.l
    cands = _support_candidates(scene, held_rect, exclude=held.id)

    if not cands:
        new = replace(held, pose=(x, y, 0.0, theta), support=TABLE)
        return _settle(scene, new)

    z_top = max(c[0] for c in cands)
    level = [c for c in cands if c[0] > z_top - 1e-9]
    phi = sum(c[1] for c in level) / held_area
    level.sort(key=lambda c: (-c[1], c[2]))
    support_id = level[0][2]
    support_obj = scene.object(support_id)

    stable = phi >= PHI_MIN
    if stable and held.shape == "TRIANGLE_ROOF":
        stable = _roof_aligned(theta, support_obj)

    if stable:
        new = replace(held, pose=(x, y, z_top, theta), support=support_id)
        return _settle(scene, new)

    # fall: slide along the overhang direction until the footprint is free
    area_sum = sum(c[1] for c in level)
    cx = sum(c[1] * c[3][0] for c in level) / area_sum
    cy = sum(c[1] * c[3][1] for c in level) / area_sum
    vx, vy = x - cx, y - cy
    norm = math.hypot(vx, vy)
    if norm < 1e-12:
        vx, vy = math.cos(theta), math.sin(theta)
        norm = 1.0
    vx, vy = vx / norm, vy / norm
    half_diag = math.hypot(held.w, held.l) / 2.0

    fx, fy = x, y
    for step in range(1, 11):
        fx = min(max(x + vx * half_diag * step, 1e-3), scene.workspace - 1e-3)
        fy = min(max(y + vy * half_diag * step, 1e-3), scene.workspace - 1e-3)
        rect = rect_corners(fx, fy, held.w, held.l, theta)
        if not any(overlap_area(rect, o.corners()) > EPS_OVERLAP
                   for o in scene.world_objects() if o.id != held.id):
            break
    new = replace(held, pose=(fx, fy, 0.0, theta), support=TABLE)
    return _settle(scene, new)


def _settle(scene: Scene, placed: ObjectState) -> Scene:
    objects = tuple(placed if o.id == placed.id else o for o in scene.objects)
    return replace(scene, objects=objects, held=None, inhand=None,
                   step_count=scene.step_count + 1)


# ---------------------------------------------------------------------------
# scene construction

def make_scene(inventory: Sequence[ObjectTemplate], seed: int,
               sim: SimConfig = SimConfig(), task: str | None = None,
               max_tries: int = 1000) -> Scene:
    """Scatter the inventory uniformly at random on the table, non-overlapping.

    Deterministic in (inventory, seed, sim). Raises PlacementExhausted when
    rejection sampling cannot fit an object within max_tries draws.
    """
    rng = np.random.default_rng(seed)
    W = sim.workspace
    placed: list[ObjectState] = []
    for tmpl in inventory:
        size = tmpl.size or SHAPES[tmpl.shape][0]
        w, l = size[0], size[1]
        half_diag = math.hypot(w, l) / 2.0
        margin = max(GEN_MARGIN_FRAC * W, half_diag)
        if 2 * margin >= W:
            raise PlacementExhausted(f"{tmpl.id}: workspace too small")
        for _ in range(max_tries):
            x = float(rng.uniform(margin, W - margin))
            y = float(rng.uniform(margin, W - margin))
            theta = float(rng.uniform(0.0, math.pi))
            rect = rect_corners(x, y, w + GEN_CLEARANCE, l + GEN_CLEARANCE, theta)
            if all(overlap_area(rect, o.corners()) <= EPS_OVERLAP for o in placed):
                placed.append(tmpl.instantiate((x, y, 0.0, theta)))
                break
        else:
            raise PlacementExhausted(f"could not place {tmpl.id} "
                                     f"after {max_tries} tries (seed {seed})")
    return Scene(workspace=W, grid=sim.grid, crop=sim.crop,
                 objects=tuple(placed), held=None, inhand=None,
                 seed=seed, step_count=0, task=task)


# ---------------------------------------------------------------------------
# text / JSON views

def scene_to_text(scene: Scene) -> str:
    """One fixed-format line per object plus a gripper status line."""
    lines = []
    for o in scene.objects:
        lines.append(
            f"{o.id}: {o.shape}, size ({o.w:.3f}, {o.l:.3f}, {o.h:.3f}), "
            f"pose (x={o.x:.3f}, y={o.y:.3f}, z={o.z:.3f}, theta={o.theta:.3f})")
    lines.append(f"gripper: {scene.gripper_text()}")
    return "\n".join(lines)


def scene_to_json(scene: Scene) -> dict:
    return {
        "workspace": scene.workspace,
        "grid": scene.grid,
        "crop": scene.crop,
        "seed": scene.seed,
        "step_count": scene.step_count,
        "task": scene.task,
        "held": scene.held,
        "inhand": (None if scene.inhand is None else
                   [float(v) for v in np.frombuffer(scene.inhand, dtype=np.float32)]),
        "objects": [
            {"id": o.id, "shape": o.shape, "size": list(o.size),
             "pose": list(o.pose), "color": o.color,
             "graspable": o.graspable, "support": o.support}
            for o in scene.objects
        ],
    }


def scene_from_json(doc: dict) -> Scene:
    try:
        objects = tuple(
            ObjectState(id=o["id"], shape=o["shape"], size=tuple(o["size"]),
                        pose=tuple(o["pose"]), color=o["color"],
                        graspable=bool(o["graspable"]), support=o["support"])
            for o in doc["objects"])
        inhand = doc.get("inhand")
        if inhand is not None:
            inhand = np.asarray(inhand, dtype=np.float32).tobytes()
        return Scene(workspace=float(doc["workspace"]), grid=int(doc["grid"]),
                     crop=int(doc["crop"]), objects=objects,
                     held=doc.get("held"), inhand=inhand,
                     seed=int(doc["seed"]), step_count=int(doc["step_count"]),
                     task=doc.get("task"))
    except (KeyError, TypeError, ValueError) as exc:
        raise ValueError(f"malformed scene document: {exc}") from exc


def scene_hash(scene: Scene) -> str:
    payload = json.dumps(scene_to_json(scene), sort_keys=True,
                         separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


# ---------------------------------------------------------------------------
# invariants

def check_scene_invariants(scene: Scene) -> list[str]:
    """Return a list of violated-invariant descriptions (empty = healthy)."""
    bad: list[str] = []
    world = scene.world_objects()
    by_id = {o.id: o for o in world}
    for o in world:
        if not (0.0 <= o.x <= scene.workspace and 0.0 <= o.y <= scene.workspace):
            bad.append(f"{o.id}: center outside workspace")
        if o.z < 0.0:
            bad.append(f"{o.id}: below the table")
        if not (0.0 <= o.theta < math.pi):
            bad.append(f"{o.id}: theta not normalized")
        if o.support == TABLE:
            if o.z != 0.0:
                bad.append(f"{o.id}: on TABLE but z={o.z}")
        elif o.support not in by_id:
            bad.append(f"{o.id}: support {o.support} missing")
        else:
            sup = by_id[o.support]
            heights = [sup.top]
            if sup.shape == "BIN":
                heights.append(sup.z + BIN_FLOOR)
            if not any(abs(o.z - h) <= 1e-9 for h in heights):
                bad.append(f"{o.id}: z={o.z} does not match a surface of "
                           f"{sup.id}")
            if overlap_area(o.corners(), sup.corners()) <= EPS_OVERLAP:
                bad.append(f"{o.id}: no footprint contact with its support "
                           f"{sup.id}")
        if o.shape in ("TRAY", "BIN") and o.graspable:
            bad.append(f"{o.id}: containers are not graspable")
    if scene.held is not None:
        if not scene.has_object(scene.held):
            bad.append(f"held object {scene.held} missing")
        if any(o.support == scene.held for o in world):
            bad.append(f"held object {scene.held} still supports something")
        if scene.inhand is None:
            bad.append("holding but no in-hand crop")
    elif scene.inhand is not None:
        bad.append("in-hand crop present with an empty gripper")
    # footprints at the same support level must not overlap
    for i, a in enumerate(world):
        for b in world[i + 1:]:
            if a.support == b.support and abs(a.z - b.z) < 1e-9:
                if overlap_area(a.corners(), b.corners()) > EPS_OVERLAP:
                    bad.append(f"{a.id} and {b.id} overlap at the same level")
    # support graph must be acyclic
    for o in world:
        seen = {o.id}
        cur = o
        while cur.support != TABLE:
            if cur.support in seen:
                bad.append(f"support cycle through {o.id}")
                break
            seen.add(cur.support)
            nxt = by_id.get(cur.support)
            if nxt is None:
                break
            cur = nxt
    return bad
