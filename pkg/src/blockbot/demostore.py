"""Bit-exact on-disk episode dataset.

Execution traces become MDP transitions with a sparse reward (1 only on the
terminal transition of a successful episode). The binary layout is
documented byte-by-byte in docs/format.md; every episode carries a CRC32 so
corruption is detected on read.
"""

from __future__ import annotations

import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .blockworld import Observation

MAGIC = b"RGPTDEMO"
VERSION = 1

SOURCES = ("LLM", "EXPERT", "AGENT")
PICK, PLACE = "PICK", "PLACE"
_SKILL_CODE = {PICK: 0, PLACE: 1}
_SKILL_NAME = {0: PICK, 1: PLACE}


class StoreError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


@dataclass(frozen=True)
class Action:
    skill: str  # PICK or PLACE
    i: int      # x cell index
    j: int      # y cell index
    k: int      # rotation index; theta = k * pi / R

    def flat(self, grid: int, rotations: int) -> int:
        return (self.i * grid + self.j) * rotations + self.k

    @staticmethod
    def from_flat(index: int, grid: int, rotations: int, skill: str) -> "Action":
        cell, k = divmod(index, rotations)
        i, j = divmod(cell, grid)
        return Action(skill, i, j, k)


@dataclass(frozen=True)
class Transition:
    obs: Observation
    action: Action
    reward: float
    next_obs: Observation
    done: bool


@dataclass(frozen=True)
class Episode:
    task: str
    seed: int
    source: str  # LLM, EXPERT, or AGENT
    rotations: int
    transitions: tuple[Transition, ...]


# ---------------------------------------------------------------------------
# trace -> episode

def quantize_action(skill: str, x: float, y: float, theta: float,
                    workspace: float, grid: int, rotations: int) -> Action:
    """Nearest cell / rotation bin; out-of-grid actions are an error, never
    clamped."""
    cell = workspace / grid
    i = math.floor(x / cell)
    j = math.floor(y / cell)
    if not (0 <= i < grid and 0 <= j < grid):
        raise StoreError("QUANTIZATION_OOB",
                         f"action ({x:.4f}, {y:.4f}) outside the {grid}x{grid} grid")
    k = int(round(theta / (math.pi / rotations))) % rotations
    return Action(skill, i, j, k)


def from_trace(trace: Sequence, success: bool, *, task: str, seed: int,
               source: str, workspace: float, rotations: int) -> Episode:
    """Convert an execution trace into a sparse-reward Episode."""
    if not trace:
        raise StoreError("INVALID", "empty trace")
    if source not in SOURCES:
        raise StoreError("INVALID", f"unknown source {source!r}")
    grid = trace[0].pre.heightmap.shape[0]
    transitions = []
    last = len(trace) - 1
    for t, step in enumerate(trace):
        action = quantize_action(step.skill, step.x, step.y, step.theta,
                                 workspace, grid, rotations)
        transitions.append(Transition(
            obs=step.pre, action=action,
            reward=1.0 if (success and t == last) else 0.0,
            next_obs=step.post, done=t == last))
    return Episode(task=task, seed=seed, source=source, rotations=rotations,
                   transitions=tuple(transitions))


# ---------------------------------------------------------------------------
# serialization

def _obs_bytes(obs: Observation) -> bytes:
    return (np.ascontiguousarray(obs.heightmap, dtype="<f4").tobytes()
            + np.ascontiguousarray(obs.inhand, dtype="<f4").tobytes()
            + struct.pack("<B", obs.gripper))


def _episode_bytes(ep: Episode) -> bytes:
    name = ep.task.encode()
    parts = [struct.pack("<H", len(name)), name,
             struct.pack("<QBH", ep.seed, SOURCES.index(ep.source),
                         len(ep.transitions))]
    for tr in ep.transitions:
        parts.append(_obs_bytes(tr.obs))
        parts.append(struct.pack("<BHHH", _SKILL_CODE[tr.action.skill],
                                 tr.action.i, tr.action.j, tr.action.k))
        parts.append(struct.pack("<fB", tr.reward, 1 if tr.done else 0))
        parts.append(_obs_bytes(tr.next_obs))
    payload = b"".join(parts)
    return payload + struct.pack("<I", zlib.crc32(payload))


def write(episodes: Iterable[Episode], directory: str | Path) -> list[Path]:
    """Write episodes grouped one file per (task, source); returns the paths."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    groups: dict[tuple[str, str], list[Episode]] = {}
    for ep in episodes:
        groups.setdefault((ep.task, ep.source), []).append(ep)
    paths = []
    for (task, source), eps in groups.items():
        first = eps[0].transitions[0].obs
        G = first.heightmap.shape[0]
        C = first.inhand.shape[0]
        R = eps[0].rotations
        for ep in eps:
            if ep.rotations != R or ep.transitions[0].obs.heightmap.shape[0] != G:
                raise StoreError("INVALID", "mixed grid/rotation dims in one store")
        path = directory / f"{task}.{source.lower()}.demos"
        blob = [MAGIC, struct.pack("<HHHH", VERSION, G, C, R)]
        blob += [_episode_bytes(ep) for ep in eps]
        path.write_bytes(b"".join(blob))
        paths.append(path)
    return sorted(paths)


class _Reader:
    def __init__(self, data: bytes, path: str):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise StoreError("MALFORMED", f"{self.path}: truncated")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_obs(r: _Reader, G: int, C: int) -> Observation:
    hm = np.frombuffer(r.take(G * G * 4), dtype="<f4").reshape(G, G).copy()
    ih = np.frombuffer(r.take(C * C * 4), dtype="<f4").reshape(C, C).copy()
    (grip,) = r.unpack("<B")
    return Observation(heightmap=hm, inhand=ih, gripper=int(grip))


def _validate_episode(ep: Episode, path: str):
    expect = PICK if ep.transitions[0].obs.gripper == 0 else PLACE
    for t, tr in enumerate(ep.transitions):
        if tr.action.skill != expect:
            raise StoreError("INVALID",
                             f"{path}: skills do not alternate at step {t}")
        expect = PLACE if tr.action.skill == PICK else PICK
        if (tr.action.skill == PICK) != (tr.obs.gripper == 0):
            raise StoreError("INVALID", f"{path}: skill/gripper mismatch at {t}")
        if tr.reward == 1.0 and not tr.done:
            raise StoreError("INVALID", f"{path}: reward before terminal at {t}")
        if t + 1 < len(ep.transitions):
            nxt = ep.transitions[t + 1]
            if tr.done:
                raise StoreError("INVALID", f"{path}: done mid-episode at {t}")
            same = (np.array_equal(tr.next_obs.heightmap, nxt.obs.heightmap)
                    and np.array_equal(tr.next_obs.inhand, nxt.obs.inhand)
                    and tr.next_obs.gripper == nxt.obs.gripper)
            if not same:
                raise StoreError("INVALID", f"{path}: broken obs chain at {t}")
    if not ep.transitions[-1].done:
        raise StoreError("INVALID", f"{path}: unterminated episode")


def read_file(path: str | Path) -> list[Episode]:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise StoreError("IO", str(exc)) from exc
    r = _Reader(data, str(path))
    if r.take(len(MAGIC)) != MAGIC:
        raise StoreError("MALFORMED", f"{path}: bad magic")
    version, G, C, R = r.unpack("<HHHH")
    if version != VERSION:
        raise StoreError("VERSION_MISMATCH",
                         f"{path}: version {version}, expected {VERSION}")
    episodes = []
    while r.pos < len(data):
        start = r.pos
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        seed, source_code, n_tr = r.unpack("<QBH")
        if source_code >= len(SOURCES):
            raise StoreError("MALFORMED", f"{path}: bad source code")
        transitions = []
        for _ in range(n_tr):
            obs = _read_obs(r, G, C)
            skill_code, i, j, k = r.unpack("<BHHH")
            if skill_code not in _SKILL_NAME:
                raise StoreError("MALFORMED", f"{path}: bad skill code")
            reward, done = r.unpack("<fB")
            next_obs = _read_obs(r, G, C)
            transitions.append(Transition(
                obs=obs, action=Action(_SKILL_NAME[skill_code], i, j, k),
                reward=float(reward), next_obs=next_obs, done=bool(done)))
        payload = data[start:r.pos]
        (crc,) = r.unpack("<I")
        if zlib.crc32(payload) != crc:
            raise StoreError("CORRUPT", f"{path}: CRC mismatch")
        ep = Episode(task=name, seed=seed, source=SOURCES[source_code],
                     rotations=R, transitions=tuple(transitions))
        _validate_episode(ep, str(path))
        episodes.append(ep)
    return episodes


def read(directory: str | Path) -> list[Episode]:
    """Load every *.demos file under `directory` (sorted by file name)."""
    directory = Path(directory)
    if not directory.is_dir():
        raise StoreError("IO", f"not a directory: {directory}")
    episodes = []
    for path in sorted(directory.glob("*.demos")):
        episodes.extend(read_file(path))
    return episodes
