"""Offline distillation of demonstrations into a spatial Q-map policy.

The approximator maps an observation to a Q value per (cell, rotation)
action; training minimizes an n-step TD term plus a strict large-margin
term that pushes every non-expert action at least `margin` below the expert
one. The network is an ordinary convolutional stack (a single linear
patch layer is available as a fallback); no equivariance is claimed.
"""

from __future__ import annotations

import copy
import math
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from torch import nn

from . import tasks as tasklib
from .blockworld import Observation, RobotFault, observe, pick, place
from .config import LearnerConfig, SimConfig
from .demostore import PICK, PLACE, Action, Episode
from .tasks import TaskSpec

MAGIC = b"RGPTQNET"
VERSION = 1
ARCH_IDS = {"conv": 1, "patch": 2}
ARCH_NAMES = {v: k for k, v in ARCH_IDS.items()}


class LearnerError(RuntimeError):
    pass


class CheckpointError(RuntimeError):
    def __init__(self, kind: str, message: str):
        super().__init__(f"{kind}: {message}")
        self.kind = kind


def _build_net(arch: str, rotations: int) -> nn.Module:
    if arch == "conv":
        return nn.Sequential(
            nn.Conv2d(3, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, 32, 3, padding=1), nn.ReLU(),
            nn.Conv2d(32, rotations, 3, padding=1),
        )
    if arch == "patch":  # linear on 5x5 local patches
        return nn.Sequential(nn.Conv2d(3, rotations, 5, padding=2))
    raise ValueError(f"unknown arch {arch!r}")


def _pool_max(a: np.ndarray, factor: int) -> np.ndarray:
    if factor == 1:
        return a
    h, w = a.shape
    return a.reshape(h // factor, factor, w // factor, factor).max(axis=(1, 3))


def observation_planes(obs: Observation, grid: int) -> np.ndarray:
    """(3, grid, grid) f32 input: pooled heightmap, gripper flag plane, and
    the in-hand crop pooled and padded into the center."""
    g_in = obs.heightmap.shape[0]
    if g_in % grid != 0:
        raise LearnerError(f"observation grid {g_in} not divisible by {grid}")
    factor = g_in // grid
    planes = np.zeros((3, grid, grid), dtype=np.float32)
    planes[0] = _pool_max(obs.heightmap, factor)
    planes[1] = float(obs.gripper)
    crop = _pool_max(obs.inhand, factor)
    c = crop.shape[0]
    if c > grid:
        raise LearnerError(f"in-hand crop {c} larger than the grid {grid}")
    off = (grid - c) // 2
    planes[2, off:off + c, off:off + c] = crop
    return planes


class QModel:
    """Torch net plus the bookkeeping needed for checkpoints and numpy use."""

    def __init__(self, net: nn.Module, arch: str, grid: int, rotations: int,
                 dtype: torch.dtype = torch.float32):
        self.net = net.to(dtype)
        self.arch = arch
        self.grid = grid
        self.rotations = rotations
        self.dtype = dtype

    @classmethod
    def create(cls, cfg: LearnerConfig, dtype: torch.dtype = torch.float32) -> "QModel":
        torch.manual_seed(cfg.seed)
        return cls(_build_net(cfg.arch, cfg.rotations), cfg.arch, cfg.grid,
                   cfg.rotations, dtype)

    def clone(self) -> "QModel":
        return QModel(copy.deepcopy(self.net), self.arch, self.grid,
                      self.rotations, self.dtype)

    def preprocess(self, obs: Observation) -> torch.Tensor:
        return torch.from_numpy(observation_planes(obs, self.grid)).to(self.dtype)

    def forward_batch(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 3, G, G) -> (B, R, G, G)."""
        return self.net(x)

    def forward_np(self, obs: Observation) -> np.ndarray:
        """Q grid for one observation, (G, G, R) f32, no gradients."""
        with torch.no_grad():
            out = self.net(self.preprocess(obs)[None])
        return out[0].permute(1, 2, 0).numpy().astype(np.float32)

    # flat parameter vector (sorted state-dict order), used by checkpoints
    def parameters_vector(self) -> np.ndarray:
        parts = [self.net.state_dict()[k].numpy().ravel()
                 for k in sorted(self.net.state_dict())]
        return np.concatenate(parts).astype(np.float32)

    def load_vector(self, vec: np.ndarray):
        state = self.net.state_dict()
        pos = 0
        for key in sorted(state):
            n = state[key].numel()
            chunk = vec[pos:pos + n].reshape(tuple(state[key].shape))
            state[key] = torch.from_numpy(np.ascontiguousarray(chunk)).to(self.dtype)
            pos += n
        if pos != len(vec):
            raise CheckpointError("MALFORMED", "parameter count mismatch")
        self.net.load_state_dict(state)


# ---------------------------------------------------------------------------
# losses

def slm_loss(q_row: Sequence[float] | np.ndarray, expert: int,
             margin: float) -> float:
    """Strict large-margin loss over one flattened action row.

    Mean over violators (actions whose value plus the margin still beats the
    expert's) of their margin shortfall; 0 when the expert dominates.
    """
    q = np.asarray(q_row, dtype=np.float64)
    if not 0 <= expert < q.shape[0]:
        raise IndexError(f"expert index {expert} out of range")
    viol = q + margin > q[expert]
    viol[expert] = False
    if not viol.any():
        return 0.0
    return float(np.mean(q[viol] + margin - q[expert]))


def slm_loss_batch(q: torch.Tensor, expert: torch.Tensor,
                   margin: float) -> torch.Tensor:
    """(B, A) Q rows, (B,) expert indices -> (B,) margin losses."""
    qe = q.gather(1, expert[:, None])
    viol = q + margin > qe
    viol.scatter_(1, expert[:, None], False)
    terms = (q + margin - qe) * viol
    counts = viol.sum(dim=1)
    return torch.where(counts > 0, terms.sum(dim=1) / counts.clamp(min=1),
                       torch.zeros((), dtype=q.dtype))


def nstep_targets(episode: Episode, t: int, gamma: float, n: int,
                  q_target: QModel | None) -> float:
    """y_t = sum_{i<m} gamma^i r_{t+i} (+ gamma^m max_a Q_target(s_{t+m}) when
    the episode does not terminate within m = min(n, steps left))."""
    T = len(episode.transitions)
    if not 0 <= t < T:
        raise IndexError(f"t={t} outside the episode")
    m = min(n, T - t)
    y = sum(gamma ** i * episode.transitions[t + i].reward for i in range(m))
    if t + m < T:
        if q_target is None:
            raise LearnerError("bootstrap needed but no target model given")
        y += gamma ** m * float(q_target.forward_np(
            episode.transitions[t + m].obs).max())
    return y


# ---------------------------------------------------------------------------
# training

@dataclass
class _PrepEpisode:
    inputs: np.ndarray   # (T, 3, G, G) f32
    actions: np.ndarray  # (T,) int64 flat indices
    rewards: np.ndarray  # (T,) f64


def _prepare(episodes: Sequence[Episode], grid: int,
             rotations: int) -> tuple[list[_PrepEpisode], list[tuple[int, int]]]:
    prep = []
    index = []
    for e, ep in enumerate(episodes):
        if ep.rotations != rotations:
            raise LearnerError(f"episode stores {ep.rotations} rotations, "
                               f"config wants {rotations}")
        g_store = ep.transitions[0].obs.heightmap.shape[0]
        if g_store % grid != 0:
            raise LearnerError(f"store grid {g_store} not divisible by {grid}")
        factor = g_store // grid
        T = len(ep.transitions)
        inputs = np.stack([observation_planes(tr.obs, grid)
                           for tr in ep.transitions])
        actions = np.array(
            [(tr.action.i // factor * grid + tr.action.j // factor) * rotations
             + tr.action.k for tr in ep.transitions], dtype=np.int64)
        rewards = np.array([tr.reward for tr in ep.transitions])
        prep.append(_PrepEpisode(inputs, actions, rewards))
        index.extend((e, t) for t in range(T))
    return prep, index


def _batch_targets(samples: list[tuple[int, int]], prep: list[_PrepEpisode],
                   cfg: LearnerConfig, target: QModel) -> np.ndarray:
    ys = np.zeros(len(samples))
    boot_inputs = []
    boot_slots = []
    for b, (e, t) in enumerate(samples):
        ep = prep[e]
        T = len(ep.rewards)
        m = min(cfg.n_step, T - t)
        ys[b] = sum(cfg.gamma ** i * ep.rewards[t + i] for i in range(m))
        if t + m < T:
            boot_inputs.append(ep.inputs[t + m])
            boot_slots.append((b, cfg.gamma ** m))
    if boot_inputs:
        x = torch.from_numpy(np.stack(boot_inputs)).to(target.dtype)
        with torch.no_grad():
            q = target.forward_batch(x)
        q_max = q.reshape(q.shape[0], -1).max(dim=1).values.numpy()
        for (b, scale), qm in zip(boot_slots, q_max):
            ys[b] += scale * float(qm)
    return ys


def compute_loss(model: QModel, target: QModel,
                 samples: list[tuple[int, int]], prep: list[_PrepEpisode],
                 cfg: LearnerConfig) -> torch.Tensor:
    """Mean over the batch of (Q(s, a_E) - y)^2 + w * slm(Q(s, .), a_E)."""
    ys = _batch_targets(samples, prep, cfg, target)
    inputs = torch.from_numpy(
        np.stack([prep[e].inputs[t] for e, t in samples])).to(model.dtype)
    expert = torch.tensor([prep[e].actions[t] for e, t in samples],
                          dtype=torch.long)
    y = torch.tensor(ys, dtype=model.dtype)

    out = model.forward_batch(inputs)                       # (B, R, G, G)
    q = out.permute(0, 2, 3, 1).reshape(out.shape[0], -1)   # flat (i*G+j)*R+k
    qa = q.gather(1, expert[:, None]).squeeze(1)
    td = (qa - y) ** 2
    slm = slm_loss_batch(q, expert, cfg.margin)
    return (td + cfg.slm_weight * slm).mean()


def train_step(model: QModel, target: QModel, samples: list[tuple[int, int]],
               prep: list[_PrepEpisode], cfg: LearnerConfig,
               optimizer: torch.optim.Optimizer) -> float:
    loss = compute_loss(model, target, samples, prep, cfg)
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def train(model: QModel, episodes: Sequence[Episode],
          cfg: LearnerConfig) -> list[float]:
    """Offline training loop; returns the per-step loss sequence.

    Deterministic for a fixed cfg.seed: batch order, init, and updates all
    derive from it.
    """
    if not episodes:
        raise LearnerError("no episodes to train on")
    prep, index = _prepare(episodes, cfg.grid, cfg.rotations)
    target = model.clone()
    optimizer = torch.optim.Adam(model.net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for step in range(cfg.steps):
        if step % cfg.target_sync == 0:
            target.net.load_state_dict(model.net.state_dict())
        chosen = rng.integers(0, len(index), cfg.batch_size)
        samples = [index[i] for i in chosen]
        loss = train_step(model, target, samples, prep, cfg, optimizer)
        if not math.isfinite(loss):
            raise LearnerError(f"non-finite loss {loss} at step {step}")
        losses.append(loss)
    return losses


# ---------------------------------------------------------------------------
# acting

def act_greedy(model: QModel, obs: Observation,
               mask_policy: str = "pick_nonempty") -> Action:
    """Argmax action (ties -> lowest flat index); the optional mask excludes
    pick cells whose pooled heightmap is empty."""
    q = model.forward_np(obs)
    skill = PICK if obs.gripper == 0 else PLACE
    if skill == PICK and mask_policy == "pick_nonempty":
        planes = observation_planes(obs, model.grid)
        q = q.copy()
        q[planes[0] <= 0.0, :] = -np.inf
    flat = int(np.argmax(q.reshape(-1)))
    return Action.from_flat(flat, model.grid, model.rotations, skill)


@dataclass
class EvalResult:
    success: int
    total: int

    @property
    def ap(self) -> float | None:
        return self.success / self.total if self.total else None


def evaluate(model: QModel, task: TaskSpec, seeds: Sequence[int], *,
             sim: SimConfig = SimConfig(), mask_policy: str = "pick_nonempty",
             step_factor: int = 2, jobs: int = 1) -> EvalResult:
    """Greedy rollouts, at most step_factor * task steps each; success judged
    by the task oracle. Robot faults waste the step but do not abort."""
    def rollout(seed: int) -> bool:
        scene = tasklib.make_scene(task, seed, sim=sim)
        for _ in range(step_factor * task.steps):
            obs = observe(scene)
            action = act_greedy(model, obs, mask_policy)
            cell = sim.workspace / model.grid
            x = (action.i + 0.5) * cell
            y = (action.j + 0.5) * cell
            theta = action.k * math.pi / model.rotations
            try:
                if obs.gripper == 0:
                    scene = pick(scene, x, y, theta)
                else:
                    scene = place(scene, x, y, theta)
            except RobotFault:
                pass
            if tasklib.oracle_check(task, scene):
                return True
        return False

    if jobs > 1:
        from concurrent.futures import ThreadPoolExecutor
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            outcomes = list(pool.map(rollout, seeds))
    else:
        outcomes = [rollout(s) for s in seeds]
    return EvalResult(success=sum(outcomes), total=len(seeds))


# ---------------------------------------------------------------------------
# checkpoints

def save_model(model: QModel, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    vec = model.parameters_vector()
    payload = (MAGIC + struct.pack("<HHHH", VERSION, ARCH_IDS[model.arch],
                                   model.grid, model.rotations)
               + struct.pack("<I", len(vec)) + vec.astype("<f4").tobytes())
    path.write_bytes(payload + struct.pack("<I", zlib.crc32(payload)))
    return path


def load_model(path: str | Path) -> QModel:
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise CheckpointError("IO", str(exc)) from exc
    if len(data) < len(MAGIC) + 12 or data[:len(MAGIC)] != MAGIC:
        raise CheckpointError("MALFORMED", f"{path}: bad magic")
    payload, crc_bytes = data[:-4], data[-4:]
    if zlib.crc32(payload) != struct.unpack("<I", crc_bytes)[0]:
        raise CheckpointError("CORRUPT", f"{path}: CRC mismatch")
    version, arch_id, grid, rotations = struct.unpack_from("<HHHH", data, len(MAGIC))
    if version != VERSION:
        raise CheckpointError("VERSION_MISMATCH", f"{path}: version {version}")
    if arch_id not in ARCH_NAMES:
        raise CheckpointError("MALFORMED", f"{path}: unknown arch {arch_id}")
    (count,) = struct.unpack_from("<I", data, len(MAGIC) + 8)
    vec = np.frombuffer(data, dtype="<f4", count=count, offset=len(MAGIC) + 12)
    model = QModel(_build_net(ARCH_NAMES[arch_id], rotations),
                   ARCH_NAMES[arch_id], grid, rotations)
    model.load_vector(vec.astype(np.float32))
    return model
