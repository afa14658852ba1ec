import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from blockbot import demostore, learner, orchestrator, tasks
from blockbot.blockworld import Observation
from blockbot.config import LearnerConfig
from blockbot.demostore import Action, Episode, Transition
from blockbot.learner import (QModel, act_greedy, compute_loss, evaluate,
                              load_model, nstep_targets, observation_planes,
                              save_model, slm_loss, slm_loss_batch, train,
                              _prepare)

TINY = LearnerConfig(grid=4, rotations=2, steps=5, batch_size=4, seed=1)


def synth_obs(grid=8, crop=4, gripper=0, seed=0):
    rng = np.random.default_rng(seed)
    hm = (rng.uniform(0, 0.05, (grid, grid)) *
          (rng.uniform(0, 1, (grid, grid)) > 0.7)).astype(np.float32)
    inhand = (rng.uniform(0, 0.05, (crop, crop)).astype(np.float32)
              if gripper else np.zeros((crop, crop), np.float32))
    return Observation(heightmap=hm, inhand=inhand, gripper=gripper)


def synth_episode(n=2, seed=0, grid=8, rotations=2, success=True):
    rng = np.random.default_rng(seed + 77)
    transitions = []
    obs = synth_obs(grid=grid, gripper=0, seed=seed)
    for t in range(n):
        nxt = synth_obs(grid=grid, gripper=(t + 1) % 2, seed=seed + t + 1)
        skill = "PICK" if t % 2 == 0 else "PLACE"
        action = Action(skill, int(rng.integers(grid)), int(rng.integers(grid)),
                        int(rng.integers(rotations)))
        transitions.append(Transition(
            obs=obs, action=action,
            reward=1.0 if (success and t == n - 1) else 0.0,
            next_obs=nxt, done=t == n - 1))
        obs = nxt
    return Episode(task="synத", seed=seed, source="EXPERT",
                   rotations=rotations, transitions=tuple(transitions))


# ---------------------------------------------------------------------------
# slm loss: hand-computed oracle values

def test_slm_no_violators():
    assert slm_loss([1.0, 0.5], 0, 0.1) == pytest.approx(0.0, abs=1e-9)


def test_slm_single_violator_hand_value():
    assert slm_loss([0.5, 1.0], 0, 0.1) == pytest.approx(0.6, abs=1e-9)


def test_slm_mean_over_violators_hand_value():
    assert slm_loss([0.5, 0.55, 0.7], 0, 0.1) == pytest.approx(0.225, abs=1e-9)


def test_slm_batch_matches_reference():
    rng = np.random.default_rng(3)
    q = rng.normal(size=(16, 40))
    experts = rng.integers(0, 40, size=16)
    batch = slm_loss_batch(torch.tensor(q), torch.tensor(experts), 0.1)
    for b in range(16):
        assert float(batch[b]) == pytest.approx(slm_loss(q[b], experts[b], 0.1),
                                                abs=1e-9)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30),
       st.floats(-100, 100), st.floats(0.01, 1.0))
def test_slm_nonnegative_and_shift_invariant(values, shift, margin):
    q = np.array(values)
    loss = slm_loss(q, 0, margin)
    assert loss >= 0.0
    shifted = slm_loss(q + shift, 0, margin)
    assert shifted == pytest.approx(loss, rel=1e-9, abs=1e-9)


@given(st.lists(st.floats(-5, 5), min_size=2, max_size=30), st.floats(0.01, 1))
def test_slm_zero_iff_expert_dominates(values, margin):
    q = np.array(values)
    expert = int(np.argmax(q))
    dominates = all(q[a] + margin <= q[expert]
                    for a in range(len(q)) if a != expert)
    assert (slm_loss(q, expert, margin) == 0.0) == dominates


# ---------------------------------------------------------------------------
# n-step targets

def test_terminal_transition_ignores_target_entirely():
    ep = synth_episode(n=2, success=True)
    # passing no target model proves the bootstrap path is never taken
    assert nstep_targets(ep, 1, gamma=0.5, n=1, q_target=None) == 1.0
    assert nstep_targets(ep, 1, gamma=0.99, n=7, q_target=None) == 1.0


def test_two_step_monte_carlo_hand_value():
    ep = synth_episode(n=2, success=True)  # rewards [0, 1]
    assert nstep_targets(ep, 0, gamma=0.9, n=2, q_target=None) == \
        pytest.approx(0.9)
    assert nstep_targets(ep, 0, gamma=0.9, n=5, q_target=None) == \
        pytest.approx(0.9)


def test_zero_rewards_zero_target_net():
    ep = synth_episode(n=4, success=False)

    class Zero:
        def forward_np(self, obs):
            return np.zeros((4, 4, 2), np.float32)

    assert nstep_targets(ep, 0, gamma=0.9, n=2, q_target=Zero()) == 0.0


def test_bootstrap_uses_target_max():
    ep = synth_episode(n=4, success=True)  # rewards [0,0,0,1]

    class Const:
        def forward_np(self, obs):
            return np.full((4, 4, 2), 2.0, np.float32)

    y = nstep_targets(ep, 0, gamma=0.5, n=2, q_target=Const())
    assert y == pytest.approx(0.0 + 0.0 + 0.5 ** 2 * 2.0)


def test_batched_targets_match_single(tmp_path):
    eps = [synth_episode(n=4, seed=s, success=s % 2 == 0) for s in range(3)]
    cfg = TINY
    torch.manual_seed(0)
    target = QModel.create(cfg)
    prep, index = _prepare(eps, cfg.grid, cfg.rotations)
    samples = index[::2]
    batched = learner._batch_targets(samples, prep, cfg, target)
    for (e, t), y in zip(samples, batched):
        assert y == pytest.approx(
            nstep_targets(eps[e], t, cfg.gamma, cfg.n_step, target), rel=1e-5)


# ---------------------------------------------------------------------------
# gradients: analytic (autograd) vs central finite differences

def _fd_check(model, target, samples, prep, cfg, h=1e-6):
    loss = compute_loss(model, target, samples, prep, cfg)
    model.net.zero_grad()
    loss.backward()
    analytic = torch.cat([p.grad.reshape(-1)
                          for p in model.net.parameters()]).numpy()
    params = list(model.net.parameters())
    flat = torch.cat([p.detach().reshape(-1) for p in params]).numpy().copy()

    def set_flat(vec):
        pos = 0
        with torch.no_grad():
            for p in params:
                n = p.numel()
                p.copy_(torch.from_numpy(vec[pos:pos + n].reshape(p.shape)))
                pos += n

    fd = np.zeros_like(flat)
    for idx in range(len(flat)):
        up, down = flat.copy(), flat.copy()
        up[idx] += h
        down[idx] -= h
        set_flat(up)
        lu = float(compute_loss(model, target, samples, prep, cfg).detach())
        set_flat(down)
        ld = float(compute_loss(model, target, samples, prep, cfg).detach())
        fd[idx] = (lu - ld) / (2 * h)
        set_flat(flat)
    scale = np.maximum(np.abs(analytic) + np.abs(fd), 1e-6)
    return np.max(np.abs(analytic - fd) / scale)


def test_gradient_matches_finite_differences_tiny_linear():
    # ~10-parameter toy: a 1x1 linear patch model in float64
    cfg = LearnerConfig(grid=4, rotations=2, margin=0.1, slm_weight=1.0,
                        gamma=0.9, n_step=2, seed=3)
    torch.manual_seed(3)
    net = torch.nn.Conv2d(3, 2, 1)
    model = QModel(net, "patch", 4, 2, dtype=torch.float64)
    target = model.clone()
    eps = [synth_episode(n=2, seed=s, grid=8, rotations=2) for s in range(2)]
    prep, index = _prepare(eps, 4, 2)
    assert sum(p.numel() for p in net.parameters()) == 8
    assert _fd_check(model, target, index, prep, cfg) < 1e-4


def test_gradient_matches_finite_differences_conv():
    cfg = LearnerConfig(grid=4, rotations=2, margin=0.15, slm_weight=0.7,
                        gamma=0.8, n_step=3, seed=5)
    torch.manual_seed(5)
    net = torch.nn.Sequential(torch.nn.Conv2d(3, 2, 3, padding=1),
                              torch.nn.ReLU(),
                              torch.nn.Conv2d(2, 2, 1))
    model = QModel(net, "patch", 4, 2, dtype=torch.float64)
    target = model.clone()
    eps = [synth_episode(n=3, seed=s + 10, grid=8, rotations=2)
           for s in range(2)]
    prep, index = _prepare(eps, 4, 2)
    assert _fd_check(model, target, index, prep, cfg) < 1e-4


# ---------------------------------------------------------------------------
# greedy action

def grid_obs(grid=8):
    return synth_obs(grid=grid, gripper=1, seed=5)


class FixedQ:
    def __init__(self, q, grid, rotations):
        self.q = q
        self.grid = grid
        self.rotations = rotations

    def forward_np(self, obs):
        return self.q


def test_act_greedy_unique_max():
    q = np.zeros((4, 4, 2), np.float32)
    q[2, 1, 1] = 5.0
    a = act_greedy(FixedQ(q, 4, 2), grid_obs(), mask_policy="none")
    assert (a.i, a.j, a.k) == (2, 1, 1)
    assert a.skill == "PLACE"


def test_act_greedy_tie_lowest_flat_index():
    q = np.zeros((4, 4, 2), np.float32)
    q[1, 0, 1] = 3.0
    q[3, 2, 0] = 3.0
    a = act_greedy(FixedQ(q, 4, 2), grid_obs(), mask_policy="none")
    assert (a.i, a.j, a.k) == (1, 0, 1)  # (1*4+0)*2+1 = 9 < (3*4+2)*2 = 28


def test_act_greedy_mask_skips_empty_cells():
    obs = Observation(heightmap=np.zeros((4, 4), np.float32),
                      inhand=np.zeros((2, 2), np.float32), gripper=0)
    obs.heightmap[2, 3] = 0.03
    q = np.ones((4, 4, 2), np.float32)  # uniform: mask decides
    a = act_greedy(FixedQ(q, 4, 2), obs, mask_policy="pick_nonempty")
    assert (a.i, a.j) == (2, 3)
    assert a.skill == "PICK"


@given(st.floats(0.1, 10), st.floats(-5, 5))
@settings(max_examples=25)
def test_act_greedy_invariant_under_positive_affine(scale, shift):
    rng = np.random.default_rng(11)
    q = rng.normal(size=(4, 4, 2)).astype(np.float32)
    base = act_greedy(FixedQ(q, 4, 2), grid_obs(), mask_policy="none")
    scaled = act_greedy(FixedQ((q * scale + shift).astype(np.float32), 4, 2),
                        grid_obs(), mask_policy="none")
    assert base == scaled


# ---------------------------------------------------------------------------
# training

def test_training_deterministic():
    eps = [synth_episode(n=2, seed=s, grid=8) for s in range(4)]
    cfg = LearnerConfig(grid=4, rotations=2, steps=12, batch_size=4, seed=9)
    l1 = train(QModel.create(cfg), eps, cfg)
    l2 = train(QModel.create(cfg), eps, cfg)
    assert l1 == l2
    l3 = train(QModel.create(LearnerConfig(grid=4, rotations=2, steps=12,
                                           batch_size=4, seed=10)), eps,
               LearnerConfig(grid=4, rotations=2, steps=12, batch_size=4,
                             seed=10))
    assert l1 != l3


def test_training_smoke_loss_decreases():
    task = tasks.get_task("move_cube")
    demos = orchestrator.expert_demos(task, list(range(500, 510))).episodes
    cfg = LearnerConfig(steps=500, seed=0)
    model = QModel.create(cfg)
    losses = train(model, demos, cfg)
    assert np.mean(losses[-100:]) < np.mean(losses[:100])
    assert all(math.isfinite(l) for l in losses)


def test_rotation_mismatch_rejected():
    eps = [synth_episode(rotations=2)]
    cfg = LearnerConfig(grid=4, rotations=8, steps=1)
    with pytest.raises(learner.LearnerError):
        train(QModel.create(cfg), eps, cfg)


def test_no_episodes_rejected():
    cfg = TINY
    with pytest.raises(learner.LearnerError):
        train(QModel.create(cfg), [], cfg)


# ---------------------------------------------------------------------------
# observation planes

def test_observation_planes_layout():
    obs = synth_obs(grid=8, crop=4, gripper=1, seed=2)
    planes = observation_planes(obs, 4)
    assert planes.shape == (3, 4, 4)
    # max-pooled heightmap
    assert planes[0, 0, 0] == obs.heightmap[:2, :2].max()
    assert (planes[1] == 1.0).all()
    # 2x2-pooled crop centered in the 4x4 plane
    assert planes[2, 0, 0] == 0.0
    assert planes[2, 1, 1] == obs.inhand[:2, :2].max()


def test_forward_shapes_and_flat_order():
    cfg = TINY
    model = QModel.create(cfg)
    obs = synth_obs(grid=8, crop=4, gripper=0, seed=1)
    q = model.forward_np(obs)
    assert q.shape == (4, 4, 2)
    flat = q.reshape(-1)
    a = Action("PICK", 2, 3, 1)
    assert flat[a.flat(4, 2)] == q[2, 3, 1]


# ---------------------------------------------------------------------------
# checkpoints

def test_checkpoint_roundtrip_bitexact(tmp_path):
    cfg = TINY
    model = QModel.create(cfg)
    path = save_model(model, tmp_path / "m.ckpt")
    back = load_model(path)
    assert back.arch == model.arch
    assert back.grid == model.grid and back.rotations == model.rotations
    assert np.array_equal(back.parameters_vector(), model.parameters_vector())
    obs = synth_obs(grid=8, gripper=0, seed=4)
    assert np.array_equal(back.forward_np(obs), model.forward_np(obs))


def test_checkpoint_corruption_detected(tmp_path):
    model = QModel.create(TINY)
    path = save_model(model, tmp_path / "m.ckpt")
    blob = bytearray(path.read_bytes())
    blob[30] ^= 0x55
    path.write_bytes(bytes(blob))
    with pytest.raises(learner.CheckpointError) as exc:
        load_model(path)
    assert exc.value.kind in ("CORRUPT", "MALFORMED")


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "m.ckpt"
    path.write_bytes(b"NOTMAGIC" + b"\x00" * 32)
    with pytest.raises(learner.CheckpointError):
        load_model(path)


# ---------------------------------------------------------------------------
# evaluation rollouts

def test_evaluate_zero_scenes():
    model = QModel.create(TINY)
    res = evaluate(model, tasks.get_task("move_cube"), [])
    assert res.total == 0 and res.ap is None


def test_random_model_scores_low():
    cfg = LearnerConfig(seed=123)
    model = QModel.create(cfg)
    res = evaluate(model, tasks.get_task("move_cube"), list(range(40, 55)))
    assert res.ap < 0.2


def test_evaluate_parallel_matches_serial():
    cfg = LearnerConfig(seed=3)
    model = QModel.create(cfg)
    seeds = list(range(60, 72))
    serial = evaluate(model, tasks.get_task("move_cube"), seeds, jobs=1)
    parallel = evaluate(model, tasks.get_task("move_cube"), seeds, jobs=4)
    assert serial == parallel
