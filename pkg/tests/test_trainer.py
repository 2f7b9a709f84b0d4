import dataclasses
import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
import torch
from scipy import stats

from pushgrasp import critic, grid, net, trainer
from pushgrasp.coordinator import CoordinationFeatures
from pushgrasp.replay import (ClassifierBuffer, ClassifierSample, ReplayBuffer, Transition,
                              classifier_label, hindsight_relabel, sample_prioritized)
from pushgrasp.sim import (MotionCommand, MotionOutcome, SceneObject, WorldState, execute,
                           observe, world_to_pixel)
from pushgrasp.trainer import TrainConfig, Trainer, epsilon, td_targets, td_update

C = grid.WORKSPACE_SIZE / 2


def cube(oid, x, y, target=False):
    return SceneObject(id=oid, shape="rectangle", pose=(x, y, 0.0), body_height=0.03,
                       half_extents=(0.015, 0.015), is_target_candidate=target)


def two_cubes():
    return WorldState(objects=(cube(0, C - 0.06, C, True), cube(1, C + 0.06, C, True)), target_id=0)


def transition(world, cmd, r=0.0, terminal=False):
    nxt, _ = execute(world, cmd)
    return Transition(world, cmd, r, nxt, terminal, world.target_id)


def grasp_at(x, y, k=0):
    return MotionCommand("grasp", world_to_pixel(x, y), k)


# --- TD targets and updates ------------------------------------------------------------

def test_gamma_zero_targets_are_rewards():
    w = two_cubes()
    batch = [transition(w, grasp_at(C, C), r) for r in (0.0, 0.5, 1.0)]
    assert np.array_equal(td_targets(batch, 0.0, lambda t: 99.0), [0.0, 0.5, 1.0])
    got = td_targets(batch, 0.5, lambda t: 2.0)
    assert np.allclose(got, [1.0, 1.5, 2.0])
    batch[0].terminal = True
    assert td_targets(batch, 0.5, lambda t: 2.0)[0] == 0.0


def test_zero_net_delta_is_minus_reward():
    w = two_cubes()
    model = net.zero_module(net.Critic())
    opt = net.make_optimizer(model, lr=0.0)
    t = transition(w, grasp_at(C - 0.06, C), 0.5)
    out = td_update(model, opt, [t], np.float32([0.5]), critic.ALL_CHANNELS)
    assert out["delta"][0] == pytest.approx(-0.5)
    assert out["loss"] == pytest.approx(net.huber(0.5))
    assert t.surprise == pytest.approx(0.5)


def test_update_gradient_confined_to_receptive_cone():
    torch.manual_seed(0)
    model = net.Critic()
    t = transition(two_cubes(), grasp_at(C - 0.06, C, 3), 0.5)
    x, picks = trainer.batch_inputs([t], critic.ALL_CHANNELS)
    xt = torch.from_numpy(x).requires_grad_(True)
    out = model(xt)
    ch, r, c = picks[0]
    out[0, ch, r, c].backward()
    sens = xt.grad[0].abs().sum(0).numpy()
    rows, cols = np.nonzero(sens)
    assert sens[r, c] > 0
    assert np.abs(rows - r).max() <= 40 and np.abs(cols - c).max() <= 40
    # the picked pixel is the executed pixel seen in frame k
    assert (r, c) == grid.frame_pixel(t.action.pixel, 3)


def test_update_moves_q_towards_target():
    torch.manual_seed(1)
    model = net.Critic()
    opt = net.make_optimizer(model, lr=1e-3, kind="adam")
    t = transition(two_cubes(), grasp_at(C - 0.06, C), 1.0)
    first = td_update(model, opt, [t], np.float32([1.0]), critic.ALL_CHANNELS)["delta"][0]
    for _ in range(20):
        last = td_update(model, opt, [t], np.float32([1.0]), critic.ALL_CHANNELS)["delta"][0]
    assert abs(last) < abs(first)


def test_epsilon_schedule():
    cfg = TrainConfig()
    assert epsilon(cfg, 0) == pytest.approx(0.5)
    assert epsilon(cfg, cfg.stage1_iters) == pytest.approx(0.1)
    assert epsilon(cfg, 500) == pytest.approx(0.5 * 0.2 ** 0.5)


def test_config_checks(tmp_path):
    with pytest.raises(ValueError):
        TrainConfig(gamma=1.0)
    with pytest.raises(ValueError):
        TrainConfig(channels="rgb")
    with pytest.raises(ValueError):
        TrainConfig(optimizer="lbfgs")
    with pytest.raises(ValueError):
        TrainConfig(random_anywhere=1.5)
    p = tmp_path / "c.json"
    p.write_text(json.dumps({"stage1_iters": 7, "bogus": 1}))
    with pytest.raises(ValueError):
        TrainConfig.from_file(p)
    p.write_text(json.dumps({"stage1_iters": 7}))
    assert TrainConfig.from_file(p).stage1_iters == 7


# --- hindsight and classifier labels --------------------------------------------------------

def test_hindsight_on_wrong_object():
    w = two_cubes()
    cmd = grasp_at(C + 0.06, C)
    nxt, out = execute(w, cmd)
    assert out.grasped_object_id == 1 and not out.target_grasped
    t = Transition(w, cmd, 0.0, nxt, False, 0)
    h = hindsight_relabel(t, out)
    assert h is not None and h.reward == 1.0 and not h.terminal and h.hindsight
    assert h.target_id == 1 and h.next_target_id == 0
    assert np.array_equal(h.s_next.mask, t.s_next.mask)
    assert not np.array_equal(h.hindsight_mask, t.s_t.mask)
    assert h.hindsight_mask[cmd.pixel] and not (h.hindsight_mask & t.s_t.mask).any()
    assert t.hindsight_mask is None and t.hindsight_reward is None


def test_no_hindsight_for_target_grasp_or_push():
    w = two_cubes()
    cmd = grasp_at(C - 0.06, C)
    nxt, out = execute(w, cmd)
    assert out.target_grasped
    assert hindsight_relabel(Transition(w, cmd, 1.0, nxt, True, 0), out) is None
    push = MotionCommand("push", world_to_pixel(C, C), 0)
    nxt, out = execute(w, push)
    assert hindsight_relabel(Transition(w, push, 0.0, nxt, False, 0), out) is None
    miss = grasp_at(0.02, 0.02)
    nxt, out = execute(w, miss)
    assert hindsight_relabel(Transition(w, miss, 0.0, nxt, False, 0), out) is None


def cube_row(n_targets):
    objs = tuple(cube(i, C - 0.12 + 0.08 * i, C, i < n_targets) for i in range(3))
    return WorldState(objects=objs, target_id=0)


class GraspFirst(Trainer):
    def act(self, s):
        return grasp_at(C - 0.12, C), {"feats": None}


@pytest.mark.parametrize("n_targets,expected", [(3, (1, 2)), (1, None)])
def test_target_grasp_appoints_new_target(n_targets, expected):
    tr = GraspFirst(small_config())
    tr.episode = trainer.Episode(world=cube_row(n_targets), index=1, motions=2)
    tr.step()
    t = tr.buffer.items[-1]
    assert t.reward == 1.0 and t.target_id == 0
    if expected is None:
        assert t.terminal and t.next_target_id is None and tr.episode is None
    else:
        assert not t.terminal and t.next_target_id in expected
        assert t.s_next.target_visible and t.s_next.mask.any()
        assert tr.episode.world.target_id == t.next_target_id and tr.episode.motions == 0


def test_motion_cap_truncates_without_terminal():
    class Miss(Trainer):
        def act(self, s):
            return grasp_at(0.02, 0.02), {"feats": None}
    tr = Miss(small_config())
    tr.episode = trainer.Episode(world=cube_row(3), index=1, motions=2)
    tr.step()
    assert tr.episode is None and not tr.buffer.items[-1].terminal


@pytest.mark.parametrize("anywhere", [0.0, 1.0])
def test_random_action_regions(anywhere):
    tr = Trainer(small_config(random_anywhere=anywhere))
    s = observe(cube_row(3))
    near = grid.grow(s.mask, grid.BORDER_RADIUS)
    cmds = [tr._random_action(s) for _ in range(200)]
    assert all(grid.validity_mask(c.orientation)[c.pixel] for c in cmds)
    inside = [(s.mask if c.kind == "grasp" else near)[c.pixel] for c in cmds]
    if anywhere == 0.0:
        assert all(inside)
    else:
        assert np.mean(inside) < 0.2


def test_illegal_reward_rejected():
    w = two_cubes()
    with pytest.raises(ValueError):
        Transition(w, grasp_at(C, C), 0.3, w, False, 0)


def test_classifier_labels():
    s = observe(two_cubes())
    inside = grasp_at(C - 0.06, C)
    won = MotionOutcome(kind="grasp", grasped_object_id=0, target_grasped=True)
    lost = MotionOutcome(kind="grasp")
    assert classifier_label(inside, s, won) == 1
    assert classifier_label(inside, s, lost) == 0
    assert classifier_label(grasp_at(0.02, 0.02), s, lost) is None
    assert classifier_label(MotionCommand("push", inside.pixel, 0), s, MotionOutcome(kind="push")) is None


def test_classifier_buffer_is_cyclic():
    buf = ClassifierBuffer(3)
    for i in range(5):
        buf.add(ClassifierSample(CoordinationFeatures(i, 0, 0, 0, 0), i % 2))
    x, y = buf.arrays()
    assert len(buf) == 3 and list(x[:, 0]) == [2, 3, 4] and list(y) == [0, 1, 0]


# --- prioritized replay ------------------------------------------------------------------------

def filled_buffer(n, capacity=None, surprises=None):
    w = two_cubes()
    buf = ReplayBuffer(capacity or n, recent_prob=0.0)
    for i in range(n):
        t = buf.add(Transition(w, grasp_at(C, C), 0.0, w, False, 0))
        t.surprise = 1.0 if surprises is None else surprises[i]
    return buf


def test_uniform_surprise_samples_uniformly():
    buf = filled_buffer(10)
    counts = np.bincount(buf.sample_indices(10_000, np.random.default_rng(0)), minlength=10)
    assert stats.chisquare(counts).pvalue > 0.01


def test_high_surprise_dominates_in_expected_proportion():
    buf = filled_buffer(10, surprises=[100.0] + [1.0] * 9)
    w_hi = (100.0 + 1e-3) ** 0.6
    w_lo = (1.0 + 1e-3) ** 0.6
    expected = w_hi / (w_hi + 9 * w_lo)
    assert buf.weights()[0] == pytest.approx(expected)
    draws = buf.sample_indices(10_000, np.random.default_rng(1))
    assert np.mean(np.array(draws) == 0) == pytest.approx(expected, abs=0.015)


def test_size_one_buffer():
    buf = filled_buffer(1)
    assert set(buf.sample_indices(50, np.random.default_rng(2))) == {0}
    assert sample_prioritized(buf, 4, 9) == [buf.items[0]] * 4
    with pytest.raises(ValueError):
        ReplayBuffer(4).sample_indices(1, np.random.default_rng(0))


def test_recent_transition_forced_half_the_time():
    w = two_cubes()
    buf = ReplayBuffer(100)
    for _ in range(100):
        buf.add(Transition(w, grasp_at(C, C), 0.0, w, False, 0))
    rng = np.random.default_rng(3)
    firsts = [buf.sample_indices(1, rng)[0] == 99 for _ in range(4000)]
    # forced with probability 0.5, otherwise drawn with weight 1/100
    assert np.mean(firsts) == pytest.approx(0.5 + 0.5 * 0.01, abs=0.03)


def test_sampling_is_seeded():
    buf = filled_buffer(20, surprises=list(np.linspace(0.1, 2, 20)))
    assert sample_prioritized(buf, 8, 5) == sample_prioritized(buf, 8, 5)


def test_fifo_eviction_and_new_surprise():
    buf = filled_buffer(5, capacity=3, surprises=[0.1, 0.2, 0.3, 0.4, 0.5])
    assert len(buf) == 3 and [t.uid for t in buf.items] == [2, 3, 4]
    w = two_cubes()
    t = buf.add(Transition(w, grasp_at(C, C), 0.0, w, False, 0))
    assert t.surprise == 0.5 and [x.uid for x in buf.items] == [3, 4, 5]


# --- the training loop ---------------------------------------------------------------------------

def small_config(**kw):
    base = dict(stage1_iters=4, stage2_iters=4, target_net_period=3, critic_batch=2,
                classifier_batch=4, checkpoint_every=0, seed=3, motion_cap=3)
    base.update(kw)
    return TrainConfig(**base)


def _params(m):
    return {k: v.clone() for k, v in m.state_dict().items()}


def test_target_network_sync_period():
    tr = Trainer(small_config())
    initial = _params(tr.target)
    for i in range(1, 7):
        tr.step()
        online, target = _params(tr.model), _params(tr.target)
        if i % 3 == 0:
            assert all(torch.equal(online[k], target[k]) for k in online)
            initial = target
        else:
            assert all(torch.equal(initial[k], target[k]) for k in target)
            assert any(not torch.equal(online[k], target[k]) for k in online)


def test_buffer_rewards_legal_and_capacity():
    tr = Trainer(small_config(critic_capacity=5))
    tr.run()
    assert len(tr.buffer) <= 5
    assert all(t.reward in (0.0, 0.25, 0.5, 1.0) for t in tr.buffer.items)
    assert all(not t.hindsight or t.target_id != t.world_t.target_id for t in tr.buffer.items)


def test_log_rows_and_stages(tmp_path):
    tr = Trainer(small_config())
    rows = tr.run(out_dir=tmp_path)
    assert [r["stage"] for r in rows] == [1] * 4 + [2] * 4
    assert list(r["iteration"] for r in rows) == list(range(1, 9))
    back = trainer.read_log(tmp_path / "train_log.csv")
    assert [r["reward"] for r in back] == [r["reward"] for r in rows]
    model, clf, cm = trainer.load_models(tmp_path / "final.ckpt")
    x = torch.rand(1, 5, 16, 16)
    with torch.no_grad():
        assert torch.equal(model(x), tr.model(x))
    assert np.array_equal(cm, critic.ALL_CHANNELS)


def test_deterministic_resume(tmp_path):
    straight = Trainer(small_config())
    straight.run()
    half = Trainer(small_config())
    half.run(until=4)
    half.save_state(tmp_path / "state.pkl")
    torch.manual_seed(12345)  # disturb the global generator; resume must restore it
    resumed = Trainer.load_state(tmp_path / "state.pkl")
    resumed.run()
    trainer.write_log(straight.log_rows, tmp_path / "a.csv")
    trainer.write_log(resumed.log_rows, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    sa, sb = straight.model.state_dict(), resumed.model.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)


def test_channel_mask_reaches_checkpoint(tmp_path):
    tr = Trainer(small_config(channels="depth,mask", stage1_iters=1, stage2_iters=0))
    tr.run(out_dir=tmp_path)
    _, _, cm = trainer.load_models(tmp_path / "final.ckpt")
    assert np.array_equal(cm, [0, 0, 0, 1, 1])


def test_block_rates():
    assert trainer.block_rates([1, 0, 1, 1, 0, 0, 1], 2).tolist() == [0.5, 1.0, 0.0]


def test_mann_kendall_small_cases():
    assert trainer.mann_kendall([1, 2, 3, 4])[0] == 6
    assert trainer.mann_kendall([3, 1, 2])[0] == -1
    assert trainer.mann_kendall([2, 2, 2]) == (0.0, 1.0)
    # n=10 strictly increasing: S=45, var=125, z=44/sqrt(125)
    s, p = trainer.mann_kendall(range(10))
    assert s == 45 and p == pytest.approx(0.5 * math.erfc(44 / math.sqrt(125) / math.sqrt(2)))
    with pytest.raises(ValueError):
        trainer.mann_kendall([1, 2])


@settings(max_examples=30, deadline=None)
@given(st.lists(st.integers(0, 4), min_size=12, max_size=30))
def test_mann_kendall_matches_kendall_tau(xs):

    s, _ = trainer.mann_kendall(xs)
    tau = stats.kendalltau(np.arange(len(xs)), xs, variant="b").statistic
    n = len(xs)
    _, counts = np.unique(xs, return_counts=True)
    ties = sum(t * (t - 1) / 2 for t in counts)
    pairs = n * (n - 1) / 2
    if pairs - ties > 0:
        assert s == pytest.approx(tau * np.sqrt(pairs * (pairs - ties)))
