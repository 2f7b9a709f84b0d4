"""Self-supervised two-stage training of the critic and the action classifier.

Stage 1 collects experience with an epsilon-greedy policy in light clutter and
trains only the critic. Stage 2 switches to the coordinator in denser clutter and
trains the classifier on grasp outcomes while the critic keeps learning.
"""
from __future__ import annotations

import copy
import csv
import dataclasses
import json
import logging
import math
import pickle
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import critic, grid, net
from .coordinator import GRASP_THRESHOLD, GraspFailureCounter, features
from .replay import (ClassifierBuffer, ClassifierSample, ReplayBuffer, Transition,
                     classifier_label, hindsight_relabel)
from .reward import border_stats, reward
from .sim import SimulationError, execute, observe, spawn_random
from .sim.world import MotionCommand, object_masks, render

log = logging.getLogger(__name__)

LOG_FIELDS = ["iteration", "stage", "action", "reward", "target_grasped", "success_ma",
              "fa_accuracy", "loss", "episode"]
SUCCESS_WINDOW = 200
MAX_SPAWN_FAILURES = 20


@dataclass
class TrainConfig:
    gamma: float = 0.5
    stage1_iters: int = 1000
    stage2_iters: int = 2000
    stage1_basics: int = 3
    stage2_basics: int = 8
    n_targets: int = 3
    eps_start: float = 0.5
    eps_end: float = 0.1
    target_net_period: int = 50
    critic_capacity: int = 4000
    classifier_capacity: int = 500
    critic_batch: int = 8
    classifier_batch: int = 32
    motion_cap: int = 10
    lr: float = net.LR
    classifier_lr: float = net.LR
    optimizer: str = "adam"  # critic optimizer; the classifier always uses SGD
    seed: int = 0
    channels: str = "color,depth,mask"
    checkpoint_every: int = 500
    drop_half: float = 0.11
    reset_cg_on_push: bool = False
    decision_eps: float = 0.1  # stage 2: chance of a uniformly random push/grasp decision
    random_anywhere: float = 0.0  # stage 1: share of random motions placed anywhere

    def __post_init__(self):
        if not 0.0 <= self.gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        critic.parse_channels(self.channels)
        if not 0.0 <= self.random_anywhere <= 1.0:
            raise ValueError("random_anywhere must lie in [0, 1]")
        if self.optimizer not in net.OPTIMIZERS:
            raise ValueError(f"optimizer must be one of {net.OPTIMIZERS}")

    @property
    def total_iters(self) -> int:
        return self.stage1_iters + self.stage2_iters

    @classmethod
    def from_file(cls, path) -> "TrainConfig":
        doc = json.loads(Path(path).read_text())
        unknown = set(doc) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**doc)


def epsilon(cfg: TrainConfig, i: int) -> float:
    """Exponential decay from eps_start to eps_end over stage 1."""
    frac = min(max(i / max(cfg.stage1_iters, 1), 0.0), 1.0)
    return cfg.eps_start * (cfg.eps_end / cfg.eps_start) ** frac


def td_targets(batch: list[Transition], gamma: float, next_value) -> np.ndarray:
    """``R + gamma * max_a Q_target(s_next, a)``, bootstrapping 0 on terminal transitions."""
    return np.array([t.reward + (0.0 if t.terminal or gamma == 0 else gamma * next_value(t))
                     for t in batch], dtype=np.float32)


def batch_inputs(batch: list[Transition], channel_mask) -> tuple[np.ndarray, list]:
    xs, picks = [], []
    for t in batch:
        k = t.action.orientation
        xs.append(critic.frame_inputs(t.s_t, channel_mask, orientations=[k])[0])
        picks.append((0 if t.action.kind == "push" else 1, *grid.frame_pixel(t.action.pixel, k)))
    return np.stack(xs), picks


def td_update(model: net.Critic, optimizer, batch: list[Transition], targets: np.ndarray,
              channel_mask) -> dict:
    """One optimizer step on the Huber TD error at each executed pixel; refreshes surprise."""
    if not batch:
        raise ValueError("empty batch")
    x, picks = batch_inputs(batch, channel_mask)
    model.train()
    out = model(torch.from_numpy(x))
    idx = torch.tensor(picks)
    q = out[torch.arange(len(batch)), idx[:, 0], idx[:, 1], idx[:, 2]]
    delta = q - torch.from_numpy(targets)
    loss = net.huber_torch(delta).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    d = delta.detach().numpy()
    for t, v in zip(batch, d):
        t.surprise = float(abs(v))
    return {"loss": loss.item(), "delta": d}


def train_classifier(clf: net.ActionClassifier, optimizer, x: np.ndarray, y: np.ndarray) -> float:
    clf.train()
    pred = clf(torch.from_numpy(x))
    loss = net.bce_torch(pred, torch.from_numpy(y)).mean()
    optimizer.zero_grad()
    loss.backward()
    optimizer.step()
    return loss.item()


def classifier_accuracy(clf: net.ActionClassifier, x: np.ndarray, y: np.ndarray) -> float:
    clf.eval()
    with torch.no_grad():
        p = clf(torch.from_numpy(x)).numpy()
    return float(np.mean((p >= GRASP_THRESHOLD) == (y >= 0.5)))


def checkpoint_arrays(model: net.Critic, clf: net.ActionClassifier, channel_mask,
                      iteration: int) -> dict:
    arrays = net.module_arrays(model, "critic.")
    arrays.update(net.module_arrays(clf, "classifier."))
    arrays["meta.channel_mask"] = np.asarray(channel_mask, dtype=np.float32)
    arrays["meta.iteration"] = np.array([iteration], dtype=np.float32)
    return arrays


def load_models(path) -> tuple[net.Critic, net.ActionClassifier, np.ndarray]:
    arrays = net.load_checkpoint(path)
    model = net.load_module(net.Critic(), arrays, "critic.").eval()
    clf = net.load_module(net.ActionClassifier(), arrays, "classifier.").eval()
    cm = arrays.get("meta.channel_mask", critic.ALL_CHANNELS)
    return model, clf, np.asarray(cm, dtype=np.float32)


@dataclass
class Episode:
    world: object
    index: int
    motions: int = 0
    cg: GraspFailureCounter = field(default_factory=GraspFailureCounter)


class Trainer:
    """Owns the simulator, both buffers, the online/target critics and the classifier."""

    def __init__(self, cfg: TrainConfig):
        self.cfg = cfg
        self.channel_mask = critic.parse_channels(cfg.channels)
        torch.manual_seed(cfg.seed)
        self.model = net.Critic()
        self.clf = net.ActionClassifier()
        self.target = copy.deepcopy(self.model)
        self.opt = net.make_optimizer(self.model, cfg.lr, cfg.optimizer)
        self.clf_opt = net.make_optimizer(self.clf, cfg.classifier_lr)
        self.buffer = ReplayBuffer(cfg.critic_capacity)
        self.clf_buffer = ClassifierBuffer(cfg.classifier_capacity)
        self.rng = np.random.default_rng([cfg.seed, 1])
        self.iteration = 0
        self.n_episodes = 0
        self.episode: Episode | None = None
        self.successes: list[int] = []
        self.fa_accuracy = float("nan")
        self.log_rows: list[dict] = []
        self._value_cache: dict[int, float] = {}
        self.torch_rng_state = torch.get_rng_state()

    # -- episodes --------------------------------------------------------------

    def _basics(self) -> int:
        return self.cfg.stage1_basics if self.iteration < self.cfg.stage1_iters else self.cfg.stage2_basics

    def new_episode(self) -> Episode:
        for attempt in range(MAX_SPAWN_FAILURES):
            seed = int(self.rng.integers(2 ** 63 - 1))
            try:
                world = spawn_random(self.cfg.n_targets, self._basics(), seed, self.cfg.drop_half)
            except SimulationError as exc:
                log.warning("scene spawn failed (%s), retrying", exc)
                continue
            if observe(world).target_visible:
                self.n_episodes += 1
                return Episode(world=world, index=self.n_episodes,
                               cg=GraspFailureCounter(reset_on_push=self.cfg.reset_cg_on_push))
        raise SimulationError(f"{MAX_SPAWN_FAILURES} consecutive scene spawns failed")

    def _appoint_target(self, world) -> int | None:
        """A random visible target candidate, or None when none is left."""
        masks = object_masks(world, render(world)[2])
        ids = sorted(o.id for o in world.objects if o.is_target_candidate and o.id in masks)
        if not ids:
            return None
        return int(ids[int(self.rng.integers(len(ids)))])

    # -- action selection ------------------------------------------------------

    def _random_action(self, s) -> MotionCommand:
        """Uniform primitive and orientation; the pixel comes from near the target
        (the mask for grasps, its border for pushes) or, with probability
        ``cfg.random_anywhere``, from the whole workspace."""
        kind = "push" if self.rng.random() < 0.5 else "grasp"
        if self.rng.random() < self.cfg.random_anywhere:
            region = np.ones_like(s.mask)
        else:
            region = s.mask if kind == "grasp" else grid.grow(s.mask, grid.BORDER_RADIUS)
        cells = np.argwhere(region)
        k = int(self.rng.integers(grid.N_ROTATIONS))
        for _ in range(100):
            r, c = cells[int(self.rng.integers(len(cells)))]
            if grid.validity_mask(k)[r, c]:
                return MotionCommand(kind, (int(r), int(c)), k)
        return MotionCommand(kind, tuple(int(v) for v in cells[0]), 0)

    def act(self, s):
        push_q, grasp_q = critic.predict(self.model, s, self.channel_mask)
        info = {"feats": None}
        if self.iteration < self.cfg.stage1_iters:
            if self.rng.random() < epsilon(self.cfg, self.iteration):
                return self._random_action(s), info
            best_push, qp = critic.select(push_q)
            best_grasp, qg = critic.select(grasp_q)
            return (best_grasp if qg >= qp else best_push), info
        feats = features(push_q, grasp_q, border_stats(s), self.episode.cg.c_g)
        self.clf.eval()
        with torch.no_grad():
            y = float(self.clf(torch.from_numpy(feats.vector()[None]))[0])
        info["feats"] = feats
        grasp = y >= GRASP_THRESHOLD
        if self.rng.random() < self.cfg.decision_eps:
            grasp = self.rng.random() < 0.5
        stack = grasp_q if grasp else push_q
        return critic.select(stack)[0], info

    # -- learning ----------------------------------------------------------------

    def next_value(self, t: Transition) -> float:
        v = self._value_cache.get(t.uid)
        if v is None:
            push_q, grasp_q = critic.predict(self.target, t.s_next, self.channel_mask)
            v = max(push_q.max(), grasp_q.max())
            if t.uid >= 0:
                self._value_cache[t.uid] = v
        return v

    def learn(self) -> float:
        batch = self.buffer.sample(self.cfg.critic_batch, self.rng)
        targets = td_targets(batch, self.cfg.gamma, self.next_value)
        return td_update(self.model, self.opt, batch, targets, self.channel_mask)["loss"]

    def sync_target(self) -> None:
        self.target.load_state_dict(self.model.state_dict())
        self._value_cache.clear()

    def learn_classifier(self) -> None:
        n = len(self.clf_buffer)
        if n < 2:
            return
        idx = self.rng.integers(n, size=self.cfg.classifier_batch)
        x, y = self.clf_buffer.arrays(idx)
        train_classifier(self.clf, self.clf_opt, x, y)
        xa, ya = self.clf_buffer.arrays()
        self.fa_accuracy = classifier_accuracy(self.clf, xa, ya)

    # -- main loop ----------------------------------------------------------------

    def step(self) -> dict:
        if self.episode is None:
            self.episode = self.new_episode()
        ep = self.episode
        world = ep.world
        s = observe(world)
        cmd, info = self.act(s)
        world_next, outcome = execute(world, cmd)
        s_next = observe(world_next)
        r = reward(s, cmd, s_next, outcome)
        ep.motions += 1
        # a grasped target is followed by a new visible target in the same scene;
        # the transition bootstraps through it unless none is left
        next_target = self._appoint_target(world_next) if outcome.target_grasped else None
        terminal = next_target is None and (outcome.target_grasped or not s_next.target_visible)
        truncated = next_target is None and ep.motions >= self.cfg.motion_cap
        t = self.buffer.add(Transition(world, cmd, r, world_next, terminal=terminal,
                                       target_id=world.target_id, next_target_id=next_target))
        extra = hindsight_relabel(t, outcome)
        if extra is not None:
            self.buffer.add(extra)
        if info["feats"] is not None:
            label = classifier_label(cmd, s, outcome)
            if label is not None:
                self.clf_buffer.add(ClassifierSample(info["feats"], label))
            self.learn_classifier()
        loss = self.learn()
        ep.cg.update(cmd, outcome)
        ep.world = world_next
        if next_target is not None:
            ep.world = dataclasses.replace(world_next, target_id=next_target)
            ep.motions = 0
            ep.cg = GraspFailureCounter(reset_on_push=self.cfg.reset_cg_on_push)
        self.iteration += 1
        if self.iteration % self.cfg.target_net_period == 0:
            self.sync_target()
        self.successes.append(int(outcome.target_grasped))
        window = self.successes[-SUCCESS_WINDOW:]
        row = {
            "iteration": self.iteration,
            "stage": 1 if self.iteration <= self.cfg.stage1_iters else 2,
            "action": cmd.kind,
            "reward": r,
            "target_grasped": int(outcome.target_grasped),
            "success_ma": float(np.mean(window)),
            "fa_accuracy": self.fa_accuracy,
            "loss": loss,
            "episode": ep.index,
        }
        self.log_rows.append(row)
        if terminal or truncated:
            self.episode = None
        return row

    def run(self, until: int | None = None, out_dir=None, progress_every: int = 100) -> list[dict]:
        until = self.cfg.total_iters if until is None else min(until, self.cfg.total_iters)
        out = Path(out_dir) if out_dir is not None else None
        if out is not None:
            out.mkdir(parents=True, exist_ok=True)
        while self.iteration < until:
            row = self.step()
            if progress_every and self.iteration % progress_every == 0:
                log.info("iter %d stage %d success_ma %.3f fa_acc %.3f loss %.4f",
                         row["iteration"], row["stage"], row["success_ma"], row["fa_accuracy"],
                         row["loss"])
            if out is not None and self.cfg.checkpoint_every and \
                    self.iteration % self.cfg.checkpoint_every == 0:
                self.save_checkpoint(out / f"checkpoint_{self.iteration:06d}.ckpt")
                self.write_log(out / "train_log.csv")
        if out is not None:
            self.save_checkpoint(out / "final.ckpt")
            self.write_log(out / "train_log.csv")
        return self.log_rows

    # -- persistence ----------------------------------------------------------------

    def save_checkpoint(self, path) -> None:
        net.save_checkpoint(checkpoint_arrays(self.model, self.clf, self.channel_mask,
                                              self.iteration), path)

    def write_log(self, path) -> None:
        write_log(self.log_rows, path)

    def save_state(self, path) -> None:
        """Everything needed to continue bit-identically."""
        self.torch_rng_state = torch.get_rng_state()
        with open(path, "wb") as fh:
            pickle.dump(self, fh, protocol=pickle.HIGHEST_PROTOCOL)

    @staticmethod
    def load_state(path) -> "Trainer":
        with open(path, "rb") as fh:
            tr = pickle.load(fh)
        torch.set_rng_state(tr.torch_rng_state)
        return tr

    @classmethod
    def from_checkpoint(cls, cfg: TrainConfig, path) -> "Trainer":
        """Warm start from weights only (buffers start empty)."""
        tr = cls(cfg)
        arrays = net.load_checkpoint(path)
        net.load_module(tr.model, arrays, "critic.")
        net.load_module(tr.clf, arrays, "classifier.")
        tr.sync_target()
        tr.iteration = int(arrays.get("meta.iteration", np.zeros(1))[0])
        return tr


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=LOG_FIELDS)
        w.writeheader()
        for row in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in row.items()})


def read_log(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: float(v) for k, v in row.items() if k != "action"} | {"action": row["action"]}
                for row in csv.DictReader(fh)]


def run_training(cfg: TrainConfig, out_dir, resume=None) -> Trainer:
    if resume is None:
        tr = Trainer(cfg)
    elif str(resume).endswith(".pkl"):
        tr = Trainer.load_state(resume)
        tr.cfg = dataclasses.replace(tr.cfg, stage2_iters=max(tr.cfg.stage2_iters, cfg.stage2_iters))
    else:
        tr = Trainer.from_checkpoint(cfg, resume)
    tr.run(out_dir=out_dir)
    tr.save_state(Path(out_dir) / "state.pkl")
    return tr


def block_rates(outcomes, block: int) -> np.ndarray:
    """Mean of consecutive non-overlapping blocks; a partial tail block is dropped."""
    x = np.asarray(outcomes, dtype=float)
    n = len(x) // block
    return x[: n * block].reshape(n, block).mean(axis=1)


def mann_kendall(x) -> tuple[float, float]:
    """Mann-Kendall S statistic and one-sided p-value for an increasing trend.

    Uses the tie-corrected variance and a continuity correction.
    """
    x = np.asarray(x, dtype=float)
    n = len(x)
    if n < 3:
        raise ValueError("need at least 3 points")
    s = float(sum(np.sign(x[j] - x[i]) for i in range(n - 1) for j in range(i + 1, n)))
    _, counts = np.unique(x, return_counts=True)
    var = (n * (n - 1) * (2 * n + 5) - sum(t * (t - 1) * (2 * t + 5) for t in counts)) / 18.0
    if var <= 0:
        return s, 1.0
    z = (s - np.sign(s)) / np.sqrt(var)
    return s, 0.5 * math.erfc(z / math.sqrt(2))
