"""Seeded evaluation episodes, metrics aggregation, replay audit and map rendering."""
from __future__ import annotations

import csv
import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import baselines, critic, explorer
from .coordinator import GraspFailureCounter, coordinate_step
from .reward import reward
from .sim import cluster_count, execute, observe, test_case
from .sim.scenes import N_COORDINATION_CASES, N_EXPLORATION_CASES, N_FULL_CASES
from .sim.world import PALETTE, MotionCommand, MotionOutcome, WorldState, object_masks, render

SUITES = ("exploration", "coordination", "full")
N_CASES = {"exploration": N_EXPLORATION_CASES, "coordination": N_COORDINATION_CASES,
           "full": N_FULL_CASES}
DEFAULT_RUNS = {"exploration": 50, "coordination": 30, "full": 20}
COORDINATION_BUDGET = 5
FULL_BUDGET = 15

EXPLORER_POLICIES = {"clutter-prior": "clutter-prior", "agnostic-push": "agnostic-push",
                     "clutter-agnostic": "clutter-agnostic", "explorer": "full-bayesian"}
COORDINATION_POLICIES = ("coordinator", "rand", "border-heuristic", "mask-filter", "mech-search")
POLICIES = tuple(EXPLORER_POLICIES) + COORDINATION_POLICIES


def run_seed(seed: int, suite: str, case: int, run: int) -> int:
    """Per-run seed: ``seed`` XOR a stable 63-bit hash of (suite, case, run)."""
    h = hashlib.blake2b(f"{suite}/{case}/{run}".encode(), digest_size=8).digest()
    return (int(seed) ^ int.from_bytes(h, "little")) & (2 ** 63 - 1)


@dataclass
class TraceStep:
    command: MotionCommand
    reward: float
    outcome: MotionOutcome
    branch: str  # "explore" | "coordinate"


@dataclass
class EpisodeReport:
    suite: str
    policy: str
    case: int
    run: int
    seed: int
    success: bool
    trace: list = field(default_factory=list)
    fallbacks: int = 0

    @property
    def motions(self) -> int:
        return len(self.trace)


@dataclass
class Models:
    """Trained networks shared by the policies (any of them may be None)."""

    critic: object = None
    classifier: object = None
    channel_mask: np.ndarray = field(default_factory=lambda: critic.ALL_CHANNELS.copy())


# --- policies -------------------------------------------------------------------

class Policy:
    """Per-episode controller: ``reset`` at the start, ``act`` once per motion."""

    name = "policy"

    def __init__(self, models: Models | None = None):
        self.models = models

    def reset(self, world: WorldState, rng: np.random.Generator) -> None:
        self.rng = rng

    def act(self, world: WorldState, s) -> MotionCommand:
        raise NotImplementedError

    def feedback(self, cmd: MotionCommand, outcome: MotionOutcome, s_next) -> None:
        pass


class ExplorerPolicy(Policy):
    def __init__(self, models: Models, variant: str = "full-bayesian"):
        self.models = models
        self.cfg = explorer.ExplorerConfig(variant=variant)
        self.name = variant
        self.fallbacks = 0

    def reset(self, world, rng):
        super().reset(world, rng)
        self.mem = explorer.FailureMemory()
        self.fallbacks = 0

    def act(self, world, s):
        info = {}
        cmd = explorer.explore_step(self.models.critic, s, self.mem, self.cfg, self.rng,
                                    self.models.channel_mask, info)
        self.fallbacks += int(info.get("fallback", False))
        return cmd

    def feedback(self, cmd, outcome, s_next):
        explorer.record_failure(self.mem, cmd, s_next.target_visible)


class CoordinatorPolicy(Policy):
    name = "coordinator"

    def __init__(self, models: Models, reset_cg_on_push: bool = False):
        self.models = models
        self.reset_cg_on_push = reset_cg_on_push

    def reset(self, world, rng):
        super().reset(world, rng)
        self.cg = GraspFailureCounter(reset_on_push=self.reset_cg_on_push)

    def act(self, world, s):
        return coordinate_step(self.models.critic, self.models.classifier, s, self.cg.c_g,
                               self.models.channel_mask).command

    def feedback(self, cmd, outcome, s_next):
        self.cg.update(cmd, outcome)


class AlwaysGraspPolicy(CoordinatorPolicy):
    """Coordinator ablation: the classifier is bypassed and every motion is a grasp."""

    name = "always-grasp"

    def act(self, world, s):
        _, grasp_q = critic.predict(self.models.critic, s, self.models.channel_mask)
        return critic.select(grasp_q)[0]


class RandPolicy(Policy):
    name = "rand"

    def act(self, world, s):
        return baselines.rand_step(s, self.rng)


class BorderHeuristicPolicy(CoordinatorPolicy):
    name = "border-heuristic"

    def __init__(self, models: Models, cfg: baselines.HeuristicConfig = baselines.HeuristicConfig()):
        super().__init__(models)
        self.hcfg = cfg

    def act(self, world, s):
        return baselines.border_heuristic_step(self.models.critic, s, self.cg.c_g, self.hcfg,
                                               self.rng, self.models.channel_mask)


class MaskFilterPolicy(Policy):
    name = "mask-filter"

    def __init__(self, models: Models):
        self.models = models

    def act(self, world, s):
        return baselines.mask_filtered_step(self.models.critic, s, self.models.channel_mask)


class MechSearchPolicy(Policy):
    """Mechanical-search action criterion over oracle object masks, largest first."""

    name = "mech-search"

    def __init__(self, models: Models, cfg: baselines.HeuristicConfig = baselines.HeuristicConfig()):
        self.models = models
        self.hcfg = cfg

    def reset(self, world, rng):
        super().reset(world, rng)
        self.state = baselines.MechSearchState()

    def act(self, world, s):
        masks = object_masks(world, s.extras.get("ids"))
        flags = {oid: oid == world.target_id for oid in masks}

        def proposals(mask):
            return critic.predict(self.models.critic, s, self.models.channel_mask, mask=mask)

        action = baselines.mech_search_step(masks, flags, self.hcfg, self.state, proposals)
        return action.command  # None signals termination with failure


def make_policy(name: str, models: Models) -> Policy:
    if name in EXPLORER_POLICIES:
        return ExplorerPolicy(models, EXPLORER_POLICIES[name])
    table = {"coordinator": CoordinatorPolicy, "rand": RandPolicy,
             "border-heuristic": BorderHeuristicPolicy, "mask-filter": MaskFilterPolicy,
             "mech-search": MechSearchPolicy, "always-grasp": AlwaysGraspPolicy}
    if name not in table:
        raise ValueError(f"unknown policy {name!r}")
    return table[name](models)


# --- episodes ---------------------------------------------------------------------

def _step(world, cmd, branch, trace):
    s = observe(world)
    world_next, outcome = execute(world, cmd)
    s_next = observe(world_next)
    trace.append(TraceStep(cmd, reward(s, cmd, s_next, outcome), outcome, branch))
    return world_next, outcome, s_next


def run_episode(suite: str, policy: Policy, case: int, run: int, seed: int,
                models: Models | None = None, world: WorldState | None = None) -> EpisodeReport:
    rs = run_seed(seed, suite, case, run)
    if world is None:
        world = test_case(suite, case, rs)
    rng = np.random.default_rng(rs)
    report = EpisodeReport(suite, policy.name, case, run, rs, success=False)
    policy.reset(world, rng)
    if suite == "exploration":
        if observe(world).target_visible:
            report.success = True
            return report
        budget = 2 * cluster_count(world) - 1
        for _ in range(budget):
            s = observe(world)
            cmd = policy.act(world, s)
            world, outcome, s_next = _step(world, cmd, "explore", report.trace)
            policy.feedback(cmd, outcome, s_next)
            if s_next.target_visible:
                report.success = True
                break
        report.fallbacks = getattr(policy, "fallbacks", 0)
        return report
    if suite == "coordination":
        for _ in range(COORDINATION_BUDGET):
            s = observe(world)
            if not s.target_visible:
                break  # target lost from view: the coordination subtask cannot continue
            cmd = policy.act(world, s)
            if cmd is None:
                break
            world, outcome, s_next = _step(world, cmd, "coordinate", report.trace)
            policy.feedback(cmd, outcome, s_next)
            if outcome.target_grasped:
                report.success = True
                break
        return report
    if suite == "full":
        scout = ExplorerPolicy(models if models is not None else policy.models, "full-bayesian")
        scout.reset(world, rng)
        for _ in range(FULL_BUDGET):
            s = observe(world)
            if s.target_visible:
                cmd, branch, actor = policy.act(world, s), "coordinate", policy
            else:
                cmd, branch, actor = scout.act(world, s), "explore", scout
            if cmd is None:
                break
            world, outcome, s_next = _step(world, cmd, branch, report.trace)
            actor.feedback(cmd, outcome, s_next)
            if outcome.target_grasped:
                report.success = True
                break
        report.fallbacks = scout.fallbacks
        return report
    raise ValueError(f"unknown suite {suite!r}")


def run_suite(suite: str, policy_name: str, models: Models, runs: int | None = None,
              seed: int = 0, cases=None) -> list[EpisodeReport]:
    if suite not in SUITES:
        raise ValueError(f"unknown suite {suite!r}")
    if suite == "exploration" and policy_name not in EXPLORER_POLICIES:
        raise ValueError(f"{policy_name!r} is not an exploration policy")
    if suite != "exploration" and policy_name in EXPLORER_POLICIES:
        raise ValueError(f"{policy_name!r} only applies to the exploration suite")
    runs = DEFAULT_RUNS[suite] if runs is None else runs
    cases = range(N_CASES[suite]) if cases is None else cases
    policy = make_policy(policy_name, models)
    return [run_episode(suite, policy, c, r, seed, models) for c in cases for r in range(runs)]


def run_exploration(policy: str, case: int, runs: int, seed: int, models: Models):
    return run_suite("exploration", policy, models, runs, seed, [case])


def run_coordination(policy: str, case: int, runs: int, seed: int, models: Models):
    return run_suite("coordination", policy, models, runs, seed, [case])


def run_full(policy: str, case: int, runs: int, seed: int, models: Models):
    return run_suite("full", policy, models, runs, seed, [case])


# --- audit and metrics -------------------------------------------------------------

def replay_audit(report: EpisodeReport) -> bool:
    """Re-execute the recorded commands from the regenerated scene; outcomes must match."""
    world = test_case(report.suite, report.case, report.seed)
    for step in report.trace:
        s = observe(world)
        world, outcome = execute(world, step.command)
        if outcome != step.outcome or reward(s, step.command, observe(world), outcome) != step.reward:
            return False
    if report.suite == "exploration":
        return report.success == observe(world).target_visible
    return report.success == any(st.outcome.target_grasped for st in report.trace)


def explorer_first(report: EpisodeReport) -> bool:
    """Every motion before the target first shows up is an explorer push, none after."""
    world = test_case(report.suite, report.case, report.seed)
    seen = observe(world).target_visible
    for step in report.trace:
        if not seen and (step.branch != "explore" or step.command.kind != "push"):
            return False
        if seen and step.branch == "explore" and observe(world).target_visible:
            return False
        world, _ = execute(world, step.command)
        seen = seen or observe(world).target_visible
    return True


CSV_FIELDS = ["suite", "policy", "case", "run", "seed", "success", "motions", "fallbacks"]


def report_rows(reports: list[EpisodeReport]) -> list[dict]:
    return [{"suite": r.suite, "policy": r.policy, "case": r.case, "run": r.run, "seed": r.seed,
             "success": int(r.success), "motions": r.motions, "fallbacks": r.fallbacks}
            for r in reports]


def write_runs_csv(reports: list[EpisodeReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=CSV_FIELDS)
        w.writeheader()
        w.writerows(report_rows(reports))


def read_runs_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{k: (v if k in ("suite", "policy") else int(v)) for k, v in row.items()}
                for row in csv.DictReader(fh)]


def summarize(rows: list[dict]) -> list[dict]:
    """Per-case and pooled success rate and motion mean/std."""
    out = []
    cases = sorted({r["case"] for r in rows})
    for label, sel in [(str(c), [r for r in rows if r["case"] == c]) for c in cases] + [("all", rows)]:
        if not sel:
            continue
        motions = np.array([r["motions"] for r in sel], dtype=np.float64)
        out.append({"case": label, "runs": len(sel),
                    "success": float(np.mean([r["success"] for r in sel])),
                    "motions_mean": float(motions.mean()), "motions_std": float(motions.std())})
    return out


def format_summary(summary: list[dict], title: str = "") -> str:
    lines = [title] if title else []
    lines.append(f"{'case':>5} {'runs':>5} {'success %':>10} {'motions':>15}")
    for s in summary:
        lines.append(f"{s['case']:>5} {s['runs']:>5} {100 * s['success']:>10.1f} "
                     f"{s['motions_mean']:>7.2f} ± {s['motions_std']:<5.2f}")
    return "\n".join(lines)


def evaluate(suite: str, policy: str, models: Models, runs: int | None, seed: int,
             out_dir=None) -> tuple[list[EpisodeReport], list[dict]]:
    t0 = time.time()
    reports = run_suite(suite, policy, models, runs, seed)
    summary = summarize(report_rows(reports))
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_runs_csv(reports, out / f"{suite}_{policy}_runs.csv")
        (out / f"{suite}_{policy}_summary.txt").write_text(
            format_summary(summary, f"{suite} / {policy} ({time.time() - t0:.1f} s)") + "\n")
    return reports, summary


# --- rendering -----------------------------------------------------------------------

def to_gray(m: np.ndarray) -> np.ndarray:
    """Map a raster to uint8: finite cells min-max scaled, -inf/nan black.

    A constant map is clipped to [0, 1] instead of scaled.
    """
    a = np.asarray(m, dtype=np.float64)
    finite = np.isfinite(a)
    out = np.zeros(a.shape, dtype=np.float64)
    if finite.any():
        lo, hi = a[finite].min(), a[finite].max()
        if hi > lo:
            out[finite] = (a[finite] - lo) / (hi - lo)
        else:
            out[finite] = np.clip(a[finite], 0.0, 1.0)
    return np.floor(out * 255.0 + 0.5).astype(np.uint8)


def pgm_bytes(m: np.ndarray) -> bytes:
    g = to_gray(m)
    h, w = g.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + g.tobytes()


def ppm_bytes(rgb: np.ndarray) -> bytes:
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    return f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes()


def write_pgm(m: np.ndarray, path) -> None:
    Path(path).write_bytes(pgm_bytes(m))


def composite(color_ids: np.ndarray, maps: list[np.ndarray], gap: int = 2) -> np.ndarray:
    """Scene colours followed by grayscale maps, left to right, on a black background."""
    scene = PALETTE[np.asarray(color_ids)]
    panels = [scene] + [np.repeat(to_gray(m)[..., None], 3, axis=2) for m in maps]
    h = scene.shape[0]
    width = sum(p.shape[1] for p in panels) + gap * (len(panels) - 1)
    out = np.zeros((h, width, 3), dtype=np.uint8)
    x = 0
    for p in panels:
        out[:, x:x + p.shape[1]] = p
        x += p.shape[1] + gap
    return out


def render_maps(maps: dict[str, np.ndarray], color_ids: np.ndarray, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for name, m in maps.items():
        p = out / f"{name}.pgm"
        write_pgm(m, p)
        written.append(p)
    p = out / "composite.ppm"
    p.write_bytes(ppm_bytes(composite(color_ids, list(maps.values()))))
    written.append(p)
    return written


def scene_maps(models: Models, world: WorldState) -> dict[str, np.ndarray]:
    """Max-over-orientation views of the maps a policy would use on this scene."""
    s = observe(world)
    if not s.target_visible:
        post = explorer.posterior(models.critic, s, explorer.FailureMemory(),
                                  explorer.ExplorerConfig(), models.channel_mask)
        return {"clutter_prior": post.clutter.max(0), "agnostic_push": post.agnostic.max(0),
                "failure_likelihood": post.failure.max(0), "posterior": post.posterior.max(0)}
    push_q, grasp_q = critic.predict(models.critic, s, models.channel_mask)
    return {"push_q": push_q.maps.max(0), "grasp_q": grasp_q.maps.max(0)}


def depth_view(world: WorldState) -> np.ndarray:
    return render(world)[0]
