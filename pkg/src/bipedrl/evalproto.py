"""Evaluation protocols: locomotion traversal and fall-recovery success,
with per-trial logs suitable for independent replay checks.

Success definitions:
  * locomotion: the robot crosses the full patch within the time limit
    without a terminal failure. Specialists terminate on falls; the
    multi-behavior flag makes falls non-terminal, ended early only by an
    irrecoverable-fall watchdog (no base-height rise of 0.05 m within 5 s
    while down).
  * recovery: from a supine/prone reset the robot reaches upright
    (base height above the stage-3 threshold, pitch within 0.3 rad), never
    falls afterwards, and is still upright when the clock runs out.

Mean traversal distance counts every trial, successful or not.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import Config
from .distill import MoEActor
from .errors import CheckpointSchemaError, ContractError
from .nn.params import load_checkpoint, restore_into
from .ppo import ActorCritic, ObsHistory
from .sim.env import OBS_DIM, PRIV_DIM, BipedSim, N_JOINTS
from .sim.terrain import TERRAIN_KINDS, generate_terrain


@dataclass
class EvalProtocol:
    task: str                     # "locomotion" | "recovery"
    terrain: str = "flat"
    level: float | None = None    # None: sample the paper-style feature band
    trials: int = 64
    time_limit_s: float | None = None
    cmd_range: tuple = (0.4, 1.0)
    multi_behavior: bool = True

    def __post_init__(self):
        if self.task not in ("locomotion", "recovery"):
            raise ContractError(f"unknown eval task {self.task!r}")
        if self.terrain not in TERRAIN_KINDS:
            raise ContractError(f"unknown terrain {self.terrain!r}")
        if self.trials < 1:
            raise ContractError("trials must be >= 1")
        if self.time_limit_s is not None and self.time_limit_s <= 0:
            raise ContractError("time limit must be positive")


@dataclass
class Metrics:
    success_rate: float
    mean_distance: float
    trials: list = field(default_factory=list)  # per-trial dict rows


class Policy:
    """Deterministic-action adapter over a specialist or student checkpoint."""

    def __init__(self, kind: str, net):
        self.kind = kind  # "specialist" | "student"
        self.net = net

    def act(self, hist_flat: np.ndarray, obs: np.ndarray) -> np.ndarray:
        if self.kind == "specialist":
            return self.net.act_mean_np(hist_flat, obs)
        mu, _ = self.net.forward_np(hist_flat, obs)
        return mu


def load_policy(stem: str) -> Policy:
    arrays = load_checkpoint(stem)
    names = list(arrays)
    if any(n.startswith("student/") for n in names):
        net = MoEActor(OBS_DIM, N_JOINTS, np.random.default_rng(0))
        restore_into(net.store, arrays, prefix="student/")
        return Policy("student", net)
    if any(n.startswith("actor/") for n in names):
        n_critics = len({n.split("/")[0] for n in names if n.startswith("critic")})
        net = ActorCritic(OBS_DIM, N_JOINTS, max(n_critics, 1), PRIV_DIM,
                          np.random.default_rng(0))
        restore_into(net.store, arrays)
        return Policy("specialist", net)
    raise CheckpointSchemaError(f"checkpoint at {stem!r} holds neither a student "
                                "nor a specialist network")


def _trial_levels(proto: EvalProtocol, eval_cfg, rng: np.random.Generator) -> np.ndarray:
    if proto.level is not None:
        if not (0.0 <= proto.level <= 9.0):
            raise ContractError("eval terrain level must be in [0, 9]")
        return np.full(proto.trials, float(proto.level), np.float32)
    if proto.terrain == "flat":
        return np.zeros(proto.trials, np.float32)
    if proto.terrain == "slope":
        lo, hi = eval_cfg.slope_band_deg
        return rng.uniform(lo, hi, proto.trials).astype(np.float32) / 16.6 * 9.0
    if proto.terrain == "hurdle":
        lo, hi = eval_cfg.hurdle_band_m
        return rng.uniform(lo, hi, proto.trials).astype(np.float32) / 0.1 * 9.0
    lo, hi = eval_cfg.discrete_band_m
    return rng.uniform(lo, hi, proto.trials).astype(np.float32) / 0.15 * 9.0


def _build_sim(proto: EvalProtocol, cfg: Config, seed: int, n_hurdles: int):
    rng = np.random.default_rng(seed)
    levels = _trial_levels(proto, cfg.eval, rng)
    terrains = [generate_terrain(proto.terrain, float(levels[i]), seed + 1000 + i,
                                 cfg.sim.patch_len, cfg.sim.terrain_spacing,
                                 n_hurdles=n_hurdles)
                for i in range(proto.trials)]
    eval_cfg_copy = cfg
    if not cfg.eval.randomize_dynamics:
        import dataclasses
        eval_cfg_copy = dataclasses.replace(cfg)
        eval_cfg_copy.domain_rand = dataclasses.replace(cfg.domain_rand, enabled=False)
    sim = BipedSim(proto.trials, eval_cfg_copy, seed=seed + 2, terrains=terrains)
    return sim, levels, rng


def _rollout_policy(policy: Policy, sim: BipedSim, steps: int):
    """Generator yielding (t, sim) after each deterministic control step."""
    hist = ObsHistory(sim.n, 10, OBS_DIM)
    hist.push(sim.observations())
    for t in range(steps):
        a = policy.act(hist.flat(), sim.observations())
        sim.step(a)
        hist.push(sim.observations())
        yield t


def eval_locomotion(policy: Policy, proto: EvalProtocol, cfg: Config, seed: int) -> Metrics:
    ecfg = cfg.eval
    time_limit = proto.time_limit_s or ecfg.locomotion_time_s
    steps = int(round(time_limit / cfg.sim.control_dt))
    sim, levels, rng = _build_sim(proto, cfg, seed, ecfg.locomotion_hurdles)
    commands = rng.uniform(proto.cmd_range[0], proto.cmd_range[1],
                           proto.trials).astype(np.float32)
    sim.reset_envs(np.arange(proto.trials), "standing", commands=commands)

    n = proto.trials
    active = np.ones(n, bool)
    reach_step = np.full(n, -1, np.int64)
    end_step = np.full(n, steps, np.int64)
    distance = np.zeros(n, np.float32)
    # irrecoverable-fall watchdog state
    low_ref = sim.base_height().copy()
    last_rise = np.zeros(n, np.float64)
    fall_start = np.full(n, -1.0)

    dt = cfg.sim.control_dt
    patch = cfg.sim.patch_len
    h1 = cfg.rewards.h_stage1
    traj_x = np.zeros((steps + 1, n), np.float32)
    traj_x[0] = sim.progress()

    for t in _rollout_policy(policy, sim, steps):
        now = (t + 1) * dt
        progress = sim.progress()
        traj_x[t + 1] = progress
        reached = active & (reach_step < 0) & (progress >= patch)
        reach_step[reached] = t + 1

        fallen = sim.body_contact() | (np.abs(sim.qpos[:, 2]) > cfg.sim.fall_pitch)
        if proto.multi_behavior:
            h = sim.base_height()
            rising = h >= low_ref + ecfg.irrecoverable_rise
            last_rise[rising] = now
            low_ref[rising] = h[rising]
            low_ref = np.minimum(low_ref, h)
            down = fallen | (h < h1)
            fall_start[down & (fall_start < 0)] = now
            fall_start[~down] = -1.0
            stuck_down = (down & (fall_start >= 0)
                          & (now - np.maximum(fall_start, last_rise)
                             > ecfg.irrecoverable_window_s))
            terminate = stuck_down
        else:
            terminate = fallen
        out = (progress >= patch) | (sim.qpos[:, 0] < -0.5)
        ending = active & (terminate | out)
        end_step[ending] = t + 1
        distance[ending] = np.clip(progress[ending], 0.0, patch)
        active &= ~ending
        if not active.any():
            break
    distance[active] = np.clip(sim.progress()[active], 0.0, patch)
    success = (reach_step > 0) & (reach_step <= steps)

    rows = [{"trial": i, "level": float(levels[i]), "command": float(commands[i]),
             "success": bool(success[i]), "distance": float(distance[i]),
             "reach_time_s": float(reach_step[i] * dt) if reach_step[i] > 0 else -1.0,
             "end_time_s": float(min(end_step[i], steps) * dt)}
            for i in range(n)]
    return Metrics(success_rate=float(success.mean()),
                   mean_distance=float(distance.mean()), trials=rows), traj_x


def eval_recovery(policy: Policy, proto: EvalProtocol, cfg: Config, seed: int) -> Metrics:
    ecfg = cfg.eval
    time_limit = proto.time_limit_s or ecfg.recovery_time_s
    steps = int(round(time_limit / cfg.sim.control_dt))
    sim, levels, rng = _build_sim(proto, cfg, seed, ecfg.recovery_hurdles)
    postures = rng.integers(1, 3, size=proto.trials)  # supine / prone
    sim.reset_envs(np.arange(proto.trials), postures,
                   commands=np.zeros(proto.trials, np.float32))

    n = proto.trials
    ever_up = np.zeros(n, bool)
    fell_after = np.zeros(n, bool)
    first_up = np.full(n, -1.0)
    dt = cfg.sim.control_dt
    for t in _rollout_policy(policy, sim, steps):
        h = sim.base_height()
        upright = (h > cfg.rewards.h_stage3) & (np.abs(sim.qpos[:, 2]) < ecfg.upright_pitch)
        newly = upright & ~ever_up
        first_up[newly] = (t + 1) * dt
        ever_up |= upright
        down_again = ever_up & ((h < cfg.rewards.h_stage1)
                                | (np.abs(sim.qpos[:, 2]) > cfg.sim.fall_pitch))
        fell_after |= down_again
    h = sim.base_height()
    upright_end = (h > cfg.rewards.h_stage3) & (np.abs(sim.qpos[:, 2]) < ecfg.upright_pitch)
    success = ever_up & ~fell_after & upright_end
    distance = np.clip(sim.progress(), 0.0, cfg.sim.patch_len)

    rows = [{"trial": i, "level": float(levels[i]), "posture": int(postures[i]),
             "success": bool(success[i]), "distance": float(distance[i]),
             "stand_time_s": float(first_up[i])}
            for i in range(n)]
    return Metrics(success_rate=float(success.mean()),
                   mean_distance=float(distance.mean()), trials=rows), None


def run_eval(policy: Policy, proto: EvalProtocol, cfg: Config, seed: int):
    if proto.task == "locomotion":
        return eval_locomotion(policy, proto, cfg, seed)
    return eval_recovery(policy, proto, cfg, seed)
