"""Stage-2 multi-task fine-tuning: per-task workers sharing one actor,
gradient surgery on conflicting actor gradients, behavior-specific critics,
and automatic terrain-level adjustment.

Two workers (walking / recovery) run PPO on their own environment
populations and critics. Each optimizer step, both submit flattened actor
gradients to the coordinator, which projects conflicting pairs, applies one
Adam step to the shared actor, and (in-process) broadcasts by construction;
a version counter enforces the no-stale-parameters contract. Critic updates
never leave their worker except in the shared-critic ablation arms.
"""

from __future__ import annotations

import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import amp as ampmod
from . import rewards as rewmod
from .config import Config
from .distill import MoEActor
from .errors import ContractError
from .nn import tensor as T
from .nn.mlp import MlpSpec, init_mlp, mlp_eval, mlp_forward
from .nn.params import AdamState, ParamStore, adam_step, load_checkpoint, restore_into, save_checkpoint
from .ppo import (AdvantageGroup, ObsHistory, clip_grad_norm, compute_gae,
                  weighted_advantage)
from .sim.env import OBS_DIM, PRIV_DIM, BipedSim, N_JOINTS
from .sim.terrain import TERRAIN_KINDS, generate_terrain

ARMS = ("sc_nopc", "sc_pc", "bc_nopc", "bc_pc")


# ---- gradient surgery -------------------------------------------------------


@dataclass
class GradientPacket:
    task: str
    grad: np.ndarray
    iteration: int


def pcgrad(packets: list[GradientPacket], rng: np.random.Generator) -> np.ndarray:
    """Project conflicting gradient pairs, then sum.

    For every unordered pair with a negative dot product, one side (chosen
    uniformly) is projected onto the other's normal plane:
    g_i <- g_i - (g_i . g_j / ||g_j||^2) g_j. A single packet passes through.
    """
    if not packets:
        raise ContractError("pcgrad needs at least one packet")
    dim = packets[0].grad.shape[0]
    tag = packets[0].iteration
    for p in packets:
        if p.grad.shape != (dim,):
            raise ContractError("gradient packets differ in length")
        if p.iteration != tag:
            raise ContractError("gradient packets from different rounds")
    work = [p.grad.astype(np.float64).copy() for p in packets]
    for i in range(len(work)):
        for j in range(i + 1, len(work)):
            dot = float(work[i] @ work[j])
            if dot >= 0.0:
                continue
            pick_i = bool(rng.integers(0, 2))
            a, b = (i, j) if pick_i else (j, i)
            denom = float(work[b] @ work[b])
            if denom > 0.0:
                coef = float(work[a] @ work[b]) / denom
                work[a] = work[a] - coef * work[b]
    return np.sum(work, axis=0).astype(np.float32)


def cosine_similarity(g_i: np.ndarray, g_j: np.ndarray) -> float:
    """cos angle between gradients; NaN sentinel for zero vectors."""
    ni = float(np.linalg.norm(g_i))
    nj = float(np.linalg.norm(g_j))
    if ni == 0.0 or nj == 0.0:
        return float("nan")
    return float(np.dot(g_i.astype(np.float64), g_j.astype(np.float64)) / (ni * nj))


# ---- terrain curriculum ------------------------------------------------------


@dataclass
class CurriculumState:
    kinds: list                      # per-env terrain kind
    levels: np.ndarray               # per-env int level
    seeds: np.ndarray                # per-env terrain seed
    stats: dict = field(default_factory=dict)  # (kind, level) -> [success, total]
    max_level: int = 9

    @classmethod
    def roundrobin(cls, n_envs: int, kinds, start_level: int, seed: int):
        ks = [kinds[i % len(kinds)] for i in range(n_envs)]
        return cls(kinds=ks, levels=np.full(n_envs, start_level, np.int64),
                   seeds=np.arange(seed, seed + n_envs, dtype=np.int64))

    def level_histogram(self) -> np.ndarray:
        return np.bincount(self.levels, minlength=self.max_level + 1)


def curriculum_update(state: CurriculumState, env_idx: np.ndarray,
                      success: np.ndarray, distance: np.ndarray,
                      patch_len: float, promote_frac: float, demote_frac: float,
                      rng: np.random.Generator) -> np.ndarray:
    """Per-episode level adjustment; returns envs whose level changed.

    Promote on success (locomotion: traversal >= promote_frac of the patch);
    demote on failure with distance < demote_frac of the patch; graduated
    envs (success at the top level) resample a random level.
    """
    changed = []
    for k, env in enumerate(np.atleast_1d(env_idx)):
        lvl = int(state.levels[env])
        key = (state.kinds[env], lvl)
        s, t = state.stats.get(key, (0, 0))
        state.stats[key] = (s + int(success[k]), t + 1)
        new = lvl
        if success[k]:
            if lvl == state.max_level:
                new = int(rng.integers(0, state.max_level + 1))
            else:
                new = lvl + 1
        elif distance[k] < demote_frac * patch_len:
            new = max(lvl - 1, 0)
        if new != lvl:
            state.levels[env] = new
            changed.append(int(env))
    return np.array(changed, dtype=np.int64)


# ---- critics ------------------------------------------------------------------


class CriticSet:
    """Per-task critic heads over a detached student latent."""

    def __init__(self, name: str, n_critics: int, rng: np.random.Generator):
        self.name = name
        self.store = ParamStore()
        self.spec = MlpSpec(64 + OBS_DIM + PRIV_DIM, [512, 256], 1)
        self.n_critics = n_critics
        for i in range(n_critics):
            init_mlp(self.store, f"{name}/critic{i}", self.spec, rng)
        self.adam = AdamState(self.store)
        self.update_counts: dict[str, int] = {}

    def values_np(self, cin: np.ndarray) -> np.ndarray:
        return np.stack([mlp_eval(self.store, f"{self.name}/critic{i}", self.spec, cin)[:, 0]
                         for i in range(self.n_critics)])

    def update(self, cin: np.ndarray, returns_per_group, lr: float, task: str,
               value_coef: float, max_grad_norm: float) -> list[float]:
        """One regression step of every critic on its group's returns."""
        self.update_counts[task] = self.update_counts.get(task, 0) + 1
        x = T.const(cin)
        losses = []
        total = None
        for g in range(self.n_critics):
            v = mlp_forward(self.store, f"{self.name}/critic{g}", self.spec, x)
            vloss = T.tmean(T.square(T.sub(v, T.const(returns_per_group[g][:, None]))))
            losses.append(float(vloss.data))
            term = T.mul(vloss, value_coef)
            total = term if total is None else T.add(total, term)
        self.store.zero_grad()
        total.backward()
        clip_grad_norm(self.store, max_grad_norm)
        adam_step(self.store, self.adam, lr)
        return losses


# ---- fine-tune worker ------------------------------------------------------------


class FinetuneWorker:
    """One task's environments, critics and discriminator; shares the actor."""

    def __init__(self, task: str, cfg: Config, student: MoEActor, critics: CriticSet,
                 seed: int, n_envs: int, start_level: int = 0):
        self.task = task
        self.cfg = cfg
        self.student = student
        self.critics = critics
        self.rng = np.random.default_rng(seed)
        self.policy_rng = np.random.default_rng(seed + 1)
        self.curr_rng = np.random.default_rng(seed + 2)
        self.update_rng = np.random.default_rng(seed + 9)
        self.disc_rng = np.random.default_rng(seed + 12)
        self.curriculum = CurriculumState.roundrobin(
            n_envs, cfg.curriculum.terrain_types, start_level, seed * 1000)
        terrains = [generate_terrain(self.curriculum.kinds[i],
                                     int(self.curriculum.levels[i]),
                                     int(self.curriculum.seeds[i]),
                                     cfg.sim.patch_len, cfg.sim.terrain_spacing)
                    for i in range(n_envs)]
        self.sim = BipedSim(n_envs, cfg, seed=seed + 3, terrains=terrains)
        self.params = rewmod.RewardParams.from_config(
            cfg, self.sim.q_default, self.sim.joint_lo, self.sim.joint_hi,
            self.sim.torque_limit)
        episode_s = (cfg.finetune.walk_episode_s if task == "walking"
                     else cfg.finetune.recover_episode_s)
        self.time_limit = int(episode_s / cfg.sim.control_dt)
        self.style_scale = (cfg.amp.style_scale_walking if task == "walking"
                            else cfg.amp.style_scale_recovery)
        self.groups = ("walking",) if task == "walking" else rewmod.RECOVERY_GROUPS
        # shared-critic ablation: fewer critics than reward groups means the
        # group structure collapses into one total-reward stream
        self.collapse_groups = critics.n_critics < len(self.groups)
        self.n_groups = critics.n_critics if self.collapse_groups else len(self.groups)
        kind = "locomotion" if task == "walking" else "recovery"
        self.motions = ampmod.generate_reference_motions(
            kind, cfg.amp, self.sim.q_default, seed=seed + 50)
        self.disc = ampmod.AmpDiscriminator(task, ampmod.WINDOW_FRAMES * N_JOINTS,
                                            cfg.amp, np.random.default_rng(seed + 4))
        self.hist = ObsHistory(n_envs, 10, OBS_DIM)
        self.amp_hist = np.zeros((n_envs, ampmod.WINDOW_FRAMES, N_JOINTS), np.float32)
        self.ep_return = np.zeros(n_envs, np.float32)
        self.finished_returns: list[float] = []
        self.param_version = -1  # round tag of the actor weights last seen
        self._reset(np.arange(n_envs))

    # -- resets & episode accounting --------------------------------------

    def _commands(self, k: int) -> np.ndarray:
        if self.task == "walking":
            lo, hi = self.cfg.ppo.cmd_range
            return self.rng.uniform(lo, hi, size=k).astype(np.float32)
        return np.zeros(k, np.float32)

    def _postures(self, k: int):
        if self.task == "walking":
            return np.zeros(k, np.int64)
        return self.rng.integers(1, 3, size=k)

    def _reset(self, idx: np.ndarray):
        if idx.size == 0:
            return
        self.sim.reset_envs(idx, self._postures(idx.size), commands=self._commands(idx.size))
        self.hist.reset(idx)
        self.hist.buf[idx, -1] = self.sim.observations()[idx]
        self.amp_hist[idx] = self.sim.qpos[idx, 3:][:, None, :]
        self.ep_return[idx] = 0.0

    def _episode_success(self, idx: np.ndarray) -> np.ndarray:
        if self.task == "walking":
            return self.sim.progress()[idx] >= (self.cfg.curriculum.promote_fraction
                                                * self.cfg.sim.patch_len)
        upright = ((self.sim.base_height()[idx] > self.cfg.rewards.h_stage3)
                   & (np.abs(self.sim.qpos[idx, 2]) < 0.3))
        return upright

    def _handle_done(self, done_idx: np.ndarray):
        if done_idx.size == 0:
            return
        success = self._episode_success(done_idx)
        distance = self.sim.progress()[done_idx]
        changed = curriculum_update(self.curriculum, done_idx, success, distance,
                                    self.cfg.sim.patch_len,
                                    self.cfg.curriculum.promote_fraction,
                                    self.cfg.curriculum.demote_fraction, self.curr_rng)
        for env in changed:
            self.curriculum.seeds[env] += 10007  # fresh layout at the new level
            t = generate_terrain(self.curriculum.kinds[env],
                                 int(self.curriculum.levels[env]),
                                 int(self.curriculum.seeds[env]),
                                 self.cfg.sim.patch_len, self.cfg.sim.terrain_spacing)
            self.sim.terrain.replace(np.array([env]), [t])
        self.finished_returns.extend(self.ep_return[done_idx].tolist())
        self._reset(done_idx)

    # -- rollout -----------------------------------------------------------

    def collect(self, rollout_steps: int, gamma: float) -> dict:
        n = self.sim.n
        shape = (rollout_steps, n)
        data = {
            "hist": np.zeros(shape + (10 * OBS_DIM,), np.float32),
            "obs": np.zeros(shape + (OBS_DIM,), np.float32),
            "priv": np.zeros(shape + (PRIV_DIM,), np.float32),
            "actions": np.zeros(shape + (N_JOINTS,), np.float32),
            "logp": np.zeros(shape, np.float32),
            "rewards": np.zeros((self.n_groups,) + shape, np.float32),
            "values": np.zeros((self.n_groups, rollout_steps + 1, n), np.float32),
            "dones": np.zeros(shape, bool),
        }
        for t in range(rollout_steps):
            h = self.hist.flat()
            obs = self.sim.observations()
            priv = self.sim.privileged()
            mu, _ = self.student.forward_np(h, obs)
            a = self.student.sample(mu, self.policy_rng)
            logp = self.student.log_prob_np(mu, a)
            latent = mlp_eval(self.student.store, "student/encoder",
                              self.student.encoder_spec, h)
            cin = np.concatenate([latent, obs, priv], axis=1)
            values = self.critics.values_np(cin)

            info = self.sim.step(a)
            self.amp_hist[:, :-1] = self.amp_hist[:, 1:]
            self.amp_hist[:, -1] = self.sim.qpos[:, 3:]
            windows = self.amp_hist.reshape(n, -1).copy()
            style = ampmod.style_reward(self.disc.score(windows), self.style_scale)
            self.disc.add_policy_windows(windows)

            ctx = rewmod.context_from_sim(self.sim, info)
            if self.task == "walking":
                _, total = rewmod.walking_reward(ctx, self.params)
                rewards_g = ampmod.total_reward(total, style)[None, :]
            else:
                _, g = rewmod.recovery_reward(ctx, self.params)
                rewards_g = np.stack([g["task"],
                                      ampmod.total_reward(g["style"], style),
                                      g["regularization"], g["post_task"]])
            if self.collapse_groups:
                rewards_g = rewards_g.sum(axis=0, keepdims=True)

            term = self.sim.termination_check("multi", self.time_limit)
            truncated = (term["truncated"] | info["diverged"])
            self.hist.push(self.sim.observations())
            if truncated.any():
                t_idx = np.nonzero(truncated)[0]
                latent2 = mlp_eval(self.student.store, "student/encoder",
                                   self.student.encoder_spec, self.hist.flat()[t_idx])
                cin2 = np.concatenate([latent2, self.sim.observations()[t_idx],
                                       self.sim.privileged()[t_idx]], axis=1)
                rewards_g[:, t_idx] += gamma * self.critics.values_np(cin2)
            dones = truncated  # falls never terminate the multi-behavior policy
            self.ep_return += rewards_g.sum(axis=0)
            for key, val in (("hist", h), ("obs", obs), ("priv", priv), ("actions", a),
                             ("logp", logp), ("dones", dones)):
                data[key][t] = val
            data["rewards"][:, t] = rewards_g
            data["values"][:, t] = values
            if dones.any():
                self._handle_done(np.nonzero(dones)[0])
        h = self.hist.flat()
        latent = mlp_eval(self.student.store, "student/encoder",
                          self.student.encoder_spec, h)
        cin = np.concatenate([latent, self.sim.observations(), self.sim.privileged()], axis=1)
        data["values"][:, -1] = self.critics.values_np(cin)
        return data

    def prepare_update(self, data: dict, ppo_cfg, group_weights=None) -> dict:
        n_groups = data["rewards"].shape[0]
        if group_weights is None:
            group_weights = [1.0 / n_groups] * n_groups
        advs, rets = [], []
        for g in range(n_groups):
            a, r = compute_gae(data["rewards"][g], data["values"][g], data["dones"],
                               ppo_cfg.gamma, ppo_cfg.gae_lambda)
            advs.append(a.reshape(-1))
            rets.append(r.reshape(-1))
        adv = weighted_advantage([AdvantageGroup(g, group_weights[g], advs[g])
                                  for g in range(n_groups)])
        flat = data["obs"].shape[0] * data["obs"].shape[1]
        return {
            "hist": data["hist"].reshape(flat, -1),
            "obs": data["obs"].reshape(flat, -1),
            "priv": data["priv"].reshape(flat, -1),
            "actions": data["actions"].reshape(flat, -1),
            "logp": data["logp"].reshape(flat),
            "adv": adv,
            "returns": rets,
        }

    def actor_gradient(self, batch: dict, idx: np.ndarray, ppo_cfg,
                       iteration: int) -> GradientPacket:
        """Clipped-surrogate gradient of the shared actor on one minibatch."""
        mu, logstd, _ = self.student.forward_tape(batch["hist"][idx], batch["obs"][idx])
        logp = self.student.head.log_prob(self.student.store, mu, batch["actions"][idx])
        ratio = T.exp(T.sub(logp, T.const(batch["logp"][idx])))
        clipped = T.clip(ratio, 1.0 - ppo_cfg.clip_ratio, 1.0 + ppo_cfg.clip_ratio)
        adv = T.const(batch["adv"][idx])
        surr = T.mul(T.tmean(T.minimum(T.mul(ratio, adv), T.mul(clipped, adv))), -1.0)
        entropy = self.student.head.entropy(self.student.store)
        loss = T.add(surr, T.mul(entropy, -ppo_cfg.entropy_coef))
        self.student.store.zero_grad()
        loss.backward()
        grad = self.student.store.flat_grad("student/")
        self.student.store.zero_grad()
        return GradientPacket(self.task, grad, iteration)

    def critic_update(self, batch: dict, idx: np.ndarray, lr: float, ppo_cfg) -> list[float]:
        latent = mlp_eval(self.student.store, "student/encoder",
                          self.student.encoder_spec, batch["hist"][idx])
        cin = np.concatenate([latent, batch["obs"][idx], batch["priv"][idx]], axis=1)
        return self.critics.update(cin, [r[idx] for r in batch["returns"]], lr,
                                   self.task, ppo_cfg.value_coef, ppo_cfg.max_grad_norm)


# ---- coordinator ------------------------------------------------------------------


class FinetuneCoordinator:
    """Synchronous two-worker fine-tuning with central gradient surgery."""

    def __init__(self, cfg: Config, seed: int, arm: str | None = None,
                 student_stem: str | None = None, out_dir: str | None = None,
                 n_envs_per_task: int | None = None):
        arm = arm or cfg.finetune.arm
        if arm not in ARMS:
            raise ContractError(f"unknown ablation arm {arm!r} (want one of {ARMS})")
        self.cfg = cfg
        self.arm = arm
        self.out_dir = out_dir
        self.use_pcgrad = arm.endswith("_pc")
        self.behavior_critics = arm.startswith("bc")
        n_envs = n_envs_per_task or cfg.finetune.n_envs_per_task
        rng = np.random.default_rng(seed)
        self.student = MoEActor(OBS_DIM, N_JOINTS, rng, init_std=cfg.ppo.init_std,
                                min_std=cfg.ppo.min_std)
        if student_stem:
            self.student.load(student_stem)
        self.actor_adam = AdamState(self.student.store, prefix="student/")
        self.pc_rng = np.random.default_rng(seed + 5)
        if self.behavior_critics:
            critics = {"walking": CriticSet("walk", 1, np.random.default_rng(seed + 6)),
                       "recovery": CriticSet("recover", 4, np.random.default_rng(seed + 7))}
        else:
            shared = CriticSet("shared", 1, np.random.default_rng(seed + 6))
            critics = {"walking": shared, "recovery": shared}
        self.workers = {
            "walking": FinetuneWorker("walking", cfg, self.student, critics["walking"],
                                      seed + 100, n_envs),
            "recovery": FinetuneWorker("recovery", cfg, self.student, critics["recovery"],
                                       seed + 200, n_envs),
        }
        self.iteration = 0
        self.metrics_rows: list[dict] = []
        self.param_version = 0

    def aggregate_and_broadcast(self, packets: list[GradientPacket]) -> np.ndarray:
        """Gradient surgery + one Adam step on the shared actor."""
        expected = set(self.workers)
        got = {p.task for p in packets}
        if got != expected or len(packets) != len(expected):
            missing = ", ".join(sorted(expected - got)) or "duplicate packets"
            raise ContractError(f"aggregation round stalled; missing worker(s): {missing}")
        if self.use_pcgrad:
            merged = pcgrad(packets, self.pc_rng)
        else:
            merged = np.sum([p.grad for p in packets], axis=0).astype(np.float32)
        store = self.student.store
        store.set_flat_grad(merged, prefix="student/")
        clip_grad_norm(store, self.cfg.ppo.max_grad_norm)
        adam_step(store, self.actor_adam, self.cfg.finetune.actor_lr)
        self.param_version += 1
        for w in self.workers.values():
            w.param_version = self.param_version  # in-process broadcast
        return merged

    def train_iteration(self) -> dict:
        cfg = self.cfg
        t0 = time.perf_counter()
        for w in self.workers.values():
            if w.param_version not in (self.param_version, -1) and self.iteration > 0:
                raise ContractError(f"worker {w.task} would roll out stale parameters")
        rollouts = {task: w.collect(cfg.ppo.rollout_steps, cfg.ppo.gamma)
                    for task, w in self.workers.items()}
        batches = {task: w.prepare_update(rollouts[task], cfg.ppo)
                   for task, w in self.workers.items()}

        n_samples = batches["walking"]["obs"].shape[0]
        mb = n_samples // cfg.ppo.minibatches
        cos_vals = []
        vlosses = {task: [] for task in self.workers}
        for epoch in range(cfg.ppo.epochs):
            eperm = {task: w.update_rng.permutation(n_samples)
                     for task, w in self.workers.items()}
            for b in range(cfg.ppo.minibatches):
                packets = []
                for task in ("walking", "recovery"):
                    w = self.workers[task]
                    idx = eperm[task][b * mb:(b + 1) * mb]
                    packets.append(w.actor_gradient(batches[task], idx, cfg.ppo,
                                                    self.iteration))
                    vlosses[task].append(w.critic_update(batches[task], idx,
                                                         cfg.ppo.learning_rate, cfg.ppo))
                cos_vals.append(cosine_similarity(packets[0].grad, packets[1].grad))
                self.aggregate_and_broadcast(packets)
        for task, w in self.workers.items():
            w.disc.update(w.motions, w.disc_rng)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "cos_sim": float(np.nanmean(cos_vals)),
            "return_walk": (float(np.mean(self.workers["walking"].finished_returns[-100:]))
                            if self.workers["walking"].finished_returns else 0.0),
            "return_recover": (float(np.mean(self.workers["recovery"].finished_returns[-100:]))
                               if self.workers["recovery"].finished_returns else 0.0),
            "time_s": time.perf_counter() - t0,
        }
        for task in self.workers:
            arr = np.array(vlosses[task], np.float64)
            for g in range(arr.shape[1]):
                row[f"value_loss_{task}_{g}"] = float(arr[:, g].mean())
        for task, w in self.workers.items():
            hist = w.curriculum.level_histogram()
            row[f"mean_level_{task}"] = float(
                (np.arange(len(hist)) * hist).sum() / max(hist.sum(), 1))
        self.metrics_rows.append(row)
        return row

    def train(self, iterations: int, log_fn=None) -> list[dict]:
        for _ in range(iterations):
            row = self.train_iteration()
            if log_fn:
                log_fn(row)
        if self.out_dir:
            self.save(os.path.join(self.out_dir, f"finetuned_{self.arm}"))
        return self.metrics_rows

    def save(self, stem: str):
        save_checkpoint(self.student.store, stem)


def finetune(cfg: Config, seed: int, iterations: int, arm: str | None = None,
             student_stem: str | None = None, out_dir: str | None = None,
             n_envs_per_task: int | None = None, log_fn=None) -> FinetuneCoordinator:
    coord = FinetuneCoordinator(cfg, seed, arm=arm, student_stem=student_stem,
                                out_dir=out_dir, n_envs_per_task=n_envs_per_task)
    coord.train(iterations, log_fn=log_fn)
    return coord
