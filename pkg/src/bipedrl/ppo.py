"""Clipped-surrogate PPO with GAE and grouped multi-critic advantages, plus
the stage-1 behavior-specialist training loops.

Recovery specialists use four critics (one per reward group: task, style,
regularization, post-task) whose z-normalized advantages combine through a
weighted sum; walking uses a single group. Critic targets stay unnormalized.
The history encoder is shared between actor and critics and receives
gradients from both losses during stage-1 training.
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from . import amp as ampmod
from . import rewards as rewmod
from .config import Config
from .errors import ContractError, NumericError
from .nn import tensor as T
from .nn.mlp import GaussianHead, MlpSpec, actor_critic_specs, init_mlp, mlp_eval, mlp_forward
from .nn.params import AdamState, ParamStore, adam_step, save_checkpoint
from .sim.env import OBS_DIM, PRIV_DIM, BipedSim, N_JOINTS
from .sim.terrain import generate_terrain

LOG_2PI = math.log(2.0 * math.pi)


# ---- advantage machinery ----------------------------------------------------


def compute_gae(rewards: np.ndarray, values: np.ndarray, dones: np.ndarray,
                gamma: float, lam: float):
    """Backward GAE recursion over (T, N) arrays.

    values carries one bootstrap row: shape (T+1, N). dones zero the
    bootstrap across episode boundaries. Returns (advantages, returns),
    returns = advantages + values[:-1].
    """
    rewards = np.asarray(rewards, np.float32)
    dones = np.asarray(dones)
    if values.shape[0] != rewards.shape[0] + 1 or rewards.shape != dones.shape:
        raise ContractError("compute_gae: misaligned (T, N) inputs")
    T_len = rewards.shape[0]
    adv = np.zeros_like(rewards)
    nonterminal = 1.0 - dones.astype(np.float32)
    gae = np.zeros(rewards.shape[1], np.float32)
    for t in range(T_len - 1, -1, -1):
        delta = rewards[t] + gamma * values[t + 1] * nonterminal[t] - values[t]
        gae = delta + gamma * lam * nonterminal[t] * gae
        adv[t] = gae
    return adv, adv + values[:-1]


@dataclass
class AdvantageGroup:
    index: int
    weight: float
    adv: np.ndarray  # flat (n_samples,)

    @property
    def mean(self) -> float:
        return float(self.adv.mean())

    @property
    def std(self) -> float:
        return float(self.adv.std())


def weighted_advantage(groups: list[AdvantageGroup]) -> np.ndarray:
    """Per-group z-normalization (population std + 1e-8) then weighted sum."""
    if not groups:
        raise ContractError("need at least one advantage group")
    n = groups[0].adv.shape[0]
    out = np.zeros(n, np.float32)
    for g in groups:
        if g.adv.shape[0] != n:
            raise ContractError("advantage groups differ in sample count")
        out += g.weight * (g.adv - g.adv.mean()) / (g.adv.std() + 1e-8)
    return out.astype(np.float32)


# ---- networks ----------------------------------------------------------------


class ActorCritic:
    """Specialist network set: shared history encoder, actor, per-group critics."""

    def __init__(self, obs_dim: int, act_dim: int, n_critics: int, priv_dim: int,
                 rng: np.random.Generator, init_std: float = 0.45,
                 min_std: float = 0.0, store: ParamStore | None = None):
        self.store = store if store is not None else ParamStore()
        self.specs = actor_critic_specs(obs_dim, act_dim, n_critics, priv_dim)
        init_mlp(self.store, "encoder", self.specs["encoder"], rng)
        init_mlp(self.store, "actor", self.specs["actor"], rng, out_scale=0.01)
        for i, cs in enumerate(self.specs["critics"]):
            init_mlp(self.store, f"critic{i}", cs, rng)
        self.head = GaussianHead(self.store, "actor/logstd", act_dim, init_std=init_std,
                                 min_std=min_std)
        self.obs_dim = obs_dim
        self.act_dim = act_dim
        self.n_critics = n_critics
        self.priv_dim = priv_dim

    # numpy-only forward passes for rollouts
    def latent_np(self, hist_flat: np.ndarray) -> np.ndarray:
        return mlp_eval(self.store, "encoder", self.specs["encoder"], hist_flat)

    def act_mean_np(self, hist_flat: np.ndarray, obs: np.ndarray) -> np.ndarray:
        latent = self.latent_np(hist_flat)
        return mlp_eval(self.store, "actor", self.specs["actor"],
                        np.concatenate([latent, obs], axis=1))

    def values_np(self, hist_flat: np.ndarray, obs: np.ndarray, priv: np.ndarray) -> np.ndarray:
        latent = self.latent_np(hist_flat)
        cin = np.concatenate([latent, obs, priv], axis=1)
        return np.stack([mlp_eval(self.store, f"critic{i}", self.specs["critics"][i], cin)[:, 0]
                         for i in range(self.n_critics)])

    def log_prob_np(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        std = self.head.std(self.store)
        z = (actions - mu) / std
        return (-0.5 * (z * z + LOG_2PI) - np.log(std)).sum(axis=1).astype(np.float32)

    def sample_actions(self, mu: np.ndarray, rng: np.random.Generator):
        a = self.head.sample(mu, self.store, rng)
        return a, self.log_prob_np(mu, a)


def global_grad_norm(store: ParamStore) -> float:
    total = 0.0
    for _, p in store.items():
        total += float((p.grad.astype(np.float64) ** 2).sum())
    return math.sqrt(total)


def clip_grad_norm(store: ParamStore, max_norm: float) -> float:
    norm = global_grad_norm(store)
    if max_norm > 0 and norm > max_norm:
        scale = np.float32(max_norm / (norm + 1e-12))
        for _, p in store.items():
            p.grad *= scale
    return norm


# ---- rollout storage -----------------------------------------------------------


class RolloutBuffer:
    """(T, N)-shaped on-policy storage for one PPO iteration."""

    def __init__(self, T_len: int, n_envs: int, obs_dim: int, act_dim: int,
                 n_groups: int, priv_dim: int, hist_dim: int):
        self.T = T_len
        self.n = n_envs
        shape = (T_len, n_envs)
        self.hist = np.zeros(shape + (hist_dim,), np.float32)
        self.obs = np.zeros(shape + (obs_dim,), np.float32)
        self.priv = np.zeros(shape + (priv_dim,), np.float32)
        self.actions = np.zeros(shape + (act_dim,), np.float32)
        self.mu = np.zeros(shape + (act_dim,), np.float32)
        self.logp = np.zeros(shape, np.float32)
        self.rewards = np.zeros((n_groups,) + shape, np.float32)
        self.values = np.zeros((n_groups, T_len + 1, n_envs), np.float32)
        self.dones = np.zeros(shape, bool)
        self.sigma = np.ones(act_dim, np.float32)  # constant within an iteration
        self.t = 0

    def add(self, hist, obs, priv, actions, logp, rewards_g, values_g, dones, mu=None):
        i = self.t
        self.hist[i] = hist
        self.obs[i] = obs
        self.priv[i] = priv
        self.actions[i] = actions
        if mu is not None:
            self.mu[i] = mu
        self.logp[i] = logp
        self.rewards[:, i] = rewards_g
        self.values[:, i] = values_g
        self.dones[i] = dones
        self.t += 1

    def full(self) -> bool:
        return self.t == self.T


# ---- PPO update ------------------------------------------------------------------


def gaussian_kl_np(mu_old, sigma_old, mu_new, sigma_new) -> float:
    """Mean closed-form KL(old || new) for diagonal Gaussians."""
    var_new = sigma_new * sigma_new
    per_dim = (np.log(sigma_new / sigma_old)
               + (sigma_old * sigma_old + (mu_old - mu_new) ** 2) / (2.0 * var_new) - 0.5)
    return float(per_dim.sum(axis=1).mean())


def ppo_update(net: ActorCritic, buf: RolloutBuffer, cfg, adam: AdamState,
               rng: np.random.Generator, group_weights=None,
               learning_rate: float | None = None) -> dict:
    """K epochs of B minibatches over the buffer; returns a loss report.

    When cfg.desired_kl > 0, the learning rate follows the usual KL-adaptive
    schedule (shrink when the policy moves too fast, grow when it crawls);
    the adjusted rate is reported under "lr" so callers can carry it over.
    """
    if not buf.full():
        raise ContractError("ppo_update requires a full rollout buffer")
    n_groups = buf.rewards.shape[0]
    if group_weights is None:
        group_weights = [1.0 / n_groups] * n_groups
    lr = cfg.learning_rate if learning_rate is None else learning_rate

    advs, rets = [], []
    for g in range(n_groups):
        a, r = compute_gae(buf.rewards[g], buf.values[g], buf.dones,
                           cfg.gamma, cfg.gae_lambda)
        advs.append(a.reshape(-1))
        rets.append(r.reshape(-1))
    groups = [AdvantageGroup(g, group_weights[g], advs[g]) for g in range(n_groups)]
    adv = weighted_advantage(groups)

    n_samples = buf.T * buf.n
    hist = buf.hist.reshape(n_samples, -1)
    obs = buf.obs.reshape(n_samples, -1)
    priv = buf.priv.reshape(n_samples, -1)
    actions = buf.actions.reshape(n_samples, -1)
    mu_old = buf.mu.reshape(n_samples, -1)
    logp_old = buf.logp.reshape(n_samples)

    report = {"surrogate": 0.0, "entropy": 0.0, "grad_norm": 0.0, "kl": 0.0,
              **{f"value_loss_{g}": 0.0 for g in range(n_groups)}}
    n_updates = 0
    mb_size = n_samples // cfg.minibatches
    for _ in range(cfg.epochs):
        perm = rng.permutation(n_samples)
        for b in range(cfg.minibatches):
            idx = perm[b * mb_size:(b + 1) * mb_size]
            losses = _ppo_minibatch_loss(net, hist[idx], obs[idx], priv[idx],
                                         actions[idx], logp_old[idx], adv[idx],
                                         [rets[g][idx] for g in range(n_groups)], cfg)
            if getattr(cfg, "desired_kl", 0.0) > 0.0 and lr > 0.0:
                kl = gaussian_kl_np(mu_old[idx], buf.sigma,
                                    losses["mu"].data, net.head.std(net.store))
                lo, hi = cfg.lr_bounds
                if kl > 2.0 * cfg.desired_kl:
                    lr = max(lr / 1.5, lo)
                elif 0.0 < kl < 0.5 * cfg.desired_kl:
                    lr = min(lr * 1.5, hi)
                report["kl"] += kl
            net.store.zero_grad()
            losses["total"].backward()
            gn = clip_grad_norm(net.store, cfg.max_grad_norm)
            adam_step(net.store, adam, lr)
            report["surrogate"] += float(losses["surrogate"].data)
            report["entropy"] += float(losses["entropy"].data)
            report["grad_norm"] += gn
            for g in range(n_groups):
                report[f"value_loss_{g}"] += float(losses[f"value_{g}"].data)
            n_updates += 1
    for k in report:
        report[k] /= max(n_updates, 1)
    report["lr"] = lr
    return report


def _ppo_minibatch_loss(net: ActorCritic, hist, obs, priv, actions, logp_old,
                        adv, returns_per_group, cfg) -> dict:
    latent = mlp_forward(net.store, "encoder", net.specs["encoder"], T.const(hist))
    actor_in = T.concat([latent, T.const(obs)], axis=1)
    mu = mlp_forward(net.store, "actor", net.specs["actor"], actor_in)
    logp = net.head.log_prob(net.store, mu, actions)
    ratio = T.exp(T.sub(logp, T.const(logp_old)))
    clipped = T.clip(ratio, 1.0 - cfg.clip_ratio, 1.0 + cfg.clip_ratio)
    adv_c = T.const(adv)
    surr = T.mul(T.tmean(T.minimum(T.mul(ratio, adv_c), T.mul(clipped, adv_c))), -1.0)
    entropy = net.head.entropy(net.store)

    critic_in = T.concat([latent, T.const(obs), T.const(priv)], axis=1)
    total = T.add(surr, T.mul(entropy, -cfg.entropy_coef))
    out = {"surrogate": surr, "entropy": entropy, "mu": mu}
    for g, ret in enumerate(returns_per_group):
        v = mlp_forward(net.store, f"critic{g}", net.specs["critics"][g], critic_in)
        vloss = T.tmean(T.square(T.sub(v, T.const(ret[:, None]))))
        out[f"value_{g}"] = vloss
        total = T.add(total, T.mul(vloss, cfg.value_coef))
    if not np.isfinite(total.data):
        raise NumericError(
            f"non-finite PPO loss (surrogate={float(surr.data)}, "
            f"values={[float(out[f'value_{g}'].data) for g in range(len(returns_per_group))]})")
    out["total"] = total
    return out


# ---- observation history ----------------------------------------------------------


class ObsHistory:
    """Rolling window of the last `hist_len` observations, zero-padded at reset.

    Flattened oldest-to-newest; the newest row is the current observation.
    """

    def __init__(self, n_envs: int, hist_len: int, obs_dim: int):
        self.buf = np.zeros((n_envs, hist_len, obs_dim), np.float32)

    def push(self, obs: np.ndarray):
        self.buf[:, :-1] = self.buf[:, 1:]
        self.buf[:, -1] = obs

    def reset(self, idx):
        self.buf[idx] = 0.0

    def flat(self) -> np.ndarray:
        # a copy: callers stash these rows while the live buffer keeps rolling
        return self.buf.reshape(self.buf.shape[0], -1).copy()


# ---- specialist training loop --------------------------------------------------------


WALK_GROUPS = ("walking",)
RECOVERY_GROUPS = rewmod.RECOVERY_GROUPS


class SpecialistEnvLoop:
    """Shared machinery for stepping a population under one behavior task."""

    def __init__(self, task: str, cfg: Config, n_envs: int, seed: int,
                 terrains=None, policy_kind=None):
        if task not in ("walking", "recovery"):
            raise ContractError(f"unknown task {task!r}")
        self.task = task
        self.cfg = cfg
        self.rng = np.random.default_rng(seed)
        if terrains is None:
            terrains = [generate_terrain("flat", 0, seed + i, cfg.sim.patch_len,
                                         cfg.sim.terrain_spacing) for i in range(n_envs)]
        self.sim = BipedSim(n_envs, cfg, seed=seed + 1, terrains=terrains)
        self.policy_kind = policy_kind or ("walker" if task == "walking" else "recovery")
        self.groups = WALK_GROUPS if task == "walking" else RECOVERY_GROUPS
        self.n_groups = len(self.groups)
        self.style_scale = (cfg.amp.style_scale_walking if task == "walking"
                            else cfg.amp.style_scale_recovery)
        self.params = rewmod.RewardParams.from_config(
            cfg, self.sim.q_default, self.sim.joint_lo, self.sim.joint_hi,
            self.sim.torque_limit)
        self.time_limit = int(cfg.ppo.episode_s / cfg.sim.control_dt)
        self.hist = ObsHistory(n_envs, 10, OBS_DIM)
        self.amp_hist = np.zeros((n_envs, ampmod.WINDOW_FRAMES, N_JOINTS), np.float32)
        self.ep_return = np.zeros(n_envs, np.float32)
        self.finished_returns: list[float] = []
        self.finished_progress: list[float] = []
        # per-term running means for the metrics CSV
        self.term_sums: dict[str, float] = {}
        self.term_count = 0
        self.reset_all()

    def drain_term_means(self) -> dict:
        out = {f"term_{k}": v / max(self.term_count, 1) for k, v in self.term_sums.items()}
        self.term_sums = {}
        self.term_count = 0
        return out

    def _sample_commands(self, k: int) -> np.ndarray:
        if self.task == "walking":
            lo, hi = self.cfg.ppo.cmd_range
            return self.rng.uniform(lo, hi, size=k).astype(np.float32)
        return np.zeros(k, np.float32)

    def _posture_for(self, k: int):
        if self.task == "walking":
            return np.zeros(k, np.int64)  # standing
        return self.rng.integers(1, 3, size=k)  # supine / prone

    def reset_all(self):
        n = self.sim.n
        idx = np.arange(n)
        self.sim.reset_envs(idx, self._posture_for(n), commands=self._sample_commands(n))
        self.hist.reset(idx)
        self.hist.push(self.sim.observations())
        self.amp_hist[idx] = self.sim.qpos[idx, 3:][:, None, :]
        self.ep_return[idx] = 0.0

    def reset_done(self, done_idx: np.ndarray):
        if done_idx.size == 0:
            return
        self.finished_progress.extend(self.sim.progress()[done_idx].tolist())
        self.sim.reset_envs(done_idx, self._posture_for(done_idx.size),
                            commands=self._sample_commands(done_idx.size))
        self.hist.reset(done_idx)
        self.finished_returns.extend(self.ep_return[done_idx].tolist())
        self.ep_return[done_idx] = 0.0
        obs = self.sim.observations()
        self.hist.buf[done_idx, -1] = obs[done_idx]
        self.amp_hist[done_idx] = self.sim.qpos[done_idx, 3:][:, None, :]

    def step(self, actions: np.ndarray, disc: ampmod.AmpDiscriminator):
        """Advance physics; returns rewards per group, dones, style windows."""
        info = self.sim.step(actions)
        self.amp_hist[:, :-1] = self.amp_hist[:, 1:]
        self.amp_hist[:, -1] = self.sim.qpos[:, 3:]
        windows = self.amp_hist.reshape(self.sim.n, -1).copy()
        d_scores = disc.score(windows)
        style = ampmod.style_reward(d_scores, self.style_scale)

        ctx = rewmod.context_from_sim(self.sim, info)
        if self.task == "walking":
            terms, total = rewmod.walking_reward(ctx, self.params)
            rewards_g = (ampmod.total_reward(total, style))[None, :]
        else:
            terms, groups = rewmod.recovery_reward(ctx, self.params)
            rewards_g = np.stack([groups["task"],
                                  ampmod.total_reward(groups["style"], style),
                                  groups["regularization"],
                                  groups["post_task"]])
        for name, vals in terms.items():
            self.term_sums[name] = self.term_sums.get(name, 0.0) + float(vals.mean())
        self.term_sums["amp_style"] = self.term_sums.get("amp_style", 0.0) + float(style.mean())
        self.term_count += 1

        term = self.sim.termination_check(self.policy_kind, self.time_limit)
        diverged = info["diverged"]
        terminated = term["terminated"] | diverged
        truncated = term["truncated"] & ~diverged
        self.ep_return += rewards_g.sum(axis=0)
        return {
            "rewards_g": rewards_g.astype(np.float32),
            "terminated": terminated,
            "truncated": truncated,
            "windows": windows,
            "disc_scores": d_scores,
            "diverged": diverged,
        }

    def observe(self):
        """(hist_flat, obs, priv) for the current state."""
        obs = self.sim.observations()
        return self.hist.flat(), obs, self.sim.privileged()

    def push_obs(self):
        self.hist.push(self.sim.observations())


class SpecialistTrainer:
    """Stage-1 flat-terrain behavior specialist (PPO + style reward)."""

    def __init__(self, task: str, cfg: Config, seed: int, out_dir: str | None = None,
                 n_envs: int | None = None):
        self.cfg = cfg
        self.task = task
        self.seed = seed
        self.out_dir = out_dir
        n_envs = n_envs or cfg.ppo.n_envs
        self.loop = SpecialistEnvLoop(task, cfg, n_envs, seed)
        rng = np.random.default_rng(seed + 10)
        n_critics = 1 if task == "walking" else 4
        self.net = ActorCritic(OBS_DIM, N_JOINTS, n_critics, PRIV_DIM, rng,
                               init_std=cfg.ppo.init_std, min_std=cfg.ppo.min_std)
        self.adam = AdamState(self.net.store)
        self.lr = cfg.ppo.learning_rate
        self.policy_rng = np.random.default_rng(seed + 20)
        self.update_rng = np.random.default_rng(seed + 30)
        self.disc_rng = np.random.default_rng(seed + 40)
        kind = "locomotion" if task == "walking" else "recovery"
        self.motions = ampmod.generate_reference_motions(
            kind, cfg.amp, self.loop.sim.q_default, seed=seed + 50)
        self.disc = ampmod.AmpDiscriminator(task, ampmod.WINDOW_FRAMES * N_JOINTS,
                                            cfg.amp, rng)
        self.iteration = 0
        self.incidents = 0
        self.metrics_rows: list[dict] = []

    def collect_rollout(self) -> RolloutBuffer:
        cfg, loop, net = self.cfg.ppo, self.loop, self.net
        buf = RolloutBuffer(cfg.rollout_steps, loop.sim.n, OBS_DIM, N_JOINTS,
                            loop.n_groups, PRIV_DIM, 10 * OBS_DIM)
        buf.sigma = net.head.std(net.store).copy()
        for _ in range(cfg.rollout_steps):
            hist, obs, priv = loop.observe()
            mu = net.act_mean_np(hist, obs)
            actions, logp = net.sample_actions(mu, self.policy_rng)
            values = net.values_np(hist, obs, priv)
            res = loop.step(actions, self.disc)
            self.disc.add_policy_windows(res["windows"])
            loop.push_obs()  # history now holds s_{t+1} for every env

            rewards_g = res["rewards_g"]
            truncated = res["truncated"]
            if truncated.any():
                # bootstrap on time-limit/patch-exit truncation: fold V(s')
                # into the reward, then treat the step as done
                t_idx = np.nonzero(truncated)[0]
                v_next = net.values_np(loop.hist.flat()[t_idx],
                                       loop.sim.observations()[t_idx],
                                       loop.sim.privileged()[t_idx])
                rewards_g[:, t_idx] += cfg.gamma * v_next
            dones = res["terminated"] | truncated
            buf.add(hist, obs, priv, actions, logp, rewards_g, values, dones, mu=mu)
            if dones.any():
                loop.reset_done(np.nonzero(dones)[0])
            self.incidents += int(res["diverged"].sum())
        hist, obs, priv = loop.observe()
        buf.values[:, -1] = net.values_np(hist, obs, priv)
        return buf

    def train_iteration(self) -> dict:
        t0 = time.perf_counter()
        buf = self.collect_rollout()
        report = ppo_update(self.net, buf, self.cfg.ppo, self.adam, self.update_rng,
                            learning_rate=self.lr)
        self.lr = report["lr"]
        disc_stats = self.disc.update(self.motions, self.disc_rng)
        self.iteration += 1
        row = {
            "iteration": self.iteration,
            "mean_reward": float(buf.rewards.sum(axis=0).mean()),
            "mean_episode_return": (float(np.mean(self.loop.finished_returns[-200:]))
                                    if self.loop.finished_returns else 0.0),
            "mean_progress": (float(np.mean(self.loop.finished_progress[-200:]))
                              if self.loop.finished_progress else 0.0),
            "time_s": time.perf_counter() - t0,
            "incidents": self.incidents,
            **report, **disc_stats, **self.loop.drain_term_means(),
        }
        self.metrics_rows.append(row)
        return row

    def train(self, iterations: int, checkpoint_every: int | None = None,
              log_fn=None) -> list[dict]:
        checkpoint_every = checkpoint_every or self.cfg.ppo.checkpoint_every
        for _ in range(iterations):
            row = self.train_iteration()
            if log_fn:
                log_fn(row)
            if self.out_dir and (self.iteration % checkpoint_every == 0
                                 or self.iteration == iterations):
                self.save(os.path.join(self.out_dir, f"{self.task}_specialist"))
        return self.metrics_rows

    def save(self, stem: str):
        save_checkpoint(self.net.store, stem)
        save_checkpoint(self.disc.store, stem + "_disc")


def train_specialist(task: str, cfg: Config, seed: int, iterations: int,
                     out_dir: str | None = None, n_envs: int | None = None,
                     log_fn=None) -> SpecialistTrainer:
    trainer = SpecialistTrainer(task, cfg, seed, out_dir=out_dir, n_envs=n_envs)
    trainer.train(iterations, log_fn=log_fn)
    return trainer
