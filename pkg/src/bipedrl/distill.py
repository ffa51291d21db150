"""Stage-1 distillation: gated two-expert student, base-height behavior
selection, MSE+KL imitation loss, and the on-policy dataset-aggregation loop.

The student acts with its own sampled actions; whichever specialist matches
the current base height labels the visited state. The student consumes
proprioception history only (no privileged inputs anywhere in its path).
"""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import Config
from .errors import ContractError
from .nn import tensor as T
from .nn.mlp import (ACTOR_HIDDEN, GaussianHead, MlpSpec, actor_critic_specs,
                     init_mlp, mlp_eval, mlp_forward)
from .nn.params import AdamState, ParamStore, adam_step, load_checkpoint, restore_into, save_checkpoint
from .ppo import LOG_2PI, ActorCritic, ObsHistory, SpecialistEnvLoop, clip_grad_norm
from .sim.env import OBS_DIM, PRIV_DIM, N_JOINTS

GATE_HIDDEN = [512, 256, 128]
N_EXPERTS = 2


def select_behavior(base_height: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    """True = walking (base height strictly above threshold), False = recovery."""
    return np.asarray(base_height) > threshold


class MoEActor:
    """History encoder + 2 expert MLPs mixed by a softmax gate, shared log-std.

    The gate mixes the experts' action means; the standard deviation comes
    from one shared learnable head.
    """

    def __init__(self, obs_dim: int, act_dim: int, rng: np.random.Generator,
                 init_std: float = 0.45, min_std: float = 0.0,
                 store: ParamStore | None = None, prefix: str = "student"):
        self.store = store if store is not None else ParamStore()
        self.prefix = prefix
        specs = actor_critic_specs(obs_dim, act_dim, 1, 0)
        self.encoder_spec = specs["encoder"]
        self.expert_spec = MlpSpec(specs["actor"].input_dim, list(ACTOR_HIDDEN), act_dim)
        self.gate_spec = MlpSpec(specs["actor"].input_dim, list(GATE_HIDDEN), N_EXPERTS)
        init_mlp(self.store, f"{prefix}/encoder", self.encoder_spec, rng)
        for k in range(N_EXPERTS):
            init_mlp(self.store, f"{prefix}/expert{k}", self.expert_spec, rng, out_scale=0.01)
        init_mlp(self.store, f"{prefix}/gate", self.gate_spec, rng)
        self.head = GaussianHead(self.store, f"{prefix}/logstd", act_dim, init_std=init_std,
                                 min_std=min_std)
        self.obs_dim = obs_dim
        self.act_dim = act_dim

    def param_prefix(self) -> str:
        return self.prefix + "/"

    # ---- numpy forward (rollouts) --------------------------------------

    def forward_np(self, hist_flat: np.ndarray, obs: np.ndarray):
        """Returns (mu, gate_weights); both (n, ...)."""
        latent = mlp_eval(self.store, f"{self.prefix}/encoder", self.encoder_spec, hist_flat)
        x = np.concatenate([latent, obs], axis=1)
        logits = mlp_eval(self.store, f"{self.prefix}/gate", self.gate_spec, x)
        logits = logits - logits.max(axis=1, keepdims=True)
        e = np.exp(logits)
        gate = e / e.sum(axis=1, keepdims=True)
        mu = np.zeros((x.shape[0], self.act_dim), np.float32)
        for k in range(N_EXPERTS):
            mu += gate[:, k:k + 1] * mlp_eval(self.store, f"{self.prefix}/expert{k}",
                                              self.expert_spec, x)
        return mu, gate

    def std(self) -> np.ndarray:
        return self.head.std(self.store)

    def sample(self, mu: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        return self.head.sample(mu, self.store, rng)

    def log_prob_np(self, mu: np.ndarray, actions: np.ndarray) -> np.ndarray:
        std = self.std()
        z = (actions - mu) / std
        return (-0.5 * (z * z + LOG_2PI) - np.log(std)).sum(axis=1).astype(np.float32)

    # ---- tape forward (updates) ------------------------------------------

    def forward_tape(self, hist_flat: np.ndarray, obs: np.ndarray):
        """Returns (mu tensor, logstd tensor, gate tensor)."""
        latent = mlp_forward(self.store, f"{self.prefix}/encoder", self.encoder_spec,
                             T.const(hist_flat))
        x = T.concat([latent, T.const(obs)], axis=1)
        logits = mlp_forward(self.store, f"{self.prefix}/gate", self.gate_spec, x)
        gate = T.softmax(logits, axis=1)
        mu = None
        for k in range(N_EXPERTS):
            ek = mlp_forward(self.store, f"{self.prefix}/expert{k}", self.expert_spec, x)
            gk = Tslice(gate, k)
            term = T.mul(ek, gk)
            mu = term if mu is None else T.add(mu, term)
        return mu, self.head.logstd(self.store), gate

    def save(self, stem: str):
        save_checkpoint(self.store, stem)

    def load(self, stem: str):
        restore_into(self.store, load_checkpoint(stem), prefix=self.prefix)


def Tslice(t, col: int):
    """Differentiable (n, K) -> (n, 1) column slice."""
    out = T.Tensor(t.data[:, col:col + 1], parents=(t,), name="slice")

    def bw(g, t=t, col=col):
        full = np.zeros_like(t.data)
        full[:, col:col + 1] = g
        t._accumulate(full)

    out._backward_fn = bw if out.requires_grad else None
    return out


def gaussian_kl(mu_s, logstd_s, mu_t: np.ndarray, std_t: np.ndarray):
    """KL(student || teacher) for diagonal Gaussians, summed over dims,
    averaged over the batch; teacher statistics are constants."""
    var_t = std_t * std_t
    log_std_t = np.log(std_t)
    std_s = T.exp(logstd_s)
    var_s = T.square(std_s)
    dmu = T.sub(T.const(mu_t), mu_s)
    quad = T.div(T.add(var_s, T.square(dmu)), T.const(2.0 * var_t))
    per_dim = T.add(T.sub(T.const(log_std_t), logstd_s), T.add(quad, -0.5))
    return T.tmean(T.tsum(per_dim, axis=1))


def distill_loss(mu_s, logstd_s, eps_student: np.ndarray, mu_t: np.ndarray,
                 std_t: np.ndarray, actions_t: np.ndarray, mse_weight: float,
                 kl_weight: float):
    """lambda_mse * ||a_s - a_t||^2 + lambda_kl * KL(student || teacher).

    The stored student action is re-expressed through its sampling noise
    (a_s = mu_s + std_s * eps) so the squared term stays differentiable over
    the update epochs while evaluating to the stored-action MSE.
    """
    if np.any(std_t <= 0):
        raise ContractError("teacher std must be positive")
    a_s = T.add(mu_s, T.mul(T.exp(logstd_s), T.const(eps_student)))
    mse = T.tmean(T.tsum(T.square(T.sub(a_s, T.const(actions_t))), axis=1))
    kl = gaussian_kl(mu_s, logstd_s, mu_t, std_t)
    return T.add(T.mul(mse, mse_weight), T.mul(kl, kl_weight)), float(mse.data), kl


@dataclass
class DaggerBatch:
    hist: np.ndarray
    obs: np.ndarray
    a_teacher: np.ndarray
    mu_teacher: np.ndarray
    std_teacher: np.ndarray
    a_student: np.ndarray
    eps_student: np.ndarray  # (a_student - mu_student) / std_student at collect


class DaggerTrainer:
    """On-policy distillation of two frozen specialists into the student."""

    def __init__(self, teachers: dict, cfg: Config, seed: int, out_dir: str | None = None,
                 n_envs: int | None = None):
        if set(teachers) != {"walking", "recovery"}:
            raise ContractError("need walking and recovery teachers")
        self.cfg = cfg
        self.out_dir = out_dir
        n_envs = n_envs or cfg.distill.n_envs
        # mixed-reset population: falls must not terminate
        self.loop = SpecialistEnvLoop("recovery", cfg, n_envs, seed, policy_kind="multi")
        self.loop.time_limit = int(cfg.distill.episode_s / cfg.sim.control_dt)
        self.teachers = teachers
        rng = np.random.default_rng(seed + 7)
        self.student = MoEActor(OBS_DIM, N_JOINTS, rng, init_std=cfg.ppo.init_std,
                                min_std=cfg.ppo.min_std)
        self.adam = AdamState(self.student.store)
        self.policy_rng = np.random.default_rng(seed + 8)
        self.update_rng = np.random.default_rng(seed + 9)
        self.cmd_rng = np.random.default_rng(seed + 11)
        self.ep_command = np.zeros(n_envs, np.float32)
        self.iteration = 0
        self.metrics_rows: list[dict] = []
        self._mixed_reset(np.arange(n_envs))

    def _mixed_reset(self, idx: np.ndarray):
        """Half standing, half supine/prone; every episode carries a velocity
        command that applies whenever the robot is in the walking regime."""
        if idx.size == 0:
            return
        loop = self.loop
        posture = self.cmd_rng.integers(0, 2, size=idx.size) * self.cmd_rng.integers(1, 3, size=idx.size)
        lo, hi = self.cfg.ppo.cmd_range
        self.ep_command[idx] = self.cmd_rng.uniform(lo, hi, idx.size).astype(np.float32)
        loop.sim.reset_envs(idx, posture, commands=np.zeros(idx.size, np.float32))
        loop.hist.reset(idx)
        loop.hist.buf[idx, -1] = loop.sim.observations()[idx]
        loop.amp_hist[idx] = loop.sim.qpos[idx, 3:][:, None, :]
        loop.ep_return[idx] = 0.0

    def _teacher_forward(self, hist, obs, walking_mask: np.ndarray):
        """Per-state expert labels from the behavior-matched teacher."""
        n = obs.shape[0]
        mu = np.zeros((n, N_JOINTS), np.float32)
        std = np.zeros((n, N_JOINTS), np.float32)
        for task, mask in (("walking", walking_mask), ("recovery", ~walking_mask)):
            if not mask.any():
                continue
            net = self.teachers[task]
            mu[mask] = net.act_mean_np(hist[mask], obs[mask])
            std[mask] = net.head.std(net.store)
        return mu, std

    def collect(self) -> DaggerBatch:
        cfg, loop = self.cfg.distill, self.loop
        n = loop.sim.n
        T_len = cfg.rollout_steps
        hist = np.zeros((T_len, n, 10 * OBS_DIM), np.float32)
        obs = np.zeros((T_len, n, OBS_DIM), np.float32)
        a_t = np.zeros((T_len, n, N_JOINTS), np.float32)
        mu_t = np.zeros((T_len, n, N_JOINTS), np.float32)
        std_t = np.zeros((T_len, n, N_JOINTS), np.float32)
        a_s = np.zeros((T_len, n, N_JOINTS), np.float32)
        eps_s = np.zeros((T_len, n, N_JOINTS), np.float32)
        gates = np.zeros((T_len, n, N_EXPERTS), np.float32)
        walking_lbl = np.zeros((T_len, n), bool)
        for t in range(T_len):
            walking = select_behavior(loop.sim.base_height(), cfg.height_threshold)
            # the recovery teacher trained with zero commands; the episode's
            # velocity command applies only in the walking regime
            loop.sim.command[:] = np.where(walking, self.ep_command, 0.0)
            loop.hist.buf[:, -1] = loop.sim.observations()  # refresh command channel
            h, o, _ = loop.observe()
            mu_b, std_b = self._teacher_forward(h, o, walking)
            a_b = (mu_b + std_b * self.policy_rng.standard_normal(mu_b.shape)).astype(np.float32)
            mu_d, gate = self.student.forward_np(h, o)
            a_d = self.student.sample(mu_d, self.policy_rng)
            hist[t], obs[t] = h, o
            a_t[t], mu_t[t], std_t[t], a_s[t] = a_b, mu_b, std_b, a_d
            eps_s[t] = (a_d - mu_d) / self.student.std()
            gates[t] = gate
            walking_lbl[t] = walking

            info = loop.sim.step(a_d)  # student acts (on-policy states)
            loop.amp_hist[:, :-1] = loop.amp_hist[:, 1:]
            loop.amp_hist[:, -1] = loop.sim.qpos[:, 3:]
            loop.push_obs()
            term = loop.sim.termination_check("multi", loop.time_limit)
            done = term["terminated"] | term["truncated"] | info["diverged"]
            if done.any():
                self._mixed_reset(np.nonzero(done)[0])
        self._last_gates = gates
        self._last_walking = walking_lbl
        flat = T_len * n
        return DaggerBatch(hist.reshape(flat, -1), obs.reshape(flat, -1),
                           a_t.reshape(flat, -1), mu_t.reshape(flat, -1),
                           std_t.reshape(flat, -1), a_s.reshape(flat, -1),
                           eps_s.reshape(flat, -1))

    def update(self, batch: DaggerBatch) -> dict:
        cfg = self.cfg.distill
        n = batch.obs.shape[0]
        mb = n // cfg.minibatches
        tot_loss = tot_mse = tot_kl = 0.0
        count = 0
        for _ in range(cfg.epochs):
            perm = self.update_rng.permutation(n)
            for b in range(cfg.minibatches):
                idx = perm[b * mb:(b + 1) * mb]
                mu_s, logstd_s, _ = self.student.forward_tape(batch.hist[idx], batch.obs[idx])
                loss, mse_val, kl = distill_loss(
                    mu_s, logstd_s, batch.eps_student[idx], batch.mu_teacher[idx],
                    batch.std_teacher[idx], batch.a_teacher[idx],
                    cfg.mse_weight, cfg.kl_weight)
                self.student.store.zero_grad()
                loss.backward()
                clip_grad_norm(self.student.store, self.cfg.ppo.max_grad_norm)
                adam_step(self.student.store, self.adam, cfg.learning_rate)
                tot_loss += float(loss.data)
                tot_mse += mse_val
                tot_kl += float(kl.data)
                count += 1
        return {"distill_loss": tot_loss / count, "mse": tot_mse / count,
                "kl": tot_kl / count}

    def train_iteration(self) -> dict:
        t0 = time.perf_counter()
        batch = self.collect()
        report = self.update(batch)
        self.iteration += 1
        gates = self._last_gates.reshape(-1, N_EXPERTS)
        walking = self._last_walking.reshape(-1)
        ent = -(gates * np.log(gates + 1e-8)).sum(axis=1)
        row = {"iteration": self.iteration, "walk_fraction": float(walking.mean()),
               "gate0_mean": float(gates[:, 0].mean()),
               "gate_entropy_walk": float(ent[walking].mean()) if walking.any() else 0.0,
               "gate_entropy_recover": float(ent[~walking].mean()) if (~walking).any() else 0.0,
               "gate0_walk": float(gates[walking, 0].mean()) if walking.any() else 0.0,
               "gate0_recover": float(gates[~walking, 0].mean()) if (~walking).any() else 0.0,
               "time_s": time.perf_counter() - t0, **report}
        self.metrics_rows.append(row)
        return row

    def train(self, iterations: int, log_fn=None) -> list[dict]:
        for _ in range(iterations):
            row = self.train_iteration()
            if log_fn:
                log_fn(row)
        if self.out_dir:
            self.student.save(os.path.join(self.out_dir, "student"))
        return self.metrics_rows


def load_specialist(stem: str, task: str) -> ActorCritic:
    """Rebuild a frozen specialist from its checkpoint."""
    n_critics = 1 if task == "walking" else 4
    net = ActorCritic(OBS_DIM, N_JOINTS, n_critics, PRIV_DIM,
                      np.random.default_rng(0))
    restore_into(net.store, load_checkpoint(stem))
    return net


def run_dagger(teachers: dict, cfg: Config, seed: int, iterations: int,
               out_dir: str | None = None, n_envs: int | None = None,
               log_fn=None) -> DaggerTrainer:
    trainer = DaggerTrainer(teachers, cfg, seed, out_dir=out_dir, n_envs=n_envs)
    trainer.train(iterations, log_fn=log_fn)
    return trainer
