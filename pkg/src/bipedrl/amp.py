"""Adversarial motion prior: windows, discriminator, style reward, and the
scripted reference-motion generators that stand in for motion capture.

Each task (locomotion / recovery) owns an independent discriminator scoring
5-step windows of joint positions, trained with the least-squares GAN
objective plus an input-gradient penalty on reference samples. The
discriminator score d maps to a bounded style reward peaking at d = 1.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .config import AmpConfig
from .errors import ContractError
from .nn import tensor as T
from .nn.mlp import MlpSpec, init_mlp, mlp_eval, mlp_forward, mlp_input_gradient
from .nn.params import AdamState, ParamStore, adam_step

WINDOW_FRAMES = 5
WINDOW_OFFSET = 3  # window for step t spans frames t-3 .. t+1

MOTION_TAG = "bipedrl-motions-v1"


class WindowUnavailable(ContractError):
    """Raised when fewer than 5 chronological frames exist around t."""


def make_window(frames: np.ndarray, t: int) -> np.ndarray:
    """Flatten frames t-3 .. t+1 of a (T, J) trajectory into (5*J,)."""
    if t - WINDOW_OFFSET < 0 or t + 1 >= len(frames):
        raise WindowUnavailable(f"no 5-step window around t={t} in {len(frames)} frames")
    return np.asarray(frames[t - WINDOW_OFFSET:t + 2], np.float32).reshape(-1)


def window_count(n_frames: int) -> int:
    return max(n_frames - WINDOW_FRAMES + 1, 0)


def style_reward(d: np.ndarray, style_scale: float) -> np.ndarray:
    """Bounded surrogate reward: scale * max(0, 1 - (d-1)^2/4)."""
    d = np.asarray(d, np.float32)
    return (style_scale * np.maximum(0.0, 1.0 - 0.25 * (d - 1.0) ** 2)).astype(np.float32)


def total_reward(task_reward: np.ndarray, style: np.ndarray) -> np.ndarray:
    return (np.asarray(task_reward, np.float32) + np.asarray(style, np.float32))


# ---- reference motions -----------------------------------------------------


@dataclass
class ReferenceMotionSet:
    kind: str  # "locomotion" | "recovery"
    trajectories: list = field(default_factory=list)  # each (T_i, J) float32

    def __post_init__(self):
        for tr in self.trajectories:
            if len(tr) < WINDOW_FRAMES:
                raise ContractError("every reference trajectory needs >= 5 frames")

    def n_windows(self) -> int:
        return sum(window_count(len(tr)) for tr in self.trajectories)


def _hermite(times, keys, t_query):
    """Catmull-Rom interpolation of keyframes; keys (K, J)."""
    times = np.asarray(times, np.float64)
    keys = np.asarray(keys, np.float64)
    grads = np.gradient(keys, times, axis=0)
    out = np.empty((len(t_query), keys.shape[1]))
    seg = np.clip(np.searchsorted(times, t_query, side="right") - 1, 0, len(times) - 2)
    for j, (i, tq) in enumerate(zip(seg, t_query)):
        h = times[i + 1] - times[i]
        s = (tq - times[i]) / h
        h00 = 2 * s**3 - 3 * s**2 + 1
        h10 = s**3 - 2 * s**2 + s
        h01 = -2 * s**3 + 3 * s**2
        h11 = s**3 - s**2
        out[j] = (h00 * keys[i] + h10 * h * grads[i]
                  + h01 * keys[i + 1] + h11 * h * grads[i + 1])
    return out.astype(np.float32)


def generate_reference_motions(kind: str, cfg: AmpConfig, q_default: np.ndarray,
                               seed: int = 0, jitter: float = 1.0,
                               fps: float = 50.0) -> ReferenceMotionSet:
    """Scripted analytic trajectories standing in for retargeted capture.

    locomotion: antiphase hip sinusoids with swing-knee flexion at the gait
    frequency; recovery: keyframed lying -> tuck -> crouch -> default-pose
    spline. `jitter=0` makes generation fully deterministic.
    """
    if kind not in ("locomotion", "recovery"):
        raise ContractError(f"unknown reference-motion kind {kind!r}")
    rng = np.random.default_rng(seed)
    n_traj = cfg.n_reference_trajectories
    trajs = []
    if kind == "locomotion":
        amp_lo, amp_hi = cfg.hip_amplitude
        duration = 4.0
        t = np.arange(0.0, duration, 1.0 / fps)
        for _ in range(n_traj):
            amp = 0.5 * (amp_lo + amp_hi) + jitter * rng.uniform(-0.5, 0.5) * (amp_hi - amp_lo)
            freq = cfg.gait_freq_hz * (1.0 + 0.1 * jitter * rng.uniform(-1, 1))
            knee_amp = 0.7 * amp / 0.45 + 0.15 * jitter * rng.uniform(-0.3, 0.3)
            phase = 2.0 * np.pi * freq * t
            q = np.zeros((len(t), 6), np.float32)
            for leg, ph0 in ((0, 0.0), (3, np.pi)):
                swing = np.maximum(np.sin(phase + ph0 + 0.4), 0.0)
                q[:, leg + 0] = q_default[leg + 0] + amp * np.sin(phase + ph0)
                q[:, leg + 1] = q_default[leg + 1] - knee_amp * swing
                q[:, leg + 2] = -(q[:, leg + 0] + q[:, leg + 1])
            trajs.append(q)
    else:
        duration = cfg.recovery_duration_s
        t = np.arange(0.0, duration + 1e-9, 1.0 / fps)
        lying = np.zeros(6, np.float32)
        tuck = np.array([0.9, -2.2, 0.9, 0.9, -2.2, 0.9], np.float32)
        crouch = np.array([0.8, -1.7, 0.8, 0.8, -1.7, 0.8], np.float32)
        for _ in range(n_traj):
            keys = np.stack([
                lying + jitter * rng.uniform(-0.08, 0.08, 6),
                tuck + jitter * rng.uniform(-0.15, 0.15, 6),
                crouch + jitter * rng.uniform(-0.12, 0.12, 6),
                q_default + jitter * rng.uniform(-0.02, 0.02, 6),
            ])
            times = np.array([0.0, 0.4, 0.7, 1.0]) * duration
            trajs.append(_hermite(times, keys, t))
    return ReferenceMotionSet(kind=kind, trajectories=trajs)


def sample_reference_windows(motions: ReferenceMotionSet, n: int,
                             rng: np.random.Generator) -> np.ndarray:
    """Uniform over all (trajectory, start) sliding-window pairs; (n, 5*J)."""
    if n < 1:
        raise ContractError("need n >= 1 reference windows")
    counts = np.array([window_count(len(tr)) for tr in motions.trajectories])
    if counts.sum() == 0:
        raise ContractError("reference motion set has no complete windows")
    cum = np.cumsum(counts)
    picks = rng.integers(0, cum[-1], size=n)
    traj_idx = np.searchsorted(cum, picks, side="right")
    start = picks - (cum[traj_idx] - counts[traj_idx])
    out = np.empty((n, WINDOW_FRAMES * motions.trajectories[0].shape[1]), np.float32)
    for i, (ti, si) in enumerate(zip(traj_idx, start)):
        out[i] = motions.trajectories[ti][si:si + WINDOW_FRAMES].reshape(-1)
    return out


# ---- serialization -----------------------------------------------------------


def export_motions(motions: ReferenceMotionSet) -> str:
    lines = [MOTION_TAG, f"kind {motions.kind}", f"count {len(motions.trajectories)}"]
    for tr in motions.trajectories:
        lines.append(f"trajectory {len(tr)}")
        for frame in tr:
            lines.append(" ".join(f"{v:.6f}" for v in frame))
    return "\n".join(lines) + "\n"


def import_motions(text: str) -> ReferenceMotionSet:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0] != MOTION_TAG:
        raise ContractError("not a motion file (missing tag)")
    kind = lines[1].split()[1]
    trajs = []
    i = 3
    while i < len(lines):
        head = lines[i].split()
        if head[0] != "trajectory":
            raise ContractError(f"malformed motion file near line {i}")
        n = int(head[1])
        frames = [np.array([float(v) for v in lines[i + 1 + k].split()], np.float32)
                  for k in range(n)]
        trajs.append(np.stack(frames))
        i += 1 + n
    return ReferenceMotionSet(kind=kind, trajectories=trajs)


# ---- discriminator -------------------------------------------------------------


class AmpDiscriminator:
    """Per-task LSGAN discriminator over flattened 5-step windows."""

    def __init__(self, task: str, window_dim: int, cfg: AmpConfig,
                 rng: np.random.Generator, store: ParamStore | None = None):
        self.task = task
        self.cfg = cfg
        self.prefix = f"disc_{task}"
        self.spec = MlpSpec(window_dim, [int(d) for d in cfg.disc_hidden], 1)
        self.store = store if store is not None else ParamStore()
        init_mlp(self.store, self.prefix, self.spec, rng)
        self.adam = AdamState(self.store, prefix=self.prefix)
        self.replay = np.zeros((cfg.replay_size, window_dim), np.float32)
        self.replay_fill = 0
        self.replay_head = 0

    def score(self, windows: np.ndarray) -> np.ndarray:
        return mlp_eval(self.store, self.prefix, self.spec, windows)[:, 0]

    def add_policy_windows(self, windows: np.ndarray):
        for w in windows:  # ring buffer; rollout batches are modest
            self.replay[self.replay_head] = w
            self.replay_head = (self.replay_head + 1) % len(self.replay)
            self.replay_fill = min(self.replay_fill + 1, len(self.replay))

    def sample_policy_windows(self, n: int, rng: np.random.Generator) -> np.ndarray:
        if self.replay_fill == 0:
            raise ContractError("policy window replay is empty")
        idx = rng.integers(0, self.replay_fill, size=n)
        return self.replay[idx]

    def loss(self, ref_batch: np.ndarray, pol_batch: np.ndarray):
        return discriminator_loss(self.store, self.prefix, self.spec,
                                  ref_batch, pol_batch, self.cfg.grad_penalty)

    def update(self, motions: ReferenceMotionSet, rng: np.random.Generator) -> dict:
        """One round of discriminator training; returns scalar diagnostics."""
        stats = {}
        for _ in range(self.cfg.updates_per_iter):
            ref = sample_reference_windows(motions, self.cfg.batch_size, rng)
            pol = self.sample_policy_windows(self.cfg.batch_size, rng)
            self.store.zero_grad()
            loss = self.loss(ref, pol)
            loss.backward()
            adam_step(self.store, self.adam, self.cfg.disc_lr)
            stats = {"disc_loss": float(loss.data),
                     "disc_ref_score": float(self.score(ref).mean()),
                     "disc_pol_score": float(self.score(pol).mean())}
        return stats


def discriminator_loss(store: ParamStore, prefix: str, spec: MlpSpec,
                       ref_batch: np.ndarray, pol_batch: np.ndarray,
                       grad_penalty: float):
    """LSGAN objective with input-gradient penalty on reference samples:
    E_ref[(D-1)^2] + E_pol[(D+1)^2] + (a_d/2) E_ref[||dD/dx||_2]."""
    if len(ref_batch) == 0 or len(pol_batch) == 0:
        raise ContractError("discriminator batches must be non-empty")
    if ref_batch.shape[1] != pol_batch.shape[1]:
        raise ContractError("reference/policy window dims differ")
    d_ref = mlp_forward(store, prefix, spec, T.const(ref_batch))
    d_pol = mlp_forward(store, prefix, spec, T.const(pol_batch))
    loss = T.add(T.tmean(T.square(T.sub(d_ref, 1.0))),
                 T.tmean(T.square(T.add(d_pol, 1.0))))
    if grad_penalty > 0.0:
        g = mlp_input_gradient(store, prefix, spec, T.const(ref_batch))
        norms = T.sqrt(T.add(T.tsum(T.square(g), axis=1), 1e-12))
        loss = T.add(loss, T.mul(T.tmean(norms), 0.5 * grad_penalty))
    return loss
