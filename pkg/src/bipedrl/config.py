"""Configuration dataclasses and their plain-text (INI) round-trip.

One section per module; every tunable default is a named key so that runs
are fully pinned by a config file plus seeds. Tuples are comma-separated in
the file.
"""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field, fields

from .errors import ContractError


@dataclass
class SimConfig:
    # timing: 50 Hz control, 10 substeps -> 500 Hz inner PD loop
    control_dt: float = 0.02
    substeps: int = 10
    gravity: float = 9.81
    # geometry (m): 5-link planar biped, massless foot segment at the ankle
    torso_len: float = 0.45
    thigh_len: float = 0.35
    shank_len: float = 0.33
    ankle_height: float = 0.07
    heel_len: float = 0.10
    toe_len: float = 0.16
    # masses (kg); sized so the Table-pinned ankle stiffness (2 x 40 Nm/rad)
    # exceeds the standing gravitational stiffness m*g*h_com. Foot mass is
    # nonzero so the ankle coordinate has real inertia; armature adds rotor
    # inertia to every joint.
    torso_mass: float = 4.5
    thigh_mass: float = 2.0
    shank_mass: float = 1.0
    foot_mass: float = 0.4
    armature: float = 0.02
    # PD gains per joint kind (hip, knee, ankle)
    kp: tuple = (150.0, 200.0, 40.0)
    kd: tuple = (4.0, 6.0, 2.0)
    torque_limit: tuple = (88.0, 139.0, 50.0)
    action_scale: float = 0.5
    # default pose (hip, knee, ankle), mirrored to both legs
    q_default_leg: tuple = (0.15, -0.4, 0.2)
    # hard mechanical limits; spring-damper stops engage `joint_stop_margin`
    # inside them so limit hits stay smooth and energy-consistent
    joint_lo: tuple = (-2.9, -3.0, -1.6)
    joint_hi: tuple = (2.9, 0.25, 1.6)
    joint_stop_margin: float = 0.15
    joint_stop_stiffness: float = 2000.0
    joint_stop_damping: float = 20.0
    joint_vel_limit: float = 20.0
    # contact model: one-sided spring-damper + anchored Coulomb friction
    contact_kn: float = 2.0e4
    contact_cn: float = 200.0
    contact_kt: float = 1.0e4
    contact_ct: float = 100.0
    friction_default: float = 0.8
    restitution_default: float = 0.0
    # conventions / safety
    h_stand: float = 0.75
    lying_pitch: float = 1.45
    fall_pitch: float = 1.0
    velocity_blowup: float = 100.0
    patch_len: float = 8.0
    terrain_spacing: float = 0.05


@dataclass
class DomainRandConfig:
    enabled: bool = True
    restitution: tuple = (0.0, 1.0)
    friction: tuple = (0.1, 1.0)
    com_offset: tuple = (-0.03, 0.03)
    payload: tuple = (-2.0, 5.0)
    link_mass_scale: tuple = (0.8, 1.2)
    kp_scale: tuple = (0.8, 1.25)
    kd_scale: tuple = (0.8, 1.25)
    actuation_offset: tuple = (-0.05, 0.05)
    motor_strength: tuple = (0.8, 1.2)
    action_delay_ms: tuple = (0.0, 100.0)
    init_joint_scale: tuple = (0.85, 1.15)
    init_joint_offset: tuple = (-0.1, 0.1)


@dataclass
class RewardConfig:
    # base-height thresholds gating recovery style/post-task terms
    h_stage1: float = 0.35
    h_stage3: float = 0.65
    # walking extras
    feet_clearance_target: float = 0.08
    feet_air_time_target: float = 0.5
    soft_pos_limit: float = 0.9
    stuck_vel: float = 0.1
    stuck_cmd: float = 0.2
    # scale overrides: "term=value" pairs; empty string keeps table defaults
    scale_overrides: str = ""


@dataclass
class AmpConfig:
    style_scale_walking: float = 5.0
    style_scale_recovery: float = 50.0
    grad_penalty: float = 1.0
    disc_lr: float = 1.0e-3
    disc_hidden: tuple = (512.0, 256.0)
    batch_size: int = 512
    updates_per_iter: int = 2
    replay_size: int = 65536
    n_reference_trajectories: int = 12
    gait_freq_hz: float = 1.2
    hip_amplitude: tuple = (0.3, 0.6)
    recovery_duration_s: float = 3.0


@dataclass
class PpoConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_ratio: float = 0.2
    value_coef: float = 1.0
    entropy_coef: float = 0.005
    learning_rate: float = 1.0e-3
    # KL-adaptive schedule around the base rate (0 disables)
    desired_kl: float = 0.02
    lr_bounds: tuple = (1.0e-4, 3.0e-3)
    min_std: float = 0.2
    rollout_steps: int = 32
    epochs: int = 5
    minibatches: int = 4
    n_envs: int = 256
    init_std: float = 0.45
    max_grad_norm: float = 1.0
    episode_s: float = 10.0
    cmd_range: tuple = (0.4, 1.0)
    checkpoint_every: int = 100


@dataclass
class DistillConfig:
    mse_weight: float = 0.1
    kl_weight: float = 0.5
    learning_rate: float = 1.0e-3
    n_envs: int = 256
    rollout_steps: int = 32
    epochs: int = 5
    minibatches: int = 4
    iterations_paper: int = 4000
    height_threshold: float = 0.5
    episode_s: float = 10.0


@dataclass
class FinetuneConfig:
    actor_lr: float = 1.0e-4
    n_envs_per_task: int = 128
    arm: str = "bc_pc"  # one of sc_nopc, sc_pc, bc_nopc, bc_pc
    walk_episode_s: float = 20.0
    recover_episode_s: float = 10.0
    iterations_paper: int = 10000


@dataclass
class CurriculumConfig:
    max_level: int = 9
    promote_fraction: float = 0.5
    demote_fraction: float = 0.25
    terrain_types: tuple = ("flat", "slope", "hurdle", "discrete")


@dataclass
class EvalConfig:
    trials: int = 64
    trials_paper: int = 1000
    locomotion_time_s: float = 20.0
    recovery_time_s: float = 10.0
    cmd_range: tuple = (0.4, 1.0)
    upright_pitch: float = 0.3
    irrecoverable_window_s: float = 5.0
    irrecoverable_rise: float = 0.05
    randomize_dynamics: bool = False
    # paper-style eval feature bands (used when level < 0 is requested)
    slope_band_deg: tuple = (12.0, 16.0)
    hurdle_band_m: tuple = (0.08, 0.1)
    discrete_band_m: tuple = (0.08, 0.1)
    locomotion_hurdles: int = 3
    recovery_hurdles: int = 8


@dataclass
class Config:
    sim: SimConfig = field(default_factory=SimConfig)
    domain_rand: DomainRandConfig = field(default_factory=DomainRandConfig)
    rewards: RewardConfig = field(default_factory=RewardConfig)
    amp: AmpConfig = field(default_factory=AmpConfig)
    ppo: PpoConfig = field(default_factory=PpoConfig)
    distill: DistillConfig = field(default_factory=DistillConfig)
    finetune: FinetuneConfig = field(default_factory=FinetuneConfig)
    curriculum: CurriculumConfig = field(default_factory=CurriculumConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)


def _format_value(v) -> str:
    if isinstance(v, tuple):
        return ", ".join(str(x) for x in v)
    return str(v)


def _parse_value(text: str, proto):
    if isinstance(proto, tuple):
        parts = [p.strip() for p in text.split(",") if p.strip()]
        if proto and isinstance(proto[0], str):
            return tuple(parts)
        return tuple(float(p) for p in parts)
    if isinstance(proto, bool):
        if text.lower() in ("true", "1", "yes"):
            return True
        if text.lower() in ("false", "0", "no"):
            return False
        raise ContractError(f"bad boolean {text!r}")
    if isinstance(proto, int):
        return int(text)
    if isinstance(proto, float):
        return float(text)
    return text


def dump_config(cfg: Config) -> str:
    cp = configparser.ConfigParser()
    for f in fields(cfg):
        section = f.name
        sub = getattr(cfg, f.name)
        cp[section] = {sf.name: _format_value(getattr(sub, sf.name)) for sf in fields(sub)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


def save_config(cfg: Config, path: str):
    with open(path, "w") as f:
        f.write(dump_config(cfg))


def load_config(path: str | None = None, text: str | None = None) -> Config:
    """Defaults overlaid with any keys present in the file/text."""
    cfg = Config()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser()
    if text is not None:
        cp.read_string(text)
    else:
        read = cp.read(path)
        if not read:
            raise ContractError(f"config file not found: {path!r}")
    known = {f.name: getattr(cfg, f.name) for f in fields(cfg)}
    for section in cp.sections():
        if section not in known:
            raise ContractError(f"unknown config section [{section}]")
        sub = known[section]
        sub_fields = {sf.name: sf for sf in fields(sub)}
        for key, raw in cp[section].items():
            if key not in sub_fields:
                raise ContractError(f"unknown key {key!r} in section [{section}]")
            proto = getattr(sub, key)
            setattr(sub, key, _parse_value(raw, proto))
    return cfg


def reward_scale_overrides(cfg: RewardConfig) -> dict[str, float]:
    out = {}
    for pair in cfg.scale_overrides.split(";"):
        pair = pair.strip()
        if not pair:
            continue
        name, _, val = pair.partition("=")
        if not val:
            raise ContractError(f"bad scale override {pair!r} (want name=value)")
        out[name.strip()] = float(val)
    return out


def config_copy(cfg: Config) -> Config:
    return dataclasses.replace(
        cfg, **{f.name: dataclasses.replace(getattr(cfg, f.name)) for f in fields(cfg)})
