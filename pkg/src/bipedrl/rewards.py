"""Reward-term library: walking terms, four-group recovery terms, f_tol.

Every term is a pure function of a batched RewardContext. Planar adaptations
of the underlying 3-D table are documented per term in TERM_NOTES (e.g. the
yaw-tracking and arm rows are dropped outright). Scales can be overridden
through RewardConfig.scale_overrides.

The adversarial style reward is appended by the training loop (it needs the
discriminator); it joins the single walking group / the recovery "style"
group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import Config, reward_scale_overrides
from .errors import ContractError

RECOVERY_GROUPS = ("task", "style", "regularization", "post_task")

WALKING_SCALES = {
    "track_lin_vel": 2.0,
    "joint_acc": -5e-7,
    "joint_vel": -1e-3,
    "action_rate": -0.03,
    "action_smoothness": -0.05,
    "ang_vel": -0.05,
    "orientation": -2.0,
    "joint_power": -2.5e-5,
    "feet_clearance": -0.25,
    "feet_stumble": -1.0,
    "torques": -1e-5,
    "hip_deviation": -0.5,
    "joint_pos_limits": -2.0,
    "joint_vel_limits": -1.0,
    "torque_limits": -1.0,
    "feet_slippage": -0.25,
    "collision": -15.0,
    "feet_air_time": 1.0,
    "stuck": -1.0,
}

RECOVERY_SCALES = {
    # task
    "upright": 1.0,
    "head_height": 1.0,
    # style
    "hip_deviation": -10.0,
    "knee_deviation": -0.25,
    "thigh_orientation": 10.0,
    "feet_distance": -10.0,
    "ang_vel_gated": 25.0,
    "foot_displacement": 2.5,
    # regularization
    "joint_acc": -2.5e-7,
    "joint_vel": -1e-3,
    "action_rate": -0.01,
    "action_smoothness": -0.05,
    "torques": -1e-5,
    "joint_power": -2.5e-5,
    "joint_pos_limits": -2.0,
    "joint_vel_limits": -1.0,
    # post task
    "ang_vel_post": 10.0,
    "base_lin_vel_post": 10.0,
    "orientation_post": 10.0,
    "base_height_post": 10.0,
    "target_joint_deviation": 10.0,
    "target_feet_distance": -5.0,
}

RECOVERY_GROUPING = {
    "task": ("upright", "head_height"),
    "style": ("hip_deviation", "knee_deviation", "thigh_orientation",
              "feet_distance", "ang_vel_gated", "foot_displacement"),
    "regularization": ("joint_acc", "joint_vel", "action_rate", "action_smoothness",
                       "torques", "joint_power", "joint_pos_limits", "joint_vel_limits"),
    "post_task": ("ang_vel_post", "base_lin_vel_post", "orientation_post",
                  "base_height_post", "target_joint_deviation", "target_feet_distance"),
}

TERM_NOTES = {
    "track_ang_vel": "dropped: no yaw axis in the sagittal plane",
    "arm_joint_deviation": "dropped: no arms on the 5-link model",
    "shoulder_roll_deviation": "dropped: no arms on the 5-link model",
    "target_joint_track": "dropped: printed formula duplicates joint_power; implemented once",
    "ang_vel": "planar reduction: pitch rate stands in for the roll/pitch pair",
    "orientation": "planar reduction: g_x stands in for the gravity xy-projection",
    "feet_distance": "planar reduction: fore-aft separation x_left - x_right",
    "foot_displacement": "upper clip moved to the exponent cap exp(<= -0.3); the"
                         " printed lower clip makes the row a constant",
    "thigh_orientation": "planar reading: mean vertical alignment cos(thigh angle)",
}


@dataclass
class RewardParams:
    q_default: np.ndarray
    joint_lo: np.ndarray
    joint_hi: np.ndarray
    soft_pos_limit: float
    joint_vel_limit: float
    torque_limit: np.ndarray
    h_stage1: float
    h_stage3: float
    h_stand: float
    feet_clearance_target: float
    feet_air_time_target: float
    stuck_vel: float
    stuck_cmd: float
    walking_scales: dict
    recovery_scales: dict

    @classmethod
    def from_config(cls, cfg: Config, q_default: np.ndarray, joint_lo: np.ndarray,
                    joint_hi: np.ndarray, torque_limit: np.ndarray) -> "RewardParams":
        overrides = reward_scale_overrides(cfg.rewards)
        wscales = {**WALKING_SCALES}
        rscales = {**RECOVERY_SCALES}
        for k, v in overrides.items():
            if k in wscales:
                wscales[k] = v
            if k in rscales:
                rscales[k] = v
        r = cfg.rewards
        return cls(q_default=q_default, joint_lo=joint_lo, joint_hi=joint_hi,
                   soft_pos_limit=r.soft_pos_limit, joint_vel_limit=cfg.sim.joint_vel_limit,
                   torque_limit=torque_limit, h_stage1=r.h_stage1, h_stage3=r.h_stage3,
                   h_stand=cfg.sim.h_stand, feet_clearance_target=r.feet_clearance_target,
                   feet_air_time_target=r.feet_air_time_target, stuck_vel=r.stuck_vel,
                   stuck_cmd=r.stuck_cmd, walking_scales=wscales, recovery_scales=rscales)


@dataclass
class RewardContext:
    """Batched physical quantities a reward step needs; all arrays (n, ...)."""
    v_x: np.ndarray            # base forward velocity
    omega: np.ndarray          # pitch rate
    g_x: np.ndarray            # gravity x-component in base frame
    g_z: np.ndarray            # gravity z-component in base frame
    command: np.ndarray
    q: np.ndarray              # (n, 6)
    qd: np.ndarray
    qdd: np.ndarray
    torque: np.ndarray         # applied (clipped)
    torque_raw: np.ndarray     # pre-clip, for the limit penalty
    action: np.ndarray
    action_prev: np.ndarray
    action_prev2: np.ndarray
    base_height: np.ndarray
    head_height: np.ndarray
    base_x: np.ndarray
    thigh_angles: np.ndarray   # (n, 2) absolute, 0 = vertical
    feet_x: np.ndarray         # (n, 2)
    feet_clearance: np.ndarray  # (n, 2) sole height above terrain
    feet_vel_x: np.ndarray     # (n, 2)
    feet_contact: np.ndarray   # (n, 2) bool
    first_contact: np.ndarray  # (n, 2) bool
    landed_air_time: np.ndarray  # (n, 2) seconds airborne before this contact
    foot_forces: np.ndarray    # (n, 2, 2) per foot (fx, fz) summed heel+toe
    collision_count: np.ndarray  # (n,) body contacts


def context_from_sim(sim, step_info) -> RewardContext:
    foot = sim.foot_state()
    flags = sim.contact_flags
    # heel+toe force sums per foot
    ff = np.stack([
        sim.contact_force[:, 6] + sim.contact_force[:, 7],
        sim.contact_force[:, 8] + sim.contact_force[:, 9],
    ], axis=1)
    g = np.stack([-np.sin(sim.qpos[:, 2]), -np.cos(sim.qpos[:, 2])], axis=-1)
    from .sim.env import BODY_CONTACTS
    return RewardContext(
        v_x=sim.qvel[:, 0], omega=sim.qvel[:, 2], g_x=g[:, 0], g_z=g[:, 1],
        command=sim.command, q=sim.qpos[:, 3:], qd=sim.qvel[:, 3:], qdd=sim.qdd,
        torque=sim.torque, torque_raw=sim.torque_raw,
        action=sim.a_prev, action_prev=sim.a_prev2, action_prev2=sim.a_prev3,
        base_height=sim.base_height(), head_height=sim.head_height(),
        base_x=sim.qpos[:, 0], thigh_angles=sim.thigh_angles(),
        feet_x=foot["pos"][:, :, 0], feet_clearance=foot["clearance"],
        feet_vel_x=foot["vel"][:, :, 0],
        feet_contact=step_info["feet_contact"], first_contact=step_info["first_contact"],
        landed_air_time=step_info["landed_air_time"], foot_forces=ff,
        collision_count=flags[:, BODY_CONTACTS].sum(axis=1).astype(np.float32),
    )


# ---- tolerance function ------------------------------------------------------


def f_tol(x, bounds, margin: float, value_at_margin: float):
    """1 inside [lo, hi]; Gaussian falloff outside reaching value_at_margin
    at a distance of exactly `margin`; a hard indicator when margin == 0."""
    lo, hi = bounds
    if lo > hi:
        raise ContractError("f_tol bounds must satisfy lo <= hi")
    if margin < 0:
        raise ContractError("f_tol margin must be >= 0")
    x = np.asarray(x, dtype=np.float32)
    inside = (x >= lo) & (x <= hi)
    if margin == 0:
        return inside.astype(np.float32)
    if not (0.0 < value_at_margin < 1.0):
        raise ContractError("value_at_margin must lie in (0, 1)")
    d = np.where(x < lo, lo - x, np.where(x > hi, x - hi, 0.0)) / margin
    scale = math.sqrt(-2.0 * math.log(value_at_margin))
    return np.where(inside, 1.0, np.exp(-0.5 * (d * scale) ** 2)).astype(np.float32)


# ---- shared raw terms ---------------------------------------------------------


def _sq(v):
    return (v * v).sum(axis=-1)


def _raw_common(ctx: RewardContext, p: RewardParams) -> dict:
    soft_lo = p.joint_lo * p.soft_pos_limit
    soft_hi = p.joint_hi * p.soft_pos_limit
    out_of_limits = (np.maximum(soft_lo - ctx.q, 0.0) + np.maximum(ctx.q - soft_hi, 0.0))
    return {
        "joint_acc": _sq(ctx.qdd),
        "joint_vel": _sq(ctx.qd),
        "action_rate": _sq(ctx.action - ctx.action_prev),
        "action_smoothness": _sq(ctx.action - 2.0 * ctx.action_prev + ctx.action_prev2),
        "torques": _sq(ctx.torque),
        "joint_power": (np.abs(ctx.torque) * np.abs(ctx.qd)).sum(axis=-1),
        "joint_pos_limits": out_of_limits.sum(axis=-1),
        "joint_vel_limits": np.maximum(np.abs(ctx.qd) - p.joint_vel_limit, 0.0).sum(axis=-1),
    }


def walking_reward(ctx: RewardContext, p: RewardParams):
    """Per-term scaled walking rewards and their total (single group)."""
    c = _raw_common(ctx, p)
    hips = ctx.q[:, [0, 3]]
    raw = {
        "track_lin_vel": np.exp(-((ctx.command - ctx.v_x) ** 2) / 0.25),
        "joint_acc": c["joint_acc"],
        "joint_vel": c["joint_vel"],
        "action_rate": c["action_rate"],
        "action_smoothness": c["action_smoothness"],
        "ang_vel": ctx.omega ** 2,
        "orientation": ctx.g_x ** 2,
        "joint_power": c["joint_power"],
        "feet_clearance": (((ctx.feet_clearance - p.feet_clearance_target) ** 2)
                           * np.abs(ctx.feet_vel_x)).sum(axis=-1),
        "feet_stumble": (np.abs(ctx.foot_forces[:, :, 0])
                         >= 3.0 * np.abs(ctx.foot_forces[:, :, 1])).any(axis=1).astype(np.float32),
        "torques": c["torques"],
        "hip_deviation": np.abs(hips - p.q_default[[0, 3]]).sum(axis=-1),
        "joint_pos_limits": c["joint_pos_limits"],
        "joint_vel_limits": c["joint_vel_limits"],
        "torque_limits": np.maximum(np.abs(ctx.torque_raw) - p.torque_limit, 0.0).sum(axis=-1),
        "feet_slippage": (np.abs(ctx.feet_vel_x) * ctx.feet_contact).sum(axis=-1),
        "collision": ctx.collision_count,
        "feet_air_time": ((ctx.landed_air_time - p.feet_air_time_target)
                          * ctx.first_contact).sum(axis=-1),
        "stuck": ((np.abs(ctx.v_x) <= p.stuck_vel)
                  & (np.abs(ctx.command) >= p.stuck_cmd)).astype(np.float32),
    }
    terms = {k: (p.walking_scales[k] * v).astype(np.float32) for k, v in raw.items()}
    total = np.sum(list(terms.values()), axis=0).astype(np.float32)
    return terms, total


def recovery_reward(ctx: RewardContext, p: RewardParams):
    """Scaled recovery terms, grouped; returns (terms, group_totals)."""
    c = _raw_common(ctx, p)
    gate1 = (ctx.base_height > p.h_stage1).astype(np.float32)
    gate3 = (ctx.base_height > p.h_stage3).astype(np.float32)
    hips = ctx.q[:, [0, 3]]
    knees = ctx.q[:, [1, 4]]
    feet_gap = ctx.feet_x[:, 0] - ctx.feet_x[:, 1]
    feet_mid = 0.5 * (ctx.feet_x[:, 0] + ctx.feet_x[:, 1])
    dx = ctx.base_x - feet_mid
    raw = {
        "upright": f_tol(-ctx.g_z, (0.99, np.inf), 1.0, 0.05),
        "head_height": f_tol(ctx.head_height, (1.0, np.inf), 1.0, 0.1),
        "hip_deviation": ((np.abs(hips) > 0.9) | (np.abs(hips) < 0.8)).sum(axis=-1),
        "knee_deviation": ((np.abs(knees) > 2.85) | (np.abs(knees) < -0.06)).sum(axis=-1),
        "thigh_orientation": f_tol(0.5 * np.cos(ctx.thigh_angles).sum(axis=-1),
                                   (0.8, np.inf), 1.0, 0.1),
        "feet_distance": (feet_gap ** 2 > 0.9).astype(np.float32),
        "ang_vel_gated": np.exp(-2.0 * ctx.omega ** 2) * gate1,
        "foot_displacement": np.exp(np.minimum(-2.0 * dx ** 2, -0.3)),
        "joint_acc": c["joint_acc"],
        "joint_vel": c["joint_vel"],
        "action_rate": c["action_rate"],
        "action_smoothness": c["action_smoothness"],
        "torques": c["torques"],
        "joint_power": c["joint_power"],
        "joint_pos_limits": c["joint_pos_limits"],
        "joint_vel_limits": c["joint_vel_limits"],
        "ang_vel_post": np.exp(-2.0 * ctx.omega ** 2) * gate3,
        "base_lin_vel_post": np.exp(-5.0 * ctx.v_x ** 2) * gate3,
        "orientation_post": np.exp(-5.0 * ctx.g_x ** 2) * gate3,
        "base_height_post": np.exp(-20.0 * np.abs(ctx.base_height - p.h_stand)) * gate3,
        "target_joint_deviation": np.exp(-0.1 * _sq(ctx.q - p.q_default)),
        "target_feet_distance": f_tol(feet_gap, (0.3, 0.4), 0.1, 0.05),
    }
    terms = {k: (p.recovery_scales[k] * v).astype(np.float32) for k, v in raw.items()}
    groups = {}
    for gname, names in RECOVERY_GROUPING.items():
        groups[gname] = np.sum([terms[k] for k in names], axis=0).astype(np.float32)
    return terms, groups
