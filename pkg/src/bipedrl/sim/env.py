"""Vectorized planar 5-link biped simulator.

Model: torso + thigh/shank per leg (5 massive links, 6 actuated joints:
hip/knee/ankle per leg; the ankle orients a massless foot segment used only
for contact). Generalized coordinates per environment:

    [x, z, pitch, hip_l, knee_l, ankle_l, hip_r, knee_r, ankle_r]

Dynamics come from an exact 2-point-mass decomposition of each link (two
point masses at CoM +- radius of gyration reproduce planar m, CoM and I),
giving M(q) qdd = J^T f - bias with closed-form Jacobians. Integration is
semi-implicit Euler at 500 Hz, 10 substeps per 50 Hz control step. Contacts
are one-sided spring-dampers against the heightfield with anchored Coulomb
friction; restitution scales the normal damper on separation.

Conventions: pitch is CCW, 0 = upright, head at base + L_t*(-sin p, cos p);
gravity in the base frame is (-sin p, -cos p), so pitch = pi/2 gives
(-1, 0). Supine = +lying_pitch, prone = -lying_pitch. Forward is +x.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..config import Config, DomainRandConfig, SimConfig
from ..errors import ContractError, SimulationDiverged
from .terrain import Terrain, TerrainBatch, generate_terrain

N_JOINTS = 6
N_GEN = 9  # x, z, pitch + 6 joints
OBS_DIM = 4 + 3 * N_JOINTS  # Eq-layout: omega, gravity(2), command, q, qd, a_prev
PRIV_DIM = 6  # friction, kp scale, kd scale, payload, com dx, com dz

# absolute-angle slots: torso, thighL, shankL, footL, thighR, shankR, footR
A_TORSO, A_THL, A_SHL, A_FTL, A_THR, A_SHR, A_FTR = range(7)

# contact point slots
C_HEAD, C_BASE, C_KNEE_L, C_KNEE_R, C_ANKLE_L, C_ANKLE_R, C_HEEL_L, C_TOE_L, C_HEEL_R, C_TOE_R = range(10)
N_CONTACT = 10
FOOT_CONTACTS = [C_HEEL_L, C_TOE_L, C_HEEL_R, C_TOE_R]
# contacts that count as a fall / collision (shank ends excluded: they sit
# close to the sole and would false-positive on terrain edges)
BODY_CONTACTS = [C_HEAD, C_BASE, C_KNEE_L, C_KNEE_R]

POSTURES = ("standing", "supine", "prone")


@dataclass
class DomainRandSample:
    """Per-environment physics randomization, resampled each episode."""
    restitution: np.ndarray     # (n,)
    friction: np.ndarray        # (n,)
    com_offset: np.ndarray      # (n, 2) torso-frame CoM shift
    payload: np.ndarray         # (n,) extra torso mass, may be negative
    link_mass_scale: np.ndarray  # (n, 5) torso, thL, shL, thR, shR
    kp_scale: np.ndarray        # (n, 6)
    kd_scale: np.ndarray        # (n, 6)
    actuation_offset: np.ndarray  # (n, 6) Nm
    motor_strength: np.ndarray  # (n, 6) torque multiplier
    action_delay_steps: np.ndarray  # (n,) int, control steps
    init_joint_scale: np.ndarray   # (n, 6)
    init_joint_offset: np.ndarray  # (n, 6)

    def privileged(self) -> np.ndarray:
        return np.stack([
            self.friction,
            self.kp_scale.mean(axis=1),
            self.kd_scale.mean(axis=1),
            self.payload,
            self.com_offset[:, 0],
            self.com_offset[:, 1],
        ], axis=1).astype(np.float32)


def sample_domain_randomization(dr: DomainRandConfig, n: int, rng: np.random.Generator,
                                sim: SimConfig | None = None) -> DomainRandSample:
    """Uniform sample of every randomized term; neutral values when disabled."""
    sim = sim or SimConfig()
    if not dr.enabled:
        return DomainRandSample(
            restitution=np.full(n, sim.restitution_default, np.float32),
            friction=np.full(n, sim.friction_default, np.float32),
            com_offset=np.zeros((n, 2), np.float32),
            payload=np.zeros(n, np.float32),
            link_mass_scale=np.ones((n, 5), np.float32),
            kp_scale=np.ones((n, 6), np.float32),
            kd_scale=np.ones((n, 6), np.float32),
            actuation_offset=np.zeros((n, 6), np.float32),
            motor_strength=np.ones((n, 6), np.float32),
            action_delay_steps=np.zeros(n, np.int64),
            init_joint_scale=np.ones((n, 6), np.float32),
            init_joint_offset=np.zeros((n, 6), np.float32),
        )

    def u(lo_hi, size):
        return rng.uniform(lo_hi[0], lo_hi[1], size=size).astype(np.float32)

    max_delay_steps = dr.action_delay_ms[1] / 1000.0 / 0.02
    return DomainRandSample(
        restitution=u(dr.restitution, n),
        friction=u(dr.friction, n),
        com_offset=u(dr.com_offset, (n, 2)),
        payload=u(dr.payload, n),
        link_mass_scale=u(dr.link_mass_scale, (n, 5)),
        kp_scale=u(dr.kp_scale, (n, 6)),
        kd_scale=u(dr.kd_scale, (n, 6)),
        actuation_offset=u(dr.actuation_offset, (n, 6)),
        motor_strength=u(dr.motor_strength, (n, 6)),
        action_delay_steps=rng.integers(0, int(max_delay_steps) + 1, size=n),
        init_joint_scale=u(dr.init_joint_scale, (n, 6)),
        init_joint_offset=u(dr.init_joint_offset, (n, 6)),
    )


# ---- spec-level operations (vectorized over leading axes) ------------------


def action_to_target(a: np.ndarray, q_default: np.ndarray, action_scale: float) -> np.ndarray:
    """PD position target: q_default + scale * clamp(a, -1, 1)."""
    return q_default + action_scale * np.clip(a, -1.0, 1.0)


def pd_torque(q_target: np.ndarray, q: np.ndarray, qd: np.ndarray,
              kp: np.ndarray, kd: np.ndarray, torque_limit: np.ndarray | None = None):
    """Tracking PD law kp*(q_target - q) - kd*qd, then clipped to limits.

    Returns (clipped, raw) torques.
    """
    if not (q_target.shape[-1] == q.shape[-1] == qd.shape[-1]):
        raise ContractError("pd_torque: joint vector lengths differ")
    raw = kp * (q_target - q) - kd * qd
    if torque_limit is None:
        return raw, raw
    return np.clip(raw, -torque_limit, torque_limit), raw


def gravity_in_base(pitch: np.ndarray) -> np.ndarray:
    """Unit gravity direction rotated into the base frame; (..., 2)."""
    return np.stack([-np.sin(pitch), -np.cos(pitch)], axis=-1)


def build_observation(omega, pitch, command, q, qd, a_prev) -> np.ndarray:
    """Proprioceptive vector [omega, g_base(2), command, q, qd, a_prev].

    Batched: omega/pitch/command are (n,), joint blocks (n, 6); output (n, 22).
    """
    omega = np.atleast_1d(np.asarray(omega, np.float32))
    pitch = np.atleast_1d(np.asarray(pitch, np.float32))
    command = np.atleast_1d(np.asarray(command, np.float32))
    q = np.atleast_2d(np.asarray(q, np.float32))
    qd = np.atleast_2d(np.asarray(qd, np.float32))
    a_prev = np.atleast_2d(np.asarray(a_prev, np.float32))
    return np.concatenate([
        omega[:, None], gravity_in_base(pitch), command[:, None], q, qd, a_prev,
    ], axis=1).astype(np.float32)


class BipedSim:
    """A population of independent planar bipeds stepped in lockstep."""

    def __init__(self, n_envs: int, cfg: Config, seed: int,
                 terrains: list[Terrain] | None = None):
        self.cfg = cfg
        self.sim = cfg.sim
        self.n = n_envs
        self.rng = np.random.default_rng(seed)
        s = self.sim
        if terrains is None:
            terrains = [generate_terrain("flat", 0, seed + i, s.patch_len, s.terrain_spacing)
                        for i in range(n_envs)]
        self.terrain = TerrainBatch(terrains)

        self.q_default = np.tile(np.asarray(s.q_default_leg, np.float32), 2)
        self.joint_lo = np.tile(np.asarray(s.joint_lo, np.float32), 2)
        self.joint_hi = np.tile(np.asarray(s.joint_hi, np.float32), 2)
        self.kp = np.tile(np.asarray(s.kp, np.float32), 2)
        self.kd = np.tile(np.asarray(s.kd, np.float32), 2)
        self.torque_limit = np.tile(np.asarray(s.torque_limit, np.float32), 2)

        # 2-point decomposition constants: (center +- rho) along each link
        def pts(length):
            rho = length / np.sqrt(12.0)
            return 0.5 * length - rho, 0.5 * length + rho

        self.torso_pts = pts(s.torso_len)
        self.thigh_pts = pts(s.thigh_len)
        self.shank_pts = pts(s.shank_len)

        n = self.n
        self.qpos = np.zeros((n, N_GEN), np.float32)
        self.qvel = np.zeros((n, N_GEN), np.float32)
        self.anchor = np.full((n, N_CONTACT), np.nan, np.float32)
        self.command = np.zeros(n, np.float32)
        self.a_prev = np.zeros((n, N_JOINTS), np.float32)
        self.a_prev2 = np.zeros((n, N_JOINTS), np.float32)
        self.a_prev3 = np.zeros((n, N_JOINTS), np.float32)
        self.qd_prev = np.zeros((n, N_JOINTS), np.float32)
        self.episode_step = np.zeros(n, np.int64)
        self.air_time = np.zeros((n, 2), np.float32)  # per foot
        self.feet_contact_prev = np.zeros((n, 2), bool)
        self.posture = np.zeros(n, np.int64)  # index into POSTURES
        self.start_x = np.zeros(n, np.float32)
        # multi-behavior bookkeeping for irrecoverable-fall detection
        self.low_since = np.full(n, -1.0, np.float32)
        self.low_ref_height = np.zeros(n, np.float32)

        self.dr = sample_domain_randomization(cfg.domain_rand, n, self.rng, s)
        self._m_pts = None
        max_delay = int(cfg.domain_rand.action_delay_ms[1] / 1000.0 / s.control_dt) + 1
        self.action_queue = np.zeros((n, max_delay, N_JOINTS), np.float32)
        self.queue_head = 0

        # step scratch filled by step() for reward evaluation
        self.torque = np.zeros((n, N_JOINTS), np.float32)
        self.torque_raw = np.zeros((n, N_JOINTS), np.float32)
        self.contact_force = np.zeros((n, N_CONTACT, 2), np.float32)
        self.contact_flags = np.zeros((n, N_CONTACT), bool)
        self.qdd = np.zeros((n, N_JOINTS), np.float32)

        self.reset_envs(np.arange(n), "standing")

    # ---- per-env mass layout -------------------------------------------

    def _point_masses(self) -> np.ndarray:
        """(n, 14) masses honoring link-mass scale and torso payload; cached
        between resets (domain randomization is per-episode constant).

        Points 0-9 are the 2-point rigid-link decompositions (torso, thighs,
        shanks); 10-13 put the small foot mass at the heel/toe contact points
        so the ankle coordinate carries real inertia.
        """
        if self._m_pts is not None:
            return self._m_pts
        s, dr = self.sim, self.dr
        m = np.empty((self.n, 14), np.float32)
        torso = np.maximum(s.torso_mass * dr.link_mass_scale[:, 0] + dr.payload, 0.5)
        m[:, 0] = m[:, 1] = 0.5 * torso
        m[:, 2] = m[:, 3] = 0.5 * s.thigh_mass * dr.link_mass_scale[:, 1]
        m[:, 4] = m[:, 5] = 0.5 * s.shank_mass * dr.link_mass_scale[:, 2]
        m[:, 6] = m[:, 7] = 0.5 * s.thigh_mass * dr.link_mass_scale[:, 3]
        m[:, 8] = m[:, 9] = 0.5 * s.shank_mass * dr.link_mass_scale[:, 4]
        m[:, 10] = m[:, 11] = 0.5 * s.foot_mass * dr.link_mass_scale[:, 2]
        m[:, 12] = m[:, 13] = 0.5 * s.foot_mass * dr.link_mass_scale[:, 4]
        self._m_pts = m
        return m

    def total_mass(self) -> np.ndarray:
        return self._point_masses().sum(axis=1)

    # ---- kinematics ------------------------------------------------------

    def _angles(self, qpos) -> np.ndarray:
        """Absolute link angles (n, 7): torso, thL, shL, ftL, thR, shR, ftR."""
        p = qpos[:, 2]
        out = np.empty((qpos.shape[0], 7), np.float32)
        out[:, A_TORSO] = p
        out[:, A_THL] = p + qpos[:, 3]
        out[:, A_SHL] = out[:, A_THL] + qpos[:, 4]
        out[:, A_FTL] = out[:, A_SHL] + qpos[:, 5]
        out[:, A_THR] = p + qpos[:, 6]
        out[:, A_SHR] = out[:, A_THR] + qpos[:, 7]
        out[:, A_FTR] = out[:, A_SHR] + qpos[:, 8]
        return out

    def _phidot(self, qvel) -> np.ndarray:
        pd = qvel[:, 2]
        out = np.empty((qvel.shape[0], 7), np.float32)
        out[:, A_TORSO] = pd
        out[:, A_THL] = pd + qvel[:, 3]
        out[:, A_SHL] = out[:, A_THL] + qvel[:, 4]
        out[:, A_FTL] = out[:, A_SHL] + qvel[:, 5]
        out[:, A_THR] = pd + qvel[:, 6]
        out[:, A_SHR] = out[:, A_THR] + qvel[:, 7]
        out[:, A_FTR] = out[:, A_SHR] + qvel[:, 8]
        return out

    def _kinematics(self, qpos, env_idx: np.ndarray | None = None):
        """World positions/Jacobians for mass points and contact points.

        Returns dict with:
          pm   (n, 10, 2) mass-point positions
          Jm   (n, 10, 2, 9)
          off_m(n, 10, 2) world offset of each mass point from its chain base
                          accumulated per segment (for centripetal terms we
                          keep per-segment pieces instead, see _dynamics)
          pc   (n, 10, 2) contact-point positions
          Jc   (n, 10, 2, 9)
        plus named positions (head, knees, ankles, soles).
        """
        s = self.sim
        n = qpos.shape[0]
        ang = self._angles(qpos)
        ca, sa = np.cos(ang), np.sin(ang)
        base = qpos[:, 0:2]

        # "down" unit vectors and their angle-derivatives per absolute angle
        down = np.stack([sa, -ca], axis=-1)      # (n, 7, 2)
        ddown = np.stack([ca, sa], axis=-1)      # d(down)/d(angle)
        up = np.stack([-sa[:, A_TORSO], ca[:, A_TORSO]], axis=-1)      # torso axis
        dup = np.stack([-ca[:, A_TORSO], -sa[:, A_TORSO]], axis=-1)

        com = self.dr.com_offset if env_idx is None else self.dr.com_offset[env_idx]
        # torso-frame offset (dx, dz) to world: dx*xhat + dz*yhat where
        # xhat = (cos p, sin p), yhat = up
        xhat = np.stack([ca[:, A_TORSO], sa[:, A_TORSO]], axis=-1)
        dxhat = np.stack([-sa[:, A_TORSO], ca[:, A_TORSO]], axis=-1)

        knee_l = base + s.thigh_len * down[:, A_THL]
        knee_r = base + s.thigh_len * down[:, A_THR]
        ankle_l = knee_l + s.shank_len * down[:, A_SHL]
        ankle_r = knee_r + s.shank_len * down[:, A_SHR]
        head = base + s.torso_len * up

        def foot_offsets(fa_idx, ox):
            # world offset of a foot point (ox, -ankle_height) in foot frame
            c, si = ca[:, fa_idx], sa[:, fa_idx]
            off = np.stack([ox * c + s.ankle_height * si,
                            ox * si - s.ankle_height * c], axis=-1)
            doff = np.stack([-ox * si + s.ankle_height * c,
                             ox * c + s.ankle_height * si], axis=-1)
            return off, doff

        heel_l_off, dheel_l = foot_offsets(A_FTL, -s.heel_len)
        toe_l_off, dtoe_l = foot_offsets(A_FTL, s.toe_len)
        heel_r_off, dheel_r = foot_offsets(A_FTR, -s.heel_len)
        toe_r_off, dtoe_r = foot_offsets(A_FTR, s.toe_len)

        # ---- mass points -------------------------------------------------
        # segments: (point_idx, angle_idx, world offset) for centripetal terms
        segments: list[tuple[int, int, np.ndarray]] = []
        pm = np.empty((n, 14, 2), np.float32)
        Jm = np.zeros((n, 14, 2, 9), np.float32)
        Jm[:, :, 0, 0] = 1.0
        Jm[:, :, 1, 1] = 1.0

        for k, c_len in enumerate(self.torso_pts):
            off = com[:, 0:1] * xhat + (c_len + com[:, 1:2]) * up
            doff = com[:, 0:1] * dxhat + (c_len + com[:, 1:2]) * dup
            pm[:, k] = base + off
            Jm[:, k, :, 2] = doff
            segments.append((k, A_TORSO, off))

        leg_defs = [
            (2, A_THL, A_SHL, 3, 4), (6, A_THR, A_SHR, 6, 7),
        ]
        for base_idx, a_th, a_sh, col_hip, col_knee in leg_defs:
            th_full = s.thigh_len * down[:, a_th]
            w_th_full = s.thigh_len * ddown[:, a_th]
            for k, c_len in enumerate(self.thigh_pts):
                i = base_idx + k
                off = c_len * down[:, a_th]
                w = c_len * ddown[:, a_th]
                pm[:, i] = base + off
                Jm[:, i, :, 2] = w
                Jm[:, i, :, col_hip] = w
                segments.append((i, a_th, off))
            for k, c_len in enumerate(self.shank_pts):
                i = base_idx + 2 + k
                off = c_len * down[:, a_sh]
                wb = c_len * ddown[:, a_sh]
                pm[:, i] = base + th_full + off
                Jm[:, i, :, 2] = w_th_full + wb
                Jm[:, i, :, col_hip] = w_th_full + wb
                Jm[:, i, :, col_knee] = wb
                segments.append((i, a_th, th_full))
                segments.append((i, a_sh, off))

        # ---- contact points -----------------------------------------------
        pc = np.empty((n, N_CONTACT, 2), np.float32)
        Jc = np.zeros((n, N_CONTACT, 2, 9), np.float32)
        Jc[:, :, 0, 0] = 1.0
        Jc[:, :, 1, 1] = 1.0

        pc[:, C_HEAD] = head
        Jc[:, C_HEAD, :, 2] = s.torso_len * dup
        pc[:, C_BASE] = base

        leg_cdefs = [
            (C_KNEE_L, C_ANKLE_L, C_HEEL_L, C_TOE_L, A_THL, A_SHL, A_FTL, 3, 4, 5,
             knee_l, ankle_l, heel_l_off, dheel_l, toe_l_off, dtoe_l),
            (C_KNEE_R, C_ANKLE_R, C_HEEL_R, C_TOE_R, A_THR, A_SHR, A_FTR, 6, 7, 8,
             knee_r, ankle_r, heel_r_off, dheel_r, toe_r_off, dtoe_r),
        ]
        foot_mass_slot = {C_HEEL_L: 10, C_TOE_L: 11, C_HEEL_R: 12, C_TOE_R: 13}
        for (ck, cank, chl, cto, a_th, a_sh, a_ft, ch, ckn, cak,
             knee, ankle, heel_off, dheel, toe_off, dtoe) in leg_cdefs:
            w_th = s.thigh_len * ddown[:, a_th]
            w_sh = s.shank_len * ddown[:, a_sh]
            th_full = s.thigh_len * down[:, a_th]
            sh_full = s.shank_len * down[:, a_sh]
            pc[:, ck] = knee
            Jc[:, ck, :, 2] = w_th
            Jc[:, ck, :, ch] = w_th
            pc[:, cank] = ankle
            Jc[:, cank, :, 2] = w_th + w_sh
            Jc[:, cank, :, ch] = w_th + w_sh
            Jc[:, cank, :, ckn] = w_sh
            for slot, off, doff in ((chl, heel_off, dheel), (cto, toe_off, dtoe)):
                pc[:, slot] = ankle + off
                Jc[:, slot, :, 2] = w_th + w_sh + doff
                Jc[:, slot, :, ch] = w_th + w_sh + doff
                Jc[:, slot, :, ckn] = w_sh + doff
                Jc[:, slot, :, cak] = doff
                # the foot's point masses ride on the heel/toe contact points
                i = foot_mass_slot[slot]
                pm[:, i] = pc[:, slot]
                Jm[:, i] = Jc[:, slot]
                segments.append((i, a_th, th_full))
                segments.append((i, a_sh, sh_full))
                segments.append((i, a_ft, off))

        return {
            "ang": ang, "pm": pm, "Jm": Jm, "pc": pc, "Jc": Jc,
            "segments": segments,
            "head": head, "knee_l": knee_l, "knee_r": knee_r,
            "ankle_l": ankle_l, "ankle_r": ankle_r,
        }

    def _centripetal(self, kin, qvel) -> np.ndarray:
        """(n, 14, 2) acceleration of each mass point when qdd = 0.

        Each chain segment of world offset r rotating at absolute rate w
        contributes -w^2 r (centripetal); Coriolis cross terms vanish in this
        per-segment decomposition because planar segment offsets rotate
        rigidly with a single angle.
        """
        phid = self._phidot(qvel)
        acc = np.zeros((qvel.shape[0], 14, 2), np.float32)
        w2 = phid ** 2
        for point_idx, angle_idx, off in kin["segments"]:
            acc[:, point_idx] -= w2[:, angle_idx, None] * off
        return acc

    # ---- contact forces ---------------------------------------------------

    def _contact_forces(self, kin, qvel):
        """Spring-damper normals + anchored Coulomb friction; updates anchors."""
        s = self.sim
        pc, Jc = kin["pc"], kin["Jc"]
        vc = np.einsum("ncij,nj->nci", Jc, qvel)
        h = self.terrain.lookup(pc[:, :, 0])
        pen = h - pc[:, :, 1]
        in_contact = pen > 0.0

        pen_rate = -vc[:, :, 1]
        compressing = pen_rate > 0.0
        c_eff = np.where(compressing, s.contact_cn,
                         s.contact_cn * (1.0 - self.dr.restitution[:, None]))
        f_n = np.where(in_contact,
                       np.maximum(s.contact_kn * pen + c_eff * pen_rate, 0.0), 0.0)

        # anchored friction springs
        fresh = in_contact & np.isnan(self.anchor)
        self.anchor[fresh] = pc[:, :, 0][fresh]
        stretch = np.where(in_contact & ~np.isnan(self.anchor),
                           pc[:, :, 0] - self.anchor, 0.0)
        raw_t = -s.contact_kt * stretch - s.contact_ct * vc[:, :, 0]
        cap = self.dr.friction[:, None] * f_n
        f_t = np.clip(raw_t, -cap, cap)
        slipped = in_contact & (np.abs(raw_t) > cap)
        # re-seat anchors on the friction-cone boundary where slipping
        new_anchor = pc[:, :, 0] + (f_t + s.contact_ct * vc[:, :, 0]) / s.contact_kt
        self.anchor = np.where(slipped, new_anchor, self.anchor).astype(np.float32)
        self.anchor[~in_contact] = np.nan
        f_t = np.where(in_contact, f_t, 0.0)

        force = np.stack([f_t, f_n], axis=-1).astype(np.float32)
        return force, in_contact

    # ---- dynamics step ----------------------------------------------------

    def _substep(self, torque, dt):
        s = self.sim
        kin = self._kinematics(self.qpos)
        m_pts = self._point_masses()
        Jm = kin["Jm"]
        M = np.einsum("npij,npik,np->njk", Jm, Jm, m_pts, optimize=True)
        M[:, np.arange(3, N_GEN), np.arange(3, N_GEN)] += s.armature
        M[:, np.arange(N_GEN), np.arange(N_GEN)] += 1e-8

        acc_c = self._centripetal(kin, self.qvel)
        f_eff = np.zeros_like(acc_c)
        f_eff[:, :, 1] = -s.gravity * m_pts
        f_eff -= m_pts[:, :, None] * acc_c
        rhs = np.einsum("npij,npi->nj", Jm, f_eff, optimize=True)

        cforce, cflags = self._contact_forces(kin, self.qvel)
        rhs += np.einsum("ncij,nci->nj", kin["Jc"], cforce, optimize=True)
        rhs[:, 3:] += torque + self._joint_stop_torque()

        qacc = np.linalg.solve(M, rhs[..., None])[..., 0].astype(np.float32)
        self.qvel += dt * qacc
        self.qpos += dt * self.qvel
        # hard safety clamp; the soft stops above normally prevent reaching it
        q = self.qpos[:, 3:]
        below = q < self.joint_lo
        above = q > self.joint_hi
        if below.any() or above.any():
            np.clip(q, self.joint_lo, self.joint_hi, out=q)
            jv = self.qvel[:, 3:]
            jv[below & (jv < 0)] = 0.0
            jv[above & (jv > 0)] = 0.0
        return cforce, cflags, qacc

    def _joint_stop_torque(self) -> np.ndarray:
        """Spring-damper stops engaging a margin inside the hard limits."""
        s = self.sim
        q = self.qpos[:, 3:]
        qd = self.qvel[:, 3:]
        lo = self.joint_lo + s.joint_stop_margin
        hi = self.joint_hi - s.joint_stop_margin
        under = np.minimum(q - lo, 0.0)
        over = np.maximum(q - hi, 0.0)
        engaged = (under < 0.0) | (over > 0.0)
        return (-s.joint_stop_stiffness * (under + over)
                - s.joint_stop_damping * qd * engaged).astype(np.float32)

    def step(self, actions: np.ndarray):
        """Advance one 50 Hz control step (10 inner PD substeps).

        Returns a dict with contact report and divergence flags; observations
        and rewards are built by the caller from the public state.
        """
        if actions.shape != (self.n, N_JOINTS):
            raise ContractError(f"actions must be ({self.n}, {N_JOINTS}), got {actions.shape}")
        s = self.sim
        a_clip = np.clip(actions, -1.0, 1.0).astype(np.float32)

        # per-episode constant action delay (in control steps)
        self.action_queue[:, self.queue_head] = a_clip
        delays = self.dr.action_delay_steps
        slot = (self.queue_head - delays) % self.action_queue.shape[1]
        a_eff = self.action_queue[np.arange(self.n), slot]
        self.queue_head = (self.queue_head + 1) % self.action_queue.shape[1]

        q_target = action_to_target(a_eff, self.q_default, s.action_scale)
        dt = s.control_dt / s.substeps
        qd_before = self.qvel[:, 3:].copy()

        kp_eff = self.kp * self.dr.kp_scale
        kd_eff = self.kd * self.dr.kd_scale
        for _ in range(s.substeps):
            tq, raw = pd_torque(q_target, self.qpos[:, 3:], self.qvel[:, 3:],
                                kp_eff, kd_eff, None)
            tq = tq * self.dr.motor_strength + self.dr.actuation_offset
            tq_clipped = np.clip(tq, -self.torque_limit, self.torque_limit)
            cforce, cflags, _ = self._substep(tq_clipped, dt)
        self.torque = tq_clipped
        self.torque_raw = tq
        self.contact_force = cforce
        self.contact_flags = cflags

        diverged = np.abs(self.qvel).max(axis=1) > s.velocity_blowup
        self.qdd = (self.qvel[:, 3:] - qd_before) / s.control_dt

        # foot contact bookkeeping for gait rewards
        feet = np.stack([cflags[:, C_HEEL_L] | cflags[:, C_TOE_L],
                         cflags[:, C_HEEL_R] | cflags[:, C_TOE_R]], axis=1)
        first_contact = feet & ~self.feet_contact_prev & (self.air_time > 0.0)
        landed_air_time = self.air_time.copy()
        self.air_time += s.control_dt
        self.air_time[feet] = 0.0
        self.feet_contact_prev = feet

        self.a_prev3 = self.a_prev2
        self.a_prev2 = self.a_prev
        self.a_prev = a_clip
        self.qd_prev = self.qvel[:, 3:].copy()
        self.episode_step += 1
        return {
            "diverged": diverged,
            "feet_contact": feet,
            "first_contact": first_contact,
            "landed_air_time": landed_air_time,
        }

    def step_strict(self, actions: np.ndarray):
        """Single-pipeline step that raises on divergence (CLI/debug path)."""
        info = self.step(actions)
        if info["diverged"].any():
            raise SimulationDiverged(
                f"velocity blow-up in envs {np.nonzero(info['diverged'])[0].tolist()}")
        return info

    # ---- resets -----------------------------------------------------------

    def reset_envs(self, idx: np.ndarray, posture: str | np.ndarray,
                   resample_dr: bool = True, commands: np.ndarray | None = None):
        """Reset a subset to a posture ('standing' | 'supine' | 'prone').

        Joint angles get Table-style multiplicative scale and additive offset
        noise; base height is solved so the lowest contact point starts at
        its static spring equilibrium.
        """
        idx = np.atleast_1d(idx)
        if idx.size == 0:
            return
        s = self.sim
        if resample_dr and self.cfg.domain_rand.enabled:
            fresh = sample_domain_randomization(self.cfg.domain_rand, idx.size, self.rng, s)
            for name in vars(fresh):
                getattr(self.dr, name)[idx] = getattr(fresh, name)
            self._m_pts = None

        if isinstance(posture, str):
            post_idx = np.full(idx.size, POSTURES.index(posture))
        else:
            post_idx = np.asarray(posture)
        self.posture[idx] = post_idx

        standing = post_idx == 0
        supine = post_idx == 1
        base_q = np.where(standing[:, None], self.q_default[None, :], 0.0)
        q = base_q * self.dr.init_joint_scale[idx] + self.dr.init_joint_offset[idx]
        np.clip(q, self.joint_lo, self.joint_hi, out=q)

        pitch = np.where(standing, 0.0,
                         np.where(supine, s.lying_pitch, -s.lying_pitch)).astype(np.float32)

        self.qpos[idx] = 0.0
        self.qvel[idx] = 0.0
        self.qpos[idx, 2] = pitch
        self.qpos[idx, 3:] = q
        self.qpos[idx, 0] = 0.0

        # drop the body so its lowest contact point rests at spring equilibrium
        kin = self._kinematics(self.qpos[idx], env_idx=idx)
        rel_z = kin["pc"][:, :, 1] - self.qpos[idx, 1][:, None]
        h_under = self.terrain.lookup(kin["pc"][:, :, 0], env_idx=idx)
        # lowest point relative to local terrain
        gap = rel_z - h_under
        settle = self.total_mass()[idx] * s.gravity / (2.0 * s.contact_kn)
        self.qpos[idx, 1] = -gap.min(axis=1) - settle

        self.anchor[idx] = np.nan
        self.a_prev[idx] = 0.0
        self.a_prev2[idx] = 0.0
        self.a_prev3[idx] = 0.0
        self.qd_prev[idx] = 0.0
        self.episode_step[idx] = 0
        self.air_time[idx] = 0.0
        self.feet_contact_prev[idx] = False
        self.action_queue[idx] = 0.0
        self.start_x[idx] = self.qpos[idx, 0]
        self.low_since[idx] = -1.0
        self.low_ref_height[idx] = 0.0
        if commands is not None:
            self.command[idx] = commands

    # ---- derived state ------------------------------------------------------

    def base_height(self) -> np.ndarray:
        """Base height above the local terrain."""
        h = self.terrain.lookup(self.qpos[:, 0:1])[:, 0]
        return self.qpos[:, 1] - h

    def head_height(self) -> np.ndarray:
        kin_head = self.qpos[:, 0:2] + self.sim.torso_len * np.stack(
            [-np.sin(self.qpos[:, 2]), np.cos(self.qpos[:, 2])], axis=-1)
        h = self.terrain.lookup(kin_head[:, 0:1])[:, 0]
        return kin_head[:, 1] - h

    def observations(self) -> np.ndarray:
        return np.concatenate([
            self.qvel[:, 2:3],
            gravity_in_base(self.qpos[:, 2]),
            self.command[:, None],
            self.qpos[:, 3:],
            self.qvel[:, 3:],
            self.a_prev,
        ], axis=1).astype(np.float32)

    def privileged(self) -> np.ndarray:
        return self.dr.privileged()

    def body_contact(self) -> np.ndarray:
        return self.contact_flags[:, BODY_CONTACTS].any(axis=1)

    def foot_state(self) -> dict:
        """Sole midpoints, velocities and terrain clearance per foot (n, 2, ...)."""
        kin = self._kinematics(self.qpos)
        heel = kin["pc"][:, [C_HEEL_L, C_HEEL_R]]
        toe = kin["pc"][:, [C_TOE_L, C_TOE_R]]
        mid = 0.5 * (heel + toe)
        vc = np.einsum("ncij,nj->nci", kin["Jc"], self.qvel)
        vmid = 0.5 * (vc[:, [C_HEEL_L, C_HEEL_R]] + vc[:, [C_TOE_L, C_TOE_R]])
        clearance = mid[..., 1] - self.terrain.lookup(mid[..., 0])
        return {"pos": mid, "vel": vmid, "clearance": clearance}

    def thigh_angles(self) -> np.ndarray:
        """Absolute thigh angles from vertical, (n, 2)."""
        ang = self._angles(self.qpos)
        return ang[:, [A_THL, A_THR]]

    def progress(self) -> np.ndarray:
        return self.qpos[:, 0] - self.start_x

    def termination_check(self, policy_kind: str, time_limit_steps: int):
        """Episode status per env.

        Returns dict of boolean arrays: fallen, terminated, truncated.
        Falls terminate only single-behavior walking policies; patch exit and
        the time limit truncate (bootstrapped) for every policy kind.
        """
        s = self.sim
        fallen = self.body_contact() | (np.abs(self.qpos[:, 2]) > s.fall_pitch)
        exit_patch = (self.qpos[:, 0] > s.patch_len) | (self.qpos[:, 0] < -0.5)
        timeout = self.episode_step >= time_limit_steps
        if policy_kind == "walker":
            terminated = fallen.copy()
        elif policy_kind in ("recovery", "multi"):
            terminated = np.zeros(self.n, bool)
        else:
            raise ContractError(f"unknown policy kind {policy_kind!r}")
        truncated = (exit_patch | timeout) & ~terminated
        return {"fallen": fallen, "terminated": terminated, "truncated": truncated}

    def mechanical_energy(self) -> np.ndarray:
        """KE + gravitational PE + stored contact-spring PE (tests)."""
        s = self.sim
        kin = self._kinematics(self.qpos)
        m_pts = self._point_masses()
        Jm = kin["Jm"]
        M = np.einsum("npij,npik,np->njk", Jm, Jm, m_pts, optimize=True)
        M[:, np.arange(3, N_GEN), np.arange(3, N_GEN)] += s.armature
        ke = 0.5 * np.einsum("ni,nij,nj->n", self.qvel, M, self.qvel)
        pe = s.gravity * (m_pts * kin["pm"][:, :, 1]).sum(axis=1)
        pen = np.maximum(self.terrain.lookup(kin["pc"][:, :, 0]) - kin["pc"][:, :, 1], 0.0)
        pe_n = 0.5 * s.contact_kn * (pen ** 2).sum(axis=1)
        stretch = np.where(np.isnan(self.anchor), 0.0, kin["pc"][:, :, 0] - self.anchor)
        pe_t = 0.5 * s.contact_kt * (stretch ** 2).sum(axis=1)
        q = self.qpos[:, 3:]
        under = np.minimum(q - (self.joint_lo + s.joint_stop_margin), 0.0)
        over = np.maximum(q - (self.joint_hi - s.joint_stop_margin), 0.0)
        pe_stop = 0.5 * s.joint_stop_stiffness * ((under + over) ** 2).sum(axis=1)
        return ke + pe + pe_n + pe_t + pe_stop
