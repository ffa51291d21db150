"""Acceptance suite: one test per criterion, each printing a PASS line.

The expensive pipeline stages (specialist training, distillation, the four
fine-tuning arms) run once per session through the CLI in subprocesses,
two at a time with single-threaded BLAS, under an artifacts directory
(override with BIPEDRL_ACCEPT_DIR to keep artifacts between invocations).
"""

import math
import os
import subprocess
import sys
import time

import numpy as np
import pytest

from bipedrl.config import Config
from bipedrl.distill import MoEActor, distill_loss
from bipedrl.errors import ContractError
from bipedrl.evalproto import EvalProtocol, eval_locomotion, eval_recovery, load_policy
from bipedrl.finetune import GradientPacket, pcgrad
from bipedrl.metricsio import read_rows
from bipedrl.nn import AdamState, MlpSpec, ParamStore, adam_step, init_mlp, mlp_forward, tensor as T
from bipedrl.nn.mlp import mlp_input_gradient
from bipedrl.ppo import ActorCritic, compute_gae
from bipedrl.rewards import RewardParams, f_tol
from bipedrl.sim.env import OBS_DIM, PRIV_DIM, BipedSim, N_JOINTS
from bipedrl.amp import AmpDiscriminator, ReferenceMotionSet, sample_reference_windows, style_reward

from test_nn import elu64, fd_gradient
from test_ppo import gae_bruteforce
from test_rewards import default_params, probe_context

pytestmark = pytest.mark.slow

SEED = 0
WALK_ITERS = 300
RECOVER_ITERS = 300
DISTILL_ITERS = 200
ABLATION_ITERS = 500
ABLATION_ENVS = 128
EVAL_TRIALS = 64
ARM_BUDGET_S = 2 * 3600.0
PIPELINE_BUDGET_S = 4 * 3600.0


def announce(line: str):
    print(line, file=sys.__stdout__, flush=True)


# ---------------------------------------------------------------------------
# pipeline orchestration
# ---------------------------------------------------------------------------


class Pipeline:
    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)
        self.timings: dict[str, float] = {}
        self._load_timings()

    def _load_timings(self):
        path = os.path.join(self.root, "timings.txt")
        if os.path.exists(path):
            for line in open(path):
                k, v = line.split()
                self.timings[k] = float(v)

    def _save_timing(self, key: str, seconds: float):
        self.timings[key] = seconds
        with open(os.path.join(self.root, "timings.txt"), "a") as f:
            f.write(f"{key} {seconds}\n")

    def _run_batch(self, jobs: dict[str, list[str]], threads: int = 1):
        """Run CLI jobs concurrently in single-threaded subprocesses."""
        env = dict(os.environ)
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            env[var] = str(threads)
        procs = {}
        t0 = time.perf_counter()
        starts = {}
        for name, argv in jobs.items():
            log = open(os.path.join(self.root, f"{name}.log"), "w")
            starts[name] = time.perf_counter()
            procs[name] = (subprocess.Popen(
                [sys.executable, "-m", "bipedrl.cli", *argv],
                stdout=log, stderr=subprocess.STDOUT, env=env), log)
        for name, (proc, log) in procs.items():
            rc = proc.wait()
            log.close()
            self._save_timing(name, time.perf_counter() - starts[name])
            if rc != 0:
                tail = open(os.path.join(self.root, f"{name}.log")).read()[-2000:]
                raise RuntimeError(f"pipeline job {name} failed rc={rc}\n{tail}")
        return time.perf_counter() - t0

    def _done(self, name: str) -> bool:
        return os.path.exists(os.path.join(self.root, name, "manifest.ini"))

    # -- stages ----------------------------------------------------------

    def specialists(self) -> dict:
        jobs = {}
        if not self._done("walk"):
            jobs["walk"] = ["train-specialist", "--task", "walking",
                            "--iterations", str(WALK_ITERS), "--seed", str(SEED),
                            "--out", os.path.join(self.root, "walk")]
        if not self._done("recover"):
            jobs["recover"] = ["train-specialist", "--task", "recovery",
                               "--iterations", str(RECOVER_ITERS), "--seed", str(SEED),
                               "--out", os.path.join(self.root, "recover")]
        if jobs:
            self._run_batch(jobs)
        return {"walking": os.path.join(self.root, "walk", "walking_specialist"),
                "recovery": os.path.join(self.root, "recover", "recovery_specialist")}

    def distilled(self) -> str:
        stems = self.specialists()
        if not self._done("distill"):
            self._run_batch({"distill": [
                "distill", "--walking-teacher", stems["walking"],
                "--recovery-teacher", stems["recovery"],
                "--iterations", str(DISTILL_ITERS), "--seed", str(SEED),
                "--out", os.path.join(self.root, "distill")]}, threads=2)
        return os.path.join(self.root, "distill", "student")

    def ablation(self, arm: str) -> str:
        self.ablations([arm])
        return os.path.join(self.root, f"arm_{arm}")

    def ablations(self, arms) -> dict:
        student = self.distilled()
        todo = [a for a in arms if not self._done(f"arm_{a}")]
        for pair in (todo[i:i + 2] for i in range(0, len(todo), 2)):
            self._run_batch({f"arm_{a}": [
                "finetune", "--arm", a, "--student", student,
                "--iterations", str(ABLATION_ITERS), "--envs", str(ABLATION_ENVS),
                "--seed", str(SEED), "--out", os.path.join(self.root, f"arm_{a}")]
                for a in pair})
        return {a: os.path.join(self.root, f"arm_{a}") for a in arms}


@pytest.fixture(scope="session")
def pipeline(tmp_path_factory):
    root = os.environ.get("BIPEDRL_ACCEPT_DIR")
    if not root:
        root = str(tmp_path_factory.mktemp("acceptance"))
    return Pipeline(root)


def eval_stem(stem: str, task: str, terrain: str, level, seed: int,
              multi: bool, cfg=None) -> dict:
    cfg = cfg or Config()
    policy = load_policy(stem)
    proto = EvalProtocol(task=task, terrain=terrain, level=level, trials=EVAL_TRIALS,
                         multi_behavior=multi)
    if task == "locomotion":
        metrics, _ = eval_locomotion(policy, proto, cfg, seed)
    else:
        metrics, _ = eval_recovery(policy, proto, cfg, seed)
    return metrics


# ---------------------------------------------------------------------------
# criterion 1: gradient correctness across the four network kinds
# ---------------------------------------------------------------------------


def _softmax64(z):
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def _mlp64(p, prefix, n_layers, x):
    h = x.astype(np.float64)
    for i in range(n_layers):
        h = h @ p[f"{prefix}/l{i}/W"] + p[f"{prefix}/l{i}/b"]
        if i < n_layers - 1:
            h = elu64(h)
    return h


def _case_actor_critic(rng):
    store = ParamStore()
    enc = MlpSpec(int(rng.integers(4, 9)), [8, 6], 5)
    act = MlpSpec(5 + 3, [7, 6], 3)
    cri = MlpSpec(5 + 3 + 2, [6, 5], 1)
    init_mlp(store, "enc", enc, rng)
    init_mlp(store, "act", act, rng)
    init_mlp(store, "cri", cri, rng)
    hist = rng.normal(size=(4, enc.input_dim)).astype(np.float32)
    obs = rng.normal(size=(4, 3)).astype(np.float32)
    priv = rng.normal(size=(4, 2)).astype(np.float32)

    def tape():
        latent = mlp_forward(store, "enc", enc, T.const(hist))
        mu = mlp_forward(store, "act", act, T.concat([latent, T.const(obs)], axis=1))
        v = mlp_forward(store, "cri", cri, T.concat([latent, T.const(obs), T.const(priv)], axis=1))
        return T.add(T.tmean(T.square(mu)), T.tmean(T.square(v)))

    def ref(p):
        latent = _mlp64(p, "enc", 3, hist)
        mu = _mlp64(p, "act", 3, np.concatenate([latent, obs], axis=1))
        v = _mlp64(p, "cri", 3, np.concatenate([latent, obs, priv], axis=1))
        return float(np.mean(mu ** 2) + np.mean(v ** 2))

    return store, tape, ref


def _case_gate(rng):
    store = ParamStore()
    gate = MlpSpec(6, [7], 2)
    e0 = MlpSpec(6, [7], 3)
    e1 = MlpSpec(6, [7], 3)
    init_mlp(store, "gate", gate, rng)
    init_mlp(store, "e0", e0, rng)
    init_mlp(store, "e1", e1, rng)
    x = rng.normal(size=(5, 6)).astype(np.float32)

    def tape():
        g = T.softmax(mlp_forward(store, "gate", gate, T.const(x)), axis=1)
        from bipedrl.distill import Tslice
        mu = T.add(T.mul(mlp_forward(store, "e0", e0, T.const(x)), Tslice(g, 0)),
                   T.mul(mlp_forward(store, "e1", e1, T.const(x)), Tslice(g, 1)))
        return T.tmean(T.square(mu))

    def ref(p):
        g = _softmax64(_mlp64(p, "gate", 2, x))
        mu = (_mlp64(p, "e0", 2, x) * g[:, 0:1] + _mlp64(p, "e1", 2, x) * g[:, 1:2])
        return float(np.mean(mu ** 2))

    return store, tape, ref


def _case_discriminator(rng):
    store = ParamStore()
    spec = MlpSpec(8, [7, 5], 1)
    init_mlp(store, "d", spec, rng)

    def preacts(x):
        h = x.astype(np.float64)
        zs = []
        for i in range(3):
            z = h @ store[f"d/l{i}/W"].data + store[f"d/l{i}/b"].data
            zs.append(z)
            h = elu64(z)
        return np.concatenate([z.ravel() for z in zs])

    # the penalty path contains elu', whose derivative jumps at 0; keep the
    # finite-difference probe away from that kink
    for _ in range(50):
        ref_b = rng.normal(size=(4, 8)).astype(np.float32)
        if np.abs(preacts(ref_b)).min() > 2e-2:
            break
    pol_b = rng.normal(size=(4, 8)).astype(np.float32)
    alpha = 10.0

    def tape():
        from bipedrl.amp import discriminator_loss
        return discriminator_loss(store, "d", spec, ref_b, pol_b, alpha)

    def ref(p):
        d_r = _mlp64(p, "d", 3, ref_b)
        d_p = _mlp64(p, "d", 3, pol_b)
        loss = np.mean((d_r - 1) ** 2) + np.mean((d_p + 1) ** 2)
        # f64 input gradient of the scalar output
        h0 = ref_b.astype(np.float64)
        z1 = h0 @ p["d/l0/W"] + p["d/l0/b"]
        h1 = elu64(z1)
        z2 = h1 @ p["d/l1/W"] + p["d/l1/b"]
        h2 = elu64(z2)
        dp1 = np.where(z1 < 0, np.exp(z1), 1.0)
        dp2 = np.where(z2 < 0, np.exp(z2), 1.0)
        g = (dp2 * p["d/l2/W"][:, 0]) @ p["d/l1/W"].T
        g = (dp1 * g) @ p["d/l0/W"].T
        norms = np.sqrt((g ** 2).sum(axis=1) + np.float32(1e-12))
        return float(loss + 0.5 * alpha * norms.mean())

    return store, tape, ref


def test_acceptance_1_gradient_correctness():
    t0 = time.perf_counter()
    makers = [_case_actor_critic, _case_gate, _case_discriminator]
    worst = 0.0
    n_cases = 0
    for case_idx in range(100):
        rng = np.random.default_rng(1000 + case_idx)
        store, tape, ref = makers[case_idx % len(makers)](rng)
        store.zero_grad()
        tape().backward()
        params64 = {n: p.data.astype(np.float64) for n, p in store.items()}
        for name in store.names():
            fd = fd_gradient(ref, params64, name, h=1e-3)
            a = store[name].grad.astype(np.float64)
            scale = max(np.abs(fd).max(), np.abs(a).max(), 1e-8)
            rel = np.abs(a - fd).max() / scale
            worst = max(worst, rel)
            assert rel < 1e-3, f"case {case_idx} {name}: rel err {rel:.2e}"
        n_cases += 1
    elapsed = time.perf_counter() - t0
    assert n_cases == 100
    assert elapsed < 60.0
    announce(f"ACCEPTANCE 1 (gradient correctness): PASS - 100 seeded cases, "
             f"worst rel err {worst:.2e}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 2: PCGrad properties
# ---------------------------------------------------------------------------


def test_acceptance_2_pcgrad_properties():
    t0 = time.perf_counter()
    # hand case, exact to 1e-9
    g_i = np.array([1.0, 0.0])
    g_j = np.array([-1.0, 1.0])
    proj = g_i - (g_i @ g_j) / (g_j @ g_j) * g_j
    assert np.abs(proj - np.array([0.5, 0.5])).max() < 1e-9
    # post-surgery dots and no-op on non-conflicting sets
    rng = np.random.default_rng(2)
    for trial in range(500):
        g1 = rng.normal(size=32)
        g2 = rng.normal(size=32)
        packets = [GradientPacket("a", g1.astype(np.float32), 0),
                   GradientPacket("b", g2.astype(np.float32), 0)]
        merged = pcgrad(packets, np.random.default_rng(trial))
        if g1 @ g2 >= 0:
            assert np.abs(merged - (g1 + g2)).max() < 1e-5  # no-op
        else:
            # merged = surgered pair sum; reconstruct both possibilities and
            # verify the surgered side is orthogonal to its projector
            p1 = g1 - (g1 @ g2) / (g2 @ g2) * g2
            p2 = g2 - (g2 @ g1) / (g1 @ g1) * g1
            ok1 = np.abs(merged - (p1 + g2)).max() < 1e-5 and abs(p1 @ g2) < 1e-6
            ok2 = np.abs(merged - (g1 + p2)).max() < 1e-5 and abs(p2 @ g1) < 1e-6
            assert ok1 or ok2
            assert np.linalg.norm(p1) <= np.linalg.norm(g1) + 1e-6
            assert np.linalg.norm(p2) <= np.linalg.norm(g2) + 1e-6
    announce(f"ACCEPTANCE 2 (PCGrad properties): PASS - hand case exact, 500 random "
             f"pairs clean, {time.perf_counter() - t0:.1f}s")


# ---------------------------------------------------------------------------
# criterion 3: GAE oracle equivalence
# ---------------------------------------------------------------------------


def test_acceptance_3_gae_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(3)
    worst = 0.0
    for _ in range(1000):
        T_len = int(rng.integers(1, 17))
        rewards = rng.normal(size=(T_len, 2)).astype(np.float32)
        values = rng.normal(size=(T_len + 1, 2)).astype(np.float32)
        dones = rng.random((T_len, 2)) < 0.25
        adv, _ = compute_gae(rewards, values, dones, 0.99, 0.95)
        oracle = gae_bruteforce(rewards, values, dones, 0.99, 0.95)
        worst = max(worst, float(np.abs(adv - oracle).max()))
    assert worst < 1e-5
    announce(f"ACCEPTANCE 3 (GAE oracle): PASS - 1000 sequences, "
             f"max abs err {worst:.2e}, {time.perf_counter() - t0:.1f}s")


# ---------------------------------------------------------------------------
# criterion 4: reward formula probes
# ---------------------------------------------------------------------------


def test_acceptance_4_reward_probes():
    from bipedrl.rewards import recovery_reward, walking_reward
    p = default_params()
    checks = 0
    # probe A: perfect tracking / upright standing
    ctx = probe_context(command=np.array([0.7], np.float32), v_x=np.array([0.7], np.float32))
    wt, _ = walking_reward(ctx, p)
    assert wt["track_lin_vel"][0] == pytest.approx(2.0, abs=1e-6)
    rt, _ = recovery_reward(ctx, p)
    assert rt["base_height_post"][0] == pytest.approx(10.0, abs=1e-6)
    assert rt["target_joint_deviation"][0] == pytest.approx(10.0, abs=1e-6)
    assert rt["upright"][0] == pytest.approx(1.0, abs=1e-6)
    assert rt["head_height"][0] == pytest.approx(1.0, abs=1e-6)
    checks += 5
    # probe B: quarter squared-error tracking, tilted gravity, fallen robot
    ctx = probe_context(command=np.array([0.5], np.float32), v_x=np.array([1.0], np.float32),
                        g_x=np.array([math.sqrt(0.1)], np.float32),
                        base_height=np.array([0.3], np.float32),
                        head_height=np.array([0.1], np.float32))
    wt, _ = walking_reward(ctx, p)
    assert wt["track_lin_vel"][0] == pytest.approx(2.0 * math.exp(-1.0), abs=1e-6)
    assert wt["orientation"][0] == pytest.approx(-0.2, abs=1e-6)
    rt, _ = recovery_reward(ctx, p)
    for gated in ("ang_vel_post", "base_lin_vel_post", "orientation_post", "base_height_post"):
        assert rt[gated][0] == 0.0
    assert rt["ang_vel_gated"][0] == 0.0  # below stage-1 threshold too
    checks += 7
    # probe C: motion penalties at hand values
    ctx = probe_context()
    ctx.qdd = np.full((1, 6), 10.0, np.float32)
    ctx.qd = np.full((1, 6), 2.0, np.float32)
    ctx.torque = np.full((1, 6), 10.0, np.float32)
    ctx.action = np.full((1, 6), 0.5, np.float32)
    wt, _ = walking_reward(ctx, p)
    assert wt["joint_acc"][0] == pytest.approx(-5e-7 * 600.0, rel=1e-5)
    assert wt["joint_vel"][0] == pytest.approx(-1e-3 * 24.0, rel=1e-5)
    assert wt["torques"][0] == pytest.approx(-1e-5 * 600.0, rel=1e-5)
    assert wt["joint_power"][0] == pytest.approx(-2.5e-5 * 120.0, rel=1e-5)
    assert wt["action_rate"][0] == pytest.approx(-0.03 * 1.5, rel=1e-5)
    rt, _ = recovery_reward(ctx, p)
    assert rt["joint_acc"][0] == pytest.approx(-2.5e-7 * 600.0, rel=1e-5)
    assert rt["action_rate"][0] == pytest.approx(-0.01 * 1.5, rel=1e-5)
    checks += 7
    # f_tol contract probes
    assert f_tol(np.array([0.5]), (0.0, 1.0), 0.3, 0.1)[0] == 1.0
    assert f_tol(np.array([-0.3]), (0.0, 1.0), 0.3, 0.05)[0] == pytest.approx(0.05, abs=1e-6)
    assert f_tol(np.array([-3.0]), (0.0, 1.0), 0.3, 0.05)[0] < 1e-6
    checks += 3
    announce(f"ACCEPTANCE 4 (reward probes): PASS - {checks} hand-evaluated checks at 1e-6")


# ---------------------------------------------------------------------------
# criterion 5: AMP mechanics
# ---------------------------------------------------------------------------


def test_acceptance_5_amp_mechanics():
    t0 = time.perf_counter()
    d = np.linspace(-4.0, 6.0, 10001)
    r = style_reward(d, 7.5)
    assert r.max() == pytest.approx(7.5, abs=1e-7)
    assert abs(d[np.argmax(r)] - 1.0) < 1e-3
    assert style_reward(np.array([-1.0]), 7.5)[0] == 0.0
    assert style_reward(np.array([3.0]), 7.5)[0] == 0.0
    assert style_reward(np.array([0.0]), 1.0)[0] == pytest.approx(0.75, abs=1e-7)

    from bipedrl.config import AmpConfig
    rng = np.random.default_rng(5)
    cfg = AmpConfig(batch_size=128, replay_size=4096, updates_per_iter=1)
    disc = AmpDiscriminator("walking", 30, cfg, rng)
    ref_traj = (1.2 + 0.4 * rng.normal(size=(400, 6))).astype(np.float32)
    motions = ReferenceMotionSet(kind="locomotion", trajectories=[ref_traj])
    disc.add_policy_windows((-1.2 + 0.4 * rng.normal(size=(4096, 30))).astype(np.float32))
    sep_step = -1
    for step in range(500):
        disc.update(motions, rng)
        if step % 10 == 9:
            r_mean = disc.score(sample_reference_windows(motions, 256, rng)).mean()
            p_mean = disc.score(disc.sample_policy_windows(256, rng)).mean()
            if r_mean > 0.8 and p_mean < -0.8:
                sep_step = step + 1
                break
    elapsed = time.perf_counter() - t0
    assert sep_step > 0, "no separation within 500 discriminator steps"
    assert elapsed < 120.0
    announce(f"ACCEPTANCE 5 (AMP mechanics): PASS - reward peak/zeros exact, "
             f"separation at step {sep_step}, {elapsed:.1f}s")


# ---------------------------------------------------------------------------
# criterion 6: distillation convergence on a frozen dataset
# ---------------------------------------------------------------------------


def test_acceptance_6_distill_convergence():
    t0 = time.perf_counter()
    rng = np.random.default_rng(6)
    teacher = ActorCritic(OBS_DIM, N_JOINTS, 1, PRIV_DIM, np.random.default_rng(77),
                          init_std=0.3)
    # frozen state set from short random rollouts of the simulator
    cfg = Config()
    cfg.domain_rand.enabled = True
    sim = BipedSim(128, cfg, seed=60)
    from bipedrl.ppo import ObsHistory
    hist = ObsHistory(128, 10, OBS_DIM)
    hist.push(sim.observations())
    states_h, states_o = [], []
    for t in range(86):
        a = rng.uniform(-1, 1, size=(128, N_JOINTS)).astype(np.float32)
        sim.step(a)
        hist.push(sim.observations())
        states_h.append(hist.flat().copy())
        states_o.append(sim.observations().copy())
        if t % 20 == 19:
            sim.reset_envs(np.arange(128), "supine" if t % 40 == 19 else "standing")
            hist.reset(np.arange(128))
            hist.push(sim.observations())
    H = np.concatenate(states_h)[:11000]
    O = np.concatenate(states_o)[:11000]
    assert len(H) >= 11000
    mu_t = teacher.act_mean_np(H, O)
    std_t = np.tile(teacher.head.std(teacher.store), (len(H), 1))
    train, hold = slice(0, 10000), slice(10000, 11000)

    student = MoEActor(OBS_DIM, N_JOINTS, np.random.default_rng(61), init_std=0.45)
    adam = AdamState(student.store)
    first = last = None
    for step in range(500):
        idx = np.random.default_rng(62 + step).integers(0, 10000, size=256)
        mu_s, logstd_s, _ = student.forward_tape(H[idx], O[idx])
        loss, _, _ = distill_loss(mu_s, logstd_s, np.zeros((256, N_JOINTS), np.float32),
                                  mu_t[idx], std_t[idx], mu_t[idx], 0.1, 0.5)
        student.store.zero_grad()
        loss.backward()
        adam_step(student.store, adam, 1e-3)
        if first is None:
            first = float(loss.data)
        last = float(loss.data)
    mu_hold, _ = student.forward_np(H[hold], O[hold])
    hold_err = float(np.abs(mu_hold - mu_t[hold]).mean())
    elapsed = time.perf_counter() - t0
    assert first / max(last, 1e-12) >= 10.0, f"loss only dropped {first/last:.1f}x"
    assert hold_err < 0.05, f"held-out mean |dmu| = {hold_err:.4f}"
    assert elapsed < 300.0
    announce(f"ACCEPTANCE 6 (distillation convergence): PASS - loss {first:.3f} -> "
             f"{last:.4f} ({first/last:.0f}x), held-out |dmu| {hold_err:.4f} rad, {elapsed:.0f}s")


# ---------------------------------------------------------------------------
# criterion 7: ablation directions
# ---------------------------------------------------------------------------


def _final_window(rows, key, k=50):
    vals = [float(r[key]) for r in rows[-k:] if r.get(key) not in (None, "", "nan")]
    return float(np.mean(vals))


def test_acceptance_7_ablation_directions(pipeline):
    t0 = time.perf_counter()
    arms = pipeline.ablations(["sc_nopc", "sc_pc", "bc_nopc", "bc_pc"])
    rows = {a: read_rows(os.path.join(d, "finetune.csv")) for a, d in arms.items()}
    for a, r in rows.items():
        assert len(r) >= ABLATION_ITERS

    cos = {a: _final_window(rows[a], "cos_sim") for a in arms}
    assert cos["sc_pc"] > cos["sc_nopc"], f"cosine: {cos}"
    assert cos["bc_pc"] > cos["bc_nopc"], f"cosine: {cos}"

    def total_value_loss(a):
        keys = [k for k in rows[a][0] if k.startswith("value_loss_")]
        return sum(_final_window(rows[a], k) for k in keys) / len(keys)

    vloss = {a: total_value_loss(a) for a in arms}
    assert vloss["bc_nopc"] <= vloss["sc_nopc"], f"value loss: {vloss}"
    assert vloss["bc_pc"] <= vloss["sc_pc"], f"value loss: {vloss}"

    min_ret = {a: min(_final_window(rows[a], "return_walk"),
                      _final_window(rows[a], "return_recover")) for a in arms}
    for other in ("sc_nopc", "sc_pc", "bc_nopc"):
        assert min_ret["bc_pc"] >= min_ret[other], f"min returns: {min_ret}"

    per_arm = {a: pipeline.timings.get(f"arm_{a}", 0.0) for a in arms}
    assert all(t < ARM_BUDGET_S for t in per_arm.values()), per_arm
    fmt_cos = {k: round(v, 3) for k, v in cos.items()}
    fmt_vl = {k: round(v, 3) for k, v in vloss.items()}
    fmt_ret = {k: round(v, 1) for k, v in min_ret.items()}
    fmt_t = {k: round(v) for k, v in per_arm.items()}
    announce(f"ACCEPTANCE 7 (ablation directions): PASS - cos_sim {fmt_cos}, "
             f"value_loss {fmt_vl}, min_return {fmt_ret}, arm runtimes {fmt_t}s "
             f"(reference points 0.247/0.519/0.334/0.535)")


# ---------------------------------------------------------------------------
# criterion 8: end-to-end desk pipeline
# ---------------------------------------------------------------------------


def test_acceptance_8_end_to_end(pipeline):
    stems = pipeline.specialists()
    student = pipeline.distilled()

    walk_spec = eval_stem(stems["walking"], "locomotion", "flat", 0, SEED + 1, multi=False)
    assert walk_spec.success_rate >= 0.5, f"walking specialist succ {walk_spec.success_rate}"

    rec_spec = eval_stem(stems["recovery"], "recovery", "flat", 0, SEED + 2, multi=True)
    assert rec_spec.success_rate >= 0.5, f"recovery specialist succ {rec_spec.success_rate}"

    walk_stu = eval_stem(student, "locomotion", "flat", 0, SEED + 1, multi=True)
    rec_stu = eval_stem(student, "recovery", "flat", 0, SEED + 2, multi=True)
    assert walk_stu.success_rate >= 0.8 * walk_spec.success_rate, \
        f"student walking {walk_stu.success_rate} vs specialist {walk_spec.success_rate}"
    assert rec_stu.success_rate >= 0.8 * rec_spec.success_rate, \
        f"student recovery {rec_stu.success_rate} vs specialist {rec_spec.success_rate}"

    ft_dir = pipeline.ablation("bc_pc")
    ft_stem = os.path.join(ft_dir, "finetuned_bc_pc")
    slope_stu = eval_stem(student, "locomotion", "slope", 5, SEED + 3, multi=True)
    slope_ft = eval_stem(ft_stem, "locomotion", "slope", 5, SEED + 3, multi=True)
    assert slope_ft.success_rate > slope_stu.success_rate, \
        f"slope succ: fine-tuned {slope_ft.success_rate} vs distilled {slope_stu.success_rate}"

    heavy = ["walk", "recover", "distill", "arm_bc_pc"]
    total = sum(pipeline.timings.get(k, 0.0) for k in heavy)
    assert total < PIPELINE_BUDGET_S, f"pipeline CPU time {total:.0f}s"
    announce("ACCEPTANCE 8 (end-to-end pipeline): PASS - "
             f"walk spec {walk_spec.success_rate:.3f}, recover spec {rec_spec.success_rate:.3f}, "
             f"student walk {walk_stu.success_rate:.3f} / recover {rec_stu.success_rate:.3f}, "
             f"slope L5 {slope_stu.success_rate:.3f} -> {slope_ft.success_rate:.3f}, "
             f"stage time {total:.0f}s (paper slope reference 0.160 -> 0.975)")


# ---------------------------------------------------------------------------
# criterion 9: bit-reproducibility of commands
# ---------------------------------------------------------------------------


def _run_cli(workdir, name, argv):
    env = dict(os.environ)
    env["OMP_NUM_THREADS"] = "2"
    log = os.path.join(workdir, f"{name}.log")
    with open(log, "w") as f:
        rc = subprocess.run([sys.executable, "-m", "bipedrl.cli", *argv],
                            stdout=f, stderr=subprocess.STDOUT, env=env).returncode
    assert rc == 0, open(log).read()[-2000:]


def _file_hash(path):
    import hashlib
    return hashlib.sha256(open(path, "rb").read()).hexdigest()


def test_acceptance_9_determinism(tmp_path):
    work = str(tmp_path)
    pairs = {}
    for rep in ("a", "b"):
        out = os.path.join(work, f"train-{rep}")
        _run_cli(work, f"train-{rep}",
                 ["train-specialist", "--task", "recovery", "--iterations", "3",
                  "--envs", "16", "--seed", "11", "--out", out])
        pairs.setdefault("train", []).append(
            (_file_hash(os.path.join(out, "recovery_specialist.bin")),
             _file_hash(os.path.join(out, "training.csv"))))
    assert pairs["train"][0] == pairs["train"][1]

    stem = os.path.join(work, "train-a", "recovery_specialist")
    for rep in ("a", "b"):
        out = os.path.join(work, f"eval-{rep}")
        _run_cli(work, f"eval-{rep}",
                 ["eval", "--task", "recovery", "--terrain", "discrete", "--level", "4",
                  "--checkpoint", stem, "--trials", "8", "--seed", "5", "--out", out])
        pairs.setdefault("eval", []).append(
            _file_hash(os.path.join(out, "trials.csv")))
    assert pairs["eval"][0] == pairs["eval"][1]

    student = MoEActor(OBS_DIM, N_JOINTS, np.random.default_rng(0))
    from bipedrl.nn.params import save_checkpoint
    stu_stem = os.path.join(work, "student")
    save_checkpoint(student.store, stu_stem)
    for rep in ("a", "b"):
        out = os.path.join(work, f"ft-{rep}")
        _run_cli(work, f"ft-{rep}",
                 ["finetune", "--arm", "bc_pc", "--student", stu_stem,
                  "--iterations", "2", "--envs", "4", "--seed", "9", "--out", out])
        pairs.setdefault("ft", []).append(
            _file_hash(os.path.join(out, "finetuned_bc_pc.bin")))
    assert pairs["ft"][0] == pairs["ft"][1]
    announce("ACCEPTANCE 9 (determinism): PASS - train/eval/finetune runs "
             "bit-identical across repeats")
