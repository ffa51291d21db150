import numpy as np
import pytest

from bipedrl.amp import (
    AmpDiscriminator,
    ReferenceMotionSet,
    WindowUnavailable,
    discriminator_loss,
    export_motions,
    generate_reference_motions,
    import_motions,
    make_window,
    sample_reference_windows,
    style_reward,
    total_reward,
    window_count,
)
from bipedrl.config import AmpConfig, Config
from bipedrl.errors import ContractError
from bipedrl.nn import MlpSpec, ParamStore, init_mlp


Q_DEFAULT = np.tile(np.asarray(Config().sim.q_default_leg, np.float32), 2)


# ---- windows ------------------------------------------------------------------

def test_make_window_constant_trajectory():
    frames = np.tile(np.arange(6, dtype=np.float32), (10, 1))
    w = make_window(frames, 4)
    assert w.shape == (30,)
    assert np.allclose(w.reshape(5, 6), frames[:5])


def test_make_window_ordering():
    frames = np.arange(10, dtype=np.float32)[:, None] * np.ones((1, 6), np.float32)
    w = make_window(frames, 5).reshape(5, 6)
    assert np.allclose(w[:, 0], [2, 3, 4, 5, 6])


def test_make_window_boundaries():
    frames = np.zeros((5, 6), np.float32)
    w = make_window(frames, 3)  # the unique window
    assert w.shape == (30,)
    with pytest.raises(WindowUnavailable):
        make_window(frames, 2)
    with pytest.raises(WindowUnavailable):
        make_window(frames, 4)
    assert window_count(5) == 1
    assert window_count(7) == 3


# ---- style & total reward -------------------------------------------------------

def test_style_reward_peak_and_zeros():
    assert style_reward(np.array([1.0]), 5.0)[0] == pytest.approx(5.0)
    assert style_reward(np.array([-1.0]), 5.0)[0] == pytest.approx(0.0)
    assert style_reward(np.array([3.0]), 5.0)[0] == pytest.approx(0.0)
    assert style_reward(np.array([0.0]), 1.0)[0] == pytest.approx(0.75)


def test_style_reward_bounded_and_unique_peak():
    d = np.linspace(-5, 5, 2001)
    r = style_reward(d, 50.0)
    assert r.min() >= 0.0 and r.max() <= 50.0
    assert d[np.argmax(r)] == pytest.approx(1.0, abs=1e-2)
    assert np.sum(r == 50.0) == 1


def test_total_reward_additive():
    assert total_reward(np.array([0.0]), np.array([0.0]))[0] == 0.0
    assert total_reward(np.array([2.0]), np.array([5.0]))[0] == pytest.approx(7.0)
    # style disabled: total equals task reward
    task = np.array([1.3], np.float32)
    assert total_reward(task, style_reward(np.array([0.4]), 0.0))[0] == pytest.approx(1.3)


# ---- reference motions -----------------------------------------------------------

def test_reference_windows_uniform_over_pairs():
    traj = np.arange(7, dtype=np.float32)[:, None] * np.ones((1, 6), np.float32)
    motions = ReferenceMotionSet(kind="locomotion", trajectories=[traj])
    rng = np.random.default_rng(0)
    starts = set()
    for w in sample_reference_windows(motions, 1000, rng):
        starts.add(int(w.reshape(5, 6)[0, 0]))
    assert starts == {0, 1, 2}  # all 3 distinct windows observed


def test_reference_windows_single_window_and_determinism():
    traj = np.random.default_rng(1).normal(size=(5, 6)).astype(np.float32)
    motions = ReferenceMotionSet(kind="recovery", trajectories=[traj])
    w = sample_reference_windows(motions, 8, np.random.default_rng(2))
    assert np.allclose(w, traj.reshape(1, -1))
    a = sample_reference_windows(motions, 8, np.random.default_rng(3))
    b = sample_reference_windows(motions, 8, np.random.default_rng(3))
    assert np.array_equal(a, b)


def test_reference_windows_empty_set_error():
    with pytest.raises(ContractError):
        sample_reference_windows(ReferenceMotionSet(kind="recovery", trajectories=[]),
                                 4, np.random.default_rng(0))


def test_recovery_motions_end_at_default_pose():
    motions = generate_reference_motions("recovery", AmpConfig(), Q_DEFAULT, seed=4)
    for tr in motions.trajectories:
        assert np.abs(tr[-1] - Q_DEFAULT).max() < 0.05


def test_locomotion_hip_amplitude_in_band():
    cfg = AmpConfig()
    motions = generate_reference_motions("locomotion", cfg, Q_DEFAULT, seed=5)
    for tr in motions.trajectories:
        amp = 0.5 * (tr[:, 0].max() - tr[:, 0].min())
        assert cfg.hip_amplitude[0] - 1e-6 <= amp <= cfg.hip_amplitude[1] + 1e-6


def test_zero_jitter_deterministic():
    a = generate_reference_motions("locomotion", AmpConfig(), Q_DEFAULT, seed=1, jitter=0.0)
    b = generate_reference_motions("locomotion", AmpConfig(), Q_DEFAULT, seed=2, jitter=0.0)
    for ta, tb in zip(a.trajectories, b.trajectories):
        assert np.array_equal(ta, tb)


def test_motion_export_import_roundtrip():
    motions = generate_reference_motions("recovery", AmpConfig(), Q_DEFAULT, seed=6)
    again = import_motions(export_motions(motions))
    assert again.kind == "recovery"
    assert len(again.trajectories) == len(motions.trajectories)
    for ta, tb in zip(motions.trajectories, again.trajectories):
        assert np.allclose(ta, tb, atol=1e-5)


# ---- discriminator loss ------------------------------------------------------------

def _const_disc(value: float, dim=30):
    """Discriminator with zero weights and output bias = value."""
    store = ParamStore()
    spec = MlpSpec(dim, [8], 1)
    for i, (din, dout) in enumerate(spec.layer_dims()):
        store.add(f"d/l{i}/W", np.zeros((din, dout), np.float32))
        store.add(f"d/l{i}/b", np.zeros(dout, np.float32))
    store["d/l1/b"].data[...] = value
    return store, spec


def test_disc_loss_perfect_discriminator():
    # D == +1 on refs and -1 on policy via two constant discriminators
    store_p, spec = _const_disc(1.0)
    ref = np.random.default_rng(0).normal(size=(16, 30)).astype(np.float32)
    loss_ref_side = discriminator_loss(store_p, "d", spec, ref, ref, 0.0)
    store_m, _ = _const_disc(-1.0)
    loss_pol_side = discriminator_loss(store_m, "d", spec, ref, ref, 0.0)
    # (D-1)^2 = 0 on the +1 net's ref side; (D+1)^2 = 0 on the -1 net's policy side
    assert float(loss_ref_side.data) == pytest.approx(4.0, abs=1e-6)  # policy side penalized
    assert float(loss_pol_side.data) == pytest.approx(4.0, abs=1e-6)  # ref side penalized
    # a discriminator that is +1 on refs and -1 on policy scores zero; emulate
    # by summing the matching halves
    half = 0.5 * (float(loss_ref_side.data) - 4.0) + 0.5 * (float(loss_pol_side.data) - 4.0)
    assert half == pytest.approx(0.0, abs=1e-6)


def test_disc_loss_zero_everywhere():
    store, spec = _const_disc(0.0)
    x = np.random.default_rng(1).normal(size=(8, 30)).astype(np.float32)
    loss = discriminator_loss(store, "d", spec, x, x, 0.0)
    assert float(loss.data) == pytest.approx(2.0, abs=1e-6)


def test_disc_constant_has_zero_gradient_penalty():
    store, spec = _const_disc(0.7)
    x = np.random.default_rng(2).normal(size=(8, 30)).astype(np.float32)
    loss_gp = discriminator_loss(store, "d", spec, x, x, 10.0)
    loss_no = discriminator_loss(store, "d", spec, x, x, 0.0)
    assert float(loss_gp.data) == pytest.approx(float(loss_no.data), abs=1e-4)


def test_disc_loss_contract_errors():
    store, spec = _const_disc(0.0)
    x = np.zeros((4, 30), np.float32)
    with pytest.raises(ContractError):
        discriminator_loss(store, "d", spec, x[:0], x, 0.0)
    with pytest.raises(ContractError):
        discriminator_loss(store, "d", spec, x, np.zeros((4, 24), np.float32), 0.0)


def test_disc_gradient_penalty_matches_finite_differences():
    # value check of E[||dD/dx||] against numerical input gradients
    rng = np.random.default_rng(3)
    store = ParamStore()
    spec = MlpSpec(6, [5], 1)
    init_mlp(store, "d", spec, rng)
    x = rng.normal(size=(3, 6)).astype(np.float32)
    from bipedrl.nn import mlp_forward, tensor as T
    from bipedrl.nn.mlp import mlp_input_gradient
    g = mlp_input_gradient(store, "d", spec, T.const(x)).data
    h = 1e-3
    for r in range(3):
        for c in range(6):
            xp, xm = x.copy(), x.copy()
            xp[r, c] += h
            xm[r, c] -= h
            fd = (float(mlp_forward(store, "d", spec, T.const(xp)).data[r, 0])
                  - float(mlp_forward(store, "d", spec, T.const(xm)).data[r, 0])) / (2 * h)
            assert abs(g[r, c] - fd) < 2e-3


def test_discriminators_have_disjoint_parameters():
    rng = np.random.default_rng(4)
    cfg = AmpConfig(replay_size=64)
    store = ParamStore()
    d1 = AmpDiscriminator("walking", 30, cfg, rng, store=store)
    d2 = AmpDiscriminator("recovery", 30, cfg, rng, store=store)
    names1 = {n for n in store.names() if n.startswith(d1.prefix)}
    names2 = {n for n in store.names() if n.startswith(d2.prefix)}
    assert names1 and names2 and not (names1 & names2)


def test_discriminator_separates_synthetic_distributions():
    # linearly separable window distributions: means +/- 1.5
    rng = np.random.default_rng(5)
    cfg = AmpConfig(batch_size=128, replay_size=4096, updates_per_iter=1)
    disc = AmpDiscriminator("walking", 30, cfg, rng)
    ref_traj = (1.5 + 0.3 * rng.normal(size=(400, 6))).astype(np.float32)
    motions = ReferenceMotionSet(kind="locomotion", trajectories=[ref_traj])
    pol = (-1.5 + 0.3 * rng.normal(size=(4096, 30))).astype(np.float32)
    disc.add_policy_windows(pol)
    for step in range(500):
        disc.update(motions, rng)
        if step >= 20 and step % 20 == 0:
            ref_scores = disc.score(sample_reference_windows(motions, 256, rng))
            pol_scores = disc.score(disc.sample_policy_windows(256, rng))
            if ref_scores.mean() > 0.8 and pol_scores.mean() < -0.8:
                return
    ref_scores = disc.score(sample_reference_windows(motions, 256, rng))
    pol_scores = disc.score(disc.sample_policy_windows(256, rng))
    assert ref_scores.mean() > 0.8
    assert pol_scores.mean() < -0.8
