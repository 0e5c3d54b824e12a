import numpy as np
import pytest
from sklearn.base import clone

from adaptac import diffusion
from adaptac.numerics import tensor as T
from adaptac.numerics.gradcheck import finite_diff_check
from adaptac.policy import (
    MODES,
    AdapTacPolicy,
    Normalizer,
    PolicyConfig,
    TrainBatch,
    build_samples,
    select_mode,
)
from adaptac.rng import stream
from adaptac.sensing import ActionChunk
from adaptac.simenv import generate_demos
from adaptac.simenv.evaluate import evaluate


def tiny(**over) -> PolicyConfig:
    base = dict(h=2, n=3, d=4, denoiser_hidden=(8,), temb_dim=4, n_points=16, pc_point_widths=(4,),
                pc_head_widths=(6,), tac_taxel_widths=(4,), tac_head_widths=(6,), proj_hidden=(6,),
                diffusion_steps=5, force_sample_steps=3, batch_size=4, train_steps=3, exec_horizon=1)
    base.update(over)
    return PolicyConfig(**base).validate()


@pytest.fixture(scope="module")
def demos():
    ds, _ = generate_demos(2, 0)
    return ds


def fitted(demos, **over) -> AdapTacPolicy:
    return AdapTacPolicy(tiny(**over), random_state=3).fit(demos)


def first_batch(pol, demos, size=4):
    samples = build_samples(demos, pol.config_, pol.preprocessor_)
    return samples.batch(np.arange(size))


def streams(seed=0):
    return tuple(stream(seed, f"test/{k}") for k in ("pi", "ffp", "guide"))


# ---------------------------------------------------------------- configuration

@pytest.mark.parametrize("over", [
    dict(mode="fused"), dict(activation="gelu"), dict(h=0), dict(n=0), dict(d=5, heads=2),
    dict(exec_horizon=9, n=8), dict(alpha=-0.1), dict(alpha=float("nan")), dict(temb_dim=5),
    dict(train_steps=-1), dict(teacher_noise=-1.0), dict(batch_size=2.5),
])
def test_config_rejects_bad_values(over):
    with pytest.raises((ValueError, TypeError)):
        PolicyConfig(**over).validate()


def test_config_dict_round_trip():
    cfg = tiny(mode="ofp_ofg", activation="relu")
    as_json = {k: list(v) if isinstance(v, tuple) else v for k, v in cfg.to_dict().items()}
    assert PolicyConfig.from_dict(as_json) == cfg
    assert cfg.action_dim == 11


def test_select_mode_wiring():
    cfg = PolicyConfig(h=2, n=8, alpha=0.3)
    w = {m: select_mode(PolicyConfig(mode=m, h=2, n=8, alpha=0.3)) for m in MODES}
    assert (w["full"].force_head, w["full"].attention, w["full"].query_steps, w["full"].force_steps) == (True, True, 10, 8)
    assert (w["ofp_ofg"].query_steps, w["ofp_ofg"].force_steps) == (4, 2)
    assert (w["no_ffpg"].force_head, w["no_ffpg"].attention, w["no_ffpg"].query_steps) == (False, True, 2)
    assert (w["no_fgaf"].force_head, w["no_fgaf"].attention) == (False, False)
    assert w["full"].alpha == cfg.alpha and w["no_ffpg"].alpha == 0.0


def test_network_parts_follow_mode():
    for mode in MODES:
        pol = AdapTacPolicy(tiny(mode=mode))
        pol._build()
        w = pol.wiring_
        assert (pol.net_.force_head is not None) == w.force_head
        assert (pol.net_.fuse is not None) == w.attention
        assert (pol.net_.proj.force is not None) == w.attention


# ---------------------------------------------------------------- normalizer

def test_normalizer_round_trip_and_flat_axes():
    rng = np.random.default_rng(0)
    a = rng.normal(size=(50, 11))
    a[:, 3] = 1.0
    norm = Normalizer.fit(a, rng.normal(size=(50, 3)))
    z = norm.norm_actions(a)
    assert z.min() >= -1 - 1e-12 and z.max() <= 1 + 1e-12
    np.testing.assert_allclose(norm.denorm_actions(z), a, atol=1e-12)
    np.testing.assert_allclose(norm.denorm_actions(np.full((1, 11), 5.0)), norm.action_hi[None], atol=0)


# ---------------------------------------------------------------- samples

def test_build_samples_windows(demos):
    cfg = tiny()
    pol = AdapTacPolicy(cfg)
    pol._build()
    s = build_samples(demos, cfg, pol.preprocessor_)
    traj = demos.trajectories[0]
    L = len(traj.actions)
    assert len(s.actions) == sum(len(t.actions) for t in demos.trajectories)
    # first window repeats observation 0, and the last chunk is padded with hold actions
    np.testing.assert_array_equal(s.hist_idx[0], [0, 0])
    np.testing.assert_array_equal(s.actions[0], traj.actions[:cfg.n])
    null = np.tile(np.r_[np.zeros(3), 1, 0, 0, 0, 1, 0, traj.actions[-1, 9:]], (cfg.n - 1, 1))
    np.testing.assert_array_equal(s.actions[L - 1, 1:], null)
    np.testing.assert_array_equal(s.forces[s.future_idx[L - 1]], np.tile(traj.net_force[-1], (cfg.n, 1)))


# ---------------------------------------------------------------- loss composition

@pytest.mark.parametrize("mode", ["full", "ofp_ofg"])
@pytest.mark.parametrize("alpha", [0.0, 0.1, 2.5])
def test_total_loss_is_weighted_sum(demos, mode, alpha):
    pol = fitted(demos, mode=mode, alpha=alpha, train_steps=1)
    out = pol.forward_train(first_batch(pol, demos), *streams())
    L, Lpi, Lffp = out.loss.item(), out.loss_pi.item(), out.loss_ffp.item()
    assert Lffp > 0
    assert abs(L - (Lpi + alpha * Lffp)) <= 1e-12
    if alpha == 0.0:
        assert L == Lpi


@pytest.mark.parametrize("mode", ["no_ffpg", "no_fgaf"])
def test_modes_without_force_head_have_zero_force_loss(demos, mode):
    pol = fitted(demos, mode=mode, alpha=0.7, train_steps=1)
    out = pol.forward_train(first_batch(pol, demos), *streams())
    assert out.loss_ffp.item() == 0.0 and out.loss.item() == out.loss_pi.item()
    assert (out.alpha_tac is None) == (mode == "no_fgaf")


@pytest.mark.parametrize("mode,target", [("full", "future_force"), ("ofp_ofg", "observed_force")])
def test_force_loss_target_matches_mode(demos, mode, target):
    pol = fitted(demos, mode=mode, train_steps=1)
    batch = first_batch(pol, demos)
    r_pi, r_ffp, r_guide = streams(5)
    out = pol.forward_train(batch, r_pi, r_ffp, r_guide)
    e_pc, e_tac = pol._embed(batch.pc, batch.tac)
    x0 = pol.norm_.norm_forces(getattr(batch, target)).reshape(len(batch.pc), -1)
    oracle = diffusion.epsilon_loss(pol.net_.force_head, x0, T.concat([e_pc, e_tac], axis=-1), pol.sched_,
                                    streams(5)[1])
    assert out.loss_ffp.item() == oracle.item()


def test_forward_rejects_horizon_mismatch(demos):
    pol = fitted(demos, train_steps=1)
    b = first_batch(pol, demos)
    bad = TrainBatch(b.pc, b.tac, b.observed_force[:, :1], b.actions, b.future_force)
    with pytest.raises(ValueError):
        pol.forward_train(bad, *streams())


def test_composed_loss_gradients_finite_difference(demos):
    pol = fitted(demos, train_steps=1)
    batch = first_batch(pol, demos, size=2)
    names = ["fuse.heads.0.w_q", "fuse.heads.0.w_k", "fuse.heads.0.w_v", "proj.force.mlp.layers.0.weight",
             "enc.tac.taxel.layers.0.weight", "force_head.inp.weight", "action_head.film.0.weight"]
    params = {k: pol.params_[k] for k in names}

    def loss():
        return pol.forward_train(batch, *streams(9)).loss

    assert finite_diff_check(loss, params, max_per_param=6) < 1e-5


def test_gradient_reaches_tactile_encoder_and_attention(demos):
    pol = fitted(demos, train_steps=1)
    out = pol.forward_train(first_batch(pol, demos), *streams())
    for p in pol.params_.values():
        p.grad = None
    T.backward(out.loss)
    for prefix in ("enc.tac", "enc.pc", "fuse", "proj.force", "force_head", "action_head"):
        grads = [p.grad for k, p in pol.params_.items() if k.startswith(prefix)]
        assert grads and all(g is not None for g in grads), prefix
        assert any(np.abs(g).max() > 0 for g in grads), prefix


def test_force_loss_does_not_reach_action_head(demos):
    pol = fitted(demos, train_steps=1)
    out = pol.forward_train(first_batch(pol, demos), *streams())
    for p in pol.params_.values():
        p.grad = None
    T.backward(out.loss_ffp)
    for k, p in pol.params_.items():
        touched = p.grad is not None and np.abs(p.grad).max() > 0
        assert touched == k.startswith(("force_head", "enc.", "proj.pc", "proj.tac")), k


# ---------------------------------------------------------------- estimator API

def test_sklearn_params_and_clone():
    pol = AdapTacPolicy(tiny(), random_state=4)
    assert pol.get_params() == {"config": tiny(), "random_state": 4}
    c = clone(pol)
    assert c.get_params() == pol.get_params() and not hasattr(c, "net_")
    pol.set_params(random_state=5)
    assert pol.random_state == 5


def test_fit_input_checks(demos):
    with pytest.raises(TypeError):
        AdapTacPolicy(tiny()).fit(np.zeros(3))
    with pytest.raises(ValueError):
        AdapTacPolicy(tiny(n_joints=3)).fit(demos)
    with pytest.raises(RuntimeError):
        AdapTacPolicy(tiny()).predict([])


def test_training_is_bit_deterministic(demos):
    a, b = fitted(demos), fitted(demos)
    for k in a.params_:
        assert a.params_[k].data.tobytes() == b.params_[k].data.tobytes()
    assert a.log_ == b.log_
    c = AdapTacPolicy(tiny(), random_state=4).fit(demos)
    assert any(a.params_[k].data.tobytes() != c.params_[k].data.tobytes() for k in a.params_)


def test_predict_outputs(demos):
    pol = fitted(demos)
    hist = [demos.trajectories[0].observation(k, demos.grid) for k in (0, 1)]
    chunk, weights, forces = pol.predict(hist, rng=np.random.default_rng(0))
    assert isinstance(chunk, ActionChunk) and len(chunk) == 3
    assert abs(sum(weights) - 1.0) < 1e-12
    assert forces.shape == (3, 3)
    with pytest.raises(ValueError):
        pol.predict(hist[:1])
    none_pol = fitted(demos, mode="no_fgaf")
    _, w, f = none_pol.predict(hist, rng=np.random.default_rng(0))
    assert w is None and f is None


def test_save_load_round_trip(demos, tmp_path):
    pol = fitted(demos, mode="ofp_ofg")
    pol.save(tmp_path / "p.adpt")
    back = AdapTacPolicy.load(tmp_path / "p.adpt")
    assert back.config_ == pol.config_ and back.step_ == pol.step_
    hist = [[demos.trajectories[1].observation(k, demos.grid) for k in (2, 3)]]
    a = pol.plan(hist, rng=np.random.default_rng(1))
    b = back.plan(hist, rng=np.random.default_rng(1))
    assert a.actions.tobytes() == b.actions.tobytes() and a.alpha_tac.tobytes() == b.alpha_tac.tobytes()


def test_resume_matches_uninterrupted_training(demos, tmp_path):
    full = fitted(demos, train_steps=6)
    part = fitted(demos, train_steps=3)
    part.save(tmp_path / "half.adpt")
    resumed = AdapTacPolicy.load(tmp_path / "half.adpt")
    resumed.config_ = resumed.config = tiny(train_steps=6)
    resumed.fit(demos)
    assert resumed.step_ == 6
    for k in full.params_:
        assert full.params_[k].data.tobytes() == resumed.params_[k].data.tobytes()


def test_fit_writes_loss_log(demos, tmp_path):
    pol = AdapTacPolicy(tiny(train_steps=4), random_state=1).fit(demos, log_path=tmp_path / "log.csv")
    lines = (tmp_path / "log.csv").read_text().splitlines()
    assert lines[0] == "step,L,L_pi,L_ffp,alpha_tac" and len(lines) == 5
    step, L, Lpi, Lffp, a = lines[-1].split(",")
    assert int(step) == 4 and abs(float(L) - (float(Lpi) + 0.1 * float(Lffp))) <= 1e-12
    assert 0.0 < float(a) < 1.0


def test_policy_rolls_out_through_evaluate(demos):
    pol = fitted(demos)
    r = evaluate(pol, 2, 0, exec_horizon=1)
    assert 0.0 <= r["success_rate"] <= 1.0 and len(r["episodes"]) == 2
