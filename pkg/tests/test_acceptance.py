"""Acceptance criteria A1-A10, each at its stated tolerance.

A5-A8 share one ablation run (30 demos, 50 evaluation episodes per mode,
default policy settings) driven through the command-line interface.  Every
criterion records a one-line verdict that is printed after the session.
"""
import json
import math
import time

import numpy as np
import pytest
from scipy.spatial.transform import Rotation

from adaptac import diffusion
from adaptac.cli import main
from adaptac.encoders import ForceProjection, Projection
from adaptac.fusion import fgaf
from adaptac.numerics import tensor as T
from adaptac.numerics.gradcheck import finite_diff_check
from adaptac.numerics.optim import adam_step
from adaptac.numerics.tensor import Tensor
from adaptac.policy import AdapTacPolicy, PolicyConfig, build_samples
from adaptac.rng import stream
from adaptac.sensing import TactileFrame, matrix_to_rot6d, net_force, rot6d_to_matrix, taxel_force_camera
from adaptac.simenv import FlipEnv, SimConfig, generate_demos, scripted_expert
from adaptac.simenv.evaluate import average_episode_length, EpisodeResult
from adaptac.traces import load_traces, phase_summary

from conftest import record

ABLATION_MODES = ("full", "no_ffpg", "no_fgaf")
EPISODES = 50
DEMOS = 30


# ---------------------------------------------------------------- A1

def naive_attention(q, pc, tac, wq, wk, wv):
    qv = [sum(q[i] * wq[i][j] for i in range(len(q))) for j in range(len(wq[0]))]
    toks = [pc, tac]
    keys = [[sum(x[i] * wk[i][j] for i in range(len(x))) for j in range(len(wk[0]))] for x in toks]
    vals = [[sum(x[i] * wv[i][j] for i in range(len(x))) for j in range(len(wv[0]))] for x in toks]
    logits = [sum(a * b for a, b in zip(qv, k)) / math.sqrt(len(k)) for k in keys]
    m = max(logits)
    ex = [math.exp(v - m) for v in logits]
    alpha = [e / sum(ex) for e in ex]
    return alpha, [alpha[0] * vals[0][j] + alpha[1] * vals[1][j] for j in range(len(vals[0]))]


def test_a1_fusion_math_exactness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    N, d = 10_000, 4
    q, pc, tac = (rng.normal(size=(N, d)) * rng.uniform(0.1, 3.0, size=(N, 1)) for _ in range(3))
    wq, wk, wv = (rng.normal(size=(d, d)) for _ in range(3))
    out = fgaf(q, pc, tac, wq, wk, wv)
    sum_err = float(np.max(np.abs(out.alpha.data.sum(axis=1) - 1.0)))
    lo, hi = np.minimum(out.v_pc.data, out.v_tac.data), np.maximum(out.v_pc.data, out.v_tac.data)
    env_viol = float(max(np.max(lo - out.vector.data), np.max(out.vector.data - hi), 0.0))
    oracle_err = 0.0
    for b in range(N):
        alpha, z = naive_attention(q[b], pc[b], tac[b], wq, wk, wv)
        oracle_err = max(oracle_err, float(np.max(np.abs(out.alpha.data[b] - alpha))),
                         float(np.max(np.abs(out.vector.data[b] - z))))
    elapsed = time.perf_counter() - t0
    ok = sum_err <= 1e-9 and env_viol <= 1e-12 and oracle_err <= 1e-10 and elapsed < 10
    record("A1", ok, f"sum err {sum_err:.1e}, envelope violation {env_viol:.1e}, "
                     f"oracle err {oracle_err:.1e}, {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- A2

def test_a2_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    errs = {}

    x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
    for name, proj in (("g_pc", Projection(rng, 5, 4, (6,))), ("g_tac", Projection(rng, 5, 4, (6,))),
                       ("g_F", ForceProjection(rng, 5, 4, (6,), 2.0))):
        target = rng.normal(size=(3, 4))
        errs[name] = finite_diff_check(lambda p=proj: T.mse(p(x), Tensor(target)), dict(proj.parameters(), x=x))

    params = {k: Tensor(rng.normal(size=(4, 4)), requires_grad=True) for k in ("w_q", "w_k", "w_v")}
    q, pc, tac = (rng.normal(size=(3, 4)) for _ in range(3))
    target = rng.normal(size=(3, 4))
    errs["fgaf"] = finite_diff_check(
        lambda: T.mse(fgaf(q, pc, tac, params["w_q"], params["w_k"], params["w_v"]).vector, Tensor(target)), params)

    sched = diffusion.make_schedule(10)
    for name, x_dim in (("force_head", 6), ("action_head", 11)):
        net = diffusion.Denoiser(rng, x_dim, 4, (8,), 4)
        cond = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
        x0 = rng.normal(size=(2, x_dim))
        errs[name] = finite_diff_check(
            lambda n=net, c=cond, a=x0: diffusion.epsilon_loss(n, a, c, sched, np.random.default_rng(3)),
            dict(net.parameters(), cond=cond))

    ds, _ = generate_demos(1, 0)
    cfg = PolicyConfig(h=2, n=2, d=4, denoiser_hidden=(6,), temb_dim=4, n_points=12, pc_point_widths=(4,),
                       pc_head_widths=(4,), tac_taxel_widths=(3,), tac_head_widths=(4,), proj_hidden=(4,),
                       diffusion_steps=4, batch_size=2, train_steps=0)
    pol = AdapTacPolicy(cfg, 0).fit(ds)
    batch = build_samples(ds, pol.config_, pol.preprocessor_).batch(np.array([3, 9]))
    streams = [stream(0, f"a2/{k}") for k in ("pi", "ffp", "guide")]
    errs["composed"] = finite_diff_check(
        lambda: pol.forward_train(batch, *[np.random.default_rng(s.bit_generator.seed_seq) for s in streams]).loss,
        pol.params_, max_per_param=4)
    elapsed = time.perf_counter() - t0
    worst = max(errs.values())
    ok = worst < 1e-4 and elapsed < 120
    record("A2", ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()) + f"; {elapsed:.1f}s")
    assert ok


# ---------------------------------------------------------------- A3

def test_a3_sensing_exactness():
    rng = np.random.default_rng(2)
    shape = (2, 3, 5)
    rots = Rotation.random(30, random_state=4).as_matrix()
    r6 = np.concatenate([rots[:, :, 0], rots[:, :, 1]], axis=1).reshape(shape + (6,))
    frame = TactileFrame(rng.normal(size=shape + (3,)), r6, rng.uniform(0, 0.3, shape + (3,)))
    brute = np.zeros(3)
    for s in range(2):
        for r in range(3):
            for c in range(5):
                brute += taxel_force_camera(frame.reading(s, r, c))
    nf_err = float(np.max(np.abs(net_force(frame) - brute)))

    mats = Rotation.random(1000, random_state=5).as_matrix()
    rot_err = float(np.max(np.abs(rot6d_to_matrix(matrix_to_rot6d(mats)) - mats)))
    v6 = matrix_to_rot6d(mats)
    rot_err = max(rot_err, float(np.max(np.abs(matrix_to_rot6d(rot6d_to_matrix(v6)) - v6))))

    cfg = SimConfig()
    env = FlipEnv(cfg)
    sim_err, contacts = 0.0, 0
    for seed in range(5):
        env.reset(seed)
        done = False
        while not done:
            obs, done, _ = env.step(scripted_expert(env.state, cfg))
            sim_err = max(sim_err, float(np.max(np.abs(net_force(obs.tac) - env.state.contact_force.sum(axis=0)))))
            contacts += bool(np.any(env.state.normal > 0))
    ok = nf_err < 1e-9 and rot_err < 1e-9 and sim_err < 1e-9 and contacts > 0
    record("A3", ok, f"net force {nf_err:.1e}, rotation round trip {rot_err:.1e}, "
                     f"simulator tactile {sim_err:.1e} over {contacts} contact steps")
    assert ok


# ---------------------------------------------------------------- A4

def test_a4_diffusion_sanity():
    t0 = time.perf_counter()
    sched = diffusion.make_schedule(50, 1e-4, 0.2)
    rng = np.random.default_rng(0)
    var_err = 0.0
    for t in (1, 20, 50):
        x = diffusion.q_sample(np.full((100_000, 1), 0.5), t, rng.standard_normal((100_000, 1)), sched)
        var_err = max(var_err, abs(x.var() / (1.0 - sched.alphas_cum[t - 1]) - 1.0))

    target = np.array([0.4, -0.3])
    small = diffusion.make_schedule(20, 1e-4, 0.3)
    net = diffusion.Denoiser(np.random.default_rng(0), 2, 0, (32, 32), 8)
    params = net.parameters()
    from adaptac.numerics.optim import AdamState
    state = AdamState(lr=3e-3)
    r = np.random.default_rng(1)
    for _ in range(1500):
        for p in params.values():
            p.grad = None
        T.backward(diffusion.epsilon_loss(net, np.tile(target, (64, 1)), None, small, r))
        adam_step(params, {k: p.grad for k, p in params.items()}, state)
    samples = diffusion.p_sample_loop(net, None, (400, 2), small, np.random.default_rng(5))
    hit = float(np.mean(np.linalg.norm(samples - target, axis=1) < 0.1))

    a = diffusion.p_sample_loop(net, None, (8, 2), small, np.random.default_rng(7))
    b = diffusion.p_sample_loop(net, None, (8, 2), small, np.random.default_rng(7))
    repro = a.tobytes() == b.tobytes()
    elapsed = time.perf_counter() - t0
    ok = var_err < 0.02 and hit >= 0.95 and repro and elapsed < 180
    record("A4", ok, f"variance identity err {var_err:.2%}, point-mass hit rate {hit:.3f}, "
                     f"bit-reproducible {repro}, {elapsed:.0f}s")
    assert ok


# ---------------------------------------------------------------- A5-A8: shared ablation

@pytest.fixture(scope="session")
def ablation(tmp_path_factory):
    root = tmp_path_factory.mktemp("ablation")
    t0 = time.perf_counter()
    assert main(["gen-demos", "--out", str(root / "demos"), "--count", str(DEMOS), "--seed", "0"]) == 0
    code = main(["ablate", "--out", str(root / "run"), "--dataset", str(root / "demos" / "demos.adpd"),
                 "--episodes", str(EPISODES), "--seed", "0", "--modes", *ABLATION_MODES])
    assert code == 0
    minutes = (time.perf_counter() - t0) / 60
    rows = {r["mode"]: r for r in json.loads((root / "run" / "ablation.json").read_text())["modes"]}
    summaries = {m: phase_summary(load_traces(root / "run" / m / "traces")) for m in ABLATION_MODES}
    return rows, summaries, minutes


def test_a5_ablation_ordering(ablation):
    rows, _, minutes = ablation
    sr = {m: rows[m]["success_rate"] for m in ABLATION_MODES}
    ok = (sr["full"] >= sr["no_ffpg"] >= sr["no_fgaf"] and sr["full"] >= 0.8
          and sr["full"] - sr["no_fgaf"] >= 0.15 and minutes <= 60)
    record("A5", ok, f"SR full {sr['full']:.2f}, no_ffpg {sr['no_ffpg']:.2f}, no_fgaf {sr['no_fgaf']:.2f} "
                     f"over {EPISODES} episodes; {minutes:.1f} min")
    assert ok


def test_a6_guidance_efficiency(ablation):
    rows, _, _ = ablation
    all_fail = average_episode_length([EpisodeResult(0, False, 17, None)] * 3, 300)
    ael = {m: rows[m]["average_episode_length"] for m in ABLATION_MODES}
    ok = ael["full"] <= ael["no_ffpg"] and all_fail == 300
    record("A6", ok, f"AEL full {ael['full']:.1f}, no_ffpg {ael['no_ffpg']:.1f}; all-fail AEL {all_fail:.0f}")
    assert ok


def test_a7_attention_shift(ablation):
    _, summaries, _ = ablation
    s = summaries["full"]
    reach, contact = s["mean_alpha_tac"].get("REACH"), s["contact_alpha_tac"]
    ok = reach is not None and contact is not None and contact - reach >= 0.1 and reach < 0.5
    record("A7", ok, f"alpha_tac REACH {reach:.3f}, PRESS/FLIP {contact:.3f}, delta {contact - reach:+.3f}")
    assert ok


def test_a8_imbalance_without_guidance(ablation):
    _, summaries, _ = ablation
    full, ablated = summaries["full"]["overall_alpha_tac"], summaries["no_ffpg"]["overall_alpha_tac"]
    ok = ablated < full
    record("A8", ok, f"mean alpha_tac no_ffpg {ablated:.3f} vs full {full:.3f} (gap {full - ablated:+.3f})")
    assert ok


# ---------------------------------------------------------------- A9

def tiny_config(**over):
    base = dict(h=2, n=3, d=4, denoiser_hidden=(8,), temb_dim=4, n_points=16, pc_point_widths=(4,),
                pc_head_widths=(6,), tac_taxel_widths=(4,), tac_head_widths=(6,), proj_hidden=(6,),
                diffusion_steps=5, force_sample_steps=3, batch_size=4, train_steps=25, exec_horizon=1)
    base.update(over)
    return PolicyConfig(**base).validate()


def test_a9_loss_composition(tmp_path):
    ds, _ = generate_demos(2, 0)
    worst = 0.0
    for alpha in (0.1, 0.5):
        pol = AdapTacPolicy(tiny_config(alpha=alpha), 1).fit(ds, log_path=tmp_path / f"log{alpha}.csv")
        for line in (tmp_path / f"log{alpha}.csv").read_text().splitlines()[1:]:
            _, L, Lpi, Lffp, _ = line.split(",")
            worst = max(worst, abs(float(L) - (float(Lpi) + alpha * float(Lffp))))
        assert len(pol.log_) == 25

    # alpha = 0: same parameters as an explicit loop that back-propagates L_pi alone
    pol = AdapTacPolicy(tiny_config(alpha=0.0), 2).fit(ds)
    ref = AdapTacPolicy(tiny_config(alpha=0.0), 2)
    ref._build()
    samples = build_samples(ds, ref.config_, ref.preprocessor_)
    from adaptac.policy import Normalizer
    ref.norm_ = Normalizer.fit(samples.actions.reshape(-1, ref.config_.action_dim), samples.forces)
    for k in range(25):
        r_batch, r_pi, r_ffp, r_guide = ref._step_streams(k)
        idx = r_batch.integers(0, len(samples.actions), size=ref.config_.batch_size)
        out = ref.forward_train(samples.batch(idx), r_pi, r_ffp, r_guide)
        for p in ref.params_.values():
            p.grad = None
        T.backward(out.loss_pi)
        adam_step(ref.params_, {n: p.grad for n, p in ref.params_.items() if p.grad is not None}, ref.optim_)
    same = all(pol.params_[k].data.tobytes() == ref.params_[k].data.tobytes() for k in pol.params_)
    ok = worst <= 1e-12 and same
    record("A9", ok, f"max |L - (L_pi + alpha L_ffp)| {worst:.1e} over 50 logged steps; "
                     f"alpha=0 matches L_pi-only training bitwise: {same}")
    assert ok


# ---------------------------------------------------------------- A10

TINY_SETS = ["n=3", "d=4", "denoiser_hidden=(8,)", "temb_dim=4", "n_points=16", "pc_point_widths=(4,)",
             "pc_head_widths=(6,)", "tac_taxel_widths=(4,)", "tac_head_widths=(6,)", "proj_hidden=(6,)",
             "diffusion_steps=4", "force_sample_steps=2", "batch_size=4", "train_steps=5", "exec_horizon=2"]


def pipeline(root):
    sets = [x for s in TINY_SETS for x in ("--set", s)]
    assert main(["gen-demos", "--out", str(root / "d"), "--count", "2", "--seed", "11"]) == 0
    assert main(["train", "--out", str(root / "t"), "--dataset", str(root / "d" / "demos.adpd"),
                 "--seed", "11"] + sets) == 0
    assert main(["eval", "--out", str(root / "e"), "--checkpoint", str(root / "t" / "policy.adpt"),
                 "--episodes", "3", "--seed", "11"]) == 0
    files = ["d/demos.adpd", "t/policy.adpt", "t/train_log.csv", "e/report.json"]
    files += sorted(str(p.relative_to(root)) for p in (root / "e" / "traces").glob("*.csv"))
    return {f: (root / f).read_bytes() for f in files}


def test_a10_reproducibility(tmp_path):
    a, b = pipeline(tmp_path / "one"), pipeline(tmp_path / "two")
    differing = [f for f in a if a[f] != b.get(f)]
    ok = a.keys() == b.keys() and not differing
    record("A10", ok, f"{len(a)} artifacts compared across two runs, differing: {differing or 'none'}")
    assert ok
