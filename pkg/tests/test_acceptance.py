"""Acceptance suite: one test per criterion, each recording a PASS/FAIL line.

Run with ``pytest tests/test_acceptance.py -v``; the verdicts are repeated in
an "acceptance criteria" section of the terminal summary.  The learning
criteria run at the presets' ``ci`` scale.
"""

import hashlib
import time
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cyclealign import align, cli, config, data, envs, nn, transfer
from cyclealign import forward_model as fm
from gradcheck import max_relative_error, numeric_grads


def _sha(blob):
    return hashlib.sha256(blob).hexdigest()


# ---------------------------------------------------------------------------
# 1. gradient correctness


def _random_mlp(rng, in_dim=None, out_dim=None, output=None):
    depth = int(rng.integers(1, 4))
    sizes = [int(v) for v in rng.integers(1, 7, depth + 1)]
    if in_dim is not None:
        sizes[0] = in_dim
    if out_dim is not None:
        sizes[-1] = out_dim
    spec = nn.MlpSpec(tuple(sizes), str(rng.choice(["relu", "tanh"])),
                      output or str(rng.choice(["linear", "tanh", "sigmoid"])))
    p = nn.mlp_init(spec, int(rng.integers(1 << 30)))
    for b in p.biases:
        b[:] = rng.uniform(-0.5, 0.5, b.shape)
    return p


def _check(value_fn, tape_fn, arrays):
    tape = nn.Tape()
    g = nn.backprop(tape, tape_fn(tape))
    return max_relative_error([g.of(a) for a in arrays], numeric_grads(value_fn, arrays))


def _mlp_case(rng):
    """L1 and both GAN losses through a random generator and discriminator."""
    gen = _random_mlp(rng)
    disc = _random_mlp(rng, in_dim=gen.spec.output_dim, out_dim=1, output="linear")
    n = int(rng.integers(1, 6))
    x = rng.uniform(-1, 1, (n, gen.spec.input_dim))
    target = rng.uniform(-1, 1, (n, gen.spec.output_dim))
    real = rng.uniform(-1, 1, (n, gen.spec.output_dim))
    arrays = gen.arrays() + disc.arrays() + [x]
    errs = []

    def l1_tape(tape):
        return nn.l1_loss(nn.mlp_forward(gen, tape.param(x), tape), target)

    errs.append(_check(lambda: nn.l1_loss(nn.mlp_forward(gen, x), target), l1_tape, gen.arrays() + [x]))
    for which in (0, 1):
        def value():
            fake = nn.mlp_forward(gen, x)
            return nn.gan_losses(nn.mlp_forward(disc, real), nn.mlp_forward(disc, fake))[which]

        def on_tape(tape):
            fake = nn.mlp_forward(gen, tape.param(x), tape)
            return nn.gan_losses(nn.mlp_forward(disc, real, tape), nn.mlp_forward(disc, fake, tape))[which]

        errs.append(_check(value, on_tape, arrays))
    return max(errs)


def _alignment_case(rng):
    """Dynamics cycle, domain cycle, full objective and discriminator losses."""
    ox, ax, oy, ay = (int(v) for v in rng.integers(1, 4, 4))
    hidden = tuple(int(v) for v in rng.integers(2, 5, int(rng.integers(1, 3))))

    def net(i, o, seed, skip=None):
        n = align._new_net((i,) + hidden + (o,), "tanh", seed, skip=skip)
        for b in n.params.biases:
            b[:] = rng.uniform(-0.3, 0.3, b.shape)
        n.in_mean[:] = rng.uniform(-0.2, 0.2, i)
        n.in_std[:] = rng.uniform(0.5, 2.0, i)
        return n

    nets = {"G": net(ox, oy, 1), "H": net(ox + ax, ay, 2, rng.normal(size=(ay, ax))),
            "P": net(oy + ay, ax, 3, rng.normal(size=(ax, ay))), "D_Y": net(oy, 1, 4),
            "D_U": net(ay, 1, 5), "D_A": net(ax, 1, 6)}
    m = align.AlignmentModel(ox, ax, oy, ay, False, False, nets)
    F = fm.new_model(oy, ay, seed=int(rng.integers(100)))
    F.params.weights[-1][:] = rng.normal(scale=0.3, size=F.params.weights[-1].shape)
    F.freeze()
    n = int(rng.integers(2, 6))
    b = align.Batches(*(rng.uniform(-1, 1, (n, d)) for d in (ox, ax, ox, oy, ay, oy)))
    y_for_P = align.translate_observation(m, b.x)
    params = {r: m.nets[r].params.arrays() for r in m.nets}
    errs = []
    gh = params["G"] + params["H"]
    errs.append(_check(lambda: align.dynamics_cycle_loss(m, F, b.x, b.a, b.x_next),
                       lambda t: align.dynamics_cycle_loss(m, F, b.x, b.a, b.x_next, t, ("G", "H")), gh))
    hp = params["H"] + params["P"]
    errs.append(_check(lambda: align.domain_cycle_loss(m, b.x, b.a, y_for_P),
                       lambda t: align.domain_cycle_loss(m, b.x, b.a, y_for_P, t, ("H", "P")), hp))
    lam = rng.uniform(0.1, 5.0, 3)
    for train, lams in ((("G",), (lam[0], 0.0, lam[2])), (("H", "P"), (lam[0], lam[1], 0.0))):
        cfg = align.TrainConfig(mode="joint", lambda0=lams[0], lambda1=lams[1], lambda2=lams[2])
        arrays = [a for r in train for a in params[r]]
        errs.append(_check(lambda: align.full_loss(m, F, b, cfg)[0],
                           lambda t: align.full_loss(m, F, b, cfg, t, train=train)[0], arrays))
    for phase, roles in (("A", ("D_U", "D_A")), ("B", ("D_Y",))):
        arrays = [a for r in roles for a in params[r]]
        errs.append(_check(lambda: float(align.discriminator_loss(m, b, phase, nn.Tape()).value),
                           lambda t: align.discriminator_loss(m, b, phase, t), arrays))
    return max(errs)


def test_criterion_01_gradient_correctness(verdict):
    rng = np.random.default_rng(20240601)
    start = time.perf_counter()
    worst_mlp = max(_mlp_case(rng) for _ in range(50))
    worst_align = max(_alignment_case(rng) for _ in range(10))
    seconds = time.perf_counter() - start
    worst = max(worst_mlp, worst_align)
    verdict(1, worst < 1e-4 and seconds < 30,
            f"50 random MLPs + 10 alignment models, max rel err {worst:.2e} (< 1e-4), {seconds:.1f} s (< 30 s)")


# ---------------------------------------------------------------------------
# 2. forward-model fidelity


@pytest.mark.slow
def test_criterion_02_forward_model_fidelity(verdict):
    spec = envs.damped_integrators(2)
    assert (spec.family, spec.state_dim, spec.action_dim) == ("linear_system", 4, 2)
    start = time.perf_counter()
    train = data.collect(spec, "random", 2500, 20, seed=101)
    held = data.collect(spec, "random", 500, 20, seed=202)
    F = fm.train_forward(train, fm.ForwardConfig(epochs=20, lr=1e-3, halve_every=3))
    err = fm.eval_forward(F, held)
    seconds = time.perf_counter() - start
    verdict(2, len(train) == 50000 and err < 1e-2 and seconds < 180,
            f"held-out L1 {err:.2e} (< 1e-2) on {len(held)} triples, {seconds:.0f} s (< 180 s)")


# ---------------------------------------------------------------------------
# 3, 5, 6. linear oracle task


@pytest.mark.slow
def test_criterion_03_linear_oracle_recovery(linear_study, verdict):
    full = linear_study.l1("full")
    cyc = linear_study.l1("cyclegan_style")
    s = linear_study.seconds
    size = linear_study.task.triples_x
    seconds = (s["collect"] + s[("forward", size)] + s[("full", size)] + s[("cyclegan_style", size)])
    med, med_cyc = float(np.median(full)), float(np.median(cyc))
    # the probe batch's dynamics-cycle loss must shrink during training
    dx, dy, F = linear_study.prepared(size, 0)
    res = transfer.fit(linear_study.task, 0, prepared=(dx, dy, F))
    shrink = res.probe_dyn[-1] / res.probe_dyn[0]
    ok = med < 0.15 and med < 0.5 * med_cyc and seconds < 600 and shrink < 0.25
    verdict(3, ok, f"median L1 {med:.3f} (< 0.15) vs cyclegan_style {med_cyc:.3f} (ratio {med / med_cyc:.2f} < 0.5), "
                   f"per seed {np.round(full, 3).tolist()}, probe dynamics loss x{shrink:.2f}, {seconds:.0f} s")


@pytest.mark.slow
def test_criterion_05_discriminator_ablation(linear_study, verdict):
    full = linear_study.l1("full")
    ablated = linear_study.l1("no_discriminator")
    wins = sum(a > f for a, f in zip(ablated, full))
    verdict(5, wins >= 2, f"no-discriminator L1 {np.round(ablated, 3).tolist()} above full "
                          f"{np.round(full, 3).tolist()} in {wins}/3 seeds (need 2)")


@pytest.mark.slow
def test_criterion_06_dataset_scale_trend(linear_study, verdict):
    from conftest import SCALE_SIZES
    # the 20k prefix of the 50k collection is exactly the preset's own 20k dataset
    task = linear_study.task
    dx = linear_study.prepared(20000, 0)[0]
    sx = transfer.dataset_seeds(0)[0]
    assert dx.equals(data.collect(task.spec_x, task.collect_mode_x, 20000 // task.collect_horizon,
                                  task.collect_horizon, sx))
    medians = [float(np.median(linear_study.l1("full", n))) for n in SCALE_SIZES]
    ok = all(a >= b for a, b in zip(medians, medians[1:]))
    verdict(6, ok, "median L1 " + ", ".join(f"{n // 1000}k: {m:.3f}" for n, m in zip(SCALE_SIZES, medians))
                   + " (non-increasing)")


# ---------------------------------------------------------------------------
# 4. cross-physics transfer


@pytest.mark.slow
def test_criterion_04_cross_physics_transfer(verdict):
    task = config.load_preset("cross_physics_pointmass", ["scale=ci"]).task()
    assert (task.spec_y.mass, task.spec_x.mass, len(task.seeds)) == (1.0, 3.0, 5)
    start = time.perf_counter()
    rep = transfer.run_baseline("full", task)
    seconds = time.perf_counter() - start
    ours, direct, oracle = (np.array(rep.returns[k]) for k in ("transferred", "direct", "oracle_x"))
    wins = int(np.sum(ours > direct))
    ok = wins >= 4 and oracle.mean() > ours.mean() and seconds < 600
    verdict(4, ok, f"transferred > direct in {wins}/5 seeds (need 4); mean returns oracle_x {oracle.mean():.2f} "
                   f"> transferred {ours.mean():.2f} > direct {direct.mean():.2f}; {seconds:.0f} s")


# ---------------------------------------------------------------------------
# 7. cross-morphology ordering


@pytest.mark.slow
def test_criterion_07_cross_morphology_ordering(verdict):
    task = config.load_preset("morphology_chain", ["scale=ci"]).task()
    prepared = {s: transfer.prepare(task, s) for s in task.seeds}
    returns = {k: np.array(transfer.run_baseline(k, task, prepared=prepared).returns["transferred"])
               for k in ("full", "init_only", "cyclegan_style")}
    wins = int(np.sum((returns["full"] > returns["init_only"]) & (returns["full"] > returns["cyclegan_style"])))
    verdict(7, wins >= 2, f"transferred beats init_only and cyclegan_style in {wins}/3 seeds (need 2); returns "
                          + ", ".join(f"{k} {np.round(v, 1).tolist()}" for k, v in returns.items()))


# ---------------------------------------------------------------------------
# 8. structural invariants of alternating training


def test_criterion_08_structural_invariants(verdict):
    task = config.load_preset("morphology_chain", ["scale=ci", "data.triples_x=2000", "data.triples_y=2000",
                                                   "forward.epochs=1"]).task()
    dx, dy, F = transfer.prepare(task, 0)
    f_hash = _sha(fm.to_bytes(F))
    base = replace(task.train, outer_rounds=2, phase_steps_a=25, phase_steps_b=25, log_every=5, seed=0)
    corr = dict(joint_correspondence=task.joint_map, obs_correspondence=task.obs_map())
    res = align.train_alternating(dx, dy, F, base, check_freezes=True, **corr)
    checks = {"F hash": _sha(fm.to_bytes(F)) == f_hash and res.phase_order == ["A", "B", "A", "B"]}

    # independent freeze check: a phase-only run leaves the other phase's networks at init
    init = align.build_model("joint", dx, dy, task.joint_map, 0, task.obs_map()).digests()
    only_a = align.train_alternating(dx, dy, F, replace(base, phase_steps_b=0), **corr).model.digests()
    only_b = align.train_alternating(dx, dy, F, replace(base, phase_steps_a=0), **corr).model.digests()
    checks["phase freezes"] = (all(only_a[r] == init[r] for r in ("G", "D_Y"))
                               and all(only_a[r] != init[r] for r in ("H", "P", "D_U", "D_A"))
                               and all(only_b[r] == init[r] for r in ("H", "P", "D_U", "D_A"))
                               and only_b["G"] != init["G"])

    pm = config.load_preset("cross_physics_pointmass", ["scale=ci", "data.triples_x=1000",
                                                        "data.triples_y=1000", "forward.epochs=1"]).task()
    px, py, pF = transfer.prepare(pm, 0)
    pres = align.train_alternating(px, py, pF, replace(pm.train, epochs=1, steps_per_epoch=3))
    fresh = align.build_model("cross_physics", px, py)
    checks["domain cycle 0 at init"] = (pres.traces["A"][0]["dom_cycle"] == 0.0
                                        and align.domain_cycle_loss(fresh, px.obs, px.actions, px.obs) == 0.0)

    worst = 0.0
    for phase, rows in res.traces.items():
        w = {"dyn_cycle": base.lambda0, "adv_H": base.lambda1, "adv_P": base.lambda1,
             "dom_cycle": base.lambda1, "adv_G": base.lambda2}
        if phase == "A":
            w["adv_G"] = 0.0
        else:
            w.update(adv_H=0.0, adv_P=0.0, dom_cycle=0.0)
        for row in rows:
            worst = max(worst, abs(row["total"] - sum(w[k] * row[k] for k in align.TERMS if k in row)))
    rng = np.random.default_rng(0)
    for _ in range(10):
        lam = rng.uniform(0, 300, 3)
        cfg = replace(base, lambda0=lam[0], lambda1=lam[1], lambda2=lam[2])
        idx = rng.integers(0, len(dx), 32)
        jdx = rng.integers(0, len(dy), 32)
        b = align.Batches(dx.obs[idx], dx.actions[idx], dx.next_obs[idx], dy.obs[jdx], dy.actions[jdx],
                          dy.next_obs[jdx])
        total, parts = align.full_loss(res.model, F, b, cfg)
        recomposed = lam[0] * parts["dyn_cycle"] + lam[1] * (parts["adv_H"] + parts["adv_P"]
                                                              + parts["dom_cycle"]) + lam[2] * parts["adv_G"]
        worst = max(worst, abs(total - recomposed))
    checks["breakdown"] = worst < 1e-10
    verdict(8, all(checks.values()),
            "; ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in checks.items()) + f" (breakdown gap {worst:.1e})")


# ---------------------------------------------------------------------------
# 9. determinism and file formats

PIPELINE_SETS = ["data.triples_x=1000", "data.triples_y=1000", "forward.epochs=1", "align.e=1",
                 "align.e1=20", "align.e2=20", "eval.seeds=0,1", "eval.episodes=4", "eval.horizon=20"]


def _pipeline(out):
    for stage in ("collect", "train-forward", "train-align", "eval", "report"):
        args = [stage, "--preset", "morphology_chain", "--out", str(out)]
        for s in PIPELINE_SETS:
            args += ["--set", s]
        assert cli.main(args) == 0, stage
    # the manifest records wall-clock timings; everything else must match
    return {p.relative_to(out).as_posix(): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name != "manifest.json"}


def test_criterion_09_determinism_and_io(tmp_path, verdict):
    a, b = _pipeline(tmp_path / "a"), _pipeline(tmp_path / "b")
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    kinds = {k.rsplit(".", 1)[-1] for k in a}
    run = tmp_path / "a"
    trips = {
        "cyds": data.dataset_to_bytes(data.load(run / "dataset_X.cyds")) == a["dataset_X.cyds"],
        "cyfm": fm.to_bytes(fm.load(run / "forward.cyfm")) == a["forward.cyfm"],
        "cyam": align.model_to_bytes(*align.load_model(run / "align.cyam")) == a["align.cyam"],
        "json": transfer.TransferReport.from_json(a["report.json"].decode()).to_json() == a["report.json"].decode(),
        "csv": transfer.TransferReport.from_json(a["report.json"].decode()).to_csv() == a["report.csv"].decode(),
    }
    F = fm.load(run / "forward.cyfm")
    trips["cyal"] = nn.params_to_bytes(nn.params_from_bytes(nn.params_to_bytes(F.params))) == \
        nn.params_to_bytes(F.params)
    ok = not differing and {"cyds", "cyfm", "cyam", "json", "csv", "svg"} <= kinds and all(trips.values())
    verdict(9, ok, f"{len(a)} artifacts byte-identical across two runs"
                   + (f" except {differing}" if differing else "")
                   + "; round trips " + ", ".join(f"{k} {'ok' if v else 'BROKEN'}" for k, v in trips.items()))


# ---------------------------------------------------------------------------
# 10. trivial closure


def test_criterion_10_trivial_closure(verdict):
    spec = envs.linear_system(np.eye(4), np.zeros((4, 2)))
    ds = data.collect(spec, "random", 50, 20, seed=0)
    model = align.build_model("cross_physics", ds, ds)
    F = fm.new_model(4, 2, seed=0).freeze()
    worst = [0.0]

    @settings(max_examples=100, deadline=None)
    @given(st.integers(0, 2**31 - 1), st.integers(1, 64), st.floats(0.01, 100.0))
    def any_batch(seed, n, scale):
        rng = np.random.default_rng(seed)
        x = rng.normal(scale=scale, size=(n, 4))
        a = rng.uniform(-1, 1, (n, 2)) * spec.action_bound
        loss = align.dynamics_cycle_loss(model, F, x, a, envs.step(spec, x, a))
        worst[0] = max(worst[0], loss)

    any_batch()
    on_data = align.dynamics_cycle_loss(model, F, ds.obs, ds.actions, ds.next_obs)
    worst[0] = max(worst[0], on_data)
    verdict(10, worst[0] < 1e-6, f"max dynamics-cycle loss {worst[0]:.1e} (< 1e-6) over 100 random batches "
                                 "and the collected dataset")
