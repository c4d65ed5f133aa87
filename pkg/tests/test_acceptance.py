"""Acceptance gate: ten end-to-end checks with explicit tolerances.

Each test measures one contract of the package (operator correctness,
gradient integrity, solver agreement with an independent oracle, noise
calibration, training effectiveness, method ordering, unroll stability,
determinism, truth-free training) and emits a single
``[CRITERION n] PASS/FAIL`` line with the measured numbers; the conftest
summary hook replays all lines at the end of the run.

The desk-scale checks (6-8) share one trained-model fixture and one
evaluation fixture, so the expensive training happens once per session.
"""

import time
from pathlib import Path

import numpy as np
import pytest

from deepbp import SenseOp, Tape, Tensor, complex_dot
from deepbp.cli import main as cli_main
from deepbp.cnn import DenoiserArch, init_weights
from deepbp.data import (
    Dataset,
    GenConfig,
    generate_dataset,
    make_phantom,
    make_sensitivities,
    simulate_measurements,
    strip_truth,
)
from deepbp.evaluation import nrmse, sweep_unrolls, tune_tau
from deepbp.recon import (
    UnrolledModel,
    _initial_state,
    conjugate_gradient,
    dbp_forward,
    dc_layer,
    l1_wavelet_bp,
    zero_filled,
)
from deepbp.sampling import MaskSpec, poisson_disc_mask
from deepbp.training import TrainConfig, load_checkpoint, supervised_loss, train

from _report import record
from oracles import fd_gradient, materialize, pairs_to_complex, rel_err, solve_ball_constrained

N1_SWEEP = tuple(range(3, 15))


def _random_operator(seed: int) -> SenseOp:
    r = np.random.default_rng([31, seed])
    h, w = [(4, 4), (8, 8), (16, 16), (32, 32)][seed % 4]
    coils = 1 + seed % 4
    sens = make_sensitivities(coils, h, w, seed=[seed, 1])
    mask = (r.uniform(size=(h, w)) < r.uniform(0.3, 0.8)).astype(float)
    mask[h // 2, w // 2] = 1.0
    return SenseOp(sens, Tensor(mask))


def _random_problem(h, w, coils, sigma, seed, accel=2.5, calib=2):
    truth = make_phantom(h, w, seed=[seed, 0])
    sens = make_sensitivities(coils, h, w, seed=[seed, 1])
    mask = poisson_disc_mask(MaskSpec(h, w, calib=calib, target_accel=accel, seed=[seed, 2]))
    return simulate_measurements(truth, sens, Tensor(mask), sigma, seed=[seed, 3])


def test_criterion_01_operator_adjoint_identity():
    """<Ax, y> == <x, A*y> for 100 random sensitivity/mask operators."""
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(100):
        op = _random_operator(seed)
        r = np.random.default_rng([32, seed])
        x = r.normal(size=op.ishape)
        y = r.normal(size=op.oshape)
        ax = op.forward(Tensor(x)).data
        aty = op.adjoint(Tensor(y)).data
        gap = abs(complex_dot(ax, y) - complex_dot(x, aty))
        bound = 1e-10 * np.linalg.norm(ax) * np.linalg.norm(y)
        worst = max(worst, gap / bound)
    elapsed = time.perf_counter() - t0
    ok = worst <= 1.0 and elapsed < 5.0
    line = record(1, ok, f"max dot-test gap {worst:.2e} of the 1e-10*|Ax||y| "
                         f"bound over 100 operators, {elapsed:.1f}s < 5s")
    assert ok, line


def test_criterion_02_unrolled_gradients_match_finite_differences():
    """Tape gradient of the full unrolled network vs central differences,
    every trainable tensor, on a 4x4 two-coil problem."""
    t0 = time.perf_counter()
    mask = np.zeros((4, 4))
    mask[1:3, 1:3] = 1.0
    mask[0, 2] = mask[3, 0] = mask[2, 3] = 1.0
    truth = make_phantom(4, 4, seed=[5, 0])
    sens = make_sensitivities(2, 4, 4, seed=[5, 1])
    prob = simulate_measurements(truth, sens, Tensor(mask), 0.05, seed=[5, 3])
    model = UnrolledModel(
        init_weights(DenoiserArch(widths=(3,)), seed=[5, 17]),
        Tensor(np.zeros(()), requires_grad=True),
        n1=1, n2=2, n3=3,
    )
    params = dict(model.named_params())

    with Tape() as tape:
        loss = supervised_loss(dbp_forward(prob, model), prob.truth)
        grads = tape.backward(loss)

    worst_name, worst = "", 0.0
    for name, t in params.items():
        def loss_of(arr, name=name):
            m2 = model.with_params({**params, name: Tensor(arr)})
            return supervised_loss(dbp_forward(prob, m2), prob.truth).item()

        rel = rel_err(grads[t], fd_gradient(loss_of, t.data))
        if rel > worst:
            worst_name, worst = name, rel
    elapsed = time.perf_counter() - t0
    n_entries = sum(t.size for t in params.values())
    ok = worst < 1e-4 and elapsed < 60.0
    line = record(2, ok, f"worst rel err {worst:.2e} ({worst_name}) over "
                         f"{len(params)} tensors / {n_entries} entries, bound 1e-4, "
                         f"{elapsed:.1f}s < 60s")
    assert ok, line


def test_criterion_03_dc_layer_matches_convex_oracle():
    """Long-run data-consistency layer vs an independent SOCP solve of the
    same ball-constrained projection, ten random 8x8 problems."""
    t0 = time.perf_counter()
    model = UnrolledModel(
        init_weights(DenoiserArch(widths=(3,)), seed=0),
        Tensor(np.log(10.0), requires_grad=True),
        n2=50, n3=10,
    )
    worst_rel, worst_feas = 0.0, 0.0
    for seed in range(10):
        prob = _random_problem(8, 8, coils=2, sigma=0.05, seed=seed)
        op = prob.operator()
        r = make_phantom(8, 8, seed=[seed, 99])
        x, _ = dc_layer(r, prob, model, _initial_state(op, r))

        a = materialize(op)
        y = pairs_to_complex(prob.y.data).reshape(-1)
        oracle = solve_ball_constrained(a, y, pairs_to_complex(r.data).reshape(-1),
                                        prob.epsilon)
        got = pairs_to_complex(x.data).reshape(-1)
        worst_rel = max(worst_rel, rel_err(got, oracle))
        worst_feas = max(worst_feas, float(np.linalg.norm(a @ got - y) / prob.epsilon))
    elapsed = time.perf_counter() - t0
    ok = worst_rel < 1e-4 and worst_feas <= 1.0 + 1e-4 and elapsed < 120.0
    line = record(3, ok, f"worst rel |dx| {worst_rel:.2e} (bound 1e-4), worst "
                         f"residual {worst_feas:.6f}*eps (bound 1+1e-4), ten problems, "
                         f"{elapsed:.1f}s < 120s")
    assert ok, line


def test_criterion_04_cg_matches_direct_solves():
    """CG run for dim iterations vs numpy dense solve on random SPD systems."""
    t0 = time.perf_counter()
    worst = 0.0
    for k in range(10):
        r = np.random.default_rng([41, k])
        q, _ = np.linalg.qr(r.normal(size=(16, 16)))
        a = q @ np.diag(r.uniform(0.5, 2.0, size=16)) @ q.T
        b = r.normal(size=16)
        direct = np.linalg.solve(a, b)
        got = conjugate_gradient(lambda t: Tensor(a @ t.data), Tensor(b), iters=16).data
        worst = max(worst, float(np.linalg.norm(got - direct) / np.linalg.norm(direct)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-8 and elapsed < 1.0
    line = record(4, ok, f"worst rel err {worst:.2e} over ten 16-dim SPD systems "
                         f"(bound 1e-8), {elapsed:.2f}s < 1s")
    assert ok, line


def test_criterion_05_noise_power_matches_epsilon_model():
    """Simulated measurement noise has per-sample power sigma^2, the quantity
    the epsilon = sigma*sqrt(M) ball radius is built from."""
    t0 = time.perf_counter()
    sigma = 0.02
    truth = make_phantom(64, 64, seed=[13, 0])
    sens = make_sensitivities(4, 64, 64, seed=[13, 1])
    mask = Tensor(np.ones((64, 64)))
    powers, m_count, eps = [], None, None
    for k in range(10):
        prob = simulate_measurements(truth, sens, mask, sigma, seed=[13, 3, k])
        v = prob.y.data - prob.operator().forward(prob.truth).data
        powers.append(float(np.sum(v * v)) / prob.measurements)
        m_count, eps = prob.measurements, prob.epsilon
    mean_power = float(np.mean(powers))
    ratio = mean_power / sigma**2
    elapsed = time.perf_counter() - t0
    ok = (abs(ratio - 1.0) <= 0.05 and m_count >= 10_000
          and eps == pytest.approx(sigma * np.sqrt(m_count), rel=1e-12)
          and elapsed < 5.0)
    line = record(5, ok, f"E|v|^2/M = {mean_power:.3e} vs sigma^2 = {sigma**2:.3e} "
                         f"(ratio {ratio:.4f}, tol 5%), M = {m_count}, "
                         f"eps = sigma*sqrt(M) exactly, {elapsed:.1f}s < 5s")
    assert ok, line


# ---------------------------------------------------------------------------
# desk-scale training and evaluation (criteria 6-8 share these)


@pytest.fixture(scope="session")
def desk_eval(desk_dataset, trained_models):
    """Unroll sweeps on val (operating-point selection) and test (readout)
    for all three trained models, plus the tuned wavelet and zero-filled
    baselines on the test split.

    Models are reloaded from their checkpoints so evaluation exercises the
    same inference path a user gets, not the in-memory training variant.
    """
    models = {
        "dbp-supervised": load_checkpoint(trained_models["results"]["supervised"].checkpoint_dir)[0],
        "dbp-unsupervised": load_checkpoint(trained_models["results"]["unsupervised"].checkpoint_dir)[0],
        "modl": load_checkpoint(trained_models["results"]["modl"].checkpoint_dir)[0],
    }
    sweeps = {}
    for name, model in models.items():
        method = "modl" if name == "modl" else "dbp"
        sweeps[name] = {
            split: sweep_unrolls(model, desk_dataset, N1_SWEEP, split=split, method=method)
            for split in ("val", "test")
        }
    op_n1 = {name: sweeps[name]["val"].best_n1 for name in models}
    op_mean = {name: sweeps[name]["test"].mean_for(op_n1[name]) for name in models}

    test_probs = desk_dataset.load_split("test")
    tau = tune_tau(desk_dataset)
    l1_mean = float(np.mean([nrmse(l1_wavelet_bp(p, tau), p.truth) for p in test_probs]))
    zf_mean = float(np.mean([nrmse(zero_filled(p), p.truth) for p in test_probs]))
    return {
        "sweeps": sweeps,
        "op_n1": op_n1,
        "op_mean": op_mean,
        "tau": tau,
        "l1_mean": l1_mean,
        "zf_mean": zf_mean,
        "n_test": len(test_probs),
    }


@pytest.mark.slow
def test_criterion_06_training_beats_zero_filled(trained_models, desk_eval):
    """Supervised at least 30% and unsupervised at least 15% below the
    zero-filled baseline in mean test NRMSE, within the epoch and wall
    budgets."""
    zf = desk_eval["zf_mean"]
    sup = desk_eval["op_mean"]["dbp-supervised"]
    unsup = desk_eval["op_mean"]["dbp-unsupervised"]
    ep_sup = len(trained_models["results"]["supervised"].metrics)
    ep_unsup = len(trained_models["results"]["unsupervised"].metrics)
    wall = trained_models["wall"]["supervised"] + trained_models["wall"]["unsupervised"]
    ok = (sup <= 0.70 * zf and unsup <= 0.85 * zf
          and ep_sup <= 30 and ep_unsup <= 30 and wall < 1800.0)
    line = record(
        6, ok,
        f"zero-filled {zf:.4f} | supervised {sup:.4f} at N1={desk_eval['op_n1']['dbp-supervised']} "
        f"({100 * (1 - sup / zf):+.1f}%, bar -30%) | unsupervised {unsup:.4f} "
        f"at N1={desk_eval['op_n1']['dbp-unsupervised']} ({100 * (1 - unsup / zf):+.1f}%, bar -15%) "
        f"| {ep_sup}+{ep_unsup} epochs, training wall {wall:.0f}s < 1800s")
    assert ok, line


@pytest.mark.slow
def test_criterion_07_method_ordering(desk_eval):
    """Mean test NRMSE ordering: supervised <= unsupervised <= tuned
    wavelet baseline."""
    sup = desk_eval["op_mean"]["dbp-supervised"]
    unsup = desk_eval["op_mean"]["dbp-unsupervised"]
    l1 = desk_eval["l1_mean"]
    ok = sup <= unsup <= l1 and desk_eval["n_test"] >= 25
    line = record(
        7, ok,
        f"supervised {sup:.4f} <= unsupervised {unsup:.4f} <= l1-wavelet {l1:.4f} "
        f"(tau {desk_eval['tau']:g}, {desk_eval['n_test']} test problems)")
    assert ok, line


@pytest.mark.slow
def test_criterion_08_unroll_sweep_stability(desk_eval):
    """Models trained at N1=5 stay within 1.5x of their best mean NRMSE when
    evaluated at N1 = 3..14; the penalized variant is recorded only."""
    ratios = {}
    for name in ("dbp-supervised", "dbp-unsupervised", "modl"):
        means = [r["mean_nrmse"] for r in desk_eval["sweeps"][name]["test"].rows]
        ratios[name] = max(means) / min(means)
    ok = ratios["dbp-supervised"] <= 1.5 and ratios["dbp-unsupervised"] <= 1.5
    line = record(
        8, ok,
        f"max/min over N1 in 3..14: supervised {ratios['dbp-supervised']:.3f}, "
        f"unsupervised {ratios['dbp-unsupervised']:.3f} (bound 1.5); "
        f"modl {ratios['modl']:.3f} recorded, not asserted")
    assert ok, line


# ---------------------------------------------------------------------------
# pipeline determinism and truth-free training


def _pipeline(base: Path) -> dict[str, bytes]:
    data, out = base / "data", base / "run"
    assert cli_main(["gen-data", "--out", str(data), "--count", "8", "--size", "16", "16",
                     "--coils", "2", "--accel", "3.0", "--calib", "4",
                     "--seed", "3", "--deterministic"]) == 0
    assert cli_main(["train", "--data", str(data), "--out", str(out),
                     "--mode", "supervised", "--epochs", "2", "--widths", "3,4",
                     "--n1", "1", "--n2", "2", "--n3", "2",
                     "--seed", "3", "--deterministic"]) == 0
    assert cli_main(["eval", "--ckpt", str(out / "checkpoint"), "--data", str(data),
                     "--out", str(out), "--split", "test", "--deterministic"]) == 0
    return {
        "metrics.csv": (out / "metrics.csv").read_bytes(),
        "results.csv": (out / "results.csv").read_bytes(),
    }


def test_criterion_09_pipeline_determinism(tmp_path):
    """Two generate/train/eval pipeline runs with the same seeds produce
    bit-identical metrics."""
    first = _pipeline(tmp_path / "a")
    second = _pipeline(tmp_path / "b")
    same_metrics = first["metrics.csv"] == second["metrics.csv"]
    same_results = first["results.csv"] == second["results.csv"]
    ok = same_metrics and same_results
    line = record(
        9, ok,
        f"metrics.csv bit-identical: {same_metrics} ({len(first['metrics.csv'])} bytes); "
        f"results.csv bit-identical: {same_results}")
    assert ok, line


def test_criterion_10_unsupervised_trains_without_truth(tmp_path):
    """Unsupervised training completes on a dataset whose truth tensors have
    been deleted, and never reports a truth-based metric."""
    root = tmp_path / "stripped"
    generate_dataset(root, GenConfig(count=6, height=16, width=16, coils=2,
                                     sigma=0.02, accel=3.0, calib=4, seed=11,
                                     split=(4, 1, 1)))
    strip_truth(root)
    ds = Dataset(root)
    cfg = TrainConfig(mode="unsupervised", epochs=2, n1=2, n2=2, n3=2,
                      arch=DenoiserArch(widths=(3, 4)), seed=1)
    res = train(ds, cfg, tmp_path / "out")
    losses = [row["mean_loss"] for row in res.metrics]
    ok = (not ds.has_truth()
          and (tmp_path / "out" / "checkpoint" / "checkpoint.json").is_file()
          and len(losses) == 2 and all(np.isfinite(l) for l in losses)
          and all(row["mean_nrmse"] == "" for row in res.metrics))
    line = record(
        10, ok,
        f"trained 2 epochs on truth-stripped data, final loss {losses[-1]:.3e}, "
        f"checkpoint written, nrmse column empty")
    assert ok, line
