"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the session summary.
The training-based criteria are marked ``slow`` but are part of the default run.
"""
import time
from dataclasses import replace

import numpy as np
import pytest
from scipy.optimize import minimize

import bound_reference
from _helpers import (
    MNIST,
    central_difference,
    conv_net,
    dense_6543,
    max_rel_error,
    random_fixture,
    random_keep_rates,
    record,
    relu_margin,
    to_inputs,
)
from localdrop.bound import BoundInputs, LayerTerms, cnn_bound, fcn_bound, multichannel_bound
from localdrop.cli import main
from localdrop.config import fcn_small
from localdrop.data import load_idx
from localdrop.drop import DropBlockParams, cover_counts, dropblock_gamma, exact_keep_prob_matrix, keep_prob_matrix
from localdrop.drop import sample_dropblock_mask
from localdrop.linalg import numerical_rank, singular_values, tail_singular_sum
from localdrop.net import backward, forward_expected, forward_stochastic, init_keep_states, init_weights, loss, onehot
from localdrop.optim import (
    TrainConfig,
    compute_c,
    keep_rate_gradients,
    keep_rate_objective,
    project_weights,
    projectable_layers,
    spawn_rngs,
    svt_project,
    train_two_stage,
)


def mnist(flat=True):
    train = load_idx(MNIST["train_images"], MNIST["train_labels"])
    test = load_idx(MNIST["test_images"], MNIST["test_labels"])
    if flat:
        train, test = train.reshaped((784,)), test.reshaped((784,))
    return train, test


# -- 1 -------------------------------------------------------------------------


def _net_gradient_error(net, rng):
    # redraw until no ReLU input sits within 1e-3 of its kink, where differences are meaningless
    while True:
        w = init_weights(net, rng)
        x = rng.standard_normal((3,) + net.input_shape)
        y = onehot(rng.integers(0, 3, 3), 3)
        states = random_keep_rates(net, rng)
        if any(layer.kind == "conv" for layer in net.layers):
            states[0] = DropBlockParams(float(rng.uniform(0.02, 0.2)), 3, 8)
        if relu_margin(net, w, states, x) > 1e-3:
            break
    f = lambda: loss(forward_expected(net, w, states, x)[0], y)
    _, cache = forward_expected(net, w, states, x)
    g = backward(net, w, cache, y, keep_grads=True)
    worst = 0.0
    for idx in net.weight_layers:
        worst = max(worst, max_rel_error(g.weights[idx], central_difference(f, w[idx])))
    kg = keep_rate_gradients(net, w, states, x, y, 0.0, 1)
    for idx in net.drop_sites:
        s = states[idx]
        if isinstance(s, DropBlockParams):
            obj = lambda d: keep_rate_objective(net, w, [s.with_d(d) if i == idx else t for i, t in enumerate(states)],
                                                x, y, 0.0, 1)
            num = (obj(s.d + 1e-5) - obj(s.d - 1e-5)) / 2e-5
            worst = max(worst, max_rel_error(kg[idx], num))
        elif s is not None:
            theta = s.theta.copy()

            def obj():
                tmp = list(states)
                tmp[idx] = type(s)(theta)
                return keep_rate_objective(net, w, tmp, x, y, 0.0, 1)

            worst = max(worst, max_rel_error(kg[idx], central_difference(obj, theta)))
    return worst


def test_criterion_1_gradient_fidelity():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    errs = [_net_gradient_error(dense_6543(True) if i % 2 == 0 else conv_net(True), rng) for i in range(50)]
    dt = time.perf_counter() - t0
    ok = max(errs) < 1e-4 and dt < 60
    assert record(1, ok, f"50 nets, max rel error {max(errs):.2e} (< 1e-4), {dt:.1f}s (< 60s)")


# -- 2 -------------------------------------------------------------------------


def _prox_objective(w, w_hat, h, c):
    return 0.5 * np.sum((w - w_hat) ** 2) + c * np.linalg.svd(w, compute_uv=False)[h:].sum()


def _smoothed(z, w_hat, h, c, mu):
    w = z.reshape(w_hat.shape)
    u, s, vt = np.linalg.svd(w)
    t = np.sqrt(s[h:] ** 2 + mu**2)
    return (0.5 * np.sum((w - w_hat) ** 2) + c * np.sum(t - mu),
            ((w - w_hat) + c * (u[:, h:] * (s[h:] / t)) @ vt[h:]).ravel())


def _numerical_minimum(w_hat, h, c):
    # L-BFGS seeded at w_hat on a smoothed tail norm, with the smoothing driven to zero
    z = w_hat.ravel().copy()
    for mu in 10.0 ** -np.arange(1, 9):
        z = minimize(_smoothed, z, args=(w_hat, h, c, mu), jac=True, method="L-BFGS-B",
                     options={"ftol": 1e-15, "gtol": 1e-12, "maxiter": 5000}).x
    return _prox_objective(z.reshape(w_hat.shape), w_hat, h, c)


def test_criterion_2_svt_oracle():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    gaps = []
    for _ in range(30):
        w_hat = rng.standard_normal((4, 4))
        for h in (0, 1, 2):
            for c in (0.1, 1.0):
                ours = _prox_objective(svt_project(w_hat, h, c), w_hat, h, c)
                gaps.append(ours - _numerical_minimum(w_hat, h, c))
    gaps = np.array(gaps)
    exact = np.array_equal(svt_project(np.diag([3.0, 2.0, 1.0]), 1, 0.5), np.diag([3.0, 1.5, 0.5]))
    dt = time.perf_counter() - t0
    ok = np.all(np.abs(gaps) < 1e-6) and exact and dt < 60
    assert record(2, ok, f"180 problems, max |objective gap| {np.abs(gaps).max():.1e} (< 1e-6), "
                         f"worst ours-minus-numerical {gaps.max():.1e}, diag fixture exact={exact}, {dt:.1f}s")


# -- 3 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_3_dropblock_statistics():
    t0 = time.perf_counter()
    p = DropBlockParams(0.09, 3, 10)
    gamma_ok = dropblock_gamma(0.09, 3, 10) == 0.015625 and p.gamma == 0.015625
    n, chunk = 200_000, 20_000
    rng = np.random.default_rng(12345)
    kept = np.zeros((10, 10))
    for _ in range(n // chunk):
        kept += sample_dropblock_mask(p, chunk, rng).sum(axis=0)
    freq = kept / n
    exact = exact_keep_prob_matrix(p)
    assert np.array_equal(exact, (1 - p.gamma) ** cover_counts(3, 10))
    z = np.abs(freq - exact) / np.sqrt(exact * (1 - exact) / n)
    theta = keep_prob_matrix(p)
    corner_ok = theta[0, 0] == 1 - p.gamma and theta[4, 5] == 1 - 9 * p.gamma and theta[2, 2] == 1 - 9 * p.gamma
    dt = time.perf_counter() - t0
    ok = gamma_ok and np.all(z < 3) and corner_ok and dt < 120
    assert record(3, ok, f"gamma exact={gamma_ok}, max |z| over 100 units {z.max():.2f} (< 3) at n={n}, "
                         f"corner/interior exact={corner_ok}, {dt:.1f}s")


# -- 4 -------------------------------------------------------------------------


def test_criterion_4_bound_evaluators():
    worst = 0.0
    chain = 0.0
    for s in range(20):
        fx = random_fixture(np.random.default_rng(s))
        ref = bound_reference.evaluate(fx)
        worst = max(worst, abs(multichannel_bound(to_inputs(fx)).total - ref) / max(1.0, abs(ref)))
        single = random_fixture(np.random.default_rng(500 + s), channels=False)
        ref = bound_reference.evaluate(single)
        cnn = cnn_bound(to_inputs(single)).total
        worst = max(worst, abs(cnn - ref) / max(1.0, ref))
        chain = max(chain, abs(multichannel_bound(to_inputs(single)).total - cnn) / max(1.0, cnn))
        single["area"] = [1.0] * len(single["area"])
        ref = bound_reference.evaluate(single)
        fcn = fcn_bound(to_inputs(single)).total
        worst = max(worst, abs(fcn - ref) / max(1.0, ref))
        chain = max(chain, abs(cnn_bound(to_inputs(single)).total - fcn) / max(1.0, fcn))

    monotone = True
    for s in range(20):
        rng = np.random.default_rng(900 + s)
        L = int(rng.integers(1, 4))
        mats = [rng.standard_normal((int(rng.integers(2, 6)), int(rng.integers(2, 6)))) for _ in range(L)]
        norms = rng.uniform(0.5, 2, L)
        areas = rng.integers(1, 10, L).astype(float)

        def inputs(h, nm):
            layers = [LayerTerms(tail=tail_singular_sum(w, h), keep_norm=z, area=a) for w, z, a in zip(mats, nm, areas)]
            return BoundInputs(3, 20, 5.0, layers)

        totals = [(fcn_bound(inputs(h, norms)).total, cnn_bound(inputs(h, norms)).total) for h in range(6)]
        monotone &= all(a[0] >= b[0] and a[1] >= b[1] for a, b in zip(totals, totals[1:]))
        for i in range(L):
            up = norms.copy()
            up[i] *= 1.5
            monotone &= fcn_bound(inputs(1, up)).total >= totals[1][0]
            monotone &= cnn_bound(inputs(1, up)).total >= totals[1][1]
    ok = worst <= 1e-12 and chain <= 1e-12 and monotone
    assert record(4, ok, f"max rel deviation from reference {worst:.1e}, reduction chain {chain:.1e} (<= 1e-12), "
                         f"monotone in h and keep norms={monotone}")


# -- 5 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_5_bound_tracks_training():
    train, _ = mnist()
    # h below the output layer's rank (10 classes); otherwise every non-constant term vanishes
    cfg = TrainConfig(lam=0.1, m=5, h=5, epochs_max=50, lr0=0.1, seed=0, delta=1.0)
    state = train_two_stage(cfg, fcn_small(), train.subset(1000))
    b = np.array([r.bound_total for r in state.history])
    finite = bool(np.all(np.isfinite(b)))
    across_step = all(p["bound_after"] < p["bound_before"] for p in state.projections)
    across_epoch = all(b[p["epoch"] - 1] < b[p["epoch"] - 2] for p in state.projections)
    ok = finite and across_step and across_epoch and len(state.projections) == 10
    assert record(5, ok, f"{len(state.projections)} SVT epochs, bound lower after every projection={across_step}, "
                         f"lower than the previous epoch's logged value={across_epoch}, finite={finite}, "
                         f"bound {b[0]:.3g} -> {b[-1]:.3g}")


# -- 6 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_6_direction_check():
    t0 = time.perf_counter()
    train, test = mnist()
    common = dict(m=10, h=240, epochs_max=60, lr0=0.1, log_bound=False)
    base_err, ld_err = [], []
    for seed in (0, 1, 2):
        base = TrainConfig(lam=0.0, drops=False, seed=seed, **common)
        base_err.append(train_two_stage(base, fcn_small().without_drops(), train, test).history[-1].test_error_pct)
        ld = TrainConfig(lam=0.1, seed=seed, **common)
        ld_err.append(train_two_stage(ld, fcn_small(), train, test).history[-1].test_error_pct)
    dt = time.perf_counter() - t0
    ok = np.mean(ld_err) <= np.mean(base_err) and dt < 15 * 60
    assert record(6, ok, f"mean test error LocalDrop {np.mean(ld_err):.2f}% {ld_err} vs baseline "
                         f"{np.mean(base_err):.2f}% {base_err}, {dt / 60:.1f} min (< 15)")


# -- 7 -------------------------------------------------------------------------


def _rank_check(net, weights, states, h):
    """Pick lambda so that c just exceeds sigma_{h+1} of every projected block, project once, return max rank."""
    need = 0.0
    for idx in projectable_layers(net):
        w = weights[idx]
        blocks = [w] if w.ndim == 2 else list(w.reshape(-1, *w.shape[2:]))
        sig = max(singular_values(b)[h] for b in blocks)
        need = max(need, sig / compute_c(1.0, states[idx]))
    cfg = TrainConfig(lam=1.0001 * need, h=h, conv_h=h)
    out = project_weights(net, weights, states, cfg)
    ranks = []
    for idx in projectable_layers(net):
        c = compute_c(cfg.lam, states[idx])
        w = weights[idx]
        blocks = [w] if w.ndim == 2 else list(w.reshape(-1, *w.shape[2:]))
        assert all(singular_values(b)[h] < c for b in blocks)
        new = [out[idx]] if w.ndim == 2 else list(out[idx].reshape(-1, *w.shape[2:]))
        ranks += [numerical_rank(singular_values(b)) for b in new]
    return max(ranks)


@pytest.mark.slow
def test_criterion_7_rank_control():
    train, _ = mnist()
    net = fcn_small()
    state = train_two_stage(TrainConfig(lam=0.1, m=100, h=20, epochs_max=2, lr0=0.1), net, train.subset(1000))
    results = {}
    for h in (5, 20, 60):
        results[f"fcn h={h}"] = (_rank_check(net, state.weights, state.keep_states, h), h)
    cnet = conv_net(True)
    rng = np.random.default_rng(3)
    w = init_weights(cnet, rng)
    states = init_keep_states(cnet, d_init=0.1)
    results["conv blocks h=1"] = (_rank_check(cnet, w, states, 1), 1)
    ok = all(r <= h for r, h in results.values())
    detail = ", ".join(f"{k}: max rank {r}" for k, (r, _) in results.items())
    assert record(7, ok, detail)


# -- 8 -------------------------------------------------------------------------


@pytest.mark.slow
def test_criterion_8_determinism(tmp_path):
    outs = []
    for name in ("a", "b"):
        args = ["train", "--train-images", str(MNIST["train_images"]), "--train-labels", str(MNIST["train_labels"]),
                "--test-images", str(MNIST["test_images"]), "--test-labels", str(MNIST["test_labels"]),
                "--subset-size", "500", "--test-subset-size", "200", "--epochs", "4", "--m", "2", "--h", "5",
                "--lr0", "0.1", "--seed", "17", "--out", str(tmp_path / name)]
        assert main(args) == 0
        outs.append((tmp_path / name / "metrics.csv").read_bytes())
    ok = outs[0] == outs[1] and outs[0].count(b"\n") == 5
    assert record(8, ok, f"two CLI runs, metrics.csv byte-identical={outs[0] == outs[1]} ({len(outs[0])} bytes)")


# -- 9 -------------------------------------------------------------------------


def _plain_sgd(net, train, epochs, lr, batch, seed):
    rngs = spawn_rngs(seed)
    w = init_weights(net, rngs["init"])
    y = onehot(train.y, train.num_classes)
    for _ in range(epochs):
        order = rngs["shuffle"].permutation(len(train))
        for s in range(0, len(train), batch):
            idx = order[s : s + batch]
            _, cache = forward_stochastic(net, w, None, train.x[idx])
            g = backward(net, w, cache, y[idx])
            w = [None if wi is None else wi - lr * g.weights[i] for i, wi in enumerate(w)]
    return w


@pytest.mark.slow
def test_criterion_9_degenerate_equivalence():
    train, _ = mnist()
    train = train.subset(1000)
    net = fcn_small().without_drops()
    cfg = TrainConfig(lam=0.0, drops=False, m=10, h=240, epochs_max=5, lr0=0.1, seed=5, log_bound=False)
    state = train_two_stage(cfg, net, train)
    ref = _plain_sgd(net, train, 5, 0.1, cfg.batch_size, 5)
    same = all(np.array_equal(state.weights[i], ref[i]) for i in net.weight_layers)
    # drop sites present but disabled by config must also be inert
    state2 = train_two_stage(replace(cfg, m=6), fcn_small(), train)
    same2 = all(np.array_equal(state2.weights[i], ref[i]) for i in net.weight_layers)
    assert record(9, same and same2, f"5 epochs on 1000 MNIST images vs independent SGD loop, bit-identical={same}, "
                                    f"with disabled drop sites={same2}")
