"""Acceptance checks 1-9, one test per criterion.

Each test records a one-line PASS/FAIL verdict with the measured quantity;
the lines are printed in the pytest terminal summary (see conftest) and when
this file is run directly with ``python3 tests/test_acceptance.py``.
"""

import time
from fractions import Fraction
from pathlib import Path

import numpy as np

import reference as ref
from conftest import custom_scenario
from epsl.channel import DeviceProfile
from epsl.cli import main as cli_main
from epsl.experiments import run_sweep, toy_setup
from epsl.latency import (Allocation, aggregated_count, broadcast_latency, client_bp_latency,
                          client_fp_latency, framework_round_latency, round_latency,
                          server_bp_latency, server_fp_latency, smashed_tx_latency,
                          unagg_tx_latency)
from epsl.optimizer import (BASELINES, baseline_alloc, bcd_optimize, min_power_for_rate,
                            rates_from_psd, solve_cut_layer, solve_power_control, update_aux)
from epsl.profile import resnet18_preset, workloads_at_cut
from epsl.scenario import build_scenario, default_config
from epsl.splitnet import SplitNet
from epsl.training import (TrainConfig, epoch_batches, evaluate_all, make_dataset,
                           round_gradients, split_shards, train_round)

RESULTS = {}
GAMMA = 2_097_152
NOISE = 10 ** (-174 / 10) / 1000


def record(n, ok, detail, started):
    RESULTS[n] = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}  [{time.perf_counter() - started:.1f}s]"
    print(RESULTS[n])
    assert ok, RESULTS[n]


def rel(a, b):
    return abs(a - b) / abs(b)


def grad_rel(a, b):
    flat_a = np.concatenate([x.ravel() for pair in a for x in pair])
    flat_b = np.concatenate([x.ravel() for pair in b for x in pair])
    return float(np.linalg.norm(flat_a - flat_b) / np.linalg.norm(flat_b))


# --- 1 -----------------------------------------------------------------------------

def test_criterion_1_latency_formulas():
    t0 = time.perf_counter()
    prof = resnet18_preset()
    dev = DeviceProfile(0, 1e9, 1 / 16, 10.0, 1.0)
    checks = [
        (client_fp_latency(dev, prof, 1, 64), 64 / 16 * 9.8304e6 / 1e9),
        (client_bp_latency(dev, prof, 1, 64), 2 * 64 / 16 * 9.8304e6 / 1e9),
        (smashed_tx_latency(1e8, prof, 1, 64), 64 * GAMMA / 1e8),
        (server_fp_latency(5, 64, 1 / 32, 5e9, 1e6), 5 * 64 * 1e6 / 32 / 5e9),
        (server_bp_latency(5, 64, 0.5, 1 / 32, 5e9, 3e6, 1e6), (192 * 3e6 + 320 * 1e6) / 32 / 5e9),
        (broadcast_latency(1, 64, GAMMA, 2e8), 64 * GAMMA / 2e8),
        (unagg_tx_latency(0.5, 64, GAMMA, 4e7), 32 * GAMMA / 4e7),
    ]
    worst = max(rel(a, b) for a, b in checks)
    exact = 0 == broadcast_latency(0, 64, GAMMA, 2e8) == unagg_tx_latency(1, 64, GAMMA, 4e7)
    exact &= aggregated_count(Fraction(1, 2), 64) == 32 and aggregated_count(0.1, 10) == 1
    recompose = 0
    for seed in range(5):
        sc = build_scenario(default_config(), seed)
        alloc = bcd_optimize(sc).allocation
        for phi in (0, Fraction(1, 2), 1):
            bd = round_latency(sc, alloc, phi)
            hand = (max(bd.t_client_fp + bd.t_uplink) + bd.t_server_fp + bd.t_server_bp
                    + bd.t_broadcast + max(bd.t_downlink + bd.t_client_bp))
            recompose += bd.total != hand or bd.recompose() != bd.total
    ok = worst < 1e-12 and exact and recompose == 0
    record(1, ok, f"worst stage rel err {worst:.1e}; recomposition mismatches {recompose}/15", t0)


# --- 2 -----------------------------------------------------------------------------

def test_criterion_2_phi_zero_equals_psl():
    t0 = time.perf_counter()
    cfg = default_config(dataset_size=2000)
    net, shards, _ = toy_setup(cfg, 0)
    twin = net.copy()
    lam = np.full(net.n_clients, 1 / net.n_clients)
    tc = TrainConfig(phi=0, eta_c=0.05, eta_s=0.05)
    batches = epoch_batches(shards, 16, 0, 0)[:20]
    worst = 0.0
    for rnd in batches:
        g = round_gradients(net, rnd, lam, 0)
        gs, gc = ref.psl_gradients(twin, rnd, lam)
        worst = max(worst, grad_rel(g.server, gs),
                    *(grad_rel(g.clients[i], gc[i]) for i in range(net.n_clients)))
        train_round("epsl", net, rnd, tc)
        ref.apply(twin.server, gs, tc.eta_s)
        for i in range(net.n_clients):
            ref.apply(twin.clients[i], gc[i], tc.eta_c)
        for a, b in zip(net.parameters(), twin.parameters()):
            worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(b)))
    record(2, worst < 1e-12, f"max rel diff over 20 rounds {worst:.1e} (tol 1e-12)", t0)


# --- 3 -----------------------------------------------------------------------------

def test_criterion_3_linear_aggregation_vs_psl():
    """Literal check: identity activations, EPSL gradients against plain PSL.

    Aggregating before the weight-gradient outer product gives
    (sum_i l_i a_i)(sum_i l_i d_i)^T instead of sum_i l_i a_i d_i^T, so the two
    differ unless every client produces the same activations.  The weaker
    identity that does hold (backprop-then-average) is covered in test_splitnet.
    """
    t0 = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        net = SplitNet.create([6, 7, 4, 5, 3], ["identity"] * 4, 2, 3, seed=seed)
        rng = np.random.default_rng(seed)
        for stack in net.clients:
            for lay in stack:
                lay.W += 0.1 * rng.standard_normal(lay.W.shape)
        batches = [(rng.standard_normal((8, 6)), rng.integers(0, 3, 8)) for _ in range(3)]
        lam = (0.2, 0.3, 0.5)
        gs, gc = ref.psl_gradients(net, batches, lam)
        for phi in (0.25, 0.5, 1):
            g = round_gradients(net, batches, lam, phi)
            worst = max(worst, grad_rel(g.server, gs),
                        *(grad_rel(g.clients[i], gc[i]) for i in range(3)))
    record(3, worst < 1e-10, f"max rel diff to PSL {worst:.2e} (tol 1e-10)", t0)


# --- 4 -----------------------------------------------------------------------------

def test_criterion_4_finite_differences():
    t0 = time.perf_counter()
    net = SplitNet.create([4, 6, 3, 5, 3], ["sigmoid", "sigmoid", "sigmoid", "identity"], 2, 2,
                          seed=7)
    rng = np.random.default_rng(7)
    for stack in net.clients:
        for lay in stack:
            lay.W += 0.2 * rng.standard_normal(lay.W.shape)
    lam = (0.4, 0.6)
    batches = [(rng.standard_normal((6, 4)), rng.integers(0, 3, 6)) for _ in range(2)]
    g = round_gradients(net, batches, lam, 0)
    h = 1e-5

    def fd(param, fn):
        out = np.zeros_like(param)
        for idx in np.ndindex(param.shape):
            old = param[idx]
            param[idx] = old + h
            up = fn()
            param[idx] = old - h
            dn = fn()
            param[idx] = old
            out[idx] = (up - dn) / (2 * h)
        return out

    total = lambda: sum(lam[i] * ref.local_loss(net, i, X, y) for i, (X, y) in enumerate(batches))
    fd_s = [(fd(lay.W, total), fd(lay.c, total)) for lay in net.server]
    errs = [grad_rel(g.server, fd_s)]
    for i, (X, y) in enumerate(batches):
        own = lambda: ref.local_loss(net, i, X, y)
        fd_c = [(fd(lay.W, own), fd(lay.c, own)) for lay in net.clients[i]]
        errs.append(grad_rel(g.clients[i], fd_c))
    worst = max(errs)
    record(4, worst < 1e-5 and net.n_params() <= 1000,
           f"{net.n_params()} params, max rel err {worst:.1e} (tol 1e-5)", t0)


# --- 5 -----------------------------------------------------------------------------

def _power(theta, b, g):
    return np.sum(NOISE * b * (2.0 ** (theta / b) - 1.0) / (10.0 * g), axis=-1)


def test_criterion_5_optimizer_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(11)
    wf_gap = 0.0
    for _ in range(5):
        b = rng.uniform(2e6, 2e7, 3)
        g = rng.uniform(1e-12, 1e-10, 3)
        rho = rng.uniform(1e6, 1e8)
        _, p = min_power_for_rate(rho, b, g, 10.0, NOISE)
        t = np.linspace(0, rho, 200)
        t1, t2 = np.meshgrid(t, t, indexing="ij")
        t3 = rho - t1 - t2
        ok = t3 >= 0
        grid = _power(np.stack([t1[ok], t2[ok], t3[ok]], axis=1), b, g).min()
        wf_gap = max(wf_gap, abs(p - grid) / grid)
    wf_ok = wf_gap <= 0.001

    gains = 10 ** np.random.default_rng(0).uniform(-13, -10, (2, 3))
    sc = custom_scenario([1.2e9, 1.5e9], gains, p_max=1.0, p_th=1.5)
    owner = np.array([0, 1, 0])
    cut = 4
    sol = solve_power_control(sc, owner, cut)
    ours = sol.t1
    n = 10**6
    r = np.random.default_rng(123)
    P0 = r.uniform(0, min(sc.p_max[0], sc.hyper.p_th), n)
    P1 = np.minimum(sc.p_max[1], sc.hyper.p_th - P0)
    split = r.dirichlet([1, 1], n)
    B = sc.bandwidths
    w = workloads_at_cut(sc.profile, cut)
    bits = 64 * w.smashed_bits
    t_fp = 64 * sc.intensity * w.client_fp / sc.compute
    snr = lambda psd, i, k: psd * 10.0 * sc.gains[i, k] / NOISE
    r0 = (B[0] * np.log2(1 + snr(P0 * split[:, 0] / B[0], 0, 0))
          + B[2] * np.log2(1 + snr(P0 * split[:, 1] / B[2], 0, 2)))
    r1 = B[1] * np.log2(1 + snr(P1 / B[1], 1, 1))
    with np.errstate(divide="ignore"):
        oracle = np.maximum(t_fp[0] + bits / r0, t_fp[1] + bits / r1).min()
    pc_gap = (ours - oracle) / oracle
    pc_ok = ours <= oracle * 1.01

    sc = build_scenario(default_config(), 0)
    alloc = bcd_optimize(sc, max_iters=1).allocation
    rates = rates_from_psd(sc, alloc.owner, alloc.psd)
    cut_bad = 0
    for phi in (0, 0.5, 1):
        for slack in (1.0, 1.3, 3.0):
            t1, t2 = update_aux(sc, alloc.owner, rates, alloc.cut, phi)
            t1, t2 = t1 * slack, t2 * slack
            choice = solve_cut_layer(sc, alloc.owner, rates, t1, t2, phi)
            table = {}
            for j in sc.profile.cut_range:
                bd = round_latency(sc, Allocation(alloc.owner, alloc.psd, j), phi)
                if bd.t1 <= t1 and bd.t2 <= t2:
                    table[j] = t1 + bd.t_server_fp + bd.t_server_bp + bd.t_broadcast + t2
            best = min(table, key=lambda j: (table[j], j))
            cut_bad += choice.cut != best or choice.objective != table[best]
    record(5, wf_ok and pc_ok and cut_bad == 0,
           f"water-filling gap {wf_gap:.1e} (<=1e-3); power control vs 1e6 search "
           f"{pc_gap:+.2e} (<=1e-2); cut mismatches {cut_bad}/9", t0)


# --- 6 -----------------------------------------------------------------------------

def test_criterion_6_bcd_behaviour():
    t0 = time.perf_counter()
    cfg = default_config()
    non_monotone = 0
    dominated = 0
    for seed in range(100):
        sc = build_scenario(cfg, seed)
        res = bcd_optimize(sc, check=False)
        non_monotone += any(b > a for a, b in zip(res.trace, res.trace[1:]))
        best = min(baseline_alloc(k, sc)[1].total for k in BASELINES)
        dominated += res.objective <= best * (1 + 1e-9)
    ok = non_monotone == 0 and dominated >= 95
    record(6, ok, f"monotone traces {100 - non_monotone}/100; BCD <= all baselines on "
                  f"{dominated}/100 (need >= 95)", t0)


# --- 7 -----------------------------------------------------------------------------

SEEDS7 = range(20)


def _mean_round(cfg, fn):
    return float(np.mean([fn(build_scenario(cfg, s)) for s in SEEDS7]))


def test_criterion_7_trends():
    t0 = time.perf_counter()
    cfg = default_config()

    def ordering(sc):
        out = []
        for phi in (1, Fraction(1, 2)):
            out.append(bcd_optimize(sc, phi).objective)
        psl_alloc = bcd_optimize(sc, 0).allocation
        out.append(framework_round_latency(sc, psl_alloc, "psl"))
        out.append(framework_round_latency(sc, psl_alloc, "sfl"))
        return np.array(out)

    vals = np.mean([ordering(build_scenario(cfg, s)) for s in SEEDS7], axis=0)
    ok_i = bool(np.all(np.diff(vals) > 0))

    bw = run_sweep(cfg, "bandwidth_total", ["100", "200", "300", "400", "500"], reps=20, seed=0)
    bw_means = [r["bcd_mean"] for r in bw]
    fs = run_sweep(cfg, "f_s", ["2.5e9", "5e9", "7.5e9", "10e9", "12.5e9"], reps=20, seed=0)
    fs_means = [r["bcd_mean"] for r in fs]
    ok_ii = all(b <= a for a, b in zip(bw_means, bw_means[1:])) and \
        all(b <= a for a, b in zip(fs_means, fs_means[1:]))

    nd = run_sweep(cfg, "n_devices", ["5", "10", "15"], reps=20, seed=0)
    epsl = [r["epsl_to_target_mean"] for r in nd]
    van = [r["vanilla_sl_to_target_mean"] for r in nd]
    ok_iii = epsl[0] > epsl[1] > epsl[2] and van[0] < van[1] < van[2]
    detail = (f"(i) means EPSL1/EPSL.5/PSL/SFL = {'/'.join(f'{v:.3f}' for v in vals)}; "
              f"(ii) bandwidth {'ok' if ok_ii else 'violated'}; "
              f"(iii) EPSL {'/'.join(f'{v:.1f}' for v in epsl)}, "
              f"vanilla {'/'.join(f'{v:.0f}' for v in van)}; 20-seed means")
    record(7, ok_i and ok_ii and ok_iii, detail, t0)


# --- 8 -----------------------------------------------------------------------------

def _toy_accuracy(framework, seed, epochs=10, C=5, batch=16, lr=0.05):
    X, y, Xt, yt = make_dataset(4000, 1000, 10, 1.0, seed=[seed, 4])
    shards = split_shards(X, y, C, seed=[seed, 5])
    net = SplitNet.create([10, 16, 8, 16, 2], ["relu", "relu", "relu", "identity"], 2, C,
                          seed=[seed, 6])
    cfg = TrainConfig(phi=Fraction(1, 2), eta_c=lr, eta_s=lr, switch_epoch=1)
    for e in range(epochs):
        for batches in epoch_batches(shards, batch, seed, e):
            train_round(framework, net, batches, cfg, e)
    return evaluate_all(net, Xt, yt)[0]


def test_criterion_8_toy_learning():
    t0 = time.perf_counter()
    gaps_epsl, gaps_pt, accs = [], [], []
    for seed in range(4):
        psl = _toy_accuracy("psl", seed)
        epsl = _toy_accuracy("epsl", seed)
        pt = _toy_accuracy("epsl_pt", seed)
        accs.append(psl)
        gaps_epsl.append(abs(epsl - psl) * 100)
        gaps_pt.append(abs(pt - psl) * 100)
    ok = max(gaps_epsl) <= 2 and max(gaps_pt) <= 1
    record(8, ok, f"PSL acc {np.mean(accs):.3f}; max gap EPSL(0.5) {max(gaps_epsl):.2f}pp (<=2), "
                  f"EPSL-PT {max(gaps_pt):.2f}pp (<=1) over 4 seeds", t0)


# --- 9 -----------------------------------------------------------------------------

def test_criterion_9_reproducibility(tmp_path):
    t0 = time.perf_counter()
    cfg = tmp_path / "scenario.cfg"
    cfg.write_text("n_devices = 5\nn_subchannels = 20\ndataset_size = 640\n"
                   "toy_test_size = 100\nbatch_size = 32\neta_c = 0.05\neta_s = 0.05\n")
    commands = [
        ["optimize", str(cfg), "--seed", "5"],
        ["train", str(cfg), "--seed", "5", "--epochs", "2"],
        ["sweep", str(cfg), "--seed", "5", "--axis", "phi", "--values", "0,1/2,1", "--reps", "2"],
    ]
    same = 0
    for k, cmd in enumerate(commands):
        outs = []
        for rep in range(2):
            path = tmp_path / f"{k}-{rep}.csv"
            assert cli_main(cmd + ["--out", str(path)]) == 0
            outs.append(path.read_bytes())
        same += outs[0] == outs[1] and len(outs[0]) > 0
    record(9, same == 3, f"byte-identical regenerations {same}/3", t0)


if __name__ == "__main__":
    import tempfile

    for name, fn in sorted(globals().items()):
        if name.startswith("test_criterion_"):
            try:
                if "tmp_path" in fn.__code__.co_varnames[:fn.__code__.co_argcount]:
                    with tempfile.TemporaryDirectory() as d:
                        fn(Path(d))
                else:
                    fn()
            except AssertionError:
                pass
