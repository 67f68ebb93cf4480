"""Acceptance suite: one PASS/FAIL line per criterion, printed in the terminal summary.

Tolerances are fixed here and never tuned after seeing results. Criteria 7
and 8 load checkpoints from ``acceptance/`` (produced by the ``hauction`` CLI
with the configs stored next to them) and train them through the CLI when
they are missing, which takes hours on one core.
"""
import hashlib
from pathlib import Path

import numpy as np
import pytest

from hybridauction.autodiff import grad_check
from hybridauction.cli import main as cli_main
from hybridauction.config import load_config
from hybridauction.data import PopulationSpec, generate, ingest_log, setting_from_preset, write_log
from hybridauction.metrics import (EvalConfig, EvalReport, LearnedMechanism, VcgMechanism, empirical_revenue,
                                   empirical_welfare, format_table, ru_ratio, test_regret)
from hybridauction.model import AuctionInstance, AuctionSamples, AuctionSetting, BidProfile
from hybridauction.network import MASK_FILL, HybridRegretNet, NetworkParams, assemble_z, c_cap_layer, \
    min_softmax_layer
from hybridauction.training import load_checkpoint
from hybridauction.vcg import vcg_mechanism, welfare_max_allocation

from oracles import brute_force_clarke, brute_force_welfare, per_agent_welfare

RESULTS = []  # (criterion, passed, detail), read by conftest
NOTES = []  # extra tables shown after the criteria lines
ROOT = Path(__file__).resolve().parents[1]
ACCEPT_DIR = ROOT / "acceptance"

# pinned tolerances
LAYER_TOL = 1e-9
MASK_TOL = 1e-6
GRAD_TOL = 1e-4
VCG_PAY_TOL = 1e-12
DSIC_TOL = 1e-9
TABLE_TOL = 0.05
REGRET_BOUND = 1e-3
RU_BOUND = 0.065
# reduced regret protocol for criteria 7 and 8 (see the decision log)
ACCEPT_EVAL = EvalConfig(restarts=5, ascent_steps=100, ascent_lr=0.05, seed=0, chunk=512)
ACCEPT_REGRET_SAMPLES = 4000

# VCG rows of the published results table (rev, sw) keyed by (setting, C)
TABLE_VCG = {("A", 1): (0.196, 0.558), ("B", 1): (0.496, 1.001), ("B", 2): (0.560, 1.169),
             ("B", 3): (0.537, 1.223)}
DENSITIES = (0.3, 0.35, 0.5, 0.8)


def record(criterion, passed, detail):
    RESULTS.append((criterion, bool(passed), detail))
    assert passed, f"criterion {criterion}: {detail}"


# 1 ---------------------------------------------------------------------------
def test_c1_constraint_layers():
    rng = np.random.default_rng(101)
    worst_row = worst_col = worst_cap = worst_mass = worst_mask = 0.0
    n_triples = 0
    while n_triples < 10_000:
        B = 100
        R, m, K = (int(x) for x in (rng.integers(1, 13), rng.integers(1, 5), rng.integers(1, 6)))
        C = int(rng.integers(0, K + 1))
        scale = 10 ** rng.uniform(-1, 1.5)
        S1 = rng.normal(scale=scale, size=(B, R + m, K + 1))
        S2 = rng.normal(scale=scale, size=(B, R + m, K + 1))
        H = rng.normal(scale=scale, size=(B, R, K))
        keep = rng.random((B, R, 1)) < rng.uniform(0.1, 1.0)
        S1[:, :R] = np.where(keep, S1[:, :R], MASK_FILL)
        H = np.where(keep, H, MASK_FILL)
        S3 = min_softmax_layer(S1, S2)
        Hc = c_cap_layer(H, C)
        Z = assemble_z(S3, Hc)
        worst_row = max(worst_row, S3.sum(axis=2).max() - 1)
        worst_col = max(worst_col, S3.sum(axis=1).max() - 1)
        worst_cap = max(worst_cap, np.abs(Hc.sum(axis=(1, 2)) - C).max())
        worst_mass = max(worst_mass, (Z[:, :R].sum(axis=(1, 2)) - C).max())
        masked = np.broadcast_to(~keep, (B, R, K))
        if masked.any():
            worst_mask = max(worst_mask, Z[:, :R][masked].max())
        n_triples += B
    ok = (worst_row <= LAYER_TOL and worst_col <= LAYER_TOL and worst_cap <= LAYER_TOL
          and worst_mass <= LAYER_TOL and worst_mask < MASK_TOL)
    record(1, ok, f"{n_triples} triples; row excess {worst_row:.1e}, col excess {worst_col:.1e}, "
                  f"cap error {worst_cap:.1e}, bundle-mass excess {worst_mass:.1e}, masked max {worst_mask:.1e}")


# 2 ---------------------------------------------------------------------------
def test_c2_gradient_check():
    rng = np.random.default_rng(202)
    failures, worst, excluded, checked = [], 0.0, 0, 0
    for gi in range(100):
        preset = "A" if gi % 2 == 0 else "B"
        K = setting_from_preset(preset, 0).K
        s = setting_from_preset(preset, int(rng.integers(0, K + 1)))
        net = HybridRegretNet(s, hidden=(6, 5), store_hidden=(4,))
        p = net.init_params(rng)
        p = NetworkParams({k: v + rng.normal(scale=1 / np.sqrt(v.shape[0]), size=v.shape) for k, v in p.items()})
        samples = generate(PopulationSpec(preset, s.C), 2, seed=gi)
        bind = net.bindings(p, samples.values, samples.alphas, samples.adjacency)
        wrt = [net.nodes["bids"]] + list(net.nodes["params"].values())
        seed = rng.normal(size=(2, s.n_agents, 1))
        rep = grad_check(net.graph, bind, net.nodes["util"], wrt, h=1e-6, tol=GRAD_TOL, seed=seed,
                         max_coords=6, rng=rng)
        worst = max(worst, rep.worst)
        excluded += sum(b.n_excluded for b in rep.blocks)
        checked += sum(b.n_checked for b in rep.blocks)
        if not rep.passed:
            failures.append(gi)
    record(2, not failures, f"100 graphs, {checked} coordinates, worst relative error {worst:.1e}, "
                            f"{excluded} kink coordinates excluded, failing graphs {failures}")


# 3 ---------------------------------------------------------------------------
def small_instance(rng):
    m, n = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    K = int(rng.integers(1, 4))
    C = int(rng.integers(0, K + 1))
    theta = np.sort(rng.uniform(0.05, 0.95, K))[::-1]
    alphas = rng.uniform(0.5, 1.5, m)
    adj = (rng.random((m, n)) < rng.uniform(0.2, 1.0)).astype(int)
    bids = rng.random(m + n)
    return AuctionSetting(m, n, K, C, tuple(theta)), AuctionInstance(alphas, adj), bids


def test_c3_vcg_exactness():
    rng = np.random.default_rng(303)
    mismatched, pay_err, welfare_err = 0, 0.0, 0.0
    for _ in range(500):
        s, inst, bids = small_instance(rng)
        b = BidProfile.from_vector(bids, s.m)
        assignment, w = welfare_max_allocation(s, inst, b)
        w_ref, cands, _ = brute_force_welfare(s.m, s.n, s.K, s.C, s.theta, inst.alphas, inst.adjacency, bids)
        assert len(cands) <= 12
        # greedy's assignment scored by the oracle's own welfare routine must hit the optimum exactly
        keys = [(c[0], c[1], c[2]) for c in cands]
        perm = [keys.index(("solo" if c.kind == 0 else "bundle", c.store, c.brand)) for c in assignment
                if c is not None]
        w_greedy = per_agent_welfare(s.m, s.n, inst.alphas, bids, cands, perm, s.theta).sum()
        mismatched += w_greedy != max(w_ref, 0.0)
        welfare_err = max(welfare_err, abs(w - w_ref))
        out = vcg_mechanism(s, inst, b)
        _, pay_ref = brute_force_clarke(s.m, s.n, s.K, s.C, s.theta, inst.alphas, inst.adjacency, bids)
        pay_err = max(pay_err, np.abs(out.payments - pay_ref).max())
    record(3, mismatched == 0 and pay_err <= VCG_PAY_TOL,
           f"500 instances; {mismatched} non-optimal greedy welfares, reported-welfare rounding "
           f"{welfare_err:.1e}, max Clarke payment error {pay_err:.1e}")


# 4 ---------------------------------------------------------------------------
def test_c4_vcg_incentives():
    rng = np.random.default_rng(404)
    grid = np.linspace(0, 1, 21)
    worst_gain, worst_ir = -np.inf, np.inf
    for _ in range(200):
        s, inst, vals = small_instance(rng)
        truth = vcg_mechanism(s, inst, BidProfile.from_vector(vals, s.m))
        u_truth = vals * (truth.allocation @ s.theta_array) - truth.payments
        worst_ir = min(worst_ir, u_truth.min())
        for a in range(s.n_agents):
            for x in grid:
                dev = vcg_mechanism(s, inst, BidProfile.from_vector(vals, s.m).replace(a, x))
                u = vals[a] * (dev.allocation[a] @ s.theta_array) - dev.payments[a]
                worst_gain = max(worst_gain, u - u_truth[a])
    record(4, worst_gain <= DSIC_TOL and worst_ir >= 0,
           f"200 instances x 21-point grid; max deviation gain {worst_gain:.1e}, min truthful utility {worst_ir:.1e}")


# 5 ---------------------------------------------------------------------------
def _vcg_rev_sw(preset, C, density, n=12_800):
    samples = generate(PopulationSpec(preset, C, density=density), n, seed=0, split=1)
    out = VcgMechanism().outcome(samples)
    return empirical_revenue(out), empirical_welfare(out, samples.values, samples.setting.theta)


def test_c5_vcg_table_reproduction():
    sens = {d: {(p, C): _vcg_rev_sw(p, C, d) for (p, C) in TABLE_VCG} for d in DENSITIES}
    lines = ["density  " + "  ".join(f"{p}/C={C} rev sw (table {r:.3f} {w:.3f})" for (p, C), (r, w)
                                     in TABLE_VCG.items())]
    for d in DENSITIES:
        lines.append(f"{d:<8} " + "  ".join(f"{sens[d][k][0]:.3f} {sens[d][k][1]:.3f}".ljust(33)
                                            for k in TABLE_VCG))
    NOTES.append("VCG rev/sw by adjacency density (12,800 test samples)\n" + "\n".join(lines))
    at = sens[0.5]
    sw_b = [at[("B", C)][1] for C in (1, 2, 3)]
    monotone = sw_b[0] < sw_b[1] < sw_b[2]
    dev = {k: max(abs(at[k][0] - TABLE_VCG[k][0]), abs(at[k][1] - TABLE_VCG[k][1])) for k in TABLE_VCG}
    within = all(v <= TABLE_TOL for v in dev.values())
    worst = max(dev, key=dev.get)
    best_d = min(DENSITIES, key=lambda d: max(max(abs(sens[d][k][0] - TABLE_VCG[k][0]),
                                                  abs(sens[d][k][1] - TABLE_VCG[k][1])) for k in TABLE_VCG))
    record(5, monotone and within,
           f"B welfare by C {', '.join(f'{w:.3f}' for w in sw_b)} ({'monotone' if monotone else 'NOT monotone'}); "
           f"density 0.5 worst cell {worst[0]}/C={worst[1]} off by {dev[worst]:.3f} (tol {TABLE_TOL}); "
           f"closest density {best_d}")


# 6 ---------------------------------------------------------------------------
def test_c6_learned_feasibility_ir():
    rng = np.random.default_rng(606)
    bad = []
    worst_ir = np.inf
    n_out = 0
    for trial in range(200):
        preset = "ABCD"[trial % 4]
        K = setting_from_preset(preset, 0).K
        s = setting_from_preset(preset, int(rng.integers(0, K + 1)))
        net = HybridRegretNet(s, hidden=(12,), store_hidden=(5,))
        p = net.init_params(rng)
        scale = 10 ** rng.uniform(-1, 1.5)
        p = NetworkParams({k: v + rng.normal(scale=scale / np.sqrt(v.shape[0]), size=v.shape) for k, v in p.items()})
        samples = generate(PopulationSpec(preset, s.C, density=float(rng.uniform(0.05, 1))), 32, seed=trial)
        bids = samples.values * rng.uniform(0, 1, samples.values.shape)
        res = net.forward(p, bids, samples.alphas, samples.adjacency, values=samples.values)
        z, R = res.z, s.max_bundles
        adj = samples.adjacency.reshape(len(samples), R)
        g = res.outcome.expected_ctr(s.theta)
        ok = ((z >= 0).all() and (z.sum(axis=1) <= 1 + LAYER_TOL).all() and (z.sum(axis=2) <= 1 + LAYER_TOL).all()
              and (z[:, :R].sum(axis=(1, 2)) <= s.C + LAYER_TOL).all() and (z[:, :R][adj == 0] == 0).all()
              and (res.outcome.payments >= 0).all() and (res.outcome.payments <= bids * g + 1e-12).all())
        worst_ir = min(worst_ir, (bids * g - res.outcome.payments).min())
        n_out += len(samples)
        if not ok:
            bad.append(trial)
    record(6, not bad, f"{n_out} outcomes from 200 random parameter draws over settings A-D; "
                       f"infeasible or non-IR draws {bad}; min bid-utility {worst_ir:.1e}")


# 7, 8 ------------------------------------------------------------------------
def _trained(name):
    cfg_path = ACCEPT_DIR / f"{name}.toml"
    out = ACCEPT_DIR / name
    cfg = load_config(cfg_path)
    ck = out / "train" / f"{cfg.population.setting}_C{cfg.C}" / "checkpoint.npz"
    if not ck.exists():
        # hours on a single core; normally the checked-in checkpoint is used
        assert cli_main(["gen", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0
        assert cli_main(["train", "--config", str(cfg_path), "--out", str(out), "--force"]) == 0
    state, header = load_checkpoint(ck)
    assert header["train_config"] == cfg.train.to_dict(), "checkpoint was trained under a different config"
    assert header["data_hash"] == cfg.hash("data"), "checkpoint was trained on different data"
    assert state.iteration == cfg.train.iterations
    return cfg, state


def _dominance(criterion, name):
    cfg, state = _trained(name)
    test = generate(cfg.population, cfg.test_samples, cfg.seed, split=1)
    net = HybridRegretNet(test.setting, cfg.train.hidden, cfg.train.store_hidden)
    mech = LearnedMechanism(net, state.params)
    rev = empirical_revenue(mech.outcome(test))
    rev_vcg = empirical_revenue(VcgMechanism(cfg.pivot).outcome(test))
    rgt = test_regret(mech, test.subset(np.arange(ACCEPT_REGRET_SAMPLES)), ACCEPT_EVAL)
    ok = rgt.average < REGRET_BOUND and rev > rev_vcg
    record(criterion, ok,
           f"{cfg.population.setting} C={cfg.C} {cfg.population.value_law}, {cfg.train.iterations} iterations: "
           f"rgt {rgt.average:.5f} (bound {REGRET_BOUND}; per agent "
           f"{', '.join(f'{x:.4f}' for x in rgt.per_agent)}), rev {rev:.4f} vs VCG {rev_vcg:.4f}")


@pytest.mark.slow
def test_c7_training_setting_a():
    _dominance(7, "setting_a")


@pytest.mark.slow
def test_c8_training_setting_b_normal():
    _dominance(8, "setting_b_normal")


# 9 ---------------------------------------------------------------------------
TINY = """
setting = "B"
C = 2
value_law = "lognormal"
train_samples = 200
test_samples = 30
iterations = 6
batch_size = 8
ascent_steps = 2
hidden = [6]
store_hidden = [3]
checkpoint_every = 3
log_every = 2
eval_restarts = 2
eval_steps = 3
vcg_regret_samples = 4
"""


def _digest(root):
    return {p.relative_to(root).as_posix(): hashlib.sha256(p.read_bytes()).hexdigest()
            for p in sorted(root.rglob("*")) if p.is_file()}


def test_c9_determinism(tmp_path):
    cfg = tmp_path / "tiny.toml"
    cfg.write_text(TINY)
    digests, codes = [], []
    for run in ("one", "two"):
        out = tmp_path / run
        for cmd in (["gen"], ["train"], ["eval"], ["vcg", "--regret"], ["report"]):
            codes.append(cli_main(cmd + ["--config", str(cfg), "--out", str(out)]))
        digests.append(_digest(out))
    same = digests[0] == digests[1]
    record(9, same and not any(codes),
           f"{len(digests[0])} artifacts from gen/train/eval/vcg/report, byte-identical across runs: {same}; "
           f"exit codes {sorted(set(codes))}")


# log ingestion and the ru flag --------------------------------------------------
def test_log_ingestion_and_ru_flag(tmp_path):
    big = AuctionSetting(10, 10, 5, 2, (0.5, 0.3, 0.2, 0.1, 0.05))
    rng = np.random.default_rng(7)
    L = 50
    vals = np.sort(rng.random((L, 20)), axis=1)[:, ::-1].copy()
    alphas = rng.uniform(0.5, 1.5, (L, 10))
    adj = (rng.random((L, 10, 10)) < 0.3).astype(np.int8)
    # value_max recorded on ingestion is the largest bid
    src = AuctionSamples(big, vals, alphas, adj, value_max=float(vals.max()))
    write_log(tmp_path / "log.csv", src)
    back = ingest_log(tmp_path / "log.csv", C=2)
    roundtrip = (np.array_equal(back.values, src.values) and np.array_equal(back.alphas, src.alphas)
                 and np.array_equal(back.adjacency, src.adjacency))
    out = VcgMechanism().outcome(back)
    utils = back.values * out.expected_ctr(big.theta) - out.payments
    ru = ru_ratio(np.zeros_like(utils), utils)
    flags = tuple(EvalReport("x", 2, 1, 0.1, 0.2, 0.0, r).ru_flag for r in (RU_BOUND - 1e-3, RU_BOUND))
    ok = roundtrip and ru.ru == 0 and flags == (False, True) and "ru>=0.065" in format_table(
        [EvalReport("x", 2, 1, 0.1, 0.2, 0.0, 0.07)])
    record("log", ok, f"{L} auctions written and re-ingested identically: {roundtrip}; VCG ru {ru.ru}; "
                      f"flag just below and at {RU_BOUND}: {flags}")
