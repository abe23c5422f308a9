"""Acceptance suite: one PASS/FAIL line per criterion in the terminal summary.

Run alone with ``pytest tests/test_acceptance.py -v``; the desk-scale training
shared by criteria 4-8 takes several minutes on one CPU core. Figures and CSV
tables are written to ``$MDIQA_ACCEPTANCE_OUT`` (a temp dir by default).
"""
import json
import os
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest
import torch

from conftest import record, tiny_model_cfg
from oracles import brute_pearson, brute_spearman, grad_rel_error, param_grad_rel_error
from mdiqa.aggregate import MDIQA, MLP3, WeightBranch, forward_full, freeze, fusion_input
from mdiqa.backbone import GLP
from mdiqa.cli import load_dataset, train_val_split
from mdiqa.config import desk_scale, full_scale
from mdiqa.data import stack_samples
from mdiqa.heads import CSAM, DimensionRegressor, SemanticInjection
from mdiqa.losses import fr_loss, nin_loss, nr_loss
from mdiqa.metrics import plcc, srcc
from mdiqa.plotting import plot_loss_curve, plot_sweep
from mdiqa.restore import ToyRestorer, run_from_config, sweep_ratio, train_restorer, write_sweep_csv
from mdiqa.train import (checkpoint_bytes, group_hashes, load_checkpoint, predictor,
                         save_checkpoint, train_stage1, train_stage2)
from mdiqa.registry import TECHNICAL

# tolerances and budgets
ORACLE_TOL = 1e-9
NIN_TOL = 1e-6
GRAD_TOL = 1e-4
E2E_TOL = 1e-3
LINEAR_TOL = 1e-9
DIM_SRCC_MIN = 0.85
OVERALL_SRCC_MIN = 0.90
TRAIN_BUDGET_S = 30 * 60
SWEEP_BUDGET_S = 20 * 60
METRIC_BUDGET_S = 10
GRAD_BUDGET_S = 120
SHARP_GRID = (1.0, 2.0, 4.0)
NOISE_GRID = (1.0, 1.5)


@pytest.fixture(scope="session")
def out_dir(tmp_path_factory):
    d = os.environ.get("MDIQA_ACCEPTANCE_OUT")
    p = Path(d) if d else tmp_path_factory.mktemp("acceptance")
    p.mkdir(parents=True, exist_ok=True)
    return p


@pytest.fixture(scope="session")
def desk(out_dir):
    """Stage 1 + stage 2 on 1,000 synthetic 96x96 samples, 80/20 split, fixed seeds."""
    cfg = desk_scale()
    reg = cfg.model.registry()
    t0 = time.perf_counter()
    arrays = stack_samples(load_dataset(cfg, reg), reg)
    train, val = train_val_split(cfg, arrays)
    ck1 = train_stage1(train, cfg)
    ck2 = train_stage2(train, ck1, cfg)
    elapsed = time.perf_counter() - t0
    save_checkpoint(ck1, out_dir / "stage1.ckpt")
    save_checkpoint(ck2, out_dir / "stage2.ckpt")
    plot_loss_curve(ck1.history, out_dir / "stage1_loss.png", "stage 1 loss")
    plot_loss_curve(ck2.history, out_dir / "stage2_loss.png", "stage 2 loss")
    return dict(cfg=cfg, train=train, val=val, ck1=ck1, ck2=ck2, seconds=elapsed, n=len(arrays[0]))


@pytest.fixture(scope="session")
def critic(desk):
    return freeze(desk["ck2"].build_model())


# --- 1 ------------------------------------------------------------------------------------------

def test_criterion_1_metric_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(1)
    worst = 0.0
    for _ in range(200):
        n = int(rng.integers(3, 51))
        # small integer support forces ties
        p = rng.integers(0, max(2, n // 3), size=n).astype(float) + rng.choice([0, 0.5], size=n)
        y = rng.normal(size=n).round(1)
        if np.ptp(p) == 0 or np.ptp(y) == 0:
            continue
        worst = max(worst, abs(srcc(p, y) - brute_spearman(p, y)), abs(plcc(p, y) - brute_pearson(p, y)))
    inv = 0.0
    for _ in range(100):
        n = int(rng.integers(3, 51))
        p, y = rng.normal(size=n), rng.normal(size=n)
        a, b = float(rng.uniform(0.1, 10)), float(rng.normal())
        inv = max(inv, abs(srcc(np.exp(p) + np.tanh(p), y) - srcc(p, y)),
                  abs(plcc(a * p + b, y) - plcc(p, y)))
    secs = time.perf_counter() - t0
    ok = worst < ORACLE_TOL and inv < ORACLE_TOL and secs < METRIC_BUDGET_S
    record(1, ok, f"max oracle diff {worst:.2e}, max invariance diff {inv:.2e} "
                  f"(tol {ORACLE_TOL:g}), {secs:.1f}s")
    assert ok


# --- 2 ------------------------------------------------------------------------------------------

def test_criterion_2_nin_invariance():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(100):
        n = int(rng.integers(2, 33))
        p = torch.tensor(rng.normal(size=n), dtype=torch.float64)
        y = torch.tensor(rng.normal(size=n), dtype=torch.float64)
        c, d = float(np.exp(rng.uniform(-4, 4))), float(rng.normal(scale=10))
        worst = max(worst, abs(float(nin_loss(c * p + d, y)) - float(nin_loss(p, y))))
    ok = worst < NIN_TOL
    record(2, ok, f"max |diff| {worst:.2e} over 100 cases (tol {NIN_TOL:g})")
    assert ok


# --- 3 ------------------------------------------------------------------------------------------

def _r64(*shape, seed=0):
    return torch.rand(*shape, generator=torch.Generator().manual_seed(seed), dtype=torch.float64)


def test_criterion_3_gradient_checks():
    t0 = time.perf_counter()
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    errs = {}
    try:
        torch.manual_seed(0)
        glp = GLP(3)
        x = _r64(1, 3, 6, 6)
        errs["GLP"] = max(grad_rel_error(lambda t: (glp(t, (2, 2)) ** 2).sum(), x),
                          param_grad_rel_error(lambda: (glp(x, (2, 2)) ** 2).sum(), glp))
        csam = CSAM((2, 3, 2), 3)
        lv = [_r64(1, c, 2, 2, seed=i) for i, c in enumerate((2, 3, 2))]
        errs["CSAM"] = max(grad_rel_error(lambda t: (csam([t, lv[1], lv[2]]) ** 2).sum(), lv[0]),
                           param_grad_rel_error(lambda: (csam(lv) ** 2).sum(), csam))
        inj = SemanticInjection(3, 2)
        torch.nn.init.normal_(inj.mlp[-1].weight, std=0.5)
        f, s = _r64(1, 3, 2, 2), _r64(1, 2, seed=1)
        errs["injection"] = max(grad_rel_error(lambda t: (inj(t, s) ** 2).sum(), f),
                                grad_rel_error(lambda t: (inj(f, t) ** 2).sum(), s),
                                param_grad_rel_error(lambda: (inj(f, s) ** 2).sum(), inj))
        reg = DimensionRegressor(3, 4)
        r = _r64(2, 3, 2, 2)
        errs["regressor"] = max(grad_rel_error(lambda t: (reg(t)[0] ** 2).sum(), r),
                                param_grad_rel_error(lambda: (reg(r)[0] ** 2).sum(), reg))
        wb = WeightBranch(3, 2)
        torch.nn.init.normal_(wb.fc.weight, std=0.5)
        xi = _r64(1, 3, 16, 16)
        errs["weight branch"] = max(grad_rel_error(lambda t: (wb(t) ** 2).sum(), xi),
                                    param_grad_rel_error(lambda: (wb(xi) ** 2).sum(), wb))
        mlp = MLP3(3, 4)
        sc, w = _r64(2, 3), _r64(2, 3, seed=2) + 0.5
        errs["fusion"] = max(grad_rel_error(lambda t: (mlp(fusion_input(t, None, w)) ** 2).sum(), sc),
                             grad_rel_error(lambda t: (mlp(fusion_input(sc, None, t)) ** 2).sum(), w),
                             param_grad_rel_error(lambda: (mlp(fusion_input(sc, None, w)) ** 2).sum(), mlp))
        m = MDIQA(tiny_model_cfg(backbone_widths=(2, 3, 4), stem_width=2, head_width=2,
                                 feature_width=2, semantic_width=2))
        m.inject = True
        for h in m.heads.values():
            torch.nn.init.normal_(h.injection.mlp[-1].weight, std=0.3)
        m.eval()
        img = _r64(1, 3, 32, 32, seed=5)
        xa = img.clone().requires_grad_(True)
        (ga,) = torch.autograd.grad(m(xa).overall.sum(), xa)
        idx = np.random.default_rng(0).choice(img.numel(), size=60, replace=False)
        num, ana = [], []
        with torch.no_grad():
            for j in idx:
                xp, xm = img.clone(), img.clone()
                xp.view(-1)[j] += 1e-6
                xm.view(-1)[j] -= 1e-6
                num.append((float(m(xp).overall) - float(m(xm).overall)) / 2e-6)
                ana.append(float(ga.view(-1)[j]))
        e2e = float(np.linalg.norm(np.subtract(num, ana)) / np.linalg.norm(num))
    finally:
        torch.set_default_dtype(old)
    secs = time.perf_counter() - t0
    ok = max(errs.values()) < GRAD_TOL and e2e < E2E_TOL and secs < GRAD_BUDGET_S
    record(3, ok, ", ".join(f"{k} {v:.1e}" for k, v in errs.items())
           + f" (tol {GRAD_TOL:g}); end-to-end {e2e:.1e} (tol {E2E_TOL:g}); {secs:.1f}s")
    assert ok


# --- 4 ------------------------------------------------------------------------------------------

def test_criterion_4_restoration_loss_contracts(critic, desk):
    x = torch.from_numpy(desk["val"][0][:2])
    h = torch.from_numpy(desk["val"][0][2:4])
    with torch.no_grad():
        neg = -critic(x).overall.mean()
    nr_exact = bool(torch.equal(nr_loss(x, critic), neg))
    fr_zero = float(fr_loss(x, x.clone(), critic)) == 0.0
    _, t1 = fr_loss(x, h, critic, return_terms=True)
    lin = 0.0
    for j, name in enumerate(critic.names):
        _, t2 = fr_loss(x, h, critic, {name: 2.0}, return_terms=True)
        lin = max(lin, abs(float(t2[j]) - 2 * float(t1[j])))
    before = checkpoint_bytes(desk["ck2"])
    hash0 = group_hashes(critic)
    net = ToyRestorer(8, 8)
    opt = torch.optim.Adam(net.parameters(), lr=1e-3)
    out = net(x)
    loss = (out - h).abs().mean() + nr_loss(out, critic) + 5.0 * fr_loss(out, h, critic)
    opt.zero_grad()
    loss.backward()
    opt.step()
    frozen = group_hashes(critic) == hash0 and checkpoint_bytes(desk["ck2"]) == before
    ok = nr_exact and fr_zero and lin < LINEAR_TOL and frozen
    record(4, ok, f"nr == -mean(overall) exactly: {nr_exact}; fr(R=H)==0: {fr_zero}; "
                  f"max |term(2l)-2 term(l)| {lin:.1e} (tol {LINEAR_TOL:g}); critic bit-identical: {frozen}")
    assert ok


# --- 5 ------------------------------------------------------------------------------------------

def test_criterion_5_two_stage_contract(desk, out_dir):
    h1, h2 = group_hashes(desk["ck1"].build_model()), group_hashes(desk["ck2"].build_model())
    frozen = all(h1[g] == h2[g] for g in ("backbone.technical", "backbone.aesthetic", "heads.csam"))
    cfg = replace(desk["cfg"].model, use_weight_branch=False)
    m = MDIQA(cfg)
    m.load_state_dict(desk["ck2"].params)
    x = torch.from_numpy(desk["val"][0][:4])
    a = forward_full(m, x)
    with torch.no_grad():
        b = m(x, weights=torch.ones(len(x), len(m.names)))
    ablation = bool(torch.equal(a.weights, torch.ones_like(a.weights))) and bool(torch.equal(a.overall, b.overall))
    p1, p2 = out_dir / "rt_a.ckpt", out_dir / "rt_b.ckpt"
    save_checkpoint(desk["ck2"], p1)
    save_checkpoint(load_checkpoint(p1), p2)
    roundtrip = p1.read_bytes() == p2.read_bytes()
    ok = frozen and ablation and roundtrip
    record(5, ok, f"backbone+CSAM bytes unchanged by stage 2: {frozen}; "
                  f"no-weight-branch == w=1 bit-exact: {ablation}; checkpoint round-trip identical: {roundtrip}")
    assert ok


# --- 6 ------------------------------------------------------------------------------------------

def test_criterion_6_desk_learning(desk, out_dir):
    x, y, m, o, om = desk["val"]
    ds1, _ = predictor(desk["ck1"].build_model())(x)
    names = desk["cfg"].model.registry().names
    per_dim = {n: srcc(ds1[:, names.index(n)], y[:, names.index(n)]) for n in TECHNICAL}
    _, ov = predictor(desk["ck2"].build_model())(x)
    overall = srcc(ov, o)
    (out_dir / "desk_metrics.json").write_text(json.dumps(
        {"stage1_technical_srcc": per_dim, "stage2_overall_srcc": overall,
         "seconds": desk["seconds"]}, indent=2, sort_keys=True))
    ok = (desk["n"] == 1000 and min(per_dim.values()) >= DIM_SRCC_MIN
          and overall >= OVERALL_SRCC_MIN and desk["seconds"] <= TRAIN_BUDGET_S)
    record(6, ok, "stage-1 SRCC " + ", ".join(f"{k} {v:.3f}" for k, v in per_dim.items())
           + f" (min {DIM_SRCC_MIN}); stage-2 overall SRCC {overall:.3f} (min {OVERALL_SRCC_MIN}); "
           f"{len(x)} held-out of {desk['n']}; {desk['seconds'] / 60:.1f} min")
    assert ok


# --- 7 ------------------------------------------------------------------------------------------

def _sweep(desk, critic, out_dir, dim, grid):
    base = run_from_config(desk["cfg"], "nr")
    t0 = time.perf_counter()
    rows = sweep_ratio(base, dim, grid, critic)
    secs = time.perf_counter() - t0
    write_sweep_csv(rows, out_dir / f"sweep_{dim}.csv")
    plot_sweep(rows, out_dir / f"sweep_{dim}.png")
    return rows, secs


def test_criterion_7_sharpness_trend(desk, critic, out_dir):
    rows, secs = _sweep(desk, critic, out_dir, "sharpness", SHARP_GRID)
    vals = [r["sharpness_proxy"] for r in rows]
    ok = all(b >= a for a, b in zip(vals, vals[1:])) and secs <= SWEEP_BUDGET_S
    record(7, ok, "NR sharpness sweep " + ", ".join(f"l={r:g}: {v:.5f}" for r, v in zip(SHARP_GRID, vals))
           + f" non-decreasing: {ok}; {secs:.0f}s")
    assert ok


def test_criterion_7_noisiness_trend(desk, critic, out_dir):
    rows, secs = _sweep(desk, critic, out_dir, "noisiness", NOISE_GRID)
    vals = [r["noisiness_proxy"] for r in rows]
    ok = all(b <= a for a, b in zip(vals, vals[1:])) and secs <= SWEEP_BUDGET_S
    record(7, ok, "NR noisiness sweep " + ", ".join(f"l={r:g}: {v:.7f}" for r, v in zip(NOISE_GRID, vals))
           + f" non-increasing: {ok}; {secs:.0f}s")
    assert ok


# --- 8 ------------------------------------------------------------------------------------------

def test_criterion_8_fr_improves_over_l1(desk, critic, out_dir):
    cfg = desk["cfg"]
    org = train_restorer(run_from_config(cfg, "org"), critic)
    fr_run = run_from_config(cfg, "fr")
    fr = train_restorer(fr_run, critic)
    (out_dir / "restore_fr_vs_org.json").write_text(json.dumps(
        {"org": org.metrics, "fr": fr.metrics}, indent=2, sort_keys=True))
    ok = fr_run.lambda_fr == 5.0 and fr.metrics["overall"] > org.metrics["overall"]
    record(8, ok, f"critic overall on held-out pairs: L1 only {org.metrics['overall']:.4f}, "
                  f"L1 + 5.0 L_FR {fr.metrics['overall']:.4f}")
    assert ok


# --- 9 ------------------------------------------------------------------------------------------

def test_criterion_9_full_scale_golden():
    golden = json.loads((Path(__file__).parent / "golden" / "full_scale_plan.json").read_text())
    got = full_scale().to_dict()
    bad = [f"{s}.{k}" for s, kv in golden.items() for k, v in kv.items() if got[s][k] != v]
    ok = not bad
    record(9, ok, "full-scale plan matches golden file" if ok else f"mismatched: {bad}")
    assert ok


if __name__ == "__main__":
    raise SystemExit(pytest.main([__file__, "-v"]))
