"""Acceptance gate. Each test prints one PASS/FAIL line in the terminal summary.

Ablation ordering needs hours of CPU; it reads results from ``GGB_ABLATION_DIR``
(the output directory of ``ggb ablate``) or trains the grid when
``GGB_RUN_ABLATION=1``, and is skipped otherwise.
"""
import csv
import math
import os
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, tiny_config
from ggb.training import TrainConfig, train_loop
from ggb.verify import (COMPOSITE_TOL, PRIMITIVE_TOL, check_loss_gradients, check_loss_identities,
                        check_primitive_gradients, check_ssim_oracle, trace_staged_step)


def gate(n: int, title: str, ok: bool, detail: str):
    ACCEPTANCE_LINES.append(f"{'PASS' if ok else 'FAIL'}  [{n}] {title}: {detail}")
    assert ok, detail


def test_1_gradient_suite():
    t0 = time.process_time()
    prim = check_primitive_gradients(seeds=10)
    comp = check_loss_gradients(seeds=10)
    cpu = time.process_time() - t0
    bad = [f"{n} {e:.1e}" for n, e in prim if not e < PRIMITIVE_TOL] + \
          [f"{n} {e:.1e}" for n, e in comp if not e < COMPOSITE_TOL]
    worst_p, worst_c = max(e for _, e in prim), max(e for _, e in comp)
    gate(1, "gradient oracle suite", not bad and cpu < 300,
         f"{len(prim)} primitives worst {worst_p:.1e} < 1e-6, {len(comp)} losses worst {worst_c:.1e} < 1e-3, "
         f"10 seeds, {cpu:.0f}s CPU < 300s" + (f"; failing: {', '.join(bad)}" if bad else ""))


def test_2_loss_identities():
    rows = check_loss_identities()
    bad = [f"{n}={v!r} vs {x!r}" for n, v, x, tol in rows if not abs(v - x) <= tol]
    worst = max(abs(v - x) for _, v, x, _ in rows)
    gate(2, "loss identities", not bad, f"{len(rows)} identities, worst deviation {worst:.1e}"
         + (f"; failing: {', '.join(bad)}" if bad else ""))


def test_3_ssim_oracle():
    diff, selfdev, asym = check_ssim_oracle(pairs=100)
    gate(3, "SSIM oracle", diff < 1e-7 and selfdev <= 1e-9 and asym <= 1e-12,
         f"100 pairs, vs reference {diff:.1e} < 1e-7, |ssim(x,x)-1| {selfdev:.1e}, asymmetry {asym:.1e}")


def test_4_staged_contract():
    t0 = time.perf_counter()
    traces = [trace_staged_step(seed) for seed in range(3)]
    ok = all(t.order_ok and t.final_identical and t.rest_changed for t in traces)
    order = " -> ".join(dict.fromkeys(p for p, _ in traces[0].phases))
    gate(4, "staged update contract", ok,
         f"order {order}; final stage bit-identical through G-partial in {sum(t.final_identical for t in traces)}/3 "
         f"seeds ({time.perf_counter() - t0:.1f}s)")


@pytest.mark.slow
def test_5_smoke_training():
    cfg = TrainConfig(steps=500, seed=0)
    assert (cfg.resolution, cfg.depth, cfg.num_ggbs, cfg.batch_size) == (64, 6, 3, 8)
    t0 = time.process_time()
    run = train_loop(cfg)
    cpu = time.process_time() - t0
    finite = all(math.isfinite(v) for r in run.reports for v in r.losses.values())
    rec = np.array([r.losses["l_rec_N"] for r in run.reports])
    tenth = len(rec) // 10
    first, last = rec[:tenth].mean(), rec[-tenth:].mean()
    gate(5, "smoke training", len(rec) == 500 and finite and last < first and cpu < 1800,
         f"500 steps all finite={finite}, mean l_rec_N first 10% {first:.4f} -> last 10% {last:.4f}, "
         f"{cpu / 60:.1f} min CPU < 30")


def _ablation_rows():
    if os.environ.get("GGB_ABLATION_DIR"):
        path = Path(os.environ["GGB_ABLATION_DIR"]) / "ablation.csv"
        if not path.exists():
            pytest.fail(f"GGB_ABLATION_DIR set but {path} does not exist")
        with open(path) as fh:
            return list(csv.DictReader(fh)), path.parent
    if os.environ.get("GGB_RUN_ABLATION") == "1":
        import tempfile

        from ggb.ablation import TABLE_COLUMNS, run_ablation

        out = Path(tempfile.mkdtemp(prefix="ggb_ablation_"))
        res = run_ablation(TrainConfig(epochs=5), out, seeds=(0, 1, 2), num_test=200)
        return [dict(zip(TABLE_COLUMNS, r.row())) for r in res.results], out
    ACCEPTANCE_LINES.append("SKIP  [6] ablation ordering: set GGB_ABLATION_DIR or GGB_RUN_ABLATION=1")
    pytest.skip("ablation results not available")


@pytest.mark.slow
def test_6_ablation_ordering():
    rows, where = _ablation_rows()
    failed = [f"{r['variant']} seed {r['seed']}" for r in rows if r["status"] != "ok"]
    ssim = {(r["variant"], int(r["seed"])): float(r["mean_ssim"]) for r in rows if r["status"] == "ok"}
    seeds = sorted({s for _, s in ssim})
    wins = sum(ssim.get(("3 GGBs", s), -1) > ssim.get(("w/o GGBs", s), math.inf) for s in seeds)

    def avg(key):
        vals = [ssim[(key, s)] for s in seeds if (key, s) in ssim]
        return float(np.mean(vals)) if vals else float("nan")

    m3, m2, m1, m0 = avg("3 GGBs"), avg("2 GGBs"), avg("1 GGB"), avg("w/o GGBs")
    ok = not failed and len(seeds) >= 3 and wins >= 2 and m3 >= m2 >= m1
    gate(6, "ablation ordering", ok,
         f"full > w/o GGBs in {wins}/{len(seeds)} seeds (need 2); seed-mean SSIM 3 GGBs {m3:.4f}, "
         f"2 GGBs {m2:.4f}, 1 GGB {m1:.4f}, w/o GGBs {m0:.4f} (need 3 >= 2 >= 1); from {where}"
         + (f"; failed variants: {', '.join(failed)}" if failed else ""))


def test_7_determinism_and_resume(tmp_path):
    k, m = 10, 20
    cfg = tiny_config(steps=k + m, deterministic=True)
    train_loop(cfg, out_dir=tmp_path / "a")
    train_loop(cfg, out_dir=tmp_path / "b")
    same_csv = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    full = train_loop(cfg)
    part = train_loop(tiny_config(steps=k, deterministic=True), out_dir=tmp_path / "r")
    resumed = train_loop(cfg, out_dir=tmp_path / "r", resume_from=part.checkpoint_path)
    p_full, p_res = full.state.parameter_snapshot(), resumed.state.parameter_snapshot()
    same_params = p_full.keys() == p_res.keys() and all(p_full[n].tobytes() == p_res[n].tobytes() for n in p_full)
    same_traj = (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "r" / "metrics.csv").read_bytes()
    gate(7, "determinism and resume", same_csv and same_params and same_traj,
         f"two runs byte-identical CSV={same_csv}; resume at {k} to {k + m}: params bit-identical={same_params}, "
         f"metrics identical={same_traj}")
