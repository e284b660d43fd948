"""Acceptance criteria AC1-AC10, each reported as a single PASS/FAIL line."""

import functools
import json
import time

import numpy as np
import pytest

from revlearn import autodiff as ad
from revlearn import config, experiments, train
from revlearn.data import batch_schedule, rng_for, train_valid_split
from revlearn.models import MLP, HyperLayout, TrainingLoss, init_normals
from revlearn.revbuf import Ratio, buffers_empty
from revlearn.verify import (check_float_reversal_fails, check_hvp, exact_hypergrad,
                             fd_probes, float_hypergrad, toy_logistic)

from conftest import ACCEPTANCE


def criterion(num, title):
    """Run the test body, which returns (passed, detail); record and assert."""
    def wrap(fn):
        @functools.wraps(fn)
        def test(*args, **kwargs):
            start = time.perf_counter()
            try:
                ok, detail = fn(*args, **kwargs)
            except Exception as exc:
                ok, detail = False, f"{type(exc).__name__}: {exc}"
            secs = time.perf_counter() - start
            line = f"AC{num} {'PASS' if ok else 'FAIL'} {title}: {detail} [{secs:.1f}s]"
            ACCEPTANCE.append(line)
            print(line)
            assert ok, line
        return test
    return wrap


@criterion(1, "bit-exact reversal, T=1000, dim=500, gamma=9/10, 20 seeds")
def test_ac1_bit_exact_reversal():
    n, T = 500, 1000
    sched = train.Schedules.constant(T, 1, 0.05, Ratio(9, 10))
    gids = np.zeros(n, dtype=np.int64)
    start = time.perf_counter()
    failures = 0
    for seed in range(20):
        rng = rng_for(seed, 1)
        curv = rng.uniform(0.1, 2.0, n)
        center = rng.standard_normal(n)
        freq = rng.uniform(0.5, 3.0, n)

        def L(w, theta, t, curv=curv, center=center, freq=freq):
            # nonconvex and t-dependent so every step uses fresh, irregular gradients
            shift = center * np.cos(0.01 * t)
            return 0.5 * ad.vsum(curv * ad.square(w - shift)) + 0.1 * ad.vsum(ad.tanh(freq * w))

        st0 = train.TrainState.initial(rng.standard_normal(n), rng.standard_normal(n))
        final = train.sgd_forward(st0, sched, L, gids)
        _, back = train.sgd_reverse(final, sched, L, gids, np.zeros(n))
        if not (back.w == st0.w and back.v == st0.v and buffers_empty(back.buffers)):
            failures += 1
    secs = time.perf_counter() - start
    return failures == 0 and secs < 60, f"{20 - failures}/20 seeds exact, {secs:.1f}s (< 60s)"


GAMMA_TARGETS = {"49/50": 0.029, "7/8": 0.19}


@criterion(2, "buffer entropy per element per step over 1e4 steps")
def test_ac2_entropy():
    rows = {g: experiments.bench_memory(g, 10_000) for g in ("49/50", "7/8", "1/2", "1/1")}
    ok = all(abs(rows[g].bits_per_step - v) <= 0.1 * v for g, v in GAMMA_TARGETS.items())
    ok &= rows["1/2"].bits_per_step == 1.0 and rows["1/1"].bits_per_step == 0.0
    ok &= all(r.reversed_exactly for r in rows.values())
    return ok, ", ".join(f"{g}: {r.bits_per_step:.4f}" for g, r in rows.items())


@criterion(3, "memory factor at gamma=9/10 in [180, 230]")
def test_ac3_memory_factor():
    start = time.perf_counter()
    row = experiments.bench_memory("9/10", 10_000)
    secs = time.perf_counter() - start
    ok = 180 <= row.naive_ratio <= 230 and secs < 30 and row.reversed_exactly
    return ok, f"32 bits / {row.bits_per_step:.4f} bits = {row.naive_ratio:.1f}, {secs:.1f}s (< 30s)"


@criterion(4, "hypergradients vs cached reverse (1e-6) and finite differences (1e-5)")
def test_ac4_hypergradients():
    start = time.perf_counter()
    toy = toy_logistic(n=200, features=10, classes=3, T=50, groups=8)
    res, _, _, _, rec, d_wT = exact_hypergrad(toy)
    ref = train.naive_reverse(rec, toy.sched, toy.L, toy.group_ids, d_wT)
    worst = 0.0
    for key in ("d_w1", "d_v1", "d_alpha", "d_gamma", "d_theta"):
        a, b = getattr(res, key), getattr(ref, key)
        rel = np.abs(a - b) / np.maximum(np.abs(b), 1e-300)
        rel[(a == 0) & (b == 0)] = 0.0
        worst = max(worst, float(rel.max()))
    probes = fd_probes(toy, float_hypergrad(toy), 20, h=1e-4)
    fd_worst = max(abs(an - fd) / max(abs(fd), 1e-12) for _, _, an, fd in probes)
    secs = time.perf_counter() - start
    ok = worst <= 1e-6 and fd_worst <= 1e-5 and secs < 120
    return ok, f"exact vs cached {worst:.1e}, 20 FD probes {fd_worst:.1e}, {secs:.1f}s (< 120s)"


@criterion(5, "HVPs vs closed-form logistic Hessian, 100 probes")
def test_ac5_hvp():
    return check_hvp(probes=100)


@criterion(6, "float-only reversal diverges at T=500, gamma=9/10")
def test_ac6_float_reversal():
    return check_float_reversal_fails()


@criterion(7, "lr_schedule meta-descent and step-size shape")
def test_ac7_meta_descent(tmp_path):
    cfg = config.defaults("lr_schedule")
    assert cfg.meta_iters == 20 and cfg.meta_step == 0.04
    m = experiments.run(cfg, tmp_path, timestamp="t")["metrics"]
    ok = (m["meta_loss_final"] < m["meta_loss_initial"]
          and m["alpha_mean_last10pct"] < m["alpha_mean_mid50pct"])
    return ok, (f"meta-loss {m['meta_loss_initial']:.4f} -> {m['meta_loss_final']:.4f}; "
                f"mean alpha last 10% {m['alpha_mean_last10pct']:.3f} "
                f"vs middle 50% {m['alpha_mean_mid50pct']:.3f}")


@criterion(8, "chaos sweep: top-decade correlation below bottom-decade")
def test_ac8_chaos(tmp_path):
    start = time.perf_counter()
    m = experiments.run(config.defaults("chaos_sweep"), tmp_path, timestamp="t")["metrics"]
    secs = time.perf_counter() - start
    lo, hi = m["corr_bottom_decade"], m["corr_top_decade"]
    ok = lo is not None and hi is not None and hi < lo and secs < 120
    fmt = lambda c: "undefined" if c is None else f"{c:.3f}"
    return ok, f"corr bottom {fmt(lo)}, top {fmt(hi)}, {secs:.1f}s (< 120s)"


def _best_time(fn, reps=3):
    best, out = np.inf, None
    for _ in range(reps):
        start = time.perf_counter()
        out = fn()
        best = min(best, time.perf_counter() - start)
    return best, out


@criterion(9, "reverse / forward wall-clock <= 3 at T=100 and T=1000")
def test_ac9_linear_time():
    tr, _ = train_valid_split(0, 500, 200, 64, 10)
    model = MLP([64, 20, 20, 20, 10])
    gids = model.layout.group_ids()
    ratios = {}
    for T in (100, 1000):
        L = TrainingLoss(model, tr, batch_schedule(1, 500, 10, T), HyperLayout())
        sched = train.Schedules.constant(T, model.layout.num_groups, 0.1, Ratio(9, 10))
        st0 = train.TrainState.initial(0.1 * init_normals(model.layout, 0))
        reps = 3 if T == 100 else 1
        t_fwd, final = _best_time(lambda: train.sgd_forward(st0, sched, L, gids), reps)
        t_rev, _ = _best_time(
            lambda: train.sgd_reverse(final, sched, L, gids, np.ones(model.layout.size)), reps)
        ratios[T] = t_rev / t_fwd
    ok = all(r <= 3.0 for r in ratios.values())
    return ok, ", ".join(f"T={T}: {r:.2f}" for T, r in ratios.items())


def _tiny(name):
    cfg = config.defaults(name)
    if name == "memory_bench":
        cfg.bench = config.BenchSpec(["1/2", "9/10", "1/1"], 500, 20, 0)
    elif name == "chaos_sweep":
        cfg.T = 20
        cfg.sweep = config.SweepSpec(-1.0, 11.0, 9)
    elif name != "learn_data":
        cfg.T, cfg.meta_iters, cfg.seeds, cfg.eval_seeds = 10, 3, 2, 2
        if name == "tied_reg":
            cfg.data.tasks = 2
    return cfg.validate()


@criterion(10, "reruns give byte-identical results.json apart from the timestamp")
def test_ac10_determinism(tmp_path):
    differing = []
    for name in config.EXPERIMENTS:
        cfg = _tiny(name)
        texts = []
        for k in range(2):
            out = tmp_path / f"{name}{k}"
            experiments.run(cfg, out, timestamp=f"run {k}")
            doc = json.loads((out / "results.json").read_text())
            assert doc["timestamp"] == f"run {k}"
            raw = (out / "results.json").read_text().replace(f'"run {k}"', '"<ts>"')
            texts.append(raw.encode())
        if texts[0] != texts[1]:
            differing.append(name)
    n = len(config.EXPERIMENTS)
    return not differing, f"{n - len(differing)}/{n} experiments identical" + (
        f"; differing: {differing}" if differing else "")
