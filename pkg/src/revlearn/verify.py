"""Oracle-agreement checks runnable outside pytest (``revlearn verify``).

Each check compares a production routine against an independent oracle:
exhaustive integer round trips, closed-form Hessians, a cached-trajectory
reverse pass and central finite differences.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import train
from .data import batch_schedule, rng_for, train_valid_split
from .models import (HyperBlock, HyperLayout, LogisticRegression, ParamLayout, TrainingLoss,
                     ValidationLoss, init_normals)
from .revbuf import Ratio, empty_buffers, rat_mul_inverse_vec, rat_mul_vec


# --- toy problem shared by checks and tests ------------------------------------

@dataclass
class Toy:
    model: LogisticRegression
    L: TrainingLoss
    f: ValidationLoss
    sched: train.Schedules
    w1: np.ndarray
    group_ids: np.ndarray
    hyper: HyperLayout

    @property
    def T(self):
        return self.sched.T


def toy_logistic(seed=0, n=200, features=10, classes=3, T=50, groups=8, batch=20,
                 gamma_jitter=0.05) -> Toy:
    """Logistic regression with per-parameter L2 and randomized schedules."""
    tr, va = train_valid_split(seed, n, 100, features, classes)
    model = LogisticRegression(features, classes)
    gids = ParamLayout.chunks(model.layout.size, groups).group_ids()
    hyper = HyperLayout([HyperBlock("log_l2", model.layout.size, "log")])
    L = TrainingLoss(model, tr, batch_schedule(seed + 1, n, batch, T), hyper)
    rng = rng_for(seed, 99)
    alphas = 0.3 * np.exp(0.2 * rng.standard_normal((T, groups)))
    gammas = 0.9 + gamma_jitter * rng.uniform(-1, 1, (T, groups))
    theta = -3.0 + 0.3 * rng.standard_normal(hyper.size)
    sched = train.Schedules.from_floats(alphas, gammas, theta)
    w1 = 0.1 * init_normals(model.layout, seed)
    return Toy(model, L, ValidationLoss(model, va), sched, w1, gids, hyper)


def exact_hypergrad(toy: Toy):
    """Fixed-point forward and exact reverse.

    Returns (result, recovered start, true start, final state, cached trajectory, d_wT).
    """
    rec = train.Trajectory()
    st0 = train.TrainState.initial(toy.w1)
    final = train.sgd_forward(st0, toy.sched, toy.L, toy.group_ids, record=rec)
    _, d_wT = ad.value_and_grad(toy.f, final.w.to_float())
    res, start = train.sgd_reverse(final, toy.sched, toy.L, toy.group_ids, d_wT)
    return res, start, st0, final, rec, d_wT


def float_objective(toy: Toy, alphas=None, gammas=None, theta=None) -> float:
    """Validation loss after float64 training, gamma treated as a real number."""
    s = toy.sched
    sched = train.Schedules(s.alphas if alphas is None else alphas, s.gamma_n, s.gamma_d,
                            s.theta if theta is None else theta)
    gam = s.gammas if gammas is None else gammas
    traj = train.float_forward(toy.w1, sched, toy.L, toy.group_ids, gammas=gam)
    return float(ad.value(toy.f(traj.ws[-1])))


def float_hypergrad(toy: Toy) -> train.HypergradResult:
    traj = train.float_forward(toy.w1, toy.sched, toy.L, toy.group_ids, gammas=toy.sched.gammas)
    _, d_wT = ad.value_and_grad(toy.f, traj.ws[-1])
    return train.naive_reverse(traj, toy.sched, toy.L, toy.group_ids, d_wT,
                               gammas=toy.sched.gammas)


def fd_probes(toy: Toy, res: train.HypergradResult, count: int, seed=0, h=1e-4):
    """Central differences on ``count`` random hyperparameters.

    Returns a list of (kind, index, analytic, finite difference).
    """
    rng = rng_for(seed, 5)
    s = toy.sched
    out = []
    for k in range(count):
        kind = ("alpha", "gamma", "theta")[k % 3]
        if kind == "theta":
            idx = int(rng.integers(s.theta.size))
            base, an = s.theta, res.d_theta[idx]
        else:
            idx = (int(rng.integers(s.T)), int(rng.integers(s.num_groups)))
            base = s.alphas if kind == "alpha" else s.gammas
            an = (res.d_alpha if kind == "alpha" else res.d_gamma)[idx]
        vals = []
        for sign in (1, -1):
            x = base.copy()
            x[idx] += sign * h
            vals.append(float_objective(toy, **{kind + ("s" if kind != "theta" else ""): x}))
        out.append((kind, idx, float(an), (vals[0] - vals[1]) / (2 * h)))
    return out


def logistic_hessian_product(model: LogisticRegression, batch, w, v):
    """Closed-form Hessian-vector product of mean softmax cross-entropy."""
    d, k = model.num_features, model.num_classes
    X = np.hstack([batch.inputs, np.ones((len(batch.labels), 1))])
    W = w.reshape(d + 1, k)
    V = v.reshape(d + 1, k)
    z = X @ W
    p = np.exp(z - z.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    a = X @ V
    s = p * a - p * np.sum(p * a, axis=1, keepdims=True)
    return (X.T @ s / len(X)).ravel()


# --- checks --------------------------------------------------------------------

@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def check_ratio_roundtrip():
    worst = 0
    for r in ("1/2", "2/3", "7/8", "9/10", "49/50"):
        q = Ratio.parse(r)
        c = np.arange(-2**12, 2**12, dtype=np.int64)
        bufs = empty_buffers(c.size) + 12345
        b2, c2 = rat_mul_vec(bufs, c, q.n, q.d)
        b3, c3 = rat_mul_inverse_vec(b2, c2, q.n, q.d)
        if not (np.array_equal(c3, c) and all(b3 == bufs)):
            return False, f"round trip failed for {r}"
        exact = c * q.n / q.d
        worst = max(worst, float(np.max(np.abs(c2 - exact))))
    return True, f"all 8192 values x 5 ratios recovered; max |c' - c n/d| = {worst:.3f}"


def check_reversal():
    toy = toy_logistic()
    res, start, st0, final, rec, _ = exact_hypergrad(toy)
    ok = start.w == st0.w and start.v == st0.v
    return ok, f"T={toy.T}: initial state recovered bit-for-bit: {ok}"


def check_naive_agreement():
    toy = toy_logistic()
    res, _, _, final, rec, d_wT = exact_hypergrad(toy)
    ref = train.naive_reverse(rec, toy.sched, toy.L, toy.group_ids, d_wT)
    worst = 0.0
    for key in ("d_w1", "d_alpha", "d_gamma", "d_theta"):
        a, b = getattr(res, key), getattr(ref, key)
        worst = max(worst, float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300))))
    return worst <= 1e-6, f"max relative difference vs cached-trajectory reverse {worst:.2e}"


def check_finite_differences(count=6):
    toy = toy_logistic()
    res = float_hypergrad(toy)
    worst = max(abs(an - fd) / max(abs(fd), 1e-12) for _, _, an, fd in fd_probes(toy, res, count))
    return worst <= 1e-5, f"{count} probes, max relative error {worst:.2e}"


def check_hvp(probes=20):
    toy = toy_logistic()
    rng = rng_for(0, 17)
    worst = sym = 0.0
    for k in range(probes):
        t = int(rng.integers(toy.T))
        w = 0.5 * rng.standard_normal(toy.w1.size)
        u, v = rng.standard_normal((2, w.size))
        # exp(-1000) == 0 switches the L2 term off; the closed form covers only the data term
        theta = np.full(toy.hyper.size, -1e3)
        hu = ad.grad_and_hvps(toy.L, w, theta, t, u)[2]
        hv = ad.grad_and_hvps(toy.L, w, theta, t, v)[2]
        ref = logistic_hessian_product(toy.model, toy.L.batch(t), w, u)
        worst = max(worst, float(np.max(np.abs(hu - ref))))
        sym = max(sym, abs(float(v @ hu - u @ hv)))
    return worst <= 1e-10 and sym <= 1e-10, f"max |Hu - ref| {worst:.1e}, max asymmetry {sym:.1e}"


def check_entropy(steps=2000):
    from .experiments import bench_memory
    parts = []
    ok = True
    for r in ("49/50", "7/8", "9/10"):
        row = bench_memory(r, steps, elements=50)
        rel = abs(row.bits_per_step - row.theory_bits_per_step) / row.theory_bits_per_step
        ok &= rel <= 0.1 and row.reversed_exactly
        parts.append(f"{r}: {row.bits_per_step:.4f}")
    return ok, "bits/step " + ", ".join(parts)


def check_float_reversal_fails():
    toy = toy_logistic(T=500, gamma_jitter=0.0, batch=200)
    traj = train.float_forward(toy.w1, toy.sched, toy.L, toy.group_ids)
    w, _ = train.float_reverse(traj.ws[-1], traj.vs[-1], toy.sched, toy.L, toy.group_ids)
    err = float(np.linalg.norm(w - toy.w1) / np.linalg.norm(toy.w1))
    bad = not np.isfinite(err) or err > 1e-2
    return bad, f"float-only reversal relative error {err:.2e} (expected to be large)"


CHECKS = [
    ("ratio multiply round trip", check_ratio_roundtrip),
    ("bit-exact reversal", check_reversal),
    ("exact vs cached reverse", check_naive_agreement),
    ("hypergradient vs finite differences", check_finite_differences),
    ("HVP vs closed form", check_hvp),
    ("buffer entropy rates", check_entropy),
    ("float-only reversal diverges", check_float_reversal_fails),
]


def run_checks(names=None) -> list[Check]:
    out = []
    for name, fn in CHECKS:
        if names and name not in names:
            continue
        start = time.perf_counter()
        try:
            passed, detail = fn()
        except Exception as exc:   # a crash is a failed check, reported like one
            passed, detail = False, f"{type(exc).__name__}: {exc}"
        out.append(Check(name, bool(passed), detail, time.perf_counter() - start))
    return out
