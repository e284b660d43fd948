"""Experiment runners: build a problem from a config, optimize, write artifacts."""

from __future__ import annotations

import datetime
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import artifacts, meta, train
from . import autodiff as ad
from .config import ExperimentConfig
from .data import (batch_schedule, find_mnist, load_idx_pair, rng_for, synthetic_multitask,
                   train_valid_split)
from .models import (MLP, HyperBlock, HyperLayout, LearnedDataLoss, LogisticRegression,
                     MultitaskLoss, MultitaskValidation, ParamLayout, TrainingLoss,
                     ValidationLoss, heuristic_log_scales, num_tied_entries, tied_matrix)
from .revbuf import Ratio, empty_buffers, rat_mul_inverse_vec, rat_mul_vec

log = logging.getLogger(__name__)

EVAL_SEED_BASE = 1_000_000


# --- building problems ---------------------------------------------------------

def load_data(cfg: ExperimentConfig):
    """(train, valid) datasets; MNIST if requested and present, else synthetic."""
    d = cfg.data
    if d.source == "mnist":
        paths = find_mnist("train")
        if paths is not None:
            full = load_idx_pair(*paths)
            idx = rng_for(d.seed, 1).permutation(len(full))
            return (full.subset(idx[:d.n_train], "train"),
                    full.subset(idx[d.n_train:d.n_train + d.n_valid], "valid"))
        log.warning("MNIST files not found; using synthetic data")
    return train_valid_split(d.seed, d.n_train, d.n_valid, d.features, d.classes, d.separation)


def make_model(cfg: ExperimentConfig, num_features: int, num_classes: int):
    if cfg.model.kind == "logistic":
        return LogisticRegression(num_features, num_classes)
    return MLP([num_features, *cfg.model.hidden, num_classes])


@dataclass
class Setup:
    problem: meta.Problem
    phi0: np.ndarray
    mask: np.ndarray
    group_names: list
    model: object = None
    extras: dict = field(default_factory=dict)


def _fixed_scales(cfg, model, layout: ParamLayout):
    if cfg.init.log_init_scale is not None:
        return np.full(layout.num_groups, cfg.init.log_init_scale)
    return heuristic_log_scales(model)


def _phi0(cfg, phi_layout, theta0):
    shape = (phi_layout.T, phi_layout.num_groups)
    return phi_layout.pack(np.full(shape, math.log(cfg.init.alpha)),
                           np.full(shape, float(meta.logit(cfg.init.gamma))), theta0)


def _mask(cfg, phi_layout):
    return phi_layout.mask("alpha" in cfg.learn, "gamma" in cfg.learn, "theta" in cfg.learn)


def _standard_setup(cfg: ExperimentConfig, hyper_blocks, theta0) -> Setup:
    train_set, valid_set = load_data(cfg)
    model = make_model(cfg, train_set.num_features, train_set.num_classes)
    hyper = HyperLayout(hyper_blocks(model))
    batch = min(cfg.batch_size, len(train_set))

    def make_loss(seed, theta):
        return TrainingLoss(model, train_set, batch_schedule(seed, len(train_set), batch, cfg.T),
                            hyper)

    target = train_set if cfg.objective == "train" else valid_set
    layout = model.layout
    scales = None if meta.INIT_BLOCK in hyper else _fixed_scales(cfg, model, layout)
    problem = meta.Problem(make_loss, ValidationLoss(model, target), layout, layout.group_ids(),
                           hyper, cfg.T, scales, cfg.frac_bits)
    theta = theta0(model, hyper)
    return Setup(problem, _phi0(cfg, problem.phi_layout, theta), _mask(cfg, problem.phi_layout),
                 list(layout.names), model, {"train": train_set, "valid": valid_set})


def setup_lr_schedule(cfg):
    return _standard_setup(cfg, lambda m: [], lambda m, h: np.zeros(0))


def setup_init_scales(cfg):
    def theta0(model, hyper):
        return _fixed_scales(cfg, model, model.layout)
    return _standard_setup(cfg, lambda m: [HyperBlock(meta.INIT_BLOCK, m.layout.num_groups, "log")],
                           theta0)


def setup_per_param_reg(cfg):
    return _standard_setup(cfg, lambda m: [HyperBlock("log_l2", m.layout.size, "log")],
                           lambda m, h: np.full(h.size, cfg.init.log_l2))


def setup_learn_data(cfg):
    _, valid_set = load_data(cfg)
    k, nf = valid_set.num_classes, valid_set.num_features
    model = make_model(cfg, nf, k)
    labels = np.arange(k)
    hyper = HyperLayout([HyperBlock("pixels", k * nf, "identity")])
    loss = LearnedDataLoss(model, labels, hyper)
    layout = model.layout
    problem = meta.Problem(lambda seed, theta: loss, ValidationLoss(model, valid_set), layout,
                           layout.group_ids(), hyper, cfg.T, _fixed_scales(cfg, model, layout),
                           cfg.frac_bits)
    return Setup(problem, _phi0(cfg, problem.phi_layout, np.zeros(hyper.size)),
                 _mask(cfg, problem.phi_layout), list(layout.names), model,
                 {"valid": valid_set, "side": _image_side(nf)})


def setup_tied_reg(cfg):
    d = cfg.data
    mt = synthetic_multitask(d.seed, d.tasks, d.n_train, d.n_valid, d.features, d.classes,
                             d.separation)
    model = make_model(cfg, d.features, d.classes)
    layers = [n for n in model.layout.names if n.startswith("weights")]
    m = mt.num_tasks
    hyper = HyperLayout([HyperBlock(f"log_tie{k}", num_tied_entries(m), "log")
                         for k in range(len(layers))])
    train_tasks = [tr for tr, _ in mt.tasks]
    batch = min(cfg.batch_size, d.n_train)

    def make_loss(seed, theta):
        return MultitaskLoss(model, train_tasks, hyper,
                             batch_schedule(seed, d.n_train, batch, cfg.T))

    probe = make_loss(0, None)
    names = list(model.layout.names)
    # schedule groups are shared across tasks: one per parameter type and layer
    group_ids = np.tile(model.layout.group_ids(), m)
    scales = np.tile(heuristic_log_scales(model), m)
    objective = (MultitaskValidation(model, train_tasks) if cfg.objective == "train"
                 else MultitaskValidation(model, [va for _, va in mt.tasks]))
    problem = meta.Problem(make_loss, objective, probe.layout, group_ids, hyper, cfg.T, scales,
                           cfg.frac_bits)
    theta0 = np.full(hyper.size, cfg.init.log_tie)
    return Setup(problem, _phi0(cfg, problem.phi_layout, theta0), _mask(cfg, problem.phi_layout),
                 names, model, {"tasks": m, "layers": len(layers)})


SETUPS = {
    "lr_schedule": setup_lr_schedule,
    "init_scales": setup_init_scales,
    "per_param_reg": setup_per_param_reg,
    "learn_data": setup_learn_data,
    "tied_reg": setup_tied_reg,
    "chaos_sweep": setup_lr_schedule,
}


def build(cfg: ExperimentConfig) -> Setup:
    if cfg.experiment not in SETUPS:
        raise ValueError(f"experiment {cfg.experiment!r} has no training problem")
    return SETUPS[cfg.experiment](cfg)


# --- evaluation helpers ------------------------------------------------------

def final_weights(phi, problem: meta.Problem, seed: int) -> np.ndarray:
    sched = meta.transform(phi, problem.phi_layout)
    L = problem.make_loss(seed, sched.theta)
    w1 = problem.initial_weights(seed, sched.theta)
    state = train.sgd_forward(train.TrainState.initial(w1, frac_bits=problem.frac_bits), sched, L,
                              problem.group_ids)
    return state.w.to_float()


def meta_loss(phi, problem: meta.Problem, seeds) -> float:
    """Mean objective after training, forward passes only."""
    return float(np.mean([ad.value(problem.objective(final_weights(phi, problem, s)))
                          for s in seeds]))


def schedule_rows(sched: train.Schedules, group_names):
    rows = []
    for t in range(sched.T):
        for g in range(sched.num_groups):
            r = sched.ratio(t, g)
            rows.append((t, g, group_names[g], float(sched.alphas[t, g]), float(r), str(r)))
    return rows


def _schedules_json(sched: train.Schedules):
    return {"alpha": sched.alphas.tolist(),
            "gamma": sched.gammas.tolist(),
            "gamma_ratio": [[str(sched.ratio(t, g)) for g in range(sched.num_groups)]
                            for t in range(sched.T)]}


def _image_side(num_features):
    side = int(round(math.sqrt(num_features)))
    return side if side * side == num_features else None


def _pixel_rows(values, num_classes, num_features):
    """(class, row, col, value) with values laid out per class as an image."""
    side = _image_side(num_features)
    grid = np.asarray(values).reshape(num_features, num_classes)
    rows = []
    for c in range(num_classes):
        for f in range(num_features):
            r, col = (divmod(f, side) if side else (0, f))
            rows.append((c, r, col, float(grid[f, c])))
    return rows


def alpha_shape(sched: train.Schedules) -> dict:
    """Mean step size over the last 10% of iterations and over the middle 50%."""
    T = sched.T
    a = sched.alphas.mean(axis=1)
    last = a[T - max(1, T // 10):]
    mid = a[T // 4: T // 4 + max(1, T // 2)]
    return {"alpha_mean_last10pct": float(last.mean()), "alpha_mean_mid50pct": float(mid.mean())}


# --- runners -----------------------------------------------------------------

@dataclass
class Outcome:
    results: dict
    tables: dict = field(default_factory=dict)   # table name -> rows


def _optimize(cfg, setup: Setup):
    return meta.meta_optimize(setup.problem, setup.phi0, cfg.meta_iters, cfg.seeds,
                              cfg.meta_step, setup.mask)


def run_meta_experiment(cfg: ExperimentConfig) -> Outcome:
    setup = build(cfg)
    problem = setup.problem
    res = _optimize(cfg, setup)
    eval_seeds = [EVAL_SEED_BASE + j for j in range(cfg.eval_seeds)]
    before = meta_loss(setup.phi0, problem, eval_seeds)
    after = meta_loss(res.phi, problem, eval_seeds)
    metrics = {"meta_loss_initial": before, "meta_loss_final": after}
    metrics.update(alpha_shape(res.schedules))
    if res.curve:
        metrics["curve_loss_first"] = res.curve[0]["elementary_final_loss"]
        metrics["curve_loss_last"] = res.curve[-1]["elementary_final_loss"]
    tables = {"schedules": schedule_rows(res.schedules, setup.group_names),
              "meta_curve": res.curve_rows()}
    theta = res.schedules.theta
    hyper = {name: problem.hyper.get(theta, name).tolist() for name in problem.hyper.blocks}

    if cfg.experiment == "per_param_reg":
        model = setup.model
        w_part = problem.hyper.get(theta, "log_l2")[model.layout.slice("weights")]
        tables["penalty_grid"] = _pixel_rows(w_part, model.num_classes, model.num_features)
    elif cfg.experiment == "learn_data":
        model = setup.model
        pixels = problem.hyper.get(theta, "pixels").reshape(model.num_classes, model.num_features)
        tables["learned_data"] = _pixel_rows(pixels.T, model.num_classes, model.num_features)
        metrics["valid_loss_blank"] = before
        metrics["valid_loss_learned"] = after
    elif cfg.experiment == "tied_reg":
        rows = []
        m = setup.extras["tasks"]
        for layer in range(setup.extras["layers"]):
            A = ad.value(tied_matrix(problem.hyper.get(theta, f"log_tie{layer}"), m))
            norm = A / np.sqrt(np.outer(np.diag(A), np.diag(A)))
            rows += [(layer, a, b, float(A[a, b]), float(norm[a, b]))
                     for a in range(m) for b in range(m)]
        tables["tied_matrix"] = rows

    results = {"experiment": cfg.experiment, "metrics": metrics, "meta_curve": res.curve,
               "schedules": _schedules_json(res.schedules), "hyper": hyper,
               "stopped_early": res.stopped_early, "stop_reason": res.stop_reason}
    return Outcome(results, tables)


def _pearson(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if len(a) < 3 or a.std() == 0 or b.std() == 0:
        return None
    return float(np.corrcoef(a, b)[0, 1])


def _sign_agreement(a, b):
    return float(np.mean(np.sign(a) == np.sign(b))) if len(a) else None


def chaos_sweep(cfg: ExperimentConfig, seed: int | None = None) -> Outcome:
    """Fixed-rate sweep: final loss and its hypergradient along log10(alpha)."""
    setup = build(cfg)
    problem = setup.problem
    seed = cfg.data.seed if seed is None else seed
    lay = problem.phi_layout
    xs = np.linspace(cfg.sweep.log10_alpha_min, cfg.sweep.log10_alpha_max, cfg.sweep.points).round(12)
    rows = []
    for x in xs:
        phi = setup.phi0.copy()
        phi[lay.alpha] = x * math.log(10.0)
        alpha = 10.0**x
        try:
            ev = meta.evaluate(phi, problem, seed)
        except (FloatingPointError, OverflowError) as exc:
            log.info("log10 alpha %.3f: %s", x, exc)
            rows.append((float(x), alpha, math.nan, math.nan, math.nan, "overflow"))
            continue
        d_log = float(ev.d_phi[lay.alpha].sum())    # d loss / d ln(alpha)
        rows.append((float(x), alpha, ev.meta_loss, d_log / alpha, d_log * math.log(10.0), "ok"))

    ok = [r for r in rows if r[5] == "ok"]
    x_ok = np.array([r[0] for r in ok])
    loss_ok = np.array([r[2] for r in ok])
    grad_ok = np.array([r[4] for r in ok])
    fd = np.gradient(loss_ok, x_ok) if len(ok) >= 2 else np.zeros(len(ok))
    lo, hi = xs[0], xs[-1]
    bottom = x_ok <= lo + 1.0 + 1e-9
    top = x_ok >= hi - 1.0 - 1e-9
    initial_w = problem.initial_weights(seed, meta.transform(setup.phi0, lay).theta)
    metrics = {
        "corr_bottom_decade": _pearson(grad_ok[bottom], fd[bottom]),
        "corr_top_decade": _pearson(grad_ok[top], fd[top]),
        "sign_agreement_bottom": _sign_agreement(grad_ok[bottom], fd[bottom]),
        "sign_agreement_top": _sign_agreement(grad_ok[top], fd[top]),
        "overflow_rows": sum(r[5] != "ok" for r in rows),
        "initial_loss": float(ad.value(problem.objective(initial_w))),
    }
    results = {"experiment": cfg.experiment, "metrics": metrics, "meta_curve": [],
               "sweep": [dict(zip([c for c, _ in artifacts.CSV_SCHEMAS["chaos"]], r))
                         for r in rows]}
    return Outcome(results, {"chaos": rows})


@dataclass
class BenchRow:
    gamma: str
    steps: int
    elements: int
    bits_per_step: float
    theory_bits_per_step: float
    naive_ratio: float
    reversed_exactly: bool

    def as_row(self):
        return (self.gamma, self.steps, self.elements, self.bits_per_step,
                self.theory_bits_per_step, self.naive_ratio, str(self.reversed_exactly).lower())


def bench_memory(gamma: str | Ratio, steps: int, elements: int = 100, seed: int = 0,
                 word_bits: int = 32, check_reverse: bool = True) -> BenchRow:
    """Buffer growth of a momentum-like stream ``v <- gamma v - g`` in fixed point.

    Gradients are random integers spanning ~2^24 ulps. Each buffer starts as a
    single marker bit, so the bits it occupies beyond the marker are exactly
    the stored bits, leading zeros included. The rate approaches ``log2(d/n)``.
    """
    r = gamma if isinstance(gamma, Ratio) else Ratio.parse(gamma)
    rng = rng_for(seed, 11, r.n, r.d)
    grads = rng.integers(-(2**24), 2**24, size=(steps, elements), dtype=np.int64)
    v = np.zeros(elements, dtype=np.int64)
    bufs = empty_buffers(elements) + 1
    for t in range(steps):
        bufs, v = rat_mul_vec(bufs, v, r.n, r.d)
        v = v - grads[t]
    per = sum(int(b).bit_length() - 1 for b in bufs) / (steps * elements)
    ok = True
    if check_reverse:
        for t in range(steps - 1, -1, -1):
            v = v + grads[t]
            bufs, v = rat_mul_inverse_vec(bufs, v, r.n, r.d)
        ok = bool(all(b == 1 for b in bufs) and not v.any())
    ratio = math.inf if per == 0 else word_bits / per
    return BenchRow(str(r), steps, elements, per, r.entropy_bits, ratio, ok)


def memory_bench(cfg: ExperimentConfig) -> Outcome:
    b = cfg.bench
    rows = [bench_memory(g, b.steps, b.elements, b.seed) for g in b.gammas]
    metrics = {f"bits_per_step[{r.gamma}]": r.bits_per_step for r in rows}
    metrics["all_reversed_exactly"] = all(r.reversed_exactly for r in rows)
    results = {"experiment": cfg.experiment, "metrics": metrics, "meta_curve": [],
               "table": [dict(zip([c for c, _ in artifacts.CSV_SCHEMAS["memory"]], r.as_row()))
                         for r in rows]}
    return Outcome(results, {"memory": [r.as_row() for r in rows]})


RUNNERS = {name: run_meta_experiment for name in SETUPS}
RUNNERS["chaos_sweep"] = chaos_sweep
RUNNERS["memory_bench"] = memory_bench

TABLE_FILES = {"schedules": "schedules.csv", "meta_curve": "meta_curve.csv",
               "penalty_grid": "penalty_grid.csv", "learned_data": "learned_data.csv",
               "tied_matrix": "tied_matrix.csv", "chaos": "chaos_sweep.csv",
               "memory": "memory_bench.csv"}


def run(cfg: ExperimentConfig, output_dir=None, timestamp: str | None = None) -> dict:
    """Run ``cfg`` and write results.json plus its CSV tables. Returns the results."""
    out = Path(output_dir if output_dir is not None else cfg.output_dir)
    start = time.perf_counter()
    outcome = RUNNERS[cfg.experiment](cfg)
    log.info("%s finished in %.1fs", cfg.experiment, time.perf_counter() - start)
    results = dict(outcome.results)
    results["config"] = cfg.to_dict()
    results["config_hash"] = cfg.hash().hex()
    results["timestamp"] = timestamp or datetime.datetime.now(datetime.timezone.utc).isoformat()
    # render everything before touching the disk so a schema failure writes nothing
    rendered = {"results.json": artifacts.dumps_results(results)}
    for name, rows in outcome.tables.items():
        rendered[TABLE_FILES[name]] = artifacts.dumps_csv(name, rows)
    out.mkdir(parents=True, exist_ok=True)
    for fname, text in rendered.items():
        (out / fname).write_text(text)
    return results
