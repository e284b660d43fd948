"""Outer loop: hyperparameter transforms, seed-averaged hypergradients, Adam.

The meta-learner works on one flat vector ``phi``::

    [ log alpha (T x G) | logit gamma (T x G) | theta ]

``transform`` maps it to :class:`~revlearn.train.Schedules`; the decay goes
through the logistic function and is then rounded to a rational with
denominator at most 2**16. That rounding is treated as the identity when
differentiating (its step, ~1.5e-5, sits well below meta-gradient noise).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import train
from .models import HyperLayout, ParamLayout, init_normals, init_scale_grad
from .revbuf import MAX_DENOMINATOR, Ratio
from .train import HypergradResult, Schedules

log = logging.getLogger(__name__)

INIT_BLOCK = "log_init_scale"


def logistic(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass(frozen=True)
class PhiLayout:
    T: int
    num_groups: int
    theta_size: int

    @property
    def sched_size(self):
        return self.T * self.num_groups

    @property
    def size(self):
        return 2 * self.sched_size + self.theta_size

    @property
    def alpha(self):
        return slice(0, self.sched_size)

    @property
    def gamma(self):
        return slice(self.sched_size, 2 * self.sched_size)

    @property
    def theta(self):
        return slice(2 * self.sched_size, self.size)

    def pack(self, log_alphas, logit_gammas, theta) -> np.ndarray:
        return np.concatenate([np.ravel(log_alphas), np.ravel(logit_gammas), np.ravel(theta)])

    def mask(self, alpha=True, gamma=True, theta=True) -> np.ndarray:
        m = np.zeros(self.size, dtype=bool)
        m[self.alpha], m[self.gamma], m[self.theta] = alpha, gamma, theta
        return m


def transform(phi, layout: PhiLayout, max_denominator: int = MAX_DENOMINATOR) -> Schedules:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (layout.size,) or not np.isfinite(phi).all():
        raise ValueError("phi must be a finite vector of the layout's size")
    shape = (layout.T, layout.num_groups)
    alphas = np.exp(phi[layout.alpha]).reshape(shape)
    gammas = logistic(phi[layout.gamma]).reshape(shape)
    ratios = [Ratio.from_float(float(g), max_denominator) for g in gammas.ravel()]
    n = np.array([r.n for r in ratios], dtype=np.int64).reshape(shape)
    d = np.array([r.d for r in ratios], dtype=np.int64).reshape(shape)
    return Schedules(alphas, n, d, phi[layout.theta].copy())


def chain_to_phi(res: HypergradResult, phi, layout: PhiLayout, d_theta_extra=None) -> np.ndarray:
    """Pull a hypergradient back through ``transform`` (straight-through on rounding)."""
    phi = np.asarray(phi, dtype=np.float64)
    alphas = np.exp(phi[layout.alpha])
    s = logistic(phi[layout.gamma])
    d_theta = res.d_theta if d_theta_extra is None else res.d_theta + d_theta_extra
    return np.concatenate([res.d_alpha.ravel() * alphas,
                           res.d_gamma.ravel() * s * (1.0 - s),
                           d_theta])


# --- problems ------------------------------------------------------------------

@dataclass
class Problem:
    """Everything needed to run one elementary training for a given seed.

    ``make_loss(seed, theta)`` returns ``L(w, theta, t)``; the seed picks the
    minibatches. ``objective`` is ``f(w)``. Initial weights are
    ``exp(log scale) * N(0, 1)`` per group of ``param_layout``, with the log
    scales either fixed or taken from the ``log_init_scale`` theta block.
    """

    make_loss: Callable
    objective: Callable
    param_layout: ParamLayout
    group_ids: np.ndarray
    hyper: HyperLayout
    T: int
    log_init_scale: np.ndarray | None = None
    frac_bits: int = 32

    def __post_init__(self):
        if self.log_init_scale is None and INIT_BLOCK not in self.hyper:
            raise ValueError("need fixed init scales or a log_init_scale hyperparameter block")
        self.group_ids = np.asarray(self.group_ids, dtype=np.int64)
        self.num_groups = int(self.group_ids.max()) + 1 if self.group_ids.size else 0
        self.phi_layout = PhiLayout(self.T, self.num_groups, self.hyper.size)

    def init_scales(self, theta):
        if INIT_BLOCK in self.hyper:
            return np.asarray(self.hyper.get(theta, INIT_BLOCK))
        return np.asarray(self.log_init_scale, dtype=np.float64)

    def initial_weights(self, seed, theta):
        z = init_normals(self.param_layout, seed)
        return np.exp(self.init_scales(theta))[self.param_layout.group_ids()] * z

    def init_theta_grad(self, d_w1, w1):
        extra = np.zeros(self.hyper.size)
        if INIT_BLOCK in self.hyper:
            extra[self.hyper.slice(INIT_BLOCK)] = init_scale_grad(d_w1, w1, self.param_layout)
        return extra


@dataclass
class Evaluation:
    meta_loss: float
    d_phi: np.ndarray
    result: HypergradResult
    final_w: np.ndarray
    seed: int


def evaluate(phi, problem: Problem, seed: int) -> Evaluation:
    """One forward run, its reversal, and the hypergradient in phi-space."""
    layout = problem.phi_layout
    sched = transform(phi, layout)
    L = problem.make_loss(seed, sched.theta)
    w1 = problem.initial_weights(seed, sched.theta)
    state = train.TrainState.initial(w1, frac_bits=problem.frac_bits)
    final = train.sgd_forward(state, sched, L, problem.group_ids)
    w_T = final.w.to_float()
    f_val, d_wT = ad.value_and_grad(problem.objective, w_T)
    res, _ = train.sgd_reverse(final, sched, L, problem.group_ids, d_wT)
    d_phi = chain_to_phi(res, phi, layout, problem.init_theta_grad(res.d_w1, w1))
    return Evaluation(float(f_val), d_phi, res, w_T, seed)


def hypergrad_avg(phi, problem: Problem, seeds) -> tuple[float, np.ndarray, list[Evaluation]]:
    """Mean meta-loss and phi-gradient over ``seeds``."""
    seeds = list(seeds)
    if not seeds:
        raise ValueError("need at least one seed")
    evals = []
    for s in seeds:
        try:
            evals.append(evaluate(phi, problem, s))
        except (FloatingPointError, OverflowError) as exc:
            raise type(exc)(f"seed {s}: {exc}") from None
    loss = float(np.mean([e.meta_loss for e in evals]))
    grad = np.mean([e.d_phi for e in evals], axis=0)
    return loss, grad, evals


# --- Adam --------------------------------------------------------------------

@dataclass
class MetaState:
    phi: np.ndarray
    m: np.ndarray
    u: np.ndarray
    k: int = 0
    step: float = 0.04
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def start(cls, phi, step=0.04, **kw) -> "MetaState":
        phi = np.array(phi, dtype=np.float64)
        return cls(phi, np.zeros_like(phi), np.zeros_like(phi), 0, step, **kw)


def adam_step(state: MetaState, g) -> MetaState:
    """One bias-corrected Adam update (descent on ``g``)."""
    g = np.asarray(g, dtype=np.float64)
    if g.shape != state.phi.shape:
        raise ValueError(f"gradient shape {g.shape} != phi shape {state.phi.shape}")
    k = state.k + 1
    m = state.beta1 * state.m + (1 - state.beta1) * g
    u = state.beta2 * state.u + (1 - state.beta2) * g * g
    m_hat = m / (1 - state.beta1**k)
    u_hat = u / (1 - state.beta2**k)
    phi = state.phi - state.step * m_hat / (np.sqrt(u_hat) + state.eps)
    return MetaState(phi, m, u, k, state.step, state.beta1, state.beta2, state.eps)


# --- meta loop -----------------------------------------------------------------

@dataclass
class MetaResult:
    phi: np.ndarray
    schedules: Schedules
    curve: list = field(default_factory=list)
    stopped_early: bool = False
    stop_reason: str = ""

    def curve_rows(self):
        return [(r["meta_iter"], r["elementary_final_loss"], r["hypergrad_norm"])
                for r in self.curve]


def meta_optimize(problem: Problem, phi0, meta_iters: int, num_seeds: int = 1,
                  step: float = 0.04, mask=None, seed_base: int = 0,
                  growth_limit: float = 10.0, callback=None) -> MetaResult:
    """Adam on the seed-averaged hypergradient for ``meta_iters`` iterations.

    Entries of phi outside ``mask`` stay fixed. Stops early once the
    hypergradient norm exceeds ``growth_limit`` times its first value, or if
    training diverges, keeping the last stable phi.
    """
    layout = problem.phi_layout
    mask = np.ones(layout.size, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    state = MetaState.start(phi0, step)
    result = MetaResult(state.phi.copy(), transform(state.phi, layout))
    first_norm = None
    for it in range(meta_iters):
        seeds = [seed_base + it * num_seeds + j for j in range(num_seeds)]
        try:
            loss, grad, _ = hypergrad_avg(state.phi, problem, seeds)
        except (FloatingPointError, OverflowError) as exc:
            result.stopped_early, result.stop_reason = True, f"diverged: {exc}"
            log.warning("meta-iteration %d diverged: %s", it, exc)
            break
        grad = np.where(mask, grad, 0.0)
        norm = float(np.linalg.norm(grad))
        result.curve.append({"meta_iter": it, "elementary_final_loss": loss,
                             "hypergrad_norm": norm})
        if callback is not None:
            callback(it, loss, norm)
        if first_norm is None:
            first_norm = norm
        elif first_norm > 0 and norm > growth_limit * first_norm:
            result.stopped_early = True
            result.stop_reason = f"hypergradient norm grew {norm / first_norm:.1f}x"
            break
        state = adam_step(state, grad)
        result.phi = state.phi.copy()
        result.schedules = transform(state.phi, layout)
    return result
