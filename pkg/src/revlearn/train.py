"""SGD with momentum on fixed-point state, and its exact reversal.

Forward iteration ``t`` (0-based here) with loss ``L(w, theta, t)``::

    g     = grad_w L(w_t, theta, t)          # float math on dequantized w
    v'    = rat_mul(v_t, gamma_t) - Q((1 - gamma_t) g)
    w_t+1 = w_t + Q(alpha_t v')              # position uses the new velocity

``Q`` rounds to fixed point. Every step is an exact integer operation or the
ratio multiply from :mod:`revlearn.revbuf`, so the reverse pass recovers
``(w_t, v_t)`` bit for bit while accumulating adjoints of ``f(w_T)``.

Schedules are per (iteration, group); ``group_ids`` maps each parameter to
its group.
"""

from __future__ import annotations

import hashlib
import logging
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import autodiff as ad
from .fixed import (DEFAULT_FRAC_BITS, FixedRangeError, FixedVec, dequantize_vec,
                    quantize_vec)
from .revbuf import (BufferIntegrityError, Ratio, buffers_empty, empty_buffers,
                     pack_values, rat_mul_inverse_vec, rat_mul_vec, total_bits,
                     unpack_values)

log = logging.getLogger(__name__)

Loss = Callable  # L(w, theta, t) -> scalar, written with autodiff primitives


class TrainingError(FloatingPointError):
    pass


# --- schedules ---------------------------------------------------------------

@dataclass
class Schedules:
    """Learning rates and rational decays per (iteration, group), plus theta."""

    alphas: np.ndarray
    gamma_n: np.ndarray
    gamma_d: np.ndarray
    theta: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        self.alphas = np.atleast_2d(np.asarray(self.alphas, dtype=np.float64))
        self.gamma_n = np.asarray(self.gamma_n, dtype=np.int64).reshape(self.alphas.shape)
        self.gamma_d = np.asarray(self.gamma_d, dtype=np.int64).reshape(self.alphas.shape)
        self.theta = np.asarray(self.theta, dtype=np.float64)
        if self.alphas.size and self.alphas.min() <= 0:
            raise ValueError("learning rates must be positive")
        for n, d in zip(self.gamma_n.ravel(), self.gamma_d.ravel()):
            Ratio(int(n), int(d))

    @property
    def T(self) -> int:
        return self.alphas.shape[0]

    @property
    def num_groups(self) -> int:
        return self.alphas.shape[1]

    @property
    def gammas(self) -> np.ndarray:
        return self.gamma_n / self.gamma_d

    def ratio(self, t, g) -> Ratio:
        return Ratio(int(self.gamma_n[t, g]), int(self.gamma_d[t, g]))

    @classmethod
    def constant(cls, T, num_groups, alpha, gamma, theta=()):
        r = gamma if isinstance(gamma, Ratio) else Ratio.from_float(gamma)
        shape = (T, num_groups)
        return cls(np.full(shape, float(alpha)), np.full(shape, r.n), np.full(shape, r.d),
                   np.asarray(theta, dtype=np.float64))

    @classmethod
    def from_floats(cls, alphas, gammas, theta=()):
        gammas = np.asarray(gammas, dtype=np.float64)
        ratios = [Ratio.from_float(float(x)) for x in gammas.ravel()]
        n = np.array([r.n for r in ratios], dtype=np.int64).reshape(gammas.shape)
        d = np.array([r.d for r in ratios], dtype=np.int64).reshape(gammas.shape)
        return cls(alphas, n, d, theta)


@dataclass
class TrainState:
    w: FixedVec
    v: FixedVec
    buffers: np.ndarray
    t: int = 0
    losses: list = field(default_factory=list)

    @classmethod
    def initial(cls, w1, v1=None, frac_bits=DEFAULT_FRAC_BITS) -> "TrainState":
        w = quantize_vec(w1, frac_bits)
        v = quantize_vec(np.zeros(len(w)) if v1 is None else v1, frac_bits)
        return cls(w, v, empty_buffers(len(w)), 0)

    def copy(self) -> "TrainState":
        return TrainState(FixedVec(self.w.raw.copy(), self.w.frac_bits),
                          FixedVec(self.v.raw.copy(), self.v.frac_bits),
                          self.buffers.copy(), self.t, list(self.losses))


@dataclass
class HypergradResult:
    d_w1: np.ndarray
    d_v1: np.ndarray
    d_alpha: np.ndarray
    d_gamma: np.ndarray
    d_theta: np.ndarray
    loss_trace: np.ndarray


def _per_element(row, group_ids):
    """Collapse to a scalar when every group shares the value."""
    if np.all(row == row[0]):
        return row[0].item()
    return row[group_ids]


def _quantize_update(x, frac_bits, t, what):
    try:
        return quantize_vec(x, frac_bits)
    except FixedRangeError as exc:
        raise FixedRangeError(f"iteration {t}: {what}: {exc}") from None


def _checked_add(a: np.ndarray, b: np.ndarray, t):
    s = a + b
    # two's-complement overflow: operands agree in sign, result does not
    if np.any(((a ^ s) & (b ^ s)) < 0):
        raise FixedRangeError(f"iteration {t}: parameter left the fixed-point range")
    return s


def _gradient(L, w, theta, t):
    try:
        value, g = ad.loss_grad(L, w, theta, t)
    except ad.NumericError as exc:
        raise TrainingError(f"iteration {t}: {exc}") from None
    if not np.isfinite(g).all():
        raise TrainingError(f"iteration {t}: non-finite gradient")
    return value, g


# --- forward -----------------------------------------------------------------

def sgd_forward(init: TrainState, sched: Schedules, L: Loss, group_ids: np.ndarray,
                T: int | None = None, record: "Trajectory | None" = None) -> TrainState:
    """Run iterations ``init.t .. T-1``; returns a new state with filled buffers.

    Passing an empty :class:`Trajectory` as ``record`` caches every dequantized
    ``(w_t, v_t)``, which is what :func:`naive_reverse` consumes.
    """
    T = sched.T if T is None else T
    state = init.copy()
    fb = state.w.frac_bits
    w_raw, v_raw, bufs = state.w.raw, state.v.raw, state.buffers
    scale = 2.0**-fb
    if record is not None:
        record.ws.append(w_raw * scale)
        record.vs.append(v_raw * scale)
    for t in range(state.t, T):
        alpha = _per_element(sched.alphas[t], group_ids)
        n = _per_element(sched.gamma_n[t], group_ids)
        d = _per_element(sched.gamma_d[t], group_ids)
        loss, g = _gradient(L, w_raw * scale, sched.theta, t)
        step = _quantize_update((1.0 - n / d) * g, fb, t, "velocity update")
        bufs, v_raw = rat_mul_vec(bufs, v_raw, n, d)
        v_raw = _checked_add(v_raw, -step.raw, t)
        move = _quantize_update(alpha * (v_raw * scale), fb, t, "position update")
        w_raw = _checked_add(w_raw, move.raw, t)
        state.losses.append(loss)
        if record is not None:
            record.ws.append(w_raw * scale)
            record.vs.append(v_raw * scale)
            record.losses.append(loss)
    return TrainState(FixedVec(w_raw, fb), FixedVec(v_raw, fb), bufs, max(T, state.t),
                      state.losses)


# --- reverse -----------------------------------------------------------------

def sgd_reverse(final: TrainState, sched: Schedules, L: Loss, group_ids: np.ndarray,
                d_wT, d_vT=None, check_empty=True) -> tuple[HypergradResult, TrainState]:
    """Unwind ``final`` to iteration 0 while back-propagating ``(d_wT, d_vT)``.

    Returns the hypergradients and the recovered initial state. Buffers must
    drain to zero; anything else means the forward run used a different
    configuration.
    """
    T = final.t
    if T > sched.T:
        raise ValueError(f"state is at iteration {T} but schedules cover {sched.T}")
    fb = final.w.frac_bits
    scale = 2.0**-fb
    G = sched.num_groups
    w_raw, v_raw, bufs = final.w.raw.copy(), final.v.raw.copy(), final.buffers.copy()
    dw = np.array(d_wT, dtype=np.float64)
    dv = np.zeros_like(dw) if d_vT is None else np.array(d_vT, dtype=np.float64)
    d_theta = np.zeros_like(sched.theta)
    d_alpha = np.zeros((sched.T, G))
    d_gamma = np.zeros((sched.T, G))
    losses = np.zeros(T)
    for t in range(T - 1, -1, -1):
        alpha = _per_element(sched.alphas[t], group_ids)
        n = _per_element(sched.gamma_n[t], group_ids)
        d = _per_element(sched.gamma_d[t], group_ids)
        gamma = n / d
        v_new = v_raw * scale
        move = quantize_vec(alpha * v_new, fb)
        w_raw = w_raw - move.raw
        d_alpha[t] = np.bincount(group_ids, weights=dw * v_new, minlength=G)
        dv += alpha * dw
        u = (1.0 - gamma) * dv
        try:
            losses[t], g, h_ww, h_tw = ad.grad_and_hvps(L, w_raw * scale, sched.theta, t, u)
        except ad.NumericError as exc:
            raise TrainingError(f"iteration {t}: {exc}") from None
        step = quantize_vec((1.0 - gamma) * g, fb)
        v_raw = v_raw + step.raw
        bufs, v_raw = rat_mul_inverse_vec(bufs, v_raw, n, d)
        d_gamma[t] = np.bincount(group_ids, weights=dv * (v_raw * scale + g), minlength=G)
        dw -= h_ww
        d_theta -= h_tw
        dv *= gamma
    if check_empty and not buffers_empty(bufs):
        raise BufferIntegrityError(
            "buffers not empty after reversal: forward and reverse configurations differ")
    result = HypergradResult(dw, dv, d_alpha, d_gamma, d_theta, losses)
    start = TrainState(FixedVec(w_raw, fb), FixedVec(v_raw, fb), bufs, 0)
    return result, start


# --- naive oracle ------------------------------------------------------------

@dataclass
class Trajectory:
    ws: list = field(default_factory=list)
    vs: list = field(default_factory=list)
    losses: list = field(default_factory=list)


def float_forward(w1, sched: Schedules, L: Loss, group_ids, v1=None,
                  gammas=None) -> Trajectory:
    """Plain float64 SGD with momentum, storing every (w_t, v_t).

    ``gammas`` overrides the rational decays with arbitrary floats.
    """
    gammas = sched.gammas if gammas is None else np.asarray(gammas, dtype=np.float64)
    w = np.array(w1, dtype=np.float64)
    v = np.zeros_like(w) if v1 is None else np.array(v1, dtype=np.float64)
    ws, vs, losses = [w.copy()], [v.copy()], []
    for t in range(sched.T):
        alpha = sched.alphas[t][group_ids]
        gamma = gammas[t][group_ids]
        loss, g = _gradient(L, w, sched.theta, t)
        v = gamma * v - (1.0 - gamma) * g
        w = w + alpha * v
        ws.append(w.copy())
        vs.append(v.copy())
        losses.append(loss)
    return Trajectory(ws, vs, losses)


def naive_reverse(traj: Trajectory, sched: Schedules, L: Loss, group_ids, d_wT,
                  d_vT=None, gammas=None) -> HypergradResult:
    """Hypergradients from a cached float trajectory (memory O(T * dim))."""
    gammas = sched.gammas if gammas is None else np.asarray(gammas, dtype=np.float64)
    G = sched.num_groups
    T = len(traj.ws) - 1
    dw = np.array(d_wT, dtype=np.float64)
    dv = np.zeros_like(dw) if d_vT is None else np.array(d_vT, dtype=np.float64)
    d_theta = np.zeros_like(sched.theta)
    d_alpha = np.zeros((sched.T, G))
    d_gamma = np.zeros((sched.T, G))
    losses = np.zeros(T)
    for t in range(T - 1, -1, -1):
        alpha = sched.alphas[t][group_ids]
        gamma = gammas[t][group_ids]
        w_t, v_t, v_next = traj.ws[t], traj.vs[t], traj.vs[t + 1]
        d_alpha[t] = np.bincount(group_ids, weights=dw * v_next, minlength=G)
        dv = dv + alpha * dw
        losses[t], g, h_ww, h_tw = ad.grad_and_hvps(L, w_t, sched.theta, t, (1.0 - gamma) * dv)
        d_gamma[t] = np.bincount(group_ids, weights=dv * (v_t + g), minlength=G)
        dw = dw - h_ww
        d_theta = d_theta - h_tw
        dv = gamma * dv
    return HypergradResult(dw, dv, d_alpha, d_gamma, d_theta, losses)


def float_reverse(w_T, v_T, sched: Schedules, L: Loss, group_ids):
    """Undo float SGD by dividing by gamma, with no stored bits.

    This is the procedure that fails: rounding error is amplified by
    ``1/gamma`` every step. Returns the recovered ``(w_1, v_1)``; values may
    be inf/nan once the error explodes.
    """
    w = np.array(w_T, dtype=np.float64)
    v = np.array(v_T, dtype=np.float64)
    gammas = sched.gammas
    with np.errstate(all="ignore"):
        for t in range(sched.T - 1, -1, -1):
            alpha = sched.alphas[t][group_ids]
            gamma = gammas[t][group_ids]
            w = w - alpha * v
            if not np.isfinite(w).all():
                return w, v
            try:
                _, g = ad.loss_grad(L, w, sched.theta, t)
            except ad.NumericError:
                return np.full_like(w, np.nan), v
            v = (v + (1.0 - gamma) * g) / gamma
    return w, v


# --- memory accounting -------------------------------------------------------

@dataclass
class MemoryReport:
    steps: int
    elements: int
    buffer_bits_total: float
    buffer_bits_per_step_per_element: float
    naive_bits_equivalent: float
    ratio: float

    def as_dict(self):
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


def memory_report(state: TrainState, word_bits: int = 32) -> MemoryReport:
    """Buffer storage of a completed forward run against caching a word per step."""
    T, n = state.t, len(state.w)
    bits = total_bits(state.buffers)
    per = bits / (T * n) if T and n else 0.0
    ratio = float("inf") if per == 0 else word_bits / per
    return MemoryReport(T, n, bits, per, float(word_bits * T * n), ratio)


# --- checkpoints -------------------------------------------------------------
# Layout (little-endian):
#   b"RVLS" | u16 version | u16 frac_bits | u64 t | 32-byte config hash
#   | u32 count, count x i64 w raw
#   | v records as written by revbuf.pack_values (raw + buffer digits)

_MAGIC = b"RVLS"
_VERSION = 1


def config_hash(text: str | bytes) -> bytes:
    if isinstance(text, str):
        text = text.encode()
    return hashlib.sha256(text).digest()


def dump_state(state: TrainState, cfg_hash: bytes = b"\0" * 32) -> bytes:
    if len(cfg_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    w = state.w.raw.astype("<i8")
    head = _MAGIC + struct.pack("<HHQ", _VERSION, state.w.frac_bits, state.t) + cfg_hash
    return b"".join([head, struct.pack("<I", len(w)), w.tobytes(),
                     pack_values(state.v.raw, state.buffers)])


def load_state(blob: bytes, expect_hash: bytes | None = None) -> TrainState:
    if blob[:4] != _MAGIC:
        raise ValueError("not a revlearn checkpoint")
    version, fb, t = struct.unpack_from("<HHQ", blob, 4)
    if version != _VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 4 + 12
    cfg_hash = blob[off:off + 32]
    off += 32
    if expect_hash is not None and cfg_hash != expect_hash:
        raise BufferIntegrityError("checkpoint was written under a different configuration")
    (count,) = struct.unpack_from("<I", blob, off)
    off += 4
    w = np.frombuffer(blob, dtype="<i8", count=count, offset=off).astype(np.int64)
    off += 8 * count
    v, bufs, _ = unpack_values(blob, off)
    if len(v) != count:
        raise ValueError("checkpoint w and v lengths differ")
    return TrainState(FixedVec(w, fb), FixedVec(v, fb), bufs, t)


def save_state(path, state: TrainState, cfg_hash: bytes = b"\0" * 32):
    with open(path, "wb") as fh:
        fh.write(dump_state(state, cfg_hash))


def read_state(path, expect_hash: bytes | None = None) -> TrainState:
    with open(path, "rb") as fh:
        return load_state(fh.read(), expect_hash)


def dequantized(state: TrainState) -> tuple[np.ndarray, np.ndarray]:
    return dequantize_vec(state.w), dequantize_vec(state.v)
