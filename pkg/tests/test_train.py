import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from revlearn import autodiff as ad
from revlearn import train
from revlearn.fixed import FixedRangeError, FixedVec
from revlearn.revbuf import BufferIntegrityError, Ratio, buffers_empty
from revlearn.verify import exact_hypergrad, fd_probes, float_hypergrad, toy_logistic

from oracles import rel_err


def half_square(w, theta, t):
    return 0.5 * ad.vsum(w * w)


def wiggly(w, theta, t):
    # nonconvex, t-dependent, uses theta
    return ad.vsum(ad.tanh(w * (1.0 + 0.1 * t)) * ad.exp(theta[0] * w)) + 0.1 * ad.vsum(w * w)


def run_pair(L, w1, sched, gids, v1=None):
    st0 = train.TrainState.initial(w1, v1)
    final = train.sgd_forward(st0, sched, L, gids)
    res, back = train.sgd_reverse(final, sched, L, gids, np.ones(len(w1)))
    return st0, final, res, back


def test_one_step_quadratic_by_hand():
    sched = train.Schedules.constant(1, 1, 1.0, Ratio(1, 2))
    st0 = train.TrainState.initial([1.0])
    final = train.sgd_forward(st0, sched, half_square, np.zeros(1, dtype=np.int64))
    w2, v2 = train.dequantized(final)
    assert v2[0] == -0.5 and w2[0] == 0.5
    d_wT = w2                               # f = w^2 / 2
    res, back = train.sgd_reverse(final, sched, half_square, np.zeros(1, dtype=np.int64), d_wT)
    assert res.d_alpha[0, 0] == pytest.approx(-0.25, abs=1e-12)
    assert res.d_gamma[0, 0] == pytest.approx(0.5, abs=1e-12)
    assert res.d_w1[0] == pytest.approx(0.25, abs=1e-12)
    assert back.w == st0.w and back.v == st0.v
    # the cached-trajectory oracle gives the same analytic values
    traj = train.float_forward([1.0], sched, half_square, np.zeros(1, dtype=np.int64))
    ref = train.naive_reverse(traj, sched, half_square, np.zeros(1, dtype=np.int64), traj.ws[-1])
    assert ref.d_alpha[0, 0] == -0.25 and ref.d_gamma[0, 0] == 0.5


def test_zero_iterations():
    sched = train.Schedules.constant(0, 1, 0.1, 0.9)
    w1 = np.array([0.25, -1.0])
    st0 = train.TrainState.initial(w1)
    final = train.sgd_forward(st0, sched, half_square, np.zeros(2, dtype=np.int64))
    assert final.w == st0.w and final.v == st0.v and final.t == 0
    d = np.array([3.0, -2.0])
    res, _ = train.sgd_reverse(final, sched, half_square, np.zeros(2, dtype=np.int64), d)
    assert np.array_equal(res.d_w1, d)
    assert res.d_alpha.size == 0 and res.d_gamma.size == 0 and not res.d_theta.any()


def test_gamma_one_stores_nothing():
    # with gamma = 1 the (1 - gamma) gradient term vanishes: free motion, velocity conserved
    sched = train.Schedules.constant(200, 1, 0.01, Ratio(1, 1))
    gids = np.zeros(3, dtype=np.int64)
    st0, final, res, back = run_pair(half_square, [1.0, -0.5, 0.2], sched, gids,
                                     v1=[0.3, 0.1, -0.2])
    assert buffers_empty(final.buffers)
    assert final.v == st0.v
    assert train.memory_report(final).ratio == float("inf")
    assert back.w == st0.w


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["1/2", "2/3", "7/8", "9/10", "49/50"]))
def test_bit_exact_reversal(seed, gamma):
    rng = np.random.default_rng(seed)
    dim, T = 60, 80
    gids = rng.integers(0, 3, dim)
    alphas = rng.uniform(0.05, 0.5, (T, 3))
    r = Ratio.parse(gamma)
    sched = train.Schedules(alphas, np.full((T, 3), r.n), np.full((T, 3), r.d), [0.2])
    st0, final, res, back = run_pair(wiggly, rng.standard_normal(dim), sched, gids)
    assert back.w == st0.w and back.v == st0.v and buffers_empty(back.buffers)
    assert back.t == 0


def test_determinism():
    toy = toy_logistic()
    a = train.sgd_forward(train.TrainState.initial(toy.w1), toy.sched, toy.L, toy.group_ids)
    b = train.sgd_forward(train.TrainState.initial(toy.w1), toy.sched, toy.L, toy.group_ids)
    assert a.w == b.w and a.v == b.v and list(a.buffers) == list(b.buffers)


def test_matches_cached_oracle():
    toy = toy_logistic()
    res, start, st0, final, rec, d_wT = exact_hypergrad(toy)
    ref = train.naive_reverse(rec, toy.sched, toy.L, toy.group_ids, d_wT)
    for key in ("d_w1", "d_v1", "d_alpha", "d_gamma", "d_theta"):
        assert rel_err(getattr(res, key), getattr(ref, key), floor=1e-300) <= 1e-6, key
    assert np.allclose(res.loss_trace, rec.losses, rtol=0, atol=0)


def test_naive_matches_finite_differences():
    toy = toy_logistic(T=20)
    res = float_hypergrad(toy)
    for kind, idx, an, fd in fd_probes(toy, res, 5, seed=1):
        assert abs(an - fd) <= 1e-5 * abs(fd), (kind, idx, an, fd)


def test_wrong_schedule_detected():
    toy = toy_logistic(T=30)
    final = train.sgd_forward(train.TrainState.initial(toy.w1), toy.sched, toy.L, toy.group_ids)
    other = train.Schedules(toy.sched.alphas, np.full_like(toy.sched.gamma_n, 7),
                            np.full_like(toy.sched.gamma_d, 8), toy.sched.theta)
    with pytest.raises(BufferIntegrityError):
        train.sgd_reverse(final, other, toy.L, toy.group_ids, np.zeros(len(toy.w1)))


def test_errors_carry_iteration():
    sched = train.Schedules.constant(5, 1, 1e6, 0.5)
    st0 = train.TrainState.initial([1.0])
    with pytest.raises(FixedRangeError, match="iteration"):
        train.sgd_forward(st0, sched, lambda w, th, t: 1e9 * ad.vsum(w * w),
                          np.zeros(1, dtype=np.int64))
    def blowup(w, th, t):
        return ad.vsum(ad.exp(w * 1e4)) if t == 2 else ad.vsum(w * w)
    with pytest.raises(train.TrainingError, match="iteration 2"):
        train.sgd_forward(st0, train.Schedules.constant(5, 1, 0.1, 0.5), blowup,
                          np.zeros(1, dtype=np.int64))


def test_resume_in_pieces():
    toy = toy_logistic(T=40)
    st0 = train.TrainState.initial(toy.w1)
    whole = train.sgd_forward(st0, toy.sched, toy.L, toy.group_ids)
    half = train.sgd_forward(st0, toy.sched, toy.L, toy.group_ids, T=17)
    rest = train.sgd_forward(half, toy.sched, toy.L, toy.group_ids)
    assert rest.w == whole.w and rest.t == 40


def test_checkpoint_round_trip(tmp_path):
    toy = toy_logistic(T=30)
    final = train.sgd_forward(train.TrainState.initial(toy.w1), toy.sched, toy.L, toy.group_ids)
    h = train.config_hash("cfg-a")
    path = tmp_path / "state.bin"
    train.save_state(path, final, h)
    loaded = train.read_state(path, h)
    assert loaded.w == final.w and loaded.v == final.v and loaded.t == 30
    assert list(loaded.buffers) == list(final.buffers)
    res, back = train.sgd_reverse(loaded, toy.sched, toy.L, toy.group_ids, np.ones(len(toy.w1)))
    assert back.w == train.TrainState.initial(toy.w1).w
    with pytest.raises(BufferIntegrityError):
        train.read_state(path, train.config_hash("cfg-b"))
    with pytest.raises(ValueError):
        train.load_state(b"nope" + path.read_bytes()[4:])
    with pytest.raises(ValueError):
        train.dump_state(final, b"short")


def test_memory_report():
    toy = toy_logistic(T=100, gamma_jitter=0.0, batch=200)
    final = train.sgd_forward(train.TrainState.initial(toy.w1), toy.sched, toy.L, toy.group_ids)
    rep = train.memory_report(final)
    assert rep.steps == 100 and rep.elements == len(toy.w1)
    assert rep.naive_bits_equivalent == 32 * 100 * len(toy.w1)
    assert rep.ratio == pytest.approx(32 / rep.buffer_bits_per_step_per_element)
    assert set(rep.as_dict()) >= {"buffer_bits_total", "ratio"}


def test_schedules_validation():
    with pytest.raises(ValueError):
        train.Schedules(np.full((2, 1), -0.1), np.ones((2, 1)), np.full((2, 1), 2))
    with pytest.raises(ValueError):
        train.Schedules(np.full((2, 1), 0.1), np.full((2, 1), 3), np.full((2, 1), 2))
    s = train.Schedules.from_floats(np.full((3, 2), 0.1), np.full((3, 2), 0.9))
    assert s.ratio(2, 1) == Ratio(9, 10) and s.T == 3 and s.num_groups == 2
