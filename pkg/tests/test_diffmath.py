import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st

from hiegnet import diffmath as dm


def T(a, grad=True):
    return dm.Tensor(np.array(a, dtype=np.float64), requires_grad=grad)


def away_from_zero(rng, shape, lo=0.1):
    """Entries with |x| >= lo so ReLU-type kinks stay out of finite-difference reach."""
    x = rng.uniform(lo, 1.5, shape)
    return x * rng.choice([-1.0, 1.0], shape)


def probe(out_fn, rng):
    """Scalar loss sum(out * R) with a fixed random R."""
    R = {}

    def f():
        o = out_fn()
        if "R" not in R:
            R["R"] = rng.normal(size=o.shape)
        return dm.total(dm.mul(o, dm.Tensor(R["R"])))

    return f


# each case: seed -> (function building the output, params)
def case_matmul(rng, n, m):
    a, b = T(rng.normal(size=(n, m))), T(rng.normal(size=(m, 3)))
    return lambda: dm.matmul(a, b), {"a": a, "b": b}


def case_linear_relu(rng, n, m):
    x, w, b = T(rng.normal(size=(n, m))), T(rng.normal(size=(m, 4))), T(rng.normal(size=(1, 4)))
    # keep pre-activations off zero
    pre = x.value @ w.value + b.value
    b.value = b.value + np.where(np.abs(pre).min(axis=0, keepdims=True) < 0.05, 0.2, 0.0)
    return lambda: dm.linear_relu(x, w, b), {"x": x, "w": w, "b": b}


def case_add_broadcast(rng, n, m):
    a, b = T(rng.normal(size=(n, m))), T(rng.normal(size=(1, m)))
    return lambda: dm.add(a, b), {"a": a, "b": b}


def case_add_n(rng, n, m):
    ts = [T(rng.normal(size=(n, m))) for _ in range(3)]
    return lambda: dm.add_n(ts), {str(i): t for i, t in enumerate(ts)}


def case_mul_scale(rng, n, m):
    a, b = T(rng.normal(size=(n, m))), T(rng.normal(size=(n, 1)))
    c = rng.normal(size=(1, m))
    return lambda: dm.scale(dm.mul(a, b), c), {"a": a, "b": b}


def case_concat(rng, n, m):
    a, b = T(rng.normal(size=(n, m))), T(rng.normal(size=(n, 2)))
    return lambda: dm.concat([a, b, a], axis=1), {"a": a, "b": b}


def case_relu(rng, n, m):
    a = T(away_from_zero(rng, (n, m)))
    return lambda: dm.relu(a), {"a": a}


def case_leaky(rng, n, m):
    a = T(away_from_zero(rng, (n, m)))
    return lambda: dm.leaky_relu(a, 0.2), {"a": a}


def case_gather(rng, n, m):
    a = T(rng.normal(size=(n, m)))
    idx = rng.integers(0, n, n + 3)
    return lambda: dm.gather_rows(a, idx), {"a": a}


def case_scatter(rng, n, m):
    a, b = T(rng.normal(size=(n, m))), T(rng.normal(size=(2, m)))
    ia = rng.permutation(n + 2)[:n]
    ib = np.array([0, n + 1])
    return lambda: dm.add(dm.scatter_rows(a, ia, n + 2), dm.scatter_sum([(a, ia), (b, ib)], n + 2, m)), {"a": a, "b": b}


def segs_for(rng, e, n):
    seg = np.sort(rng.integers(0, n, e)) if rng.random() < 0.5 else rng.integers(0, n, e)
    return dm.Segments(seg, n)


def case_segment_sum_mean(rng, n, m):
    x = T(rng.normal(size=(n + 3, m)))
    s = segs_for(rng, n + 3, max(n // 2, 1))
    return lambda: dm.concat([dm.segment_sum(x, s), dm.segment_mean(x, s)], axis=1), {"x": x}


def case_segment_softmax(rng, n, m):
    x = T(rng.normal(size=(n + 3, 1)))
    s = segs_for(rng, n + 3, max(n // 2, 1))
    return lambda: dm.segment_softmax(x, s), {"x": x}


def case_spmm(rng, n, m):
    a = sp.random(n + 1, n, density=0.5, random_state=int(rng.integers(1 << 30)), format="csr")
    x = T(rng.normal(size=(n, m)))
    return lambda: dm.spmm(a, x), {"x": x}


def edges(rng, n_src, n_dst, e):
    return rng.integers(0, n_src, e), rng.integers(0, n_dst, e), rng.random(e)


def case_gatv2(rng, n, m):
    src, dst, e = edges(rng, n, n, 2 * n)
    xs, xd = T(rng.normal(size=(n, m))), T(rng.normal(size=(n, m)))
    w, a = T(rng.normal(size=(1, m))), T(rng.normal(size=(m, 1)))
    z = xs.value[src] + xd.value[dst] + e[:, None] * w.value
    # shift away from the LeakyReLU kink
    w.value = w.value + np.where(np.abs(z).min(axis=0, keepdims=True) < 0.05, 0.3, 0.0)
    return lambda: dm.gatv2_scores(xs, xd, w, a, src, dst, e, 0.2), {"xs": xs, "xd": xd, "w": w, "a": a}


def case_weighted_sum(rng, n, m):
    src, seg, _ = edges(rng, n, n, 2 * n)
    al, x = T(rng.random((2 * n, 1))), T(rng.normal(size=(n, m)))
    return lambda: dm.weighted_sum(al, x, src, seg, n), {"alpha": al, "x": x}


def case_weighted_sum_segments(rng, n, m):
    src, seg, _ = edges(rng, n, n, 2 * n)
    al, x = T(rng.random((2 * n, 1))), T(rng.normal(size=(n, m)))
    segs = dm.Segments(seg, n)
    return lambda: dm.weighted_sum(al, x, src, segs, n), {"alpha": al, "x": x}


def case_gine(rng, n, m):
    src, seg, e = edges(rng, n, n, 2 * n)
    xs, w = T(away_from_zero(rng, (n, m), 0.3)), T(rng.uniform(-0.1, 0.1, (1, m)))
    return lambda: dm.gine_sum(xs, w, src, seg, e, n), {"xs": xs, "w": w}


def case_cross_entropy(rng, n, m):
    logits = T(rng.normal(size=(n, 3)))
    y = rng.integers(0, 3, n)
    w = rng.uniform(0.5, 2, 3)
    return lambda: dm.scale(dm.cross_entropy(logits, y, w), np.ones((1, 1))), {"logits": logits}


CASES = [case_matmul, case_linear_relu, case_add_broadcast, case_add_n, case_mul_scale, case_concat, case_relu,
         case_leaky, case_gather, case_scatter, case_segment_sum_mean, case_segment_softmax, case_spmm, case_gatv2,
         case_weighted_sum, case_weighted_sum_segments, case_gine, case_cross_entropy]


@pytest.mark.parametrize("case", CASES, ids=lambda c: c.__name__[5:])
@settings(max_examples=100)
@given(seed=st.integers(0, 2 ** 31), n=st.integers(2, 6), m=st.integers(1, 4))
def test_primitive_gradients(case, seed, n, m):
    rng = np.random.default_rng(seed)
    build, params = case(rng, n, m)
    f = probe(build, rng)
    assert dm.grad_check(f, params) < 1e-4


def test_grad_check_linear_is_exact():
    w = T([[0.3], [-1.2], [2.0]])
    x = dm.Tensor(np.array([[1.0, 2.0, 3.0]]))
    assert dm.grad_check(lambda: dm.total(dm.matmul(x, w)), {"w": w}) < 1e-9


def test_mlp_cross_entropy_grad():
    rng = np.random.default_rng(1)
    x = dm.Tensor(rng.normal(size=(8, 5)))
    w1, b1 = T(rng.normal(size=(5, 6))), T(rng.normal(size=(1, 6)) * 0.1)
    w2, b2 = T(rng.normal(size=(6, 3))), T(np.zeros((1, 3)))
    y = rng.integers(0, 3, 8)

    def f():
        h = dm.relu(dm.add(dm.matmul(x, w1), b1))
        return dm.cross_entropy(dm.add(dm.matmul(h, w2), b2), y)

    assert dm.grad_check(f, {"w1": w1, "b1": b1, "w2": w2, "b2": b2}) < 1e-4


def test_relu_backward_negative():
    a = T([[-1.0, 2.0]])
    with dm.Tape() as tape:
        out = dm.total(dm.relu(a))
    tape.backward(out)
    assert a.grad.tolist() == [[0.0, 1.0]]


def test_weighted_sum_paths_agree():
    rng = np.random.default_rng(4)
    src, seg = rng.integers(0, 7, 30), rng.integers(0, 5, 30)
    al, x = dm.Tensor(rng.random((30, 1))), dm.Tensor(rng.normal(size=(7, 3)))
    a = dm.weighted_sum(al, x, src, seg, 5).value
    b = dm.weighted_sum(al, x, src, dm.Segments(seg, 5), 5).value
    np.testing.assert_allclose(a, b, atol=1e-12)


def test_segment_sum_example():
    s = dm.Segments(np.array([0, 0, 1]), 2)
    assert dm.segment_sum(dm.Tensor([[1.0], [2.0], [3.0]]), s).value.tolist() == [[3.0], [3.0]]


@given(st.integers(1, 12), st.floats(-5, 5))
def test_segment_softmax_equal_scores(n, v):
    s = dm.Segments(np.zeros(n, np.int64), 1)
    a = dm.segment_softmax(dm.Tensor(np.full((n, 1), v)), s).value
    np.testing.assert_allclose(a, 1.0 / n, rtol=1e-12)


def test_shape_errors_name_shapes():
    with pytest.raises(dm.ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        dm.matmul(dm.Tensor(np.ones((2, 3))), dm.Tensor(np.ones((2, 3))))
    with pytest.raises(dm.ShapeError):
        dm.add(dm.Tensor(np.ones((2, 3))), dm.Tensor(np.ones((3, 2))))
    with pytest.raises(dm.ShapeError):
        dm.concat([dm.Tensor(np.ones((2, 3))), dm.Tensor(np.ones((3, 3)))], axis=1)


def test_tape_visits_each_op_once():
    a = T([[1.0, 2.0]])
    with dm.Tape() as tape:
        b = dm.relu(a)
        c = dm.mul(b, b)
        d = dm.total(c)
    n = len(tape.records)
    tape.backward(d)
    assert tape.visits == n == 3
    assert a.grad.tolist() == [[2.0, 4.0]]


# ---- dropout ----------------------------------------------------------------

def test_dropout_identity_and_reproducible():
    x = dm.Tensor(np.ones((5, 5)))
    assert dm.dropout(x, 0.0, None) is x
    assert dm.dropout(x, 0.5, np.random.default_rng(0), train=False) is x
    a = dm.dropout(x, 0.3, np.random.default_rng(7)).value
    b = dm.dropout(x, 0.3, np.random.default_rng(7)).value
    assert np.array_equal(a, b)


@pytest.mark.parametrize("p", [0.1, 0.5, 0.8])
def test_dropout_expected_mass(p):
    x = dm.Tensor(np.ones((100_000, 1)))
    kept = dm.dropout(x, p, np.random.default_rng(3)).value
    assert abs(kept.mean() - 1.0) <= 0.02


# ---- loss -------------------------------------------------------------------

def test_cross_entropy_values():
    big = np.array([[1000.0, 0.0, 0.0]])
    assert float(dm.cross_entropy(dm.Tensor(big), [0]).value) == pytest.approx(0.0, abs=1e-12)
    for c in (2, 3, 7):
        u = dm.cross_entropy(dm.Tensor(np.zeros((4, c))), np.arange(4) % c)
        assert float(u.value) == pytest.approx(math.log(c), rel=1e-12)


# ---- optimiser and schedule -------------------------------------------------

def test_adam_zero_gradient_keeps_params():
    p = {"w": np.array([1.0, -2.0])}
    dm.adam_step(p, {"w": np.zeros(2)}, dm.AdamState(), 0.01)
    assert p["w"].tolist() == [1.0, -2.0]


def test_adam_single_step(oracles):
    p = {"w": np.array([0.0])}
    dm.adam_step(p, {"w": np.array([1.0])}, dm.AdamState(), 0.001)
    assert p["w"][0] == pytest.approx(oracles["adam_one_step"], rel=1e-12)
    assert p["w"][0] == pytest.approx(-0.001, rel=1e-6)


def test_adam_constant_gradient_step_tends_to_lr():
    p = {"w": np.array([0.0])}
    st_ = dm.AdamState()
    prev = 0.0
    for _ in range(2000):
        dm.adam_step(p, {"w": np.array([3.0])}, st_, 0.01)
        step = prev - p["w"][0]
        prev = p["w"][0]
    assert step == pytest.approx(0.01, rel=1e-6)


def test_adam_rejects_non_finite():
    with pytest.raises(dm.NumericError):
        dm.adam_step({"w": np.zeros(1)}, {"w": np.array([np.nan])}, dm.AdamState(), 0.1)


def test_one_cycle(oracles):
    s = dm.OneCycleSchedule(total_steps=100)
    for step, lr in oracles["one_cycle"].items():
        assert dm.one_cycle_lr(s, int(step)) == pytest.approx(lr, rel=1e-12)
    assert dm.one_cycle_lr(s, 0) == pytest.approx(0.001 / 25)
    lrs = [dm.one_cycle_lr(s, k) for k in range(100)]
    peak = int(np.argmax(lrs))
    assert max(lrs) == 0.001
    assert all(x > 0 for x in lrs)
    assert all(a <= b for a, b in zip(lrs[:peak], lrs[1:peak + 1]))
    assert all(a >= b for a, b in zip(lrs[peak:], lrs[peak + 1:]))
    assert dm.one_cycle_lr(s, 500) == pytest.approx(0.001 / 1e4)


@given(st.integers(1, 2000), st.floats(0.05, 0.95))
def test_one_cycle_positive_and_peak(total, warm):
    s = dm.OneCycleSchedule(total_steps=total, warmup=warm)
    lrs = [dm.one_cycle_lr(s, k) for k in range(total)]
    assert min(lrs) > 0 and max(lrs) == pytest.approx(s.max_lr, rel=1e-12)


# ---- checkpoints ------------------------------------------------------------

def test_param_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    arrs = {"layer0/r_gg/W": rng.normal(size=(3, 4)), "head/b": rng.normal(size=(1, 3))}
    dm.save_params(tmp_path / "p.bin", arrs, {"seed": 4})
    back, meta = dm.load_params(tmp_path / "p.bin")
    assert meta == {"seed": 4}
    for k in arrs:
        assert np.array_equal(back[k], arrs[k])
    raw = (tmp_path / "p.bin").read_bytes()
    (tmp_path / "bad.bin").write_bytes(b"NOPE" + raw[4:])
    with pytest.raises(ValueError):
        dm.load_params(tmp_path / "bad.bin")
