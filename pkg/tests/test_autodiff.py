import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cfee import autodiff as ad
from oracles import assert_grad_close, category, numeric_grad


def grad_of(fn, *arrays):
    tape = ad.Tape()
    leaves = [tape.leaf(a) for a in arrays]
    out = fn(*leaves)
    return out, tape.gradient(out, leaves)


def check_primitive(fn, *arrays, eps=1e-6):
    """Analytic gradient of sum(w * fn(x...)) against central differences."""
    rng = np.random.default_rng(7)
    probe = None

    def scalar(*xs):
        nonlocal probe
        y = fn(*xs)
        if probe is None:
            probe = rng.normal(size=ad.value(y).shape)
        return ad.sum(y * probe)

    _, grads = grad_of(scalar, *arrays)
    for i, x in enumerate(arrays):
        x = x.copy()
        others = list(arrays)

        def f():
            others[i] = x
            return float(scalar(*[ad.Tensor(o) for o in others]).data)

        assert_grad_close(grads[i], numeric_grad(f, x, eps))


def test_square_derivative():
    tape = ad.Tape()
    x = tape.leaf(3.0)
    (g,) = tape.gradient(x * x, [x])
    assert g == 6.0


def test_relu_values_and_adjoints():
    tape = ad.Tape()
    x = tape.leaf(np.array([-1.0, 2.0, 0.0]))
    y = ad.relu(x)
    assert y.data.tolist() == [0.0, 2.0, 0.0]
    (g,) = tape.gradient(ad.sum(y), [x])
    assert g.tolist() == [0.0, 1.0, 0.0]  # subgradient 0 at 0


def test_sum_gradient_is_ones():
    _, (g,) = grad_of(lambda x: ad.sum(x), np.arange(4.0))
    assert np.array_equal(g, np.ones(4))


def test_constant_function_has_zero_gradient():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    (g,) = tape.gradient(ad.Tensor(5.0), [x])
    assert np.array_equal(g, np.zeros(3))


def test_unused_leaf_gets_zero():
    tape = ad.Tape()
    x, y = tape.leaf(2.0), tape.leaf(np.ones(2))
    gx, gy = tape.gradient(x * x, [x, y])
    assert gx == 4.0 and np.array_equal(gy, np.zeros(2))


def test_mean_over_set_gives_one_over_n():
    x = np.arange(6.0)
    out, (g,) = grad_of(lambda t: ad.sum(ad.mean_over_set(t, [[0, 2, 5]])), x)
    assert out.data == pytest.approx((0 + 2 + 5) / 3)
    assert np.allclose(g, [1 / 3, 0, 1 / 3, 0, 0, 1 / 3])


def test_mean_over_empty_set_is_zero():
    out = ad.mean_over_set(np.ones((2, 3)), [[], [1]], axis=1)
    assert np.array_equal(out.data, [[0.0, 1.0], [0.0, 1.0]])


def test_non_scalar_output_rejected():
    tape = ad.Tape()
    x = tape.leaf(np.ones(3))
    with pytest.raises(ValueError):
        tape.gradient(x * 2.0, [x])


def test_foreign_tape_rejected():
    t1, t2 = ad.Tape(), ad.Tape()
    x = t1.leaf(1.0)
    y = t2.leaf(1.0)
    with pytest.raises(ValueError):
        t1.gradient(x * 2.0, [y])
    with pytest.raises(ValueError):
        t2.gradient(x * 2.0, [y])


def test_constants_record_nothing():
    y = ad.relu(ad.Tensor([1.0, -1.0])) + 1.0
    assert y.tape is None


def test_backward_leaves_forward_values_alone():
    rng = np.random.default_rng(0)
    tape = ad.Tape()
    x = tape.leaf(rng.normal(size=(4, 3)))
    h = ad.sigmoid(x) * ad.relu(x)
    before = h.data.copy()
    tape.gradient(ad.sum(h), [x])
    assert np.array_equal(h.data, before)


def test_gradients_are_bitwise_repeatable():
    rng = np.random.default_rng(1)
    w, x = rng.normal(size=(8, 3)), rng.normal(size=(3, 5, 4, 4))

    def f(w, x):
        return ad.sum(ad.category_mean(ad.relu(ad.affine(w, x))))

    _, g1 = grad_of(f, w, x)
    _, g2 = grad_of(f, w, x)
    assert all(np.array_equal(a, b) for a, b in zip(g1, g2))


rng = np.random.default_rng(3)
A = rng.normal(size=(3, 4))
B = rng.normal(size=(3, 4))
POS = rng.uniform(0.5, 2.0, size=(3, 4))


@pytest.mark.parametrize(
    "fn,args",
    [
        (ad.add, (A, B)),
        (ad.sub, (A, B)),
        (ad.mul, (A, B)),
        (ad.div, (A, POS)),
        (lambda x: ad.scale(x, -2.5), (A,)),
        (ad.relu, (A,)),
        (ad.sigmoid, (A,)),
        (ad.log1p, (POS,)),
        (ad.exp, (A,)),
        (ad.square, (A,)),
        (lambda x: ad.sum(x, axis=0), (A,)),
        (lambda x: ad.sum(x, axis=1, keepdims=True), (A,)),
        (lambda x: ad.mean(x, axis=1), (A,)),
        (ad.matmul, (A, B.T)),
        (lambda x: ad.reshape(x, (4, 3)), (A,)),
        (lambda x: ad.swapaxes(x, 0, 1), (A,)),
        (lambda x: ad.expand_dims(x, 1), (A,)),
        (lambda x, y: ad.concat([x, y], axis=0), (A, B)),
        (lambda x: x[1:, ::2], (A,)),
        (lambda x: ad.mean_over_set(x, [[0, 1], [3], []], axis=1), (A,)),
        (lambda x, y: ad.add(x, ad.sum(y, axis=0)), (A, B)),  # broadcast
        (lambda x, y: ad.mul(x, y[:1]), (A, B)),
    ],
)
def test_primitive_gradients(fn, args):
    check_primitive(fn, *args)


def test_diagonal_gradient():
    check_primitive(ad.diagonal, rng.normal(size=(2, 3, 3)))


def test_affine_gradient():
    check_primitive(ad.affine, rng.normal(size=(8, 3)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=8))


@pytest.mark.parametrize("K", [1, 2, 3, 9])  # 9 takes the sum-based pooling path
def test_category_mean_gradient(K):
    check_primitive(ad.category_mean, rng.normal(size=(4, 2, K, K)))


@pytest.mark.parametrize("n", [1, 2, 4])
def test_neighbor_mean_gradient(n):
    check_primitive(lambda x: ad.neighbor_mean(x, -3), rng.normal(size=(2, n, 3, 3)))


def category_mean_loops(G):
    f, K = G.shape[0], G.shape[-1]
    q = f // 4
    out = np.zeros_like(G)
    for k in range(K):
        for j in range(K):
            for c in range(4):
                members = [(kp, jp) for kp in range(K) for jp in range(K) if category(k, j, kp, jp) == c + 1]
                if members:
                    blk = G[c * q:(c + 1) * q]
                    out[c * q:(c + 1) * q, ..., k, j] = sum(blk[..., kp, jp] for kp, jp in members) / len(members)
    return out


@settings(max_examples=30, deadline=None)
@given(K=st.integers(1, 10), q=st.integers(1, 3), seed=st.integers(0, 2**31))
def test_category_mean_matches_loops(K, q, seed):
    G = np.random.default_rng(seed).normal(size=(4 * q, 2, K, K))
    assert np.allclose(ad.category_mean(G).data, category_mean_loops(G), rtol=1e-12, atol=1e-12)


@settings(max_examples=30, deadline=None)
@given(K=st.integers(1, 10), seed=st.integers(0, 2**31))
def test_category_mean_is_self_adjoint(K, seed):
    r = np.random.default_rng(seed)
    x, y = r.normal(size=(8, K, K)), r.normal(size=(8, K, K))
    lhs = np.sum(ad.category_mean(x).data * y)
    rhs = np.sum(x * ad.category_mean(y).data)
    assert lhs == pytest.approx(rhs, rel=1e-12, abs=1e-12)


def test_neighbor_mean_excludes_self():
    x = np.array([1.0, 2.0, 6.0])
    assert np.allclose(ad.neighbor_mean(x, 0).data, [4.0, 3.5, 1.5])
    assert np.array_equal(ad.neighbor_mean(np.array([5.0]), 0).data, [0.0])


def test_relu_pattern_probe():
    with ad.relu_patterns() as probe:
        ad.relu(np.array([-1.0, 1.0]))
        ad.relu(np.array([2.0]))
    assert [p.tolist() for p in probe] == [[False, True], [True]]
    ad.relu(np.array([1.0]))
    assert len(probe) == 2  # probe closed


def test_sigmoid_is_stable_for_large_inputs():
    y = ad.sigmoid(np.array([-800.0, 0.0, 800.0])).data
    assert np.all(np.isfinite(y))
    assert y.tolist() == [0.0, 0.5, 1.0]


@pytest.mark.parametrize("K", [9, 12, 15])
def test_large_k_pooling_matches_loops(K):
    G = np.random.default_rng(K).normal(size=(8, 2, K, K))
    assert np.allclose(ad.category_mean(G).data, category_mean_loops(G), rtol=1e-12, atol=1e-12)


def test_affine_relu_matches_composition():
    r = np.random.default_rng(30)
    w, x, b = r.normal(size=(8, 3)), r.normal(size=(3, 2, 4, 4)), r.normal(size=8)
    fused = ad.affine_relu(w, x, b).data
    assert np.array_equal(fused, ad.relu(ad.affine(w, x, b)).data)
    with ad.relu_patterns() as probe:
        ad.affine_relu(w, x, b)
    assert np.array_equal(probe[0], fused > 0)


def test_affine_relu_gradient():
    check_primitive(ad.affine_relu, rng.normal(size=(8, 3)), rng.normal(size=(3, 2, 3, 3)), rng.normal(size=8))
