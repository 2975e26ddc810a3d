import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from slad.errors import InvalidInputError, InvalidStateError, TrainingError
from slad.nn import (
    AdamState,
    DenseLayer,
    MlpNet,
    adam_step,
    finite_diff_check,
    jsd,
    jsd_grad_probs,
    jsd_softmax_grad,
    mlp_backward,
    softmax,
)

mpmath.mp.dps = 40

logits = arrays(np.float64, st.integers(2, 12), elements=st.floats(-30, 30))


def mp_jsd(p, y):
    """High-precision reference with the textbook definition."""
    p = [mpmath.mpf(v) for v in p]
    y = [mpmath.mpf(v) for v in y]
    m = [(a + b) / 2 for a, b in zip(p, y)]
    kl = lambda a, b: sum(x * mpmath.log(x / z) for x, z in zip(a, b) if x > 0)  # noqa: E731
    return (kl(p, m) + kl(y, m)) / 2


def test_softmax_known_values():
    np.testing.assert_allclose(softmax([1.0, 2.0, 3.0]), [0.09003057, 0.24472847, 0.66524096], atol=1e-8)


def test_softmax_shift_invariant_and_stable():
    v = np.array([1000.0, 1001.0, 999.0])
    np.testing.assert_allclose(softmax(v), softmax(v - 1000.0), rtol=0, atol=1e-15)
    assert np.all(np.isfinite(softmax(v)))


def test_softmax_rejects_empty():
    with pytest.raises(InvalidInputError):
        softmax(np.array([]))


def test_jsd_reference_value():
    assert jsd([0.8, 0.2], [0.5, 0.5]) == pytest.approx(float(mp_jsd([0.8, 0.2], [0.5, 0.5])), abs=1e-12)
    assert jsd([0.8, 0.2], [0.5, 0.5]) == pytest.approx(0.0506712, abs=1e-6)


def test_jsd_disjoint_support_is_ln2():
    assert jsd([1.0, 0.0], [0.0, 1.0]) == pytest.approx(np.log(2), abs=1e-10)


def test_jsd_length_mismatch():
    with pytest.raises(InvalidInputError):
        jsd([0.5, 0.5], [1.0, 0.0, 0.0])


@settings(max_examples=60, deadline=None)
@given(st.data())
def test_jsd_properties(data):
    a = data.draw(logits)
    b = data.draw(arrays(np.float64, a.shape, elements=st.floats(-30, 30)))
    p, y = softmax(a), softmax(b)
    v = jsd(p, y)
    assert 0.0 <= v <= np.log(2) + 1e-12
    assert v == jsd(y, p)
    assert jsd(p, p) == pytest.approx(0.0, abs=1e-12)
    assert v == pytest.approx(float(mp_jsd(p, y)), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(st.data())
def test_softmax_gradient_matches_central_differences(data):
    a = data.draw(arrays(np.float64, st.integers(2, 8), elements=st.floats(-3, 3)))
    y = softmax(data.draw(arrays(np.float64, a.shape, elements=st.floats(-3, 3))))
    g = jsd_softmax_grad(a, y)
    eps = 1e-6
    num = np.array(
        [(jsd(softmax(a + eps * e), y) - jsd(softmax(a - eps * e), y)) / (2 * eps) for e in np.eye(a.size)]
    )
    np.testing.assert_allclose(g, num, atol=1e-8)


def test_prob_gradient_against_mpmath():
    p = np.array([0.1, 0.6, 0.3])
    y = np.array([0.3, 0.3, 0.4])
    g = jsd_grad_probs(p, y)
    for k in range(3):

        def f(t, k=k):
            return mp_jsd([t if i == k else float(p[i]) for i in range(3)], y)

        assert g[k] == pytest.approx(float(mpmath.diff(f, float(p[k]))), abs=1e-10)


def test_batched_ops_match_rowwise():
    rng = np.random.default_rng(3)
    a = rng.normal(size=(5, 4))
    y = softmax(rng.normal(size=(5, 4)))
    batched = jsd(softmax(a), y)
    assert batched.shape == (5,)
    for i in range(5):
        assert batched[i] == jsd(softmax(a[i]), y[i])


def _net(seed=0, sizes=(6, 5, 1), act="leaky_relu"):
    return MlpNet.build(list(sizes), act, np.random.default_rng(seed))


def _jsd_loss(x, y, c):
    def loss_fn(net):
        out, cache = net.forward(x)
        z = out.reshape(-1, c)
        loss = float(np.sum(jsd(softmax(z), y)))
        grads = mlp_backward(net, cache, jsd_softmax_grad(z, y).reshape(-1, 1))
        return loss, grads

    return loss_fn


@pytest.mark.parametrize("act", ["leaky_relu", "sigmoid", "identity"])
def test_backprop_matches_finite_differences(act):
    rng = np.random.default_rng(1)
    c = 4
    x = rng.normal(size=(3 * c, 6))
    y = softmax(rng.normal(size=(3, c)) * 3)
    net = _net(2, act=act)
    assert finite_diff_check(net, _jsd_loss(x, y, c)) < 1e-4


def test_finite_diff_check_detects_wrong_gradient():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(8, 6))
    y = softmax(rng.normal(size=(2, 4)))
    good = _jsd_loss(x, y, 4)

    def bad(net):
        loss, grads = good(net)
        grads[0] = grads[0] * 1.5
        return loss, grads

    assert finite_diff_check(_net(), bad) > 1e-2


def test_finite_diff_check_restores_parameters():
    net = _net()
    before = [p.copy() for p in net.parameters()]
    rng = np.random.default_rng(0)
    finite_diff_check(net, _jsd_loss(rng.normal(size=(4, 6)), softmax(rng.normal(size=(1, 4))), 4))
    for a, b in zip(before, net.parameters()):
        np.testing.assert_array_equal(a, b)


def test_finite_diff_eps_validation():
    with pytest.raises(InvalidInputError):
        finite_diff_check(_net(), lambda n: (0.0, []), eps=0.1)


def test_backward_rejects_stale_cache():
    net = _net()
    _, cache = net.forward(np.ones((2, 6)))
    other = _net(1)
    with pytest.raises(InvalidStateError):
        mlp_backward(other, cache, np.ones((2, 1)))


def test_adam_minimizes_quadratic():
    target = np.array([1.5, -2.0, 0.25])
    w = [np.zeros(3)]
    state = AdamState.zeros_like(w)
    for _ in range(3000):
        adam_step(w, [2 * (w[0] - target)], state, lr=1e-2)
    np.testing.assert_allclose(w[0], target, atol=1e-3)
    assert state.step == 3000


def test_adam_first_step_is_lr_times_sign():
    # with zeroed moments the bias-corrected first step has magnitude ~lr
    w = [np.array([0.0, 0.0])]
    adam_step(w, [np.array([3.0, -0.5])], AdamState.zeros_like(w), lr=0.1)
    np.testing.assert_allclose(w[0], [-0.1, 0.1], atol=1e-7)


def test_adam_rejects_nan_gradient():
    w = [np.zeros(2)]
    with pytest.raises(TrainingError):
        adam_step(w, [np.array([np.nan, 0.0])], AdamState.zeros_like(w), lr=0.1)


def test_kink_inputs_skip_crossings():
    # a coarse step across many LeakyReLU kinks only passes once crossings are skipped
    rng = np.random.default_rng(5)
    x = rng.normal(size=(40, 6)) * 0.05
    y = softmax(rng.normal(size=(10, 4)) * 3)
    net = _net(3, sizes=(6, 30, 1))
    loss = _jsd_loss(x, y, 4)
    assert finite_diff_check(net, loss, eps=1e-2) > 1e-3
    assert finite_diff_check(net, loss, eps=1e-2, kink_inputs=x) < 1e-3


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_array_equal(softmax([0.0, 0.0]), [0.5, 0.5])


@settings(max_examples=50, deadline=None)
@given(st.data())
def test_jsd_gradient_sums_to_zero(data):
    a = data.draw(logits)
    y = softmax(data.draw(arrays(np.float64, a.shape, elements=st.floats(-30, 30))))
    assert abs(jsd_softmax_grad(a, y).sum()) < 1e-12


def test_uniform_pair_has_zero_gradient():
    np.testing.assert_allclose(jsd_softmax_grad(np.zeros(5), np.full(5, 0.2)), 0.0, atol=1e-15)


def test_identity_layer_passes_input_through():
    layer = DenseLayer(np.eye(3), np.zeros(3), "identity")
    x = np.array([[1.5, -2.0, 0.25]])
    np.testing.assert_array_equal(MlpNet([layer]).predict(x), x)


def test_leaky_relu_negative_slope():
    layer = DenseLayer(np.eye(2), np.zeros(2), "leaky_relu")
    np.testing.assert_allclose(MlpNet([layer]).predict(np.array([[-3.0, 2.0]])), [[-0.03, 2.0]])


def test_seeded_net_golden_output():
    net = MlpNet.build([3, 4, 2], "leaky_relu", np.random.default_rng(42))
    out = net.predict(np.array([[0.5, -1.0, 2.0]]))
    np.testing.assert_allclose(out, [[-0.45007393, 0.01735674]], atol=1e-8)


def test_zero_output_grad_gives_zero_grads():
    net = _net()
    _, cache = net.forward(np.ones((3, 6)))
    for g in mlp_backward(net, cache, np.zeros((3, 1))):
        assert not g.any()


def test_linear_1x1_gradient_closed_form():
    # L = (w*x + b - t)^2 / 2 has dL/dw = (w*x + b - t) * x and dL/db = (w*x + b - t)
    w, b, x, t = 1.7, -0.3, 2.5, 1.0
    net = MlpNet([DenseLayer(np.array([[w]]), np.array([b]), "identity")])
    out, cache = net.forward(np.array([[x]]))
    gw, gb = mlp_backward(net, cache, out - t)
    r = w * x + b - t
    assert gw[0, 0] == pytest.approx(r * x, abs=1e-15)
    assert gb[0] == pytest.approx(r, abs=1e-15)


def test_linear_mse_finite_difference_is_exact():
    rng = np.random.default_rng(0)
    x, t = rng.normal(size=(10, 4)), rng.normal(size=(10, 2))
    net = MlpNet.build([4, 2], "identity", rng)

    def loss_fn(n):
        out, cache = n.forward(x)
        diff = out - t
        return float((diff**2).sum()) / 2, mlp_backward(n, cache, diff)

    assert finite_diff_check(net, loss_fn) < 1e-7


def test_phi_shaped_net_with_jsd():
    rng = np.random.default_rng(7)
    c, h = 10, 32
    x = rng.normal(size=(4 * c, h))
    y = softmax(rng.normal(size=(4, c)) * 2)
    net = MlpNet.build([h, 20, 1], "leaky_relu", rng)
    assert finite_diff_check(net, _jsd_loss(x, y, c), eps=1e-4, kink_inputs=x) < 1e-4


def test_adam_zero_gradient_keeps_params():
    w = [np.array([0.3, -0.2])]
    adam_step(w, [np.zeros(2)], AdamState.zeros_like(w), lr=0.1)
    np.testing.assert_array_equal(w[0], [0.3, -0.2])


def test_adam_moves_against_gradient():
    w = [np.zeros(3)]
    g = np.array([0.5, -2.0, 1e-3])
    adam_step(w, [g], AdamState.zeros_like(w), lr=0.01)
    assert np.all(np.sign(w[0]) == -np.sign(g))


def test_adam_hundred_steps_on_1d_quadratic():
    w = [np.array([0.95])]
    state = AdamState.zeros_like(w)
    for _ in range(100):
        adam_step(w, [2 * (w[0] - 1.0)], state, lr=1e-3)
    assert abs(w[0][0] - 1.0) < 1e-3
