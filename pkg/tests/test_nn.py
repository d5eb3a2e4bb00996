import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mind2mind import autodiff as ad
from mind2mind.nn import (
    AUTOENCODER_BETAS,
    DEFAULT_LR,
    GAN_BETAS,
    AdamState,
    MlpSpec,
    Network,
    adam_step,
    compose,
    constant_network,
    forward,
    identity_network,
    init_mlp,
    param_bindings,
    predict,
    run,
    update_running_stats,
)

from conftest import random_mlp


def test_init_is_deterministic():
    spec = MlpSpec.dense([2, 3, 1])
    assert init_mlp(spec, 7).equals(init_mlp(spec, 7))
    assert not init_mlp(spec, 7).equals(init_mlp(spec, 8))


def test_biases_start_at_zero():
    net = init_mlp(MlpSpec.dense([4, 4]), 123)
    assert not net.params["b0"].any()


def test_paper_critic_parameter_count():
    spec = MlpSpec.dense([256, 256, 256, 1], "relu", "none")
    assert init_mlp(spec, 0).n_parameters == 131_841


def test_init_scale():
    # He-uniform bound for relu, Xavier-uniform otherwise
    relu = init_mlp(MlpSpec((50, 40), ("relu",)), 0).params["W0"]
    tanh = init_mlp(MlpSpec((50, 40), ("tanh",)), 0).params["W0"]
    assert np.abs(relu).max() <= np.sqrt(6 / 50)
    assert np.abs(tanh).max() <= np.sqrt(6 / 90)
    assert np.abs(relu).max() > 0.9 * np.sqrt(6 / 50)


def test_bad_specs():
    with pytest.raises(ValueError):
        MlpSpec((3, 0, 1), ("relu", "none"))
    with pytest.raises(ValueError):
        MlpSpec((3, 1), ("relu", "none"))
    with pytest.raises(ValueError):
        MlpSpec((3, 1), ("sigmoid",))
    with pytest.raises(ValueError):
        Network(MlpSpec((2, 2), ("none",)), {"W0": np.ones((3, 2)), "b0": np.zeros(2)})


def test_spec_roundtrip():
    spec = MlpSpec.dense([3, 8, 8, 2], "relu", "tanh", batch_norm=True)
    assert MlpSpec.from_dict(spec.to_dict()) == spec
    assert spec.batch_norm == (True, True, False)


def test_forward_examples():
    x = np.array([[0.3, -2.0], [1.0, 5.0]])
    np.testing.assert_array_equal(predict(identity_network(2), x), x)
    zero = Network(MlpSpec((2, 3), ("tanh",)), {"W0": np.zeros((2, 3)), "b0": np.zeros(3)})
    np.testing.assert_array_equal(predict(zero, x), 0.0)
    hand = Network(MlpSpec((2, 2), ("relu",)), {"W0": np.array([[1.0, 0.0], [0.0, -1.0]]),
                                                "b0": np.zeros(2)})
    np.testing.assert_array_equal(predict(hand, np.array([[1.0, 1.0]])), [[1.0, 0.0]])
    np.testing.assert_array_equal(run(hand, np.array([[1.0, 1.0]])), [[1.0, 0.0]])


def test_batch_checks():
    net = identity_network(3)
    with pytest.raises(ValueError):
        predict(net, np.ones((2, 2)))
    with pytest.raises(ValueError):
        predict(net, np.ones((0, 3)))
    bn = init_mlp(MlpSpec.dense([3, 4, 1], batch_norm=True), 0)
    with pytest.raises(ValueError):
        run(bn, np.ones((1, 3)), mode="train")


def test_predict_matches_graph(rng):
    for bn in (False, True):
        net = random_mlp(rng, 3, 2, depth=3, width=5, hidden="relu", batch_norm=bn)
        if bn:
            net = net.with_state({"mean0": rng.normal(size=5), "var0": rng.uniform(0.5, 2, size=5)})
        x = rng.normal(size=(7, 3))
        np.testing.assert_allclose(predict(net, x), run(net, x), rtol=0, atol=1e-14)


def test_train_mode_batch_norm_normalises(rng):
    spec = MlpSpec((3, 4), ("none",), (True,))
    net = init_mlp(spec, 1)
    x = rng.normal(size=(64, 3)) * 5 + 2
    y = run(net, x, mode="train")
    np.testing.assert_allclose(y.mean(axis=0), 0, atol=1e-12)
    np.testing.assert_allclose(y.var(axis=0), 1, rtol=1e-4)


def test_running_stats_update(rng):
    net = init_mlp(MlpSpec((2, 3), ("none",), (True,)), 0)
    res = forward(net, ad.leaf("x"), "train")
    x = rng.normal(size=(10, 2))
    stats = ad.evaluate(ad.ExprGraph(res.batch_stats, param_bindings(net, "net")), {"x": x})
    new = update_running_stats(net, stats, 10)
    h = x @ net.params["W0"]
    np.testing.assert_allclose(new.state["mean0"], 0.1 * h.mean(axis=0), rtol=1e-12)
    np.testing.assert_allclose(new.state["var0"], 0.9 + 0.1 * h.var(axis=0, ddof=1), rtol=1e-12)


def test_compose_equals_sequential(rng):
    f = random_mlp(rng, 3, 4, batch_norm=False)
    g = random_mlp(rng, 4, 2)
    x = rng.normal(size=(5, 3))
    np.testing.assert_allclose(predict(compose(f, g), x), predict(g, predict(f, x)), atol=1e-15)
    c = constant_network(3, [0.5, -0.25])
    np.testing.assert_array_equal(predict(c, x), np.tile([0.5, -0.25], (5, 1)))


def test_adam_defaults():
    assert DEFAULT_LR == 1e-3
    assert AUTOENCODER_BETAS == (0.9, 0.9)
    assert GAN_BETAS == (0.1, 0.5)
    with pytest.raises(ValueError):
        AdamState(lr=0.0)
    with pytest.raises(ValueError):
        AdamState(beta1=1.0)


def test_adam_first_step():
    st_ = AdamState(lr=1e-3, beta1=0.1, beta2=0.5, eps=1e-8)
    new, state = adam_step(st_, {"p": np.array(0.5)}, {"p": np.array(2.0)})
    # bias-corrected moments are exactly g and g^2 on the first step
    assert float(new["p"]) == pytest.approx(0.5 - 1e-3 * 2 / (2 + 1e-8), abs=1e-15)
    assert state.t == 1
    assert float(state.v["p"]) >= 0


def test_adam_rejects_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step(AdamState(), {"p": np.zeros(3)}, {"p": np.zeros(2)})


def test_adam_leaves_inputs_untouched():
    p = {"p": np.array([1.0, 2.0])}
    g = {"p": np.array([0.1, -0.3])}
    before = p["p"].copy()
    adam_step(AdamState(), p, g)
    np.testing.assert_array_equal(p["p"], before)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(1e-5, 1.0), st.floats(0, 0.99), st.floats(0, 0.99))
def test_adam_zero_grad_is_identity(seed, lr, b1, b2):
    rng = np.random.default_rng(seed)
    params = {"W": rng.normal(size=(3, 2)), "b": rng.normal(size=2)}
    new, _ = adam_step(AdamState(lr=lr, beta1=b1, beta2=b2),
                       params, {k: np.zeros_like(v) for k, v in params.items()})
    for k in params:
        np.testing.assert_array_equal(new[k], params[k])


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_linear_network_is_affine(seed):
    rng = np.random.default_rng(seed)
    depth = int(rng.integers(1, 4))
    widths = [3] + list(rng.integers(1, 6, size=depth))
    net = init_mlp(MlpSpec.dense(widths, "none", "none"), seed)
    x, y = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    f = lambda v: predict(net, v)
    resid = f(x + y) - f(x) - f(y) + f(np.zeros_like(x))
    assert np.abs(resid).max() < 1e-12


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_eval_is_row_equivariant(seed):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, 4, 2, hidden="relu", batch_norm=bool(seed % 2))
    x = rng.normal(size=(9, 4))
    perm = rng.permutation(9)
    out = predict(net, x)
    np.testing.assert_allclose(predict(net, x[perm]), out[perm], rtol=1e-12, atol=1e-12)
    np.testing.assert_array_equal(predict(net, x), out)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_critic_rows_are_independent(seed):
    rng = np.random.default_rng(seed)
    net = random_mlp(rng, 3, 1, hidden="relu", output="none")
    assert net.spec.is_critic_safe
    x = rng.normal(size=(6, 3))
    other = x.copy()
    other[1:] = rng.normal(size=(5, 3))
    # row 0 keeps its output whatever the other rows hold
    np.testing.assert_allclose(predict(net, other)[0], predict(net, x)[0], rtol=1e-12, atol=1e-12)
    perm = rng.permutation(6)
    np.testing.assert_allclose(predict(net, x[perm]), predict(net, x)[perm], rtol=1e-12, atol=1e-12)
