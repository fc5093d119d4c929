import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from marketstates.errors import PipelineError
from marketstates.surrogate import (
    LayerSpec,
    NetworkSpec,
    OptimizerConfig,
    activation,
    compare_selections,
    forward,
    gradient_check,
    init_network,
    leaky_relu,
    load_network,
    random_pool,
    relu,
    run_selection,
    save_network,
    selu,
    softmax,
    softmax_regression_spec,
    surrogate_spec,
    train,
)
from marketstates.synth import generate_planted


class TestActivations:
    def test_relu(self):
        assert relu(-3.0) == 0 and relu(2.0) == 2

    def test_leaky(self):
        assert leaky_relu(-2.0, 0.05) == pytest.approx(-0.1)
        assert activation("leaky", 0.01, 3.0) == 3.0

    def test_selu_values(self):
        assert selu(0.0) == 0.0
        assert selu(1.0) == pytest.approx(1.05070098, abs=1e-12)
        assert selu(-1.0) == pytest.approx(1.05070098 * 1.67326324 * (math.exp(-1) - 1), rel=1e-12)
        assert selu(-1.0) == pytest.approx(-1.11133, abs=1e-5)

    def test_unknown(self):
        with pytest.raises(PipelineError):
            activation("tanh", None, 0.0)

    def test_softmax_examples(self):
        np.testing.assert_allclose(softmax(np.zeros(8)), np.full(8, 1 / 8), rtol=1e-15)
        np.testing.assert_allclose(softmax(np.array([0.0, math.log(3)])), [0.25, 0.75], rtol=1e-14)

    @given(arrays(np.float64, 8, elements=st.floats(-50, 50)), st.floats(-1e3, 1e3))
    @settings(max_examples=60, deadline=None)
    def test_softmax_properties(self, logits, c):
        p = softmax(logits)
        assert abs(p.sum() - 1) <= 1e-12
        np.testing.assert_allclose(softmax(logits + c), p, rtol=1e-9, atol=1e-15)


class TestSpec:
    def test_default_layout(self):
        spec = surrogate_spec()
        dense = [(l.units, l.activation, l.parameter) for l in spec.layers if l.kind == "dense"]
        assert dense == [
            (256, "selu", None),
            (128, "relu", None),
            (128, "relu", None),
            (1024, "leaky", 0.05),
            (128, "leaky", 0.01),
            (8, "softmax", None),
        ]
        assert spec.layers[5].kind == "dropout" and spec.layers[5].parameter == 0.3
        assert surrogate_spec(width_divisor=4).dense_shapes()[0] == (8, 64)

    def test_invalid(self):
        with pytest.raises(PipelineError, match="final layer"):
            NetworkSpec((LayerSpec("dense", 8, "relu"),))
        with pytest.raises(PipelineError, match="dropout rate"):
            NetworkSpec((LayerSpec("dropout", parameter=1.0), LayerSpec("dense", 8, "softmax")))

    def test_dict_round_trip(self):
        spec = surrogate_spec(width_divisor=2)
        assert NetworkSpec.from_dict(spec.to_dict()) == spec


def _oracle_forward(net, x):
    # second implementation, layer by layer with explicit formulas
    a = np.asarray(x, dtype=float)
    k = 0
    for layer in net.spec.layers:
        if layer.kind == "dropout":
            continue
        z = a @ net.weights[k] + net.biases[k]
        k += 1
        if layer.activation == "relu":
            a = np.where(z > 0, z, 0.0)
        elif layer.activation == "leaky":
            a = np.where(z > 0, z, layer.parameter * z)
        elif layer.activation == "selu":
            a = np.where(z >= 0, 1.05070098 * z, 1.05070098 * 1.67326324 * (np.exp(z) - 1))
        else:
            e = np.exp(z - z.max())
            a = e / e.sum()
    return a


class TestForward:
    def test_zero_weights_uniform(self):
        net = init_network(surrogate_spec(width_divisor=8), 0)
        net.weights = [np.zeros_like(w) for w in net.weights]
        np.testing.assert_allclose(forward(net, np.ones(8)), np.full(8, 1 / 8), rtol=1e-15)

    def test_matches_oracle(self, rng):
        net = init_network(surrogate_spec(width_divisor=8), 3)
        net.biases = [rng.normal(scale=0.1, size=b.shape) for b in net.biases]
        for x in rng.normal(size=(20, 8)):
            np.testing.assert_allclose(forward(net, x), _oracle_forward(net, x), rtol=1e-10, atol=1e-12)

    def test_inference_ignores_rng(self, rng):
        net = init_network(surrogate_spec(width_divisor=8), 1)
        x = rng.normal(size=(5, 8))
        a = forward(net, x, rng=np.random.default_rng(1))
        b = forward(net, x, rng=np.random.default_rng(2))
        np.testing.assert_array_equal(a, b)
        np.testing.assert_allclose(a.sum(axis=1), 1.0, atol=1e-12)

    def test_dropout_training_mode(self, rng):
        net = init_network(surrogate_spec(width_divisor=8), 1)
        x = rng.normal(size=(5, 8))
        a = forward(net, x, training_mode=True, rng=np.random.default_rng(1))
        b = forward(net, x, training_mode=True, rng=np.random.default_rng(2))
        assert not np.array_equal(a, b)

    def test_non_finite_input(self):
        net = init_network(softmax_regression_spec(), 0)
        with pytest.raises(PipelineError, match="non-finite"):
            forward(net, np.full(8, np.nan))


class TestGradients:
    def test_linear_net(self, rng):
        err = gradient_check(softmax_regression_spec(), rng.normal(size=8), 3)
        assert err <= 1e-6

    def test_linear_closed_form(self, rng):
        from marketstates.surrogate import loss_and_grads

        net = init_network(softmax_regression_spec(), 2)
        x = rng.normal(size=(1, 8))
        _, gw, gb = loss_and_grads(net, x, np.array([5]))
        p = softmax(x[0] @ net.weights[0] + net.biases[0])
        p[5] -= 1
        np.testing.assert_allclose(gw[0], np.outer(x[0], p), rtol=1e-12, atol=1e-15)
        np.testing.assert_allclose(gb[0], p, rtol=1e-12, atol=1e-15)

    def test_reduced_default(self, rng):
        err = gradient_check(surrogate_spec(width_divisor=8), rng.normal(size=8), 2, seed=1)
        assert err <= 1e-4

    def test_zero_degenerate(self):
        spec = surrogate_spec(width_divisor=32)
        net = init_network(spec.without_dropout(), 0)
        net.weights = [np.zeros_like(w) for w in net.weights]
        err = gradient_check(spec, np.zeros(8), 0, net=net)
        assert np.isfinite(err)


def _separable(n=500, seed=0):
    # two Gaussian blobs on either side of the hyperplane w . x = 0
    rng = np.random.default_rng(seed)
    w = np.array([1.0, -1.0, 0.5, 0, 0, 0, 0, 0]) / 1.5
    y = np.arange(n) % 2
    X = 0.25 * rng.normal(size=(n, 8)) + np.where(y[:, None] == 1, 1.0, -1.0) * w
    return X, y, w


class TestTrain:
    def test_separable_toy(self):
        X, y, w = _separable()
        assert np.array_equal((X @ w > 0).astype(int), y)  # the hand-built linear rule is exact
        _, acc = train(surrogate_spec(8, 2, width_divisor=4), X, y, seed=0, epochs=100)
        assert acc >= 0.98

    @pytest.mark.slow
    def test_shuffled_labels_chance(self):
        data = generate_planted(n=1200, seed=4)
        X = data.features[:, list(data.relevant_features)]
        accs = []
        for seed in range(10):
            y = np.random.default_rng(100 + seed).permutation(data.labels)
            accs.append(train(surrogate_spec(width_divisor=8), X, y, seed=seed, epochs=100)[1])
        assert abs(np.mean(accs) - 1 / 8) <= 0.05

    def test_deterministic(self):
        X, y, _ = _separable(200)
        a, acc_a = train(surrogate_spec(8, 2, width_divisor=8), X, y, seed=3, epochs=5)
        b, acc_b = train(surrogate_spec(8, 2, width_divisor=8), X, y, seed=3, epochs=5)
        assert acc_a == acc_b
        for wa, wb in zip(a.weights + a.biases, b.weights + b.biases):
            np.testing.assert_array_equal(wa, wb)

    def test_full_batch_loss_non_increasing(self):
        X, y, _ = _separable(300)
        net, _ = train(
            softmax_regression_spec(8, 2), X, y, seed=0, epochs=50,
            optimizer=OptimizerConfig(name="sgd", learning_rate=0.1, batch_size=None),
        )
        assert np.all(np.diff(net.loss_history) <= 1e-12)

    def test_errors(self):
        with pytest.raises(PipelineError, match="at least 24"):
            train(softmax_regression_spec(), np.zeros((10, 8)), np.zeros(10, int))
        with pytest.raises(PipelineError, match="labels"):
            train(softmax_regression_spec(), np.zeros((30, 8)), np.full(30, 9))

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_divergence_names_seed(self):
        X, y, _ = _separable(100)
        with pytest.raises(PipelineError, match="seed 7"):
            train(
                surrogate_spec(8, 2, width_divisor=8), X * 1e150, y, seed=7, epochs=2,
                optimizer=OptimizerConfig(name="sgd", learning_rate=1e10),
            )


class TestCompare:
    def test_single_run_report(self):
        data = generate_planted(n=300, seed=0)
        rep = run_selection("mode-mode", data.features, data.labels, [(0, 1, 2, 3, 4, 5, 6, 7)], [0],
                            spec=surrogate_spec(width_divisor=16), epochs=2)
        assert len(rep.accuracies) == 1 and rep.std == 0.0

    def test_random_selections_and_pool(self):
        data = generate_planted(n=300, seed=0)
        planted = list(data.relevant_features)
        other = [1, 2, 3, 4, 5, 6, 8, 9]
        out = compare_selections(data.features, data.labels, planted, other, runs=3,
                                 spec=surrogate_spec(width_divisor=16), epochs=2)
        pool = set(random_pool(45, planted, other))
        assert len(pool) == 45 - 16
        sels = out["random"].selections
        assert len(set(sels)) == 3
        assert all(len(set(s)) == 8 and set(s) <= pool for s in sels)
        assert out["mode-mode"].seeds == (0, 1, 2)
        for rep in out.values():
            assert rep.mean == pytest.approx(float(np.mean(rep.accuracies)), abs=1e-12)

    def test_pool_too_small(self):
        with pytest.raises(PipelineError, match="leftover pool"):
            compare_selections(np.zeros((30, 12)), np.zeros(30, int), list(range(8)), [8, 9, 10, 11, 0, 1, 2, 3])


def test_network_round_trip(tmp_path, rng):
    net = init_network(surrogate_spec(width_divisor=8), 5)
    save_network(net, tmp_path / "n.json")
    back = load_network(tmp_path / "n.json")
    x = rng.normal(size=(4, 8))
    np.testing.assert_array_equal(forward(back, x), forward(net, x))
