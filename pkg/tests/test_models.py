import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lorelab import tensor as T
from lorelab.models import (
    DualNetParams,
    EncoderParams,
    PrototypeHead,
    ScalarDual,
    dual_lambda,
    encode,
    freeze,
    predict,
    prototype_probs,
)
from lorelab.optimize import Batch, OptimizerState, TrainConfig, primal_step
from lorelab.tensor import ShapeError, Tape


def softplus64(z):
    return np.logaddexp(0.0, z)


class TestEncoder:
    def test_zero_weight_gives_bias(self):
        b = np.array([0.5, -1.0, 2.0])
        theta = EncoderParams([np.zeros((4, 3))], [b])
        z = encode(theta, np.random.default_rng(0).uniform(size=(5, 4))).data
        np.testing.assert_array_equal(z, np.tile(b.astype(np.float32), (5, 1)))

    def test_identity(self):
        x = np.random.default_rng(0).uniform(size=(5, 3)).astype(np.float32)
        theta = EncoderParams([np.eye(3)], [np.zeros(3)])
        np.testing.assert_array_equal(encode(theta, x).data, x)

    def test_matches_layer_oracle(self):
        rng = np.random.default_rng(4)
        theta = EncoderParams.init([6, 10, 3], seed=1)
        x = rng.uniform(size=(7, 6)).astype(np.float32)
        w0, b0, w1, b1 = [a.astype(np.float64) for a in theta.arrays()]
        oracle = np.maximum(x @ w0 + b0, 0) @ w1 + b1
        np.testing.assert_allclose(encode(theta, x).data, oracle, atol=1e-6)

    def test_dim_mismatch(self):
        theta = EncoderParams.init([6, 10, 3])
        with pytest.raises(ShapeError):
            encode(theta, np.zeros((2, 5)))

    def test_layers_must_chain(self):
        with pytest.raises(ValueError):
            EncoderParams([np.zeros((4, 3)), np.zeros((2, 2))], [np.zeros(3), np.zeros(2)])

    def test_dims(self):
        theta = EncoderParams.init([32, 64, 32, 16])
        assert theta.dims == [32, 64, 32, 16]
        assert theta.embed_dim == 16

    def test_gradient_reaches_inputs(self):
        theta = EncoderParams.init([3, 4, 2], seed=0)
        tape = Tape()
        x = tape.watch(np.full((1, 3), 0.5))
        (g,) = tape.gradient(T.sum_(encode(theta, x)), [x])
        assert g.shape == (1, 3)


class TestFreeze:
    def test_mutating_source_leaves_reference(self):
        theta = EncoderParams.init([4, 5, 2], seed=0)
        ref = freeze(theta)
        before = ref.checksum()
        theta.weights[0][0, 0] += 1.0
        assert ref.checksum() == before == ref.digest

    def test_reference_is_read_only(self):
        ref = freeze(EncoderParams.init([4, 5, 2], seed=0))
        with pytest.raises(ValueError):
            ref.params.weights[0][0, 0] = 3.0

    def test_equal_at_copy(self):
        theta = EncoderParams.init([4, 5, 2], seed=0)
        x = np.random.default_rng(0).uniform(size=(3, 4))
        assert encode(freeze(theta), x).data.tobytes() == encode(theta, x).data.tobytes()

    def test_differs_after_primal_step(self):
        rng = np.random.default_rng(0)
        theta = EncoderParams.init([4, 5, 2], seed=0)
        ref = freeze(theta)
        x = rng.uniform(size=(8, 4)).astype(np.float32)
        cfg = TrainConfig(method="fare", eta_theta=1e-2)
        delta = np.full_like(x, 0.05)
        batch = Batch.build(x, None, ref)
        theta, _, _ = primal_step(theta, None, batch, delta, cfg, OptimizerState(), cfg.eta_theta)
        assert not np.array_equal(encode(ref, x).data, encode(theta, x).data)


class TestDualLambda:
    def test_zero_network(self):
        omega = DualNetParams(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 1)), np.zeros(1))
        lam = dual_lambda(omega, np.ones((5, 4))).data
        np.testing.assert_allclose(lam, math.log(2), atol=1e-7)

    def test_very_negative_output(self):
        omega = DualNetParams(np.zeros((4, 3)), np.zeros(3), np.zeros((3, 1)), np.full(1, -80.0))
        lam = dual_lambda(omega, np.ones((2, 4))).data
        assert np.all(lam >= 0) and np.all(lam < 1e-30)

    def test_matches_composed_oracle(self):
        rng = np.random.default_rng(2)
        omega = DualNetParams.init(6, 9, seed=3)
        omega = omega.with_arrays([a + 0.1 * rng.normal(size=a.shape) for a in omega.arrays()])
        z0 = rng.normal(size=(5, 6)).astype(np.float32)
        w1, b1, w2, b2 = [a.astype(np.float64) for a in omega.arrays()]
        oracle = softplus64(np.maximum(z0 @ w1 + b1, 0) @ w2 + b2).ravel()
        np.testing.assert_allclose(dual_lambda(omega, z0).data, oracle, atol=1e-6)

    def test_dim_mismatch(self):
        with pytest.raises(ShapeError):
            dual_lambda(DualNetParams.init(6), np.zeros((2, 5)))

    def test_reference_embeddings_are_constants(self):
        omega = DualNetParams.init(3, 4, seed=0)
        tape = Tape()
        z0 = tape.watch(np.ones((2, 3)))
        watched = omega.on(tape)
        grads = tape.gradient(T.sum_(dual_lambda(watched, z0)), [z0] + watched)
        np.testing.assert_array_equal(grads[0], 0)
        assert any(np.any(g != 0) for g in grads[1:])

    def test_scalar_dual(self):
        lam = dual_lambda(ScalarDual.init(0.0), np.ones((3, 2))).data
        np.testing.assert_allclose(lam, math.log(2), atol=1e-7)

    def test_nonnegative_over_many_draws(self):
        rng = np.random.default_rng(0)
        for i in range(100):
            omega = DualNetParams.init(4, 8, seed=i)
            omega = omega.with_arrays([a * rng.uniform(0, 20) for a in omega.arrays()])
            z0 = rng.normal(size=(100, 4)) * rng.uniform(0.1, 10)
            assert np.all(dual_lambda(omega, z0).data >= 0)


class TestPrototypeHead:
    def test_single_class(self):
        head = PrototypeHead(np.array([[1.0, 0.0]]))
        np.testing.assert_allclose(prototype_probs(head, np.array([[0.3, -2.0]])).data, [[1.0]])

    def test_orthogonal_pair_hand_softmax(self):
        head = PrototypeHead(np.eye(2), tau=1.0)
        p = prototype_probs(head, np.array([[2.0, 0.0]])).data[0]
        e = math.e
        np.testing.assert_allclose(p, [e / (e + 1), 1 / (e + 1)], atol=1e-6)

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        p = rng.normal(size=(4, 3))
        head = PrototypeHead(p / np.linalg.norm(p, axis=1, keepdims=True))
        z = rng.normal(size=(6, 3))
        np.testing.assert_allclose(prototype_probs(head, 5 * z).data, prototype_probs(head, z).data, atol=1e-6)

    def test_zero_row_rejected(self):
        head = PrototypeHead(np.eye(2))
        with pytest.raises(ValueError):
            prototype_probs(head, np.array([[0.0, 0.0]]))

    def test_unit_norm_enforced(self):
        with pytest.raises(ValueError):
            PrototypeHead(np.array([[1.0, 1.0]]))
        with pytest.raises(ValueError):
            PrototypeHead(np.eye(2), tau=0.0)

    def test_from_embeddings(self):
        z = np.array([[2.0, 0.0], [4.0, 0.0], [0.0, -3.0]])
        head = PrototypeHead.from_embeddings(z, np.array([0, 0, 1]), 2)
        np.testing.assert_allclose(head.prototypes, [[1, 0], [0, -1]])
        assert head.tau == 0.07

    def test_predict(self):
        head = PrototypeHead(np.eye(3))
        assert predict(head, np.array([[0.1, 3.0, 0.2], [-1, -1, 0.5]])).tolist() == [1, 2]


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 100.0))
def test_probs_rows_sum_to_one_and_rescale(seed, scale):
    rng = np.random.default_rng(seed)
    p = rng.normal(size=(5, 4))
    head = PrototypeHead(p / np.linalg.norm(p, axis=1, keepdims=True))
    z = rng.normal(size=(3, 4))
    probs = prototype_probs(head, z).data
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-6)
    scaled = prototype_probs(head, z * scale).data
    np.testing.assert_allclose(scaled, probs, atol=1e-6)
    assert np.array_equal(predict(head, z * scale), predict(head, z))

