from __future__ import annotations

import unittest

import numpy as np

from coopsubnet.checks import block_scaled_error
from coopsubnet.diffcore import (
    ContractError,
    Graph,
    ShapeError,
    backward,
    describe,
    grad_check,
    grad_check_parameters,
    relative_error,
    rng_stream,
    tensor_create,
)


class TensorCreateTests(unittest.TestCase):
    def test_scalar_fill_and_row_major_values(self) -> None:
        filled = tensor_create([2, 3], 1.5)
        values = tensor_create([2, 2], [1, 2, 3, 4])

        self.assertEqual(filled.shape, (2, 3))
        self.assertTrue(np.all(filled == 1.5))
        self.assertEqual(values.tolist(), [[1.0, 2.0], [3.0, 4.0]])
        self.assertEqual(values.dtype, np.float64)

    def test_tensors_are_read_only(self) -> None:
        tensor = tensor_create([2], 0.0)

        with self.assertRaises(ValueError):
            tensor[0] = 1.0

    def test_invalid_shapes_are_rejected(self) -> None:
        for shape in ([], [0, 2], [2, -1]):
            with self.subTest(shape=shape), self.assertRaisesRegex(ShapeError, "shape"):
                tensor_create(shape)

    def test_value_count_must_match_shape(self) -> None:
        with self.assertRaisesRegex(ShapeError, "5 values cannot fill shape"):
            tensor_create([2, 2], [1, 2, 3, 4, 5])


class RngStreamTests(unittest.TestCase):
    def test_same_keys_give_the_same_stream(self) -> None:
        first = rng_stream(3, "shuffle", 1).random(4)
        second = rng_stream(3, "shuffle", 1).random(4)

        np.testing.assert_array_equal(first, second)

    def test_keys_separate_streams(self) -> None:
        base = rng_stream(3, "shuffle", 1).random(4)

        self.assertFalse(np.array_equal(base, rng_stream(3, "shuffle", 2).random(4)))
        self.assertFalse(np.array_equal(base, rng_stream(3, "dropout", 1).random(4)))
        self.assertFalse(np.array_equal(base, rng_stream(4, "shuffle", 1).random(4)))


class GraphTests(unittest.TestCase):
    def setUp(self) -> None:
        self.graph = Graph()

    def test_matmul_gradient_matches_closed_form(self) -> None:
        a = self.graph.parameter("a", [[1.0, 2.0], [3.0, 4.0]])
        b = self.graph.parameter("b", [[5.0], [6.0]])
        loss = self.graph.sum(self.graph.matmul(a, b))

        gradients = backward(self.graph, loss)

        self.assertEqual(loss.item(), 1 * 5 + 2 * 6 + 3 * 5 + 4 * 6)
        np.testing.assert_array_equal(gradients["a"], [[5.0, 6.0], [5.0, 6.0]])
        np.testing.assert_array_equal(gradients["b"], [[4.0], [6.0]])

    def test_matmul_rejects_incompatible_shapes(self) -> None:
        a = self.graph.constant(np.ones((2, 3)))
        b = self.graph.constant(np.ones((2, 3)))

        with self.assertRaisesRegex(ShapeError, r"cannot multiply \[2, 3\] by \[2, 3\]"):
            self.graph.matmul(a, b)

    def test_broadcast_bias_gradient_is_summed_over_the_batch(self) -> None:
        x = self.graph.constant(np.ones((4, 3)))
        bias = self.graph.parameter("bias", [0.0, 1.0, 2.0])

        gradients = backward(self.graph, self.graph.sum(self.graph.add(x, bias)))

        np.testing.assert_array_equal(gradients["bias"], [4.0, 4.0, 4.0])

    def test_shared_parameter_accumulates_gradients(self) -> None:
        x = self.graph.parameter("x", [3.0])
        again = self.graph.parameter("x", [99.0])

        gradients = backward(self.graph, self.graph.sum(self.graph.mul(x, again)))

        self.assertIs(x, again)
        np.testing.assert_array_equal(gradients["x"], [6.0])

    def test_unreached_parameters_get_zero_gradients(self) -> None:
        used = self.graph.parameter("used", [1.0, 2.0])
        self.graph.parameter("unused", [[1.0, 1.0]])

        gradients = backward(self.graph, self.graph.sum(self.graph.square(used)))

        np.testing.assert_array_equal(gradients["unused"], [[0.0, 0.0]])
        np.testing.assert_array_equal(gradients["used"], [2.0, 4.0])

    def test_backward_requires_a_scalar_loss_from_this_graph(self) -> None:
        vector = self.graph.parameter("v", [1.0, 2.0])
        with self.assertRaisesRegex(ContractError, "scalar"):
            backward(self.graph, vector)

        other = Graph()
        foreign = other.sum(other.parameter("w", [1.0]))
        with self.assertRaisesRegex(ContractError, "does not belong"):
            backward(self.graph, foreign)

    def test_backward_is_linear_in_the_loss(self) -> None:
        rng = rng_stream(4, "linearity")
        x = self.graph.parameter("x", rng.normal(size=(4, 3)))
        first = self.graph.sum(
            self.graph.square(self.graph.matmul(x, self.graph.constant(rng.normal(size=(3, 2)))))
        )
        logits = self.graph.matmul(x, self.graph.constant(rng.normal(size=(3, 5))))
        second = self.graph.mean(self.graph.softmax_cross_entropy(logits, np.array([0, 4, 2, 1])))
        combined = self.graph.add(self.graph.scale(first, 2.5), self.graph.scale(second, -0.75))

        expected = 2.5 * backward(self.graph, first)["x"] - 0.75 * backward(self.graph, second)["x"]

        np.testing.assert_allclose(
            backward(self.graph, combined)["x"], expected, rtol=0.0, atol=1e-12
        )

    def test_backward_logs_the_loss_node(self) -> None:
        loss = self.graph.sum(self.graph.parameter("x", [1.0, 2.0]))

        with self.assertLogs("coopsubnet.diffcore", level="DEBUG") as logs:
            backward(self.graph, loss)

        self.assertEqual(logs.records[0].loss, describe(loss))

    def test_nodes_from_another_graph_are_rejected(self) -> None:
        foreign = Graph().constant([1.0])

        with self.assertRaisesRegex(ContractError, "another graph"):
            self.graph.add(self.graph.constant([1.0]), foreign)

    def test_non_finite_outputs_are_rejected(self) -> None:
        zero = self.graph.constant([0.0])

        with self.assertRaisesRegex(ContractError, "div produced non-finite"):
            self.graph.div(self.graph.constant([1.0]), zero)

    def test_softmax_cross_entropy_is_stable_for_large_logits(self) -> None:
        logits = self.graph.parameter("logits", [[1000.0, 0.0], [0.0, 0.0]])

        per_sample = self.graph.softmax_cross_entropy(logits, np.array([0, 1]))
        gradients = backward(self.graph, self.graph.sum(per_sample))

        np.testing.assert_allclose(per_sample.value, [0.0, np.log(2.0)], atol=1e-12)
        np.testing.assert_allclose(gradients["logits"], [[0.0, 0.0], [0.5, -0.5]], atol=1e-12)

    def test_softmax_cross_entropy_validates_labels(self) -> None:
        logits = self.graph.constant(np.zeros((2, 3)))

        with self.assertRaisesRegex(ContractError, "class indices"):
            self.graph.softmax_cross_entropy(logits, np.array([0, 3]))
        with self.assertRaisesRegex(ContractError, "class indices"):
            self.graph.softmax_cross_entropy(logits, np.array([0.0, 1.0]))
        with self.assertRaisesRegex(ShapeError, "labels for batch 2"):
            self.graph.softmax_cross_entropy(logits, np.array([0, 1, 2]))

    def test_conv2d_matches_a_direct_loop(self) -> None:
        rng = rng_stream(0, "conv-test")
        x_value = rng.normal(size=(2, 2, 5, 5))
        w_value = rng.normal(size=(3, 2, 3, 3))
        b_value = rng.normal(size=3)

        output = self.graph.conv2d(
            self.graph.constant(x_value),
            self.graph.constant(w_value),
            self.graph.constant(b_value),
            stride=2,
            padding=1,
        )

        padded = np.pad(x_value, ((0, 0), (0, 0), (1, 1), (1, 1)))
        expected = np.zeros((2, 3, 3, 3))
        for n in range(2):
            for o in range(3):
                for i in range(3):
                    for j in range(3):
                        window = padded[n, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3]
                        expected[n, o, i, j] = np.sum(window * w_value[o]) + b_value[o]
        np.testing.assert_allclose(output.value, expected, atol=1e-12)

    def test_conv2d_rejects_channel_mismatch(self) -> None:
        with self.assertRaisesRegex(ShapeError, "kernel expects 3"):
            self.graph.conv2d(
                self.graph.constant(np.zeros((1, 2, 4, 4))),
                self.graph.constant(np.zeros((1, 3, 3, 3))),
                self.graph.constant(np.zeros(1)),
            )

    def test_max_pool_routes_gradient_to_the_first_maximum(self) -> None:
        x = self.graph.parameter("x", np.array([[[[1.0, 5.0], [5.0, 2.0]]]]))

        pooled = self.graph.max_pool2d(x, size=2, stride=2)
        gradients = backward(self.graph, self.graph.sum(pooled))

        self.assertEqual(pooled.value.ravel().tolist(), [5.0])
        np.testing.assert_array_equal(gradients["x"], [[[[0.0, 1.0], [0.0, 0.0]]]])

    def test_batch_norm_normalizes_per_channel(self) -> None:
        x = self.graph.constant([[1.0, 10.0], [3.0, 30.0]])
        gamma = self.graph.constant([1.0, 2.0])
        beta = self.graph.constant([0.0, 1.0])

        output, mean, variance = self.graph.batch_norm(x, gamma, beta, eps=1e-12)

        np.testing.assert_allclose(mean, [2.0, 20.0])
        np.testing.assert_allclose(variance, [1.0, 100.0])
        np.testing.assert_allclose(output.value, [[-1.0, -1.0], [1.0, 3.0]], atol=1e-9)

    def test_reshape_rejects_incompatible_sizes(self) -> None:
        with self.assertRaisesRegex(ShapeError, "reshape"):
            self.graph.reshape(self.graph.constant(np.zeros((2, 3))), (4, 2))

    def test_describe_names_the_op(self) -> None:
        node = self.graph.relu(self.graph.constant([-1.0, 2.0]))

        self.assertEqual(describe(node), {"index": 1, "kind": "relu", "shape": [2]})


class GradCheckTests(unittest.TestCase):
    def test_matmul_gradient_passes_at_random_points(self) -> None:
        rng = rng_stream(1, "grad-matmul")
        for point in range(10):
            weights = rng.normal(size=(3, 2))
            readout = rng.normal(size=(4, 2))
            with self.subTest(point=point):
                error = grad_check(
                    lambda g, x, w=weights, r=readout: g.sum(
                        g.mul(g.matmul(x, g.constant(w)), g.constant(r))
                    ),
                    rng.normal(size=(4, 3)),
                )
                self.assertLessEqual(error, 1e-5)

    def test_conv2d_parameter_gradients_pass(self) -> None:
        rng = rng_stream(2, "grad-conv")
        readout = rng.normal(size=(2, 2, 4, 4))

        def loss(graph: Graph):
            output = graph.conv2d(
                graph.parameters["x"],
                graph.parameters["w"],
                graph.parameters["b"],
                padding=1,
            )
            return graph.sum(graph.mul(output, graph.constant(readout)))

        errors = grad_check_parameters(
            loss,
            {
                "x": rng.normal(size=(2, 3, 4, 4)),
                "w": rng.normal(size=(2, 3, 3, 3)),
                "b": rng.normal(size=2),
            },
            max_coordinates=40,
        )

        self.assertEqual(set(errors), {"x", "w", "b"})
        self.assertLessEqual(max(errors.values()), 1e-5)

    def test_batch_norm_gradients_pass(self) -> None:
        rng = rng_stream(3, "grad-bn")
        readout = rng.normal(size=(5, 3))

        def loss(graph: Graph):
            output, _, _ = graph.batch_norm(
                graph.parameters["x"], graph.parameters["gamma"], graph.parameters["beta"], eps=1e-5
            )
            return graph.sum(graph.mul(output, graph.constant(readout)))

        errors = grad_check_parameters(
            loss,
            {
                "x": rng.normal(size=(5, 3)),
                "gamma": rng.uniform(0.5, 1.5, size=3),
                "beta": rng.normal(size=3),
            },
        )

        self.assertLessEqual(max(errors.values()), 1e-4)

    def test_a_wrong_gradient_is_detected(self) -> None:
        def broken(graph: Graph, x):
            # Detaching through a constant hides the square's dependence on x.
            detached = graph.constant(x.value)
            return graph.sum(graph.mul(graph.square(detached), x))

        self.assertGreater(grad_check(broken, [0.5, 1.5, -2.0]), 0.1)

    def test_relative_error_formula(self) -> None:
        np.testing.assert_allclose(
            relative_error([2.0, 0.0, -1.0, 0.0], [1.0, 0.0, 1.0, 1e-13]),
            [1.0 / 3.0, 0.0, 1.0, 0.1],
        )

    def test_small_wrong_gradients_are_not_hidden_by_large_ones(self) -> None:
        weights, planted = [3.0, 1e-8], [0.0, 1e-10]

        def skewed(graph: Graph, x):
            offset = graph.constant(planted)
            # The two products cancel in value; only the first one carries a gradient.
            extra = graph.sub(graph.mul(x, offset), graph.mul(graph.constant(x.value), offset))
            return graph.sum(graph.add(graph.mul(x, graph.constant(weights)), extra))

        self.assertGreater(grad_check(skewed, [0.0, 0.0]), 1e-3)
        self.assertLess(grad_check(skewed, [0.0, 0.0], measure=block_scaled_error), 1e-5)

    def test_eps_must_be_positive(self) -> None:
        with self.assertRaisesRegex(ContractError, "eps must be positive"):
            grad_check(lambda g, x: g.sum(x), [1.0], eps=0.0)


if __name__ == "__main__":
    unittest.main()
