from __future__ import annotations

import math
import unittest

import numpy as np

from coopsubnet.diffcore import ContractError, Graph, ShapeError, backward, rng_stream
from coopsubnet.models import Mode
from coopsubnet.nn import (
    BatchNorm,
    Conv2D,
    Dense,
    Dropout,
    Parameter,
    cross_entropy_loss,
    l1_latent_penalty,
    l2_weight_penalty,
    mse_loss,
    relative_reconstruction_loss,
    xavier_init,
)


class XavierInitTests(unittest.TestCase):
    def test_samples_stay_inside_the_bound(self) -> None:
        weights = xavier_init(300, 100, seed=0)

        bound = math.sqrt(6.0 / 400)
        self.assertEqual(weights.shape, (300, 100))
        self.assertLessEqual(float(np.abs(weights).max()), bound)
        self.assertAlmostEqual(float(weights.mean()), 0.0, delta=0.01)

    def test_variance_matches_the_uniform_bound(self) -> None:
        weights = xavier_init(100, 100, seed=4)

        self.assertEqual(weights.size, 10_000)
        self.assertAlmostEqual(float(weights.var()), 0.01, delta=0.002)

    def test_streams_are_reproducible_and_independent(self) -> None:
        np.testing.assert_array_equal(xavier_init(4, 3, 7), xavier_init(4, 3, 7))
        self.assertFalse(
            np.array_equal(
                xavier_init(4, 3, 7, stream="fc1.weight"),
                xavier_init(4, 3, 7, stream="encoder.weight"),
            )
        )

    def test_fans_must_be_positive(self) -> None:
        with self.assertRaisesRegex(ContractError, "fan_in and fan_out"):
            xavier_init(0, 3, 0)


class LayerTests(unittest.TestCase):
    def test_dense_forward_is_an_affine_map(self) -> None:
        layer = Dense("fc", 3, 2, seed=1)
        graph = Graph()
        x = np.array([[1.0, 2.0, 3.0]])

        output = layer.forward(graph, graph.constant(x), Mode.EVAL)

        np.testing.assert_allclose(output.value, x @ layer.weight.value + layer.bias.value)
        self.assertTrue(layer.weight.decay)
        self.assertFalse(layer.bias.decay)

    def test_dense_rejects_the_wrong_width(self) -> None:
        layer = Dense("fc", 3, 2, seed=1)
        graph = Graph()

        with self.assertRaisesRegex(ShapeError, r"fc: expected input \[batch x 3\]"):
            layer.forward(graph, graph.constant(np.zeros((2, 4))), Mode.EVAL)

    def test_conv_output_shape(self) -> None:
        layer = Conv2D("conv", 1, 4, 5, seed=0, padding=2)
        graph = Graph()

        output = layer.forward(graph, graph.constant(np.zeros((2, 1, 28, 28))), Mode.EVAL)

        self.assertEqual(output.shape, (2, 4, 28, 28))
        self.assertEqual(layer.output_shape(28, 28), (4, 28, 28))

    def test_batch_norm_updates_running_stats_only_in_train_mode(self) -> None:
        layer = BatchNorm("bn", 2, momentum=0.5)
        x = np.array([[1.0, 4.0], [3.0, 8.0]])

        graph = Graph()
        layer.forward(graph, graph.constant(x), Mode.TRAIN)
        np.testing.assert_allclose(layer.running_mean.value, [1.0, 3.0])
        np.testing.assert_allclose(layer.running_var.value, [1.0, 2.5])

        graph = Graph()
        layer.forward(graph, graph.constant(x * 10.0), Mode.EVAL)
        np.testing.assert_allclose(layer.running_mean.value, [1.0, 3.0])

    def test_batch_norm_needs_two_samples_in_train_mode(self) -> None:
        layer = BatchNorm("bn", 2)
        graph = Graph()

        with self.assertRaisesRegex(ContractError, "batch size >= 2"):
            layer.forward(graph, graph.constant(np.ones((1, 2))), Mode.TRAIN)

    def test_dropout_is_identity_in_eval_and_rescales_in_train(self) -> None:
        layer = Dropout("dropout", 0.5)
        x = np.ones((50, 40))

        graph = Graph()
        node = graph.constant(x)
        self.assertIs(layer.forward(graph, node, Mode.EVAL), node)

        graph = Graph()
        output = layer.forward(graph, graph.constant(x), Mode.TRAIN, rng_stream(0, "dropout"))
        values = set(np.unique(output.value).tolist())
        self.assertEqual(values, {0.0, 2.0})
        self.assertAlmostEqual(float(output.value.mean()), 1.0, delta=0.1)

    def test_dropout_preserves_the_mean(self) -> None:
        x = np.ones((100, 1000))
        for index, rate in enumerate((0.3, 0.5)):
            graph = Graph()
            rng = rng_stream(1, "mean", index)
            output = Dropout("dropout", rate).forward(graph, graph.constant(x), Mode.TRAIN, rng)
            with self.subTest(rate=rate):
                self.assertAlmostEqual(float(output.value.mean()), 1.0, delta=0.02)

    def test_dropout_masks_repeat_for_the_same_stream(self) -> None:
        layer = Dropout("dropout", 0.3)
        x = np.ones((4, 6))
        outputs = []
        for _ in range(2):
            graph = Graph()
            outputs.append(
                layer.forward(graph, graph.constant(x), Mode.TRAIN, rng_stream(5, "d", 1)).value
            )

        np.testing.assert_array_equal(outputs[0], outputs[1])

    def test_dropout_validation(self) -> None:
        with self.assertRaisesRegex(ContractError, r"rate must be in \[0, 1\)"):
            Dropout("dropout", 1.0)
        graph = Graph()
        with self.assertRaisesRegex(ContractError, "seeded generator"):
            Dropout("dropout", 0.5).forward(graph, graph.constant([[1.0]]), Mode.TRAIN)

    def test_parameter_assign_checks_shape(self) -> None:
        parameter = Parameter("w", np.zeros((2, 2)))

        with self.assertRaisesRegex(ShapeError, r"w: cannot assign shape \[3\]"):
            parameter.assign(np.zeros(3))


class LossTests(unittest.TestCase):
    def setUp(self) -> None:
        self.graph = Graph()

    def test_cross_entropy_of_uniform_logits_is_log_classes(self) -> None:
        loss = cross_entropy_loss(self.graph, self.graph.constant(np.zeros((4, 10))), [0, 1, 2, 3])

        self.assertAlmostEqual(loss.value, math.log(10.0))
        self.assertEqual(loss.per_sample.shape, (4,))

    def test_mse_sums_per_sample_and_averages_over_the_batch(self) -> None:
        prediction = self.graph.constant([[1.0, 2.0], [0.0, 0.0]])

        loss = mse_loss(self.graph, prediction, [[0.0, 0.0], [0.0, 3.0]])

        self.assertAlmostEqual(loss.value, (5.0 + 9.0) / 2)

    def test_mse_rejects_shape_mismatch(self) -> None:
        with self.assertRaisesRegex(ShapeError, "mse_loss"):
            mse_loss(self.graph, self.graph.constant(np.zeros((2, 2))), np.zeros((2, 3)))

    def test_relative_reconstruction_is_scale_invariant(self) -> None:
        rng = rng_stream(0, "relative")
        f = rng.normal(size=(6, 8))
        f_hat = f + rng.normal(scale=0.1, size=f.shape)

        base = relative_reconstruction_loss(self.graph, self.graph.constant(f), f_hat).value
        for factor in (1e-3, 7.0, 1e3):
            with self.subTest(factor=factor):
                graph = Graph()
                scaled = relative_reconstruction_loss(
                    graph, graph.constant(f * factor), f_hat * factor
                ).value
                self.assertAlmostEqual(scaled, base, delta=1e-9)

    def test_relative_reconstruction_values(self) -> None:
        f = self.graph.constant([[3.0, 4.0], [1.0, 0.0]])

        exact = relative_reconstruction_loss(self.graph, f, [[3.0, 4.0], [1.0, 0.0]])
        zero = relative_reconstruction_loss(self.graph, f, np.zeros((2, 2)))

        self.assertEqual(exact.value, 0.0)
        self.assertAlmostEqual(zero.value, 1.0)

    def test_relative_reconstruction_survives_zero_features(self) -> None:
        graph = Graph()
        f = graph.parameter("f", np.zeros((2, 3)))

        loss = relative_reconstruction_loss(graph, f, np.ones((2, 3)) * 1e-6)
        gradients = backward(graph, loss.node)

        self.assertTrue(math.isfinite(loss.value))
        self.assertTrue(np.all(np.isfinite(gradients["f"])))

    def test_l1_latent_penalty_averages_absolute_sums(self) -> None:
        loss = l1_latent_penalty(self.graph, self.graph.constant([[1.0, -2.0], [0.0, 3.0]]))

        self.assertAlmostEqual(loss.value, 3.0)

    def test_l2_penalty_skips_blocks_not_marked_for_decay(self) -> None:
        weight = Parameter("fc.weight", np.array([[1.0, 2.0]]), decay=True)
        bias = Parameter("fc.bias", np.array([10.0]))

        self.assertAlmostEqual(l2_weight_penalty(self.graph, [weight, bias]).value, 5.0)
        self.assertEqual(l2_weight_penalty(Graph(), [bias]).value, 0.0)


if __name__ == "__main__":
    unittest.main()
