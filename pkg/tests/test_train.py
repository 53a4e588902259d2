from math import log
from unittest import TestCase

import numpy as np
from numpy.testing import assert_allclose, assert_array_equal

from sqftforge.adapter import (
    QA_SPARSE_PEFT,
    SPARSE_PEFT,
    VANILLA_LORA,
    AdapterizedLayer,
    RankSpace,
    new_elastic_adapter,
)
from sqftforge.errors import ConfigError, ShapeError, TrainingError
from sqftforge.quant import calibrate_params, dequantize, quantize_rtn
from sqftforge.sparsity import prune
from sqftforge.tasks import Dataset
from sqftforge.tensor import Rng
from sqftforge.train import (
    Adam,
    MlpModel,
    TrainConfig,
    backward,
    cross_entropy,
    finetune,
    finite_diff_check,
    loss,
    mlp_forward,
)


def small_model(dims=(4, 3, 2), mode=VANILLA_LORA, ranks=(2, 1), head='regression', seed=0):
    """A model with nonzero B so every gradient is exercised."""
    layers = []
    for i, (fan_in, fan_out) in enumerate(zip(dims, dims[1:])):
        weight = Rng(seed, 'w', i).normal(0.0, 1.0, (fan_out, fan_in))
        mask = None
        params = None
        if mode != VANILLA_LORA:
            weight, mask = prune(weight, 0.5, 'magnitude')
        if mode == QA_SPARSE_PEFT:
            params = calibrate_params(weight, 4)
            weight = dequantize(quantize_rtn(weight, params))
        space = RankSpace(ranks).fit(fan_in, fan_out)
        adapter = new_elastic_adapter(fan_in, fan_out, space, 2.0, Rng(seed, 'a', i))
        adapter.B = Rng(seed, 'b', i).normal(0.0, 0.3, adapter.B.shape)
        layers.append(
            AdapterizedLayer(weight=weight, adapter=adapter, mode=mode, mask=mask, params=params)
        )
    return MlpModel(layers=layers, head=head)


def batch(model, count=5, seed=0, classes=None):
    x = Rng(seed, 'x').normal(size=(model.in_dim, count))
    if classes:
        return x, Rng(seed, 'y').integers(0, classes, size=count)
    return x, Rng(seed, 'y').normal(size=(model.out_dim, count))


def regression_data(model, count=128, seed=0):
    """Targets from a perturbed copy of the model's own bases."""
    x = Rng(seed, 'x').normal(size=(model.in_dim, count))
    weights = [w + 0.3 * Rng(seed, 't', i).normal(size=w.shape) for i, w in enumerate(model.base_weights())]
    return Dataset(x=x, y=mlp_forward(weights, x))


class ModelTest(TestCase):
    def test_forward_chain(self):
        model = small_model()
        x, _ = batch(model)
        expected = model.layers[1].forward(np.maximum(model.layers[0].forward(x), 0.0))
        assert_array_equal(model.forward(x), expected)

    def test_rank_override_is_pure(self):
        model = small_model(ranks=(2, 1))
        x, _ = batch(model)
        before = model.active_ranks()
        model.forward(x, ranks=(1, 1))
        self.assertEqual(model.active_ranks(), before)

    def test_validation(self):
        model = small_model()
        with self.assertRaises(ShapeError):
            MlpModel(layers=list(reversed(model.layers)))
        with self.assertRaises(ConfigError):
            MlpModel(layers=model.layers, head='ranking')
        with self.assertRaises(ConfigError):
            model.set_active_ranks((2,))

    def test_adapter_count(self):
        model = small_model(ranks=(2, 1))
        self.assertEqual(model.adapter_count(), 2 * (4 + 3) + 2 * (3 + 2))
        self.assertEqual(model.adapter_count((1, 1)), (4 + 3) + (3 + 2))


class LossTest(TestCase):
    def test_uniform_logits(self):
        self.assertAlmostEqual(cross_entropy(np.zeros((8, 3)), np.array([0, 3, 7])), log(8), places=12)

    def test_label_checks(self):
        with self.assertRaises(ShapeError):
            cross_entropy(np.zeros((3, 2)), np.array([0, 3]))
        with self.assertRaises(ShapeError):
            cross_entropy(np.zeros((3, 2)), np.array([0]))


class GradientTest(TestCase):
    def test_linear_model(self):
        model = small_model(dims=(5, 3), ranks=(3, 2))
        x, y = batch(model)
        self.assertLessEqual(finite_diff_check(model, x, y), 1e-6)

    def test_vanilla(self):
        for seed in range(3):
            model = small_model(seed=seed)
            x, y = batch(model, seed=seed)
            self.assertLessEqual(finite_diff_check(model, x, y), 1e-4)

    def test_sparse_peft(self):
        for seed in range(3):
            model = small_model(mode=SPARSE_PEFT, seed=seed)
            x, y = batch(model, seed=seed)
            self.assertLessEqual(finite_diff_check(model, x, y), 1e-4)

    def test_classification(self):
        model = small_model(dims=(4, 3, 3), mode=SPARSE_PEFT, head='classification')
        x, y = batch(model, classes=3)
        self.assertLessEqual(finite_diff_check(model, x, y), 1e-4)

    def test_qa_inside_cells(self):
        for seed in range(3):
            model = small_model(dims=(8, 4, 2), mode=QA_SPARSE_PEFT, seed=seed)
            x, y = batch(model, seed=seed)
            self.assertLessEqual(finite_diff_check(model, x, y), 1e-4)

    def test_inactive_slices_get_no_gradient(self):
        model = small_model(dims=(5, 4), ranks=(3, 1))
        x, y = batch(model)
        gradients = backward(model, x, y, ranks=(1,))
        self.assertTrue(np.all(gradients.A[0][1:] == 0.0))
        self.assertTrue(np.all(gradients.B[0][:, 1:] == 0.0))
        self.assertGreater(gradients.max_abs(), 0.0)


class FinetuneTest(TestCase):
    def test_loss_decreases(self):
        model = small_model(dims=(6, 6, 2), mode=SPARSE_PEFT, ranks=(4, 2))
        data = regression_data(model)
        before = loss(model, data.x, data.y)
        _, result = finetune(model, data, TrainConfig(epochs=10, batch_size=16, learning_rate=1e-2))
        self.assertLess(loss(model, data.x, data.y), before)
        self.assertEqual(len(result.history), 10)
        self.assertEqual(result.steps, 80)

    def test_base_and_mask_respected(self):
        model = small_model(dims=(6, 6, 2), mode=SPARSE_PEFT, ranks=(4, 2))
        bases = [layer.weight.copy() for layer in model.layers]
        data = regression_data(model)
        finetune(model, data, TrainConfig(epochs=3, batch_size=16, learning_rate=1e-2))
        for layer, base in zip(model.layers, bases):
            assert_array_equal(layer.weight, base)
            for rank in layer.adapter.rank_space:
                self.assertTrue(np.all(layer.effective_weight(rank)[~layer.mask] == 0.0))

    def test_qa_training_stays_on_grid(self):
        model = small_model(dims=(8, 4, 2), mode=QA_SPARSE_PEFT, ranks=(2, 1))
        data = regression_data(model, count=64)
        finetune(model, data, TrainConfig(epochs=2, batch_size=16, learning_rate=1e-2))
        for layer in model.layers:
            weight = layer.effective_weight()
            assert_array_equal(weight, dequantize(quantize_rtn(weight, layer.params)))

    def test_singleton_space_matches_fixed_rank(self):
        results = []
        for nls in (True, False):
            model = small_model(dims=(6, 6, 2), ranks=(3,))
            data = regression_data(model)
            finetune(model, data, TrainConfig(epochs=2, batch_size=16, nls=nls))
            results.append(model)
        for a, b in zip(*(model.layers for model in results)):
            assert_array_equal(a.adapter.A, b.adapter.A)
            assert_array_equal(a.adapter.B, b.adapter.B)

    def test_deterministic(self):
        runs = []
        for _ in range(2):
            model = small_model(dims=(6, 6, 2), ranks=(4, 2, 1))
            _, result = finetune(model, regression_data(model), TrainConfig(epochs=2, batch_size=16))
            runs.append((model, result.history))
        self.assertEqual(runs[0][1], runs[1][1])
        assert_array_equal(runs[0][0].layers[0].adapter.B, runs[1][0].layers[0].adapter.B)

    def test_progress(self):
        model = small_model()
        seen = []
        finetune(model, regression_data(model, count=16), TrainConfig(epochs=3), lambda *args: seen.append(args))
        self.assertEqual([epoch for epoch, _ in seen], [1, 2, 3])

    def test_divergence(self):
        model = small_model(dims=(6, 3), ranks=(2,))
        data = regression_data(model)
        config = TrainConfig(epochs=50, batch_size=128, optimizer='sgd', learning_rate=1e6)
        with self.assertRaises(TrainingError) as raised:
            with np.errstate(all='ignore'):
                finetune(model, data, config)
        self.assertLess(len(raised.exception.history), 50)

    def test_config_validation(self):
        for bad in (
            TrainConfig(optimizer='lion'),
            TrainConfig(epochs=0),
            TrainConfig(learning_rate=-1.0),
            TrainConfig(beta1=1.0),
        ):
            with self.assertRaises(ConfigError):
                bad.validate()
        with self.assertRaises(ConfigError):
            finetune(small_model(), Dataset(x=np.zeros((4, 0)), y=np.zeros((2, 0))), TrainConfig())


class AdamTest(TestCase):
    def test_first_step_moves_by_learning_rate(self):
        adam = Adam(config=TrainConfig(learning_rate=0.01), step=1)
        parameter = np.zeros(3)
        adam.update('p', parameter, np.array([2.0, -0.5, 1e-3]))
        assert_allclose(parameter, [-0.01, 0.01, -0.01], rtol=1e-4)


class ZeroUpdateTest(TestCase):
    def test_zero_learning_rate_changes_nothing(self):
        for mode in (VANILLA_LORA, SPARSE_PEFT, QA_SPARSE_PEFT):
            for optimizer in ('adam', 'sgd'):
                model = small_model(dims=(6, 4, 2), mode=mode, ranks=(3, 2, 1))
                before = [(layer.weight.tobytes(), layer.adapter.A.tobytes(), layer.adapter.B.tobytes()) for layer in model.layers]
                config = TrainConfig(epochs=2, batch_size=16, learning_rate=0.0, optimizer=optimizer)
                finetune(model, regression_data(model, count=64), config)
                after = [(layer.weight.tobytes(), layer.adapter.A.tobytes(), layer.adapter.B.tobytes()) for layer in model.layers]
                self.assertEqual(after, before, msg=f"{mode} {optimizer}")

    def test_zero_b_gradients(self):
        for mode in (VANILLA_LORA, SPARSE_PEFT):
            model = small_model(dims=(5, 3), mode=mode, ranks=(3, 2))
            layer = model.layers[0]
            layer.adapter.B[:] = 0.0
            x, y = batch(model, count=7)
            rank = 2
            gradients = backward(model, x, y, ranks=(rank,))
            assert_array_equal(gradients.A[0], np.zeros_like(layer.adapter.A))
            # mean squared error of a linear layer: dL/dW = 2 (W x − y) xᵀ / n
            grad_w = 2.0 * (layer.weight @ x - y) @ x.T / y.size
            if layer.mask is not None:
                grad_w = grad_w * layer.mask
            expected = (2.0 / rank) * grad_w @ layer.adapter.A[:rank].T
            assert_allclose(gradients.B[0][:, :rank], expected, rtol=1e-12, atol=1e-15)
            assert_array_equal(gradients.B[0][:, rank:], 0.0)

    def test_all_zero_mask(self):
        weight = np.zeros((3, 4))
        mask = np.zeros((3, 4), dtype=bool)
        adapter = new_elastic_adapter(4, 3, RankSpace((2, 1)), 2.0, Rng(0, 'a'))
        adapter.B = Rng(0, 'b').normal(0.0, 0.3, adapter.B.shape)
        layer = AdapterizedLayer(weight=weight, adapter=adapter, mode=SPARSE_PEFT, mask=mask)
        model = MlpModel(layers=[layer])
        x, y = batch(model)
        gradients = backward(model, x, y)
        self.assertEqual(gradients.max_abs(), 0.0)
        finetune(model, Dataset(x=x, y=y), TrainConfig(epochs=2, batch_size=2, learning_rate=1e-2))
        assert_array_equal(layer.delta(), weight)
        assert_array_equal(layer.merge(), weight)
