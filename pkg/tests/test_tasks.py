from unittest import TestCase

import numpy as np
from numpy.testing import assert_array_equal

from sqftforge.errors import ConfigError
from sqftforge.tasks import TaskSpec, make_task
from sqftforge.tensor import Rng

SMALL = TaskSpec(in_dim=16, hidden=(16,), train_size=256, validation_size=64, test_size=128, latent_dim=4)


class TaskTest(TestCase):
    def test_same_seed_same_task(self):
        a = make_task(SMALL, 3)
        b = make_task(SMALL, 3)
        assert_array_equal(a.train.x, b.train.x)
        assert_array_equal(a.test.y, b.test.y)
        for wa, wb in zip(a.teacher, b.teacher):
            assert_array_equal(wa, wb)

    def test_seeds_differ(self):
        self.assertFalse(np.array_equal(make_task(SMALL, 0).train.x, make_task(SMALL, 1).train.x))

    def test_splits(self):
        task = make_task(SMALL)
        self.assertEqual((len(task.train), len(task.validation), len(task.test)), (256, 64, 128))
        self.assertEqual(task.train.y.shape, (1, 256))
        self.assertEqual([w.shape for w in task.teacher], [(16, 16), (1, 16)])

    def test_teacher_is_frozen_float32(self):
        for weight in make_task(SMALL).teacher:
            assert_array_equal(weight.astype(np.float32).astype(np.float64), weight)
            with self.assertRaises(ValueError):
                weight[0, 0] = 1.0

    def test_regression_noise_floor(self):
        task = make_task()
        self.assertAlmostEqual(task.noise_floor, 1e-4, delta=2e-5)

    def test_classification_labels_are_teacher_argmax(self):
        task = make_task(SMALL.replace(kind='classification'))
        self.assertEqual(task.test.y.shape, (128,))
        self.assertEqual(int(task.test.y.max()) < 8, True)
        predicted = np.argmax(task.teacher_forward(task.test.x), axis=0)
        self.assertEqual(float(np.mean(predicted == task.test.y)), 1.0)

    def test_validation(self):
        for bad in (
            SMALL.replace(kind='ranking'),
            SMALL.replace(train_size=0),
            SMALL.replace(kind='classification', classes=1),
            SMALL.replace(noise=-1.0),
        ):
            with self.assertRaises(ConfigError):
                make_task(bad)


class DatasetTest(TestCase):
    def test_sample(self):
        data = make_task(SMALL).validation
        sample = data.sample(10, Rng(0, 'proxy'))
        again = data.sample(10, Rng(0, 'proxy'))
        self.assertEqual(len(sample), 10)
        assert_array_equal(sample.x, again.x)
        self.assertIs(data.sample(1000, Rng(0)), data)

    def test_classification_targets(self):
        data = make_task(SMALL.replace(kind='classification')).train
        assert_array_equal(data.targets([0, 2]), data.y[[0, 2]])
        self.assertEqual(data.subset([1, 2, 3]).head, 'classification')

    def test_calibration_rows(self):
        data = make_task(SMALL).train
        self.assertEqual(data.calibration(32).shape, (32, 16))
