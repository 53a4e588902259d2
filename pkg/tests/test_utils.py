from asyncio import run
from io import StringIO
from unittest import TestCase
from unittest.mock import patch

import sqftforge.utils
from sqftforge.utils import Initializer, in_threads, initializer, parallel, warn


class Settings(Initializer):
    bits = 4
    calls = 0

    @initializer
    def label(self) -> str:
        self.calls += 1
        return f"INT{self.bits}"


class InitializerTest(TestCase):
    def test_keywords_and_defaults(self):
        self.assertEqual(Settings().bits, 4)
        self.assertEqual(Settings(bits=8).bits, 8)

    def test_replace_copies(self):
        settings = Settings(bits=3)
        changed = settings.replace(bits=2)
        self.assertEqual((settings.bits, changed.bits), (3, 2))
        self.assertIsInstance(changed, Settings)

    def test_lazy_attribute_is_cached(self):
        settings = Settings(bits=8)
        self.assertEqual(settings.label, "INT8")
        self.assertEqual(settings.label, "INT8")
        self.assertEqual(settings.calls, 1)
        self.assertEqual(Settings(label="given").label, "given")


class ConcurrencyTest(TestCase):
    def test_in_threads_keeps_order(self):
        self.assertEqual(run(in_threads(lambda n: n * n, [3, 1, 2])), (9, 1, 4))

    def test_parallel_returns_failures(self):
        async def fail():
            raise ValueError("boom")

        async def succeed():
            return 1

        results = run(parallel([succeed(), fail()]))
        self.assertEqual(results[0], 1)
        self.assertIsInstance(results[1], ValueError)
        self.assertEqual(run(parallel([])), ())


class WarnTest(TestCase):
    def test_writes_to_stderr(self):
        with patch('sqftforge.utils.stderr', StringIO()) as stderr:
            warn("forge:", "careful")
        self.assertEqual(stderr.getvalue(), "forge: careful\n")

    def test_exports_resolve(self):
        for name in sqftforge.utils.__all__:
            self.assertTrue(hasattr(sqftforge.utils, name), name)
