import math
import unittest
from unittest import mock

from hnk import selftest
from hnk.exception import HnkExceptBadConfig, HnkExceptBadOptions, HnkExceptSelftestFailed
from hnk.selftest import Check, SuiteResult, check_results, run_selftest, suite_names

QUICK_SUITES = ["primitive gradients", "loss gradients", "model gradient", "loss identities",
                "smooth l1 continuity", "box codec roundtrip", "nms oracle", "average precision oracle",
                "assignment oracle", "cost counter", "plateau schedule"]


class SelftestTest(unittest.TestCase):
    def test_registry(self):
        names = suite_names()
        for name in QUICK_SUITES + ["anchor geometry", "freeze soundness"]:
            self.assertIn(name, names)
        self.assertEqual(len(names), len(set(names)))

    def test_reduced_suites_pass(self):
        results = run_selftest(QUICK_SUITES, seed=0, scale=0.05)
        self.assertEqual(QUICK_SUITES, [result.name for result in results])
        for result in results:
            self.assertTrue(result.passed, msg=f"{result.name}: {result.metric} {result.value} >= {result.limit}")
            self.assertGreater(result.cases, 0)
        self.assertIsNone(check_results(results))

    def test_seeded(self):
        first = run_selftest(["nms oracle", "box codec roundtrip"], seed=5, scale=0.02)
        second = run_selftest(["nms oracle", "box codec roundtrip"], seed=5, scale=0.02)
        self.assertEqual([(r.cases, r.value) for r in first], [(r.cases, r.value) for r in second])

    def test_unknown_suite(self):
        with self.assertRaises(HnkExceptBadOptions):
            run_selftest(["doesnt exist"])

    def test_failures(self):
        def broken(rng, scale):
            raise HnkExceptBadConfig("broken suite")

        def loose(rng, scale):
            return Check(1, "error", 1.0, 1e-3)

        with mock.patch.dict(selftest._suites, {"broken": broken, "loose": loose}):
            results = run_selftest(["broken", "loose", "cost counter"])
        self.assertEqual([False, False, True], [result.passed for result in results])
        self.assertTrue(math.isnan(results[0].value))
        self.assertEqual("broken suite", results[0].error)

        with self.assertRaises(HnkExceptSelftestFailed) as exc:
            check_results(results)
        self.assertTrue("broken, loose" in str(exc.exception), msg=str(exc.exception))

    def test_check_results_empty(self):
        self.assertIsNone(check_results([]))
        self.assertIsNone(check_results([SuiteResult("ok", True, 1, "error", 0.0, 1.0, 0.0)]))


if __name__ == '__main__':
    unittest.main()
