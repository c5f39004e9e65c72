"""Tests for filtered ranking, metrics and continual aggregation."""

import os
import sys
import unittest
from unittest.mock import patch

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import ConfigError, UnknownEntityError
from evaluator import (RankResult, aggregate, eval_threads, evaluate_stream, filtered_rank, link_metrics,
                       node_accuracy, rank_queries)
from graph_store import GraphPart, StreamDataset, Triple, as_triple_array
from model import GraphEmbeddingModel, ModelConfig


class FixedScores:
    """Scores every triple by a lookup on (head, tail)"""

    def __init__(self, table, relation_count: int = 1):
        self.table_scores = table
        self.table = type("Table", (), {"relation_count": relation_count})()

    def score(self, triples):
        return np.array([self.table_scores.get((int(h), int(t)), 0.0) for h, _, t in triples])


class TransformedScores:
    """Wraps a model and passes its scores through ``transform``"""

    def __init__(self, model, transform):
        self.model = model
        self.table = model.table
        self.transform = transform

    def score(self, triples):
        return self.transform(self.model.score(triples))


class FixedLogits:
    def __init__(self, logits):
        self.logits = np.asarray(logits)

    def predict_scores(self, nodes):
        return self.logits[np.asarray(nodes)]


def _kg(count: int, nodes: int, relations: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = set()
    while len(rows) < count:
        rows.add((int(rng.integers(nodes)), int(rng.integers(relations)), int(rng.integers(nodes))))
    return as_triple_array(sorted(rows))


def _result(head: int, tail: int) -> RankResult:
    return RankResult(Triple(0, 0, 1), head, tail, head, tail)


class TestFilteredRank(unittest.TestCase):

    def test_strictly_best_query(self):
        model = FixedScores({(0, 1): 5.0})
        result = filtered_rank((0, 0, 1), model, set(), np.arange(5))
        self.assertEqual((result.head_rank, result.tail_rank), (1, 1))

    def test_ties_rank_first(self):
        model = FixedScores({})
        result = filtered_rank((2, 0, 3), model, set(), np.arange(5))
        self.assertEqual((result.head_rank, result.tail_rank), (1, 1))

    def test_known_corruptions_are_filtered(self):
        model = FixedScores({(0, 1): 1.0, (0, 2): 3.0, (0, 3): 2.0})
        result = filtered_rank((0, 0, 1), model, {(0, 0, 1), (0, 0, 2)}, np.arange(5))
        self.assertEqual(result.tail_rank, 2)
        self.assertEqual(result.raw_tail_rank, 3)

    def test_unknown_entity(self):
        with self.assertRaises(UnknownEntityError):
            filtered_rank((0, 0, 9), FixedScores({}), set(), np.arange(5))

    def test_unknown_relation(self):
        with self.assertRaises(UnknownEntityError):
            filtered_rank((0, 3, 1), FixedScores({}), set(), np.arange(5))

    def test_matches_brute_force_oracle(self):
        kg = _kg(50, 12, 2, 4)
        known = set(map(tuple, kg.tolist()))
        model = GraphEmbeddingModel(ModelConfig(K=2, n=1, d=4, seed=3, show_progress=False), 12, 2)
        candidates = np.arange(12)
        for h, r, t in kg.tolist():
            target = float(model.score(as_triple_array([(h, r, t)]))[0])
            head_rank = tail_rank = 1
            for e in range(12):
                if e != h and (e, r, t) not in known:
                    head_rank += float(model.score(as_triple_array([(e, r, t)]))[0]) > target
                if e != t and (h, r, e) not in known:
                    tail_rank += float(model.score(as_triple_array([(h, r, e)]))[0]) > target
            result = filtered_rank((h, r, t), model, known, candidates)
            self.assertEqual((result.head_rank, result.tail_rank), (head_rank, tail_rank), (h, r, t))

    def test_strictly_increasing_transform_keeps_metrics(self):
        kg = _kg(40, 10, 2, 6)
        known = set(map(tuple, kg.tolist()))
        model = GraphEmbeddingModel(ModelConfig(K=2, n=1, d=4, seed=2, show_progress=False), 10, 2)
        base, _ = rank_queries(kg, model, known, np.arange(10))
        for transform in (lambda s: 3.0 * s + 1.0, np.exp, lambda s: s ** 3):
            shifted, _ = rank_queries(kg, TransformedScores(model, transform), known, np.arange(10))
            self.assertEqual(link_metrics(shifted), link_metrics(base))

    def test_filtered_rank_never_exceeds_raw(self):
        kg = _kg(60, 12, 3, 7)
        known = set(map(tuple, kg.tolist()))
        model = GraphEmbeddingModel(ModelConfig(K=2, n=1, d=4, seed=5, show_progress=False), 12, 3)
        results, _ = rank_queries(kg, model, known, np.arange(12))
        for result in results:
            self.assertLessEqual(result.head_rank, result.raw_head_rank)
            self.assertLessEqual(result.tail_rank, result.raw_tail_rank)

    def test_threads_keep_query_order(self):
        kg = _kg(20, 8, 1, 5)
        model = GraphEmbeddingModel(ModelConfig(K=2, n=1, d=4, seed=1, show_progress=False), 8, 1)
        known = set(map(tuple, kg.tolist()))
        serial, _ = rank_queries(kg, model, known, np.arange(8), threads=1)
        parallel, _ = rank_queries(kg, model, known, np.arange(8), threads=4)
        self.assertEqual(serial, parallel)

    def test_unknown_queries_are_skipped(self):
        with self.assertLogs("evaluator", level="WARNING"):
            results, skipped = rank_queries(as_triple_array([(0, 0, 1), (0, 0, 9)]), FixedScores({}),
                                            set(), np.arange(5))
        self.assertEqual((len(results), skipped), (1, 1))


class TestMetrics(unittest.TestCase):

    def test_mrr_and_hits(self):
        mrr, hits = link_metrics([_result(1, 1), _result(2, 2), _result(4, 4)])
        self.assertAlmostEqual(mrr, (1 + 0.5 + 0.25) / 3)
        self.assertEqual(hits, 1.0)

    def test_all_first(self):
        self.assertEqual(link_metrics([_result(1, 1)])[0], 1.0)

    def test_hits_boundary_is_inclusive(self):
        self.assertEqual(link_metrics([_result(11, 10)])[1], 0.5)

    def test_no_results(self):
        with self.assertRaises(ValueError):
            link_metrics([])

    def test_accuracy_extremes(self):
        model = FixedLogits([[1.0, 0.0], [0.0, 1.0], [1.0, 0.0]])
        self.assertEqual(node_accuracy([0, 1, 2], np.array([0, 1, 0]), model), 1.0)
        self.assertEqual(node_accuracy([0, 1, 2], np.array([1, 0, 1]), model), 0.0)

    def test_accuracy_matches_hand_count(self):
        rng = np.random.default_rng(6)
        logits, labels = rng.normal(size=(10, 3)), rng.integers(3, size=10)
        correct = sum(int(np.argmax(logits[i]) == labels[i]) for i in range(10))
        self.assertAlmostEqual(node_accuracy(np.arange(10), labels, FixedLogits(logits)), correct / 10)

    def test_accuracy_ties_pick_smallest_class(self):
        self.assertEqual(node_accuracy([0], np.array([0]), FixedLogits([[2.0, 2.0]])), 1.0)


class TestAggregation(unittest.TestCase):

    def test_single_part(self):
        self.assertEqual(aggregate([0.7], 0.7), (0.7, 0.7))

    def test_average_of_parts(self):
        self.assertAlmostEqual(aggregate([0.4, 0.6], 0.55)[1], 0.5)

    def test_empty_parts_are_ignored(self):
        self.assertAlmostEqual(aggregate([0.4, None], 0.4)[1], 0.4)

    def test_equal_size_parts_whole_equals_average(self):
        rng = np.random.default_rng(2)
        parts = [[_result(int(a), int(b)) for a, b in rng.integers(1, 20, size=(4, 2))] for _ in range(3)]
        per_part = [link_metrics(p)[0] for p in parts]
        whole = link_metrics([r for p in parts for r in p])[0]
        self.assertAlmostEqual(aggregate(per_part, whole)[1], whole, delta=1e-12)


class TestEvaluateStream(unittest.TestCase):

    def test_link_report_structure(self):
        kg = _kg(30, 8, 2, 8)
        dataset = StreamDataset([GraphPart(0, train=kg[:20], query=kg[20:24]),
                                 GraphPart(1, train=kg[24:28], query=kg[28:])], 8, 2)
        model = GraphEmbeddingModel(ModelConfig(K=2, n=1, d=4, show_progress=False), 8, 2)
        report = evaluate_stream(dataset, 1, model)
        self.assertEqual(report.part, 1)
        self.assertEqual([p["part"] for p in report.per_part], [0, 1])
        self.assertEqual(report.n_queries + report.skipped_queries, 6)
        self.assertIsNone(report.accuracy_whole)
        self.assertNotIn("runtime_s", report.to_dict(timing=False))

    def test_evaluation_leaves_parameters_untouched(self):
        kg = _kg(30, 8, 2, 9)
        dataset = StreamDataset([GraphPart(0, train=kg[:20], query=kg[20:24]),
                                 GraphPart(1, train=kg[24:28], query=kg[28:])], 8, 2)
        model = GraphEmbeddingModel(ModelConfig(K=2, n=1, d=4, show_progress=False), 8, 2)
        before = model.checksum()
        snapshot = [p.value.copy() for p in model.parameters()]
        evaluate_stream(dataset, 1, model, threads=2)
        self.assertEqual(model.checksum(), before)
        for p, value in zip(model.parameters(), snapshot):
            np.testing.assert_array_equal(p.value, value)

    def test_eval_threads_from_environment(self):
        with patch.dict(os.environ, {"CGRL_EVAL_THREADS": "3"}):
            self.assertEqual(eval_threads(), 3)
        with patch.dict(os.environ, {"CGRL_EVAL_THREADS": "zero"}):
            with self.assertRaises(ConfigError):
                eval_threads()


if __name__ == '__main__':
    unittest.main()
