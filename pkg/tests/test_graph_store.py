"""Tests for stream storage, adjacency and neighbour queries."""

import os
import shutil
import sys
import tempfile
import unittest

import numpy as np

# Add parent directory to path for imports
sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from errors import DataError
from graph_store import (GraphPart, StreamDataset, Triple, Vocabulary, as_triple_array, build_adjacency,
                         load_citation_graph, load_stream, load_triple_file, node_neighbors, save_stream,
                         stream_statistics, to_triples, triple_neighbors)


def _random_graph(seed: int, count: int, nodes: int = 8, relations: int = 2) -> np.ndarray:
    rng = np.random.default_rng(seed)
    rows = {(int(rng.integers(nodes)), int(rng.integers(relations)), int(rng.integers(nodes)))
            for _ in range(count * 3)}
    return as_triple_array(sorted(rows)[:count])


class TestAdjacency(unittest.TestCase):

    def test_single_edge(self):
        index = build_adjacency([GraphPart(0, train=as_triple_array([(0, 0, 1)]))], 0)
        self.assertEqual(index.incident(0), (Triple(0, 0, 1),))
        self.assertEqual(index.incident(1), (Triple(0, 0, 1),))

    def test_empty_train_sets(self):
        index = build_adjacency([GraphPart(0), GraphPart(1)], 1)
        self.assertEqual(index.incidence, {})

    def test_matches_brute_force_scan(self):
        triples = _random_graph(3, 10)
        index = build_adjacency([GraphPart(0, train=triples)], 0)
        for node in range(8):
            expected = [t for t in to_triples(triples) if node in (t.head, t.tail)]
            self.assertEqual(sorted(set(index.incident(node))), sorted(set(expected)))

    def test_later_parts_excluded(self):
        parts = [GraphPart(0, train=as_triple_array([(0, 0, 1)])),
                 GraphPart(1, train=as_triple_array([(1, 0, 2)]))]
        index = build_adjacency(parts, 0)
        self.assertEqual(index.incident(2), ())
        self.assertEqual(index.upto, 0)

    def test_next_index_extends_previous_by_one_part(self):
        parts = [GraphPart(i, train=_random_graph(20 + i, 8)) for i in range(3)]
        for i in range(1, 3):
            before = build_adjacency(parts, i - 1)
            after = build_adjacency(parts, i)
            added = to_triples(parts[i].train)
            for node in range(8):
                expected = list(before.incident(node)) + [t for t in added if node in (t.head, t.tail)]
                self.assertEqual(sorted(after.incident(node)), sorted(expected))

    def test_out_of_range_part(self):
        with self.assertRaises(IndexError):
            build_adjacency([GraphPart(0)], 1)


class TestNeighbours(unittest.TestCase):

    def setUp(self):
        # chain a-b, b-c, c-d with a..d = 0..3
        self.chain = as_triple_array([(0, 0, 1), (1, 0, 2), (2, 0, 3)])
        self.index = build_adjacency([GraphPart(0, train=self.chain)], 0)

    def test_chain_first_order(self):
        self.assertEqual(triple_neighbors(Triple(0, 0, 1), self.index, 1), {Triple(1, 0, 2)})

    def test_chain_second_order(self):
        self.assertEqual(triple_neighbors(Triple(0, 0, 1), self.index, 2), {Triple(1, 0, 2), Triple(2, 0, 3)})

    def test_isolated_triple(self):
        for order in (1, 2):
            self.assertEqual(triple_neighbors(Triple(7, 0, 8), self.index, order), set())

    def test_invalid_order(self):
        with self.assertRaises(ValueError):
            triple_neighbors(Triple(0, 0, 1), self.index, 3)

    def test_second_order_contains_first_and_never_the_query(self):
        for seed in range(5):
            triples = _random_graph(seed, 15)
            index = build_adjacency([GraphPart(0, train=triples)], 0)
            for t in to_triples(triples):
                first = triple_neighbors(t, index, 1)
                second = triple_neighbors(t, index, 2)
                self.assertTrue(first <= second)
                self.assertNotIn(t, first)
                self.assertNotIn(t, second)

    def test_star_node_neighbours(self):
        star = as_triple_array([(0, 0, 1), (0, 0, 2), (3, 0, 0)])
        index = build_adjacency([GraphPart(0, train=star)], 0)
        self.assertEqual(node_neighbors(0, index), {0, 1, 2, 3})

    def test_isolated_node_is_its_own_neighbour(self):
        self.assertEqual(node_neighbors(9, self.index), {9})

    def test_node_neighbours_match_brute_force(self):
        triples = _random_graph(11, 20)
        index = build_adjacency([GraphPart(0, train=triples)], 0)
        for node in range(8):
            expected = {node}
            for h, _, t in triples.tolist():
                if node in (h, t):
                    expected |= {h, t}
            self.assertEqual(node_neighbors(node, index), expected)


class TestStreamDataset(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()
        self.dataset = StreamDataset(
            parts=[GraphPart(0, train=as_triple_array([(0, 0, 1), (1, 1, 2)]),
                             validation=as_triple_array([(0, 1, 2)]),
                             query=as_triple_array([(2, 0, 0)])),
                   GraphPart(1, train=as_triple_array([(2, 1, 3)]), query=as_triple_array([(3, 0, 1)]))],
            node_count=4, relation_count=2,
            node_names=["a", "b", "c", "d"], relation_names=["likes", "knows"])

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def test_known_triples_cover_every_split(self):
        self.assertEqual(self.dataset.known_triples(0), {(0, 0, 1), (1, 1, 2), (0, 1, 2), (2, 0, 0)})
        self.assertEqual(len(self.dataset.known_triples(1)), 6)

    def test_train_entities(self):
        np.testing.assert_array_equal(self.dataset.train_entities(0), [0, 1, 2])
        np.testing.assert_array_equal(self.dataset.train_entities(1), [0, 1, 2, 3])

    def test_overlapping_splits_rejected(self):
        bad = StreamDataset([GraphPart(0, train=as_triple_array([(0, 0, 1)]),
                                       query=as_triple_array([(0, 0, 1)]))], 2, 1)
        with self.assertRaises(DataError):
            bad.validate()

    def test_repeated_triple_across_parts_rejected(self):
        bad = StreamDataset([GraphPart(0, train=as_triple_array([(0, 0, 1)])),
                             GraphPart(1, train=as_triple_array([(0, 0, 1)]))], 2, 1)
        with self.assertRaises(DataError):
            bad.validate()

    def test_id_out_of_range_rejected(self):
        bad = StreamDataset([GraphPart(0, train=as_triple_array([(0, 0, 5)]))], 2, 1)
        with self.assertRaises(DataError):
            bad.validate()

    def test_save_and_load_stream(self):
        save_stream(self.dataset, self.tmp)
        loaded = load_stream(self.tmp)
        self.assertEqual(loaded.node_count, 4)
        self.assertEqual(loaded.relation_names, ["likes", "knows"])
        for a, b in zip(self.dataset.parts, loaded.parts):
            np.testing.assert_array_equal(a.train, b.train)
            np.testing.assert_array_equal(a.query, b.query)
        self.assertEqual(len(loaded.parts[1].validation), 0)

    def test_missing_stream_directory(self):
        with self.assertRaises(DataError):
            load_stream(os.path.join(self.tmp, "nowhere"))

    def test_statistics_accumulate(self):
        stats = stream_statistics(self.dataset)
        self.assertEqual(list(stats["part"]), [0, 1])
        self.assertEqual(list(stats["train"]), [2, 1])


class TestRawFiles(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.tmp, ignore_errors=True)

    def _write(self, name: str, text: str) -> str:
        path = os.path.join(self.tmp, name)
        with open(path, "w", encoding="utf-8") as f:
            f.write(text)
        return path

    def test_triple_file_builds_vocabularies(self):
        path = self._write("kg.tsv", "paris\tcapital_of\tfrance\nberlin\tcapital_of\tgermany\n")
        entities, relations = Vocabulary(), Vocabulary()
        triples = load_triple_file(path, entities, relations)
        np.testing.assert_array_equal(triples, [[0, 0, 1], [2, 0, 3]])
        self.assertEqual(entities.names, ["paris", "france", "berlin", "germany"])

    def test_wrong_column_count(self):
        path = self._write("kg.tsv", "a\tb\n")
        with self.assertRaises(DataError):
            load_triple_file(path, Vocabulary(), Vocabulary())

    def test_short_row_names_its_line(self):
        path = self._write("kg.tsv", "a\tr\tb\nc\td\n")
        entities, relations = Vocabulary(), Vocabulary()
        with self.assertRaisesRegex(DataError, r"kg\.tsv:2:"):
            load_triple_file(path, entities, relations)
        self.assertNotIn("", entities.names)

    def test_empty_field_is_rejected(self):
        path = self._write("kg.tsv", "a\tr\tb\n\tr\tb\n")
        with self.assertRaisesRegex(DataError, ":2:"):
            load_triple_file(path, Vocabulary(), Vocabulary())

    def test_blank_lines_are_skipped(self):
        path = self._write("kg.tsv", "a\tr\tb\n\nc\tr\td\n")
        triples = load_triple_file(path, Vocabulary(), Vocabulary())
        self.assertEqual(len(triples), 2)

    def test_vocabulary_round_trip(self):
        path = os.path.join(self.tmp, "entities.dict")
        Vocabulary(["x", "y"]).save(path)
        self.assertEqual(Vocabulary.load(path).names, ["x", "y"])

    def test_citation_graph(self):
        nodes = self._write("nodes.tsv", "p1\tml\t1,0\np2\tdb\t0,1\np3\tml\t1,1\n")
        edges = self._write("edges.tsv", "p1\tp2\np2\tp3\np1\tp2\n")
        graph = load_citation_graph(nodes, edges)
        self.assertEqual(graph.features.shape, (3, 2))
        np.testing.assert_array_equal(graph.labels, [0, 1, 0])
        np.testing.assert_array_equal(graph.edges, [[0, 1], [1, 2]])

    def test_citation_edge_to_unknown_node(self):
        nodes = self._write("nodes.tsv", "p1\tml\t1,0\n")
        edges = self._write("edges.tsv", "p1\tp9\n")
        with self.assertRaises(DataError):
            load_citation_graph(nodes, edges)


if __name__ == '__main__':
    unittest.main()
