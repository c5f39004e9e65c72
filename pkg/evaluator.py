"""
Evaluation
==========

Filtered link-prediction ranks (head and tail corruption pooled), node
classification accuracy and the continual aggregation: after part i,
*whole* is the metric on the union of query sets 0..i and *average* is the
unweighted mean of the per-part metrics.

Rank = 1 + number of candidates scoring strictly better. Queries are
independent, so they may be ranked by a thread pool
(``CGRL_EVAL_THREADS``); results keep query order.
"""

import logging
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np
from sklearn.metrics import accuracy_score
from tqdm import tqdm

from errors import ConfigError, UnknownEntityError
from graph_store import StreamDataset, Triple

logger = logging.getLogger(__name__)

HITS_AT = 10


@dataclass(frozen=True)
class RankResult:
    query: Triple
    head_rank: int
    tail_rank: int
    raw_head_rank: int
    raw_tail_rank: int


def eval_threads() -> int:
    value = os.getenv("CGRL_EVAL_THREADS", "1")
    try:
        threads = int(value)
    except ValueError:
        raise ConfigError(f"CGRL_EVAL_THREADS must be an integer, got {value!r}")
    if threads < 1:
        raise ConfigError("CGRL_EVAL_THREADS must be at least 1")
    return threads


def _rank_side(scores: np.ndarray, position: int, filtered_out: np.ndarray) -> Tuple[int, int]:
    better = scores > scores[position]
    return 1 + int(np.sum(better & ~filtered_out)), 1 + int(np.sum(better))


def filtered_rank(query, model, known: Set[Tuple[int, int, int]], candidates: np.ndarray) -> RankResult:
    """Rank of ``query`` among head and tail corruptions drawn from ``candidates`` (sorted ids)"""
    h, r, t = (int(x) for x in query)
    candidates = np.asarray(candidates, dtype=np.int64)
    positions = np.searchsorted(candidates, [h, t])
    for node, pos in zip((h, t), positions):
        if pos >= len(candidates) or candidates[pos] != node:
            raise UnknownEntityError(f"entity {node} of query {(h, r, t)} was never seen in training")
    if r < 0 or r >= model.table.relation_count:
        raise UnknownEntityError(f"relation {r} of query {(h, r, t)} is unknown")

    count = len(candidates)
    relation = np.full(count, r, dtype=np.int64)
    head_side = np.stack([candidates, relation, np.full(count, t)], axis=1)
    tail_side = np.stack([np.full(count, h), relation, candidates], axis=1)
    head_filter = np.array([c != h and (c, r, t) in known for c in candidates.tolist()], dtype=bool)
    tail_filter = np.array([c != t and (h, r, c) in known for c in candidates.tolist()], dtype=bool)

    head_rank, raw_head = _rank_side(model.score(head_side), int(positions[0]), head_filter)
    tail_rank, raw_tail = _rank_side(model.score(tail_side), int(positions[1]), tail_filter)
    return RankResult(Triple(h, r, t), head_rank, tail_rank, raw_head, raw_tail)


def rank_queries(queries: np.ndarray, model, known: Set[Tuple[int, int, int]], candidates: np.ndarray,
                 threads: int = 1, show_progress: bool = False) -> Tuple[List[RankResult], int]:
    """Ranks for every query in order; unknown-entity queries are skipped and counted"""
    def one(q):
        try:
            return filtered_rank(q, model, known, candidates)
        except UnknownEntityError as e:
            logger.warning(f"Skipping query: {e}")
            return None

    rows = [tuple(q) for q in np.asarray(queries).reshape(-1, 3).tolist()]
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(tqdm(pool.map(one, rows), total=len(rows), disable=not show_progress,
                                desc="ranking", leave=False))
    else:
        results = [one(q) for q in tqdm(rows, disable=not show_progress, desc="ranking", leave=False)]
    kept = [r for r in results if r is not None]
    return kept, len(results) - len(kept)


def link_metrics(results: Sequence[RankResult]) -> Tuple[float, float]:
    """(MRR, Hits@10) over pooled head and tail ranks"""
    if not results:
        raise ValueError("no rank results to summarise")
    ranks = np.array([rank for r in results for rank in (r.head_rank, r.tail_rank)], dtype=np.float64)
    return float(np.mean(1.0 / ranks)), float(np.mean(ranks <= HITS_AT))


def node_accuracy(nodes: np.ndarray, labels: np.ndarray, model) -> float:
    """Share of nodes whose arg-max logit (smallest class on ties) equals the label"""
    nodes = np.asarray(nodes, dtype=np.int64)
    if len(nodes) == 0:
        raise ValueError("no nodes to evaluate")
    predicted = np.argmax(model.predict_scores(nodes), axis=1)
    return float(accuracy_score(np.asarray(labels)[nodes], predicted))


def aggregate(per_part: Sequence[float], union_value: float) -> Tuple[float, float]:
    """(whole, average)"""
    values = [v for v in per_part if v is not None]
    average = float(np.mean(values)) if values else None
    return union_value, average


@dataclass
class MetricsReport:
    part: int
    mrr_whole: Optional[float] = None
    mrr_avg: Optional[float] = None
    hits10_whole: Optional[float] = None
    hits10_avg: Optional[float] = None
    accuracy_whole: Optional[float] = None
    accuracy_avg: Optional[float] = None
    n_queries: int = 0
    skipped_queries: int = 0
    replayed_instances: int = 0
    runtime_s: float = 0.0
    per_part: List[Dict] = field(default_factory=list)

    def to_dict(self, timing: bool = True) -> Dict:
        values = asdict(self)
        if not timing:
            values.pop("runtime_s")
        return values


def evaluate_stream(dataset: StreamDataset, upto: int, model, threads: int = 1,
                    show_progress: bool = False) -> MetricsReport:
    """Per-part and aggregated metrics on query sets 0..upto"""
    report = MetricsReport(part=upto)
    if dataset.mode == "node-classification":
        accuracies, union = [], []
        for part in dataset.parts[:upto + 1]:
            nodes = part.query_nodes
            acc = node_accuracy(nodes, dataset.node_labels, model) if len(nodes) else None
            accuracies.append(acc)
            union.append(nodes)
            report.per_part.append({"part": part.index, "accuracy": acc, "n_queries": int(len(nodes))})
        union_nodes = np.concatenate(union)
        whole = node_accuracy(union_nodes, dataset.node_labels, model) if len(union_nodes) else None
        report.accuracy_whole, report.accuracy_avg = aggregate(accuracies, whole)
        report.n_queries = int(len(union_nodes))
    else:
        known = dataset.known_triples(upto)
        candidates = dataset.train_entities(upto)
        pooled: List[RankResult] = []
        mrrs, hits = [], []
        for part in dataset.parts[:upto + 1]:
            results, skipped = rank_queries(part.query, model, known, candidates, threads, show_progress)
            mrr, hit = link_metrics(results) if results else (None, None)
            mrrs.append(mrr)
            hits.append(hit)
            pooled.extend(results)
            report.skipped_queries += skipped
            report.per_part.append({"part": part.index, "mrr": mrr, "hits10": hit,
                                    "n_queries": len(results), "skipped": skipped})
        mrr_whole, hits_whole = link_metrics(pooled) if pooled else (None, None)
        report.mrr_whole, report.mrr_avg = aggregate(mrrs, mrr_whole)
        report.hits10_whole, report.hits10_avg = aggregate(hits, hits_whole)
        report.n_queries = len(pooled)
    logger.info(f"After part {upto}: " + ", ".join(
        f"{k}={v:.4f}" for k, v in report.to_dict(timing=False).items()
        if k.endswith(("_whole", "_avg")) and v is not None))
    return report


def validation_metric(dataset: StreamDataset, part_index: int, model) -> float:
    """Validation MRR (link) or accuracy (node) of a single part, for early stopping"""
    part = dataset.parts[part_index]
    if dataset.mode == "node-classification":
        if not len(part.validation_nodes):
            return 0.0
        return node_accuracy(part.validation_nodes, dataset.node_labels, model)
    results, _ = rank_queries(part.validation, model, dataset.known_triples(part_index),
                              dataset.train_entities(part_index))
    return link_metrics(results)[0] if results else 0.0
