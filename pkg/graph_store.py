"""
Streaming multi-relational graph storage
========================================

Triples, graph parts and the stream that orders them, plus the adjacency
index the updating module queries for neighbour triples. Everything here
is immutable once built; ``save_stream`` / ``load_stream`` persist a stream
directory and the triple / citation loaders ingest raw text files.
"""

import csv
import json
import logging
import os
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np
import pandas as pd

from errors import DataError

logger = logging.getLogger(__name__)

SPLITS = ("train", "validation", "query")
STREAM_FORMAT_VERSION = 1


class Triple(NamedTuple):
    head: int
    relation: int
    tail: int


def _empty_triples() -> np.ndarray:
    return np.zeros((0, 3), dtype=np.int64)


def _empty_nodes() -> np.ndarray:
    return np.zeros(0, dtype=np.int64)


def as_triple_array(triples: Iterable[Sequence[int]]) -> np.ndarray:
    arr = np.array([tuple(t) for t in triples], dtype=np.int64)
    return arr.reshape(-1, 3)


def to_triples(arr: np.ndarray) -> List[Triple]:
    return [Triple(int(h), int(r), int(t)) for h, r, t in arr]


@dataclass(frozen=True)
class GraphPart:
    """One part of the stream: triples per split and, for node streams, labelled node ids"""
    index: int
    train: np.ndarray = field(default_factory=_empty_triples)
    validation: np.ndarray = field(default_factory=_empty_triples)
    query: np.ndarray = field(default_factory=_empty_triples)
    train_nodes: np.ndarray = field(default_factory=_empty_nodes)
    validation_nodes: np.ndarray = field(default_factory=_empty_nodes)
    query_nodes: np.ndarray = field(default_factory=_empty_nodes)

    def triples(self, split: str) -> Set[Triple]:
        return set(to_triples(getattr(self, split)))

    def all_triples(self) -> np.ndarray:
        return np.concatenate([self.train, self.validation, self.query])


@dataclass
class StreamDataset:
    """Ordered parts of a growing graph with optional node features and labels"""
    parts: List[GraphPart]
    node_count: int
    relation_count: int
    node_features: Optional[np.ndarray] = None
    node_labels: Optional[np.ndarray] = None
    node_names: List[str] = field(default_factory=list)
    relation_names: List[str] = field(default_factory=list)

    @property
    def mode(self) -> str:
        return "node-classification" if self.node_labels is not None else "link-prediction"

    @property
    def class_count(self) -> int:
        if self.node_labels is None:
            return 0
        return int(self.node_labels.max()) + 1 if len(self.node_labels) else 0

    def validate(self):
        """Check id ranges and split / part disjointness"""
        seen: Set[Triple] = set()
        for part in self.parts:
            split_sets = [part.triples(s) for s in SPLITS]
            for arr in (part.train, part.validation, part.query):
                if len(arr) and (arr[:, [0, 2]].min() < 0 or arr[:, [0, 2]].max() >= self.node_count
                                 or arr[:, 1].min() < 0 or arr[:, 1].max() >= max(self.relation_count, 1)):
                    raise DataError(f"part {part.index}: id out of range")
            for i in range(3):
                for j in range(i + 1, 3):
                    if split_sets[i] & split_sets[j]:
                        raise DataError(f"part {part.index}: {SPLITS[i]} and {SPLITS[j]} overlap")
            union = set().union(*split_sets)
            if union & seen:
                raise DataError(f"part {part.index}: triples repeated from an earlier part")
            seen |= union

    def known_triples(self, upto: int) -> Set[Tuple[int, int, int]]:
        """Every triple of every split in parts 0..upto (the filter set)"""
        known: Set[Tuple[int, int, int]] = set()
        for part in self.parts[:upto + 1]:
            known.update(map(tuple, part.all_triples().tolist()))
        return known

    def train_union(self, upto: int) -> np.ndarray:
        return np.concatenate([p.train for p in self.parts[:upto + 1]] or [_empty_triples()])

    def query_union(self, upto: int) -> np.ndarray:
        return np.concatenate([p.query for p in self.parts[:upto + 1]] or [_empty_triples()])

    def train_entities(self, upto: int) -> np.ndarray:
        """Sorted node ids occurring in train triples of parts 0..upto"""
        train = self.train_union(upto)
        return np.unique(train[:, [0, 2]]) if len(train) else _empty_nodes()

    def train_relations(self, upto: int) -> np.ndarray:
        train = self.train_union(upto)
        return np.unique(train[:, 1]) if len(train) else _empty_nodes()

    def labelled_train_nodes(self, upto: int) -> np.ndarray:
        return np.concatenate([p.train_nodes for p in self.parts[:upto + 1]] or [_empty_nodes()])


@dataclass(frozen=True)
class AdjacencyIndex:
    """Per-node incident train triples over parts 0..upto"""
    incidence: Dict[int, Tuple[Triple, ...]]
    upto: int

    def incident(self, node: int) -> Tuple[Triple, ...]:
        return self.incidence.get(node, ())


def build_adjacency(parts: Sequence[GraphPart], upto: int) -> AdjacencyIndex:
    if upto < 0 or upto >= len(parts):
        raise IndexError(f"part index {upto} out of range for {len(parts)} parts")
    lists: Dict[int, List[Triple]] = defaultdict(list)
    for part in parts[:upto + 1]:
        for t in to_triples(part.train):
            lists[t.head].append(t)
            lists[t.tail].append(t)
    return AdjacencyIndex({node: tuple(ts) for node, ts in lists.items()}, upto)


def triple_neighbors(t: Triple, index: AdjacencyIndex, order: int = 1) -> Set[Triple]:
    """Indexed triples sharing a node with ``t`` (order 1) or with its order-1 neighbours (order 2)"""
    if order not in (1, 2):
        raise ValueError(f"order must be 1 or 2, got {order}")
    t = Triple(*t)
    first: Set[Triple] = set(index.incident(t.head)) | set(index.incident(t.tail))
    first.discard(t)
    if order == 1:
        return first
    nodes = {n for x in first for n in (x.head, x.tail)}
    result = set(first)
    for node in nodes:
        result.update(index.incident(node))
    result.discard(t)
    return result


def node_neighbors(u: int, index: AdjacencyIndex) -> Set[int]:
    """Nodes sharing an indexed triple with ``u``, always including ``u``"""
    result = {u}
    for t in index.incident(u):
        result.add(t.head)
        result.add(t.tail)
    return result


# ---------------------------------------------------------------------------
# raw file ingestion
# ---------------------------------------------------------------------------

class Vocabulary:
    """Name -> dense id in first-appearance order"""

    def __init__(self, names: Optional[Iterable[str]] = None):
        self.ids: Dict[str, int] = {}
        self.names: List[str] = []
        for name in names or ():
            self.index(name)

    def __len__(self):
        return len(self.names)

    def index(self, name: str) -> int:
        idx = self.ids.get(name)
        if idx is None:
            idx = len(self.names)
            self.ids[name] = idx
            self.names.append(name)
        return idx

    def save(self, path: str):
        with open(path, "w", encoding="utf-8") as f:
            for idx, name in enumerate(self.names):
                f.write(f"{idx}\t{name}\n")

    @classmethod
    def load(cls, path: str) -> "Vocabulary":
        names: List[str] = []
        with open(path, "r", encoding="utf-8") as f:
            for line_no, line in enumerate(f):
                line = line.rstrip("\n")
                if not line:
                    continue
                idx, name = line.split("\t", 1)
                if int(idx) != len(names):
                    raise DataError(f"{path}:{line_no + 1}: ids must be dense and ordered")
                names.append(name)
        return cls(names)


def _read_tsv(path: str, columns: int, may_be_empty: Sequence[int] = ()) -> pd.DataFrame:
    """Tab-separated rows of exactly ``columns`` fields; blank lines are skipped.

    A short row or an empty field outside ``may_be_empty`` is a DataError
    naming the line.
    """
    if not os.path.exists(path):
        raise DataError(f"missing file: {path}")
    with open(path, "r", encoding="utf-8") as f:
        blank = not f.read(4096).strip()
    if blank:
        return pd.DataFrame(np.zeros((0, columns), dtype=object))
    try:
        frame = pd.read_csv(path, sep="\t", header=None, dtype=str, keep_default_na=False,
                            quoting=csv.QUOTE_NONE, encoding="utf-8", skip_blank_lines=False)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise DataError(f"cannot parse {path}: {e}") from e
    if frame.shape[1] != columns:
        raise DataError(f"{path}: expected {columns} tab-separated columns, found {frame.shape[1]}")
    frame = frame.fillna("")
    empty = frame.eq("")
    frame = frame[~empty.all(axis=1)]
    required = [c for c in range(columns) if c not in may_be_empty]
    missing = empty.loc[frame.index, required].any(axis=1)
    if missing.any():
        line_no = int(missing.idxmax()) + 1
        raise DataError(f"{path}:{line_no}: expected {columns} non-empty tab-separated fields")
    return frame.reset_index(drop=True)


def load_triple_file(path: str, entities: Vocabulary, relations: Vocabulary) -> np.ndarray:
    """Read ``head<TAB>relation<TAB>tail`` names into an id array, extending the vocabularies"""
    frame = _read_tsv(path, 3)
    rows = [(entities.index(h), relations.index(r), entities.index(t))
            for h, r, t in frame.itertuples(index=False, name=None)]
    logger.info(f"Loaded {len(rows)} triples from {path}")
    return as_triple_array(rows)


@dataclass
class CitationGraph:
    features: np.ndarray
    labels: np.ndarray
    edges: np.ndarray
    node_names: List[str]
    label_names: List[str]


def load_citation_graph(node_path: str, edge_path: str) -> CitationGraph:
    """Read ``id<TAB>label<TAB>f1,f2,...`` nodes and ``id<TAB>id`` edges"""
    nodes = _read_tsv(node_path, 3, may_be_empty=(2,))
    node_vocab, label_vocab = Vocabulary(), Vocabulary()
    features, labels = [], []
    for name, label, feats in nodes.itertuples(index=False, name=None):
        if name in node_vocab.ids:
            raise DataError(f"{node_path}: duplicate node {name}")
        node_vocab.index(name)
        labels.append(label_vocab.index(label))
        try:
            features.append([float(x) for x in feats.split(",")] if feats else [])
        except ValueError as e:
            raise DataError(f"{node_path}: bad feature vector for node {name}") from e
    if len({len(f) for f in features}) > 1:
        raise DataError(f"{node_path}: feature vectors have different lengths")

    edges_frame = _read_tsv(edge_path, 2)
    edges = []
    for a, b in edges_frame.itertuples(index=False, name=None):
        if a not in node_vocab.ids or b not in node_vocab.ids:
            raise DataError(f"{edge_path}: edge ({a}, {b}) references an unknown node")
        edges.append((node_vocab.ids[a], node_vocab.ids[b]))
    edge_arr = np.unique(np.array(edges, dtype=np.int64).reshape(-1, 2), axis=0)
    logger.info(f"Loaded citation graph: {len(node_vocab)} nodes, {len(edge_arr)} edges, "
                f"{len(label_vocab)} classes")
    return CitationGraph(np.array(features, dtype=np.float64).reshape(len(node_vocab), -1),
                         np.array(labels, dtype=np.int64), edge_arr,
                         node_vocab.names, label_vocab.names)


# ---------------------------------------------------------------------------
# stream directories
# ---------------------------------------------------------------------------

def save_stream(dataset: StreamDataset, directory: str):
    os.makedirs(directory, exist_ok=True)
    meta = {
        "version": STREAM_FORMAT_VERSION,
        "mode": dataset.mode,
        "node_count": dataset.node_count,
        "relation_count": dataset.relation_count,
        "parts": len(dataset.parts),
    }
    with open(os.path.join(directory, "stream.json"), "w", encoding="utf-8") as f:
        json.dump(meta, f, indent=2)
    Vocabulary(dataset.node_names).save(os.path.join(directory, "entities.dict"))
    Vocabulary(dataset.relation_names).save(os.path.join(directory, "relations.dict"))
    for part in dataset.parts:
        for split in SPLITS:
            path = os.path.join(directory, f"part_{part.index}_{split}.tsv")
            pd.DataFrame(getattr(part, split)).to_csv(path, sep="\t", header=False, index=False)
            if dataset.mode == "node-classification":
                np.savetxt(os.path.join(directory, f"part_{part.index}_{split}_nodes.txt"),
                           getattr(part, f"{split}_nodes"), fmt="%d")
    if dataset.node_features is not None:
        np.save(os.path.join(directory, "features.npy"), dataset.node_features)
    if dataset.node_labels is not None:
        np.save(os.path.join(directory, "labels.npy"), dataset.node_labels)
    logger.info(f"Stream with {len(dataset.parts)} parts written to {directory}")


def _load_id_triples(path: str) -> np.ndarray:
    frame = _read_tsv(path, 3)
    if frame.empty:
        return _empty_triples()
    try:
        return frame.to_numpy().astype(np.int64).reshape(-1, 3)
    except ValueError as e:
        raise DataError(f"{path}: ids must be integers") from e


def load_stream(directory: str) -> StreamDataset:
    meta_path = os.path.join(directory, "stream.json")
    if not os.path.exists(meta_path):
        raise DataError(f"not a stream directory (no stream.json): {directory}")
    with open(meta_path, "r", encoding="utf-8") as f:
        meta = json.load(f)
    if meta.get("version") != STREAM_FORMAT_VERSION:
        raise DataError(f"unsupported stream format version {meta.get('version')}")
    node_mode = meta["mode"] == "node-classification"
    parts = []
    for i in range(meta["parts"]):
        kwargs = {s: _load_id_triples(os.path.join(directory, f"part_{i}_{s}.tsv")) for s in SPLITS}
        if node_mode:
            for s in SPLITS:
                path = os.path.join(directory, f"part_{i}_{s}_nodes.txt")
                kwargs[f"{s}_nodes"] = (np.loadtxt(path, dtype=np.int64, ndmin=1)
                                        if os.path.getsize(path) else _empty_nodes())
        parts.append(GraphPart(index=i, **kwargs))
    features_path = os.path.join(directory, "features.npy")
    labels_path = os.path.join(directory, "labels.npy")
    dataset = StreamDataset(
        parts=parts,
        node_count=meta["node_count"],
        relation_count=meta["relation_count"],
        node_features=np.load(features_path) if os.path.exists(features_path) else None,
        node_labels=np.load(labels_path) if os.path.exists(labels_path) else None,
        node_names=Vocabulary.load(os.path.join(directory, "entities.dict")).names,
        relation_names=Vocabulary.load(os.path.join(directory, "relations.dict")).names,
    )
    dataset.validate()
    return dataset


def stream_statistics(dataset: StreamDataset) -> pd.DataFrame:
    """Per-part sizes and accumulated counts"""
    rows = []
    entities: Set[int] = set()
    relations: Set[int] = set()
    edges = 0
    for part in dataset.parts:
        if dataset.mode == "node-classification":
            part_nodes = np.concatenate([part.train_nodes, part.validation_nodes, part.query_nodes])
            entities |= set(part_nodes.tolist())
            edges += len(part.train)
            rows.append({
                "part": part.index,
                "nodes": len(part_nodes),
                "edges": len(part.train),
                "train": len(part.train_nodes),
                "validation": len(part.validation_nodes),
                "query": len(part.query_nodes),
                "accumulated_nodes": len(entities),
                "accumulated_edges": edges,
            })
        else:
            everything = part.all_triples()
            part_entities = set(everything[:, [0, 2]].reshape(-1).tolist())
            part_relations = set(everything[:, 1].tolist())
            entities |= part_entities
            relations |= part_relations
            rows.append({
                "part": part.index,
                "entities": len(part_entities),
                "relations": len(part_relations),
                "train": len(part.train),
                "validation": len(part.validation),
                "query": len(part.query),
                "accumulated_entities": len(entities),
                "accumulated_relations": len(relations),
            })
    return pd.DataFrame(rows)
