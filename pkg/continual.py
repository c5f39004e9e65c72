"""
Updating module
===============

When a new part arrives, old train triples near the new triples are
activated if their top-n components overlap the new triple's top-n. Only
the overlapping (common) components of activated nodes may move during
replay, and replayed triples keep the attention selection of the part-start
checkpoint.
"""

import logging
import os
from dataclasses import dataclass
from typing import Dict, FrozenSet, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from graph_store import AdjacencyIndex, GraphPart, Triple, as_triple_array, to_triples, triple_neighbors

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ActivationRecord:
    old: Triple
    new: Triple
    order: int
    common: FrozenSet[int]
    selected: Tuple[int, ...]   # old triple's top-n at part start
    alpha: Tuple[float, ...]    # old triple's attention at part start

    @property
    def mass(self) -> float:
        return float(sum(self.alpha[k] for k in self.common))


@dataclass
class ComponentMasks:
    """(N, K) boolean marks of node components that replay may update"""
    marked: np.ndarray

    def for_node(self, node: int) -> np.ndarray:
        return self.marked[node]

    @property
    def nodes(self) -> np.ndarray:
        return np.flatnonzero(self.marked.any(axis=1))


def activate_neighbors(new_part: GraphPart, index: AdjacencyIndex, model, config) -> List[ActivationRecord]:
    """Old triples related to the new part through nodes and shared components.

    ``index`` must cover parts before ``new_part`` only. Records are
    deduplicated per old triple (largest common set wins, first seen on
    ties) and capped at ``config.memory_budget`` by attention mass over the
    common set.
    """
    if config.memory_budget == 0 or len(new_part.train) == 0:
        return []
    if index.upto >= new_part.index:
        raise ValueError(f"adjacency covers part {index.upto}, new part is {new_part.index}")

    new_triples = to_triples(new_part.train)
    neighbourhoods = []
    for t in new_triples:
        first = triple_neighbors(t, index, 1)
        wider = triple_neighbors(t, index, 2) if config.order == 2 else first
        neighbourhoods.append((first, sorted(wider)))

    old_triples = sorted({x for _, wider in neighbourhoods for x in wider})
    if not old_triples:
        return []
    # old selections are computed once from the part-start checkpoint
    old_weights = model.selection(as_triple_array(old_triples))
    old_lookup = {t: i for i, t in enumerate(old_triples)}
    new_weights = model.selection(new_part.train)

    chosen: Dict[Triple, ActivationRecord] = {}
    for i, (t, (first, wider)) in enumerate(zip(new_triples, neighbourhoods)):
        new_set = set(new_weights.selected[i].tolist())
        for old in wider:
            j = old_lookup[old]
            common = new_set & set(old_weights.selected[j].tolist())
            if not common:
                continue
            record = ActivationRecord(
                old=old, new=t, order=1 if old in first else 2, common=frozenset(common),
                selected=tuple(int(k) for k in old_weights.selected[j]),
                alpha=tuple(float(a) for a in old_weights.alpha[j]),
            )
            current = chosen.get(old)
            if current is None or len(record.common) > len(current.common):
                chosen[old] = record

    records = list(chosen.values())
    if len(records) > config.memory_budget:
        masses = np.array([r.mass for r in records])
        keep = np.sort(np.argsort(-masses, kind="stable")[:config.memory_budget])
        records = [records[k] for k in keep]
    logger.info(f"Part {new_part.index}: activated {len(records)} old triples "
                f"({len(chosen)} before the budget of {config.memory_budget})")
    return records


def build_masks(records: Sequence[ActivationRecord], node_count: int, K: int) -> ComponentMasks:
    marked = np.zeros((node_count, K), dtype=bool)
    for r in records:
        common = sorted(r.common)
        marked[r.old.head, common] = True
        marked[r.old.tail, common] = True
    return ComponentMasks(marked)


def masked_gradient_filter(masks: ComponentMasks, model, relations: Optional[np.ndarray] = None) -> Dict[str, np.ndarray]:
    """Zero gradients replay may not apply and return the matching Adam update masks.

    Node components follow ``masks``; relation embeddings stay updatable for
    the replayed relations; attention logits and the pair-attention weight
    are frozen.
    """
    updatable: Dict[str, np.ndarray] = {}
    table = model.table
    comps = table.node_components
    comps.grad *= masks.marked[:, :, None]
    updatable[comps.name] = masks.marked[:, :, None]

    if table.attention_logits is not None:
        table.attention_logits.zero_grad()
        updatable[table.attention_logits.name] = np.zeros((table.attention_logits.shape[0], 1), dtype=bool)
    if model.pair_params is not None:
        model.pair_params.weight.zero_grad()
        updatable[model.pair_params.weight.name] = np.zeros((1, 1), dtype=bool)
    if table.relation_embeddings is not None and relations is not None:
        rows = np.zeros((table.relation_embeddings.shape[0], 1), dtype=bool)
        rows[np.asarray(relations, dtype=np.int64)] = True
        table.relation_embeddings.grad *= rows
        updatable[table.relation_embeddings.name] = rows
    return updatable


def replay_nodes(records: Sequence[ActivationRecord], labelled: np.ndarray) -> np.ndarray:
    """Labelled old nodes touched by activated edges (node-classification replay)"""
    touched = {n for r in records for n in (r.old.head, r.old.tail)}
    return np.array(sorted(touched & set(np.asarray(labelled).tolist())), dtype=np.int64)


def write_activation_audit(records: Sequence[ActivationRecord], path: str,
                           node_names: Sequence[str] = (), relation_names: Sequence[str] = ()):
    """CSV of ``new_triple, old_triple, order, common_components``"""
    def name(t: Triple) -> str:
        h = node_names[t.head] if node_names else str(t.head)
        r = relation_names[t.relation] if relation_names else str(t.relation)
        v = node_names[t.tail] if node_names else str(t.tail)
        return f"{h} {r} {v}"

    frame = pd.DataFrame([{
        "new_triple": name(r.new),
        "old_triple": name(r.old),
        "order": r.order,
        "common_components": ";".join(str(k) for k in sorted(r.common)),
    } for r in records], columns=["new_triple", "old_triple", "order", "common_components"])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False)
    return frame
