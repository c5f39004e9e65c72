"""
Disentangled embeddings and component attention.

Node embeddings are K components of width d_c; each triple (or node pair)
gets a softmax over components and keeps the top-n of them. Top-n sets
break ties towards the smaller component index and are always laid out in
ascending index order.
"""

import logging
import os
from dataclasses import dataclass
from typing import List, Optional, Sequence, Union

import numpy as np
import pandas as pd

import grad_core as gc
from grad_core import GradientTape, Parameter, Var

logger = logging.getLogger(__name__)

ATTENTION_VARIANTS = ("kg-logits", "alpha1", "alpha2", "ne-pair")

Ids = Union[int, Sequence[int], np.ndarray]


@dataclass
class DisentangledTable:
    node_components: Parameter
    relation_embeddings: Optional[Parameter]
    attention_logits: Optional[Parameter]
    n: int

    @property
    def node_count(self) -> int:
        return self.node_components.shape[0]

    @property
    def relation_count(self) -> int:
        if self.relation_embeddings is not None:
            return self.relation_embeddings.shape[0]
        return 0 if self.attention_logits is None else self.attention_logits.shape[0]

    @property
    def K(self) -> int:
        return self.node_components.shape[1]

    @property
    def d_c(self) -> int:
        return self.node_components.shape[2]

    @property
    def d(self) -> int:
        return self.K * self.d_c

    def parameters(self) -> List[Parameter]:
        return [p for p in (self.node_components, self.relation_embeddings, self.attention_logits)
                if p is not None]


@dataclass
class AttentionWeights:
    """alpha is (B, K); selected is (B, n), each row ascending"""
    alpha: np.ndarray
    selected: np.ndarray

    def selected_set(self, row: int = 0) -> frozenset:
        return frozenset(int(k) for k in self.selected[row])


@dataclass
class NEAttentionParams:
    """W_2 over [u^k ; v^k] (alpha1 / ne-pair), or over [u^k ; r ; v^k] when widened (alpha2)"""
    weight: Parameter


def init_table(node_count: int, relation_count: int, K: int, d_c: int, n: int, seed: int,
               with_relations: bool = True, with_logits: bool = True) -> DisentangledTable:
    if K < 1 or d_c < 1 or not 1 <= n <= K:
        raise ValueError(f"invalid table shape: K={K}, d_c={d_c}, n={n}")
    if node_count < 0 or relation_count < 0:
        raise ValueError("counts must be non-negative")
    rng = np.random.default_rng(seed)
    bound = 6.0 / np.sqrt(d_c)
    nodes = rng.uniform(-bound, bound, size=(node_count, K, d_c))
    relations = rng.uniform(-bound, bound, size=(relation_count, n * d_c))
    return DisentangledTable(
        node_components=Parameter("node_components", nodes),
        relation_embeddings=Parameter("relation_embeddings", relations) if with_relations else None,
        attention_logits=(Parameter("attention_logits", np.zeros((relation_count, K)))
                          if with_logits else None),
        n=n,
    )


def init_pair_attention(d_c: int, seed: int, relation_width: int = 0) -> NEAttentionParams:
    """relation_width > 0 widens W_2 for the alpha2 variant"""
    rng = np.random.default_rng(seed)
    width = 2 * d_c + relation_width
    bound = np.sqrt(6.0 / (width + 1))
    return NEAttentionParams(Parameter("pair_attention", rng.uniform(-bound, bound, size=(1, width))))


def top_n(alpha: np.ndarray, n: int) -> np.ndarray:
    """Indices of the n largest entries per row, smaller index first on ties, ascending"""
    order = np.argsort(-alpha, axis=-1, kind="stable")[..., :n]
    return np.sort(order, axis=-1)


# ---------------------------------------------------------------------------
# differentiable attention
# ---------------------------------------------------------------------------

def kg_alpha(tape: GradientTape, table: DisentangledTable, relations: np.ndarray) -> Var:
    if table.attention_logits is None:
        raise ValueError("table has no relation attention logits")
    logits = tape.watch(table.attention_logits)[np.asarray(relations)]
    return gc.softmax(logits, axis=-1)


def pair_alpha(tape: GradientTape, table: DisentangledTable, params: NEAttentionParams,
               heads: np.ndarray, tails: np.ndarray, relation: Optional[Var] = None) -> Var:
    """softmax_k ReLU(W_2 [u^k ; (r ;) v^k]) for each row"""
    comps = tape.watch(table.node_components)
    u = comps[np.asarray(heads)]
    v = comps[np.asarray(tails)]
    blocks = [u, v] if relation is None else [u, gc.repeat(relation, 1, table.K), v]
    features = gc.concat(blocks, axis=-1)
    if features.shape[-1] != params.weight.shape[1]:
        raise ValueError(f"pair attention weight {params.weight.shape} does not match "
                         f"feature width {features.shape[-1]}")
    batch = features.shape[0]
    scores = gc.relu(gc.linear(features, tape.watch(params.weight)).reshape(batch, table.K))
    return gc.softmax(scores, axis=-1)


def triple_alpha(tape: GradientTape, table: DisentangledTable, params: Optional[NEAttentionParams],
                 heads: np.ndarray, relations: np.ndarray, tails: np.ndarray, variant: str) -> Var:
    """Attention for link-prediction triples under any variant"""
    if variant == "kg-logits":
        return kg_alpha(tape, table, relations)
    if params is None:
        raise ValueError(f"variant {variant} needs pair attention parameters")
    if variant in ("alpha1", "ne-pair"):
        return pair_alpha(tape, table, params, heads, tails)
    if variant == "alpha2":
        if table.relation_embeddings is None:
            raise ValueError("alpha2 requires relation embeddings")
        rel = tape.watch(table.relation_embeddings)[np.asarray(relations)]
        return pair_alpha(tape, table, params, heads, tails, relation=rel)
    raise ValueError(f"unknown attention variant {variant}")


def select(tape: GradientTape, alpha: Var, n: int) -> AttentionWeights:
    """Top-n selection; the choice is recorded as a discrete decision on the tape"""
    selected = top_n(alpha.value, n)
    tape.decide(selected)
    return AttentionWeights(alpha.value, selected)


def gather_top_var(tape: GradientTape, table: DisentangledTable, nodes: np.ndarray,
                   selected: np.ndarray) -> Var:
    """(B, n*d_c) concatenation of the selected components"""
    nodes = np.asarray(nodes)
    comps = tape.watch(table.node_components)[nodes[:, None], selected]
    return comps.reshape(len(nodes), selected.shape[1] * table.d_c)


# ---------------------------------------------------------------------------
# value-level operations
# ---------------------------------------------------------------------------

def _batch(ids: Ids) -> np.ndarray:
    return np.atleast_1d(np.asarray(ids, dtype=np.int64))


def relation_attention_kg(r: Ids, table: DisentangledTable) -> AttentionWeights:
    relations = _batch(r)
    if relations.min() < 0 or relations.max() >= table.relation_count:
        raise IndexError(f"relation id out of range: {relations}")
    tape = GradientTape(record=False)
    return select(tape, kg_alpha(tape, table, relations), table.n)


def pair_attention_ne(u: Ids, v: Ids, table: DisentangledTable,
                      params: NEAttentionParams) -> AttentionWeights:
    tape = GradientTape(record=False)
    return select(tape, pair_alpha(tape, table, params, _batch(u), _batch(v)), table.n)


def triple_attention_variant(u: Ids, r: Ids, v: Ids, table: DisentangledTable,
                             params: NEAttentionParams, variant: str) -> AttentionWeights:
    if variant not in ("alpha1", "alpha2"):
        raise ValueError(f"variant must be alpha1 or alpha2, got {variant}")
    if table.relation_embeddings is None:
        raise ValueError(f"{variant} requested without relation embeddings")
    tape = GradientTape(record=False)
    alpha = triple_alpha(tape, table, params, _batch(u), _batch(r), _batch(v), variant)
    return select(tape, alpha, table.n)


def gather_top(nodes: Ids, weights: AttentionWeights, table: DisentangledTable) -> np.ndarray:
    nodes = _batch(nodes)
    picked = table.node_components.value[nodes[:, None], weights.selected]
    return picked.reshape(len(nodes), -1)


def dump_relation_attention(table: DisentangledTable, relation_names: Sequence[str], path: str) -> pd.DataFrame:
    """CSV of ``relation_name, alpha_1..alpha_K`` for every relation"""
    if table.attention_logits is None:
        raise ValueError("table has no relation attention logits")
    weights = relation_attention_kg(np.arange(table.relation_count), table) \
        if table.relation_count else AttentionWeights(np.zeros((0, table.K)), np.zeros((0, table.n)))
    names = list(relation_names) or [str(i) for i in range(table.relation_count)]
    frame = pd.DataFrame(weights.alpha, columns=[f"alpha_{k + 1}" for k in range(table.K)])
    frame.insert(0, "relation_name", names[:table.relation_count])
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    frame.to_csv(path, index=False)
    logger.info(f"Relation attention for {len(frame)} relations written to {path}")
    return frame
