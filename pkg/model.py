"""
Graph embedding model
=====================

``GraphEmbeddingModel`` ties the disentangled table, the attention source
and the feature extractor together. In link-prediction mode it scores
triples (higher validity = more plausible); in node-classification mode it
builds each node's representation with the component-wise graph attention
update over its current neighbourhood and classifies it.

``ModelConfig`` holds every hyper-parameter of a run.
"""

import logging
from dataclasses import asdict, dataclass, fields
from typing import Dict, List, Mapping, Optional, Tuple

import numpy as np

import disentangle as dt
import scorers as sc
from errors import ConfigError, DataError
from grad_core import GradientTape, Parameter, Var
from graph_store import AdjacencyIndex, node_neighbors

logger = logging.getLogger(__name__)

SCORERS = ("transe", "convkb", "gat")


@dataclass
class ModelConfig:
    K: int = 4
    n: int = 2
    d: int = 32
    lr: float = 0.001
    beta: float = 0.1
    scorer: str = "transe"
    attention: str = "kg-logits"
    negatives: int = 1
    epochs: int = 50
    batch_size: int = 128
    order: int = 1
    memory_budget: int = 1000
    seed: int = 0
    norm_p: int = 1
    filters: int = 2
    ewc_lambda: float = 100.0
    fisher_samples: int = 1024
    patience: int = 5
    validation_interval: int = 0
    reset_optimizer: bool = False
    show_progress: bool = True
    audit_activations: bool = False

    @property
    def d_c(self) -> int:
        return self.d // self.K

    @property
    def node_mode(self) -> bool:
        return self.scorer == "gat"

    def validate(self) -> "ModelConfig":
        problems = []
        if self.K < 1 or self.d < 1 or self.d % self.K:
            problems.append(f"K={self.K} must divide d={self.d}")
        if not 1 <= self.n <= self.K:
            problems.append(f"n={self.n} must be in [1, K={self.K}]")
        if self.beta < 0:
            problems.append("beta must be non-negative")
        if self.lr <= 0:
            problems.append("lr must be positive")
        if self.scorer not in SCORERS:
            problems.append(f"unknown scorer {self.scorer}")
        if self.attention not in dt.ATTENTION_VARIANTS:
            problems.append(f"unknown attention variant {self.attention}")
        if (self.scorer == "gat") != (self.attention == "ne-pair"):
            problems.append("the gat scorer goes with ne-pair attention and only with it")
        if self.order not in (1, 2):
            problems.append("order must be 1 or 2")
        if self.norm_p not in (1, 2):
            problems.append("norm_p must be 1 or 2")
        for name in ("negatives", "epochs", "batch_size", "filters", "fisher_samples", "patience"):
            if getattr(self, name) < 1:
                problems.append(f"{name} must be at least 1")
        for name in ("memory_budget", "validation_interval"):
            if getattr(self, name) < 0:
                problems.append(f"{name} must be non-negative")
        if self.ewc_lambda < 0:
            problems.append("ewc_lambda must be non-negative")
        if problems:
            raise ConfigError("invalid model config: " + "; ".join(problems))
        return self

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, values: Mapping) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(values) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**values)


class GraphEmbeddingModel:
    """All trainable state of one run plus the forward computations over it"""

    def __init__(self, config: ModelConfig, node_count: int, relation_count: int,
                 node_features: Optional[np.ndarray] = None, class_count: int = 0):
        config.validate()
        self.config = config
        seed = config.seed
        self.node_mode = config.node_mode

        if self.node_mode:
            if node_features is None:
                raise ConfigError("the gat scorer needs node features")
            if class_count < 2:
                raise ConfigError(f"node classification needs at least 2 classes, got {class_count}")
            width = -(-node_features.shape[1] // config.K) * config.K
            d_c = width // config.K
            if width != config.d:
                logger.info(f"Node features padded to width {width}; d={config.d} is overridden")
            self.table = dt.init_table(node_count, 0, config.K, d_c, config.n, seed,
                                       with_relations=False, with_logits=False)
            padded = np.zeros((node_count, width))
            padded[:, :node_features.shape[1]] = node_features
            self.table.node_components.value[...] = padded.reshape(node_count, config.K, d_c)
        else:
            d_c = config.d_c
            self.table = dt.init_table(node_count, relation_count, config.K, d_c, config.n, seed,
                                       with_logits=config.attention == "kg-logits")

        self.pair_params: Optional[dt.NEAttentionParams] = None
        if config.attention in ("alpha1", "alpha2", "ne-pair"):
            extra = config.n * d_c if config.attention == "alpha2" else 0
            self.pair_params = dt.init_pair_attention(d_c, seed + 1, relation_width=extra)

        self.convkb: Optional[sc.ConvKBParams] = None
        self.gat: Optional[sc.GATParams] = None
        self.classifier: Optional[sc.ClassifierParams] = None
        if config.scorer == "convkb":
            self.convkb = sc.init_convkb(config.n * d_c, config.filters, seed + 2)
        elif config.scorer == "gat":
            self.gat = sc.init_gat(config.K, d_c, seed + 2)
            self.classifier = sc.init_classifier(class_count, config.K * d_c, seed + 3)

        self._neighbors: Dict[int, np.ndarray] = {}
        self.frozen_pairs: Dict[Tuple[int, int], np.ndarray] = {}

    # -- parameters -------------------------------------------------------

    @property
    def K(self) -> int:
        return self.table.K

    @property
    def n(self) -> int:
        return self.table.n

    @property
    def node_count(self) -> int:
        return self.table.node_count

    def parameters(self) -> List[Parameter]:
        params = list(self.table.parameters())
        if self.pair_params is not None:
            params.append(self.pair_params.weight)
        for group in (self.convkb, self.gat, self.classifier):
            if group is not None:
                params.extend(group.parameters())
        return params

    def state_dict(self) -> Dict[str, np.ndarray]:
        return {p.name: p.value.copy() for p in self.parameters()}

    def load_state_dict(self, arrays: Mapping[str, np.ndarray]):
        params = {p.name: p for p in self.parameters()}
        if set(arrays) != set(params):
            raise DataError(f"checkpoint keys {sorted(arrays)} do not match model {sorted(params)}")
        for name, value in arrays.items():
            if np.shape(value) != params[name].shape:
                raise DataError(f"checkpoint {name}: shape {np.shape(value)} != {params[name].shape}")
        for name, value in arrays.items():
            params[name].value[...] = value
            params[name].zero_grad()

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    # -- link prediction --------------------------------------------------

    def attention(self, tape: GradientTape, triples: np.ndarray) -> Tuple[Var, np.ndarray]:
        """Attention over components for each triple and its top-n selection"""
        triples = np.asarray(triples).reshape(-1, 3)
        alpha = dt.triple_alpha(tape, self.table, self.pair_params,
                                triples[:, 0], triples[:, 1], triples[:, 2], self.config.attention)
        return alpha, dt.select(tape, alpha, self.n).selected

    def selection(self, triples: np.ndarray) -> dt.AttentionWeights:
        """Attention values without recording (current checkpoint)"""
        tape = GradientTape(record=False)
        alpha, selected = self.attention(tape, triples)
        return dt.AttentionWeights(alpha.value, selected)

    def validity(self, tape: GradientTape, triples: np.ndarray,
                 selected: Optional[np.ndarray] = None) -> Var:
        """(B,) validity scores, higher means more plausible"""
        if self.node_mode:
            raise ValueError("triple scoring is only available in link-prediction mode")
        triples = np.asarray(triples).reshape(-1, 3)
        if selected is None:
            _, selected = self.attention(tape, triples)
        u = dt.gather_top_var(tape, self.table, triples[:, 0], selected)
        v = dt.gather_top_var(tape, self.table, triples[:, 2], selected)
        r = tape.watch(self.table.relation_embeddings)[triples[:, 1]]
        if self.config.scorer == "transe":
            return -sc.transe_var(u, r, v, self.config.norm_p)
        return sc.convkb_var(tape, u, r, v, self.convkb)

    def score(self, triples: np.ndarray) -> np.ndarray:
        tape = GradientTape(record=False)
        return self.validity(tape, triples).value

    # -- node classification ----------------------------------------------

    def use_adjacency(self, index: AdjacencyIndex):
        """Neighbourhoods for the graph attention update (self excluded, sorted)"""
        self._neighbors = {
            node: np.array(sorted(node_neighbors(node, index) - {node}), dtype=np.int64)
            for node in index.incidence
        }

    def neighbors(self, node: int) -> np.ndarray:
        return self._neighbors.get(int(node), np.zeros(0, dtype=np.int64))

    def pair_list(self, nodes: np.ndarray) -> np.ndarray:
        """(P, 2) array of (target, neighbour) pairs for the given targets"""
        pairs = [(int(u), int(v)) for u in nodes for v in self.neighbors(u)]
        return np.array(pairs, dtype=np.int64).reshape(-1, 2)

    def freeze_pairs(self):
        """Snapshot the top-n selection of every adjacent pair"""
        nodes = np.array(sorted(self._neighbors), dtype=np.int64)
        pairs = self.pair_list(nodes)
        self.frozen_pairs = {}
        if len(pairs):
            weights = dt.pair_attention_ne(pairs[:, 0], pairs[:, 1], self.table, self.pair_params)
            self.frozen_pairs = {(int(u), int(v)): sel for (u, v), sel in zip(pairs, weights.selected)}

    def node_representation(self, tape: GradientTape, nodes: np.ndarray,
                            frozen: bool = False) -> Tuple[Var, Optional[Var], Optional[np.ndarray]]:
        """(B, d) representations plus the pair attention and selection used.

        With ``frozen`` the part-start pair selection is used and no pair
        attention is computed.
        """
        nodes = np.asarray(nodes, dtype=np.int64)
        K = self.K
        lists = [self.neighbors(u) for u in nodes]
        slots = 1 + max((len(x) for x in lists), default=0)
        matrix = np.repeat(nodes[:, None], slots, axis=1)
        allowed = np.zeros((len(nodes), slots, K), dtype=bool)
        allowed[:, 0, :] = True

        pairs = self.pair_list(nodes)
        alpha: Optional[Var] = None
        if frozen:
            selected = np.array([self.frozen_pairs[(int(u), int(v))] for u, v in pairs],
                                dtype=np.int64).reshape(-1, self.n)
        elif len(pairs):
            alpha = dt.pair_alpha(tape, self.table, self.pair_params, pairs[:, 0], pairs[:, 1])
            selected = dt.select(tape, alpha, self.n).selected
        else:
            selected = np.zeros((0, self.n), dtype=np.int64)

        row = 0
        for b, nbrs in enumerate(lists):
            count = len(nbrs)
            matrix[b, 1:1 + count] = nbrs
            for s in range(count):
                allowed[b, 1 + s, selected[row + s]] = True
            row += count

        comps = tape.watch(self.table.node_components)
        updated = sc.gat_var(tape, comps, matrix, allowed, self.gat)
        return updated.reshape(len(nodes), K * self.gat.h), alpha, selected

    def node_logits(self, tape: GradientTape, nodes: np.ndarray, frozen: bool = False) -> Var:
        rep, _, _ = self.node_representation(tape, nodes, frozen)
        return sc.classify_var(tape, rep, self.classifier)

    def predict_scores(self, nodes: np.ndarray) -> np.ndarray:
        tape = GradientTape(record=False)
        return self.node_logits(tape, nodes).value

    def checksum(self) -> float:
        return float(sum(np.sum(p.value) for p in self.parameters()))


def build_model(config: ModelConfig, dataset) -> GraphEmbeddingModel:
    """Model sized for a stream dataset"""
    if config.node_mode != (dataset.mode == "node-classification"):
        raise ConfigError(f"scorer {config.scorer} does not fit a {dataset.mode} stream")
    return GraphEmbeddingModel(config, dataset.node_count, dataset.relation_count,
                               node_features=dataset.node_features, class_count=dataset.class_count)
