"""
Feature extractors over selected components.

Every scorer has a tape form (``*_var``) used in training and a value form
taking plain arrays. TransE returns a distance (lower is better); ConvKB
returns a plausibility score (higher is better). The component-wise graph
attention update keeps each component at width d_c.
"""

import logging
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

import grad_core as gc
from grad_core import GradientTape, Parameter, Var

logger = logging.getLogger(__name__)


@dataclass
class ConvKBParams:
    filters: Parameter  # (M, 3)
    bias: Parameter     # (M,)
    w1: Parameter       # (1, M * L)

    @property
    def filter_count(self) -> int:
        return self.filters.shape[0]

    @property
    def row_count(self) -> int:
        return self.w1.shape[1] // self.filter_count

    def parameters(self) -> List[Parameter]:
        return [self.filters, self.bias, self.w1]


@dataclass
class GATParams:
    w3: Parameter  # (1, d_c)
    w4: Parameter  # (K, h, d_c)

    @property
    def h(self) -> int:
        return self.w4.shape[1]

    def parameters(self) -> List[Parameter]:
        return [self.w3, self.w4]


@dataclass
class ClassifierParams:
    w5: Parameter  # (|C|, d)

    @property
    def class_count(self) -> int:
        return self.w5.shape[0]

    def parameters(self) -> List[Parameter]:
        return [self.w5]


def _glorot(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def init_convkb(row_count: int, filter_count: int, seed: int) -> ConvKBParams:
    if row_count < 1 or filter_count < 1:
        raise ValueError(f"invalid ConvKB shape: rows={row_count}, filters={filter_count}")
    rng = np.random.default_rng(seed)
    # start near the translation pattern (1, 1, -1)
    filters = np.tile([0.1, 0.1, -0.1], (filter_count, 1)) + rng.normal(0.0, 0.01, size=(filter_count, 3))
    width = filter_count * row_count
    return ConvKBParams(
        filters=Parameter("convkb_filters", filters),
        bias=Parameter("convkb_bias", np.zeros(filter_count)),
        w1=Parameter("convkb_w1", _glorot(rng, (1, width), width, 1)),
    )


def init_gat(K: int, d_c: int, seed: int, h: int = None) -> GATParams:
    h = d_c if h is None else h
    rng = np.random.default_rng(seed)
    w4 = np.stack([_glorot(rng, (h, d_c), d_c, h) for _ in range(K)])
    return GATParams(w3=Parameter("gat_w3", _glorot(rng, (1, d_c), d_c, 1)),
                     w4=Parameter("gat_w4", w4))


def init_classifier(class_count: int, d: int, seed: int) -> ClassifierParams:
    if class_count < 2:
        raise ValueError(f"classifier needs at least 2 classes, got {class_count}")
    rng = np.random.default_rng(seed)
    return ClassifierParams(Parameter("classifier_w5", _glorot(rng, (class_count, d), d, class_count)))


# ---------------------------------------------------------------------------
# tape forms
# ---------------------------------------------------------------------------

def transe_var(u: Var, r: Var, v: Var, p: int = 1) -> Var:
    """(B, L) inputs -> (B,) distances ||u + r - v||_p"""
    return gc.pnorm(u + r - v, p, axis=-1)


def convkb_var(tape: GradientTape, u: Var, r: Var, v: Var, params: ConvKBParams) -> Var:
    """(B, L) inputs -> (B,) scores W_1 ReLU(conv([u; r; v]))"""
    batch, rows = u.shape
    if rows != params.row_count:
        raise ValueError(f"ConvKB expects {params.row_count} rows, got {rows}")
    stacked = gc.concat([u.reshape(batch, rows, 1), r.reshape(batch, rows, 1),
                         v.reshape(batch, rows, 1)], axis=-1)
    features = gc.relu(gc.conv_rows(stacked, tape.watch(params.filters), tape.watch(params.bias)))
    flat = features.reshape(batch, rows * params.filter_count)
    return gc.linear(flat, tape.watch(params.w1)).reshape(batch)


def gat_var(tape: GradientTape, components: Var, neighbors: np.ndarray, allowed: np.ndarray,
            params: GATParams) -> Var:
    """Component-wise attention aggregation.

    ``components`` is the (N, K, d_c) table leaf, ``neighbors`` a padded
    (B, S) id matrix and ``allowed`` a (B, S, K) mask of which neighbour
    takes part in which component's softmax. Returns (B, K, h).
    """
    batch, slots = neighbors.shape
    K, h, d_c = params.w4.shape
    if not allowed.any(axis=1).all():
        raise ValueError("every component needs at least one neighbour")
    gathered = components[neighbors]                                       # (B, S, K, d_c)
    logits = gc.linear(gathered, tape.watch(params.w3)).reshape(batch, slots, K)
    weights = gc.softmax(logits, axis=1, mask=allowed)                      # (B, S, K)
    projected = gc.component_linear(gathered.reshape(batch * slots, K, d_c), tape.watch(params.w4))
    projected = projected.reshape(batch, slots, K, h)
    return gc.mul(gc.repeat(weights, 3, h), projected).sum(axis=1)


def classify_var(tape: GradientTape, representation: Var, params: ClassifierParams) -> Var:
    return gc.linear(representation, tape.watch(params.w5))


# ---------------------------------------------------------------------------
# value forms
# ---------------------------------------------------------------------------

def _row(x) -> np.ndarray:
    return np.atleast_2d(np.asarray(x, dtype=np.float64))


def transe_score(u_hat, r, v_hat, p: int = 1) -> float:
    u_hat, r, v_hat = _row(u_hat), _row(r), _row(v_hat)
    if not u_hat.shape == r.shape == v_hat.shape:
        raise ValueError(f"length mismatch: {u_hat.shape}, {r.shape}, {v_hat.shape}")
    tape = GradientTape(record=False)
    out = transe_var(tape.constant(u_hat), tape.constant(r), tape.constant(v_hat), p)
    return float(out.value[0])


def convkb_score(u_hat, r, v_hat, params: ConvKBParams) -> float:
    u_hat, r, v_hat = _row(u_hat), _row(r), _row(v_hat)
    if not u_hat.shape == r.shape == v_hat.shape:
        raise ValueError(f"length mismatch: {u_hat.shape}, {r.shape}, {v_hat.shape}")
    tape = GradientTape(record=False)
    out = convkb_var(tape, tape.constant(u_hat), tape.constant(r), tape.constant(v_hat), params)
    return float(out.value[0])


def gat_update_component(u: int, k: int, neighbors: Sequence[int], params: GATParams,
                         node_components: np.ndarray) -> np.ndarray:
    """New u^k from the given neighbour set (caller applies the top-n restriction, self included)"""
    neighbors = list(neighbors)
    if not neighbors:
        raise ValueError(f"node {u} has an empty neighbour set for component {k}")
    K = node_components.shape[1]
    allowed = np.ones((1, len(neighbors), K), dtype=bool)
    tape = GradientTape(record=False)
    out = gat_var(tape, tape.constant(node_components), np.array([neighbors]), allowed, params)
    return out.value[0, k].copy()


def classify_logits(u, node_components: np.ndarray, params: ClassifierParams,
                    gat: GATParams = None) -> np.ndarray:
    """W_5 times the concatenated components of u (or of each id in u)"""
    K, d_c = node_components.shape[1:]
    if gat is not None and gat.h != d_c:
        raise ValueError(f"updated component width h={gat.h} must equal d_c={d_c}")
    nodes = np.atleast_1d(np.asarray(u, dtype=np.int64))
    rep = node_components[nodes].reshape(len(nodes), K * d_c)
    tape = GradientTape(record=False)
    logits = classify_var(tape, tape.constant(rep), params).value
    return logits[0] if np.ndim(u) == 0 else logits
