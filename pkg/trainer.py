"""
Per-part training
=================

Negative sampling, the loss terms and the training loop that alternates
mini-batches of the new part with replay batches of old data. Replay
batches may carry frozen top-n selections and component masks (from the
updating module); new batches add the norm constraint on attention.
"""

import json
import logging
import os
import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
from tqdm import tqdm

import grad_core as gc
from continual import ComponentMasks, masked_gradient_filter
from errors import TrainingDivergenceError
from grad_core import AdamState, GradientTape, Var
from graph_store import GraphPart
from model import GraphEmbeddingModel
from scorers import classify_var

logger = logging.getLogger(__name__)

MAX_REJECTIONS = 100

Seed = Union[int, Sequence[int], np.random.Generator]


def _rng(seed: Seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


@dataclass
class NegativeSet:
    """Corruptions of each positive: ``triples`` is (B, count, 3)"""
    positives: np.ndarray
    triples: np.ndarray
    fallbacks: int = 0

    def flat(self) -> np.ndarray:
        return self.triples.reshape(-1, 3)


def sample_negatives(batch: np.ndarray, known: Set[Tuple[int, int, int]], count: int,
                     seed: Seed, candidates: np.ndarray) -> NegativeSet:
    """Corrupt head or tail (fair coin) with a uniformly drawn candidate node.

    Candidates found in ``known`` are rejected; after MAX_REJECTIONS tries
    the last candidate is kept.
    """
    if count < 1:
        raise ValueError(f"count must be at least 1, got {count}")
    candidates = np.asarray(candidates, dtype=np.int64)
    if len(candidates) == 0:
        raise ValueError("no candidate nodes to corrupt with")
    rng = _rng(seed)
    batch = np.asarray(batch, dtype=np.int64).reshape(-1, 3)
    out = np.empty((len(batch), count, 3), dtype=np.int64)
    fallbacks = 0
    for i, (h, r, t) in enumerate(batch.tolist()):
        for j in range(count):
            for _ in range(MAX_REJECTIONS):
                e = int(candidates[rng.integers(len(candidates))])
                cand = (e, r, t) if rng.random() < 0.5 else (h, r, e)
                if cand not in known:
                    break
            else:
                fallbacks += 1
            out[i, j] = cand
    if fallbacks:
        logger.warning(f"Negative sampling kept {fallbacks} known triples after {MAX_REJECTIONS} rejections")
    return NegativeSet(batch, out, fallbacks)


# ---------------------------------------------------------------------------
# losses
# ---------------------------------------------------------------------------

def soft_margin(positive: Var, negative: Var) -> Var:
    """sum softplus(-y * s) with y = +1 for positives and -1 for negatives"""
    return gc.softplus(-positive).sum() + gc.softplus(negative).sum()


def link_loss(tape: GradientTape, model: GraphEmbeddingModel, positives: np.ndarray,
              negatives: np.ndarray, selected: Optional[np.ndarray] = None,
              negative_selected: Optional[np.ndarray] = None) -> Var:
    return soft_margin(model.validity(tape, positives, selected),
                       model.validity(tape, negatives, negative_selected))


def cross_entropy(logits: Var, labels: np.ndarray) -> Var:
    """-(1/|C|) * sum over rows of log softmax at the true class"""
    labels = np.asarray(labels, dtype=np.int64)
    classes = logits.shape[-1]
    if len(labels) and (labels.min() < 0 or labels.max() >= classes):
        raise ValueError(f"labels out of range [0, {classes})")
    picked = gc.log_softmax(logits, axis=-1)[np.arange(len(labels)), labels]
    return picked.sum() * (-1.0 / classes)


def node_loss(tape: GradientTape, model: GraphEmbeddingModel, nodes: np.ndarray,
              labels: np.ndarray, frozen: bool = False) -> Var:
    return cross_entropy(model.node_logits(tape, nodes, frozen), labels)


def norm_loss(tape: GradientTape, alpha: Var, selected: np.ndarray) -> Var:
    """sum over rows of (1 - attention mass on the selected components)"""
    rows = len(selected)
    if rows == 0:
        return tape.constant(0.0)
    mass = alpha[np.arange(rows)[:, None], selected].sum()
    return tape.constant(float(rows)) - mass


def instance_loss(tape: GradientTape, model: GraphEmbeddingModel, batch: np.ndarray,
                  labels: Optional[np.ndarray] = None) -> Var:
    """Loss of stored instances alone (no negatives), used for importance and reference gradients"""
    if model.node_mode:
        return node_loss(tape, model, batch, labels[batch])
    return gc.softplus(-model.validity(tape, batch)).sum()


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------

@dataclass
class ReplayPlan:
    """Old data replayed during a part.

    ``selected`` holds the frozen top-n of each old triple; ``masks`` limits
    which node components replay batches may move. Without masks, replay
    updates every parameter with live attention. ``mix`` replaces the default
    alternation: it receives the epoch's new batches and the training rng and
    returns the ("new" | "old", indices) schedule.
    """
    triples: np.ndarray = field(default_factory=lambda: np.zeros((0, 3), dtype=np.int64))
    nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    selected: Optional[np.ndarray] = None
    masks: Optional[ComponentMasks] = None
    mix: Optional[Callable[[List[np.ndarray], np.random.Generator], List[Tuple[str, np.ndarray]]]] = None

    def size(self, node_mode: bool) -> int:
        return len(self.nodes) if node_mode else len(self.triples)


@dataclass
class EpochRecord:
    part: int
    epoch: int
    loss_new: float
    loss_old: float
    loss_norm: float
    seconds: float

    def to_dict(self) -> dict:
        return {"part": self.part, "epoch": self.epoch, "L_new": self.loss_new,
                "L_old": self.loss_old, "L_norm": self.loss_norm, "seconds": self.seconds}


def interleave_batches(new: List, old: List) -> List[Tuple[str, object]]:
    """One new batch then one old batch, cycling the shorter list"""
    if not old:
        return [("new", b) for b in new]
    if not new:
        return [("old", b) for b in old]
    schedule = []
    for i in range(max(len(new), len(old))):
        schedule.append(("new", new[i % len(new)]))
        schedule.append(("old", old[i % len(old)]))
    return schedule


def _batches(rng: np.random.Generator, size: int, batch_size: int) -> List[np.ndarray]:
    order = rng.permutation(size)
    return [order[i:i + batch_size] for i in range(0, size, batch_size)]


def _row_mask(count: int, rows: np.ndarray) -> np.ndarray:
    mask = np.zeros((count, 1), dtype=bool)
    mask[np.asarray(rows, dtype=np.int64)] = True
    return mask


def write_epoch_log(records: Sequence[EpochRecord], path: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "a", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record.to_dict()) + "\n")


def train_part(part: GraphPart, model: GraphEmbeddingModel, optimizer: AdamState,
               replay: Optional[ReplayPlan] = None, *,
               known: Optional[Set[Tuple[int, int, int]]] = None,
               candidates: Optional[np.ndarray] = None,
               labels: Optional[np.ndarray] = None,
               regularizer: Optional[Callable[[GradientTape], Var]] = None,
               gradient_hook: Optional[Callable[[GraphEmbeddingModel, np.random.Generator], None]] = None,
               validate: Optional[Callable[[], float]] = None) -> List[EpochRecord]:
    """Train on ``part.train`` (link) or ``part.train_nodes`` (node) plus replay batches.

    New batches contribute L_new + beta * L_norm (plus the regularizer),
    replay batches contribute L_old. Adam steps after every batch.
    """
    config = model.config
    node_mode = model.node_mode
    replay = replay or ReplayPlan()
    known = known if known is not None else set()
    if node_mode and labels is None:
        raise ValueError("node classification training needs labels")
    if not node_mode and candidates is None:
        raise ValueError("link prediction training needs candidate nodes")

    new_data = part.train_nodes if node_mode else part.train
    old_size = replay.size(node_mode)
    rng = np.random.default_rng([config.seed, part.index])
    logits_param = model.table.attention_logits

    def new_step(idx: np.ndarray) -> Tuple[float, float]:
        tape = GradientTape()
        if node_mode:
            nodes = new_data[idx]
            rep, alpha, selected = model.node_representation(tape, nodes)
            l_new = cross_entropy(classify_var(tape, rep, model.classifier), labels[nodes])
            l_norm = norm_loss(tape, alpha, selected) if alpha is not None else tape.constant(0.0)
            updatable = None
        else:
            positives = new_data[idx]
            alpha, selected = model.attention(tape, positives)
            negatives = sample_negatives(positives, known, config.negatives, rng, candidates).flat()
            l_new = link_loss(tape, model, positives, negatives, selected)
            l_norm = norm_loss(tape, alpha, selected)
            updatable = None
            if logits_param is not None:
                updatable = {logits_param.name: _row_mask(logits_param.shape[0], positives[:, 1])}
        total = l_new + l_norm * config.beta if config.beta else l_new
        if regularizer is not None:
            total = total + regularizer(tape)
        _check_finite(total, part.index)
        tape.backward(total)
        if gradient_hook is not None:
            gradient_hook(model, rng)
        gc.adam_step(optimizer, model.parameters(), updatable)
        return float(l_new.value), float(l_norm.value)

    def old_step(idx: np.ndarray) -> float:
        tape = GradientTape()
        frozen = replay.masks is not None
        if node_mode:
            nodes = replay.nodes[idx]
            l_old = node_loss(tape, model, nodes, labels[nodes], frozen=frozen)
            relations = np.zeros(0, dtype=np.int64)
        else:
            positives = replay.triples[idx]
            selected = replay.selected[idx] if replay.selected is not None else None
            negatives = sample_negatives(positives, known, config.negatives, rng, candidates).flat()
            negative_selected = None if selected is None else np.repeat(selected, config.negatives, axis=0)
            l_old = link_loss(tape, model, positives, negatives, selected, negative_selected)
            relations = positives[:, 1]
        _check_finite(l_old, part.index)
        tape.backward(l_old)
        if replay.masks is not None:
            updatable = masked_gradient_filter(replay.masks, model, relations)
        elif logits_param is not None:
            updatable = {logits_param.name: _row_mask(logits_param.shape[0], relations)}
        else:
            updatable = None
        gc.adam_step(optimizer, model.parameters(), updatable)
        return float(l_old.value)

    records: List[EpochRecord] = []
    best, stale = -np.inf, 0
    epochs = tqdm(range(config.epochs), desc=f"part {part.index}", disable=not config.show_progress, leave=False)
    for epoch in epochs:
        started = time.perf_counter()
        sums = {"new": 0.0, "old": 0.0, "norm": 0.0}
        new_batches = _batches(rng, len(new_data), config.batch_size)
        if replay.mix is not None:
            schedule = replay.mix(new_batches, rng)
        else:
            schedule = interleave_batches(new_batches, _batches(rng, old_size, config.batch_size))
        for kind, idx in schedule:
            if kind == "new":
                l_new, l_norm = new_step(idx)
                sums["new"] += l_new
                sums["norm"] += l_norm
            else:
                sums["old"] += old_step(idx)
        record = EpochRecord(part.index, epoch, sums["new"], sums["old"], sums["norm"],
                             time.perf_counter() - started)
        records.append(record)
        logger.debug(f"part {part.index} epoch {epoch}: L_new={record.loss_new:.4f} "
                     f"L_old={record.loss_old:.4f} L_norm={record.loss_norm:.4f}")

        if validate is not None and config.validation_interval and (epoch + 1) % config.validation_interval == 0:
            metric = validate()
            if metric > best:
                best, stale = metric, 0
            else:
                stale += 1
                if stale >= config.patience:
                    logger.info(f"Early stop in part {part.index} after epoch {epoch} (best {best:.4f})")
                    break

    if records:
        last = records[-1]
        logger.info(f"Part {part.index} trained for {len(records)} epochs: L_new={last.loss_new:.4f} "
                    f"L_old={last.loss_old:.4f} L_norm={last.loss_norm:.4f}")
    return records


def _check_finite(loss: Var, part: int):
    if not np.isfinite(loss.value):
        raise TrainingDivergenceError(f"non-finite loss in part {part}")
