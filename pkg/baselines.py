"""
Reference continual-learning strategies: elastic weight consolidation,
episodic memory replay and averaged gradient episodic memory. The lower
and upper bounds are runner modes in ``pipeline``.
"""

import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from grad_core import GradientTape, Parameter, Var
from trainer import instance_loss, interleave_batches

logger = logging.getLogger(__name__)


@dataclass
class FisherDiagonal:
    """Squared-gradient averages and the parameter snapshot they anchor"""
    values: Dict[str, np.ndarray]
    anchor: Dict[str, np.ndarray]


def estimate_fisher(samples: np.ndarray, params: Sequence[Parameter],
                    loss: Callable[[GradientTape, np.ndarray], Var]) -> FisherDiagonal:
    """Mean over samples of the squared per-sample gradient of ``loss``"""
    samples = np.asarray(samples)
    if len(samples) == 0:
        raise ValueError("cannot estimate Fisher information from an empty sample")
    params = list(params)
    totals = {p.name: np.zeros_like(p.value) for p in params}
    for p in params:
        p.zero_grad()
    for i in range(len(samples)):
        tape = GradientTape()
        tape.backward(loss(tape, samples[i:i + 1]))
        for p in params:
            totals[p.name] += p.grad * p.grad
            p.zero_grad()
    return FisherDiagonal(
        values={name: total / len(samples) for name, total in totals.items()},
        anchor={p.name: p.value.copy() for p in params},
    )


def ewc_penalty(tape: GradientTape, params: Iterable[Parameter], fisher: FisherDiagonal, lam: float) -> Var:
    """(lam / 2) * sum F * (theta - theta*)^2"""
    terms = []
    for p in params:
        weight = fisher.values.get(p.name)
        if weight is None:
            continue
        diff = tape.watch(p) - tape.constant(fisher.anchor[p.name])
        terms.append((diff * diff * tape.constant(weight)).sum())
    if not terms:
        return tape.constant(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total * (0.5 * lam)


@dataclass
class EWCRegularizer:
    """Penalties of every anchored part, summed"""
    params: Callable[[], List[Parameter]]
    lam: float
    fishers: List[FisherDiagonal] = field(default_factory=list)

    def __call__(self, tape: GradientTape) -> Var:
        params = self.params()
        total = tape.constant(0.0)
        for fisher in self.fishers:
            total = total + ewc_penalty(tape, params, fisher, self.lam)
        return total


class EpisodicMemory:
    """Reservoir of old train instances (triples or node ids) across parts"""

    def __init__(self, capacity: int, seed: int = 0):
        if capacity < 0:
            raise ValueError("capacity must be non-negative")
        self.capacity = capacity
        self.rng = np.random.default_rng(seed)
        self.seen = 0
        self._items: List[np.ndarray] = []

    def __len__(self):
        return len(self._items)

    def add(self, instances: np.ndarray):
        """Offer every instance of a finished part to the reservoir"""
        for row in np.asarray(instances):
            self.seen += 1
            if len(self._items) < self.capacity:
                self._items.append(np.array(row))
            else:
                slot = int(self.rng.integers(self.seen))
                if slot < self.capacity:
                    self._items[slot] = np.array(row)
        logger.info(f"Episodic memory holds {len(self._items)}/{self.capacity} instances ({self.seen} offered)")

    def items(self) -> np.ndarray:
        if not self._items:
            return np.zeros((0, 3), dtype=np.int64)
        return np.stack(self._items).astype(np.int64)


def emr_replay(memory: EpisodicMemory, new_batches: List[np.ndarray], batch_size: int,
               seed: int = 0) -> List[Tuple[str, np.ndarray]]:
    """Alternate new batches with shuffled memory batches (no masking).

    Memory batches are row indices into ``memory.items()``.
    """
    if len(memory) == 0:
        return interleave_batches(new_batches, [])
    order = np.random.default_rng(seed).permutation(len(memory))
    old = [order[i:i + batch_size] for i in range(0, len(memory), batch_size)]
    return interleave_batches(new_batches, old)


def agem_project(g_new: np.ndarray, g_ref: np.ndarray) -> np.ndarray:
    """Project g_new onto the half-space where it does not oppose g_ref"""
    dot = float(np.dot(g_new, g_ref))
    if dot >= 0:
        return g_new
    ref_sq = float(np.dot(g_ref, g_ref))
    if ref_sq == 0.0:
        logger.warning("A-GEM reference gradient is zero; gradient left unprojected")
        return g_new
    return g_new - (dot / ref_sq) * g_ref


class AGEMHook:
    """Gradient hook: reference gradient on a memory sample, then projection"""

    def __init__(self, memory: EpisodicMemory, batch_size: int, labels: Optional[np.ndarray] = None):
        self.memory = memory
        self.batch_size = batch_size
        self.labels = labels
        self.projections = 0

    def __call__(self, model, rng: np.random.Generator):
        stored = self.memory.items()
        if len(stored) == 0:
            return
        params = model.parameters()
        g_new = np.concatenate([p.grad.reshape(-1) for p in params])
        for p in params:
            p.zero_grad()
        pick = rng.choice(len(stored), size=min(self.batch_size, len(stored)), replace=False)
        batch = stored[np.sort(pick)]
        tape = GradientTape()
        tape.backward(instance_loss(tape, model, batch, self.labels) * (1.0 / len(batch)))
        g_ref = np.concatenate([p.grad.reshape(-1) for p in params])
        projected = agem_project(g_new, g_ref)
        if projected is not g_new:
            self.projections += 1
        offset = 0
        for p in params:
            size = p.value.size
            p.grad[...] = projected[offset:offset + size].reshape(p.shape)
            offset += size
