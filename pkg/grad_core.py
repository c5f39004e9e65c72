"""
Reverse-mode differentiation substrate
======================================

A small numpy tape: every primitive records its parents and a
vector-jacobian product, and ``GradientTape.backward`` replays the records
in exact reverse order of the forward pass. Parameters own their gradient
accumulators; ``adam_step`` applies bias-corrected Adam and clears them.

All arithmetic is float64. Only the primitives the embedding models need
are provided; there is no general broadcasting.
"""

import json
import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

ArrayLike = Union[np.ndarray, float, int, Sequence]


@dataclass
class Parameter:
    """Trainable array with a gradient accumulator of identical shape"""
    name: str
    value: np.ndarray
    grad: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.value = np.array(self.value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def zero_grad(self):
        self.grad[...] = 0.0


class Var:
    """A value recorded on a tape"""

    __slots__ = ("value", "tape", "slot")

    def __init__(self, value: np.ndarray, tape: "GradientTape", slot: int):
        self.value = value
        self.tape = tape
        self.slot = slot

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.value.shape

    def __repr__(self):
        return f"Var(shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        if isinstance(other, Var):
            return mul(self, other)
        return scale(self, float(other))

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __getitem__(self, key):
        return getitem(self, key)

    def sum(self, axis: Optional[int] = None) -> "Var":
        return total(self, axis)

    def reshape(self, *shape) -> "Var":
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


class GradientTape:
    """Records primitive operations for one forward computation.

    With ``record=False`` only values are computed; such tapes are used for
    evaluation and for the perturbed evaluations of ``finite_diff_check``.
    Discrete decisions taken during the forward pass (ReLU activity, signs
    under an absolute value, top-n selections) are collected in
    ``decisions`` so that kinks can be detected.
    """

    def __init__(self, record: bool = True):
        self.record = record
        self._parents: List[Tuple[int, ...]] = []
        self._vjps: List[Optional[Callable]] = []
        self._params: List[Optional[Parameter]] = []
        self._watched: Dict[int, Var] = {}
        self.decisions: List[np.ndarray] = []

    def __len__(self):
        return len(self._parents)

    def _push(self, value, parents: Tuple[int, ...] = (), vjp: Optional[Callable] = None,
              param: Optional[Parameter] = None) -> Var:
        if not self.record:
            return Var(value, self, -1)
        self._parents.append(parents)
        self._vjps.append(vjp)
        self._params.append(param)
        return Var(value, self, len(self._parents) - 1)

    def watch(self, param: Parameter) -> Var:
        """Leaf for a parameter; watching twice returns the same leaf"""
        cached = self._watched.get(id(param))
        if cached is not None:
            return cached
        leaf = self._push(param.value, param=param)
        self._watched[id(param)] = leaf
        return leaf

    def constant(self, value: ArrayLike) -> Var:
        return self._push(np.asarray(value, dtype=np.float64))

    def decide(self, decision: np.ndarray):
        self.decisions.append(np.ascontiguousarray(decision))

    def signature(self) -> bytes:
        """Byte fingerprint of every discrete decision on this tape"""
        return b"".join(d.tobytes() for d in self.decisions)

    def backward(self, loss: Var):
        """Accumulate d(loss)/d(param) into every watched parameter's grad"""
        if not self.record:
            raise ValueError("tape was created with record=False")
        if loss.tape is not self:
            raise ValueError("loss was not produced on this tape")
        if np.size(loss.value) != 1 or np.ndim(loss.value) != 0:
            raise ValueError(f"loss must be a scalar, got shape {np.shape(loss.value)}")

        adjoints: List[Optional[np.ndarray]] = [None] * len(self._parents)
        adjoints[loss.slot] = np.ones_like(loss.value)
        for slot in range(loss.slot, -1, -1):
            g = adjoints[slot]
            if g is None:
                continue
            adjoints[slot] = None
            param = self._params[slot]
            if param is not None:
                param.grad += g
                continue
            vjp = self._vjps[slot]
            if vjp is None:
                continue
            for parent, pg in zip(self._parents[slot], vjp(g)):
                if pg is None:
                    continue
                prev = adjoints[parent]
                adjoints[parent] = pg if prev is None else prev + pg


def backward(tape: GradientTape, loss: Var):
    tape.backward(loss)


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _same_shape(a: Var, b: Var, op: str):
    if a.value.shape != b.value.shape:
        raise ValueError(f"{op}: shape mismatch {a.value.shape} vs {b.value.shape}")


def add(a: Var, b: Var) -> Var:
    _same_shape(a, b, "add")
    return a.tape._push(a.value + b.value, (a.slot, b.slot), lambda g: (g, g))


def sub(a: Var, b: Var) -> Var:
    _same_shape(a, b, "sub")
    return a.tape._push(a.value - b.value, (a.slot, b.slot), lambda g: (g, -g))


def mul(a: Var, b: Var) -> Var:
    _same_shape(a, b, "mul")
    av, bv = a.value, b.value
    return a.tape._push(av * bv, (a.slot, b.slot), lambda g: (g * bv, g * av))


def scale(a: Var, c: float) -> Var:
    return a.tape._push(a.value * c, (a.slot,), lambda g: (g * c,))


def total(a: Var, axis: Optional[int] = None) -> Var:
    shape = a.value.shape
    if axis is None:
        return a.tape._push(np.sum(a.value), (a.slot,), lambda g: (np.full(shape, g),))

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)
    return a.tape._push(np.sum(a.value, axis=axis), (a.slot,), vjp)


def reshape(a: Var, shape: Tuple[int, ...]) -> Var:
    original = a.value.shape
    return a.tape._push(a.value.reshape(shape), (a.slot,), lambda g: (g.reshape(original),))


def getitem(a: Var, key) -> Var:
    """Slicing or fancy indexing; repeated indices accumulate on the way back"""
    shape = a.value.shape

    def vjp(g):
        out = np.zeros(shape)
        np.add.at(out, key, g)
        return (out,)
    return a.tape._push(a.value[key], (a.slot,), vjp)


def concat(parts: Sequence[Var], axis: int = -1) -> Var:
    if not parts:
        raise ValueError("concat of nothing")
    tape = parts[0].tape
    sizes = [p.value.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))
    return tape._push(np.concatenate([p.value for p in parts], axis=axis),
                      tuple(p.slot for p in parts), vjp)


def repeat(a: Var, axis: int, count: int) -> Var:
    """Insert a new axis and repeat ``count`` times along it"""
    value = np.repeat(np.expand_dims(a.value, axis), count, axis=axis)
    return a.tape._push(value, (a.slot,), lambda g: (g.sum(axis=axis),))


def linear(x: Var, w: Var) -> Var:
    """x (..., in) times w (out, in) transposed -> (..., out)"""
    xv, wv = x.value, w.value
    if xv.shape[-1] != wv.shape[1]:
        raise ValueError(f"linear: input width {xv.shape[-1]} vs weight {wv.shape}")

    def vjp(g):
        gx = g @ wv
        gw = g.reshape(-1, wv.shape[0]).T @ xv.reshape(-1, wv.shape[1])
        return gx, gw
    return x.tape._push(xv @ wv.T, (x.slot, w.slot), vjp)


def component_linear(x: Var, w: Var) -> Var:
    """Per-component projection: x (B, K, in), w (K, out, in) -> (B, K, out)"""
    xv, wv = x.value, w.value
    if xv.shape[1:] != (wv.shape[0], wv.shape[2]):
        raise ValueError(f"component_linear: {xv.shape} incompatible with {wv.shape}")

    def vjp(g):
        return np.einsum("bko,koi->bki", g, wv), np.einsum("bko,bki->koi", g, xv)
    return x.tape._push(np.einsum("bki,koi->bko", xv, wv), (x.slot, w.slot), vjp)


def conv_rows(x: Var, filters: Var, bias: Var) -> Var:
    """Row-wise 1D convolution without padding.

    x is (B, L, C); each of the M filters spans the full C columns of a row,
    so the feature map is (B, L, M).
    """
    xv, fv, bv = x.value, filters.value, bias.value
    if xv.shape[-1] != fv.shape[1] or bv.shape != (fv.shape[0],):
        raise ValueError(f"conv_rows: input {xv.shape}, filters {fv.shape}, bias {bv.shape}")

    def vjp(g):
        gx = g @ fv
        gf = np.einsum("blm,blc->mc", g, xv)
        gb = g.sum(axis=(0, 1))
        return gx, gf, gb
    return x.tape._push(xv @ fv.T + bv, (x.slot, filters.slot, bias.slot), vjp)


def relu(a: Var) -> Var:
    active = a.value > 0
    a.tape.decide(active)
    # subgradient at 0 is 0
    return a.tape._push(np.where(active, a.value, 0.0), (a.slot,), lambda g: (g * active,))


def pnorm(a: Var, p: int, axis: int = -1) -> Var:
    """p-norm along ``axis`` for p in {1, 2}"""
    v = a.value
    if p == 1:
        signs = np.sign(v)
        a.tape.decide(signs.astype(np.int8))
        return a.tape._push(np.abs(v).sum(axis=axis), (a.slot,),
                            lambda g: (np.expand_dims(g, axis) * signs,))
    if p == 2:
        norm = np.sqrt((v * v).sum(axis=axis))
        safe = np.where(norm > 0, norm, 1.0)

        def vjp(g):
            return (np.expand_dims(np.where(norm > 0, g / safe, 0.0), axis) * v,)
        return a.tape._push(norm, (a.slot,), vjp)
    raise ValueError(f"unsupported norm order p={p}")


def softmax(a: Var, axis: int = -1, mask: Optional[np.ndarray] = None) -> Var:
    """Max-shifted softmax; masked-out entries get probability 0"""
    v = a.value
    if mask is not None:
        v = np.where(mask, v, -np.inf)
    shifted = v - np.max(v, axis=axis, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)
    return a.tape._push(s, (a.slot,), vjp)


def log_softmax(a: Var, axis: int = -1) -> Var:
    v = a.value
    shifted = v - np.max(v, axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    s = np.exp(out)

    def vjp(g):
        return (g - s * g.sum(axis=axis, keepdims=True),)
    return a.tape._push(out, (a.slot,), vjp)


def _logistic(v: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -v))


def sigmoid(a: Var) -> Var:
    s = _logistic(a.value)
    return a.tape._push(s, (a.slot,), lambda g: (g * s * (1.0 - s),))


def softplus(a: Var) -> Var:
    """log(1 + exp(a)), computed stably"""
    s = _logistic(a.value)
    return a.tape._push(np.logaddexp(0.0, a.value), (a.slot,), lambda g: (g * s,))


# ---------------------------------------------------------------------------
# verification and optimisation
# ---------------------------------------------------------------------------

def finite_diff_check(f: Callable[[GradientTape], Var], p: Parameter, h: float = 1e-5) -> float:
    """Max relative error between the tape gradient and central differences.

    ``f`` builds a scalar loss on the tape it is given and must be
    deterministic. Coordinates whose perturbation changes any discrete
    decision (ReLU kink, sign flip, top-n selection) are skipped.
    """
    p.zero_grad()
    tape = GradientTape()
    loss = f(tape)
    tape.backward(loss)
    analytic = p.grad.copy().reshape(-1)
    p.zero_grad()
    base = tape.signature()

    flat = p.value.reshape(-1)
    worst, skipped = 0.0, 0
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus_tape = GradientTape(record=False)
        f_plus = float(f(plus_tape).value)
        flat[i] = original - h
        minus_tape = GradientTape(record=False)
        f_minus = float(f(minus_tape).value)
        flat[i] = original
        if plus_tape.signature() != base or minus_tape.signature() != base:
            skipped += 1
            continue
        numeric = (f_plus - f_minus) / (2.0 * h)
        err = abs(analytic[i] - numeric) / max(1.0, abs(analytic[i]))
        worst = max(worst, err)
    if skipped:
        logger.debug(f"finite_diff_check skipped {skipped}/{flat.size} coordinates of {p.name} near kinks")
    return worst


@dataclass
class AdamState:
    """Bias-corrected Adam moments keyed by parameter name"""
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)

    def reset(self):
        self.step = 0
        self.first_moment.clear()
        self.second_moment.clear()


def adam_step(state: AdamState, params: Iterable[Parameter],
              updatable: Optional[Mapping[str, np.ndarray]] = None):
    """One Adam update, then gradients are reset to zero.

    ``updatable`` optionally maps a parameter name to a boolean array
    (broadcastable to the parameter) of entries allowed to move; other
    entries keep both their value and their moments.
    """
    state.step += 1
    b1c = 1.0 - state.beta1 ** state.step
    b2c = 1.0 - state.beta2 ** state.step
    for p in params:
        m = state.first_moment.setdefault(p.name, np.zeros_like(p.value))
        v = state.second_moment.setdefault(p.name, np.zeros_like(p.value))
        g = p.grad
        mask = None if updatable is None else updatable.get(p.name)
        if mask is None:
            m *= state.beta1
            m += (1.0 - state.beta1) * g
            v *= state.beta2
            v += (1.0 - state.beta2) * g * g
            p.value -= state.lr * (m / b1c) / (np.sqrt(v / b2c) + state.eps)
        else:
            sel = np.broadcast_to(mask, p.value.shape)
            m[sel] = state.beta1 * m[sel] + (1.0 - state.beta1) * g[sel]
            v[sel] = state.beta2 * v[sel] + (1.0 - state.beta2) * g[sel] * g[sel]
            p.value[sel] -= state.lr * (m[sel] / b1c) / (np.sqrt(v[sel] / b2c) + state.eps)
        p.zero_grad()


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(arrays: Mapping[str, np.ndarray], path: str):
    """Write a key -> array map; ``.npz`` is binary, anything else JSON text"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    if path.endswith(".npz"):
        np.savez(path, **{k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})
        return
    payload = {
        "version": CHECKPOINT_VERSION,
        "arrays": {
            name: {"shape": list(np.shape(value)),
                   "values": [float(x) for x in np.asarray(value, dtype=np.float64).reshape(-1)]}
            for name, value in arrays.items()
        },
    }
    with open(path, "w", encoding="utf-8") as f:
        # float repr is the shortest round-trip decimal form
        json.dump(payload, f)


def load_checkpoint(path: str) -> Dict[str, np.ndarray]:
    if path.endswith(".npz"):
        with np.load(path) as data:
            return {k: data[k].copy() for k in data.files}
    with open(path, "r", encoding="utf-8") as f:
        payload = json.load(f)
    version = payload.get("version")
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    return {
        name: np.array(entry["values"], dtype=np.float64).reshape(entry["shape"])
        for name, entry in payload["arrays"].items()
    }
