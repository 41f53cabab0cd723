"""Dense float64 tensors with reverse-mode automatic differentiation.

Every other module computes through this one.  A :class:`Tensor` wraps a numpy
array; differentiable operations record themselves on a thread-local
:class:`Tape` in execution order, and :func:`backward` replays that tape
back-to-front (a valid reverse topological order) to accumulate gradients.

Float64 everywhere: the gradient checks and score-decomposition identities in
the test suite run at tolerances that single precision cannot meet.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

LOG_EPS = 1e-12


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """Invalid backward() usage: non-scalar loss or replaying a spent tape."""


class Tape:
    """Execution-ordered record of differentiable operations.

    Execution order is a topological order of the computation graph, so
    iterating the record back-to-front visits each node after all of its
    consumers.  A tape is replayed at most once; backward() consumes it.
    """

    __slots__ = ("nodes", "consumed")

    def __init__(self) -> None:
        self.nodes: list[Tensor] = []
        self.consumed = False


class _EngineState(threading.local):
    def __init__(self) -> None:
        self.tape = Tape()
        self.grad_enabled = True


_STATE = _EngineState()


def active_tape() -> Tape:
    return _STATE.tape


class no_grad:
    """Context manager that suspends tape recording (evaluation mode)."""

    def __enter__(self) -> None:
        self._prev = _STATE.grad_enabled
        _STATE.grad_enabled = False

    def __exit__(self, *exc) -> None:
        _STATE.grad_enabled = self._prev


class Tensor:
    """A dense float64 array plus the bookkeeping needed for backprop.

    ``grad`` is either ``None`` (meaning zero) or an array of the same shape
    as ``data``; gradient accumulation across fan-out is additive.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_grad_fn",
                 "_tape", "_backward_done")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._grad_fn: Callable | None = None
        self._tape: Tape | None = None
        self._backward_done = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # operator sugar; all arithmetic goes through the module-level ops below
    def __add__(self, other):
        return add(self, _as_tensor(other))

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, p):
        return pow_const(self, float(p))

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis=axis, keepdims=keepdims)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _make_op(data: np.ndarray, parents: tuple[Tensor, ...], grad_fn: Callable) -> Tensor:
    """Wrap an op result; record it on the active tape when grads are live."""
    out = Tensor(data)
    if _STATE.grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._grad_fn = grad_fn
        tape = _STATE.tape
        if tape.consumed:
            tape = Tape()
            _STATE.tape = tape
        out._tape = tape
        tape.nodes.append(out)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum g over the axes numpy broadcast, so it matches the operand shape."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------------------
# elementwise and linear-algebra primitives
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make_op(a.data + b.data, (a, b), grad_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make_op(a.data - b.data, (a, b), grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return (_unbroadcast(g * b.data, a.data.shape),
                _unbroadcast(g * a.data, b.data.shape))

    return _make_op(a.data * b.data, (a, b), grad_fn)


def div(a: Tensor, b: Tensor) -> Tensor:
    def grad_fn(g):
        return (_unbroadcast(g / b.data, a.data.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make_op(a.data / b.data, (a, b), grad_fn)


def neg(a: Tensor) -> Tensor:
    return _make_op(-a.data, (a,), lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul needs 2-D operands, got {a.data.shape} and {b.data.shape}")
    if a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}")

    def grad_fn(g):
        return g @ b.data.T, a.data.T @ g

    return _make_op(a.data @ b.data, (a, b), grad_fn)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise ShapeError(f"transpose needs a 2-D operand, got {a.data.shape}")
    return _make_op(a.data.T.copy(), (a,), lambda g: (g.T,))


def matmul_nt(a: Tensor, b: Tensor) -> Tensor:
    """a @ b.T in one node (the common attention-score shape)."""
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
        raise ShapeError(f"matmul_nt needs (m,k) x (n,k) operands, got "
                         f"{a.data.shape} and {b.data.shape}")

    def grad_fn(g):
        return g @ b.data, g.T @ a.data

    return _make_op(a.data @ b.data.T, (a, b), grad_fn)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    def grad_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.data.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.data.shape).copy(),)

    return _make_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), grad_fn)


def tmean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.data.size if axis is None else a.data.shape[axis]
    return tsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def sigmoid(a: Tensor) -> Tensor:
    s = 1.0 / (1.0 + np.exp(-a.data))
    return _make_op(s, (a,), lambda g: (g * s * (1.0 - s),))


def tanh(a: Tensor) -> Tensor:
    t = np.tanh(a.data)
    return _make_op(t, (a,), lambda g: (g * (1.0 - t * t),))


def relu(a: Tensor) -> Tensor:
    out = np.maximum(a.data, 0.0)
    return _make_op(out, (a,), lambda g: (g * (a.data > 0.0),))


def exp(a: Tensor) -> Tensor:
    e = np.exp(a.data)
    return _make_op(e, (a,), lambda g: (g * e,))


def log_clip(a: Tensor, eps: float = LOG_EPS) -> Tensor:
    """log(max(a, eps)); the clamp guards exact zeros under the log."""
    clipped = np.maximum(a.data, eps)

    def grad_fn(g):
        return (g * (a.data > eps) / clipped,)

    return _make_op(np.log(clipped), (a,), grad_fn)


def sqrt(a: Tensor) -> Tensor:
    s = np.sqrt(a.data)
    return _make_op(s, (a,), lambda g: (g * 0.5 / s,))


def pow_const(a: Tensor, p: float) -> Tensor:
    def grad_fn(g):
        return (g * p * a.data ** (p - 1.0),)

    return _make_op(a.data ** p, (a,), grad_fn)


def softmax_rows(a: Tensor) -> Tensor:
    """Numerically stable softmax over the last axis."""
    shifted = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    s = e / e.sum(axis=-1, keepdims=True)

    def grad_fn(g):
        return (s * (g - (g * s).sum(axis=-1, keepdims=True)),)

    return _make_op(s, (a,), grad_fn)


def masked_softmax(scores: Tensor, mask: np.ndarray) -> Tensor:
    """Row-wise softmax over the positions where ``mask`` is true.

    Masked-out entries act as -inf before normalization.  A row with at least
    one surviving entry sums to 1; a fully masked row comes back all zeros, so
    an isolated node contributes nothing downstream.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != scores.data.shape:
        raise ShapeError(f"mask shape {mask.shape} does not match scores shape {scores.data.shape}")
    neg = np.where(mask, scores.data, -np.inf)
    rowmax = neg.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.where(mask, np.exp(scores.data - rowmax), 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    out = np.divide(e, denom, out=np.zeros_like(e), where=denom > 0.0)

    def grad_fn(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make_op(out, (scores,), grad_fn)


def max_pool_time(h: Tensor) -> Tensor:
    """Per-dimension max over the time axis of an (L, d) sequence.

    Backward routes the gradient only to the argmax row of each column;
    ties break to the earliest time step so the backward pass is
    deterministic.
    """
    if h.data.ndim != 2:
        raise ShapeError(f"max_pool_time needs an (L, d) operand, got {h.data.shape}")
    if h.data.shape[0] == 0:
        raise ShapeError("max_pool_time over an empty sequence")
    idx = h.data.argmax(axis=0)
    out = h.data[idx, np.arange(h.data.shape[1])]

    def grad_fn(g):
        gx = np.zeros_like(h.data)
        gx[idx, np.arange(h.data.shape[1])] = g
        return (gx,)

    return _make_op(out, (h,), grad_fn)


def gather_rows(table: Tensor, indices) -> Tensor:
    """Row lookup (embedding gather); backward scatter-adds into the table."""
    idx = np.asarray(indices, dtype=np.int64)

    def grad_fn(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, idx, g)
        return (gt,)

    return _make_op(table.data[idx], (table,), grad_fn)


def stack_rows(vectors: Sequence[Tensor]) -> Tensor:
    """Stack 1-D tensors of equal length into a matrix, one per row."""
    def grad_fn(g):
        return tuple(g[i] for i in range(len(vectors)))

    return _make_op(np.stack([v.data for v in vectors]), tuple(vectors), grad_fn)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum(sizes)[:-1]

    def grad_fn(g):
        return tuple(np.split(g, offsets, axis=axis))

    return _make_op(np.concatenate([t.data for t in tensors], axis=axis),
                    tuple(tensors), grad_fn)


def slice_rows(a: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        gx = np.zeros_like(a.data)
        gx[start:stop] = g
        return (gx,)

    return _make_op(a.data[start:stop].copy(), (a,), grad_fn)


def slice_cols(a: Tensor, start: int, stop: int) -> Tensor:
    def grad_fn(g):
        gx = np.zeros_like(a.data)
        gx[:, start:stop] = g
        return (gx,)

    return _make_op(a.data[:, start:stop].copy(), (a,), grad_fn)


def dropout(a: Tensor, ratio: float, rng: np.random.Generator) -> Tensor:
    """Inverted dropout; callers skip it entirely outside of training."""
    if ratio <= 0.0:
        return a
    keep = (rng.random(a.data.shape) >= ratio) / (1.0 - ratio)
    return _make_op(a.data * keep, (a,), lambda g: (g * keep,))


# ---------------------------------------------------------------------------
# LSTM cell and fused sequence scan
# ---------------------------------------------------------------------------

class LstmParams:
    """Weights of one LSTM direction, gates packed as [input, forget, cell, output]."""

    def __init__(self, w_x: Tensor, w_h: Tensor, b: Tensor):
        self.w_x = w_x              # (d_in, 4h)
        self.w_h = w_h              # (h, 4h)
        self.b = b                  # (4h,)
        self.hidden = w_h.data.shape[0]

    @classmethod
    def init(cls, d_in: int, hidden: int, rng: np.random.Generator) -> "LstmParams":
        w_x = Tensor(glorot(rng, d_in, 4 * hidden), requires_grad=True)
        w_h = Tensor(glorot(rng, hidden, 4 * hidden), requires_grad=True)
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias starts open
        return cls(w_x, w_h, Tensor(b, requires_grad=True))

    def parameters(self):
        return [("w_x", self.w_x), ("w_h", self.w_h), ("b", self.b)]


def lstm_step(x: Tensor, state: tuple[Tensor, Tensor], params: LstmParams) -> tuple[Tensor, Tensor]:
    """One gated update: sigmoid input/forget/output gates, tanh candidate."""
    h_prev, c_prev = state
    n = params.hidden
    gates = matmul(x, params.w_x) + matmul(h_prev, params.w_h) + params.b
    i = sigmoid(slice_cols(gates, 0, n))
    f = sigmoid(slice_cols(gates, n, 2 * n))
    g = tanh(slice_cols(gates, 2 * n, 3 * n))
    o = sigmoid(slice_cols(gates, 3 * n, 4 * n))
    c = f * c_prev + i * g
    h = o * tanh(c)
    return h, c


def lstm_sequence(x: Tensor, params: LstmParams, reverse: bool = False) -> Tensor:
    """Scan an (L, d_in) sequence with one LSTM direction, returning (L, h).

    Fused into a single tape node with a hand-rolled backward pass; the test
    suite pins it against a chain of :func:`lstm_step` calls in both values
    and gradients.  Output row t always corresponds to input row t, whichever
    direction the scan runs.
    """
    xd = x.data
    length = xd.shape[0]
    n = params.hidden
    idx = np.arange(length - 1, -1, -1) if reverse else np.arange(length)

    wx, wh, b = params.w_x.data, params.w_h.data, params.b.data
    xw = xd @ wx + b            # input contributions batched up front
    hs = np.empty((length, n))
    cs = np.empty((length, n))
    gi = np.empty((length, n))
    gf = np.empty((length, n))
    gg = np.empty((length, n))
    go = np.empty((length, n))
    h = np.zeros(n)
    c = np.zeros(n)
    for t in idx:
        z = xw[t] + h @ wh
        gi[t] = 1.0 / (1.0 + np.exp(-z[:n]))
        gf[t] = 1.0 / (1.0 + np.exp(-z[n:2 * n]))
        gg[t] = np.tanh(z[2 * n:3 * n])
        go[t] = 1.0 / (1.0 + np.exp(-z[3 * n:]))
        c = gf[t] * c + gi[t] * gg[t]
        h = go[t] * np.tanh(c)
        hs[t] = h
        cs[t] = c

    def grad_fn(g):
        # states feeding each step in scan order; zeros before the first step
        h_prev = np.zeros((length, n))
        c_prev = np.zeros((length, n))
        h_prev[idx[1:]] = hs[idx[:-1]]
        c_prev[idx[1:]] = cs[idx[:-1]]
        tanh_cs = np.tanh(cs)
        dz_all = np.empty((length, 4 * n))
        dh_rec = np.zeros(n)
        dc_rec = np.zeros(n)
        for t in idx[::-1]:
            tc = tanh_cs[t]
            dh = g[t] + dh_rec
            do = dh * tc
            dc = dc_rec + dh * go[t] * (1.0 - tc * tc)
            dz = dz_all[t]
            dz[:n] = dc * gg[t] * gi[t] * (1.0 - gi[t])
            dz[n:2 * n] = dc * c_prev[t] * gf[t] * (1.0 - gf[t])
            dz[2 * n:3 * n] = dc * gi[t] * (1.0 - gg[t] * gg[t])
            dz[3 * n:] = do * go[t] * (1.0 - go[t])
            dc_rec = dc * gf[t]
            dh_rec = dz @ wh.T
        return dz_all @ wx.T, xd.T @ dz_all, h_prev.T @ dz_all, dz_all.sum(axis=0)

    return _make_op(hs, (x, params.w_x, params.w_h, params.b), grad_fn)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization with learned gain and bias."""
    mu = tmean(x, axis=-1, keepdims=True)
    centered = x - mu
    var = tmean(centered * centered, axis=-1, keepdims=True)
    return centered * pow_const(var + eps, -0.5) * gain + bias


# ---------------------------------------------------------------------------
# backward pass, optimizer, gradient checking
# ---------------------------------------------------------------------------

def backward(loss: Tensor) -> None:
    """Populate .grad on every requires_grad tensor reachable from ``loss``.

    Accumulation is additive across fan-out.  The tape that produced the loss
    is consumed: running backward a second time without a fresh forward pass
    raises :class:`GradientError`.
    """
    if loss.data.size != 1:
        raise GradientError(f"backward needs a scalar loss, got shape {loss.data.shape}")
    if loss._backward_done:
        raise GradientError("backward already ran for this loss; run a new forward pass first")
    loss._backward_done = True
    if loss._grad_fn is None:
        return  # constant: nothing upstream to reach
    tape = loss._tape
    if tape is None or tape.consumed:
        raise GradientError("the tape behind this loss was already consumed")
    tape.consumed = True
    loss.grad = np.ones_like(loss.data)
    for node in reversed(tape.nodes):
        if node.grad is None or node._grad_fn is None:
            continue
        grads = node._grad_fn(node.grad)
        for parent, g in zip(node._parents, grads):
            if parent.requires_grad and g is not None:
                parent.grad = g if parent.grad is None else parent.grad + g
        node._grad_fn = None
        node._parents = ()
        if node is not loss:
            node.grad = None
    tape.nodes.clear()
    if _STATE.tape is tape:
        _STATE.tape = Tape()


@dataclass
class AdamState:
    """First/second moment estimates plus the shared step counter."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0


def init_adam_state(params: Sequence[Tensor]) -> AdamState:
    return AdamState(m=[np.zeros_like(p.data) for p in params],
                     v=[np.zeros_like(p.data) for p in params])


def adam_update(params: Sequence[Tensor], grads: Sequence[np.ndarray | None],
                state: AdamState, lr: float,
                betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8) -> None:
    """Bias-corrected Adam step applied in place."""
    if lr <= 0.0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    state.step += 1
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)


class Adam:
    """Convenience wrapper binding a parameter list to an AdamState."""

    def __init__(self, params: Sequence[Tensor], lr: float,
                 betas: tuple[float, float] = (0.9, 0.999), eps: float = 1e-8):
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = init_adam_state(self.params)

    def step(self) -> None:
        adam_update(self.params, [p.grad for p in self.params], self.state,
                    self.lr, self.betas, self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def grad_check(f: Callable[[], Tensor], inputs: Sequence[Tensor],
               h: float = 1e-5, tol: float = 1e-4) -> dict:
    """Compare analytic gradients of a scalar function against central differences.

    ``f`` must be deterministic (no dropout) and close over ``inputs``.
    Reports, per input, max over elements of
    |analytic - numeric| / max(1, |analytic|).
    """
    for t in inputs:
        t.grad = None
    loss = f()
    backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy()
                for t in inputs]

    errors = []
    with no_grad():
        for t, a in zip(inputs, analytic):
            flat = t.data.reshape(-1)
            worst = 0.0
            for k in range(flat.size):
                orig = flat[k]
                flat[k] = orig + h
                up = f().item()
                flat[k] = orig - h
                down = f().item()
                flat[k] = orig
                numeric = (up - down) / (2.0 * h)
                ak = a.reshape(-1)[k]
                rel = abs(ak - numeric) / max(1.0, abs(ak))
                if rel > worst:
                    worst = rel
            errors.append(worst)
    worst_overall = max(errors) if errors else 0.0
    return {"per_input": errors, "max_rel_error": worst_overall,
            "passed": worst_overall <= tol}


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))
