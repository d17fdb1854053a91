"""Minimal differentiable LSTM machinery.

Implements the classic gated cell (forget/input/output gates plus candidate
cell state, no peepholes), multi-layer sequence unrolling with caching for
exact backpropagation through time, an Adam optimizer over flat parameter
lists, a step-decay learning-rate schedule, and a central finite-difference
gradient checker.

Everything is float64 and pure: functions return new arrays and never mutate
their inputs, so parameter snapshots are safe to share.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, NamedTuple

import numpy as np


def sigmoid(z: np.ndarray) -> np.ndarray:
    """Logistic function, branch form so exp never sees a large positive argument."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


@dataclass
class LstmLayerParams:
    """Weights of one LSTM layer.

    Each gate matrix has shape (hidden_dim, hidden_dim + input_dim) and acts on
    the concatenation [h_prev, x]; biases have length hidden_dim.
    """

    W_f: np.ndarray
    W_i: np.ndarray
    W_c: np.ndarray
    W_o: np.ndarray
    b_f: np.ndarray
    b_i: np.ndarray
    b_c: np.ndarray
    b_o: np.ndarray

    def __post_init__(self):
        shapes = {self.W_f.shape, self.W_i.shape, self.W_c.shape, self.W_o.shape}
        if len(shapes) != 1:
            raise ValueError(f"gate weight matrices disagree in shape: {shapes}")
        h = self.W_f.shape[0]
        for name in ("b_f", "b_i", "b_c", "b_o"):
            b = getattr(self, name)
            if b.shape != (h,):
                raise ValueError(f"{name} has shape {b.shape}, expected ({h},)")

    @property
    def hidden_dim(self) -> int:
        return self.W_f.shape[0]

    @property
    def input_dim(self) -> int:
        return self.W_f.shape[1] - self.W_f.shape[0]

    def arrays(self) -> list[np.ndarray]:
        """Parameter arrays in declared order (W_f, W_i, W_c, W_o, b_f, b_i, b_c, b_o)."""
        return [self.W_f, self.W_i, self.W_c, self.W_o,
                self.b_f, self.b_i, self.b_c, self.b_o]


@dataclass
class LstmStack:
    """Ordered LSTM layers; input_dim of layer k+1 must equal hidden_dim of layer k."""

    layers: list[LstmLayerParams]

    def __post_init__(self):
        if not self.layers:
            raise ValueError("stack needs at least one layer")
        for lower, upper in zip(self.layers, self.layers[1:]):
            if upper.input_dim != lower.hidden_dim:
                raise ValueError(
                    f"layer chaining broken: input_dim {upper.input_dim} after "
                    f"hidden_dim {lower.hidden_dim}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].input_dim

    @property
    def top_hidden_dim(self) -> int:
        return self.layers[-1].hidden_dim

    def arrays(self) -> list[np.ndarray]:
        return [a for layer in self.layers for a in layer.arrays()]


@dataclass
class CellState:
    """Hidden and cell state of one layer; shape (..., hidden_dim)."""

    h: np.ndarray
    c: np.ndarray


class CellCache(NamedTuple):
    """Per-step forward values needed for the exact backward pass."""

    zcat: np.ndarray   # [h_prev, x], shape (B, H + D)
    f: np.ndarray
    i: np.ndarray
    g: np.ndarray
    o: np.ndarray
    c: np.ndarray
    c_prev: np.ndarray
    tc: np.ndarray     # tanh(c)


def init_layer(input_dim: int, hidden_dim: int, rng: np.random.Generator) -> LstmLayerParams:
    """Uniform(-r, r) weights with r = 1/sqrt(input_dim + hidden_dim); forget bias 1."""
    if input_dim < 1 or hidden_dim < 1:
        raise ValueError("input_dim and hidden_dim must be >= 1")
    r = 1.0 / np.sqrt(input_dim + hidden_dim)
    shape = (hidden_dim, hidden_dim + input_dim)
    weights = [rng.uniform(-r, r, size=shape) for _ in range(4)]
    return LstmLayerParams(
        *weights,
        b_f=np.ones(hidden_dim),
        b_i=np.zeros(hidden_dim),
        b_c=np.zeros(hidden_dim),
        b_o=np.zeros(hidden_dim),
    )


def zeros_like_layer(params: LstmLayerParams) -> LstmLayerParams:
    return LstmLayerParams(*[np.zeros_like(a) for a in params.arrays()])


def zeros_like_stack(stack: LstmStack) -> LstmStack:
    return LstmStack([zeros_like_layer(layer) for layer in stack.layers])


def cell_forward(params: LstmLayerParams, x: np.ndarray,
                 state: CellState) -> tuple[CellState, CellCache]:
    """One LSTM step with cached intermediates; x is (D,) or (B, D)."""
    zcat = np.concatenate([state.h, x], axis=-1)
    f = sigmoid(zcat @ params.W_f.T + params.b_f)
    i = sigmoid(zcat @ params.W_i.T + params.b_i)
    g = np.tanh(zcat @ params.W_c.T + params.b_c)
    o = sigmoid(zcat @ params.W_o.T + params.b_o)
    c = f * state.c + i * g
    tc = np.tanh(c)
    h = o * tc
    return CellState(h, c), CellCache(zcat, f, i, g, o, c, state.c, tc)


def lstm_step(params: LstmLayerParams, x: np.ndarray, prev: CellState) -> CellState:
    """Single validated step: returns the next CellState for input x."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != params.input_dim:
        raise ValueError(f"x has {x.shape[-1]} features, layer expects {params.input_dim}")
    for name, v in (("h", prev.h), ("c", prev.c)):
        if np.asarray(v).shape[-1] != params.hidden_dim:
            raise ValueError(f"prev.{name} has length {np.asarray(v).shape[-1]}, "
                             f"expected {params.hidden_dim}")
    state, _ = cell_forward(params, x, CellState(np.asarray(prev.h, dtype=np.float64),
                                                 np.asarray(prev.c, dtype=np.float64)))
    if not (np.all(np.isfinite(state.h)) and np.all(np.isfinite(state.c))):
        raise FloatingPointError("non-finite cell state")
    return state


def cell_backward(params: LstmLayerParams, cache: CellCache, dh: np.ndarray,
                  dc_in: np.ndarray, grads: LstmLayerParams) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Backward through one cached step; accumulates into ``grads``.

    Returns (dx, dh_prev, dc_prev).
    """
    do = dh * cache.tc
    dc = dc_in + dh * cache.o * (1.0 - cache.tc ** 2)
    df = dc * cache.c_prev
    di = dc * cache.g
    dg = dc * cache.i
    dc_prev = dc * cache.f

    a_f = df * cache.f * (1.0 - cache.f)
    a_i = di * cache.i * (1.0 - cache.i)
    a_g = dg * (1.0 - cache.g ** 2)
    a_o = do * cache.o * (1.0 - cache.o)

    zcat2 = np.atleast_2d(cache.zcat)
    for a, W, b in ((a_f, grads.W_f, grads.b_f), (a_i, grads.W_i, grads.b_i),
                    (a_g, grads.W_c, grads.b_c), (a_o, grads.W_o, grads.b_o)):
        a2 = np.atleast_2d(a)
        W += a2.T @ zcat2
        b += a2.sum(axis=0)

    dzcat = a_f @ params.W_f + a_i @ params.W_i + a_g @ params.W_c + a_o @ params.W_o
    hdim = params.hidden_dim
    return dzcat[..., hdim:], dzcat[..., :hdim], dc_prev


@dataclass
class ForwardPass:
    """Cached forward unrolling of a stack over a sequence."""

    hidden: list[np.ndarray]          # per layer, shape (T, B, hidden_dim)
    caches: list[list[CellCache]]     # per layer, per step
    final: list[CellState]            # per layer, shape (B, hidden_dim)
    layer_dims: list[tuple[int, int]] # (input_dim, hidden_dim) per layer
    batched: bool                     # False when the input sequence was (T, D)

    @property
    def n_steps(self) -> int:
        return self.hidden[0].shape[0]


def forward_sequence(stack: LstmStack, seq: np.ndarray,
                     init: list[CellState] | None = None) -> ForwardPass:
    """Unroll the stack over ``seq`` ((T, D) or (T, B, D)), caching for BPTT.

    With ``init`` omitted all states start at zero; otherwise one CellState per
    layer, congruent with the batch shape.
    """
    seq = np.asarray(seq, dtype=np.float64)
    batched = seq.ndim == 3
    if seq.ndim == 2:
        seq = seq[:, None, :]
    if seq.ndim != 3 or seq.shape[0] == 0:
        raise ValueError("seq must be a nonempty (T, D) or (T, B, D) array")
    T, B, d = seq.shape
    if d != stack.input_dim:
        raise ValueError(f"seq has {d} features, stack expects {stack.input_dim}")

    if init is None:
        states = [CellState(np.zeros((B, l.hidden_dim)), np.zeros((B, l.hidden_dim)))
                  for l in stack.layers]
    else:
        if len(init) != len(stack.layers):
            raise ValueError("init must provide one CellState per layer")
        states = []
        for l, s in zip(stack.layers, init):
            h = np.atleast_2d(np.asarray(s.h, dtype=np.float64))
            c = np.atleast_2d(np.asarray(s.c, dtype=np.float64))
            if h.shape != (B, l.hidden_dim) or c.shape != (B, l.hidden_dim):
                raise ValueError("init state shape mismatch")
            states.append(CellState(h, c))

    hidden = [np.empty((T, B, l.hidden_dim)) for l in stack.layers]
    caches: list[list[CellCache]] = [[] for _ in stack.layers]
    for t in range(T):
        x = seq[t]
        for k, layer in enumerate(stack.layers):
            states[k], cache = cell_forward(layer, x, states[k])
            caches[k].append(cache)
            hidden[k][t] = states[k].h
            x = states[k].h
    dims = [(l.input_dim, l.hidden_dim) for l in stack.layers]
    return ForwardPass(hidden, caches, states, dims, batched)


def backward_sequence(stack: LstmStack, fwd: ForwardPass,
                      d_hidden: np.ndarray) -> tuple[LstmStack, np.ndarray, list[CellState]]:
    """Exact BPTT given the loss gradient w.r.t. the top layer's hidden states.

    ``d_hidden`` is (T, H_top) or (T, B, H_top), congruent with the cached
    forward pass. Returns (parameter gradients congruent to ``stack``, gradient
    w.r.t. the input sequence, gradient w.r.t. each layer's initial state).
    """
    dims = [(l.input_dim, l.hidden_dim) for l in stack.layers]
    if dims != fwd.layer_dims:
        raise ValueError("cache/stack mismatch: layer dimensions disagree")
    T = fwd.n_steps
    B = fwd.hidden[0].shape[1]
    d_hidden = np.asarray(d_hidden, dtype=np.float64)
    if d_hidden.ndim == 2:
        d_hidden = d_hidden[:, None, :]
    if d_hidden.shape != (T, B, stack.top_hidden_dim):
        raise ValueError(f"d_hidden shape {d_hidden.shape} does not match cached "
                         f"({T}, {B}, {stack.top_hidden_dim})")

    grads = zeros_like_stack(stack)
    d_init: list[CellState | None] = [None] * len(stack.layers)
    upstream = d_hidden
    for k in range(len(stack.layers) - 1, -1, -1):
        layer = stack.layers[k]
        dh_next = np.zeros((B, layer.hidden_dim))
        dc_next = np.zeros((B, layer.hidden_dim))
        dX = np.empty((T, B, layer.input_dim))
        for t in range(T - 1, -1, -1):
            dh = upstream[t] + dh_next
            dX[t], dh_next, dc_next = cell_backward(layer, fwd.caches[k][t], dh,
                                                    dc_next, grads.layers[k])
        d_init[k] = CellState(dh_next, dc_next)
        upstream = dX
    d_inputs = upstream if fwd.batched else upstream[:, 0, :]
    return grads, d_inputs, d_init


# --- optimization -----------------------------------------------------------

@dataclass
class AdamState:
    """Adam moment accumulators congruent to a parameter list."""

    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8


def adam_init(params: list[np.ndarray], beta1: float = 0.9, beta2: float = 0.999,
              epsilon: float = 1e-8) -> AdamState:
    return AdamState([np.zeros_like(p) for p in params],
                     [np.zeros_like(p) for p in params],
                     0, beta1, beta2, epsilon)


def adam_update(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
                lr: float) -> tuple[list[np.ndarray], AdamState]:
    """Bias-corrected Adam step; returns new parameters and advanced state."""
    if lr <= 0:
        raise ValueError("lr must be > 0")
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ValueError("params/grads/state lengths disagree")
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError("non-finite gradient passed to adam_update")
    t = state.t + 1
    b1, b2, eps = state.beta1, state.beta2, state.epsilon
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    new_params, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m2 = b1 * m + (1.0 - b1) * g
        v2 = b2 * v + (1.0 - b2) * g * g
        step = lr * (m2 / c1) / (np.sqrt(v2 / c2) + eps)
        new_params.append(p - step)
        new_m.append(m2)
        new_v.append(v2)
    return new_params, AdamState(new_m, new_v, t, b1, b2, eps)


def lr_schedule(base_lr: float, iteration: int, drop_every: int = 20000,
                drop_factor: float = 0.1) -> float:
    """Stepwise decay: base_lr * drop_factor ** floor(iteration / drop_every)."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    return base_lr * drop_factor ** (iteration // drop_every)


# --- verification -----------------------------------------------------------

def grad_check(loss_fn: Callable[[list[np.ndarray]], float],
               grad_fn: Callable[[list[np.ndarray]], list[np.ndarray]],
               params: list[np.ndarray], fd_step: float = 1e-5) -> float:
    """Max relative error between analytic gradients and central differences.

    Error per component is |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if fd_step <= 0:
        raise ValueError("fd_step must be > 0")
    work = [p.copy() for p in params]
    analytic = grad_fn([p.copy() for p in params])
    max_err = 0.0
    for k, p in enumerate(work):
        flat = p.reshape(-1)
        a_flat = analytic[k].reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + fd_step
            lp = loss_fn(work)
            flat[j] = orig - fd_step
            lm = loss_fn(work)
            flat[j] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise FloatingPointError("non-finite loss during gradient check")
            fd = (lp - lm) / (2.0 * fd_step)
            err = abs(a_flat[j] - fd) / max(abs(a_flat[j]), abs(fd), 1e-8)
            max_err = max(max_err, err)
    return max_err
