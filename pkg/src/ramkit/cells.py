"""Recurrent cell forward/backward passes: LSTM, GRU, reluGRU, M-reluGRU.

All step functions are batched: an input is a (batch, dim) matrix and a
hidden state a (batch, hidden) matrix; a plain vector is the batch=1
case.  Weights use the row convention, so a pre-activation is
``x @ W + h_prev @ U + b``.

Cell equations implemented here:

LSTM (three gates, separate memory cell)::

    i = sigmoid(x W_xi + h U_hi + b_i)
    f = sigmoid(x W_xf + h U_hf + b_f)
    o = sigmoid(x W_xo + h U_ho + b_o)
    c_t = f * c_prev + i * tanh(x W_xc + h U_hc + b_c)
    h_t = o * tanh(c_t)

GRU (update + reset gate, no separate cell)::

    r = sigmoid(x W_r + h U_r + b_r)
    z = sigmoid(x W_z + h U_z + b_z)
    cand = tanh(x W_h + (r * h) U_h + b_h)
    h_t = (1 - z) * h + z * cand

reluGRU is the GRU with relu replacing tanh in the candidate; the
single-gate variant drops the reset gate entirely and also uses relu::

    z = sigmoid(x W_z + h U_z + b_z)
    cand = relu(x W_h + h U_h + b_h)
    h_t = (1 - z) * h + z * cand

Backward passes are exact backpropagation through time over the full
sequence, driven by the per-step tape recorded during the forward pass.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .numerics import DTYPE, init_glorot, relu, require, sigmoid


def _dot(a, b):
    """BLAS product for the training hot path.

    Unlike numerics.matmul this does not pin the summation order; it is
    deterministic for fixed inputs on one machine, which is what training
    reproducibility needs, and it is 1-2 orders of magnitude faster on
    the per-step shapes BPTT generates.
    """
    require(a.shape[1] == b.shape[0], f"matmul dimension mismatch: {a.shape} x {b.shape}")
    return np.dot(a, b)


class CellKind(str, Enum):
    LSTM = "lstm"
    GRU = "gru"
    RELU_GRU = "relugru"
    M_RELU_GRU = "mrelugru"
    FF_RELU = "ff"

    @property
    def recurrent(self):
        return self is not CellKind.FF_RELU


@dataclass
class LstmParams:
    w_xi: np.ndarray
    u_hi: np.ndarray
    b_i: np.ndarray
    w_xf: np.ndarray
    u_hf: np.ndarray
    b_f: np.ndarray
    w_xo: np.ndarray
    u_ho: np.ndarray
    b_o: np.ndarray
    w_xc: np.ndarray
    u_hc: np.ndarray
    b_c: np.ndarray


@dataclass
class GruParams:
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray


@dataclass
class MGruParams:
    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray


@dataclass
class FfParams:
    w: np.ndarray
    b: np.ndarray


PARAM_CLASSES = {
    CellKind.LSTM: LstmParams,
    CellKind.GRU: GruParams,
    CellKind.RELU_GRU: GruParams,
    CellKind.M_RELU_GRU: MGruParams,
    CellKind.FF_RELU: FfParams,
}


def param_field_names(kind):
    return [f.name for f in dataclasses.fields(PARAM_CLASSES[CellKind(kind)])]


def param_items(params):
    """(name, array) pairs in canonical (declaration) order.

    This order is shared by the optimizer state, gradient containers and
    the model file layout, so it must never change.
    """
    return [(f.name, getattr(params, f.name)) for f in dataclasses.fields(params)]


def zero_like_params(params):
    cls = type(params)
    return cls(**{name: np.zeros_like(a) for name, a in param_items(params)})


def clone_params(params):
    cls = type(params)
    return cls(**{name: a.copy() for name, a in param_items(params)})


def init_lstm_params(rng, input_dim, hidden_dim):
    """Glorot weights; forget-gate bias starts at +1.0, other biases at 0."""
    def w(r, c, tag):
        return init_glorot(rng.child(tag), r, c)

    h = hidden_dim
    return LstmParams(
        w_xi=w(input_dim, h, "w_xi"), u_hi=w(h, h, "u_hi"), b_i=np.zeros(h, dtype=DTYPE),
        w_xf=w(input_dim, h, "w_xf"), u_hf=w(h, h, "u_hf"), b_f=np.ones(h, dtype=DTYPE),
        w_xo=w(input_dim, h, "w_xo"), u_ho=w(h, h, "u_ho"), b_o=np.zeros(h, dtype=DTYPE),
        w_xc=w(input_dim, h, "w_xc"), u_hc=w(h, h, "u_hc"), b_c=np.zeros(h, dtype=DTYPE),
    )


def init_gru_params(rng, input_dim, hidden_dim):
    def w(r, c, tag):
        return init_glorot(rng.child(tag), r, c)

    h = hidden_dim
    return GruParams(
        w_r=w(input_dim, h, "w_r"), u_r=w(h, h, "u_r"), b_r=np.zeros(h, dtype=DTYPE),
        w_z=w(input_dim, h, "w_z"), u_z=w(h, h, "u_z"), b_z=np.zeros(h, dtype=DTYPE),
        w_h=w(input_dim, h, "w_h"), u_h=w(h, h, "u_h"), b_h=np.zeros(h, dtype=DTYPE),
    )


def init_mgru_params(rng, input_dim, hidden_dim):
    def w(r, c, tag):
        return init_glorot(rng.child(tag), r, c)

    h = hidden_dim
    return MGruParams(
        w_z=w(input_dim, h, "w_z"), u_z=w(h, h, "u_z"), b_z=np.zeros(h, dtype=DTYPE),
        w_h=w(input_dim, h, "w_h"), u_h=w(h, h, "u_h"), b_h=np.zeros(h, dtype=DTYPE),
    )


def init_ff_params(rng, input_dim, hidden_dim):
    return FfParams(w=init_glorot(rng.child("w"), input_dim, hidden_dim),
                    b=np.zeros(hidden_dim, dtype=DTYPE))


def init_cell_params(kind, rng, input_dim, hidden_dim):
    if kind == CellKind.LSTM:
        return init_lstm_params(rng, input_dim, hidden_dim)
    if kind in (CellKind.GRU, CellKind.RELU_GRU):
        return init_gru_params(rng, input_dim, hidden_dim)
    if kind == CellKind.M_RELU_GRU:
        return init_mgru_params(rng, input_dim, hidden_dim)
    if kind == CellKind.FF_RELU:
        return init_ff_params(rng, input_dim, hidden_dim)
    raise ValueError(f"unknown cell kind {kind}")


@dataclass
class CellState:
    """Hidden state of one cell: h always, c only for LSTM."""
    h: np.ndarray
    c: np.ndarray | None = None


@dataclass
class TapeStep:
    """Everything the backward pass needs for one timestep.

    Unused fields stay None (e.g. no gates for a feed-forward layer, no
    cell state outside LSTM).  Replaying the forward step from the tape
    reproduces the stored h and c bit-exactly.
    """
    x: np.ndarray
    h_prev: np.ndarray | None = None
    c_prev: np.ndarray | None = None
    i: np.ndarray | None = None
    f: np.ndarray | None = None
    o: np.ndarray | None = None
    g: np.ndarray | None = None          # LSTM candidate tanh(a_c)
    tanh_c: np.ndarray | None = None
    r: np.ndarray | None = None
    z: np.ndarray | None = None
    cand: np.ndarray | None = None       # GRU-family candidate
    pre_cand: np.ndarray | None = None   # candidate pre-activation
    pre: np.ndarray | None = None        # FF pre-activation
    h: np.ndarray | None = None
    c: np.ndarray | None = None


def _as_batch(x):
    x = np.asarray(x, dtype=DTYPE)
    if x.ndim == 1:
        x = x[None, :]
    require(x.ndim == 2, f"expected vector or (batch, dim) matrix, got shape {x.shape}")
    return x


def hidden_dim_of(kind, params):
    if kind == CellKind.FF_RELU:
        return params.b.shape[0]
    if kind == CellKind.LSTM:
        return params.b_i.shape[0]
    return params.b_h.shape[0]


def input_dim_of(kind, params):
    if kind == CellKind.FF_RELU:
        return params.w.shape[0]
    if kind == CellKind.LSTM:
        return params.w_xi.shape[0]
    return params.w_z.shape[0]


def initial_state(kind, batch, hidden_dim):
    h = np.zeros((batch, hidden_dim), dtype=DTYPE)
    c = np.zeros((batch, hidden_dim), dtype=DTYPE) if kind == CellKind.LSTM else None
    return CellState(h=h, c=c)


def _lstm_step(p, x, h_prev, c_prev):
    i = sigmoid(_dot(x, p.w_xi) + _dot(h_prev, p.u_hi) + p.b_i)
    f = sigmoid(_dot(x, p.w_xf) + _dot(h_prev, p.u_hf) + p.b_f)
    o = sigmoid(_dot(x, p.w_xo) + _dot(h_prev, p.u_ho) + p.b_o)
    g = np.tanh(_dot(x, p.w_xc) + _dot(h_prev, p.u_hc) + p.b_c)
    c = f * c_prev + i * g
    tanh_c = np.tanh(c)
    h = o * tanh_c
    tape = TapeStep(x=x, h_prev=h_prev, c_prev=c_prev, i=i, f=f, o=o, g=g,
                    tanh_c=tanh_c, h=h, c=c)
    return h, c, tape


def _gru_step(p, x, h_prev, cand_act):
    r = sigmoid(_dot(x, p.w_r) + _dot(h_prev, p.u_r) + p.b_r)
    z = sigmoid(_dot(x, p.w_z) + _dot(h_prev, p.u_z) + p.b_z)
    pre = _dot(x, p.w_h) + _dot(r * h_prev, p.u_h) + p.b_h
    cand = cand_act(pre)
    h = (1.0 - z) * h_prev + z * cand
    tape = TapeStep(x=x, h_prev=h_prev, r=r, z=z, cand=cand, pre_cand=pre, h=h)
    return h, tape


def _mgru_step(p, x, h_prev):
    z = sigmoid(_dot(x, p.w_z) + _dot(h_prev, p.u_z) + p.b_z)
    pre = _dot(x, p.w_h) + _dot(h_prev, p.u_h) + p.b_h
    cand = relu(pre)
    h = (1.0 - z) * h_prev + z * cand
    tape = TapeStep(x=x, h_prev=h_prev, z=z, cand=cand, pre_cand=pre, h=h)
    return h, tape


def cell_forward(kind, params, x_t, state):
    """One timestep of one cell; returns the new state and the tape entry."""
    x_t = _as_batch(x_t)
    h_prev = _as_batch(state.h)
    if kind == CellKind.LSTM:
        require(state.c is not None, "LSTM state needs a cell vector")
        h, c, tape = _lstm_step(params, x_t, h_prev, _as_batch(state.c))
        return CellState(h=h, c=c), tape
    if kind == CellKind.GRU:
        h, tape = _gru_step(params, x_t, h_prev, np.tanh)
        return CellState(h=h), tape
    if kind == CellKind.RELU_GRU:
        h, tape = _gru_step(params, x_t, h_prev, relu)
        return CellState(h=h), tape
    if kind == CellKind.M_RELU_GRU:
        h, tape = _mgru_step(params, x_t, h_prev)
        return CellState(h=h), tape
    if kind == CellKind.FF_RELU:
        pre = _dot(x_t, params.w) + params.b
        h = relu(pre)
        return CellState(h=h), TapeStep(x=x_t, pre=pre, h=h)
    raise ValueError(f"unknown cell kind {kind}")


def replay_step(kind, params, tape):
    """Recompute (h, c) from a tape entry's inputs; used to validate tapes."""
    state = CellState(h=tape.h_prev if tape.h_prev is not None else tape.x * 0.0,
                      c=tape.c_prev)
    new_state, _ = cell_forward(kind, params, tape.x, state)
    return new_state.h, new_state.c


def layer_forward(kind, params, xs, state=None):
    """Run one layer over a full sequence.

    xs is (T, batch, dim).  Returns the (T, batch, hidden) outputs, the
    tape (list of TapeStep), and the final state.
    """
    xs = np.asarray(xs, dtype=DTYPE)
    require(xs.ndim == 3, f"expected (T, batch, dim) input, got shape {xs.shape}")
    T, batch, _ = xs.shape
    hidden = hidden_dim_of(kind, params)
    if state is None:
        state = initial_state(kind, batch, hidden)
    hs = np.empty((T, batch, hidden), dtype=DTYPE)
    tape = []
    for t in range(T):
        state, step = cell_forward(kind, params, xs[t], state)
        hs[t] = state.h
        tape.append(step)
    return hs, tape, state


def _lstm_backward(p, tape, grad_h_seq):
    grads = zero_like_params(p)
    T = len(tape)
    batch, hidden = tape[0].h.shape
    grad_x_seq = np.zeros((T, batch, p.w_xi.shape[0]), dtype=DTYPE)
    dh_carry = np.zeros((batch, hidden), dtype=DTYPE)
    dc_carry = np.zeros((batch, hidden), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        s = tape[t]
        dh = grad_h_seq[t] + dh_carry
        do = dh * s.tanh_c
        dao = do * s.o * (1.0 - s.o)
        dc = dh * s.o * (1.0 - s.tanh_c ** 2) + dc_carry
        df = dc * s.c_prev
        daf = df * s.f * (1.0 - s.f)
        di = dc * s.g
        dai = di * s.i * (1.0 - s.i)
        dg = dc * s.i
        dag = dg * (1.0 - s.g ** 2)
        dc_carry = dc * s.f

        grads.w_xi += _dot(s.x.T, dai)
        grads.u_hi += _dot(s.h_prev.T, dai)
        grads.b_i += dai.sum(axis=0)
        grads.w_xf += _dot(s.x.T, daf)
        grads.u_hf += _dot(s.h_prev.T, daf)
        grads.b_f += daf.sum(axis=0)
        grads.w_xo += _dot(s.x.T, dao)
        grads.u_ho += _dot(s.h_prev.T, dao)
        grads.b_o += dao.sum(axis=0)
        grads.w_xc += _dot(s.x.T, dag)
        grads.u_hc += _dot(s.h_prev.T, dag)
        grads.b_c += dag.sum(axis=0)

        grad_x_seq[t] = (_dot(dai, p.w_xi.T) + _dot(daf, p.w_xf.T)
                         + _dot(dao, p.w_xo.T) + _dot(dag, p.w_xc.T))
        dh_carry = (_dot(dai, p.u_hi.T) + _dot(daf, p.u_hf.T)
                    + _dot(dao, p.u_ho.T) + _dot(dag, p.u_hc.T))
    return grads, grad_x_seq, dh_carry


def _gru_backward(p, tape, grad_h_seq, cand_is_relu):
    grads = zero_like_params(p)
    T = len(tape)
    batch, hidden = tape[0].h.shape
    grad_x_seq = np.zeros((T, batch, p.w_z.shape[0]), dtype=DTYPE)
    dh_carry = np.zeros((batch, hidden), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        s = tape[t]
        dh = grad_h_seq[t] + dh_carry
        dz = dh * (s.cand - s.h_prev)
        daz = dz * s.z * (1.0 - s.z)
        dcand = dh * s.z
        if cand_is_relu:
            dpre = dcand * (s.pre_cand > 0.0)
        else:
            dpre = dcand * (1.0 - s.cand ** 2)
        dh_prev = dh * (1.0 - s.z)

        drh = _dot(dpre, p.u_h.T)          # grad w.r.t. (r * h_prev)
        dr = drh * s.h_prev
        dh_prev += drh * s.r
        dar = dr * s.r * (1.0 - s.r)

        grads.w_r += _dot(s.x.T, dar)
        grads.u_r += _dot(s.h_prev.T, dar)
        grads.b_r += dar.sum(axis=0)
        grads.w_z += _dot(s.x.T, daz)
        grads.u_z += _dot(s.h_prev.T, daz)
        grads.b_z += daz.sum(axis=0)
        grads.w_h += _dot(s.x.T, dpre)
        grads.u_h += _dot((s.r * s.h_prev).T, dpre)
        grads.b_h += dpre.sum(axis=0)

        grad_x_seq[t] = (_dot(dar, p.w_r.T) + _dot(daz, p.w_z.T)
                         + _dot(dpre, p.w_h.T))
        dh_carry = dh_prev + _dot(dar, p.u_r.T) + _dot(daz, p.u_z.T)
    return grads, grad_x_seq, dh_carry


def _mgru_backward(p, tape, grad_h_seq):
    grads = zero_like_params(p)
    T = len(tape)
    batch, hidden = tape[0].h.shape
    grad_x_seq = np.zeros((T, batch, p.w_z.shape[0]), dtype=DTYPE)
    dh_carry = np.zeros((batch, hidden), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        s = tape[t]
        dh = grad_h_seq[t] + dh_carry
        dz = dh * (s.cand - s.h_prev)
        daz = dz * s.z * (1.0 - s.z)
        dpre = dh * s.z * (s.pre_cand > 0.0)
        dh_prev = dh * (1.0 - s.z)

        grads.w_z += _dot(s.x.T, daz)
        grads.u_z += _dot(s.h_prev.T, daz)
        grads.b_z += daz.sum(axis=0)
        grads.w_h += _dot(s.x.T, dpre)
        grads.u_h += _dot(s.h_prev.T, dpre)
        grads.b_h += dpre.sum(axis=0)

        grad_x_seq[t] = _dot(daz, p.w_z.T) + _dot(dpre, p.w_h.T)
        dh_carry = dh_prev + _dot(daz, p.u_z.T) + _dot(dpre, p.u_h.T)
    return grads, grad_x_seq, dh_carry


def _ff_backward(p, tape, grad_h_seq):
    grads = zero_like_params(p)
    T = len(tape)
    batch = tape[0].x.shape[0]
    grad_x_seq = np.zeros((T, batch, p.w.shape[0]), dtype=DTYPE)
    for t in range(T - 1, -1, -1):
        s = tape[t]
        da = grad_h_seq[t] * (s.pre > 0.0)
        grads.w += _dot(s.x.T, da)
        grads.b += da.sum(axis=0)
        grad_x_seq[t] = _dot(da, p.w.T)
    return grads, grad_x_seq, None


def cell_backward(kind, params, tape, grad_h_seq):
    """Exact BPTT over a full sequence for one layer.

    grad_h_seq is (T, batch, hidden): the loss gradient arriving at each
    step's output from above (zero rows for steps without loss).  Returns
    (parameter gradients, per-step input gradients, gradient w.r.t. the
    initial hidden state, or None for feed-forward layers).
    """
    grad_h_seq = np.asarray(grad_h_seq, dtype=DTYPE)
    require(len(tape) == grad_h_seq.shape[0],
            f"tape length {len(tape)} != gradient sequence length {grad_h_seq.shape[0]}")
    if kind == CellKind.LSTM:
        return _lstm_backward(params, tape, grad_h_seq)
    if kind in (CellKind.GRU, CellKind.RELU_GRU):
        return _gru_backward(params, tape, grad_h_seq, kind == CellKind.RELU_GRU)
    if kind == CellKind.M_RELU_GRU:
        return _mgru_backward(params, tape, grad_h_seq)
    if kind == CellKind.FF_RELU:
        return _ff_backward(params, tape, grad_h_seq)
    raise ValueError(f"unknown cell kind {kind}")


def dropout(rng, x, p, training):
    """Inverted dropout: zero entries with probability p and scale
    survivors by 1/(1-p) during training; identity at inference."""
    y, _ = dropout_with_mask(rng, x, p, training)
    return y


def dropout_with_mask(rng, x, p, training):
    """Like :func:`dropout` but also returns the scaled keep mask, which is
    exactly the local gradient of the operation."""
    require(0.0 <= p < 1.0, f"dropout probability must be in [0, 1), got {p}")
    x = np.asarray(x, dtype=DTYPE)
    if not training or p == 0.0:
        return x, np.ones_like(x)
    keep = (rng.uniform(0.0, 1.0, x.shape) >= p).astype(DTYPE)
    mask = keep / (1.0 - p)
    return x * mask, mask


def ff_layer_forward(weights, bias, x):
    """relu(x @ W + b) for a batch of row vectors."""
    x = _as_batch(x)
    return relu(_dot(x, weights) + np.asarray(bias, dtype=DTYPE))
