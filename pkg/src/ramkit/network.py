"""Network-level model: a stack of cells plus a softmax output layer.

Default topologies follow the two reference setups: feed-forward nets
use 8 hidden layers of 2048 relu units over 11 stacked frames, recurrent
nets use 4 layers of 1024 units with an output delay of 5 frames.  All
dimensions scale down for desk-size runs.

Model file format ("RAM-CELL"): magic, u8 architecture code, six u32
fields (input_dim, hidden_dim, num_layers, output_dim, output_delay,
frame_context), then every parameter matrix in canonical order (layer 0
first, fields in declaration order, biases as 1xN matrices), and finally
the output layer w_out, b_out.  All matrices use the "RAM1" block format.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cells
from .cells import CellKind, CellState, TapeStep
from .cells import _dot
from .numerics import DTYPE, init_glorot, read_matrix, require, softmax_rows, write_matrix

MODEL_MAGIC = b"RAM-CELL"

_KIND_CODES = {
    CellKind.FF_RELU: 0,
    CellKind.LSTM: 1,
    CellKind.GRU: 2,
    CellKind.RELU_GRU: 3,
    CellKind.M_RELU_GRU: 4,
}
_CODE_KINDS = {v: k for k, v in _KIND_CODES.items()}

FF_DEFAULT_LAYERS = 8
FF_DEFAULT_HIDDEN = 2048
RNN_DEFAULT_LAYERS = 4
RNN_DEFAULT_HIDDEN = 1024
RNN_DEFAULT_DELAY = 5
FF_DEFAULT_CONTEXT = 11


@dataclass
class NetworkModel:
    kind: CellKind
    layers: list
    w_out: np.ndarray
    b_out: np.ndarray
    input_dim: int
    hidden_dim: int
    num_layers: int
    output_dim: int
    output_delay: int = 0
    frame_context: int = 1


def build_network(kind, input_dim, output_dim, hidden_dim=None, num_layers=None,
                  output_delay=None, frame_context=None, rng=None):
    """Create a freshly initialized model; defaults depend on the kind."""
    kind = CellKind(kind)
    if kind == CellKind.FF_RELU:
        hidden_dim = FF_DEFAULT_HIDDEN if hidden_dim is None else hidden_dim
        num_layers = FF_DEFAULT_LAYERS if num_layers is None else num_layers
        output_delay = 0 if output_delay is None else output_delay
        frame_context = FF_DEFAULT_CONTEXT if frame_context is None else frame_context
    else:
        hidden_dim = RNN_DEFAULT_HIDDEN if hidden_dim is None else hidden_dim
        num_layers = RNN_DEFAULT_LAYERS if num_layers is None else num_layers
        output_delay = RNN_DEFAULT_DELAY if output_delay is None else output_delay
        frame_context = 1 if frame_context is None else frame_context
    require(num_layers >= 1, "need at least one layer")
    layers = []
    for k in range(num_layers):
        in_dim = input_dim if k == 0 else hidden_dim
        layers.append(cells.init_cell_params(kind, rng.child("layer", k), in_dim, hidden_dim))
    w_out = init_glorot(rng.child("out"), hidden_dim, output_dim)
    b_out = np.zeros(output_dim, dtype=DTYPE)
    return NetworkModel(kind=kind, layers=layers, w_out=w_out, b_out=b_out,
                        input_dim=input_dim, hidden_dim=hidden_dim,
                        num_layers=num_layers, output_dim=output_dim,
                        output_delay=output_delay, frame_context=frame_context)


def model_param_items(model):
    """All trainable (name, array) pairs in canonical order."""
    items = []
    for k, layer in enumerate(model.layers):
        for name, a in cells.param_items(layer):
            items.append((f"layer{k}.{name}", a))
    items.append(("w_out", model.w_out))
    items.append(("b_out", model.b_out))
    return items


def clone_model(model):
    return NetworkModel(
        kind=model.kind,
        layers=[cells.clone_params(p) for p in model.layers],
        w_out=model.w_out.copy(), b_out=model.b_out.copy(),
        input_dim=model.input_dim, hidden_dim=model.hidden_dim,
        num_layers=model.num_layers, output_dim=model.output_dim,
        output_delay=model.output_delay, frame_context=model.frame_context)


@dataclass
class NetTape:
    layer_tapes: list              # per layer: list[TapeStep]
    dropout_masks: list            # per layer: (T, batch, hidden) scaled mask
    last_hidden: np.ndarray        # (T, batch, hidden) input to the output layer
    probs: np.ndarray              # (T, batch, output)


def network_forward(model, xs, training=False, dropout_p=0.0, rng=None):
    """Forward through the stack and softmax output.

    xs is (T, batch, input_dim).  During training a dropout mask is drawn
    for each layer's output.  Returns (probs, tape).
    """
    xs = np.asarray(xs, dtype=DTYPE)
    require(xs.ndim == 3, f"expected (T, batch, dim) input, got shape {xs.shape}")
    require(xs.shape[2] == model.input_dim,
            f"input dim {xs.shape[2]} != model input dim {model.input_dim}")
    T, batch, _ = xs.shape
    h = xs
    layer_tapes = []
    masks = []
    for k, layer in enumerate(model.layers):
        h, tape, _ = cells.layer_forward(model.kind, layer, h)
        if training and dropout_p > 0.0:
            h, mask = cells.dropout_with_mask(rng.child("dropout", k), h, dropout_p, True)
        else:
            mask = None
        layer_tapes.append(tape)
        masks.append(mask)
    flat = h.reshape(T * batch, model.hidden_dim)
    logits = _dot(flat, model.w_out) + model.b_out
    probs = softmax_rows(logits).reshape(T, batch, model.output_dim)
    return probs, NetTape(layer_tapes=layer_tapes, dropout_masks=masks,
                          last_hidden=h, probs=probs)


def masked_loss_and_grad(probs, targets, mask):
    """Mean masked cross-entropy and its gradient w.r.t. the logits.

    targets is (T, batch) int, mask (T, batch) with 1 for scored frames.
    The loss is the sum over scored frames of -log p(target) divided by
    the number of scored frames; the returned gradient is (probs - onehot)
    scaled by mask / n_scored.
    """
    T, batch, n_out = probs.shape
    targets = np.asarray(targets)
    mask = np.asarray(mask, dtype=DTYPE)
    n_valid = mask.sum()
    require(n_valid > 0, "no scored frames in batch")
    safe_targets = np.where(mask > 0, targets, 0).astype(np.intp)
    require(bool(np.all((safe_targets >= 0) & (safe_targets < n_out))),
            "target label out of range")
    p_target = np.take_along_axis(probs, safe_targets[:, :, None], axis=2)[:, :, 0]
    loss = float((mask * -np.log(np.maximum(p_target, 1e-30))).sum() / n_valid)
    grad = probs.copy()
    flat = grad.reshape(T * batch, n_out)
    flat[np.arange(T * batch), safe_targets.reshape(-1)] -= 1.0
    grad *= (mask / n_valid)[:, :, None]
    return loss, grad


def network_backward(model, tape, grad_logits):
    """Backpropagate a (T, batch, output) logit gradient through the net.

    Returns gradients as a dict keyed like :func:`model_param_items`.
    """
    T, batch, _ = grad_logits.shape
    flat_h = tape.last_hidden.reshape(T * batch, model.hidden_dim)
    flat_g = np.asarray(grad_logits, dtype=DTYPE).reshape(T * batch, model.output_dim)
    grads = {"w_out": _dot(flat_h.T, flat_g), "b_out": flat_g.sum(axis=0)}
    grad_h = _dot(flat_g, model.w_out.T).reshape(T, batch, model.hidden_dim)
    for k in range(model.num_layers - 1, -1, -1):
        mask = tape.dropout_masks[k]
        if mask is not None:
            grad_h = grad_h * mask
        layer_grads, grad_h, _ = cells.cell_backward(
            model.kind, model.layers[k], tape.layer_tapes[k], grad_h)
        for name, a in cells.param_items(layer_grads):
            grads[f"layer{k}.{name}"] = a
    return grads


def _write_array(fh, a):
    a = np.asarray(a, dtype=DTYPE)
    if a.ndim == 1:
        a = a[None, :]
    write_matrix(fh, a)


def save_model(path, model):
    with open(path, "wb") as fh:
        fh.write(MODEL_MAGIC)
        fh.write(struct.pack("<BIIIIII", _KIND_CODES[model.kind], model.input_dim,
                             model.hidden_dim, model.num_layers, model.output_dim,
                             model.output_delay, model.frame_context))
        for _, a in model_param_items(model):
            _write_array(fh, a)


def load_model(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(MODEL_MAGIC))
        require(magic == MODEL_MAGIC, f"bad model magic {magic!r}")
        code, input_dim, hidden_dim, num_layers, output_dim, delay, context = \
            struct.unpack("<BIIIIII", fh.read(25))
        require(code in _CODE_KINDS, f"unknown architecture code {code}")
        kind = _CODE_KINDS[code]
        cls = cells.PARAM_CLASSES[kind]
        layers = []
        for _ in range(num_layers):
            loaded = {}
            for name in cells.param_field_names(kind):
                m = read_matrix(fh)
                loaded[name] = m[0] if name.startswith("b") else m
            layers.append(cls(**loaded))
        w_out = read_matrix(fh)
        b_out = read_matrix(fh)[0]
    return NetworkModel(kind=kind, layers=layers, w_out=w_out, b_out=b_out,
                        input_dim=input_dim, hidden_dim=hidden_dim,
                        num_layers=num_layers, output_dim=output_dim,
                        output_delay=delay, frame_context=context)
