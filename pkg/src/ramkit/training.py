"""Staged optimization with early stopping on the development criterion.

The two preset schedules mirror the reference recipes: feed-forward nets
run three SGD-momentum stages (lr 1e-2 / 4e-3 / 1e-4, batch 256 / 1024 /
2048, momentum 0.9 throughout); recurrent nets run one Adam stage (batch
512) followed by three SGD-momentum stages (batch 128, lr 1e-3 / 1e-4 /
1e-5).  Each stage runs epochs until the development cross-entropy fails
to improve on the previous epoch, then hands the best weights seen in
that stage to the next one.

The development criterion is cross-entropy, not error rate: training
targets are frame labels and decoding every epoch would dominate the
runtime.  The Adam stage uses lr 1e-3.

Recurrent batches are formed over whole utterances grouped by similar
length and zero-padded to the longest sequence in the batch; padded
frames carry no loss.  Feed-forward batches are formed over shuffled
frames.  Batch composition is a deterministic function of the seed.

Output delay: with delay d the label of frame t is scored against the
network output at frame t + d; each utterance's input is extended by d
copies of its final frame so every label has an output to meet.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import cells, network
from .network import NetworkModel, clone_model, masked_loss_and_grad, model_param_items, network_backward, network_forward
from .numerics import DTYPE, Rng, require

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


@dataclass
class Stage:
    optimizer: str            # "sgd" or "adam"
    learning_rate: float
    batch_size: int
    momentum: float = 0.9


def ff_schedule():
    return [Stage("sgd", 1e-2, 256), Stage("sgd", 4e-3, 1024), Stage("sgd", 1e-4, 2048)]


def rnn_schedule(adam_lr=1e-3):
    return [Stage("adam", adam_lr, 512), Stage("sgd", 1e-3, 128),
            Stage("sgd", 1e-4, 128), Stage("sgd", 1e-5, 128)]


def schedule_for(kind, adam_lr=1e-3):
    return ff_schedule() if cells.CellKind(kind) == cells.CellKind.FF_RELU else rnn_schedule(adam_lr)


@dataclass
class OptimizerState:
    """Per-parameter slots mirroring the parameter list shapes."""
    velocity: list | None = None      # SGD
    m: list | None = None             # Adam first moment
    v: list | None = None             # Adam second moment
    step: int = 0


def init_sgd_state(params):
    return OptimizerState(velocity=[np.zeros_like(p) for p in params])


def init_adam_state(params):
    return OptimizerState(m=[np.zeros_like(p) for p in params],
                          v=[np.zeros_like(p) for p in params], step=0)


def sgd_momentum_step(params, grads, state, lr, momentum):
    """v <- momentum * v - lr * g; theta <- theta + v.  In place."""
    require(len(params) == len(grads) == len(state.velocity), "parameter list mismatch")
    for p, g, v in zip(params, grads, state.velocity):
        require(p.shape == g.shape, f"shape mismatch {p.shape} vs {g.shape}")
        v *= momentum
        v -= lr * g
        p += v
    return params, state


def adam_step(params, grads, state, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """Standard Adam with bias correction.  In place."""
    require(len(params) == len(grads) == len(state.m), "parameter list mismatch")
    state.step += 1
    t = state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        require(p.shape == g.shape, f"shape mismatch {p.shape} vs {g.shape}")
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1 ** t)
        v_hat = v / (1.0 - beta2 ** t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params, state


def stack_frames(frames, context):
    """Concatenate each frame with its neighbours: frame t becomes the
    row [x(t-c), ..., x(t), ..., x(t+c)] for context 2c+1, with edges
    padded by repeating the boundary frame."""
    frames = np.asarray(frames, dtype=DTYPE)
    require(frames.ndim == 2 and frames.shape[0] >= 1, "need a nonempty (T, dim) matrix")
    require(context >= 1 and context % 2 == 1, f"context must be odd, got {context}")
    if context == 1:
        return frames.copy()
    T = frames.shape[0]
    half = context // 2
    cols = []
    for off in range(-half, half + 1):
        idx = np.clip(np.arange(T) + off, 0, T - 1)
        cols.append(frames[idx])
    return np.concatenate(cols, axis=1)


def _delayed_inputs_targets(utt_frames, utt_labels, delay):
    """Extend the input by `delay` copies of the final frame and build the
    per-step target/mask arrays (targets align label t with output t+delay)."""
    T = utt_frames.shape[0]
    if delay > 0:
        pad = np.repeat(utt_frames[-1:], delay, axis=0)
        xs = np.concatenate([utt_frames, pad], axis=0)
    else:
        xs = utt_frames
    total = T + delay
    targets = np.zeros(total, dtype=np.intp)
    mask = np.zeros(total, dtype=DTYPE)
    if utt_labels is not None:
        targets[delay:delay + T] = utt_labels
        mask[delay:delay + T] = 1.0
    return xs, targets, mask


def _sequence_batches(utterances, batch_size):
    """Group utterances of similar length: stable sort by (length, id),
    then slice consecutive runs of `batch_size` utterances."""
    order = sorted(range(len(utterances)),
                   key=lambda k: (utterances[k].frames.shape[0], utterances[k].utt_id))
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def _assemble_sequence_batch(utterances, idx, delay):
    """Pad a batch of utterances to a common length.  Returns xs
    (T, B, dim), targets (T, B), mask (T, B)."""
    members = [utterances[k] for k in idx]
    prepared = [_delayed_inputs_targets(u.frames, u.labels, delay) for u in members]
    T = max(x.shape[0] for x, _, _ in prepared)
    B = len(members)
    dim = members[0].frames.shape[1]
    xs = np.zeros((T, B, dim), dtype=DTYPE)
    targets = np.zeros((T, B), dtype=np.intp)
    mask = np.zeros((T, B), dtype=DTYPE)
    for b, (x, tg, mk) in enumerate(prepared):
        xs[:x.shape[0], b] = x
        targets[:x.shape[0], b] = tg
        mask[:x.shape[0], b] = mk
    return xs, targets, mask


def _frame_dataset(utterances):
    frames = np.concatenate([u.frames for u in utterances], axis=0)
    labels = np.concatenate([np.asarray(u.labels, dtype=np.intp) for u in utterances])
    return frames, labels


@dataclass
class EpochLog:
    stage: int
    epoch: int
    train_loss: float
    dev_loss: float


def evaluate_loss(model, utterances, batch_size=64):
    """Mean masked cross-entropy over a utterance list (no dropout)."""
    total = 0.0
    n = 0.0
    for idx in _sequence_batches(utterances, batch_size):
        xs, targets, mask = _assemble_sequence_batch(utterances, idx, model.output_delay)
        probs, _ = network_forward(model, xs)
        loss, _ = masked_loss_and_grad(probs, targets, mask)
        total += loss * mask.sum()
        n += mask.sum()
    return total / n


def _train_epoch_rnn(model, utterances, stage, opt_state, rng, dropout_p, epoch_tag):
    params = [a for _, a in model_param_items(model)]
    names = [n for n, _ in model_param_items(model)]
    batches = _sequence_batches(utterances, stage.batch_size)
    order = rng.child("batch-order", epoch_tag).permutation(len(batches))
    total_loss = 0.0
    total_frames = 0.0
    for step_no, bi in enumerate(order):
        idx = batches[bi]
        xs, targets, mask = _assemble_sequence_batch(utterances, idx, model.output_delay)
        drop_rng = rng.child("dropout", epoch_tag, step_no)
        probs, tape = network_forward(model, xs, training=True,
                                      dropout_p=dropout_p, rng=drop_rng)
        loss, grad_logits = masked_loss_and_grad(probs, targets, mask)
        grads_dict = network_backward(model, tape, grad_logits)
        grads = [grads_dict[n] for n in names]
        _apply_step(params, grads, stage, opt_state)
        total_loss += loss * mask.sum()
        total_frames += mask.sum()
    return total_loss / total_frames


def _train_epoch_ff(model, frames, labels, stage, opt_state, rng, dropout_p, epoch_tag):
    params = [a for _, a in model_param_items(model)]
    names = [n for n, _ in model_param_items(model)]
    n_frames = frames.shape[0]
    perm = rng.child("frame-order", epoch_tag).permutation(n_frames)
    total_loss = 0.0
    for step_no, start in enumerate(range(0, n_frames, stage.batch_size)):
        sel = perm[start:start + stage.batch_size]
        xs = frames[sel][None, :, :]                      # (1, B, dim)
        targets = labels[sel][None, :]
        mask = np.ones_like(targets, dtype=DTYPE)
        drop_rng = rng.child("dropout", epoch_tag, step_no)
        probs, tape = network_forward(model, xs, training=True,
                                      dropout_p=dropout_p, rng=drop_rng)
        loss, grad_logits = masked_loss_and_grad(probs, targets, mask)
        grads_dict = network_backward(model, tape, grad_logits)
        grads = [grads_dict[n] for n in names]
        _apply_step(params, grads, stage, opt_state)
        total_loss += loss * len(sel)
    return total_loss / n_frames


def _apply_step(params, grads, stage, opt_state):
    if stage.optimizer == "adam":
        adam_step(params, grads, opt_state, stage.learning_rate)
    elif stage.optimizer == "sgd":
        sgd_momentum_step(params, grads, opt_state, stage.learning_rate, stage.momentum)
    else:
        raise ValueError(f"unknown optimizer {stage.optimizer!r}")


def train_staged(model, schedule, train_utterances, dev_utterances, rng,
                 dropout_p=0.2, max_epochs_per_stage=100):
    """Run the staged schedule and return (trained model, epoch log).

    Within each stage, epochs run until the development loss fails to
    improve on the previous epoch (a flat loss also stops, so a zero
    learning rate terminates after two epochs).  The stage hands its
    best-so-far weights (including the stage entry point) to the next
    stage.  `max_epochs_per_stage` is a safety valve only; the criterion
    is expected to trigger first.
    """
    require(len(train_utterances) > 0 and len(dev_utterances) > 0,
            "train and dev sets must be nonempty")
    for u in train_utterances:
        require(u.labels is not None, f"utterance {u.utt_id} has no labels")
        require(int(np.max(u.labels)) < model.output_dim,
                f"label out of range in utterance {u.utt_id}")
    model = clone_model(model)
    is_ff = model.kind == cells.CellKind.FF_RELU
    if is_ff:
        frames, labels = _frame_dataset(train_utterances)
    log = []
    for stage_no, stage in enumerate(schedule):
        params = [a for _, a in model_param_items(model)]
        opt_state = init_adam_state(params) if stage.optimizer == "adam" else init_sgd_state(params)
        best_model = clone_model(model)
        best_dev = evaluate_loss(model, dev_utterances)
        prev_dev = None
        for epoch in range(1, max_epochs_per_stage + 1):
            tag = f"s{stage_no}e{epoch}"
            if is_ff:
                train_loss = _train_epoch_ff(model, frames, labels, stage, opt_state,
                                             rng, dropout_p, tag)
            else:
                train_loss = _train_epoch_rnn(model, train_utterances, stage, opt_state,
                                              rng, dropout_p, tag)
            dev_loss = evaluate_loss(model, dev_utterances)
            log.append(EpochLog(stage=stage_no, epoch=epoch,
                                train_loss=train_loss, dev_loss=dev_loss))
            if dev_loss < best_dev:
                best_dev = dev_loss
                best_model = clone_model(model)
            if prev_dev is not None and dev_loss >= prev_dev:
                break
            prev_dev = dev_loss
        model = best_model
    return model, log


def write_training_log(path, log):
    with open(path, "w") as fh:
        fh.write("stage,epoch,train_loss,dev_loss\n")
        for row in log:
            fh.write(f"{row.stage},{row.epoch},{row.train_loss!r},{row.dev_loss!r}\n")
