from __future__ import annotations

import logging

import numpy as np

from fwdadapt import tensor as T
from fwdadapt.autodiff import tape as ops
from fwdadapt.autodiff.tape import Tape, UnsupportedOpError, Var
from fwdadapt.models import ModelGraph, ParamSelection

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    def __init__(self, epoch: int, msg: str):
        super().__init__(f"training diverged at epoch {epoch}: {msg}")
        self.epoch = epoch


def _backward(tape: Tape, out, leaves: dict[str, Var]) -> dict[str, np.ndarray]:
    if not isinstance(out, Var):
        if isinstance(out, (int, float, np.floating)) or (isinstance(out, np.ndarray) and out.size == 1):
            return {k: np.zeros_like(v.data) for k, v in leaves.items()}
        raise UnsupportedOpError(f"loss must be a recorded scalar, got {type(out).__name__}")
    grads = tape.backward(out)
    return {k: (np.zeros_like(v.data) if grads[v.node] is None else grads[v.node]) for k, v in leaves.items()}


def grad(loss_fn, params):
    """Exact reverse-mode gradient of ``loss_fn`` at ``params``.

    ``params`` may be a single array (``loss_fn`` receives one :class:`Var`),
    a dict of arrays (``loss_fn`` receives a dict of Vars, result is a dict),
    or a :class:`ParamSelection` (``loss_fn`` receives a dict of Vars keyed by
    parameter name; the result is the flat gradient in selection order).
    """
    tape = Tape()
    if isinstance(params, ParamSelection):
        leaves = {n: tape.leaf(params.model.params[n]) for n in params.names}
        g = _backward(tape, loss_fn(leaves), leaves)
        return np.concatenate([g[n].ravel() for n in params.names]) if params.names else np.zeros(0)
    if isinstance(params, dict):
        leaves = {k: tape.leaf(v) for k, v in params.items()}
        return _backward(tape, loss_fn(leaves), leaves)
    leaves = {"x": tape.leaf(params)}
    return _backward(tape, loss_fn(leaves["x"]), leaves)["x"]


def model_grad(model: ModelGraph, selection: ParamSelection, objective, x, capture=()):
    """Gradient of ``objective(logits, features)`` w.r.t. the selected norm parameters.

    The objective is evaluated on recorded values; the model itself is only read.
    """

    def loss(values):
        logits, feats = model.forward(x, capture=capture, ops=ops, values=values)
        return objective(logits, feats, ops)

    return grad(loss, selection)


def sgd_train(model: ModelGraph, inputs, labels, epochs: int, lr: float = 0.05, seed: int = 0,
              batch_size: int = 32):
    """Plain minibatch SGD on cross-entropy; returns ``(trained copy, per-epoch log)``."""
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if model.quantized:
        raise UnsupportedOpError("quantized weights are not differentiable; train the float model")
    model = model.copy()
    rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        order = rng.permutation(len(inputs))
        total, correct = 0.0, 0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            tape = Tape()
            leaves = {k: tape.leaf(v) for k, v in model.params.items()}
            try:
                logits, _ = model.forward(inputs[idx], ops=ops, values=leaves)
                loss = ops.cross_entropy(logits, labels[idx])
            except T.NonFiniteError as exc:
                raise TrainingError(epoch, str(exc)) from exc
            grads = _backward(tape, loss, leaves)
            for k, g in grads.items():
                model.params[k] = model.params[k] - lr * g
            total += float(loss.data) * len(idx)
            correct += int((logits.data.argmax(axis=1) == labels[idx]).sum())
        mean_loss = total / len(order)
        if not np.isfinite(mean_loss):
            raise TrainingError(epoch, "loss is not finite")
        history.append({"epoch": epoch, "loss": mean_loss, "accuracy": correct / len(order)})
        log.info("epoch %d loss %.4f acc %.4f", epoch, mean_loss, correct / len(order))
    return model, history
