"""Surrogate-gradient BPTT, ANN training and ANN-to-SNN conversion."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import IO, Sequence

import numpy as np

from . import tensor as tn
from .snn import ANN, NetworkConfig, SpikingNetwork, memory_batch, poisson_encode, surrogate_grad
from .tensor import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "SGD", "step_decay_lr", "bptt_step", "ann_train_step", "convert", "ConversionState",
    "DegenerateThresholdError", "surrogate_grad", "train_snn", "train_ann", "accuracy",
]


class DegenerateThresholdError(RuntimeError):
    """A layer saw no positive pre-activation during threshold balancing."""


class SGD:
    """SGD with momentum and L2 weight decay (PyTorch update convention)."""

    def __init__(self, params: Sequence[Tensor], lr: float = 0.1, momentum: float = 0.9,
                 weight_decay: float = 5e-4):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.buffers: list[np.ndarray | None] = [None] * len(self.params)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, grads: Sequence[np.ndarray]) -> None:
        for i, (p, g) in enumerate(zip(self.params, grads)):
            d = g + self.weight_decay * p.data if self.weight_decay else g
            if self.momentum:
                buf = self.buffers[i]
                buf = d.copy() if buf is None else self.momentum * buf + d
                self.buffers[i] = buf
                d = buf
            p.data = p.data - self.lr * d

    def state_dict(self) -> dict:
        return {"lr": self.lr, "momentum": self.momentum, "weight_decay": self.weight_decay,
                "buffers": [None if b is None else b.copy() for b in self.buffers]}

    def load_state_dict(self, state: dict) -> None:
        self.lr = state["lr"]
        self.momentum = state["momentum"]
        self.weight_decay = state["weight_decay"]
        self.buffers = [None if b is None else np.array(b, dtype=np.float64) for b in state["buffers"]]


def step_decay_lr(base_lr: float, epoch: int, total_epochs: int,
                  milestones: Sequence[float] = (0.5, 0.7, 0.9), factor: float = 0.1) -> float:
    """Learning rate divided by 10 at each milestone fraction of training.

    Milestones never fall on epoch 0, so short runs start at ``base_lr``.
    """
    passed = sum(epoch >= max(1, math.floor(m * total_epochs)) for m in milestones)
    return base_lr * factor ** passed


def _grads_or_abort(loss: Tensor, params: Sequence[Tensor], context: str) -> list[np.ndarray]:
    if not math.isfinite(loss.item()):
        raise FloatingPointError(f"{context}: non-finite loss {loss.item()}")
    try:
        # late-step BNTT scales cannot reach the output through the one-step
        # emission delay, so disconnected parameters are expected here
        return tn.backward(loss, params, report_disconnected=False)
    except tn.NonFiniteError as exc:
        raise FloatingPointError(f"{context}: non-finite gradient ({exc})") from exc


def bptt_step(net: SpikingNetwork, images: np.ndarray, labels: np.ndarray, optimizer: SGD,
              rng: np.random.Generator | None = None, spike_train: np.ndarray | None = None):
    """One surrogate-gradient BPTT update on a batch of [0,255] images.

    The loss is softmax cross-entropy over the accumulated output potentials;
    hidden spikes are differentiated with the piecewise-linear surrogate.
    Returns ``(loss, record)``.
    """
    net.train()
    if spike_train is None:
        spike_train = poisson_encode(images, net.config.num_steps, rng)
    optimizer.zero_grad()
    try:
        record = net.forward(spike_train, rng=rng)
    except tn.NonFiniteError as exc:
        raise FloatingPointError(f"bptt_step forward: {exc}") from exc
    loss = tn.softmax_cross_entropy(record.output_tensor, labels)
    grads = _grads_or_abort(loss, optimizer.params, "bptt_step")
    optimizer.step(grads)
    return loss.item(), record


def ann_train_step(ann: ANN, images: np.ndarray, labels: np.ndarray, optimizer: SGD,
                   rng: np.random.Generator | None = None) -> float:
    ann.train()
    optimizer.zero_grad()
    logits = ann.forward(np.asarray(images, dtype=np.float64) / 255.0, rng=rng)
    loss = tn.softmax_cross_entropy(logits, labels)
    grads = _grads_or_abort(loss, optimizer.params, "ann_train_step")
    optimizer.step(grads)
    return loss.item()


def accuracy(predictions: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(np.asarray(predictions) == np.asarray(labels)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


@dataclass
class TrainResult:
    epochs_run: int
    test_accuracy: list[float] = field(default_factory=list)
    losses: list[float] = field(default_factory=list)


def _log(log: IO[str] | None, **record) -> None:
    if log is not None:
        log.write(json.dumps(record, sort_keys=True) + "\n")


def train_snn(net: SpikingNetwork, train_x, train_y, test_x=None, test_y=None, *,
              epochs: int = 20, batch_size: int = 32, lr: float = 0.1, seed: int = 0,
              optimizer: SGD | None = None, start_epoch: int = 0,
              target_accuracy: float | None = None, log: IO[str] | None = None) -> TrainResult:
    """Epoch loop around :func:`bptt_step` with step-decay learning rate.

    Stops early once ``target_accuracy`` is reached on the test split.
    """
    optimizer = optimizer or SGD(net.parameters(), lr=lr)
    result = TrainResult(0)
    for epoch in range(start_epoch, epochs):
        rng = np.random.default_rng([seed, epoch])
        optimizer.lr = step_decay_lr(lr, epoch, epochs)
        for step, idx in enumerate(_batches(len(train_x), batch_size, rng)):
            loss, record = bptt_step(net, train_x[idx], train_y[idx], optimizer, rng)
            result.losses.append(loss)
            _log(log, epoch=epoch, step=step, loss=loss, lr=optimizer.lr,
                 spikes_per_layer=[float(s.sum()) for s in record.spikes])
        result.epochs_run = epoch + 1
        if test_x is not None:
            net.eval()
            acc = accuracy(net.predict(test_x, seed=[seed, 10_000 + epoch]), test_y)
            result.test_accuracy.append(acc)
            _log(log, epoch=epoch, test_accuracy=acc)
            logger.info("snn epoch %d: test accuracy %.4f", epoch, acc)
            if target_accuracy is not None and acc >= target_accuracy:
                break
    net.eval()
    return result


def train_ann(ann: ANN, train_x, train_y, test_x=None, test_y=None, *, epochs: int = 20,
              batch_size: int = 32, lr: float = 0.05, seed: int = 0,
              target_accuracy: float | None = None, log: IO[str] | None = None) -> TrainResult:
    optimizer = SGD(ann.parameters(), lr=lr)
    result = TrainResult(0)
    for epoch in range(epochs):
        rng = np.random.default_rng([seed, epoch])
        optimizer.lr = step_decay_lr(lr, epoch, epochs)
        for step, idx in enumerate(_batches(len(train_x), batch_size, rng)):
            loss = ann_train_step(ann, train_x[idx], train_y[idx], optimizer, rng)
            result.losses.append(loss)
            _log(log, epoch=epoch, step=step, loss=loss, lr=optimizer.lr)
        result.epochs_run = epoch + 1
        if test_x is not None:
            ann.eval()
            acc = accuracy(ann.predict(test_x), test_y)
            result.test_accuracy.append(acc)
            _log(log, epoch=epoch, test_accuracy=acc)
            if target_accuracy is not None and acc >= target_accuracy:
                break
    ann.eval()
    return result


# ---------------------------------------------------------------------------
# conversion
# ---------------------------------------------------------------------------

@dataclass
class ConversionState:
    """Balanced thresholds (before scaling) and the order they were fixed in."""

    thresholds: list[float]
    scale: float = 1.0
    scan_log: list[tuple[int, int, float]] = field(default_factory=list)  # (layer, step, running max)

    @property
    def scaled_thresholds(self) -> list[float]:
        return [th * self.scale for th in self.thresholds]


def convert(ann: ANN, calibration_images: np.ndarray, num_steps: int, scale: float = 1.0,
            seed: int = 0, batch_size: int = 128, return_state: bool = False):
    """Copy ANN weights into a leak-free SNN and balance thresholds layer by layer.

    For each hidden layer, in input-to-output order, the network (with the
    thresholds already fixed for earlier layers) is simulated on Poisson-coded
    calibration images and the layer's threshold is set to the maximum
    pre-activation seen over every element, time-step and sample. All
    thresholds are then multiplied by ``scale``.
    """
    calibration_images = np.asarray(calibration_images, dtype=np.float64)
    if len(calibration_images) == 0:
        raise ValueError("calibration set must be non-empty")
    if not 0.0 < scale <= 1.0:
        raise ValueError(f"threshold scale must lie in (0, 1], got {scale}")
    src = ann.config
    cfg = NetworkConfig(input_shape=src.input_shape, layers=list(src.layers), num_steps=num_steps,
                        leak=1.0, threshold=1.0, beta=src.beta, bntt=False,
                        dropout=src.dropout, seed=src.seed)
    weights = [Tensor(w.data.copy(), requires_grad=True, name=w.name) for w in ann.weights]
    n_hidden = len(cfg.hidden_layers)
    # layers not yet balanced stay silent; they are never reached during a scan
    snn = SpikingNetwork(cfg, weights=weights, thresholds=[math.inf] * n_hidden).eval()
    state = ConversionState([0.0] * n_hidden, scale)

    for layer in range(n_hidden):
        running = [0.0]

        def probe(k, t, z, layer=layer):
            if k == layer:
                running[0] = max(running[0], float(z.data.max()))
                state.scan_log.append((layer, t, running[0]))

        rng = np.random.default_rng([seed, layer])
        step = memory_batch(batch_size, num_steps, cfg.input_shape)
        with tn.no_grad():
            for s in range(0, len(calibration_images), step):
                train = poisson_encode(calibration_images[s:s + step], num_steps, rng)
                snn.forward(train, probe=probe, stop_after=layer, record=False)
        if not running[0] > 0:
            raise DegenerateThresholdError(f"hidden layer {layer} never received positive input")
        state.thresholds[layer] = running[0]
        snn.thresholds[layer] = running[0]
        logger.info("layer %d threshold %.6g", layer, running[0])

    snn.thresholds = state.scaled_thresholds
    return (snn, state) if return_state else snn
