"""Rate encoding, LIF/BNTT neuron dynamics and time-unrolled execution.

Time convention: at step ``t`` a spiking layer emits ``o = [u_prev > theta]``
computed from its potential *before* the update, then integrates the
current weighted input and soft-resets by ``theta * o``. Layers are swept
input-to-output within one step, so spikes emitted at step ``t`` feed the
next layer's update at the same step.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import tensor as tn
from .tensor import Tensor


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    padding: int = 1


@dataclass(frozen=True)
class Pool:
    size: int = 2


@dataclass(frozen=True)
class Dense:
    out_features: int


LayerSpec = Conv | Pool | Dense
_LAYER_KINDS = {"conv": Conv, "pool": Pool, "dense": Dense}


@dataclass(frozen=True)
class LifParams:
    leak: float = 0.99
    threshold: float = 1.0
    is_output_layer: bool = False

    def __post_init__(self):
        if not 0.0 < self.leak <= 1.0:
            raise ValueError(f"leak must lie in (0, 1], got {self.leak}")
        if self.is_output_layer:
            if self.leak != 1.0:
                raise ValueError("the output layer integrates without leak (leak=1)")
        elif not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")


@dataclass
class NetworkConfig:
    """Layer stack and simulation hyperparameters.

    ``layers`` must end with a :class:`Dense` output layer. Every other
    Conv/Dense layer is followed by (optional) BNTT and a LIF neuron (or ReLU
    in the ANN twin).
    """

    input_shape: tuple[int, int, int]
    layers: list[LayerSpec]
    num_steps: int = 30
    leak: float = 0.99
    threshold: float = 1.0
    beta: float = 0.3
    bntt: bool = True
    bntt_eps: float = 1e-4
    bntt_momentum: float = 0.1
    dropout: float = 0.0
    seed: int = 0

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        self.layers = [_coerce_layer(l) for l in self.layers]
        if self.num_steps < 1:
            raise ValueError(f"num_steps must be >= 1, got {self.num_steps}")
        if self.beta < 0:
            raise ValueError(f"beta must be non-negative, got {self.beta}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError(f"dropout must lie in [0, 1), got {self.dropout}")
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise ValueError("the last layer must be a Dense output layer")
        LifParams(self.leak, self.threshold)
        self.layer_shapes()

    def layer_shapes(self) -> list[tuple[int, ...]]:
        """Output shape (without batch axis) after each layer; validates chaining."""
        shape: tuple[int, ...] = self.input_shape
        shapes = []
        for i, spec in enumerate(self.layers):
            if isinstance(spec, Conv):
                if len(shape) != 3:
                    raise ValueError(f"layer {i}: conv after a flattening layer")
                c, h, w = shape
                oh = tn.conv_output_size(h, spec.kernel, spec.stride, spec.padding)
                ow = tn.conv_output_size(w, spec.kernel, spec.stride, spec.padding)
                if oh < 1 or ow < 1:
                    raise ValueError(f"layer {i}: conv collapses {h}x{w}")
                shape = (spec.out_channels, oh, ow)
            elif isinstance(spec, Pool):
                if len(shape) != 3 or shape[1] % spec.size or shape[2] % spec.size:
                    raise ValueError(f"layer {i}: pool {spec.size} does not tile {shape}")
                shape = (shape[0], shape[1] // spec.size, shape[2] // spec.size)
            else:
                shape = (spec.out_features,)
            shapes.append(shape)
        return shapes

    @property
    def weight_layers(self) -> list[int]:
        return [i for i, s in enumerate(self.layers) if not isinstance(s, Pool)]

    @property
    def hidden_layers(self) -> list[int]:
        """Indices (into ``layers``) of spiking weight layers."""
        return self.weight_layers[:-1]

    @property
    def num_classes(self) -> int:
        return self.layers[-1].out_features

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        d["layers"] = [_layer_to_dict(l) for l in self.layers]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkConfig":
        return cls(**d)


def _layer_to_dict(spec: LayerSpec) -> dict:
    kind = {Conv: "conv", Pool: "pool", Dense: "dense"}[type(spec)]
    return {"kind": kind, **asdict(spec)}


def _coerce_layer(spec) -> LayerSpec:
    if isinstance(spec, (Conv, Pool, Dense)):
        return spec
    spec = dict(spec)
    kind = spec.pop("kind")
    return _LAYER_KINDS[kind](**spec)


def desk_preset(num_classes: int = 4, size: int = 32, channels: int = 1,
                widths: Sequence[int] = (8, 16, 16), **kw) -> NetworkConfig:
    """Three conv/pool blocks and a dense classifier, for 32x32-ish inputs."""
    layers: list[LayerSpec] = []
    for w in widths:
        layers += [Conv(w), Pool(2)]
    layers.append(Dense(num_classes))
    return NetworkConfig(input_shape=(channels, size, size), layers=layers, **kw)


# ---------------------------------------------------------------------------
# encoder and neuron primitives
# ---------------------------------------------------------------------------

def poisson_encode(image: np.ndarray, num_steps: int, seed: int | np.random.Generator | None = None) -> np.ndarray:
    """Bernoulli spike train with per-step firing probability ``pixel / 255``.

    Works on a single image [C,H,W] or a batch [N,C,H,W]; the time axis is
    prepended.
    """
    image = np.asarray(image, dtype=np.float64)
    if num_steps < 1:
        raise ValueError(f"num_steps must be >= 1, got {num_steps}")
    if not np.isfinite(image).all() or image.min() < 0 or image.max() > 255:
        raise ValueError("pixel values must lie in [0, 255]")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    prob = image / 255.0
    return (rng.random((num_steps,) + image.shape) < prob).astype(np.float64)


def lif_step(u_prev: Tensor, weighted_input: Tensor, params: LifParams, beta: float = 0.3):
    """One LIF update. Returns ``(spikes, u_new)``.

    Spikes are decided from ``u_prev``; the output layer never fires and
    returns ``None`` for spikes.
    """
    if u_prev.shape != weighted_input.shape:
        raise tn.ShapeError(f"lif_step: state {u_prev.shape} vs input {weighted_input.shape}")
    if params.is_output_layer:
        return None, tn.add(u_prev, weighted_input)
    theta = params.threshold
    spikes = tn.heaviside_spike(u_prev, theta, lambda u: surrogate_grad(u, theta, beta))
    reset = 0.0 if math.isinf(theta) else theta
    return spikes, tn.lif_update(u_prev, weighted_input, spikes, params.leak, reset)


def surrogate_grad(u, theta: float, beta: float):
    """Piecewise-linear pseudo-derivative ``beta * max(0, 1 - |u - theta| / theta)``."""
    if not theta > 0:
        raise ValueError(f"theta must be positive, got {theta}")
    if math.isinf(theta):
        return np.zeros_like(np.asarray(u, dtype=np.float64))
    return beta * np.maximum(0.0, 1.0 - np.abs(np.asarray(u, dtype=np.float64) - theta) / theta)


@dataclass
class BnttParams:
    """Per-time-step scale and running statistics for one layer."""

    gamma: list[Tensor]
    running_mean: np.ndarray  # [T, C]
    running_var: np.ndarray  # [T, C]
    eps: float = 1e-4
    momentum: float = 0.1

    @classmethod
    def create(cls, num_steps: int, channels: int, eps: float = 1e-4, momentum: float = 0.1):
        gamma = [Tensor(np.ones(channels), requires_grad=True, name=f"bntt_gamma[{t}]")
                 for t in range(num_steps)]
        return cls(gamma, np.zeros((num_steps, channels)), np.ones((num_steps, channels)), eps, momentum)

    @property
    def num_steps(self) -> int:
        return len(self.gamma)


def bntt_apply(x: Tensor, params: BnttParams, t: int, training: bool) -> Tensor:
    """Normalize ``x`` with the statistics and scale of time-step ``t``."""
    if not 0 <= t < params.num_steps:
        raise IndexError(f"time-step {t} outside [0, {params.num_steps})")
    if training:
        if x.shape[0] == 0:
            raise ValueError("training-mode BNTT needs a non-empty batch")
        out, mean, var = tn.batch_norm(x, params.gamma[t], params.eps)
        m = params.momentum
        params.running_mean[t] = (1 - m) * params.running_mean[t] + m * mean
        params.running_var[t] = (1 - m) * params.running_var[t] + m * var
        return out
    out, _, _ = tn.batch_norm(x, params.gamma[t], params.eps,
                              mean=params.running_mean[t], var=params.running_var[t])
    return out


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

def init_weights(config: NetworkConfig, rng: np.random.Generator, output_gain: float = 1.0) -> list[Tensor]:
    """He-normal weights for every Conv/Dense layer, in layer order.

    ``output_gain`` scales the classifier layer; spiking nets pass ``1/T``
    because their logits are potentials summed over all T steps.
    """
    shapes = config.layer_shapes()
    weights = []
    in_shape: tuple[int, ...] = config.input_shape
    for i, spec in enumerate(config.layers):
        if isinstance(spec, Conv):
            fan_in = in_shape[0] * spec.kernel * spec.kernel
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (spec.out_channels, in_shape[0], spec.kernel, spec.kernel))
            weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
        elif isinstance(spec, Dense):
            fan_in = int(np.prod(in_shape))
            w = rng.normal(0.0, math.sqrt(2.0 / fan_in), (spec.out_features, fan_in))
            if i == len(config.layers) - 1:
                w *= output_gain
            weights.append(Tensor(w, requires_grad=True, name=f"w{i}"))
        in_shape = shapes[i]
    return weights


@dataclass
class SpikeRecord:
    """Everything a forward run observed.

    ``spikes[l]`` and ``potentials[l]`` are [T, N, ...] arrays for hidden
    weight layer ``l`` (0-based, in network order); ``output`` holds the
    accumulated output potentials u^T, [N, classes].
    """

    spikes: list[np.ndarray]
    potentials: list[np.ndarray]
    output: np.ndarray
    spike_tensors: list[list[Tensor]] | None = None
    output_tensor: Tensor | None = None

    @property
    def num_steps(self) -> int:
        return self.spikes[0].shape[0] if self.spikes else 0

    @property
    def num_layers(self) -> int:
        return len(self.spikes)

    def prediction(self) -> np.ndarray:
        return self.output.argmax(axis=1)

    def spike_counts(self) -> np.ndarray:
        """Number of spikes per (layer, time-step), summed over batch and neurons."""
        return np.array([[s[t].sum() for t in range(s.shape[0])] for s in self.spikes])

    def normalized_spike_counts(self) -> np.ndarray:
        """Spike counts divided by each layer's peak step count (zeros stay zero)."""
        counts = self.spike_counts()
        peak = counts.max(axis=1, keepdims=True)
        return np.divide(counts, peak, out=np.zeros_like(counts), where=peak > 0)


class SpikingNetwork:
    """Weights, thresholds and BNTT parameters plus the unrolled forward pass."""

    def __init__(self, config: NetworkConfig, weights: list[Tensor] | None = None,
                 thresholds: Sequence[float] | None = None):
        self.config = config
        rng = np.random.default_rng(config.seed)
        self.weights = weights if weights is not None else init_weights(config, rng, 1.0 / config.num_steps)
        n_hidden = len(config.hidden_layers)
        if len(self.weights) != len(config.weight_layers):
            raise ValueError(f"expected {len(config.weight_layers)} weight tensors, got {len(self.weights)}")
        self.thresholds = list(thresholds) if thresholds is not None else [config.threshold] * n_hidden
        if len(self.thresholds) != n_hidden:
            raise ValueError(f"expected {n_hidden} thresholds, got {len(self.thresholds)}")
        shapes = config.layer_shapes()
        self.bntt: list[BnttParams] | None = None
        if config.bntt:
            self.bntt = [BnttParams.create(config.num_steps, shapes[i][0], config.bntt_eps, config.bntt_momentum)
                         for i in config.hidden_layers]
        self.training = False

    def parameters(self) -> list[Tensor]:
        params = list(self.weights)
        if self.bntt:
            for b in self.bntt:
                params.extend(b.gamma)
        return params

    def train(self, mode: bool = True) -> "SpikingNetwork":
        self.training = mode
        return self

    def eval(self) -> "SpikingNetwork":
        return self.train(False)

    def lif_params(self, hidden_index: int) -> LifParams:
        return LifParams(self.config.leak, self.thresholds[hidden_index])

    def forward(self, spike_train: np.ndarray | Tensor, keep_graph: bool = False,
                rng: np.random.Generator | None = None,
                beta: float | None = None, probe=None,
                stop_after: int | None = None, num_steps: int | None = None,
                record: bool = True) -> SpikeRecord:
        """Run all time-steps over a spike train [T, N, C, H, W].

        A :class:`Tensor` of shape [N, C, H, W] is instead fed unchanged at
        every one of ``num_steps`` steps (and can be differentiated through).
        The record always carries the output potential tensor; with
        ``keep_graph`` it also holds the differentiable per-step spike tensors.
        ``probe(k, t, z)`` sees the pre-activation of hidden layer ``k``; with
        ``stop_after`` each step ends right after hidden layer ``stop_after``
        is probed. ``record=False`` skips the per-step spike and potential
        arrays (the record then has empty layer lists).
        """
        cfg = self.config
        if isinstance(spike_train, Tensor):
            static = spike_train
            if static.ndim != 4 or static.shape[1:] != cfg.input_shape:
                raise tn.ShapeError(f"static input {static.shape} does not match [N, {cfg.input_shape}]")
            num_steps = num_steps or cfg.num_steps
            batch = static.shape[0]
        else:
            static = None
            spike_train = np.asarray(spike_train, dtype=np.float64)
            if spike_train.ndim != 5 or spike_train.shape[2:] != cfg.input_shape:
                raise tn.ShapeError(f"spike train {spike_train.shape} does not match [T, N, {cfg.input_shape}]")
            num_steps, batch = spike_train.shape[:2]
        if self.bntt is not None and num_steps > cfg.num_steps:
            raise ValueError(f"BNTT network trained for {cfg.num_steps} steps, got {num_steps}")
        beta = cfg.beta if beta is None else beta
        shapes = cfg.layer_shapes()
        hidden = cfg.hidden_layers
        hidden_pos = {layer: k for k, layer in enumerate(hidden)}

        # with keep_graph the resting potentials are differentiable leaves so
        # that step-0 spikes (which depend on nothing else) still get gradients
        potentials = [Tensor(np.zeros((batch,) + shapes[i]), requires_grad=keep_graph) for i in hidden]
        out_u = Tensor(np.zeros((batch, cfg.num_classes)))
        out_params = LifParams(1.0, math.inf, is_output_layer=True)
        masks = self._dropout_masks(batch, shapes, rng) if self.training and cfg.dropout > 0 else None

        rec_spikes = [np.zeros((num_steps, batch) + shapes[i]) for i in hidden] if record else []
        rec_pot = [np.zeros((num_steps, batch) + shapes[i]) for i in hidden] if record else []
        spike_tensors: list[list[Tensor]] = [[] for _ in hidden]

        for t in range(num_steps):
            x = static if static is not None else Tensor(spike_train[t])
            w_idx = 0
            for i, spec in enumerate(cfg.layers):
                try:
                    if isinstance(spec, Pool):
                        x = tn.avgpool2d(x, spec.size)
                        continue
                    w = self.weights[w_idx]
                    w_idx += 1
                    if isinstance(spec, Dense) and x.ndim > 2:
                        x = tn.flatten(x)
                    z = tn.conv2d(x, w, spec.stride, spec.padding) if isinstance(spec, Conv) else tn.linear(x, w)
                    if i not in hidden_pos:
                        _, out_u = lif_step(out_u, z, out_params)
                        continue
                    k = hidden_pos[i]
                    if probe is not None:
                        probe(k, t, z)
                    if stop_after == k:
                        break
                    if self.bntt is not None:
                        z = bntt_apply(z, self.bntt[k], t, self.training)
                    o, potentials[k] = lif_step(potentials[k], z, self.lif_params(k), beta)
                    if record:
                        rec_spikes[k][t] = o.data
                        rec_pot[k][t] = potentials[k].data
                    if keep_graph:
                        spike_tensors[k].append(o)
                    x = tn.mask(o, masks[k]) if masks is not None else o
                except (tn.ShapeError, tn.NonFiniteError) as exc:
                    raise type(exc)(f"layer {i} ({type(spec).__name__}), step {t}: {exc}") from exc

        return SpikeRecord(rec_spikes, rec_pot, out_u.data.copy(),
                           spike_tensors if keep_graph else None, out_u)

    def _dropout_masks(self, batch, shapes, rng):
        rng = rng if rng is not None else np.random.default_rng(self.config.seed)
        keep = 1.0 - self.config.dropout
        return [(rng.random((batch,) + shapes[i]) < keep) / keep for i in self.config.hidden_layers]

    def predict(self, images: np.ndarray, num_steps: int | None = None,
                seed: int | np.random.Generator | None = 0, batch_size: int = 200) -> np.ndarray:
        """Class predictions for images [N,C,H,W] in [0,255], Poisson-encoded."""
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        num_steps = num_steps or self.config.num_steps
        batch_size = memory_batch(batch_size, num_steps, self.config.input_shape)
        preds = []
        with tn.no_grad():
            for s in range(0, len(images), batch_size):
                train = poisson_encode(images[s:s + batch_size], num_steps, rng)
                preds.append(self.forward(train, record=False).prediction())
        return np.concatenate(preds)


def memory_batch(batch_size: int, num_steps: int, input_shape, budget: float = 2.5e7) -> int:
    """Cap a batch so one float64 spike train stays under ``budget`` elements."""
    per_item = num_steps * int(np.prod(input_shape))
    return max(1, min(batch_size, int(budget // per_item)))


def snn_forward(net: SpikingNetwork, spike_train: np.ndarray, **kw) -> SpikeRecord:
    return net.forward(spike_train, **kw)


class ANN:
    """ReLU twin of a :class:`NetworkConfig` (no normalization layers)."""

    def __init__(self, config: NetworkConfig, weights: list[Tensor] | None = None):
        self.config = config
        self.weights = weights if weights is not None else init_weights(config, np.random.default_rng(config.seed))
        self.training = False

    def parameters(self) -> list[Tensor]:
        return list(self.weights)

    def train(self, mode: bool = True) -> "ANN":
        self.training = mode
        return self

    def eval(self) -> "ANN":
        return self.train(False)

    def forward(self, x: Tensor | np.ndarray, rng: np.random.Generator | None = None,
                capture: int | None = None):
        """Logits for inputs [N,C,H,W] already scaled to [0,1].

        ``capture`` names a hidden layer index (0-based among hidden weight
        layers) whose post-ReLU activation tensor is returned alongside.
        """
        cfg = self.config
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))
        hidden = cfg.hidden_layers
        captured = None
        w_idx = 0
        k = 0
        for i, spec in enumerate(cfg.layers):
            if isinstance(spec, Pool):
                x = tn.avgpool2d(x, spec.size)
                continue
            w = self.weights[w_idx]
            w_idx += 1
            if isinstance(spec, Dense) and x.ndim > 2:
                x = tn.flatten(x)
            x = tn.conv2d(x, w, spec.stride, spec.padding) if isinstance(spec, Conv) else tn.linear(x, w)
            if i in hidden:
                x = tn.relu(x)
                if capture == k:
                    captured = x
                if self.training and cfg.dropout > 0:
                    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
                    keep = 1.0 - cfg.dropout
                    x = tn.mask(x, (rng.random(x.shape) < keep) / keep)
                k += 1
        return (x, captured) if capture is not None else x

    def hidden_activations(self, x: np.ndarray) -> list[np.ndarray]:
        """Post-ReLU activations of every hidden weight layer (inference mode)."""
        acts = []
        with tn.no_grad():
            for k in range(len(self.config.hidden_layers)):
                _, a = self.forward(x, capture=k)
                acts.append(a.data)
        return acts

    def predict(self, images: np.ndarray, batch_size: int = 200) -> np.ndarray:
        preds = []
        with tn.no_grad():
            for s in range(0, len(images), batch_size):
                preds.append(self.forward(np.asarray(images[s:s + batch_size]) / 255.0).data.argmax(axis=1))
        return np.concatenate(preds)
