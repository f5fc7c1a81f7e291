"""Spike Activation Maps and gradient-based baselines.

SAM scores each neuron by how densely it fired in the recent past: every
earlier spike at ``t'`` contributes ``exp(-gamma * (t - t'))`` (the temporal
spike contribution), the per-neuron sum of those contributions is gated by
whether the neuron fires now, and the result is summed over channels. It
needs only the forward spike record.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from . import tensor as tn
from .snn import ANN, SpikeRecord

DEFAULT_SAM_GAMMA = 0.5


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # [H, W], non-negative
    layer: int
    time_step: int | None = None
    class_id: int | None = None
    method: str = "sam"
    mode: str = "raw"  # "raw" or "normalized"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"heatmap must be 2-D, got shape {v.shape}")
        if (v < 0).any():
            raise ValueError("heatmap values must be non-negative")
        object.__setattr__(self, "values", v)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape

    def normalized(self) -> "Heatmap":
        """Per-map min-max scaling to [0, 1]; a constant map becomes 0.5 everywhere."""
        if self.mode == "normalized":
            return self
        return replace(self, values=minmax(self.values), mode="normalized")


def minmax(values: np.ndarray) -> np.ndarray:
    lo, hi = values.min(), values.max()
    if hi > lo:
        return (values - lo) / (hi - lo)
    return np.full(values.shape, 0.5)


# ---------------------------------------------------------------------------
# SAM
# ---------------------------------------------------------------------------

def tscs(t: float, t_prev: float, gamma: float) -> float:
    """Contribution of a spike at ``t_prev`` to time ``t``."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    if not t >= t_prev >= 0:
        raise ValueError(f"need t >= t_prev >= 0, got t={t}, t_prev={t_prev}")
    return math.exp(-gamma * abs(t - t_prev))


@dataclass(frozen=True)
class NcsState:
    """Exponentially decayed count of a neuron population's strictly earlier spikes.

    ``accumulator`` may be a scalar or an array (one entry per neuron).
    """

    accumulator: np.ndarray | float = 0.0
    gamma: float = DEFAULT_SAM_GAMMA

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError(f"gamma must be non-negative, got {self.gamma}")

    @classmethod
    def zeros(cls, shape, gamma: float = DEFAULT_SAM_GAMMA) -> "NcsState":
        return cls(np.zeros(shape), gamma)


def ncs_advance(state: NcsState, spiked_last_step) -> NcsState:
    """Move one step forward: ``A_t = exp(-gamma) * (A_{t-1} + s_{t-1})``."""
    acc = (state.accumulator + np.asarray(spiked_last_step, dtype=np.float64)) * math.exp(-state.gamma)
    return NcsState(acc if np.ndim(acc) else float(acc), state.gamma)


def ncs_direct(spike_times, t: int, gamma: float) -> float:
    """Reference NCS: sum of contributions from listed firing times strictly before ``t``."""
    return math.fsum(tscs(t, tp, gamma) for tp in spike_times if tp < t)


def _layer_spikes(record: SpikeRecord, layer: int, sample: int) -> np.ndarray:
    if not 0 <= layer < record.num_layers:
        raise IndexError(f"layer {layer} not in record (has {record.num_layers} spiking layers)")
    spikes = record.spikes[layer][:, sample]
    if spikes.ndim != 4:
        raise ValueError(f"layer {layer} is not spatial (per-step shape {spikes.shape[1:]})")
    return spikes


def ncs_maps(spikes: np.ndarray, gamma: float) -> np.ndarray:
    """NCS for every step of a [T, ...] binary spike array (same shape)."""
    if gamma < 0:
        raise ValueError(f"gamma must be non-negative, got {gamma}")
    decay = math.exp(-gamma)
    out = np.empty(spikes.shape)
    acc = np.zeros(spikes.shape[1:])
    for t in range(spikes.shape[0]):
        if t:
            acc = (acc + spikes[t - 1]) * decay
        out[t] = acc
    return out


def sam_compute(record: SpikeRecord, layer: int, gamma: float = DEFAULT_SAM_GAMMA,
                sample: int = 0) -> list[Heatmap]:
    """One SAM heatmap per time-step for a hidden spiking layer."""
    spikes = _layer_spikes(record, layer, sample)
    sam = (ncs_maps(spikes, gamma) * spikes).sum(axis=1)
    return [Heatmap(sam[t], layer, t, method="sam") for t in range(sam.shape[0])]


# ---------------------------------------------------------------------------
# gradient baselines
# ---------------------------------------------------------------------------

def snn_gradcam(record: SpikeRecord, layer: int, class_id: int, sample: int = 0,
                return_alpha: bool = False):
    """Per-time-step Grad-CAM for a spiking layer.

    ``record`` must come from ``forward(..., keep_graph=True)``. Channel
    weights average d(logit_c)/d(spike) over space and all time-steps; each
    step's map is ReLU of the weighted channel sum of that step's spikes.
    """
    if record.spike_tensors is None or record.output_tensor is None:
        raise ValueError("record has no graph; run forward with keep_graph=True")
    spikes = _layer_spikes(record, layer, sample)
    tensors = record.spike_tensors[layer]
    if not any(t.requires_grad for t in tensors):
        raise ValueError("recorded spikes are not differentiable (was forward run under no_grad?)")
    out = record.output_tensor
    if not 0 <= class_id < out.shape[1]:
        raise IndexError(f"class {class_id} outside [0, {out.shape[1]})")
    for t in tensors:
        t.grad = None
    # rows other than ``sample`` are independent in inference mode; seed only ours
    seed = np.zeros(out.shape)
    seed[sample, class_id] = 1.0
    tn.backward(out, grad=seed)
    grads = np.stack([t.grad[sample] if t.grad is not None else np.zeros(spikes.shape[1:]) for t in tensors])
    num_steps, _, h, w = grads.shape
    alpha = grads.sum(axis=(0, 2, 3)) / (h * w * num_steps)
    cams = np.maximum(0.0, np.tensordot(alpha, spikes, axes=([0], [1])))
    maps = [Heatmap(cams[t], layer, t, class_id, method="snn-gradcam") for t in range(num_steps)]
    return (maps, alpha) if return_alpha else maps


def ann_gradcam(ann: ANN, image: np.ndarray, layer: int, class_id: int,
                return_alpha: bool = False):
    """Grad-CAM on an ANN hidden layer for one [C,H,W] image in [0,255]."""
    x = tn.Tensor(np.asarray(image, dtype=np.float64)[None] / 255.0)
    ann.eval()
    logits, act = ann.forward(x, capture=layer)
    if act is None:
        raise IndexError(f"ANN has no hidden layer {layer}")
    if act.ndim != 4:
        raise ValueError(f"layer {layer} is not spatial")
    if not 0 <= class_id < logits.shape[1]:
        raise IndexError(f"class {class_id} outside [0, {logits.shape[1]})")
    act.grad = None
    tn.backward(tn.pick(logits, np.array([class_id])))
    grad = act.grad[0] if act.grad is not None else np.zeros(act.shape[1:])
    alpha = grad.mean(axis=(1, 2))
    cam = np.maximum(0.0, np.tensordot(alpha, act.data[0], axes=([0], [0])))
    hm = Heatmap(cam, layer, None, class_id, method="ann-gradcam")
    return (hm, alpha, act.data[0], grad) if return_alpha else hm


# ---------------------------------------------------------------------------
# resampling
# ---------------------------------------------------------------------------

def bilinear_resize(values: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Corner-aligned bilinear interpolation of a 2-D array."""
    th, tw = size
    if th < 1 or tw < 1:
        raise ValueError(f"target size must be positive, got {size}")
    h, w = values.shape
    if (h, w) == (th, tw):
        return values.copy()

    def coords(n_in, n_out):
        if n_out == 1 or n_in == 1:
            pos = np.zeros(n_out)
        else:
            pos = np.arange(n_out) * (n_in - 1) / (n_out - 1)
        lo = np.minimum(np.floor(pos).astype(int), n_in - 1)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    y0, y1, fy = coords(h, th)
    x0, x1, fx = coords(w, tw)
    top = values[y0][:, x0] * (1 - fx) + values[y0][:, x1] * fx
    bot = values[y1][:, x0] * (1 - fx) + values[y1][:, x1] * fx
    return top * (1 - fy)[:, None] + bot * fy[:, None]


def upsample(heatmap: Heatmap, size: tuple[int, int]) -> Heatmap:
    # convex weights keep values non-negative; clip float dust below zero
    return replace(heatmap, values=np.maximum(bilinear_resize(heatmap.values, size), 0.0))
