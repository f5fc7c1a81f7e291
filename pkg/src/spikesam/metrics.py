"""Heatmap metrics and adversarial inputs for the robustness comparison."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensor as tn
from .interpret import Heatmap, upsample
from .snn import ANN, SpikingNetwork

logger = logging.getLogger(__name__)

SMOOTHING = 1e-8


def normalize_to_distribution(values, smoothing: float = SMOOTHING) -> np.ndarray:
    """``(map + smoothing) / sum(map + smoothing)``."""
    v = np.asarray(values.values if isinstance(values, Heatmap) else values, dtype=np.float64)
    if (v < 0).any():
        raise ValueError("map must be non-negative")
    v = v + smoothing
    total = v.sum()
    if not total > 0:
        raise ValueError("cannot normalize an all-zero map without smoothing")
    return v / total


def cross_entropy(p: np.ndarray, q: np.ndarray) -> float:
    """``-sum p log q``; terms with ``p == 0`` contribute nothing."""
    p, q = np.ravel(p), np.ravel(q)
    nz = p > 0
    return float(-(p[nz] * np.log(q[nz])).sum())


def entropy(p: np.ndarray) -> float:
    return cross_entropy(p, p)


@dataclass
class LocalizationResult:
    per_step: list[float]
    argmin: int
    minimum: float


def localization_error(candidates: Sequence[Heatmap | np.ndarray], reference: Heatmap | np.ndarray,
                       resolution: tuple[int, int] | None = None,
                       smoothing: float = SMOOTHING) -> LocalizationResult:
    """Minimum over time-steps of the cross-entropy from reference to candidate.

    Maps are resampled to ``resolution`` first when it is given; otherwise
    they must already share one.
    """
    def prep(m):
        hm = m if isinstance(m, Heatmap) else Heatmap(np.asarray(m), layer=-1)
        if resolution is not None:
            hm = upsample(hm, resolution)
        return hm.values

    ref = prep(reference)
    p = normalize_to_distribution(ref, smoothing)
    per_step = []
    for m in candidates:
        q = prep(m)
        if q.shape != ref.shape:
            raise ValueError(f"resolution mismatch: candidate {q.shape} vs reference {ref.shape}")
        per_step.append(cross_entropy(p, normalize_to_distribution(q, smoothing)))
    if not per_step:
        raise ValueError("no candidate maps")
    k = int(np.argmin(per_step))
    return LocalizationResult(per_step, k, per_step[k])


def heatmap_variance(m: Heatmap | np.ndarray) -> float:
    v = np.asarray(m.values if isinstance(m, Heatmap) else m, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty map")
    return float(v.var())


def max_variance_over_time(maps: Sequence[Heatmap | np.ndarray]) -> float:
    return max(heatmap_variance(m) for m in maps)


def heatmap_l1(clean: Heatmap | np.ndarray, adv: Heatmap | np.ndarray) -> float:
    """Mean absolute difference of two maps already scaled to [0, 1] (see :meth:`Heatmap.normalized`)."""
    a = np.asarray(clean.values if isinstance(clean, Heatmap) else clean, dtype=np.float64)
    b = np.asarray(adv.values if isinstance(adv, Heatmap) else adv, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"resolution mismatch {a.shape} vs {b.shape}")
    if min(a.min(), b.min()) < 0 or max(a.max(), b.max()) > 1:
        raise ValueError("maps must be normalized to [0, 1] before taking the L1 distance")
    return float(np.abs(a - b).mean())


def heatmap_l1_over_time(clean: Sequence[Heatmap], adv: Sequence[Heatmap]) -> float:
    """Largest per-step L1 distance between normalized maps."""
    if len(clean) != len(adv):
        raise ValueError("sequences differ in length")
    return max(heatmap_l1(c, a) for c, a in zip(clean, adv))


# ---------------------------------------------------------------------------
# attacks
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AttackSpec:
    kind: str  # "fgsm" or "snn-fgsm-proxy"
    epsilon: float  # fraction of the pixel range

    def __post_init__(self):
        if self.kind not in ("fgsm", "snn-fgsm-proxy"):
            raise ValueError(f"unknown attack kind {self.kind!r}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")


def _apply_sign_step(images: np.ndarray, grad: np.ndarray, epsilon: float) -> np.ndarray:
    """``clip(x + eps*255*sign(g), 0, 255)`` with the bound enforced exactly."""
    bound = epsilon * 255.0
    adv = np.clip(images + bound * np.sign(grad), 0.0, 255.0)
    # rounding in x + bound can overshoot by one ulp; pull those entries back
    over = np.abs(adv - images) > bound
    while over.any():
        adv[over] = np.nextafter(adv[over], images[over])
        over = np.abs(adv - images) > bound
    if not (grad != 0).any():
        logger.info("zero input gradient; image left unchanged")
    return adv


def input_gradient_ann(ann: ANN, images: np.ndarray, labels) -> np.ndarray:
    """d(mean CE)/d(pixel) for [N,C,H,W] images in [0,255]."""
    ann.eval()
    x = tn.Tensor(np.asarray(images, dtype=np.float64) / 255.0, requires_grad=True)
    loss = tn.softmax_cross_entropy(ann.forward(x), np.atleast_1d(labels))
    (g,) = tn.backward(loss, [x])
    return g / 255.0


def fgsm(ann: ANN, images: np.ndarray, labels, epsilon: float) -> np.ndarray:
    """Fast gradient sign attack on an ANN; accepts one image or a batch."""
    AttackSpec("fgsm", epsilon)
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    if epsilon == 0:
        return images.copy()
    grad = input_gradient_ann(ann, batch, labels)
    adv = _apply_sign_step(batch, grad, epsilon)
    return adv[0] if single else adv


def input_gradient_snn(snn: SpikingNetwork, images: np.ndarray, labels,
                       num_steps: int | None = None) -> np.ndarray:
    """Loss gradient w.r.t. pixels of the rate-relaxed SNN.

    The Poisson sampler is replaced by its firing probability ``pixel/255``,
    fed as a constant input current at every step; hidden spikes use the
    surrogate derivative.
    """
    snn.eval()
    x = tn.Tensor(np.asarray(images, dtype=np.float64) / 255.0, requires_grad=True)
    record = snn.forward(x, num_steps=num_steps)
    loss = tn.softmax_cross_entropy(record.output_tensor, np.atleast_1d(labels))
    (g,) = tn.backward(loss, [x], report_disconnected=False)
    return g / 255.0


def relaxed_snn_loss(snn: SpikingNetwork, images: np.ndarray, labels, num_steps: int | None = None) -> float:
    with tn.no_grad():
        x = tn.Tensor(np.asarray(images, dtype=np.float64) / 255.0)
        record = snn.eval().forward(x, num_steps=num_steps)
        return tn.softmax_cross_entropy(record.output_tensor, np.atleast_1d(labels)).item()


def snn_fgsm_proxy(snn: SpikingNetwork, images: np.ndarray, labels, epsilon: float,
                   num_steps: int | None = None) -> np.ndarray:
    """Sign-gradient attack on the rate-relaxed SNN (a proxy; no Poisson sampling in the gradient path)."""
    AttackSpec("snn-fgsm-proxy", epsilon)
    images = np.asarray(images, dtype=np.float64)
    single = images.ndim == 3
    batch = images[None] if single else images
    if epsilon == 0:
        return images.copy()
    grad = input_gradient_snn(snn, batch, labels, num_steps)
    adv = _apply_sign_step(batch, grad, epsilon)
    return adv[0] if single else adv


def attack(spec: AttackSpec, model, images, labels, num_steps: int | None = None) -> np.ndarray:
    if spec.kind == "fgsm":
        return fgsm(model, images, labels, spec.epsilon)
    return snn_fgsm_proxy(model, images, labels, spec.epsilon, num_steps)
