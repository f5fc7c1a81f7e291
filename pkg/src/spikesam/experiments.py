"""Desk-scale studies: smoothing, gamma sweep, leak ablation, attacks, suppression, conversion."""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, fields
from typing import Sequence

import numpy as np

from . import tensor as tn
from .data import Dataset, load_dataset, split, synthetic_shapes, take_split
from .interpret import DEFAULT_SAM_GAMMA, Heatmap, ann_gradcam, sam_compute, snn_gradcam, upsample
from .metrics import (fgsm, heatmap_l1, heatmap_l1_over_time, localization_error,
                      max_variance_over_time, snn_fgsm_proxy)
from .snn import ANN, NetworkConfig, SpikingNetwork, desk_preset, poisson_encode
from .training import accuracy, convert, train_ann, train_snn

logger = logging.getLogger(__name__)

GAMMA_SWEEP = (0.0, 0.1, 0.25, 0.5, 0.75, 1.0)
LEAK_SWEEP = (0.7, 0.8, 0.9)
ATTACK_EPSILONS = (0.0, 2 / 255, 4 / 255, 8 / 255)


@dataclass
class ExperimentConfig:
    """Dataset, network and sweep settings shared by every command.

    ``data_path`` selects a netpbm directory (split by seeded name hash);
    otherwise the synthetic shapes generator is used.
    """

    data_path: str | None = None
    num_classes: int = 4
    size: int = 32
    n_train: int = 2000
    n_test: int = 400
    num_steps: int = 20
    leak: float = 0.99
    beta: float = 0.3
    widths: tuple[int, ...] = (8, 16, 16)
    bntt: bool = True
    snn_epochs: int = 5
    snn_lr: float = 0.02
    ann_epochs: int = 10
    ann_lr: float = 0.05
    batch_size: int = 32
    gammas: tuple[float, ...] = GAMMA_SWEEP
    leaks: tuple[float, ...] = LEAK_SWEEP
    epsilons: tuple[float, ...] = ATTACK_EPSILONS
    seed: int = 0

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.gammas = tuple(float(g) for g in self.gammas)
        self.leaks = tuple(float(l) for l in self.leaks)
        self.epsilons = tuple(float(e) for e in self.epsilons)
        checks = [
            (self.num_classes >= 2, "num_classes must be >= 2"),
            (self.size >= 2, "size must be >= 2"),
            (self.n_train >= 1 and self.n_test >= 1, "n_train and n_test must be positive"),
            (self.num_steps >= 1, "num_steps must be >= 1"),
            (0.0 < self.leak <= 1.0, "leak must lie in (0, 1]"),
            (self.beta >= 0, "beta must be non-negative"),
            (len(self.widths) >= 1 and min(self.widths) >= 1, "widths must be positive"),
            (self.snn_epochs >= 0 and self.ann_epochs >= 0, "epochs must be non-negative"),
            (self.snn_lr >= 0 and self.ann_lr >= 0, "learning rates must be non-negative"),
            (self.batch_size >= 1, "batch_size must be >= 1"),
            (all(g >= 0 for g in self.gammas), "gamma sweep values must be non-negative"),
            (all(0.0 < l <= 1.0 for l in self.leaks), "leak sweep values must lie in (0, 1]"),
            (all(0.0 <= e <= 1.0 for e in self.epsilons), "attack epsilons must lie in [0, 1]"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("widths", "gammas", "leaks", "epsilons"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def data(self) -> tuple[Dataset, Dataset]:
        if self.data_path is None:
            ds = synthetic_shapes(self.num_classes, self.size, self.n_train + self.n_test, seed=self.seed)
            return take_split(ds, self.n_train, self.n_test)
        train, test = split(load_dataset(self.data_path), seed=self.seed)
        return train.subset(np.arange(min(self.n_train, len(train)))), test.subset(np.arange(min(self.n_test, len(test))))

    def snn_config(self, input_shape=None, num_classes=None, **overrides) -> NetworkConfig:
        kw = dict(num_steps=self.num_steps, leak=self.leak, beta=self.beta, bntt=self.bntt, seed=self.seed)
        kw.update(overrides)
        return self._preset(input_shape, num_classes, **kw)

    def ann_config(self, input_shape=None, num_classes=None) -> NetworkConfig:
        return self._preset(input_shape, num_classes, bntt=False, seed=self.seed)

    def _preset(self, input_shape, num_classes, **kw) -> NetworkConfig:
        c, h, w = input_shape or (1, self.size, self.size)
        if h != w:
            raise ValueError(f"square inputs required, got {h}x{w}")
        return desk_preset(num_classes or self.num_classes, h, channels=c, widths=self.widths, **kw)


DeskSetup = ExperimentConfig


def train_desk_snn(setup: ExperimentConfig, train: Dataset, test: Dataset, log=None, **overrides):
    net = SpikingNetwork(setup.snn_config(train.images.shape[1:], train.num_classes, **overrides))
    result = train_snn(net, train.images, train.labels, test.images, test.labels,
                       epochs=setup.snn_epochs, lr=setup.snn_lr, batch_size=setup.batch_size,
                       seed=setup.seed, log=log)
    return net, result


def train_desk_ann(setup: ExperimentConfig, train: Dataset, test: Dataset, log=None):
    ann = ANN(setup.ann_config(train.images.shape[1:], train.num_classes))
    result = train_ann(ann, train.images, train.labels, test.images, test.labels,
                       epochs=setup.ann_epochs, lr=setup.ann_lr, batch_size=setup.batch_size,
                       seed=setup.seed, log=log)
    return ann, result


def _encode_one(image, num_steps, seed):
    return poisson_encode(np.asarray(image)[None], num_steps, seed)


def explain_image(snn: SpikingNetwork, image: np.ndarray, layer: int, class_id: int | None = None,
                  gamma: float = DEFAULT_SAM_GAMMA, seed: int = 0, with_gradcam: bool = True):
    """SAM (and optionally SNN Grad-CAM) sequences for one image; shares one spike train."""
    snn.eval()
    train = _encode_one(image, snn.config.num_steps, seed)
    if with_gradcam:
        record = snn.forward(train, keep_graph=True)
    else:
        with tn.no_grad():
            record = snn.forward(train)
    sams = sam_compute(record, layer, gamma)
    cams = None
    if with_gradcam:
        cid = int(record.prediction()[0]) if class_id is None else class_id
        cams = snn_gradcam(record, layer, cid)
    return record, sams, cams


# ---------------------------------------------------------------------------
# studies
# ---------------------------------------------------------------------------

def smoothing_study(snn: SpikingNetwork, images, labels, layer: int = 0,
                    gamma: float = DEFAULT_SAM_GAMMA, seed: int = 0) -> list[dict]:
    """Max-over-time pixel variance of SAM vs SNN Grad-CAM, per image (normalized maps)."""
    rows = []
    for n, (img, lab) in enumerate(zip(images, labels)):
        _, sams, cams = explain_image(snn, img, layer, int(lab), gamma, seed=seed + n)
        rows.append({
            "image": n, "layer": layer, "label": int(lab),
            "sam_variance": max_variance_over_time([m.normalized() for m in sams]),
            "gradcam_variance": max_variance_over_time([m.normalized() for m in cams]),
            "sam_variance_raw": max_variance_over_time(sams),
            "gradcam_variance_raw": max_variance_over_time(cams),
        })
    return rows


def gamma_sweep(snn: SpikingNetwork, ann: ANN, images, labels, layer: int,
                gammas: Sequence[float] = GAMMA_SWEEP, seed: int = 0) -> list[dict]:
    """Localization error of SAM against the ANN Grad-CAM for each gamma (one spike train per image)."""
    rows = []
    size = tuple(images.shape[2:])
    for n, (img, lab) in enumerate(zip(images, labels)):
        ref = ann_gradcam(ann, img, layer, int(lab))
        degenerate = not ref.values.max() > 0
        with tn.no_grad():
            record = snn.eval().forward(_encode_one(img, snn.config.num_steps, seed + n))
        for g in gammas:
            res = localization_error(sam_compute(record, layer, g), ref, resolution=size)
            rows.append({"image": n, "layer": layer, "gamma": g, "method": "sam",
                         "localization_error": res.minimum, "argmin_t": res.argmin,
                         "reference_degenerate": degenerate})
    return rows


def summarize_gamma_sweep(rows: list[dict]) -> dict:
    """Mean error per (layer, gamma) and the share of images where gamma=0 is beaten."""
    by_key: dict[tuple, list[float]] = {}
    per_image: dict[tuple, dict[float, float]] = {}
    for r in rows:
        by_key.setdefault((r["layer"], r["gamma"]), []).append(r["localization_error"])
        per_image.setdefault((r["layer"], r["image"]), {})[r["gamma"]] = r["localization_error"]
    means = {k: float(np.mean(v)) for k, v in sorted(by_key.items())}
    beaten = [errs[0.0] > min(errs.values()) for errs in per_image.values() if 0.0 in errs]
    return {"mean": means, "zero_gamma_beaten_fraction": float(np.mean(beaten)) if beaten else float("nan"),
            "zero_gamma_beaten_by_image": zero_gamma_beaten(rows)}


def zero_gamma_beaten(rows: list[dict]) -> float:
    """Share of images whose layer-averaged error at gamma=0 exceeds the sweep minimum.

    Layers where the ANN reference map is identically zero are skipped for
    that image: a zero reference smooths to the uniform distribution and
    carries no location.
    """
    per_image: dict[int, dict[float, list[float]]] = {}
    for r in rows:
        if r.get("reference_degenerate"):
            continue
        per_image.setdefault(r["image"], {}).setdefault(r["gamma"], []).append(r["localization_error"])
    beaten = []
    for errs in per_image.values():
        if 0.0 not in errs:
            continue
        means = {g: float(np.mean(v)) for g, v in errs.items()}
        beaten.append(means[0.0] > min(means.values()))
    return float(np.mean(beaten)) if beaten else float("nan")


def format_gamma_table(rows: list[dict]) -> str:
    """Tab-separated table: one row per gamma, one column per layer (mean localization error)."""
    summary = summarize_gamma_sweep(rows)["mean"]
    layers = sorted({k[0] for k in summary})
    gammas = sorted({k[1] for k in summary})
    lines = ["gamma\t" + "\t".join(f"layer{l}" for l in layers)]
    for g in gammas:
        lines.append(f"{g!r}\t" + "\t".join(f"{summary[(l, g)]:.6f}" for l in layers))
    return "\n".join(lines) + "\n"


def localization_rows(snn, ann, images, labels, layers, gamma=DEFAULT_SAM_GAMMA, seed=0) -> list[dict]:
    rows = []
    for layer in layers:
        rows += gamma_sweep(snn, ann, images, labels, layer, (gamma,), seed)
    return rows


def leak_ablation(setup: ExperimentConfig, train: Dataset, test: Dataset, ann: ANN | None = None,
                  leaks: Sequence[float] | None = None, n_explain: int = 20) -> list[dict]:
    """Train one SNN per leak value with identical settings; report accuracy and localization error."""
    rows = []
    for leak in setup.leaks if leaks is None else leaks:
        net, result = train_desk_snn(setup, train, test, leak=leak)
        row = {"leak": leak, "accuracy": result.test_accuracy[-1]}
        if ann is not None:
            for layer in range(len(net.config.hidden_layers)):
                errs = gamma_sweep(net, ann, test.images[:n_explain], test.labels[:n_explain], layer,
                                   (DEFAULT_SAM_GAMMA,), seed=setup.seed)
                row[f"localization_error_layer{layer}"] = float(np.mean([e["localization_error"] for e in errs]))
        rows.append(row)
    return rows


def attack_study(ann: ANN, snn: SpikingNetwork, images, labels, epsilons=ATTACK_EPSILONS,
                 layer: int = 0, n_heatmaps: int = 20, gamma: float = DEFAULT_SAM_GAMMA,
                 seed: int = 0, heat_eps: float = 4 / 255) -> dict:
    """Accuracy under attack for both models, plus clean-vs-adversarial heatmap distances."""
    labels = np.asarray(labels)
    out = {"epsilons": list(epsilons), "ann_accuracy": [], "snn_accuracy": [], "snn_attack": "snn-fgsm-proxy"}
    for eps in epsilons:
        adv = fgsm(ann, images, labels, eps)
        out["ann_accuracy"].append(accuracy(ann.predict(adv), labels))
        adv_s = snn_fgsm_proxy(snn, images, labels, eps)
        out["snn_accuracy"].append(accuracy(snn.predict(adv_s, seed=seed), labels))
    ann_l1, snn_l1 = [], []
    k = min(n_heatmaps, len(images))
    adv_a = fgsm(ann, images[:k], labels[:k], heat_eps)
    adv_s = snn_fgsm_proxy(snn, images[:k], labels[:k], heat_eps)
    for n in range(k):
        lab = int(labels[n])
        ann_l1.append(heatmap_l1(ann_gradcam(ann, images[n], layer, lab).normalized(),
                                 ann_gradcam(ann, adv_a[n], layer, lab).normalized()))
        # same Poisson seed for clean and adversarial input isolates the perturbation
        _, clean, _ = explain_image(snn, images[n], layer, gamma=gamma, seed=seed + n, with_gradcam=False)
        _, dirty, _ = explain_image(snn, adv_s[n], layer, gamma=gamma, seed=seed + n, with_gradcam=False)
        snn_l1.append(heatmap_l1_over_time([m.normalized() for m in clean], [m.normalized() for m in dirty]))
    out.update({"heatmap_epsilon": heat_eps, "ann_gradcam_l1": float(np.mean(ann_l1)),
                "snn_sam_l1": float(np.mean(snn_l1)), "layer": layer})
    return out


def compose_pair(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Two [C,H,W] images, each 2x2-average downscaled, side by side on a black canvas of the same size."""
    c, h, w = a.shape
    if b.shape != a.shape or h % 2 or w % 2:
        raise ValueError("images must share an even-sized shape")
    small = [x.reshape(c, h // 2, 2, w // 2, 2).mean(axis=(2, 4)) for x in (a, b)]
    canvas = np.zeros_like(a, dtype=np.float64)
    top = h // 4
    canvas[:, top:top + h // 2, : w // 2] = small[0]
    canvas[:, top:top + h // 2, w // 2:] = small[1]
    return canvas


def suppression(snn: SpikingNetwork, a: np.ndarray, b: np.ndarray, layer: int = 0,
                gamma: float = DEFAULT_SAM_GAMMA, seed: int = 0) -> dict:
    """SAM over time for a two-object composite; left/right attention share per step."""
    composite = compose_pair(a, b)
    record, sams, _ = explain_image(snn, composite, layer, gamma=gamma, seed=seed, with_gradcam=False)
    half = sams[0].shape[1] // 2
    shares = []
    for m in sams:
        left, right = m.values[:, :half].sum(), m.values[:, half:].sum()
        total = left + right
        shares.append(float(left / total) if total > 0 else 0.5)
    return {"composite": composite, "sams": sams, "left_share": shares,
            "prediction": int(record.prediction()[0]), "record": record}


def conversion_study(ann: ANN, calibration, images, num_steps_list=(25, 100, 400),
                     scale: float = 1.0, seed: int = 0) -> dict:
    """Top-1 agreement of converted SNNs with their source ANN at several simulation lengths."""
    ann_pred = ann.predict(images)
    out = {"num_steps": list(num_steps_list), "agreement": [], "thresholds": []}
    for steps in num_steps_list:
        snn = convert(ann, calibration, steps, scale, seed=seed)
        out["thresholds"].append(list(snn.thresholds))
        out["agreement"].append(accuracy(snn.predict(images, seed=seed), ann_pred))
    return out
