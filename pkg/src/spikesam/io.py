"""Checkpoints, heatmap images, spike rasters and metric reports.

Checkpoint layout (all integers little-endian)::

    8 bytes   magic b"SSAMCKPT"
    u32       format version
    u64       header length in bytes
    header    UTF-8 JSON (sorted keys): config, thresholds, metadata,
              optimizer scalars and a tensor index {name, shape, offset, count}
    blobs     concatenated float32 little-endian tensor data

Every file is written to a temporary sibling and renamed into place.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from . import __version__
from .interpret import Heatmap, bilinear_resize, minmax
from .netpbm import write_netpbm
from .snn import ANN, NetworkConfig, SpikeRecord, SpikingNetwork
from .tensor import Tensor

MAGIC = b"SSAMCKPT"
FORMAT_VERSION = 1
STORAGE_DTYPE = np.dtype("<f4")
HEATMAP_FORMAT = "spikesam-heatmap v1"
RASTER_FORMAT = "spikesam-raster v1"


class CheckpointError(ValueError):
    pass


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    return path


def atomic_write_text(path, text: str) -> Path:
    return atomic_write_bytes(path, text.encode("utf-8"))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _named_tensors(model) -> list[tuple[str, np.ndarray]]:
    out = [(f"weight.{i}", w.data) for i, w in enumerate(model.weights)]
    if isinstance(model, SpikingNetwork) and model.bntt is not None:
        for k, b in enumerate(model.bntt):
            out.append((f"bntt.{k}.gamma", np.stack([g.data for g in b.gamma])))
            out.append((f"bntt.{k}.running_mean", b.running_mean))
            out.append((f"bntt.{k}.running_var", b.running_var))
    return out


def save_checkpoint(path, model: SpikingNetwork | ANN, optimizer=None, metadata: dict | None = None) -> Path:
    tensors = _named_tensors(model)
    opt_state = None
    if optimizer is not None:
        state = optimizer.state_dict()
        names = []
        for i, buf in enumerate(state["buffers"]):
            if buf is None:
                names.append(None)
            else:
                names.append(f"optimizer.buffer.{i}")
                tensors.append((names[-1], buf))
        opt_state = {"lr": state["lr"], "momentum": state["momentum"],
                     "weight_decay": state["weight_decay"], "buffers": names}
    index, blobs, offset = [], [], 0
    for name, arr in tensors:
        blob = np.ascontiguousarray(arr, dtype=STORAGE_DTYPE).tobytes()
        index.append({"name": name, "shape": list(arr.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(blob)
        offset += len(blob)
    header = {
        "kind": "snn" if isinstance(model, SpikingNetwork) else "ann",
        "config": model.config.to_dict(),
        "thresholds": list(model.thresholds) if isinstance(model, SpikingNetwork) else None,
        "metadata": {"package_version": __version__, **(metadata or {})},
        "optimizer": opt_state,
        "tensors": index,
    }
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    data = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(head)) + head + b"".join(blobs)
    return atomic_write_bytes(path, data)


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", buf, 8)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    start = 8 + struct.calcsize("<IQ")
    header = json.loads(buf[start:start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for entry in header["tensors"]:
        arr = np.frombuffer(buf, dtype=STORAGE_DTYPE, count=entry["count"], offset=base + entry["offset"])
        arrays[entry["name"]] = arr.astype(np.float64).reshape(entry["shape"])
    return header, arrays


def load_checkpoint(path, with_optimizer: bool = False):
    """Rebuild the model (and optionally an :class:`SGD` with restored state)."""
    from .training import SGD

    header, arrays = read_checkpoint(path)
    config = NetworkConfig.from_dict(header["config"])
    n_weights = len(config.weight_layers)
    weights = [Tensor(arrays[f"weight.{i}"], requires_grad=True, name=f"w{i}") for i in range(n_weights)]
    if header["kind"] == "snn":
        model = SpikingNetwork(config, weights=weights, thresholds=header["thresholds"])
        if model.bntt is not None:
            for k, b in enumerate(model.bntt):
                gam = arrays[f"bntt.{k}.gamma"]
                for t in range(b.num_steps):
                    b.gamma[t].data = gam[t].copy()
                b.running_mean[:] = arrays[f"bntt.{k}.running_mean"]
                b.running_var[:] = arrays[f"bntt.{k}.running_var"]
    elif header["kind"] == "ann":
        model = ANN(config, weights=weights)
    else:
        raise CheckpointError(f"{path}: unknown model kind {header['kind']!r}")
    if not with_optimizer:
        return model
    opt = None
    if header["optimizer"] is not None:
        st = header["optimizer"]
        opt = SGD(model.parameters(), lr=st["lr"], momentum=st["momentum"], weight_decay=st["weight_decay"])
        opt.load_state_dict({**st, "buffers": [None if n is None else arrays[n] for n in st["buffers"]]})
    return model, opt, header["metadata"]


def round_to_storage(model) -> None:
    """Round every stored parameter in place to checkpoint precision."""
    def r(a):
        return a.astype(STORAGE_DTYPE).astype(np.float64)

    for w in model.weights:
        w.data = r(w.data)
    if isinstance(model, SpikingNetwork) and model.bntt is not None:
        for b in model.bntt:
            for g in b.gamma:
                g.data = r(g.data)
            b.running_mean[:] = r(b.running_mean)
            b.running_var[:] = r(b.running_var)


# ---------------------------------------------------------------------------
# heatmaps
# ---------------------------------------------------------------------------

def _jet(x: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4 * x - 3), 0, 1)
    g = np.clip(1.5 - np.abs(4 * x - 2), 0, 1)
    b = np.clip(1.5 - np.abs(4 * x - 1), 0, 1)
    return np.stack([r, g, b], axis=-1)


# 256-entry overlay colormap: blue (0) -> cyan -> yellow -> red (255)
COLORMAP = np.rint(_jet(np.arange(256) / 255.0) * 255).astype(np.uint8)


def heatmap_pixels(hm: Heatmap, mode: str = "normalized", raw_scale: float = 1.0) -> tuple[np.ndarray, dict]:
    """8-bit gray levels for a map plus the parameters of the affine transform used.

    normalized: ``255 * (v - min) / (max - min)`` (constant maps -> 127.5);
    raw: ``255 * clip(v / raw_scale, 0, 1)``.
    """
    v = hm.values
    if mode == "normalized":
        levels = minmax(v) * 255.0
        params = {"min": float(v.min()), "max": float(v.max())}
    elif mode == "raw":
        if not raw_scale > 0:
            raise ValueError("raw_scale must be positive")
        levels = np.clip(v / raw_scale, 0.0, 1.0) * 255.0
        params = {"raw_scale": float(raw_scale)}
    else:
        raise ValueError(f"unknown mode {mode!r}")
    return np.rint(levels), params


def _describe(hm: Heatmap, mode: str, params: dict) -> list[str]:
    info = {"format": HEATMAP_FORMAT, "mode": mode, "method": hm.method, "layer": hm.layer,
            "time_step": hm.time_step, "class_id": hm.class_id, "source_mode": hm.mode, **params}
    return [json.dumps(info, sort_keys=True)]


def export_heatmap(hm: Heatmap, path, mode: str = "normalized", image: np.ndarray | None = None,
                   raw_scale: float = 1.0, alpha: float = 0.5) -> Path:
    """Write a PGM (raw/normalized) or a PPM overlay on ``image`` ([C,H,W], 0..255)."""
    if mode == "overlay":
        if image is None:
            raise ValueError("overlay mode needs the source image")
        image = np.asarray(image, dtype=np.float64)
        rgb = np.repeat(image, 3, axis=0) if image.shape[0] == 1 else image
        up = bilinear_resize(hm.values, rgb.shape[1:])
        idx = np.rint(minmax(up) * 255).astype(np.int64)
        colors = COLORMAP[idx].transpose(2, 0, 1).astype(np.float64)
        pixels = np.rint((1 - alpha) * rgb + alpha * colors)
        params = {"alpha": alpha, "min": float(hm.values.min()), "max": float(hm.values.max())}
        return write_netpbm(path, pixels, _describe(hm, mode, params))
    pixels, params = heatmap_pixels(hm, mode, raw_scale)
    return write_netpbm(path, pixels, _describe(hm, mode, params))


# ---------------------------------------------------------------------------
# rasters and reports
# ---------------------------------------------------------------------------

def raster_lines(record: SpikeRecord, sample: int = 0) -> Iterable[str]:
    yield f"# {RASTER_FORMAT}"
    yield "layer\tt\tchannel\ty\tx"
    for layer, spikes in enumerate(record.spikes):
        s = spikes[:, sample]
        if s.ndim == 2:  # dense layer: channel index only
            s = s[:, :, None, None]
        for t, c, y, x in zip(*np.nonzero(s)):
            yield f"{layer}\t{t}\t{c}\t{y}\t{x}"


def export_raster(record: SpikeRecord, path, sample: int = 0) -> Path:
    return atomic_write_text(path, "\n".join(raster_lines(record, sample)) + "\n")


def read_raster(path) -> np.ndarray:
    rows = [l.split("\t") for l in Path(path).read_text().splitlines()[2:] if l]
    return np.array(rows, dtype=np.int64).reshape(-1, 5)


def export_spike_counts(record: SpikeRecord, path) -> Path:
    counts = record.spike_counts()
    norm = record.normalized_spike_counts()
    lines = ["layer\tt\tspikes\tnormalized"]
    for l in range(counts.shape[0]):
        for t in range(counts.shape[1]):
            lines.append(f"{l}\t{t}\t{int(counts[l, t])}\t{norm[l, t]!r}")
    return atomic_write_text(path, "\n".join(lines) + "\n")


def report_line(**fields) -> str:
    return json.dumps(fields, sort_keys=True)


def write_report(path, records: Iterable[dict]) -> Path:
    return atomic_write_text(path, "".join(report_line(**r) + "\n" for r in records))


def read_report(path) -> list[dict]:
    return [json.loads(l) for l in Path(path).read_text().splitlines() if l.strip()]


def write_manifest(directory, command: str, config: dict, extra: dict | None = None) -> Path:
    import platform

    manifest = {"command": command, "config": config, "package_version": __version__,
                "numpy_version": np.__version__, "python_version": platform.python_version(),
                **(extra or {})}
    return atomic_write_text(Path(directory) / "manifest.json", json.dumps(manifest, sort_keys=True, indent=2) + "\n")
