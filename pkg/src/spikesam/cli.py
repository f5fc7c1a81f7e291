"""Command-line entry point: ``spikesam <command> [options]``.

Every command writes its artifacts plus ``manifest.json`` into the output
directory (``--out``, else ``$SPIKESAM_OUTPUT_DIR``, else ``./spikesam-out``).
``$SPIKESAM_THREADS`` caps BLAS threads when set before numpy is loaded.
"""

from __future__ import annotations

import os

_threads = os.environ.get("SPIKESAM_THREADS")
if _threads:
    for _var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(_var, _threads)

import argparse  # noqa: E402
import json  # noqa: E402
import logging  # noqa: E402
import sys  # noqa: E402
from io import StringIO  # noqa: E402
from pathlib import Path  # noqa: E402

import numpy as np  # noqa: E402

from . import experiments as ex  # noqa: E402
from . import io  # noqa: E402
from . import tensor as tn  # noqa: E402
from .interpret import ann_gradcam  # noqa: E402
from .metrics import heatmap_variance, localization_error  # noqa: E402
from .netpbm import read_netpbm, write_netpbm  # noqa: E402
from .snn import ANN, SpikingNetwork, poisson_encode  # noqa: E402
from .training import SGD, accuracy, convert, train_ann, train_snn  # noqa: E402

log = logging.getLogger("spikesam")

DEFAULT_OUT = "spikesam-out"

# flag -> (ExperimentConfig field, parser)
_CONFIG_FLAGS = {
    "data": ("data_path", str),
    "classes": ("num_classes", int),
    "size": ("size", int),
    "n_train": ("n_train", int),
    "n_test": ("n_test", int),
    "num_steps": ("num_steps", int),
    "leak": ("leak", float),
    "beta": ("beta", float),
    "widths": ("widths", None),
    "snn_epochs": ("snn_epochs", int),
    "snn_lr": ("snn_lr", float),
    "ann_epochs": ("ann_epochs", int),
    "ann_lr": ("ann_lr", float),
    "batch_size": ("batch_size", int),
    "gammas": ("gammas", None),
    "leaks": ("leaks", None),
    "epsilons": ("epsilons", None),
    "seed": ("seed", int),
}


class UsageError(Exception):
    pass


def _float_list(text: str) -> list[float]:
    out = []
    for tok in text.split(","):
        tok = tok.strip()
        if "/" in tok:
            num, den = tok.split("/")
            out.append(float(num) / float(den))
        elif tok:
            out.append(float(tok))
    return out


def _int_list(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("experiment config (flags override --config)")
    g.add_argument("--config", help="JSON file with ExperimentConfig fields")
    g.add_argument("--out", help="output directory")
    g.add_argument("--data", help="netpbm dataset directory with labels.txt (default: synthetic shapes)")
    g.add_argument("--classes", type=int, help="synthetic class count")
    g.add_argument("--size", type=int, help="synthetic image size")
    g.add_argument("--n-train", type=int)
    g.add_argument("--n-test", type=int)
    g.add_argument("--num-steps", type=int, help="simulation time-steps T")
    g.add_argument("--leak", type=float)
    g.add_argument("--beta", type=float, help="surrogate gradient scale")
    g.add_argument("--widths", type=_int_list, help="conv widths, e.g. 8,16,16")
    g.add_argument("--no-bntt", action="store_true", help="disable per-time-step batch norm")
    g.add_argument("--snn-epochs", type=int)
    g.add_argument("--snn-lr", type=float)
    g.add_argument("--ann-epochs", type=int)
    g.add_argument("--ann-lr", type=float)
    g.add_argument("--batch-size", type=int)
    g.add_argument("--gammas", type=_float_list, help="SAM gamma sweep, comma separated")
    g.add_argument("--leaks", type=_float_list, help="leak ablation values")
    g.add_argument("--epsilons", type=_float_list, help="attack strengths, e.g. 0,2/255,4/255")
    g.add_argument("--seed", type=int)
    return p


def build_config(args: argparse.Namespace) -> ex.ExperimentConfig:
    base: dict = {}
    if args.config:
        try:
            base = json.loads(Path(args.config).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"cannot read config {args.config}: {exc}") from exc
        if not isinstance(base, dict):
            raise UsageError(f"{args.config}: expected a JSON object")
    for flag, (field_name, _) in _CONFIG_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            base[field_name] = value
    if getattr(args, "no_bntt", False):
        base["bntt"] = False
    try:
        return ex.ExperimentConfig.from_dict(base)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid config: {exc}") from exc


def output_dir(args) -> Path:
    out = Path(args.out or os.environ.get("SPIKESAM_OUTPUT_DIR") or DEFAULT_OUT)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load(path, kind: type):
    if path is None:
        raise UsageError(f"a {kind.__name__} checkpoint is required")
    try:
        model = io.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise UsageError(f"checkpoint not found: {path}") from exc
    if not isinstance(model, kind):
        raise UsageError(f"{path} holds a {type(model).__name__}, expected {kind.__name__}")
    return model


def _read_image(path, model) -> np.ndarray:
    img, _ = read_netpbm(path)
    if img.shape != model.config.input_shape:
        raise UsageError(f"{path}: image shape {img.shape} does not match model input {model.config.input_shape}")
    return img


def _pick_image(args, cfg, model) -> tuple[np.ndarray, int | None, str]:
    if args.image:
        return _read_image(args.image, model), None, str(args.image)
    _, test = cfg.data()
    if not 0 <= args.index < len(test):
        raise UsageError(f"--index {args.index} outside test split of {len(test)}")
    return test.images[args.index], int(test.labels[args.index]), test.names[args.index]


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_train(args, cfg, out: Path) -> dict:
    train, test = cfg.data()
    meta = {"seed": cfg.seed, "model": args.model}
    with StringIO() as fh:
        if args.model == "ann":
            model = ANN(cfg.ann_config(train.images.shape[1:], train.num_classes))
            result = train_ann(model, train.images, train.labels, test.images, test.labels,
                               epochs=cfg.ann_epochs, lr=cfg.ann_lr, batch_size=cfg.batch_size,
                               seed=cfg.seed, log=fh)
            opt = None
        else:
            start = 0
            if args.resume:
                model, opt, old = io.load_checkpoint(args.resume, with_optimizer=True)
                start = int(old.get("epoch", 0))
            else:
                model = SpikingNetwork(cfg.snn_config(train.images.shape[1:], train.num_classes))
                opt = SGD(model.parameters(), lr=cfg.snn_lr)
            result = train_snn(model, train.images, train.labels, test.images, test.labels,
                               epochs=cfg.snn_epochs, lr=cfg.snn_lr, batch_size=cfg.batch_size,
                               seed=cfg.seed, optimizer=opt, start_epoch=start, log=fh)
        io.atomic_write_text(out / "train_log.jsonl", fh.getvalue())
    meta.update(epoch=result.epochs_run, test_accuracy=result.test_accuracy)
    io.save_checkpoint(out / "model.ckpt", model, opt, meta)
    io.write_report(out / "metrics.jsonl", [
        {"epoch": e, "model": args.model, "test_accuracy": a}
        for e, a in enumerate(result.test_accuracy, start=result.epochs_run - len(result.test_accuracy))])
    final = result.test_accuracy[-1] if result.test_accuracy else None
    print(f"{args.model}: {result.epochs_run} epochs, test accuracy {final}")
    return {"checkpoint": "model.ckpt", "final_test_accuracy": final}


def cmd_convert(args, cfg, out: Path) -> dict:
    ann = _load(args.ann, ANN)
    train, test = cfg.data()
    calib = train.images[:args.calibration]
    images = test.images[:args.n]
    ann_pred = ann.predict(images)
    rows = []
    for steps in args.steps:
        snn, state = convert(ann, calib, steps, args.scale, seed=cfg.seed, return_state=True)
        agree = accuracy(snn.predict(images, seed=cfg.seed), ann_pred)
        io.save_checkpoint(out / f"snn_T{steps}.ckpt", snn, metadata={"seed": cfg.seed, "source": str(args.ann)})
        rows.append({"num_steps": steps, "agreement": agree, "thresholds": state.scaled_thresholds,
                     "scale": args.scale, "n_images": len(images)})
        print(f"T={steps}: agreement {agree:.4f}")
    io.write_report(out / "conversion.jsonl", rows)
    return {"steps": args.steps}


def cmd_infer(args, cfg, out: Path) -> dict:
    model = _load(args.checkpoint, SpikingNetwork)
    if args.images:
        images = np.stack([_read_image(p, model) for p in args.images])
        names, labels = [str(p) for p in args.images], None
    else:
        _, test = cfg.data()
        images, names, labels = test.images[:args.n], test.names[:args.n], test.labels[:args.n]
    preds = model.predict(images, seed=cfg.seed)
    rows = [{"image": n, "prediction": int(p), **({"label": int(labels[i])} if labels is not None else {})}
            for i, (n, p) in enumerate(zip(names, preds))]
    io.write_report(out / "predictions.jsonl", rows)
    with tn.no_grad():
        record = model.eval().forward(poisson_encode(images[:1], model.config.num_steps, cfg.seed))
    io.export_spike_counts(record, out / "spike_counts.tsv")
    summary = {"n_images": len(images)}
    if labels is not None:
        summary["accuracy"] = accuracy(preds, labels)
        print(f"accuracy {summary['accuracy']:.4f} on {len(images)} images")
    return summary


def cmd_explain(args, cfg, out: Path) -> dict:
    snn = _load(args.checkpoint, SpikingNetwork)
    image, label, name = _pick_image(args, cfg, snn)
    class_id = args.class_id if args.class_id is not None else label
    with_cam = args.method in ("gradcam", "both")
    record, sams, cams = ex.explain_image(snn, image, args.layer, class_id, args.gamma, cfg.seed, with_cam)
    ref = None
    if args.reference_ann:
        ann = _load(args.reference_ann, ANN)
        cid = class_id if class_id is not None else int(record.prediction()[0])
        ref = ann_gradcam(ann, image, args.layer, cid)
    rows = []
    series = []
    if args.method in ("sam", "both"):
        series.append(("sam", sams))
    if with_cam:
        series.append(("snn-gradcam", cams))
    heat_dir = out / "heatmaps"
    for method, maps in series:
        for hm in maps:
            stem = f"{method}_t{hm.time_step:03d}"
            io.export_heatmap(hm, heat_dir / f"{stem}.pgm", mode="normalized")
            if args.overlay:
                io.export_heatmap(hm, heat_dir / f"{stem}_overlay.ppm", mode="overlay", image=image)
            rows.append({"image": name, "layer": args.layer, "method": method, "time_step": hm.time_step,
                         "variance": heatmap_variance(hm),
                         "variance_normalized": heatmap_variance(hm.normalized())})
        if ref is not None:
            res = localization_error(maps, ref, resolution=image.shape[1:])
            rows.append({"image": name, "layer": args.layer, "method": method,
                         "localization_error": res.minimum, "argmin_t": res.argmin})
    io.export_raster(record, out / "raster.tsv")
    io.export_spike_counts(record, out / "spike_counts.tsv")
    io.write_report(out / "metrics.jsonl", rows)
    pred = int(record.prediction()[0])
    print(f"{name}: prediction {pred}, {len(series) * record.num_steps} heatmaps in {heat_dir}")
    return {"image": name, "prediction": pred, "label": label}


def cmd_attack(args, cfg, out: Path) -> dict:
    ann = _load(args.ann, ANN)
    snn = _load(args.snn, SpikingNetwork)
    _, test = cfg.data()
    res = ex.attack_study(ann, snn, test.images[:args.n], test.labels[:args.n], cfg.epsilons,
                          layer=args.layer, n_heatmaps=args.n_heatmaps, gamma=args.gamma, seed=cfg.seed)
    rows = [{"epsilon": e, "ann_accuracy": a, "snn_accuracy": s, "snn_attack": res["snn_attack"]}
            for e, a, s in zip(res["epsilons"], res["ann_accuracy"], res["snn_accuracy"])]
    rows.append({"epsilon": res["heatmap_epsilon"], "layer": res["layer"],
                 "ann_gradcam_l1": res["ann_gradcam_l1"], "snn_sam_l1": res["snn_sam_l1"]})
    io.write_report(out / "attack.jsonl", rows)
    for r in rows[:-1]:
        print(f"eps={r['epsilon']:.5f}: ann {r['ann_accuracy']:.3f}  snn(proxy) {r['snn_accuracy']:.3f}")
    return {"n_images": min(args.n, len(test))}


def cmd_metrics(args, cfg, out: Path) -> dict:
    train, test = cfg.data()
    images, labels = test.images[:args.n], test.labels[:args.n]
    if args.study == "smoothing":
        rows = ex.smoothing_study(_load(args.snn, SpikingNetwork), images, labels, args.layers[0], args.gamma, cfg.seed)
        share = float(np.mean([r["sam_variance"] > r["gradcam_variance"] for r in rows]))
        print(f"SAM variance above Grad-CAM (normalized maps) on {share:.1%} of images")
    elif args.study == "gamma-sweep":
        snn, ann = _load(args.snn, SpikingNetwork), _load(args.ann, ANN)
        rows = []
        for layer in args.layers:
            rows += ex.gamma_sweep(snn, ann, images, labels, layer, cfg.gammas, cfg.seed)
        print(ex.format_gamma_table(rows), end="")
    elif args.study == "leak-ablation":
        ann = _load(args.ann, ANN) if args.ann else None
        rows = ex.leak_ablation(cfg, train, test, ann, n_explain=args.n)
        for r in rows:
            print(json.dumps(r, sort_keys=True))
    else:  # pragma: no cover - argparse restricts choices
        raise UsageError(f"unknown study {args.study}")
    io.write_report(out / "metrics.jsonl", [{"study": args.study, **r} for r in rows])
    return {"study": args.study, "rows": len(rows)}


def cmd_suppress(args, cfg, out: Path) -> dict:
    snn = _load(args.checkpoint, SpikingNetwork)
    if args.image_a and args.image_b:
        a, b = _read_image(args.image_a, snn), _read_image(args.image_b, snn)
    else:
        _, test = cfg.data()
        rng = np.random.default_rng(cfg.seed)
        i, j = rng.choice(len(test), size=2, replace=False)
        a, b = test.images[i], test.images[j]
    res = ex.suppression(snn, a, b, args.layer, args.gamma, cfg.seed)
    write_netpbm(out / "composite.pgm", np.rint(res["composite"]), ["spikesam composite: left | right"])
    for hm in res["sams"]:
        io.export_heatmap(hm, out / "heatmaps" / f"sam_t{hm.time_step:03d}.pgm", mode="normalized")
        io.export_heatmap(hm, out / "heatmaps" / f"sam_t{hm.time_step:03d}_overlay.ppm",
                          mode="overlay", image=res["composite"])
    summary = {"prediction": res["prediction"], "left_share": res["left_share"], "layer": args.layer}
    io.atomic_write_text(out / "suppression.json", json.dumps(summary, sort_keys=True, indent=2) + "\n")
    print(f"prediction {res['prediction']}; left share first/last step "
          f"{res['left_share'][0]:.3f}/{res['left_share'][-1]:.3f}")
    return {"prediction": res["prediction"]}


def cmd_report(args, cfg, out: Path) -> dict:
    src = Path(args.input)
    files = [src] if src.is_file() else sorted(src.rglob("metrics.jsonl"))
    rows = [r for f in files for r in io.read_report(f) if "gamma" in r and "localization_error" in r]
    if not rows:
        raise UsageError(f"no gamma-sweep records under {src}")
    table = ex.format_gamma_table(rows)
    summary = ex.summarize_gamma_sweep(rows)
    io.atomic_write_text(out / "gamma_table.tsv", table)
    io.atomic_write_text(out / "gamma_summary.json", json.dumps({
        "zero_gamma_beaten_by_image": summary["zero_gamma_beaten_by_image"],
        "mean": [{"layer": l, "gamma": g, "localization_error": v} for (l, g), v in summary["mean"].items()],
    }, sort_keys=True, indent=2) + "\n")
    print(table, end="")
    return {"sources": [str(f) for f in files]}


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    parser = argparse.ArgumentParser(prog="spikesam", description="Spiking network training and spike activation maps.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[parent], help=help_)
        p.set_defaults(func=fn)
        return p

    p = add("train", cmd_train, "train an SNN (surrogate gradient) or its ANN twin")
    p.add_argument("--model", choices=("snn", "ann"), default="snn")
    p.add_argument("--resume", help="SNN checkpoint to continue from")

    p = add("convert", cmd_convert, "convert a trained ANN into SNNs and measure agreement")
    p.add_argument("--ann", required=True)
    p.add_argument("--steps", type=_int_list, default=[25, 100, 400])
    p.add_argument("--scale", type=float, default=1.0, help="threshold multiplier in (0, 1]")
    p.add_argument("--calibration", type=int, default=512, help="training images used for threshold balancing")
    p.add_argument("-n", type=int, default=200, help="test images for agreement")

    p = add("infer", cmd_infer, "predict classes with an SNN checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="*", help="netpbm files (default: the test split)")
    p.add_argument("-n", type=int, default=400)

    for name, fn, help_ in (("explain", cmd_explain, "SAM / SNN Grad-CAM heatmaps for one image"),
                            ("suppress", cmd_suppress, "SAM over time for a two-object composite")):
        p = add(name, fn, help_)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--layer", type=int, default=0, help="hidden spiking layer (0-based)")
        p.add_argument("--gamma", type=float, default=ex.DEFAULT_SAM_GAMMA)
    exp_p = sub.choices["explain"]
    exp_p.add_argument("--image", help="netpbm file (default: test split item --index)")
    exp_p.add_argument("--index", type=int, default=0)
    exp_p.add_argument("--method", choices=("sam", "gradcam", "both"), default="sam")
    exp_p.add_argument("--class-id", type=int, help="class for Grad-CAM (default: label, else prediction)")
    exp_p.add_argument("--reference-ann", help="ANN checkpoint for localization error")
    exp_p.add_argument("--overlay", action="store_true", help="also write colour overlays")
    sup_p = sub.choices["suppress"]
    sup_p.add_argument("--image-a")
    sup_p.add_argument("--image-b")

    p = add("attack", cmd_attack, "FGSM robustness of ANN and SNN (rate-relaxed proxy)")
    p.add_argument("--ann", required=True)
    p.add_argument("--snn", required=True)
    p.add_argument("-n", type=int, default=200)
    p.add_argument("--n-heatmaps", type=int, default=20)
    p.add_argument("--layer", type=int, default=0)
    p.add_argument("--gamma", type=float, default=ex.DEFAULT_SAM_GAMMA)

    p = add("metrics", cmd_metrics, "heatmap studies: smoothing, gamma sweep, leak ablation")
    p.add_argument("--study", choices=("smoothing", "gamma-sweep", "leak-ablation"), required=True)
    p.add_argument("--snn")
    p.add_argument("--ann")
    p.add_argument("--layers", type=_int_list, default=[0, 1, 2])
    p.add_argument("--gamma", type=float, default=ex.DEFAULT_SAM_GAMMA)
    p.add_argument("-n", type=int, default=100)

    p = add("report", cmd_report, "aggregate gamma-sweep metrics into a table")
    p.add_argument("--input", required=True, help="metrics.jsonl or a directory searched recursively")
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
        out = output_dir(args)
        extra = args.func(args, cfg, out)
    except UsageError as exc:
        print(f"spikesam {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, IndexError, FileNotFoundError) as exc:
        print(f"spikesam {args.command}: error: {exc}", file=sys.stderr)
        return 1
    io.write_manifest(out, args.command, cfg.to_dict(), {"argv": argv, "result": extra})
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
