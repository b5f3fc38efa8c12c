"""Command-line interface: train, eval, detect, flops, stats, synth, ablate.

Every run writes a ``run.json`` manifest (resolved config echo, seed, and
sha256 of each artifact) into the output directory; artifacts are written
atomically (temp file + rename). Exit codes: 0 success, 1 invalid
configuration or input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile

import numpy as np

from . import checkpoint as ckpt
from . import data as D
from .config import load_config, packaged_config_path
from .errors import (ConfigurationError, InvalidStateError, MSYoloError, ParseError,
                     UsageError, ValidationError)
from .flops import model_cost, scaling_check
from .metrics import evaluate_detections, load_predictions_jsonl
from .model import build_msyolo
from .trainer import (TrainConfig, ablate, evaluate, predict_images, train)

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


def write_atomic(path: str, payload: bytes) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class RunDir:
    """Collects artifacts and finalizes the manifest."""

    def __init__(self, out: str, subcommand: str, argv, config_echo: dict, seed):
        self.out = out
        self.manifest = {
            "subcommand": subcommand,
            "argv": list(argv),
            "config": config_echo,
            "seed": seed,
            "outputs": {},
        }
        os.makedirs(out, exist_ok=True)

    def write(self, rel: str, payload) -> str:
        if isinstance(payload, str):
            payload = payload.encode("utf-8")
        path = os.path.join(self.out, rel)
        write_atomic(path, payload)
        self.manifest["outputs"][rel] = hashlib.sha256(payload).hexdigest()
        return path

    def finalize(self) -> None:
        blob = json.dumps(self.manifest, indent=2, sort_keys=True).encode("utf-8")
        write_atomic(os.path.join(self.out, "run.json"), blob)


def _train_overrides(args) -> dict:
    mapping = {
        "epochs": args.epochs, "batch_size": args.batch_size, "imgsz": args.imgsz,
        "width_scale": args.width_scale, "lr": args.lr, "seed": args.seed,
        "optimizer": args.optimizer, "backbone": args.backbone,
        "max_steps": args.max_steps, "conf_threshold": args.conf,
        "iou_threshold": args.iou,
    }
    overrides = {k: v for k, v in mapping.items() if v is not None}
    if getattr(args, "slide", None) is not None:
        overrides["use_slide"] = args.slide
    return overrides


def _load_train_config(args) -> TrainConfig:
    path = args.config or packaged_config_path("msyolo-small")
    _, sections = load_config(path)
    tc = TrainConfig.from_sections(sections, **_train_overrides(args))
    if args.config:
        tc = dataclasses.replace(tc, model_config=args.config)
    return tc


def _load_dataset(spec: str, tc: TrainConfig, n_synth: int, frequencies) -> D.DetectionDataset:
    if spec == "synth":
        return D.synth_dataset(tc.seed, n_synth, frequencies, image_size=tc.imgsz)
    ann_path = os.path.join(spec, "annotations.json")
    if not os.path.isfile(ann_path):
        raise UsageError(f"dataset {spec!r}: expected directory with annotations.json")
    annset = D.load_annotations(ann_path)
    return D.dataset_from_annotations(annset, spec)


def _parse_frequencies(text: str):
    return [float(v) for v in text.split(",") if v.strip() != ""]


# -- subcommands ------------------------------------------------------------


def cmd_synth(args, argv) -> int:
    freqs = _parse_frequencies(args.frequencies)
    ds = D.synth_dataset(args.seed, args.n_images, freqs, image_size=args.image_size)
    run = RunDir(args.out, "synth", argv,
                 {"seed": args.seed, "n_images": args.n_images, "frequencies": freqs,
                  "image_size": args.image_size}, args.seed)
    annset = D.synth_to_annotations(ds, file_prefix="images/synth")
    for i, img in enumerate(ds.images):
        buf = _pgm_bytes(img)
        run.write(f"images/synth_{i:05d}.pgm", buf)
    run.write("annotations.json",
              json.dumps(annset.to_coco_dict(), indent=2, sort_keys=True))
    run.finalize()
    print(f"wrote {len(ds.images)} images and annotations.json to {args.out}")
    return EXIT_OK


def _pgm_bytes(image01: np.ndarray) -> bytes:
    arr = np.clip(np.rint(image01 * 255.0), 0, 255).astype(np.uint8)
    h, w = arr.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + arr.tobytes()


def cmd_train(args, argv) -> int:
    tc = _load_train_config(args)
    ds = _load_dataset(args.dataset, tc, args.synth_images,
                       _parse_frequencies(args.synth_frequencies))
    result = train(ds, tc)
    run = RunDir(args.out, "train", argv, tc.to_dict(), tc.seed)
    run.write("checkpoint.msyc", ckpt.checkpoint_bytes(result.graph))
    run.write("train_log.jsonl", result.log.to_jsonl())
    report = evaluate(result.graph, ds, imgsz=tc.imgsz,
                      conf_threshold=tc.conf_threshold, iou_threshold=tc.iou_threshold)
    run.write("eval_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    run.write("eval_report.txt", report.to_text())
    run.finalize()
    print(report.to_text())
    print(f"final mu: {result.state.mu:.4f}  checkpoint: {os.path.join(args.out, 'checkpoint.msyc')}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    tc = _load_train_config(args)
    ds = _load_dataset(args.dataset, tc, args.synth_images,
                       _parse_frequencies(args.synth_frequencies))
    if args.predictions:
        dets = load_predictions_jsonl(args.predictions, len(ds))
        report = evaluate_detections(dets, ds.gts, ds.class_names)
    else:
        if not args.checkpoint:
            raise UsageError("eval needs --checkpoint or --predictions")
        graph = ckpt.load_checkpoint(args.checkpoint)
        report = evaluate(graph, ds, imgsz=tc.imgsz,
                          conf_threshold=tc.conf_threshold, iou_threshold=tc.iou_threshold)
    run = RunDir(args.out, "eval", argv, tc.to_dict(), tc.seed)
    run.write("eval_report.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    run.write("eval_report.txt", report.to_text())
    run.finalize()
    print(report.to_text())
    return EXIT_OK


def _draw_box_outline(img: np.ndarray, box, value: float = 1.0) -> None:
    h, w = img.shape
    x1 = int(max(0, min(round(box[0]), w - 1)))
    y1 = int(max(0, min(round(box[1]), h - 1)))
    x2 = int(max(0, min(round(box[2]), w - 1)))
    y2 = int(max(0, min(round(box[3]), h - 1)))
    img[y1, x1:x2 + 1] = value
    img[y2, x1:x2 + 1] = value
    img[y1:y2 + 1, x1] = value
    img[y1:y2 + 1, x2] = value


def cmd_detect(args, argv) -> int:
    tc = _load_train_config(args)
    graph = ckpt.load_checkpoint(args.checkpoint)
    run = RunDir(args.out, "detect", argv, tc.to_dict(), tc.seed)
    lines = []
    failures = 0
    for path in args.images:
        try:
            img = D.read_image(path)
        except (OSError, MSYoloError) as exc:
            print(f"error: detect: {path}: {exc}", file=sys.stderr)
            failures += 1
            continue
        dets = predict_images(graph, [img], tc.imgsz, tc.conf_threshold, tc.iou_threshold)[0]
        for d in dets:
            lines.append(json.dumps({
                "image": path,
                "class_id": d.class_id,
                "box": [round(v, 3) for v in d.box],
                "confidence": round(d.confidence, 6),
            }, sort_keys=True))
        if args.overlay:
            overlay = img.copy()
            for d in dets:
                _draw_box_outline(overlay, d.box)
            run.write(os.path.basename(path) + ".overlay.pgm", _pgm_bytes(overlay))
    run.write("detections.jsonl", "\n".join(lines) + ("\n" if lines else ""))
    run.finalize()
    print(f"{len(lines)} detections over {len(args.images) - failures} images")
    return EXIT_RUNTIME if failures else EXIT_OK


def cmd_flops(args, argv) -> int:
    path = args.config or packaged_config_path("msyolo-small")
    model_cfg, _ = load_config(path)
    if args.width_scale is not None:
        model_cfg = dataclasses.replace(model_cfg, width_scale=args.width_scale)
    graph = build_msyolo(model_cfg, seed=0)
    report = model_cost(graph, (1, model_cfg.input_channels, args.imgsz, args.imgsz))
    run = RunDir(args.out, "flops", argv, model_cfg.to_dict(), 0)
    run.write("flops.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    run.write("flops.txt", report.to_text())
    run.finalize()
    print(report.to_text())
    if args.scaling_factor:
        ratio = scaling_check(graph, (1, model_cfg.input_channels, args.imgsz, args.imgsz),
                              args.scaling_factor)
        print(f"scaling x{args.scaling_factor}: FLOP ratio {ratio:.6f}")
    return EXIT_OK


def cmd_stats(args, argv) -> int:
    class_filter = args.classes.split(",") if args.classes else None
    if args.split:
        sets = {}
        for item in args.split:
            if "=" not in item:
                raise UsageError(f"--split expects name=path, got {item!r}")
            name, path = item.split("=", 1)
            annset = D.load_annotations(path)
            if class_filter:
                annset = D.filter_categories(annset, class_filter)
            sets[name] = annset
        table = D.stats_from_sets(sets)
        filtered_counts = {
            name: {"pictures": len(s.images), "instances": len(s.instances),
                   "pictures_with_instances": D.images_with_instances(s)}
            for name, s in sets.items()
        }
    else:
        if not args.annotations:
            raise UsageError("stats needs --annotations or --split entries")
        annset = D.load_annotations(args.annotations)
        if class_filter:
            annset = D.filter_categories(annset, class_filter)
        splits = D.autosplit(annset, seed=args.seed or 0)
        table = D.dataset_stats(annset, splits)
        filtered_counts = {"all": {"pictures": len(annset.images),
                                   "instances": len(annset.instances),
                                   "pictures_with_instances": D.images_with_instances(annset)}}
    run = RunDir(args.out, "stats", argv, {"classes": class_filter}, args.seed or 0)
    payload = table.to_dict() | {"filtered": filtered_counts}
    run.write("stats.json", json.dumps(payload, indent=2, sort_keys=True))
    run.write("stats.txt", table.to_text())
    run.finalize()
    print(table.to_text())
    return EXIT_OK


def cmd_ablate(args, argv) -> int:
    tc = _load_train_config(args)
    ds = _load_dataset(args.dataset, tc, args.synth_images,
                       _parse_frequencies(args.synth_frequencies))
    report = ablate(ds, tc)
    run = RunDir(args.out, "ablate", argv, tc.to_dict(), tc.seed)
    run.write("ablation.json", json.dumps(report.to_dict(), indent=2, sort_keys=True))
    run.write("ablation.txt", report.to_text())
    run.finalize()
    print(report.to_text())
    return EXIT_OK


# -- parser -------------------------------------------------------------------


def _add_train_opts(p: argparse.ArgumentParser):
    p.add_argument("--config", help="config file (default: packaged msyolo-small)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--imgsz", type=int)
    p.add_argument("--width-scale", dest="width_scale", type=float)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--optimizer", choices=("adaptive", "sgd_momentum"))
    p.add_argument("--backbone", choices=("mobilenetv4", "baseline"))
    p.add_argument("--max-steps", dest="max_steps", type=int)
    p.add_argument("--conf", type=float)
    p.add_argument("--iou", type=float)
    slide = p.add_mutually_exclusive_group()
    slide.add_argument("--slide", dest="slide", action="store_true", default=None)
    slide.add_argument("--no-slide", dest="slide", action="store_false", default=None)


def _add_dataset_opts(p: argparse.ArgumentParser):
    p.add_argument("--dataset", required=True,
                   help="dataset directory (annotations.json + images) or 'synth'")
    p.add_argument("--synth-images", dest="synth_images", type=int, default=24)
    p.add_argument("--synth-frequencies", dest="synth_frequencies",
                   default="0.4,0.3,0.2,0.1")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msyolo",
                                     description="Desk-scale infrared object detection")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("train", help="train a model")
    _add_train_opts(p)
    _add_dataset_opts(p)
    p.add_argument("--out", default="runs/train")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint or prediction file")
    _add_train_opts(p)
    _add_dataset_opts(p)
    p.add_argument("--checkpoint")
    p.add_argument("--predictions", help="JSON-lines detections for offline evaluation")
    p.add_argument("--out", default="runs/eval")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("detect", help="run detection on image files")
    _add_train_opts(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--images", nargs="+", required=True)
    p.add_argument("--overlay", action="store_true", help="write annotated PGM overlays")
    p.add_argument("--out", default="runs/detect")
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("flops", help="profile analytic FLOPs/MACs/params")
    p.add_argument("--config", help="config file (default: packaged msyolo-small)")
    p.add_argument("--imgsz", type=int, default=640)
    p.add_argument("--width-scale", dest="width_scale", type=float)
    p.add_argument("--scaling-factor", dest="scaling_factor", type=int)
    p.add_argument("--out", default="runs/flops")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("stats", help="dataset statistics")
    p.add_argument("--annotations", help="single annotation file (with --seed autosplit)")
    p.add_argument("--split", action="append",
                   help="name=path annotation file per split (repeatable)")
    p.add_argument("--classes", help="comma-separated category subset filter")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="runs/stats")
    p.set_defaults(fn=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-images", dest="n_images", type=int, default=24)
    p.add_argument("--frequencies", default="0.4,0.3,0.2,0.1")
    p.add_argument("--image-size", dest="image_size", type=int, default=160)
    p.add_argument("--out", default="runs/synth")
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("ablate", help="train/evaluate the 2x2 backbone-loss grid")
    _add_train_opts(p)
    _add_dataset_opts(p)
    p.add_argument("--out", default="runs/ablate")
    p.set_defaults(fn=cmd_ablate)

    return parser


def run(argv) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args, argv)
    except (ConfigurationError, UsageError, ParseError, ValidationError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (InvalidStateError, OSError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main() -> None:
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
