"""Deterministic desk-scale training loop, evaluation driver, ablation."""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import checkpoint_bytes
from .config import ModelConfig, load_config, packaged_config_path
from .data import DetectionDataset, letterbox
from .errors import ConfigurationError, InvalidStateError, UsageError
from .flops import model_cost
from .loss import SlideState, assign_targets, compute_pair_ious, detection_loss, update_mu
from .metrics import EvalReport, evaluate_detections
from .model import ModelGraph, build_msyolo, decode_predictions, nms
from .tensor import Tensor

BACKBONE_CONFIGS = {"mobilenetv4": "msyolo-small", "baseline": "baseline-small"}


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 8
    imgsz: int = 160
    width_scale: float = 0.25
    optimizer: str = "adaptive"  # "adaptive" (Adam) or "sgd_momentum"
    lr: float = 0.01
    final_lr_fraction: float = 0.05
    warmup_epochs: float = 3.0
    momentum: float = 0.9
    grad_clip_norm: float = 10.0
    seed: int = 0
    use_slide: bool = True
    backbone: str = "mobilenetv4"  # or "baseline"
    lambda_box: float = 7.5
    lambda_cls: float = 0.5
    mu_init: float = 0.5
    mu_momentum: float = 0.05
    hflip: bool = False
    conf_threshold: float = 0.25
    iou_threshold: float = 0.45
    max_steps: int = 0  # 0 = run all epochs
    model_config: str = ""  # explicit config path; otherwise packaged per backbone

    def __post_init__(self):
        if self.optimizer not in ("adaptive", "sgd_momentum"):
            raise ConfigurationError(f"unknown optimizer {self.optimizer!r}")
        if self.backbone not in BACKBONE_CONFIGS:
            raise ConfigurationError(
                f"unknown backbone {self.backbone!r}; choose from {sorted(BACKBONE_CONFIGS)}")
        if self.imgsz % 32 != 0:
            raise ConfigurationError(f"imgsz {self.imgsz} must be divisible by 32")
        if self.batch_size < 1 or self.epochs < 0:
            raise ConfigurationError("batch_size must be >= 1 and epochs >= 0")

    @staticmethod
    def from_sections(sections: dict, **overrides) -> "TrainConfig":
        """Build from parsed [train]/[loss]/[nms] config sections plus overrides."""
        def boolean(v):
            return str(v).strip().lower() in ("1", "true", "yes", "on")

        kw = {}
        train = sections.get("train", {})
        loss = sections.get("loss", {})
        nms_s = sections.get("nms", {})
        for key, conv, src in (
            ("epochs", int, train), ("batch_size", int, train), ("imgsz", int, train),
            ("width_scale", float, train), ("optimizer", str, train), ("lr", float, train),
            ("final_lr_fraction", float, train), ("warmup_epochs", float, train),
            ("momentum", float, train), ("grad_clip_norm", float, train),
            ("seed", int, train), ("hflip", boolean, train), ("max_steps", int, train),
            ("lambda_box", float, loss), ("lambda_cls", float, loss),
            ("use_slide", boolean, loss), ("mu_init", float, loss),
            ("mu_momentum", float, loss),
            ("conf_threshold", float, nms_s), ("iou_threshold", float, nms_s),
        ):
            if key in src:
                kw[key] = conv(src[key])
        kw.update(overrides)
        return TrainConfig(**kw)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


class TrainAbortError(InvalidStateError):
    """Non-finite loss; carries the offending step and a last-good checkpoint."""

    def __init__(self, step: int, checkpoint: bytes, message: str):
        super().__init__(message)
        self.step = step
        self.checkpoint = checkpoint


class SGDMomentum:
    def __init__(self, params, momentum: float):
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in params]

    def step(self, params, grads, lr: float):
        for p, g, v in zip(params, grads, self.velocity):
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.data.dtype)


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in params]
        self.v = [np.zeros_like(p.data) for p in params]
        self.t = 0

    def step(self, params, grads, lr: float):
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p.data -= (lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.data.dtype)


def lr_at(step: int, total_steps: int, warmup_steps: int, lr: float, final_fraction: float) -> float:
    """Linear warmup then cosine decay to lr * final_fraction."""
    if warmup_steps > 0 and step < warmup_steps:
        return lr * (step + 1) / warmup_steps
    span = max(1, total_steps - warmup_steps)
    progress = min(1.0, (step - warmup_steps) / span)
    return lr * (final_fraction + (1.0 - final_fraction) * 0.5 * (1.0 + math.cos(math.pi * progress)))


def clip_gradients(grads, max_norm: float) -> float:
    total = math.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads:
            g *= scale
    return total


@dataclass
class TrainLog:
    steps: list = field(default_factory=list)
    epochs: list = field(default_factory=list)

    def to_jsonl(self) -> str:
        import json

        lines = [json.dumps({"kind": "step", **rec}, sort_keys=True) for rec in self.steps]
        lines += [json.dumps({"kind": "epoch", **rec}, sort_keys=True) for rec in self.epochs]
        return "\n".join(lines) + ("\n" if lines else "")


@dataclass
class TrainResult:
    graph: ModelGraph
    log: TrainLog
    state: SlideState
    config: TrainConfig


def resolve_model_config(tc: TrainConfig, num_classes: int) -> ModelConfig:
    path = tc.model_config or packaged_config_path(BACKBONE_CONFIGS[tc.backbone])
    model_cfg, _ = load_config(path)
    return dataclasses.replace(model_cfg, width_scale=tc.width_scale,
                               num_classes=num_classes, input_channels=1)


def _letterboxed(dataset: DetectionDataset, imgsz: int):
    images, gts = [], []
    for img, g in zip(dataset.images, dataset.gts):
        lb, tr = letterbox(img, imgsz)
        images.append(lb)
        gts.append([(cid, tr.apply_box(box)) for cid, box in g])
    return images, gts


def train(dataset: DetectionDataset, tc: TrainConfig) -> TrainResult:
    """Run the full loop; deterministic for a fixed config and dataset."""
    if len(dataset) == 0:
        raise UsageError("training dataset is empty")
    model_cfg = resolve_model_config(tc, dataset.num_classes)
    graph = build_msyolo(model_cfg, seed=tc.seed)
    order_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, 0xDA7A]))

    lb_images, lb_gts = _letterboxed(dataset, tc.imgsz)
    n = len(lb_images)
    steps_per_epoch = math.ceil(n / tc.batch_size)
    total_steps = tc.epochs * steps_per_epoch
    if tc.max_steps > 0:
        total_steps = min(total_steps, tc.max_steps)
    warmup_steps = int(round(tc.warmup_epochs * steps_per_epoch))

    params = graph.parameters()
    opt = Adam(params) if tc.optimizer == "adaptive" else SGDMomentum(params, tc.momentum)
    state = SlideState(mu=tc.mu_init, ema_momentum=tc.mu_momentum)
    log = TrainLog()

    def abort(step_idx, message):
        # roll back to the newest weights that still produced a finite loss
        if last_good is not None:
            for p, saved in zip(params, last_good):
                p.data[...] = saved
        raise TrainAbortError(step_idx, checkpoint_bytes(graph),
                              f"aborted at step {step_idx}: {message}")

    last_good = None
    step = 0
    done = total_steps == 0
    while not done:
        perm = order_rng.permutation(n)
        for b0 in range(0, n, tc.batch_size):
            idx = perm[b0:b0 + tc.batch_size]
            batch_imgs = [lb_images[i] for i in idx]
            batch_gts = [list(lb_gts[i]) for i in idx]
            if tc.hflip:
                flips = order_rng.random(len(idx)) < 0.5
                for bi, flip in enumerate(flips):
                    if flip:
                        batch_imgs[bi] = batch_imgs[bi][:, ::-1]
                        s = tc.imgsz
                        batch_gts[bi] = [
                            (cid, (s - x2, y1, s - x1, y2))
                            for cid, (x1, y1, x2, y2) in batch_gts[bi]
                        ]
            x = np.ascontiguousarray(np.stack(batch_imgs)[:, None])

            raws = graph.forward(Tensor(x), training=True)
            grid_shapes = [(r.shape[2], r.shape[3]) for r in raws]
            assigns = assign_targets(grid_shapes, batch_gts)
            compute_pair_ious(raws, assigns)
            if tc.use_slide:
                state = update_mu(state, [t.pair_iou for t in assigns])
            try:
                loss, comps = detection_loss(
                    raws, assigns, state.mu,
                    lambda_box=tc.lambda_box, lambda_cls=tc.lambda_cls,
                    use_slide=tc.use_slide)
            except InvalidStateError as exc:
                abort(step, str(exc))
            last_good = [p.data.copy() for p in params]

            lr = lr_at(step, total_steps, warmup_steps, tc.lr, tc.final_lr_fraction)
            graph.zero_grad()
            loss.backward()
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in params]
            grad_norm = clip_gradients(grads, tc.grad_clip_norm)
            opt.step(params, grads, lr)

            log.steps.append({
                "step": step, "lr": lr, "grad_norm": grad_norm,
                "mu": state.mu, **comps,
            })
            step += 1
            if step >= total_steps:
                done = True
                break
    return TrainResult(graph=graph, log=log, state=state, config=tc)


def predict_images(graph: ModelGraph, images, imgsz: int, conf_threshold: float,
                   iou_threshold: float, batch_size: int = 8):
    """Letterbox, forward, decode, suppress, and map boxes back to source
    pixels. Returns per-image detection lists."""
    results = []
    for b0 in range(0, len(images), batch_size):
        chunk = images[b0:b0 + batch_size]
        lbs, trs = zip(*(letterbox(img, imgsz) for img in chunk))
        x = np.ascontiguousarray(np.stack(lbs)[:, None])
        with T.no_grad():
            raws = graph.forward(Tensor(x), training=False)
        decoded = decode_predictions(raws, conf_threshold)
        for img, tr, dets in zip(chunk, trs, decoded):
            kept = nms(dets, iou_threshold)
            final = []
            for d in kept:
                x1, y1, x2, y2 = tr.invert_box(d.box)
                h, w = img.shape
                x1, x2 = max(0.0, min(x1, w)), max(0.0, min(x2, w))
                y1, y2 = max(0.0, min(y1, h)), max(0.0, min(y2, h))
                if x1 < x2 and y1 < y2:
                    final.append(dataclasses.replace(d, box=(x1, y1, x2, y2)))
            results.append(final)
    return results


def evaluate(graph: ModelGraph, dataset: DetectionDataset, *, imgsz: int = 160,
             conf_threshold: float = 0.25, iou_threshold: float = 0.45,
             batch_size: int = 8) -> EvalReport:
    """Full per-class report for a trained graph on a dataset."""
    if len(dataset) == 0:
        raise UsageError("evaluation dataset is empty")
    if dataset.num_classes != graph.config.num_classes:
        raise ConfigurationError(
            f"dataset has {dataset.num_classes} classes but checkpoint was built "
            f"for {graph.config.num_classes}")
    dets = predict_images(graph, dataset.images, imgsz, conf_threshold, iou_threshold,
                          batch_size=batch_size)
    return evaluate_detections(dets, dataset.gts, dataset.class_names)


# -- ablation harness --------------------------------------------------------

ABLATION_GRID = (
    (False, False),
    (True, False),
    (False, True),
    (True, True),
)


@dataclass
class AblationRow:
    index: int
    mobilenetv4: bool
    slideloss: bool
    precision: float
    recall: float
    map50: float
    map50_95: float
    gflops: float


@dataclass
class AblationReport:
    rows: list

    def to_dict(self) -> dict:
        return {"rows": [vars(r) for r in self.rows]}

    def to_text(self) -> str:
        head = (f"{'#':<3}{'MobileNetv4':<13}{'SlideLoss':<11}{'Precision':>10}"
                f"{'Recall':>8}{'mAP50':>8}{'mAP50-95':>10}{'GFLOPs':>8}")
        lines = [head]
        for r in self.rows:
            lines.append(
                f"{r.index:<3}{('yes' if r.mobilenetv4 else '-'):<13}"
                f"{('yes' if r.slideloss else '-'):<11}"
                f"{r.precision:>10.3f}{r.recall:>8.3f}{r.map50:>8.3f}"
                f"{r.map50_95:>10.3f}{r.gflops:>8.4f}")
        return "\n".join(lines)


def ablate(dataset: DetectionDataset, base: TrainConfig) -> AblationReport:
    """Train and evaluate the four backbone/loss combinations under the
    same seed and budget; emits the standard ablation table layout."""
    rows = []
    for i, (use_mnv4, use_slide) in enumerate(ABLATION_GRID, start=1):
        tc = dataclasses.replace(
            base,
            backbone="mobilenetv4" if use_mnv4 else "baseline",
            use_slide=use_slide,
        )
        result = train(dataset, tc)
        report = evaluate(result.graph, dataset, imgsz=tc.imgsz,
                          conf_threshold=tc.conf_threshold,
                          iou_threshold=tc.iou_threshold)
        cost = model_cost(result.graph, (1, 1, tc.imgsz, tc.imgsz))
        rows.append(AblationRow(
            index=i, mobilenetv4=use_mnv4, slideloss=use_slide,
            precision=report.precision, recall=report.recall,
            map50=report.map50, map50_95=report.map50_95,
            gflops=cost.gflops))
    return AblationReport(rows=rows)
