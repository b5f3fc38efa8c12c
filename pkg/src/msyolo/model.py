"""MS-YOLO network graph: backbone, neck, heads, decode, NMS.

The network is a flat DAG of primitive nodes (conv, batchnorm, relu6,
maxpool, upsample, concat, add). Composite structures (conv blocks, UIB
blocks, SPPF, the FPN/PAN neck, decoupled heads) are expanded into
primitives at build time, which keeps forward execution, shape inference,
checkpointing, and FLOP accounting uniform.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .config import ConvBlockSpec, ModelConfig, SPPFSpec, UIBSpec
from .errors import ConfigurationError, UsageError
from .tensor import Tensor

CLS_BIAS_PRIOR = float(-math.log(99.0))  # start class scores near 0.01


# -- primitive node layers -------------------------------------------------


class PConv:
    kind = "conv"

    def __init__(self, c_in, c_out, k, stride=1, groups=1, bias=False, bias_init=0.0):
        self.c_in = c_in
        self.c_out = c_out
        self.k = k
        self.stride = stride
        self.padding = k // 2
        self.groups = groups
        self.has_bias = bias
        self.bias_init = bias_init
        self.weight = Tensor(np.zeros((c_out, c_in // groups, k, k), dtype=np.float32),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(c_out, dtype=np.float32), requires_grad=True) if bias else None

    def init_weights(self, rng):
        fan_in = self.k * self.k * (self.c_in // self.groups)
        limit = math.sqrt(6.0 / fan_in)
        self.weight.data[...] = rng.uniform(-limit, limit, self.weight.data.shape).astype(np.float32)
        if self.bias is not None:
            self.bias.data[...] = self.bias_init

    def forward(self, inputs, training):
        return T.conv2d(inputs[0], self.weight, self.bias,
                        stride=self.stride, padding=self.padding, groups=self.groups)

    def out_shape(self, in_shapes):
        n, c, h, w = in_shapes[0]
        if c != self.c_in:
            raise ConfigurationError(f"conv expects {self.c_in} input channels, got {c}")
        ho = T._conv_out_extent(h, self.k, self.stride, self.padding, "height")
        wo = T._conv_out_extent(w, self.k, self.stride, self.padding, "width")
        return (n, self.c_out, ho, wo)

    def named_params(self):
        yield "weight", self.weight
        if self.bias is not None:
            yield "bias", self.bias

    def named_buffers(self):
        return iter(())


class PBatchNorm:
    kind = "batchnorm"

    def __init__(self, c, eps=1e-3, momentum=0.03):
        self.c = c
        self.eps = eps
        self.momentum = momentum
        self.gamma = Tensor(np.ones(c, dtype=np.float32), requires_grad=True)
        self.beta = Tensor(np.zeros(c, dtype=np.float32), requires_grad=True)
        self.running_mean = np.zeros(c, dtype=np.float32)
        self.running_var = np.ones(c, dtype=np.float32)

    def init_weights(self, rng):
        self.gamma.data[...] = 1.0
        self.beta.data[...] = 0.0
        self.running_mean[...] = 0.0
        self.running_var[...] = 1.0

    def forward(self, inputs, training):
        return T.batch_norm(inputs[0], self.gamma, self.beta,
                            self.running_mean, self.running_var,
                            eps=self.eps, momentum=self.momentum, training=training)

    def out_shape(self, in_shapes):
        n, c, h, w = in_shapes[0]
        if c != self.c:
            raise ConfigurationError(f"batchnorm expects {self.c} channels, got {c}")
        return in_shapes[0]

    def named_params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def named_buffers(self):
        yield "running_mean", self.running_mean
        yield "running_var", self.running_var


class _Stateless:
    def init_weights(self, rng):
        pass

    def named_params(self):
        return iter(())

    def named_buffers(self):
        return iter(())


class PReLU6(_Stateless):
    kind = "relu6"

    def forward(self, inputs, training):
        return T.relu6(inputs[0])

    def out_shape(self, in_shapes):
        return in_shapes[0]


class PMaxPool(_Stateless):
    kind = "maxpool"

    def __init__(self, k, stride=1):
        self.k = k
        self.stride = stride
        self.padding = k // 2

    def forward(self, inputs, training):
        return T.max_pool2d(inputs[0], self.k, stride=self.stride, padding=self.padding)

    def out_shape(self, in_shapes):
        n, c, h, w = in_shapes[0]
        ho = T._conv_out_extent(h, self.k, self.stride, self.padding, "height")
        wo = T._conv_out_extent(w, self.k, self.stride, self.padding, "width")
        return (n, c, ho, wo)


class PUpsample(_Stateless):
    kind = "upsample"

    def forward(self, inputs, training):
        return T.upsample_nearest_2x(inputs[0])

    def out_shape(self, in_shapes):
        n, c, h, w = in_shapes[0]
        return (n, c, 2 * h, 2 * w)


class PConcat(_Stateless):
    kind = "concat"

    def forward(self, inputs, training):
        return T.concat_channels(inputs)

    def out_shape(self, in_shapes):
        base = in_shapes[0]
        for s in in_shapes[1:]:
            if s[0] != base[0] or s[2:] != base[2:]:
                raise ConfigurationError(f"concat spatial mismatch: {base} vs {s}")
        return (base[0], sum(s[1] for s in in_shapes), base[2], base[3])


class PAdd(_Stateless):
    kind = "add"

    def forward(self, inputs, training):
        return inputs[0] + inputs[1]

    def out_shape(self, in_shapes):
        if in_shapes[0] != in_shapes[1]:
            raise ConfigurationError(f"residual add shape mismatch: {in_shapes[0]} vs {in_shapes[1]}")
        return in_shapes[0]


@dataclass
class Node:
    name: str
    op: object
    inputs: list  # node ids; -1 refers to the graph input


INPUT = -1


class ModelGraph:
    """Executable network: ordered primitive nodes plus three output taps."""

    def __init__(self, config: ModelConfig, nodes: list[Node], output_ids: list[int],
                 require_div32: bool = True):
        self.config = config
        self.nodes = nodes
        self.output_ids = output_ids
        self.require_div32 = require_div32

    # -- execution -----------------------------------------------------

    def forward(self, image, training: bool = False) -> list[Tensor]:
        """Run the network; returns the three raw head maps (strides 8/16/32).

        Output maps have shape (N, 4 + num_classes, H/stride, W/stride).
        """
        x = image if isinstance(image, Tensor) else Tensor(image)
        if x.ndim != 4:
            raise UsageError(f"expected 4-D input (N,C,H,W), got ndim {x.ndim}")
        n, c, h, w = x.shape
        if c == 1 and self.config.input_channels == 3:
            x = T.concat_channels([x, x, x])  # grayscale replication adapter
            c = 3
        if c != self.config.input_channels:
            raise ConfigurationError(
                f"input has {c} channels but model expects {self.config.input_channels}")
        if self.require_div32 and (h % 32 != 0 or w % 32 != 0):
            raise UsageError(
                f"input {h}x{w} not divisible by 32; letterbox to e.g. "
                f"{32 * math.ceil(h / 32)}x{32 * math.ceil(w / 32)} first")
        values = {INPUT: x}
        for i, node in enumerate(self.nodes):
            values[i] = node.op.forward([values[j] for j in node.inputs], training)
        return [values[i] for i in self.output_ids]

    def infer_shapes(self, input_shape) -> dict:
        """Static shape propagation; raises the same errors a forward would."""
        shapes = {INPUT: tuple(input_shape)}
        for i, node in enumerate(self.nodes):
            shapes[i] = node.op.out_shape([shapes[j] for j in node.inputs])
        return shapes

    def output_shapes(self, input_shape) -> list[tuple]:
        shapes = self.infer_shapes(input_shape)
        return [shapes[i] for i in self.output_ids]

    # -- state ----------------------------------------------------------

    def init_weights(self, seed: int = 0):
        rng = np.random.default_rng(seed)
        for node in self.nodes:
            node.op.init_weights(rng)

    def named_parameters(self):
        for node in self.nodes:
            for pname, p in node.op.named_params():
                yield f"{node.name}.{pname}", p

    def named_buffers(self):
        for node in self.nodes:
            for bname, b in node.op.named_buffers():
                yield f"{node.name}.{bname}", b

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_params(self) -> int:
        return sum(p.data.size for p in self.parameters())


# -- graph construction ------------------------------------------------


class GraphBuilder:
    def __init__(self, config: ModelConfig):
        self.config = config
        self.nodes: list[Node] = []

    def add(self, name, op, inputs) -> int:
        self.nodes.append(Node(name, op, list(inputs)))
        return len(self.nodes) - 1

    def conv_block(self, name, src, c_in, c_out, k, s, activation="relu6") -> int:
        i = self.add(f"{name}.conv", PConv(c_in, c_out, k, stride=s), [src])
        i = self.add(f"{name}.bn", PBatchNorm(c_out), [i])
        if activation == "relu6":
            i = self.add(f"{name}.act", PReLU6(), [i])
        return i

    def uib(self, name, src, spec: UIBSpec) -> int:
        """Expand a UIB spec into its primitive sequence.

        Stage order: optional depthwise k1, 1x1 expansion, optional
        depthwise k2 (strided), 1x1 projection; batchnorm after every conv,
        ReLU6 after all but the projection, residual when s==1 and
        c_in==c_out. A zero kernel omits that depthwise stage entirely.
        """
        mid = spec.expanded
        # the stride rides on dw2 when present, else dw1, else the expansion
        s_dw1 = spec.s if (spec.k2 == 0 and spec.k1 > 0) else 1
        s_exp = spec.s if (spec.k1 == 0 and spec.k2 == 0) else 1
        s_dw2 = spec.s if spec.k2 > 0 else 1
        i = src
        if spec.k1 > 0:
            i = self.add(f"{name}.dw1.conv",
                         PConv(spec.c_in, spec.c_in, spec.k1, stride=s_dw1, groups=spec.c_in), [i])
            i = self.add(f"{name}.dw1.bn", PBatchNorm(spec.c_in), [i])
            i = self.add(f"{name}.dw1.act", PReLU6(), [i])
        i = self.add(f"{name}.expand.conv", PConv(spec.c_in, mid, 1, stride=s_exp), [i])
        i = self.add(f"{name}.expand.bn", PBatchNorm(mid), [i])
        i = self.add(f"{name}.expand.act", PReLU6(), [i])
        if spec.k2 > 0:
            i = self.add(f"{name}.dw2.conv",
                         PConv(mid, mid, spec.k2, stride=s_dw2, groups=mid), [i])
            i = self.add(f"{name}.dw2.bn", PBatchNorm(mid), [i])
            i = self.add(f"{name}.dw2.act", PReLU6(), [i])
        i = self.add(f"{name}.project.conv", PConv(mid, spec.c_out, 1), [i])
        i = self.add(f"{name}.project.bn", PBatchNorm(spec.c_out), [i])
        if spec.has_residual:
            i = self.add(f"{name}.residual", PAdd(), [src, i])
        return i

    def sppf(self, name, src, c_in, c_out, k) -> int:
        mid = max(1, c_in // 2)
        red = self.conv_block(f"{name}.reduce", src, c_in, mid, 1, 1)
        p1 = self.add(f"{name}.pool1", PMaxPool(k), [red])
        p2 = self.add(f"{name}.pool2", PMaxPool(k), [p1])
        p3 = self.add(f"{name}.pool3", PMaxPool(k), [p2])
        cat = self.add(f"{name}.cat", PConcat(), [red, p1, p2, p3])
        return self.conv_block(f"{name}.fuse", cat, 4 * mid, c_out, 1, 1)


def build_uib(spec: UIBSpec, batch: int = 1) -> ModelGraph:
    """Standalone single-UIB graph (structure and parameter-count tests)."""
    cfg = ModelConfig(name="uib", input_channels=1, num_classes=1, backbone=[])
    b = GraphBuilder(cfg)
    # adapt the 1-channel test input up to c_in without batchnorm noise
    src = b.add("adapt", PConv(1, spec.c_in, 1), [INPUT])
    tip = b.uib("uib", src, spec)
    return ModelGraph(cfg, b.nodes, [tip], require_div32=False)


def build_msyolo(config: ModelConfig, seed: int = 0) -> ModelGraph:
    """Assemble backbone + neck + heads from a config and initialize weights.

    The backbone runs its stages in order, recording the last node at each
    stride; the neck consumes the stride-8/16/32 taps; each head emits a
    (4 + num_classes)-channel raw map.
    """
    b = GraphBuilder(config)
    sc = config.scaled

    # backbone
    stride = 1
    taps = {}
    c_in = config.input_channels
    tip = INPUT
    for idx, spec in enumerate(config.backbone, start=1):
        name = f"backbone.{idx}"
        if isinstance(spec, ConvBlockSpec):
            c_out = sc(spec.c_out)
            tip = b.conv_block(name, tip, c_in, c_out, spec.k, spec.s, spec.activation)
            stride *= spec.s
        elif isinstance(spec, UIBSpec):
            c_out = sc(spec.c_out)
            scaled_spec = UIBSpec(k1=spec.k1, k2=spec.k2, s=spec.s, r=spec.r,
                                  c_in=c_in, c_out=c_out)
            tip = b.uib(name, tip, scaled_spec)
            stride *= spec.s
        elif isinstance(spec, SPPFSpec):
            c_out = sc(spec.c_out)
            tip = b.sppf(name, tip, c_in, c_out, spec.k)
        else:
            raise ConfigurationError(f"unknown backbone spec {type(spec).__name__}")
        c_in = c_out
        taps[stride] = (tip, c_out)

    missing = [s for s in config.head_strides if s not in taps]
    if missing:
        raise ConfigurationError(
            f"backbone produces no taps at strides {missing}; achievable strides: "
            f"{sorted(taps)}")
    (p3, c3), (p4, c4), (p5, c5) = (taps[s] for s in config.head_strides)

    # neck: top-down upsample+concat, bottom-up strided conv+concat
    n3c, n4c, n5c = (sc(c) for c in config.neck_channels)
    up5 = b.add("neck.up5", PUpsample(), [p5])
    cat4 = b.add("neck.cat_td4", PConcat(), [up5, p4])
    td4 = b.conv_block("neck.td4", cat4, c5 + c4, n4c, 3, 1)
    up4 = b.add("neck.up4", PUpsample(), [td4])
    cat3 = b.add("neck.cat_td3", PConcat(), [up4, p3])
    n3 = b.conv_block("neck.td3", cat3, n4c + c3, n3c, 3, 1)
    d3 = b.conv_block("neck.down3", n3, n3c, n3c, 3, 2)
    cat_bu4 = b.add("neck.cat_bu4", PConcat(), [d3, td4])
    n4 = b.conv_block("neck.bu4", cat_bu4, n3c + n4c, n4c, 3, 1)
    d4 = b.conv_block("neck.down4", n4, n4c, n4c, 3, 2)
    cat_bu5 = b.add("neck.cat_bu5", PConcat(), [d4, p5])
    n5 = b.conv_block("neck.bu5", cat_bu5, n4c + c5, n5c, 3, 1)

    # decoupled anchor-free heads: 4 box distances + num_classes logits
    m = config.num_classes
    outputs = []
    for scale, (src, c) in zip(("p3", "p4", "p5"), ((n3, n3c), (n4, n4c), (n5, n5c))):
        name = f"head.{scale}"
        bb = b.conv_block(f"{name}.box", src, c, c, 3, 1)
        bb = b.add(f"{name}.box.out", PConv(c, 4, 1, bias=True), [bb])
        cb = b.conv_block(f"{name}.cls", src, c, c, 3, 1)
        cb = b.add(f"{name}.cls.out", PConv(c, m, 1, bias=True, bias_init=CLS_BIAS_PRIOR), [cb])
        outputs.append(b.add(f"{name}.out", PConcat(), [bb, cb]))

    graph = ModelGraph(config, b.nodes, outputs)
    graph.init_weights(seed)
    return graph


# -- prediction decoding and suppression ---------------------------------


@dataclass
class Detection:
    """One predicted box in pixel units, corners ordered (min < max)."""

    box: tuple  # (x_min, y_min, x_max, y_max)
    class_id: int
    confidence: float


def decode_predictions(raw_maps, conf_threshold: float, strides=(8, 16, 32)) -> list[list[Detection]]:
    """Anchor-free decode of raw head maps into per-image detections.

    Each cell predicts non-negative left/top/right/bottom distances (via
    softplus, in cell units, scaled by the head stride) away from the cell
    center, plus per-class logits. A detection is emitted per (cell, class)
    with sigmoid score >= the threshold; boxes that collapse to zero extent
    are dropped.
    """
    conf_threshold = min(max(float(conf_threshold), 0.0), 1.0)
    # threshold in logit space so sigmoid saturation cannot leak through
    if conf_threshold >= 1.0:
        logit_threshold = np.inf
    elif conf_threshold <= 0.0:
        logit_threshold = -np.inf
    else:
        logit_threshold = math.log(conf_threshold / (1.0 - conf_threshold))
    maps = [m.data if isinstance(m, Tensor) else np.asarray(m) for m in raw_maps]
    n = maps[0].shape[0]
    out = [[] for _ in range(n)]
    for raw, stride in zip(maps, strides):
        _, c, h, w = raw.shape
        dist = T._softplus_np(raw[:, :4].astype(np.float64))
        logits = raw[:, 4:].astype(np.float64)
        scores = T._sigmoid_np(logits)
        cy, cx = np.meshgrid(np.arange(h) + 0.5, np.arange(w) + 0.5, indexing="ij")
        x1 = (cx[None] - dist[:, 0]) * stride
        y1 = (cy[None] - dist[:, 1]) * stride
        x2 = (cx[None] + dist[:, 2]) * stride
        y2 = (cy[None] + dist[:, 3]) * stride
        for img in range(n):
            cls_i, ii, jj = np.nonzero(logits[img] >= logit_threshold)
            for ci, i, j in zip(cls_i, ii, jj):
                box = (x1[img, i, j], y1[img, i, j], x2[img, i, j], y2[img, i, j])
                if box[0] < box[2] and box[1] < box[3]:
                    out[img].append(Detection(box=tuple(float(v) for v in box),
                                              class_id=int(ci),
                                              confidence=float(scores[img, ci, i, j])))
    return out


def _pairwise_iou(box: np.ndarray, others: np.ndarray) -> np.ndarray:
    ix1 = np.maximum(box[0], others[:, 0])
    iy1 = np.maximum(box[1], others[:, 1])
    ix2 = np.minimum(box[2], others[:, 2])
    iy2 = np.minimum(box[3], others[:, 3])
    inter = np.maximum(0.0, ix2 - ix1) * np.maximum(0.0, iy2 - iy1)
    area_a = max(0.0, box[2] - box[0]) * max(0.0, box[3] - box[1])
    area_b = np.maximum(0.0, others[:, 2] - others[:, 0]) * np.maximum(0.0, others[:, 3] - others[:, 1])
    union = area_a + area_b - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


def nms(dets: list[Detection], iou_threshold: float) -> list[Detection]:
    """Class-wise greedy suppression, highest confidence first.

    A detection survives iff its IoU with every already-kept detection of
    the same class is strictly below the threshold. Output is ordered by
    descending confidence (ties by input order).
    """
    if not (0.0 < iou_threshold < 1.0):
        raise UsageError(f"nms iou_threshold must be in (0,1), got {iou_threshold}")
    if len(dets) <= 1:
        return list(dets)
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].confidence, i))
    boxes = np.array([dets[i].box for i in order], dtype=np.float64)
    classes = np.array([dets[i].class_id for i in order])
    keep_mask = np.zeros(len(order), dtype=bool)
    for pos in range(len(order)):
        same = keep_mask & (classes == classes[pos])
        if not same.any():
            keep_mask[pos] = True
            continue
        ious = _pairwise_iou(boxes[pos], boxes[same])
        if np.all(ious < iou_threshold):
            keep_mask[pos] = True
    return [dets[order[pos]] for pos in range(len(order)) if keep_mask[pos]]
