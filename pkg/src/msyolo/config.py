"""Declarative model configuration: block specs, config-file parsing, scaling.

Config files are INI-style ``key = value`` sections. Backbone stages live in
``[backbone.N]`` sections executed in ascending N; ``[model]``, ``[neck]``,
``[head]`` describe the rest of the network, and ``[loss]``/``[train]``/
``[nms]`` sections are passed through to the trainer. The grammar is
documented in ``docs/config.md``.
"""

from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field
from importlib import resources

from .errors import ConfigurationError, ParseError

HEAD_STRIDES = (8, 16, 32)

UIB_KERNELS = (0, 3, 5)


@dataclass(frozen=True)
class ConvBlockSpec:
    """Convolution -> batchnorm -> optional ReLU6, fixed ordering."""

    k: int
    s: int
    c_out: int
    activation: str = "relu6"

    def __post_init__(self):
        if self.k % 2 != 1:
            raise ConfigurationError(f"conv block kernel must be odd, got k={self.k}")
        if self.activation not in ("relu6", "none"):
            raise ConfigurationError(f"unknown activation {self.activation!r}")


@dataclass(frozen=True)
class UIBSpec:
    """Universal inverted bottleneck block.

    ``k1``/``k2`` of 0 omit that depthwise stage entirely; the stride rides
    on the second depthwise stage when present, otherwise on the first,
    otherwise on the expansion. A residual shortcut exists iff ``s == 1``
    and ``c_in == c_out``.
    """

    k1: int
    k2: int
    s: int
    r: float
    c_in: int
    c_out: int

    def __post_init__(self):
        for name, k in (("k1", self.k1), ("k2", self.k2)):
            if k not in UIB_KERNELS:
                raise ConfigurationError(f"UIB {name} must be one of {UIB_KERNELS}, got {k}")
        if self.s not in (1, 2):
            raise ConfigurationError(f"UIB stride must be 1 or 2, got {self.s}")
        if self.r <= 0:
            raise ConfigurationError(f"UIB expansion ratio must be positive, got {self.r}")
        if self.c_in < 1 or self.c_out < 1:
            raise ConfigurationError("UIB channel counts must be positive")

    @property
    def expanded(self) -> int:
        return max(1, int(round(self.r * self.c_in)))

    @property
    def has_residual(self) -> bool:
        return self.s == 1 and self.c_in == self.c_out


@dataclass(frozen=True)
class SPPFSpec:
    """Pyramid pooling tail: 1x1 reduce, three chained max pools, 1x1 fuse."""

    k: int
    c_out: int


@dataclass
class ModelConfig:
    """Everything needed to build the network deterministically."""

    name: str = "msyolo-small"
    input_channels: int = 1
    num_classes: int = 9
    width_scale: float = 1.0
    # (type, kwargs) pairs in execution order; channels are pre-scaling
    backbone: list = field(default_factory=list)
    neck_channels: tuple = (64, 96, 128)
    head_strides: tuple = HEAD_STRIDES

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigurationError(f"num_classes must be >= 1, got {self.num_classes}")
        if self.input_channels not in (1, 3):
            raise ConfigurationError(f"input_channels must be 1 or 3, got {self.input_channels}")
        if self.width_scale <= 0:
            raise ConfigurationError(f"width_scale must be positive, got {self.width_scale}")
        if tuple(self.head_strides) != HEAD_STRIDES:
            raise ConfigurationError(f"head strides are fixed at {HEAD_STRIDES}")
        if len(self.neck_channels) != 3:
            raise ConfigurationError("neck_channels must list exactly three scales")

    def scaled(self, c: int) -> int:
        return max(1, int(round(c * self.width_scale)))

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "input_channels": self.input_channels,
            "num_classes": self.num_classes,
            "width_scale": self.width_scale,
            "backbone": [dataclasses.asdict(s) | {"type": _SPEC_TYPES[type(s)]} for s in self.backbone],
            "neck_channels": list(self.neck_channels),
            "head_strides": list(self.head_strides),
        }

    @staticmethod
    def from_dict(d: dict) -> "ModelConfig":
        backbone = []
        for entry in d["backbone"]:
            entry = dict(entry)
            kind = entry.pop("type")
            backbone.append(_SPEC_CLASSES[kind](**entry))
        return ModelConfig(
            name=d["name"],
            input_channels=d["input_channels"],
            num_classes=d["num_classes"],
            width_scale=d["width_scale"],
            backbone=backbone,
            neck_channels=tuple(d["neck_channels"]),
            head_strides=tuple(d["head_strides"]),
        )


_SPEC_TYPES = {ConvBlockSpec: "conv", UIBSpec: "uib", SPPFSpec: "sppf"}
_SPEC_CLASSES = {"conv": ConvBlockSpec, "uib": UIBSpec, "sppf": SPPFSpec}


def _get(section, key, conv, path, name):
    if key not in section:
        raise ParseError(f"{path}: section [{name}] missing key {key!r}")
    raw = section[key]
    try:
        return conv(raw)
    except ValueError as exc:
        raise ParseError(f"{path}: [{name}] {key} = {raw!r}: {exc}") from None


def _parse_backbone_section(section, path, name, c_in):
    kind = _get(section, "type", str, path, name)
    if kind == "conv":
        return ConvBlockSpec(
            k=_get(section, "k", int, path, name),
            s=_get(section, "s", int, path, name),
            c_out=_get(section, "c", int, path, name),
            activation=section.get("activation", "relu6"),
        )
    if kind == "uib":
        return UIBSpec(
            k1=_get(section, "k1", int, path, name),
            k2=_get(section, "k2", int, path, name),
            s=_get(section, "s", int, path, name),
            r=_get(section, "r", float, path, name),
            c_in=c_in,
            c_out=_get(section, "c", int, path, name),
        )
    if kind == "sppf":
        return SPPFSpec(k=_get(section, "k", int, path, name), c_out=_get(section, "c", int, path, name))
    raise ParseError(f"{path}: section [{name}] has unknown stage type {kind!r}")


def parse_config_text(text: str, path: str = "<string>") -> tuple[ModelConfig, dict]:
    """Parse a config file into (ModelConfig, extra sections).

    Extra sections (``loss``, ``train``, ``nms``, ...) come back as plain
    string dicts for the trainer/CLI layers to interpret.
    """
    parser = configparser.ConfigParser(inline_comment_prefixes=("#",), strict=True)
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ParseError(f"{path}: {exc}") from None

    if "model" not in parser:
        raise ParseError(f"{path}: missing [model] section")
    model = parser["model"]
    input_channels = int(model.get("input_channels", "1"))
    num_classes = int(model.get("num_classes", "9"))
    width_scale = float(model.get("width_scale", "1.0"))
    name = model.get("name", "msyolo")

    stage_names = sorted(
        (s for s in parser.sections() if s.startswith("backbone.")),
        key=lambda s: int(s.split(".", 1)[1]),
    )
    if not stage_names:
        raise ParseError(f"{path}: no [backbone.N] sections found")
    backbone = []
    c_in = input_channels
    for sname in stage_names:
        spec = _parse_backbone_section(parser[sname], path, sname, c_in)
        backbone.append(spec)
        c_in = spec.c_out

    neck_channels = (64, 96, 128)
    if "neck" in parser:
        neck_channels = tuple(int(v) for v in parser["neck"]["channels"].split(","))
    head_strides = HEAD_STRIDES
    if "head" in parser:
        head_strides = tuple(int(v) for v in parser["head"]["strides"].split(","))

    config = ModelConfig(
        name=name,
        input_channels=input_channels,
        num_classes=num_classes,
        width_scale=width_scale,
        backbone=backbone,
        neck_channels=neck_channels,
        head_strides=head_strides,
    )
    extra = {
        s: dict(parser[s])
        for s in parser.sections()
        if s not in ("model", "neck", "head") and not s.startswith("backbone.")
    }
    return config, extra


def load_config(path: str) -> tuple[ModelConfig, dict]:
    """Parse a config from a file path or a packaged config name."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        pkg_text = _packaged_config_text(path)
        if pkg_text is None:
            raise ParseError(f"{path}: no such config file or packaged config") from None
        text = pkg_text
    return parse_config_text(text, path=str(path))


def _packaged_config_text(name: str):
    base = str(name)
    if not base.endswith(".cfg"):
        base += ".cfg"
    ref = resources.files("msyolo").joinpath("configs", base)
    if ref.is_file():
        return ref.read_text(encoding="utf-8")
    return None


def packaged_config_path(name: str) -> str:
    """Resolve a packaged config to a concrete filesystem path."""
    base = name if name.endswith(".cfg") else name + ".cfg"
    ref = resources.files("msyolo").joinpath("configs", base)
    if not ref.is_file():
        raise ParseError(f"no packaged config named {name!r}")
    return str(ref)
