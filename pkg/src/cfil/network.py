"""The two-branch kinship verification network.

Non-local branch: the 6-channel pair image (parent RGB then child RGB) runs
through five conv3x3 -> ReLU -> maxpool(2) stages; the non-local operator
reweights the feature map after stages 3 and 5.

Local branch: a frozen backbone maps each image to a C' x h x w map,
global average and global max pooling are concatenated per image, and the
local (cross-pair) operator reweights the two pooled vectors.

Fusion head: [non-local features | parent vector | child vector] ->
1x1 projection -> FC -> FC -> 2-way softmax. Every trainable tensor is in
:attr:`CFILModel.params`; backbone tensors live in
:attr:`CFILModel.backbone` and never require grad.
"""

from __future__ import annotations

import math
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import ops
from .errors import ConfigurationError, IncompatibleError, InputError
from .rng import STREAM_BACKBONE, STREAM_INIT, make_rng
from .serialization import load_named
from .tensor import Tensor
from .weighted import DEFAULT_MAX_N, DistanceKernel, local_apply, nonlocal_apply_batch

FULL_WIDTHS = (16, 64, 128, 256, 512)
NONLOCAL_AFTER = (3, 5)
FULL_HEAD = (256, 64)
NUM_CLASSES = 2


def parse_scale(value) -> Fraction:
    """Accept 0.25, "0.25" or "1/4"."""
    try:
        scale = Fraction(str(value)).limit_denominator(1 << 16)
    except (ValueError, ZeroDivisionError):
        raise ConfigurationError(f"width scale {value!r} is not a number or ratio") from None
    if scale <= 0:
        raise ConfigurationError(f"width scale must be positive, got {value!r}")
    return scale


def _scaled(width: int, scale: Fraction) -> int:
    return max(1, int(round(width * scale)))


@dataclass(frozen=True)
class NonLocalBranchSpec:
    widths: tuple[int, ...] = FULL_WIDTHS
    width_scale: str = "1"
    in_channels: int = 6
    nonlocal_after: tuple[int, ...] = NONLOCAL_AFTER

    def channels(self) -> list[int]:
        scale = parse_scale(self.width_scale)
        return [_scaled(w, scale) for w in self.widths]

    def output_width(self, image_size: int) -> int:
        side = image_size >> len(self.widths)
        return self.channels()[-1] * side * side


@dataclass(frozen=True)
class BackboneHandle:
    """Frozen per-image feature extractor.

    ``tiny-conv`` builds a three-stage conv net from ``seed``;
    ``external-weights`` loads ``conv{i}.weight`` / ``conv{i}.bias`` from a
    named-tensor container at ``path``.
    """

    kind: str = "tiny-conv"
    path: str | None = None
    widths: tuple[int, ...] = (16, 32, 32)
    seed: int = 0

    def build(self, in_channels: int = 3) -> "OrderedDict[str, Tensor]":
        if self.kind == "tiny-conv":
            rng = make_rng(self.seed, STREAM_BACKBONE)
            tensors: OrderedDict[str, Tensor] = OrderedDict()
            c_in = in_channels
            for i, c_out in enumerate(self.widths, start=1):
                w, b = _conv_init(rng, c_out, c_in, 3)
                tensors[f"conv{i}.weight"] = Tensor(w)
                tensors[f"conv{i}.bias"] = Tensor(b)
                c_in = c_out
            return tensors
        if self.kind == "external-weights":
            if not self.path:
                raise ConfigurationError("external-weights backbone needs a path")
            raw = load_named(self.path)
            tensors = OrderedDict()
            i = 1
            while f"conv{i}.weight" in raw:
                tensors[f"conv{i}.weight"] = Tensor(raw[f"conv{i}.weight"])
                tensors[f"conv{i}.bias"] = Tensor(raw[f"conv{i}.bias"])
                i += 1
            if not tensors:
                raise ConfigurationError(f"{self.path}: no conv1.weight entry")
            return tensors
        raise ConfigurationError(f"unknown backbone kind {self.kind!r}")


@dataclass(frozen=True)
class LocalBranchSpec:
    backbone: BackboneHandle = field(default_factory=BackboneHandle)


@dataclass(frozen=True)
class FusionHead:
    projection: int = FULL_HEAD[0]
    hidden: int = FULL_HEAD[1]
    classes: int = NUM_CLASSES


@dataclass(frozen=True)
class ModelConfig:
    width_scale: str = "1"
    sign_mode: str = "as-algorithm"
    image_size: int = 64
    backbone_kind: str = "tiny-conv"
    backbone_path: str | None = None
    backbone_widths: tuple[int, ...] = (16, 32, 32)
    backbone_seed: int = 0
    max_n: int = DEFAULT_MAX_N
    zero_head: bool = True
    input_mean: float = 0.5
    input_std: float = 0.25

    def __post_init__(self):
        object.__setattr__(self, "width_scale", str(parse_scale(self.width_scale)))
        object.__setattr__(self, "backbone_widths", tuple(int(w) for w in self.backbone_widths))
        DistanceKernel(self.sign_mode)
        if self.image_size < 32 or self.image_size % 32:
            raise ConfigurationError(f"image size must be a positive multiple of 32, got {self.image_size}")

    @property
    def nonlocal_spec(self) -> NonLocalBranchSpec:
        return NonLocalBranchSpec(width_scale=self.width_scale)

    @property
    def local_spec(self) -> LocalBranchSpec:
        return LocalBranchSpec(
            BackboneHandle(self.backbone_kind, self.backbone_path, self.backbone_widths, self.backbone_seed)
        )

    @property
    def head(self) -> FusionHead:
        scale = parse_scale(self.width_scale)
        return FusionHead(_scaled(FULL_HEAD[0], scale), _scaled(FULL_HEAD[1], scale))

    @property
    def kernel(self) -> DistanceKernel:
        return DistanceKernel(self.sign_mode)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone_widths"] = list(self.backbone_widths)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        if "backbone_widths" in known:
            known["backbone_widths"] = tuple(known["backbone_widths"])
        return cls(**known)


def _conv_init(rng: np.random.Generator, c_out: int, c_in: int, k: int):
    fan_in = c_in * k * k
    bound = math.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=(c_out, c_in, k, k))
    return w.astype(np.float32), np.zeros(c_out, dtype=np.float32)


def _fc_init(rng: np.random.Generator, d_in: int, d_out: int):
    bound = math.sqrt(6.0 / d_in)
    w = rng.uniform(-bound, bound, size=(d_in, d_out))
    return w.astype(np.float32), np.zeros(d_out, dtype=np.float32)


def conv_stage(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """conv3x3 (stride 1, padding 1) -> ReLU -> 2x2 max pool (stride 2)."""
    return ops.maxpool2d(ops.relu(ops.conv2d(x, weight, bias, stride=1, padding=1)), 2, 2)


def forward_nonlocal(pair: Tensor, params, spec: NonLocalBranchSpec, kernel: DistanceKernel, max_n: int = DEFAULT_MAX_N) -> Tensor:
    """(N, 6, S, S) pair images -> (N, D_nl) flattened features."""
    if pair.ndim != 4 or pair.shape[1] != spec.in_channels:
        raise InputError(
            f"non-local branch expects (N, {spec.in_channels}, H, W) parent-first pair input, got {pair.shape}"
        )
    h = pair
    for stage in range(1, len(spec.widths) + 1):
        h = conv_stage(h, params[f"nl.conv{stage}.weight"], params[f"nl.conv{stage}.bias"])
        if stage in spec.nonlocal_after:
            h = nonlocal_apply_batch(h, kernel, max_n=max_n)
    return ops.flatten(h)


def backbone_features(images: Tensor, backbone) -> Tensor:
    """Frozen backbone, then [global avg | global max] per image: (N, 2C')."""
    h = images
    i = 1
    while f"conv{i}.weight" in backbone:
        h = conv_stage(h, backbone[f"conv{i}.weight"], backbone[f"conv{i}.bias"])
        i += 1
    return ops.concat([ops.global_avg_pool(h), ops.global_max_pool(h)], axis=1)


def forward_local(parent: Tensor, child: Tensor, backbone, kernel: DistanceKernel, max_n: int = DEFAULT_MAX_N) -> tuple[Tensor, Tensor]:
    if parent.shape[0] != child.shape[0]:
        raise InputError(f"batch sizes differ: parent {parent.shape[0]}, child {child.shape[0]}")
    if parent.ndim != 4 or parent.shape[1] != 3 or child.shape != parent.shape:
        raise InputError(f"local branch expects two (N, 3, h, h) batches, got {parent.shape} and {child.shape}")
    px = backbone_features(parent, backbone)
    cy = backbone_features(child, backbone)
    return local_apply(px, cy, kernel, max_n=max_n)


def fuse_logits(nl: Tensor, fx: Tensor, fy: Tensor, params) -> Tensor:
    if not (nl.shape[0] == fx.shape[0] == fy.shape[0]):
        raise InputError(f"batch sizes differ: {nl.shape[0]}, {fx.shape[0]}, {fy.shape[0]}")
    joined = ops.concat([nl, fx, fy], axis=1)
    expected = params["head.proj.weight"].shape[0]
    if joined.shape[1] != expected:
        raise ConfigurationError(
            f"fusion head expects {expected} input features, got {joined.shape[1]} "
            f"({nl.shape[1]} non-local + {fx.shape[1]} + {fy.shape[1]} local)"
        )
    h = ops.relu(ops.linear(joined, params["head.proj.weight"], params["head.proj.bias"]))
    h = ops.relu(ops.linear(h, params["head.fc1.weight"], params["head.fc1.bias"]))
    return ops.linear(h, params["head.fc2.weight"], params["head.fc2.bias"])


def fuse_and_classify(nl: Tensor, fx: Tensor, fy: Tensor, params) -> Tensor:
    return ops.softmax_rows(fuse_logits(nl, fx, fy, params))


def _check_labels(labels, n: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.shape != (n,):
        raise InputError(f"expected {n} labels, got shape {labels.shape}")
    if not np.all((labels == 0) | (labels == 1)):
        raise InputError("labels must be 0 or 1")
    return labels.astype(np.int64)


def loss(probs: Tensor, labels) -> Tensor:
    """Mean negative log-probability of the true class (floored at 1e-12)."""
    idx = _check_labels(labels, probs.shape[0])
    picked = ops.clamp_min(ops.select_cols(probs, idx), 1e-12)
    return ops.scale(ops.mean(ops.log(picked)), -1.0)


def loss_logit_grad_closed_form(probs, labels) -> np.ndarray:
    """Per-sample d(loss)/d(logits): P(l) for the wrong class, P(l) - 1 for the true one."""
    p = np.array(probs.data if isinstance(probs, Tensor) else probs, dtype=np.float64)
    idx = _check_labels(labels, p.shape[0])
    p[np.arange(p.shape[0]), idx] -= 1.0
    return p


class CFILModel:
    """Parameters plus forward pass for the full network."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 42, dtype=np.float32):
        self.config = config or ModelConfig()
        self.seed = int(seed)
        self.params: OrderedDict[str, Tensor] = OrderedDict()
        self.backbone: OrderedDict[str, Tensor] = self.config.local_spec.backbone.build()
        self._init_params()
        if dtype != np.float32:
            self._cast(dtype)

    def _init_params(self) -> None:
        cfg = self.config
        rng = make_rng(self.seed, STREAM_INIT)
        c_in = cfg.nonlocal_spec.in_channels
        for i, c_out in enumerate(cfg.nonlocal_spec.channels(), start=1):
            w, b = _conv_init(rng, c_out, c_in, 3)
            self.params[f"nl.conv{i}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"nl.conv{i}.bias"] = Tensor(b, requires_grad=True)
            c_in = c_out
        head = cfg.head
        d_in = self.nonlocal_width + 2 * self.local_width
        for name, d_out in (("proj", head.projection), ("fc1", head.hidden), ("fc2", head.classes)):
            w, b = _fc_init(rng, d_in, d_out)
            if name == "fc2" and cfg.zero_head:
                w[:] = 0
            self.params[f"head.{name}.weight"] = Tensor(w, requires_grad=True)
            self.params[f"head.{name}.bias"] = Tensor(b, requires_grad=True)
            d_in = d_out

    def _cast(self, dtype) -> None:
        self.params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        self.backbone = OrderedDict((k, v.astype(dtype)) for k, v in self.backbone.items())

    def astype(self, dtype) -> "CFILModel":
        clone = object.__new__(CFILModel)
        clone.config, clone.seed = self.config, self.seed
        clone.params = OrderedDict((k, v.astype(dtype)) for k, v in self.params.items())
        clone.backbone = OrderedDict((k, v.astype(dtype)) for k, v in self.backbone.items())
        return clone

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    @property
    def nonlocal_width(self) -> int:
        return self.config.nonlocal_spec.output_width(self.config.image_size)

    @property
    def local_width(self) -> int:
        c_last = self.backbone[f"conv{len(self.backbone) // 2}.weight"].shape[0]
        return 2 * c_last

    def trainable(self) -> list[tuple[str, Tensor]]:
        return list(self.params.items())

    def forward_nonlocal(self, pair: Tensor) -> Tensor:
        return forward_nonlocal(pair, self.params, self.config.nonlocal_spec, self.config.kernel, self.config.max_n)

    def forward_local(self, parent: Tensor, child: Tensor) -> tuple[Tensor, Tensor]:
        return forward_local(parent, child, self.backbone, self.config.kernel, self.config.max_n)

    def logits(self, parent: Tensor, child: Tensor) -> Tensor:
        if parent.shape != child.shape:
            raise InputError(f"parent batch {parent.shape} and child batch {child.shape} differ")
        size = self.config.image_size
        if parent.ndim != 4 or parent.shape[1:] != (3, size, size):
            raise InputError(f"expected (N, 3, {size}, {size}) images, got {parent.shape}")
        parent, child = self.normalize(parent), self.normalize(child)
        pair = ops.concat([parent, child], axis=1)
        nl = self.forward_nonlocal(pair)
        fx, fy = self.forward_local(parent, child)
        return fuse_logits(nl, fx, fy, self.params)

    def normalize(self, images: Tensor) -> Tensor:
        """Map [0, 1] pixels to roughly zero mean, unit spread."""
        cfg = self.config
        return ops.affine(images, 1.0 / cfg.input_std, -cfg.input_mean / cfg.input_std)

    def forward(self, parent: Tensor, child: Tensor) -> Tensor:
        """(N, 2) class probabilities; column 1 is the kin (positive) class."""
        return ops.softmax_rows(self.logits(parent, child))

    __call__ = forward

    def state(self) -> "OrderedDict[str, np.ndarray]":
        out: OrderedDict[str, np.ndarray] = OrderedDict()
        for k, v in self.params.items():
            out[f"param/{k}"] = v.data
        for k, v in self.backbone.items():
            out[f"backbone/{k}"] = v.data
        return out

    def load_state(self, tensors) -> None:
        """Overwrite parameters from ``state()``-style names, checking shapes."""
        problems = []
        for prefix, group in (("param/", self.params), ("backbone/", self.backbone)):
            for k, v in group.items():
                arr = tensors.get(prefix + k)
                if arr is None:
                    problems.append(f"{prefix}{k}: missing (model expects {v.shape})")
                elif arr.shape != v.shape:
                    problems.append(f"{prefix}{k}: file {arr.shape} vs model {v.shape}")
        extra = [k for k in tensors if k.startswith(("param/", "backbone/"))
                 and k.split("/", 1)[1] not in (self.params if k.startswith("param/") else self.backbone)]
        problems += [f"{k}: not part of this model" for k in extra]
        if problems:
            raise IncompatibleError("checkpoint does not match model:\n  " + "\n  ".join(problems))
        for k, v in self.params.items():
            v.data = np.array(tensors["param/" + k], dtype=v.dtype)
        for k, v in self.backbone.items():
            v.data = np.array(tensors["backbone/" + k], dtype=v.dtype)


def with_scale(config: ModelConfig, width_scale) -> ModelConfig:
    return replace(config, width_scale=str(parse_scale(width_scale)))
